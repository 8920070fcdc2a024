//! Multi-seed training runs, parameter sweeps and their metric files.
//!
//! Every run is a pure function of the config and its seed. Runs execute as
//! independent jobs on a pool of `jobs` threads; each seed writes its own
//! per-epoch CSV, flushed after every epoch, and the merged CSV and summary
//! are written once all jobs finish.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{gen_pattern_task, gen_regression_task, load_binned, Dataset, PatternTask, RegressionTask, Sample};
use crate::engine::{EpochMetrics, LearningConfig, Trainer};
use crate::error::{Error, Result};
use crate::loss::Target;
use crate::network::{checksum, NetworkSpec, Weights};
use crate::psi::PsiKind;
use crate::signal::SignalMode;

pub const CSV_HEADER: &str = "epoch,seed,split,loss,accuracy";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum DatasetSource {
    Pattern(PatternTask),
    Regression(RegressionTask),
    /// Directories of flat tensor files, read in file-name order.
    Files {
        train: PathBuf,
        #[serde(default)]
        test: Option<PathBuf>,
    },
}

impl DatasetSource {
    pub fn load(&self) -> Result<Dataset> {
        match self {
            DatasetSource::Pattern(task) => gen_pattern_task(task),
            DatasetSource::Regression(task) => gen_regression_task(task),
            DatasetSource::Files { train, test } => Ok(Dataset {
                train: load_dir(train)?,
                test: test.as_deref().map(load_dir).transpose()?.unwrap_or_default(),
            }),
        }
    }
}

/// Every `*.bin` tensor in `dir`, sorted by file name.
pub fn load_dir(dir: &Path) -> Result<Vec<Sample>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "bin"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!("no .bin tensors in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| load_binned(p).and_then(|t| t.to_sample()).map_err(|e| Error::Data(format!("{}: {e}", p.display()))))
        .collect()
}

fn default_batch() -> usize {
    1
}

fn default_jobs() -> usize {
    1
}

fn default_out() -> PathBuf {
    PathBuf::from("runs")
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub network: NetworkSpec,
    pub learning: LearningConfig,
    pub dataset: DatasetSource,
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    pub seeds: Vec<u64>,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default = "default_jobs")]
    pub jobs: usize,
    /// Stop a run once its train accuracy reaches this value.
    #[serde(default)]
    pub target_accuracy: Option<f64>,
    /// Reshuffle the training set every epoch (seeded by run seed and epoch).
    #[serde(default = "yes")]
    pub shuffle: bool,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid experiment config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Checks everything that can be checked without loading data; returns
    /// non-fatal warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        if self.seeds.is_empty() {
            return Err(Error::Config("`seeds` must list at least one seed".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("`epochs` must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("`batch_size` must be at least 1".into()));
        }
        if self.jobs == 0 {
            return Err(Error::Config("`jobs` must be at least 1".into()));
        }
        self.network.validate()?;
        if let Some(a) = self.target_accuracy {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config(format!("target_accuracy must lie in [0, 1], got {a}")));
            }
        }
        let mut dup = self.seeds.clone();
        dup.sort_unstable();
        dup.dedup();
        if dup.len() != self.seeds.len() {
            return Err(Error::Config("`seeds` contains duplicates".into()));
        }
        match &self.dataset {
            DatasetSource::Pattern(task) => {
                task.validate()?;
                self.check_dims(task.width, task.time_steps)?;
                if self.network.output_width() < task.classes {
                    return Err(Error::Config(format!(
                        "network has {} outputs but the task has {} classes",
                        self.network.output_width(),
                        task.classes
                    )));
                }
            }
            DatasetSource::Regression(task) => self.check_dims(task.input_width, task.time_steps)?,
            DatasetSource::Files { .. } => {}
        }
        self.learning.validate()
    }

    fn check_dims(&self, width: usize, t: usize) -> Result<()> {
        if width != self.network.input_width {
            return Err(Error::Config(format!(
                "dataset width {width} does not match network input width {}",
                self.network.input_width
            )));
        }
        if t != self.learning.time_steps {
            return Err(Error::Config(format!(
                "dataset has T = {t} but learning.time_steps is {}",
                self.learning.time_steps
            )));
        }
        Ok(())
    }

    /// Load the data and align the sequence length with it: tensor files
    /// declare their own `T`.
    pub fn prepare(&self) -> Result<(ExperimentConfig, Dataset)> {
        let data = self.dataset.load()?;
        let mut cfg = self.clone();
        if let Some(first) = data.train.first() {
            let t = first.time_steps();
            if data.train.iter().chain(&data.test).any(|s| s.time_steps() != t) {
                return Err(Error::Data("samples differ in sequence length".into()));
            }
            if matches!(self.dataset, DatasetSource::Files { .. }) && cfg.learning.time_steps != t {
                log::info!("using T = {t} from tensor headers (config had {})", cfg.learning.time_steps);
                cfg.learning.signal_onset = cfg.learning.signal_onset.min(t);
                cfg.learning.time_steps = t;
            }
            let width = first.frames.ncols();
            if width != cfg.network.input_width {
                return Err(Error::Config(format!(
                    "samples are {width} wide but the network input is {}",
                    cfg.network.input_width
                )));
            }
        } else {
            return Err(Error::Data("training set is empty".into()));
        }
        cfg.validate()?;
        Ok((cfg, data))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub seed: u64,
    pub split: String,
    pub loss: f64,
    pub accuracy: f64,
}

impl EpochRow {
    pub fn to_csv(&self) -> String {
        format!("{},{},{},{},{}", self.epoch, self.seed, self.split, self.loss, self.accuracy)
    }

    pub fn parse(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').collect();
        let bad = || Error::Data(format!("malformed metrics row `{line}`"));
        if f.len() != 5 {
            return Err(bad());
        }
        Ok(Self {
            epoch: f[0].parse().map_err(|_| bad())?,
            seed: f[1].parse().map_err(|_| bad())?,
            split: f[2].to_string(),
            loss: f[3].parse().map_err(|_| bad())?,
            accuracy: f[4].parse().map_err(|_| bad())?,
        })
    }
}

pub fn parse_csv(text: &str) -> Result<Vec<EpochRow>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        _ => return Err(Error::Data(format!("metrics file must start with `{CSV_HEADER}`"))),
    }
    lines.filter(|l| !l.trim().is_empty()).map(EpochRow::parse).collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub epochs_run: usize,
    /// First epoch whose train accuracy met the target, if one was set.
    pub reached_target: Option<usize>,
    pub train: EpochMetrics,
    pub test: Option<EpochMetrics>,
    pub weight_checksums: Vec<u64>,
    pub warnings: Vec<String>,
    #[serde(skip)]
    pub history: Vec<EpochRow>,
    #[serde(skip)]
    pub weights: Option<Weights>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl MeanStd {
    /// Sample standard deviation (n - 1); zero for a single value.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN, n };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean, std, n }
    }

    /// `mean±std` in percent, as accuracy tables print it.
    pub fn percent(&self) -> String {
        format!("{:.2}±{:.2}", 100.0 * self.mean, 100.0 * self.std)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Summary {
    pub train_loss: MeanStd,
    pub train_accuracy: MeanStd,
    pub test_loss: Option<MeanStd>,
    pub test_accuracy: Option<MeanStd>,
    /// `mean±std` of the reported accuracy (test when available).
    pub accuracy: String,
    pub runs: Vec<RunResult>,
}

impl Summary {
    pub fn from_runs(runs: Vec<RunResult>) -> Self {
        let col = |f: &dyn Fn(&RunResult) -> Option<f64>| runs.iter().filter_map(f).collect::<Vec<_>>();
        let train_loss = MeanStd::of(&col(&|r| Some(r.train.loss)));
        let train_accuracy = MeanStd::of(&col(&|r| Some(r.train.accuracy)));
        let test_l = col(&|r| r.test.map(|t| t.loss));
        let test_a = col(&|r| r.test.map(|t| t.accuracy));
        let test_loss = (!test_l.is_empty()).then(|| MeanStd::of(&test_l));
        let test_accuracy = (!test_a.is_empty()).then(|| MeanStd::of(&test_a));
        let accuracy = test_accuracy.unwrap_or(train_accuracy).percent();
        Self { train_loss, train_accuracy, test_loss, test_accuracy, accuracy, runs }
    }

    /// Recompute the summary statistics from merged per-epoch rows: the
    /// last epoch of every seed.
    pub fn stats_from_rows(rows: &[EpochRow]) -> BTreeMap<String, MeanStd> {
        let mut last: BTreeMap<(String, u64), &EpochRow> = BTreeMap::new();
        for r in rows {
            let e = last.entry((r.split.clone(), r.seed)).or_insert(r);
            if r.epoch >= e.epoch {
                *e = r;
            }
        }
        let mut out = BTreeMap::new();
        for split in ["train", "test"] {
            let picked: Vec<&&EpochRow> = last.iter().filter(|((s, _), _)| s == split).map(|(_, r)| r).collect();
            if picked.is_empty() {
                continue;
            }
            let loss: Vec<f64> = picked.iter().map(|r| r.loss).collect();
            let acc: Vec<f64> = picked.iter().map(|r| r.accuracy).collect();
            out.insert(format!("{split}_loss"), MeanStd::of(&loss));
            out.insert(format!("{split}_accuracy"), MeanStd::of(&acc));
        }
        out
    }
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ epoch as u64)
}

/// Train one seed to completion. `csv` receives each epoch's rows as soon
/// as they exist.
pub fn run_seed(
    cfg: &ExperimentConfig,
    data: &Dataset,
    seed: u64,
    mut csv: Option<&mut dyn Write>,
) -> Result<RunResult> {
    let mut trainer = Trainer::new(cfg.network.clone(), cfg.learning.clone(), seed)?;
    let mut order: Vec<Sample> = data.train.clone();
    let mut history = Vec::new();
    let mut reached = None;
    let mut train = EpochMetrics::default();
    let mut test = None;
    let mut epochs_run = 0;
    for epoch in 1..=cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut epoch_rng(seed, epoch));
        }
        trainer.train_epoch(&order, cfg.batch_size)?;
        train = EpochMetrics::from_sequences(&trainer.evaluate(&data.train)?);
        test = (!data.test.is_empty())
            .then(|| trainer.evaluate(&data.test).map(|m| EpochMetrics::from_sequences(&m)))
            .transpose()?;
        let mut rows =
            vec![EpochRow { epoch, seed, split: "train".into(), loss: train.loss, accuracy: train.accuracy }];
        if let Some(t) = test {
            rows.push(EpochRow { epoch, seed, split: "test".into(), loss: t.loss, accuracy: t.accuracy });
        }
        if let Some(w) = csv.as_deref_mut() {
            for r in &rows {
                writeln!(w, "{}", r.to_csv())?;
            }
            w.flush()?;
        }
        log::info!("seed {seed} epoch {epoch}: train loss {:.4} acc {:.4}", train.loss, train.accuracy);
        history.extend(rows);
        epochs_run = epoch;
        if let Some(target) = cfg.target_accuracy {
            if train.accuracy >= target {
                reached = Some(epoch);
                break;
            }
        }
    }
    Ok(RunResult {
        seed,
        epochs_run,
        reached_target: reached,
        train,
        test,
        weight_checksums: trainer.weights.iter_matrices().map(checksum).collect(),
        warnings: trainer.warnings.clone(),
        history,
        weights: Some(trainer.weights),
    })
}

/// Run `work` over `items` on at most `jobs` threads, keeping input order.
pub fn run_jobs<T, R, F>(jobs: usize, items: &[T], work: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync + Send,
{
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start job pool: {e}")))?;
    pool.install(|| items.par_iter().map(&work).collect())
}

fn write_outputs(dir: &Path, runs: &[RunResult], summary: &Summary) -> Result<()> {
    let mut csv = BufWriter::new(File::create(dir.join("epochs.csv"))?);
    writeln!(csv, "{CSV_HEADER}")?;
    for r in runs {
        for row in &r.history {
            writeln!(csv, "{}", row.to_csv())?;
        }
    }
    csv.flush()?;
    fs::write(dir.join("summary.json"), serde_json::to_string_pretty(summary)?)?;
    for r in runs {
        if let Some(w) = &r.weights {
            fs::write(dir.join(format!("weights_seed{}.json", r.seed)), serde_json::to_string(w)?)?;
        }
    }
    Ok(())
}

fn seed_csv(dir: &Path, seed: u64) -> Result<BufWriter<File>> {
    let mut w = BufWriter::new(File::create(dir.join(format!("epochs_seed{seed}.csv")))?);
    writeln!(w, "{CSV_HEADER}")?;
    w.flush()?;
    Ok(w)
}

/// Train every seed and write `epochs.csv`, `summary.json` and the final
/// weights under `out_dir`.
pub fn cmd_train(config: &ExperimentConfig) -> Result<Summary> {
    let (cfg, data) = config.prepare()?;
    fs::create_dir_all(&cfg.out_dir)?;
    let runs = run_jobs(cfg.jobs, &cfg.seeds, |&seed| {
        let mut w = seed_csv(&cfg.out_dir, seed)?;
        run_seed(&cfg, &data, seed, Some(&mut w))
    })?;
    let summary = Summary::from_runs(runs);
    write_outputs(&cfg.out_dir, &summary.runs, &summary)?;
    Ok(summary)
}

/// Axes of an ablation grid; empty axes keep the base config value.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepGrid {
    #[serde(default)]
    pub alpha_post: Vec<f64>,
    #[serde(default)]
    pub lambda_pre: Vec<f64>,
    #[serde(default)]
    pub lambda_post: Vec<f64>,
    #[serde(default)]
    pub psi: Vec<PsiKind>,
    #[serde(default)]
    pub mode: Vec<SignalMode>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub alpha_post: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_pre: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_post: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psi: Option<PsiKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mode: Option<SignalMode>,
}

impl Cell {
    pub fn apply(&self, base: &ExperimentConfig) -> ExperimentConfig {
        let mut cfg = base.clone();
        let stdp = &mut cfg.learning.stdp;
        if let Some(v) = self.alpha_post {
            stdp.alpha_post = v;
        }
        if let Some(v) = self.lambda_pre {
            stdp.lambda_pre = v;
        }
        if let Some(v) = self.lambda_post {
            stdp.lambda_post = v;
        }
        if let Some(p) = self.psi {
            for layer in cfg.network.layers.iter_mut().filter(|l| l.kind.is_spiking()) {
                layer.psi = p;
            }
        }
        if let Some(m) = self.mode {
            cfg.learning.mode = m;
        }
        cfg
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if let Some(v) = self.alpha_post {
            parts.push(format!("alpha_post={v}"));
        }
        if let Some(v) = self.lambda_pre {
            parts.push(format!("lambda_pre={v}"));
        }
        if let Some(v) = self.lambda_post {
            parts.push(format!("lambda_post={v}"));
        }
        if let Some(p) = self.psi {
            parts.push(format!("psi={p}"));
        }
        if let Some(m) = self.mode {
            parts.push(format!("mode={}", m.name()));
        }
        parts.join(" ")
    }
}

fn axis<T: Copy>(values: &[T]) -> Vec<Option<T>> {
    if values.is_empty() {
        vec![None]
    } else {
        values.iter().copied().map(Some).collect()
    }
}

impl SweepGrid {
    pub fn is_empty(&self) -> bool {
        self.alpha_post.is_empty()
            && self.lambda_pre.is_empty()
            && self.lambda_post.is_empty()
            && self.psi.is_empty()
            && self.mode.is_empty()
    }

    /// Cross product in axis order (the last axis varies fastest).
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for alpha_post in axis(&self.alpha_post) {
            for lambda_pre in axis(&self.lambda_pre) {
                for lambda_post in axis(&self.lambda_post) {
                    for psi in axis(&self.psi) {
                        for mode in axis(&self.mode) {
                            out.push(Cell { alpha_post, lambda_pre, lambda_post, psi, mode });
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: Cell,
    pub label: String,
    pub summary: Summary,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationSummary {
    pub rows: Vec<AblationRow>,
}

impl AblationSummary {
    /// One line per cell: the setting and `mean±std` accuracies.
    pub fn to_table(&self) -> String {
        let labels: Vec<String> = self.rows.iter().map(|r| r.label.clone()).collect();
        let w = labels.iter().map(String::len).max().unwrap_or(0).max("setting".len());
        let mut s = format!("{:<w$}  {:>13}  {:>13}\n", "setting", "train acc %", "test acc %");
        for (row, label) in self.rows.iter().zip(&labels) {
            let test = row.summary.test_accuracy.map_or_else(|| "-".to_string(), |m| m.percent());
            s.push_str(&format!("{label:<w$}  {:>13}  {test:>13}\n", row.summary.train_accuracy.percent()));
        }
        s
    }
}

/// Train every seed of every grid cell. Cells land in `out_dir/cell_<i>`.
pub fn cmd_ablate(config: &ExperimentConfig, grid: &SweepGrid) -> Result<AblationSummary> {
    if grid.is_empty() {
        return Err(Error::Config("ablation grid is empty: give at least one value on one axis".into()));
    }
    let (base, data) = config.prepare()?;
    let cells = grid.cells();
    let mut configs = Vec::with_capacity(cells.len());
    for (i, cell) in cells.iter().enumerate() {
        let mut cfg = cell.apply(&base);
        cfg.out_dir = base.out_dir.join(format!("cell_{i}"));
        cfg.validate()?;
        fs::create_dir_all(&cfg.out_dir)?;
        configs.push(cfg);
    }
    let jobs: Vec<(usize, u64)> = (0..cells.len()).flat_map(|c| base.seeds.iter().map(move |&s| (c, s))).collect();
    let results = run_jobs(base.jobs, &jobs, |&(c, seed)| {
        let mut w = seed_csv(&configs[c].out_dir, seed)?;
        run_seed(&configs[c], &data, seed, Some(&mut w))
    })?;
    let mut per_cell: Vec<Vec<RunResult>> = vec![Vec::new(); cells.len()];
    for ((c, _), r) in jobs.iter().zip(results) {
        per_cell[*c].push(r);
    }
    let mut rows = Vec::with_capacity(cells.len());
    for ((cell, cfg), runs) in cells.into_iter().zip(&configs).zip(per_cell) {
        let summary = Summary::from_runs(runs);
        write_outputs(&cfg.out_dir, &summary.runs, &summary)?;
        rows.push(AblationRow { label: cell.label(), cell, summary });
    }
    let out = AblationSummary { rows };
    fs::write(base.out_dir.join("ablation.json"), serde_json::to_string_pretty(&out)?)?;
    fs::write(base.out_dir.join("ablation.txt"), out.to_table())?;
    Ok(out)
}

/// Gnuplot data blocks, one per seed (select with `index`): columns
/// `epoch train_loss train_acc test_loss test_acc`.
pub fn plot_data(rows: &[EpochRow]) -> String {
    let mut by_seed: BTreeMap<u64, BTreeMap<usize, [f64; 4]>> = BTreeMap::new();
    for r in rows {
        let e = by_seed.entry(r.seed).or_default().entry(r.epoch).or_insert([f64::NAN; 4]);
        let base = if r.split == "test" { 2 } else { 0 };
        e[base] = r.loss;
        e[base + 1] = r.accuracy;
    }
    let mut s = String::new();
    for (i, (seed, epochs)) in by_seed.iter().enumerate() {
        if i > 0 {
            s.push_str("\n\n");
        }
        s.push_str(&format!("# seed {seed}\n# epoch train_loss train_acc test_loss test_acc\n"));
        for (epoch, v) in epochs {
            s.push_str(&format!("{epoch} {} {} {} {}\n", v[0], v[1], v[2], v[3]));
        }
    }
    s
}

/// Class count implied by a dataset's labels.
pub fn num_classes(data: &Dataset) -> usize {
    data.train
        .iter()
        .chain(&data.test)
        .filter_map(|s| match s.target {
            Target::Class(c) => Some(c + 1),
            Target::Values(_) => None,
        })
        .max()
        .unwrap_or(0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::LossKind;
    use crate::network::{LayerKind, LayerSpec};
    use crate::neuron::NeuronParams;
    use crate::optim::OptimizerKind;
    use crate::plasticity::StdpParams;

    pub(crate) fn small_config(out: &Path) -> ExperimentConfig {
        let p = NeuronParams::default();
        ExperimentConfig {
            network: NetworkSpec::new(
                12,
                vec![LayerSpec::new(LayerKind::Recurrent, 16, p), LayerSpec::new(LayerKind::Readout, 3, p)],
            ),
            learning: LearningConfig {
                mode: SignalMode::Bp,
                time_steps: 8,
                signal_onset: 4,
                learning_rate: 1e-2,
                stdp: StdpParams::default(),
                loss: LossKind::CrossEntropy,
                optimizer: OptimizerKind::default(),
            },
            dataset: DatasetSource::Pattern(PatternTask {
                classes: 3,
                width: 12,
                time_steps: 8,
                spikes_per_pattern: 10,
                noise_flip_prob: 0.02,
                train_per_class: 3,
                test_per_class: 1,
                seed: 5,
            }),
            epochs: 3,
            batch_size: 2,
            seeds: vec![1, 2],
            out_dir: out.to_path_buf(),
            jobs: 2,
            target_accuracy: None,
            shuffle: true,
        }
    }

    #[test]
    fn validation_messages() {
        let dir = tempfile::tempdir().unwrap();
        let base = small_config(dir.path());
        base.validate().unwrap();
        let mut c = base.clone();
        c.seeds.clear();
        assert!(c.validate().unwrap_err().to_string().contains("seeds"));
        let mut c = base.clone();
        c.epochs = 0;
        assert!(c.validate().unwrap_err().to_string().contains("epochs"));
        let mut c = base.clone();
        c.learning.time_steps = 9;
        assert!(c.validate().is_err());
        let mut c = base.clone();
        c.network.input_width = 11;
        c.network.layers[0] = LayerSpec::new(LayerKind::Recurrent, 16, NeuronParams::default());
        assert!(c.validate().is_err());
        let mut c = base;
        c.seeds = vec![3, 3];
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let c = small_config(dir.path());
        let text = serde_json::to_string_pretty(&c).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), c);
        assert!(ExperimentConfig::from_json("{\"epochs\": 1}").is_err());
    }

    #[test]
    fn train_writes_reproducible_metrics() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let sa = cmd_train(&small_config(a.path())).unwrap();
        let mut cb = small_config(b.path());
        cb.jobs = 1;
        cmd_train(&cb).unwrap();
        let csv_a = fs::read_to_string(a.path().join("epochs.csv")).unwrap();
        let csv_b = fs::read_to_string(b.path().join("epochs.csv")).unwrap();
        assert_eq!(csv_a, csv_b);
        assert!(csv_a.starts_with(CSV_HEADER));
        // 2 seeds x 3 epochs x (train, test)
        let rows = parse_csv(&csv_a).unwrap();
        assert_eq!(rows.len(), 12);
        let per_seed = fs::read_to_string(a.path().join("epochs_seed2.csv")).unwrap();
        assert_eq!(parse_csv(&per_seed).unwrap().len(), 6);

        let stats = Summary::stats_from_rows(&rows);
        let close = |x: MeanStd, y: MeanStd| (x.mean - y.mean).abs() <= 1e-12 && (x.std - y.std).abs() <= 1e-12;
        assert!(close(stats["train_accuracy"], sa.train_accuracy));
        assert!(close(stats["test_loss"], sa.test_loss.unwrap()));
        let json: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(a.path().join("summary.json")).unwrap()).unwrap();
        assert_eq!(json["runs"].as_array().unwrap().len(), 2);
        assert!(a.path().join("weights_seed1.json").exists());
    }

    #[test]
    fn early_stop_on_target() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small_config(dir.path());
        c.target_accuracy = Some(0.0);
        c.seeds = vec![4];
        let s = cmd_train(&c).unwrap();
        assert_eq!(s.runs[0].epochs_run, 1);
        assert_eq!(s.runs[0].reached_target, Some(1));
    }

    #[test]
    fn sweep_cells_and_empty_grid() {
        let grid = SweepGrid {
            alpha_post: vec![-1.0, 0.0, 1.0],
            psi: vec![PsiKind::InverseSquare, PsiKind::Triangular],
            ..Default::default()
        };
        let cells = grid.cells();
        assert_eq!(cells.len(), 6);
        assert_eq!(cells[1].label(), "alpha_post=-1 psi=triangular");
        assert!(SweepGrid::default().is_empty());
        let dir = tempfile::tempdir().unwrap();
        assert!(cmd_ablate(&small_config(dir.path()), &SweepGrid::default()).is_err());
    }

    #[test]
    fn single_cell_ablation_equals_train() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let base = small_config(a.path());
        let grid = SweepGrid { alpha_post: vec![base.learning.stdp.alpha_post], ..Default::default() };
        let abl = cmd_ablate(&base, &grid).unwrap();
        let train = cmd_train(&small_config(b.path())).unwrap();
        assert_eq!(abl.rows.len(), 1);
        let checks = |s: &Summary| s.runs.iter().map(|r| r.weight_checksums.clone()).collect::<Vec<_>>();
        assert_eq!(checks(&abl.rows[0].summary), checks(&train));
        assert!(a.path().join("cell_0/epochs.csv").exists());
        assert!(abl.to_table().contains("alpha_post=-1"));
    }

    #[test]
    fn plot_blocks_per_seed() {
        let rows =
            parse_csv(&format!("{CSV_HEADER}\n1,1,train,0.5,0.25\n1,1,test,0.6,0.2\n1,2,train,0.4,0.5\n")).unwrap();
        let text = plot_data(&rows);
        assert_eq!(text.matches("# seed").count(), 2);
        assert!(text.contains("1 0.5 0.25 0.6 0.2"));
        assert!(text.contains("1 0.4 0.5 NaN NaN"));
    }

    #[test]
    fn mean_std_uses_sample_estimator() {
        let m = MeanStd::of(&[1.0, 2.0, 3.0]);
        assert_eq!((m.mean, m.std), (2.0, 1.0));
        assert_eq!(MeanStd::of(&[0.7]).std, 0.0);
        assert_eq!(MeanStd::of(&[0.9, 0.9]).percent(), "90.00±0.00");
    }
}
