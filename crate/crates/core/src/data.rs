//! Event streams, frame binning, flat tensor files and synthetic datasets.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayD, IxDyn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::loss::Target;

/// One training or evaluation sequence: `T x input_width` frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub frames: Array2<f64>,
    pub target: Target,
}

impl Sample {
    pub fn time_steps(&self) -> usize {
        self.frames.nrows()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Event {
    /// Microseconds.
    pub t: u64,
    pub x: u32,
    pub y: u32,
    /// 0 or 1.
    pub p: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventStream {
    pub events: Vec<Event>,
    pub width: u32,
    pub height: u32,
}

impl EventStream {
    pub fn new(events: Vec<Event>, width: u32, height: u32) -> Result<Self> {
        let s = Self { events, width, height };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        for (i, e) in self.events.iter().enumerate() {
            if e.x >= self.width || e.y >= self.height {
                return Err(Error::Data(format!(
                    "event {i} at ({}, {}) outside {}x{} sensor",
                    e.x, e.y, self.width, self.height
                )));
            }
            if e.p > 1 {
                return Err(Error::Data(format!("event {i} has polarity {}", e.p)));
            }
            if i > 0 && e.t < self.events[i - 1].t {
                return Err(Error::Data(format!("event {i} is out of time order")));
            }
        }
        Ok(())
    }

    /// Parses `t_us,x,y,p` lines. A non-numeric first line is treated as a
    /// header. Sensor dims default to the observed extent.
    pub fn from_csv<R: Read>(reader: R, dims: Option<(u32, u32)>) -> Result<Self> {
        let mut events = Vec::new();
        for (n, line) in BufReader::new(reader).lines().enumerate() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 4 {
                return Err(Error::Data(format!("line {}: expected 4 fields, got {}", n + 1, fields.len())));
            }
            let parsed =
                (fields[0].parse::<u64>(), fields[1].parse::<u32>(), fields[2].parse::<u32>(), fields[3].parse::<u8>());
            match parsed {
                (Ok(t), Ok(x), Ok(y), Ok(p)) => events.push(Event { t, x, y, p }),
                _ if n == 0 => continue,
                _ => return Err(Error::Data(format!("line {}: malformed event `{line}`", n + 1))),
            }
        }
        let (width, height) = dims.unwrap_or_else(|| {
            let w = events.iter().map(|e| e.x + 1).max().unwrap_or(1);
            let h = events.iter().map(|e| e.y + 1).max().unwrap_or(1);
            (w, h)
        });
        Self::new(events, width, height)
    }

    pub fn load_csv(path: &Path, dims: Option<(u32, u32)>) -> Result<Self> {
        Self::from_csv(File::open(path)?, dims)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum BinMode {
    Count,
    #[default]
    Binary,
}

/// Frames of shape `T x C x H x W` (or `T x C` for 1-D streams).
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedTensor {
    pub data: ArrayD<f32>,
    pub label: Option<usize>,
    pub bin_ms: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorHeader {
    shape: Vec<usize>,
    dtype: String,
    #[serde(default)]
    label: Option<usize>,
    #[serde(default)]
    bin_ms: f64,
}

impl BinnedTensor {
    pub fn time_steps(&self) -> usize {
        self.data.shape().first().copied().unwrap_or(0)
    }

    /// Flatten every frame into one input vector.
    pub fn to_sample(&self) -> Result<Sample> {
        let t = self.time_steps();
        if t == 0 {
            return Err(Error::Data("tensor has no frames".into()));
        }
        let per_frame = self.data.len() / t;
        let flat: Vec<f64> = self.data.iter().map(|&v| v as f64).collect();
        let frames = Array2::from_shape_vec((t, per_frame), flat).map_err(|e| Error::Data(e.to_string()))?;
        let label = self.label.ok_or_else(|| Error::Data("tensor has no label".into()))?;
        Ok(Sample { frames, target: Target::Class(label) })
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = TensorHeader {
            shape: self.data.shape().to_vec(),
            dtype: "f32".into(),
            label: self.label,
            bin_ms: self.bin_ms,
        };
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        for v in self.data.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(r: R) -> Result<Self> {
        let mut r = BufReader::new(r);
        let mut line = Vec::new();
        r.read_until(b'\n', &mut line)?;
        if line.last() != Some(&b'\n') {
            return Err(Error::Corrupt("missing header line".into()));
        }
        let header: TensorHeader =
            serde_json::from_slice(&line).map_err(|e| Error::Corrupt(format!("malformed header: {e}")))?;
        if header.dtype != "f32" {
            return Err(Error::Corrupt(format!("unsupported dtype `{}`", header.dtype)));
        }
        if header.shape.is_empty() {
            return Err(Error::Corrupt("empty shape".into()));
        }
        let count: usize = header.shape.iter().product();
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        if payload.len() != count * 4 {
            return Err(Error::Corrupt(format!(
                "payload has {} bytes, shape {:?} needs {}",
                payload.len(),
                header.shape,
                count * 4
            )));
        }
        let values: Vec<f32> = payload.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let data = ArrayD::from_shape_vec(IxDyn(&header.shape), values).map_err(|e| Error::Corrupt(e.to_string()))?;
        Ok(Self { data, label: header.label, bin_ms: header.bin_ms })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }
}

pub fn load_binned(path: &Path) -> Result<BinnedTensor> {
    BinnedTensor::read_from(File::open(path)?)
}

fn scatter(data: &mut ArrayD<f32>, bin: usize, e: &Event) {
    data[[bin, e.p as usize, e.y as usize, e.x as usize]] += 1.0;
}

fn clamp_binary(mut data: ArrayD<f32>, mode: BinMode) -> ArrayD<f32> {
    if mode == BinMode::Binary {
        data.mapv_inplace(|v| if v > 0.0 { 1.0 } else { 0.0 });
    }
    data
}

/// `num_bins` equal-width windows spanning `[t_first, t_last]`; the last
/// window is closed on the right. Polarity selects the channel.
pub fn bin_events(stream: &EventStream, num_bins: usize, mode: BinMode) -> Result<BinnedTensor> {
    if num_bins == 0 {
        return Err(Error::Data("need at least one bin".into()));
    }
    let (Some(first), Some(last)) = (stream.events.first(), stream.events.last()) else {
        return Err(Error::Data("event stream is empty".into()));
    };
    let span = last.t - first.t;
    if span == 0 {
        return Err(Error::Data("event stream has zero duration".into()));
    }
    let shape = [num_bins, 2, stream.height as usize, stream.width as usize];
    let mut data = ArrayD::zeros(IxDyn(&shape));
    for e in &stream.events {
        let offset = (e.t - first.t) as u128;
        let bin = ((offset * num_bins as u128) / span as u128).min(num_bins as u128 - 1) as usize;
        scatter(&mut data, bin, e);
    }
    Ok(BinnedTensor { data: clamp_binary(data, mode), label: None, bin_ms: span as f64 / num_bins as f64 / 1000.0 })
}

/// Fixed-duration windows of `bin_us` starting at the first event; events
/// past the last window are dropped.
pub fn bin_events_fixed(stream: &EventStream, bin_us: u64, num_bins: usize, mode: BinMode) -> Result<BinnedTensor> {
    if num_bins == 0 || bin_us == 0 {
        return Err(Error::Data("bin count and width must be positive".into()));
    }
    let Some(first) = stream.events.first() else {
        return Err(Error::Data("event stream is empty".into()));
    };
    let shape = [num_bins, 2, stream.height as usize, stream.width as usize];
    let mut data = ArrayD::zeros(IxDyn(&shape));
    for e in &stream.events {
        let bin = ((e.t - first.t) / bin_us) as usize;
        if bin < num_bins {
            scatter(&mut data, bin, e);
        }
    }
    Ok(BinnedTensor { data: clamp_binary(data, mode), label: None, bin_ms: bin_us as f64 / 1000.0 })
}

/// Spatio-temporal pattern classification task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternTask {
    pub classes: usize,
    pub width: usize,
    pub time_steps: usize,
    /// Active (1) entries in each class template.
    pub spikes_per_pattern: usize,
    pub noise_flip_prob: f64,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub seed: u64,
}

impl PatternTask {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if self.width == 0 || self.time_steps == 0 {
            return Err(Error::Config("pattern width and length must be positive".into()));
        }
        let cells = self.width * self.time_steps;
        if self.spikes_per_pattern == 0 || self.spikes_per_pattern > cells {
            return Err(Error::Config(format!(
                "spikes_per_pattern {} out of range 1..={cells}",
                self.spikes_per_pattern
            )));
        }
        if !(0.0..=1.0).contains(&self.noise_flip_prob) {
            return Err(Error::Config(format!("noise_flip_prob must lie in [0, 1], got {}", self.noise_flip_prob)));
        }
        Ok(())
    }
}

pub fn gen_pattern_task(task: &PatternTask) -> Result<Dataset> {
    task.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
    let cells = task.width * task.time_steps;
    let templates: Vec<Array2<f64>> = (0..task.classes)
        .map(|_| {
            let mut idx: Vec<usize> = (0..cells).collect();
            idx.shuffle(&mut rng);
            let mut t = Array2::zeros((task.time_steps, task.width));
            for &k in &idx[..task.spikes_per_pattern] {
                t[[k / task.width, k % task.width]] = 1.0;
            }
            t
        })
        .collect();
    let draw = |class: usize, rng: &mut ChaCha8Rng| {
        let frames = templates[class].mapv(|v| {
            if task.noise_flip_prob > 0.0 && rng.gen_bool(task.noise_flip_prob) {
                1.0 - v
            } else {
                v
            }
        });
        Sample { frames, target: Target::Class(class) }
    };
    let mut data = Dataset::default();
    for _ in 0..task.train_per_class {
        for c in 0..task.classes {
            data.train.push(draw(c, &mut rng));
        }
    }
    for _ in 0..task.test_per_class {
        for c in 0..task.classes {
            data.test.push(draw(c, &mut rng));
        }
    }
    Ok(data)
}

/// Regression workload: one random binary input vector repeated over all
/// steps with a scalar target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegressionTask {
    pub input_width: usize,
    pub time_steps: usize,
    pub num_samples: usize,
    #[serde(default = "half")]
    pub density: f64,
    pub seed: u64,
}

fn half() -> f64 {
    0.5
}

pub fn gen_regression_task(task: &RegressionTask) -> Result<Dataset> {
    if !(0.0..=1.0).contains(&task.density) {
        return Err(Error::Config(format!("density must lie in [0, 1], got {}", task.density)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
    let train = (0..task.num_samples)
        .map(|_| {
            let x =
                Array1::from_shape_simple_fn(task.input_width, || if rng.gen_bool(task.density) { 1.0 } else { 0.0 });
            let frames = Array2::from_shape_fn((task.time_steps, task.input_width), |(_, j)| x[j]);
            Sample { frames, target: Target::Values(Array1::from_elem(1, rng.gen_range(-1.0..1.0))) }
        })
        .collect();
    Ok(Dataset { train, test: vec![] })
}
