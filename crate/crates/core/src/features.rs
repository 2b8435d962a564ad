//! MFCC-39 extraction, mean/variance normalization and frame concatenation.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use ndarray::{s, Array1, Array2, ArrayView2};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::corpus::AudioBuffer;
use crate::error::{Error, Result};
use crate::preprocess::frame_count;
use crate::scalar::Scalar;

/// Lower bound applied to per-dimension standard deviations.
pub const STD_FLOOR: f64 = 1e-6;

/// Frames × dims feature matrix with frame timing.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix<T> {
    pub data: Array2<T>,
    pub frame_win_s: f64,
    pub frame_hop_s: f64,
    pub speaker_id: Option<String>,
    pub file_id: Option<String>,
}

impl<T: Scalar> FeatureMatrix<T> {
    pub fn new(data: Array2<T>, frame_win_s: f64, frame_hop_s: f64) -> Self {
        Self {
            data,
            frame_win_s,
            frame_hop_s,
            speaker_id: None,
            file_id: None,
        }
    }

    pub fn frames(&self) -> usize {
        self.data.nrows()
    }

    pub fn dims(&self) -> usize {
        self.data.ncols()
    }

    pub fn with_ids(mut self, speaker_id: Option<String>, file_id: Option<String>) -> Self {
        self.speaker_id = speaker_id;
        self.file_id = file_id;
        self
    }

    fn with_data(&self, data: Array2<T>) -> Self {
        Self {
            data,
            frame_win_s: self.frame_win_s,
            frame_hop_s: self.frame_hop_s,
            speaker_id: self.speaker_id.clone(),
            file_id: self.file_id.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MfccConfig {
    pub preemphasis: f64,
    pub win_s: f64,
    pub hop_s: f64,
    pub n_mels: usize,
    pub n_ceps: usize,
    pub log_floor: f64,
    pub f_min: f64,
    /// Upper edge of the filterbank; `None` means Nyquist.
    pub f_max: Option<f64>,
}

impl Default for MfccConfig {
    fn default() -> Self {
        Self {
            preemphasis: 0.97,
            win_s: 0.025,
            hop_s: 0.010,
            n_mels: 20,
            n_ceps: 13,
            log_floor: 1e-10,
            f_min: 0.0,
            f_max: None,
        }
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filters over the `n_fft / 2 + 1` non-negative frequency bins.
pub fn mel_filterbank(n_mels: usize, n_fft: usize, sample_rate: u32, f_min: f64, f_max: f64) -> Array2<f64> {
    let n_bins = n_fft / 2 + 1;
    let (m_lo, m_hi) = (hz_to_mel(f_min), hz_to_mel(f_max));
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(m_lo + (m_hi - m_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut fb = Array2::zeros((n_mels, n_bins));
    for m in 0..n_mels {
        let (lo, c, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * sample_rate as f64 / n_fft as f64;
            let w = if f > lo && f <= c {
                (f - lo) / (c - lo)
            } else if f > c && f < hi {
                (hi - f) / (hi - c)
            } else {
                0.0
            };
            fb[[m, k]] = w;
        }
    }
    fb
}

/// Orthonormal type-II DCT matrix, `n_out × n_in`.
pub fn dct_matrix(n_out: usize, n_in: usize) -> Array2<f64> {
    Array2::from_shape_fn((n_out, n_in), |(j, n)| {
        let scale = if j == 0 {
            (1.0 / n_in as f64).sqrt()
        } else {
            (2.0 / n_in as f64).sqrt()
        };
        scale * (std::f64::consts::PI * j as f64 * (n as f64 + 0.5) / n_in as f64).cos()
    })
}

/// Reusable MFCC extractor for one sample rate and configuration.
pub struct Mfcc<T: Scalar> {
    cfg: MfccConfig,
    sample_rate: u32,
    win: usize,
    hop: usize,
    n_fft: usize,
    window: Vec<T>,
    filterbank: Array2<T>,
    dct: Array2<T>,
    fft: Arc<dyn Fft<T>>,
}

impl<T: Scalar> Mfcc<T> {
    pub fn new(cfg: &MfccConfig, sample_rate: u32) -> Result<Self> {
        let win = (cfg.win_s * sample_rate as f64).round() as usize;
        let hop = (cfg.hop_s * sample_rate as f64).round() as usize;
        if win < 2 || hop == 0 {
            return Err(Error::arg(format!("bad MFCC framing: win {win}, hop {hop}")));
        }
        if cfg.n_ceps == 0 || cfg.n_ceps > cfg.n_mels {
            return Err(Error::arg("need 1 <= n_ceps <= n_mels"));
        }
        let n_fft = win.next_power_of_two();
        let nyquist = sample_rate as f64 / 2.0;
        let f_max = cfg.f_max.unwrap_or(nyquist).min(nyquist);
        if !(cfg.f_min >= 0.0 && cfg.f_min < f_max) {
            return Err(Error::arg("need 0 <= f_min < f_max"));
        }
        let window = (0..win)
            .map(|n| T::of(0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (win - 1) as f64).cos()))
            .collect();
        let filterbank = mel_filterbank(cfg.n_mels, n_fft, sample_rate, cfg.f_min, f_max).mapv(T::of);
        let dct = dct_matrix(cfg.n_ceps, cfg.n_mels).mapv(T::of);
        let fft = FftPlanner::new().plan_fft_forward(n_fft);
        Ok(Self {
            cfg: cfg.clone(),
            sample_rate,
            win,
            hop,
            n_fft,
            window,
            filterbank,
            dct,
            fft,
        })
    }

    pub fn n_fft(&self) -> usize {
        self.n_fft
    }

    /// Static cepstra, one row per 25 ms frame.
    pub fn compute(&self, audio: &AudioBuffer<T>) -> Result<FeatureMatrix<T>> {
        if audio.sample_rate != self.sample_rate {
            return Err(Error::arg(format!(
                "extractor built for {} Hz, audio is {} Hz",
                self.sample_rate, audio.sample_rate
            )));
        }
        let n_frames = frame_count(audio.len(), self.win, self.hop);
        if n_frames == 0 {
            return Err(Error::TooShort(format!(
                "{} samples, one MFCC frame needs {}",
                audio.len(),
                self.win
            )));
        }
        let pre = T::of(self.cfg.preemphasis);
        let x = &audio.samples;
        let emphasized: Vec<T> = (0..x.len())
            .map(|n| if n == 0 { x[0] } else { x[n] - pre * x[n - 1] })
            .collect();

        let n_bins = self.n_fft / 2 + 1;
        let floor = T::of(self.cfg.log_floor);
        let mut out = Array2::zeros((n_frames, self.cfg.n_ceps));
        let mut buf = vec![Complex::<T>::default(); self.n_fft];
        let mut scratch = vec![Complex::<T>::default(); self.fft.get_inplace_scratch_len()];
        let mut power = Array1::<T>::zeros(n_bins);
        for i in 0..n_frames {
            let frame = &emphasized[i * self.hop..i * self.hop + self.win];
            buf.fill(Complex::default());
            for (b, (&s, &w)) in buf.iter_mut().zip(frame.iter().zip(&self.window)) {
                b.re = s * w;
            }
            self.fft.process_with_scratch(&mut buf, &mut scratch);
            for (p, b) in power.iter_mut().zip(&buf) {
                *p = b.norm_sqr();
            }
            let log_mel = self.filterbank.dot(&power).mapv(|e| e.max(floor).ln());
            out.row_mut(i).assign(&self.dct.dot(&log_mel));
        }
        Ok(FeatureMatrix::new(out, self.cfg.win_s, self.cfg.hop_s))
    }
}

/// Convenience wrapper building a one-off [`Mfcc`] extractor.
pub fn mfcc<T: Scalar>(audio: &AudioBuffer<T>, cfg: &MfccConfig) -> Result<FeatureMatrix<T>> {
    Mfcc::new(cfg, audio.sample_rate)?.compute(audio)
}

/// Regression slope over ±2 frames, edges replicated.
fn regression_delta<T: Scalar>(x: ArrayView2<T>) -> Array2<T> {
    let n = x.nrows();
    let clamp = |i: isize| i.clamp(0, n as isize - 1) as usize;
    let denom = T::of(10.0);
    Array2::from_shape_fn(x.dim(), |(t, d)| {
        let t = t as isize;
        let mut acc = T::zero();
        for k in 1..=2isize {
            acc += T::of(k as f64) * (x[[clamp(t + k), d]] - x[[clamp(t - k), d]]);
        }
        acc / denom
    })
}

/// Appends delta and double-delta columns: `[static | delta | double delta]`.
pub fn add_deltas<T: Scalar>(features: &FeatureMatrix<T>) -> FeatureMatrix<T> {
    let d = features.dims();
    let n = features.frames();
    if n == 0 {
        return features.with_data(Array2::zeros((0, 3 * d)));
    }
    let delta = regression_delta(features.data.view());
    let delta2 = regression_delta(delta.view());
    let mut out = Array2::zeros((n, 3 * d));
    out.slice_mut(s![.., 0..d]).assign(&features.data);
    out.slice_mut(s![.., d..2 * d]).assign(&delta);
    out.slice_mut(s![.., 2 * d..]).assign(&delta2);
    features.with_data(out)
}

/// Per-dimension mean and (population) standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeakerStats<T> {
    pub speaker_id: String,
    pub mean: Array1<T>,
    pub std: Array1<T>,
}

impl<T: Scalar> SpeakerStats<T> {
    pub fn identity(speaker_id: impl Into<String>, dims: usize) -> Self {
        Self {
            speaker_id: speaker_id.into(),
            mean: Array1::zeros(dims),
            std: Array1::ones(dims),
        }
    }
}

/// Pools all frames of `features` (in the given order) into mean/std statistics.
pub fn fit_speaker_stats<'a, T: Scalar>(
    speaker_id: impl Into<String>,
    features: impl IntoIterator<Item = &'a FeatureMatrix<T>>,
) -> Result<SpeakerStats<T>> {
    let mats: Vec<&FeatureMatrix<T>> = features.into_iter().collect();
    let dims = mats.first().map(|m| m.dims()).unwrap_or(0);
    if mats.iter().any(|m| m.dims() != dims) {
        return Err(Error::Stats("feature matrices disagree on dimension".into()));
    }
    let total: usize = mats.iter().map(|m| m.frames()).sum();
    if total < 2 {
        return Err(Error::Stats(format!("{total} frames, need at least 2")));
    }
    let n = T::of_usize(total);
    let mut sum = Array1::<T>::zeros(dims);
    for m in &mats {
        for row in m.data.rows() {
            sum += &row;
        }
    }
    let mean = sum / n;
    let mut sq = Array1::<T>::zeros(dims);
    for m in &mats {
        for row in m.data.rows() {
            let dev = &row - &mean;
            sq += &(&dev * &dev);
        }
    }
    let floor = T::of(STD_FLOOR);
    let std = (sq / n).mapv(|v| v.sqrt().max(floor));
    Ok(SpeakerStats {
        speaker_id: speaker_id.into(),
        mean,
        std,
    })
}

/// `(x - mean) / std` per dimension.
pub fn apply_mvn<T: Scalar>(features: &FeatureMatrix<T>, stats: &SpeakerStats<T>) -> Result<FeatureMatrix<T>> {
    if stats.mean.len() != features.dims() || stats.std.len() != features.dims() {
        return Err(Error::arg(format!(
            "stats have {} dims, features {}",
            stats.mean.len(),
            features.dims()
        )));
    }
    let data = (&features.data - &stats.mean) / &stats.std;
    Ok(features.with_data(data))
}

/// Stacks `win` consecutive frames every `hop` frames into one long frame.
pub fn concatenate_frames<T: Scalar>(features: &FeatureMatrix<T>, win: usize, hop: usize) -> Result<FeatureMatrix<T>> {
    if win == 0 || hop == 0 {
        return Err(Error::arg("concatenation window and hop must be positive"));
    }
    let n_out = frame_count(features.frames(), win, hop);
    if n_out == 0 {
        return Err(Error::TooShort(format!(
            "{} frames, concatenation needs {win}",
            features.frames()
        )));
    }
    let d = features.dims();
    let mut out = Array2::zeros((n_out, win * d));
    for m in 0..n_out {
        let block = features.data.slice(s![m * hop..m * hop + win, ..]);
        for (j, row) in block.rows().into_iter().enumerate() {
            out.slice_mut(s![m, j * d..(j + 1) * d]).assign(&row);
        }
    }
    Ok(FeatureMatrix {
        data: out,
        frame_win_s: features.frame_hop_s * win as f64,
        frame_hop_s: features.frame_hop_s * hop as f64,
        speaker_id: features.speaker_id.clone(),
        file_id: features.file_id.clone(),
    })
}

pub const FEATURE_MAGIC: &[u8; 4] = b"NNSF";
pub const FEATURE_VERSION: u32 = 1;

/// Writes the `NNSF` binary layout: magic, version, rows, cols (u32 LE),
/// win_s, hop_s (f64 LE), then rows × cols f32 LE row-major.
pub fn write_features<T: Scalar>(path: impl AsRef<Path>, features: &FeatureMatrix<T>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let rows = u32::try_from(features.frames()).map_err(|_| Error::arg("too many rows"))?;
    let cols = u32::try_from(features.dims()).map_err(|_| Error::arg("too many columns"))?;
    let mut header = Vec::with_capacity(32);
    header.extend_from_slice(FEATURE_MAGIC);
    header.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    header.extend_from_slice(&rows.to_le_bytes());
    header.extend_from_slice(&cols.to_le_bytes());
    header.extend_from_slice(&features.frame_win_s.to_le_bytes());
    header.extend_from_slice(&features.frame_hop_s.to_le_bytes());
    w.write_all(&header).map_err(|e| Error::io(path, e))?;
    for &v in features.data.iter() {
        w.write_all(&(v.as_f64() as f32).to_le_bytes())
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_features<T: Scalar>(path: impl AsRef<Path>) -> Result<FeatureMatrix<T>> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Parse(format!("{}: {msg}", path.display()));
    if bytes.len() < 32 {
        return Err(bad("truncated header"));
    }
    if &bytes[0..4] != FEATURE_MAGIC {
        return Err(bad("bad magic"));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
    if u32_at(4) != FEATURE_VERSION {
        return Err(bad("unsupported version"));
    }
    let (rows, cols) = (u32_at(8) as usize, u32_at(12) as usize);
    let (win, hop) = (f64_at(16), f64_at(24));
    let payload = &bytes[32..];
    if payload.len() != rows * cols * 4 {
        return Err(bad("payload size does not match header"));
    }
    let values: Vec<T> = payload
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
        .collect();
    let data = Array2::from_shape_vec((rows, cols), values).map_err(|e| bad(&e.to_string()))?;
    Ok(FeatureMatrix::new(data, win, hop))
}

/// One line of the feature index sidecar.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureIndexEntry {
    pub speaker_id: String,
    pub file_id: String,
    pub path: PathBuf,
    pub rows: usize,
}

pub fn write_feature_index(path: impl AsRef<Path>, entries: &[FeatureIndexEntry]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_path(path)
        .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    for e in entries {
        w.serialize(e)
            .map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_feature_index(path: impl AsRef<Path>) -> Result<Vec<FeatureIndexEntry>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    r.deserialize()
        .map(|rec| rec.map_err(|e| Error::Parse(format!("{}: {e}", path.display()))))
        .collect()
}
