//! Amplitude normalization and a strict energy/spectral-centroid VAD.

use std::sync::Arc;

use log::warn;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::corpus::AudioBuffer;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Scales the signal so that its largest absolute sample is 1.
///
/// All-zero input is returned unchanged.
pub fn normalize_amplitude<T: Scalar>(audio: &AudioBuffer<T>) -> AudioBuffer<T> {
    let peak = audio.samples.iter().fold(T::zero(), |m, &s| m.max(s.abs()));
    if peak == T::zero() {
        return audio.clone();
    }
    AudioBuffer {
        samples: audio.samples.iter().map(|&s| s / peak).collect(),
        sample_rate: audio.sample_rate,
    }
}

/// Mean squared amplitude of a frame.
pub fn short_term_energy<T: Scalar>(frame: &[T]) -> Result<T> {
    if frame.is_empty() {
        return Err(Error::arg("short-term energy of an empty frame"));
    }
    let sum: T = frame.iter().map(|&s| s * s).sum();
    Ok(sum / T::of_usize(frame.len()))
}

/// Spectral centroid calculator for a fixed frame length, reusing its transform plan.
pub struct CentroidCalculator<T: Scalar> {
    fft: Arc<dyn Fft<T>>,
    buffer: Vec<Complex<T>>,
    scratch: Vec<Complex<T>>,
}

impl<T: Scalar> CentroidCalculator<T> {
    pub fn new(frame_len: usize) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(frame_len);
        let scratch = vec![Complex::default(); fft.get_inplace_scratch_len()];
        Self {
            fft,
            buffer: vec![Complex::default(); frame_len],
            scratch,
        }
    }

    pub fn frame_len(&self) -> usize {
        self.buffer.len()
    }

    /// Magnitude-weighted mean bin index over the positive-frequency bins `1..=N/2`.
    ///
    /// Returns 0 when the spectrum is zero.
    pub fn centroid(&mut self, frame: &[T]) -> Result<T> {
        let n = self.buffer.len();
        if frame.len() != n {
            return Err(Error::arg(format!(
                "frame has {} samples, calculator expects {n}",
                frame.len()
            )));
        }
        if n < 2 {
            return Err(Error::arg("spectral centroid needs at least 2 samples"));
        }
        for (b, &s) in self.buffer.iter_mut().zip(frame) {
            *b = Complex::new(s, T::zero());
        }
        self.fft.process_with_scratch(&mut self.buffer, &mut self.scratch);
        let mut weighted = T::zero();
        let mut total = T::zero();
        for k in 1..=n / 2 {
            let mag = self.buffer[k].norm();
            weighted += T::of_usize(k) * mag;
            total += mag;
        }
        if total == T::zero() {
            return Ok(T::zero());
        }
        Ok(weighted / total)
    }
}

pub fn spectral_centroid<T: Scalar>(frame: &[T]) -> Result<T> {
    if frame.len() < 2 {
        return Err(Error::arg("spectral centroid needs at least 2 samples"));
    }
    CentroidCalculator::new(frame.len()).centroid(frame)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FrameStat {
    Energy,
    Centroid,
}

/// One statistic per analysis frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSeries<T> {
    pub values: Vec<T>,
    pub frame_len: usize,
    pub hop_len: usize,
}

fn frame_geometry(sample_rate: u32, win_s: f64, hop_s: f64) -> Result<(usize, usize)> {
    let win = (win_s * sample_rate as f64).round() as usize;
    let hop = (hop_s * sample_rate as f64).round() as usize;
    if hop == 0 || win <= hop {
        return Err(Error::arg(format!("frame length {win} must exceed hop {hop} > 0")));
    }
    Ok((win, hop))
}

/// Number of full frames: `floor((len - win) / hop) + 1`, or 0 if `len < win`.
pub fn frame_count(len: usize, win: usize, hop: usize) -> usize {
    if len < win {
        0
    } else {
        (len - win) / hop + 1
    }
}

pub fn frame_series<T: Scalar>(
    audio: &AudioBuffer<T>,
    win_s: f64,
    hop_s: f64,
    stat: FrameStat,
) -> Result<FrameSeries<T>> {
    let (win, hop) = frame_geometry(audio.sample_rate, win_s, hop_s)?;
    let n = frame_count(audio.len(), win, hop);
    if n == 0 {
        return Err(Error::TooShort(format!(
            "{} samples, one frame needs {win}",
            audio.len()
        )));
    }
    let frames = (0..n).map(|i| &audio.samples[i * hop..i * hop + win]);
    let values = match stat {
        FrameStat::Energy => frames.map(short_term_energy).collect::<Result<Vec<_>>>()?,
        FrameStat::Centroid => {
            let mut calc = CentroidCalculator::new(win);
            frames.map(|f| calc.centroid(f)).collect::<Result<Vec<_>>>()?
        }
    };
    Ok(FrameSeries {
        values,
        frame_len: win,
        hop_len: hop,
    })
}

/// Sliding median of width `step`, applied `order` times.
///
/// Even steps are rounded up to the next odd width. Near the edges the window
/// shrinks symmetrically so every output is the median of an odd number of
/// inputs; the first and last points are therefore fixed.
pub fn median_smooth<T: PartialOrd + Copy>(series: &[T], step: usize, order: usize) -> Vec<T> {
    let step = if step.is_multiple_of(2) { step + 1 } else { step };
    let half = step / 2;
    let mut current = series.to_vec();
    if half == 0 || series.is_empty() {
        return current;
    }
    let n = series.len();
    let mut window = Vec::with_capacity(step);
    for _ in 0..order {
        let prev = current.clone();
        for (i, out) in current.iter_mut().enumerate() {
            let r = half.min(i).min(n - 1 - i);
            window.clear();
            window.extend_from_slice(&prev[i - r..=i + r]);
            window.sort_by(|a, b| a.partial_cmp(b).unwrap_or(std::cmp::Ordering::Equal));
            *out = window[r];
        }
        if current == prev {
            break;
        }
    }
    current
}

/// Threshold at the weighted average of the two lowest histogram peaks.
///
/// The series is binned into `n_bins` equal-width bins over `[min, max]`, bin
/// counts are smoothed with a centered 3-bin average, and local maxima are
/// bins strictly above their existing neighbours. With `m1 < m2` the centres
/// of the two lowest maxima, the threshold is `(weight * m1 + m2) / (weight + 1)`.
/// Fewer than two maxima fall back to half the series mean; a constant series
/// returns its value.
pub fn histogram_threshold<T: Scalar>(series: &[T], n_bins: usize, weight: T) -> Result<T> {
    if series.is_empty() {
        return Err(Error::arg("histogram of an empty series"));
    }
    if n_bins < 3 {
        return Err(Error::arg("histogram needs at least 3 bins"));
    }
    if weight < T::zero() {
        return Err(Error::arg("histogram peak weight must be non-negative"));
    }
    let (lo, hi) = series
        .iter()
        .fold((series[0], series[0]), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi == lo {
        return Ok(lo);
    }
    let width = (hi - lo) / T::of_usize(n_bins);
    let mut counts = vec![0usize; n_bins];
    for &v in series {
        let idx = ((v - lo) / width).floor().to_usize().unwrap_or(0).min(n_bins - 1);
        counts[idx] += 1;
    }
    let smoothed: Vec<f64> = (0..n_bins)
        .map(|i| {
            let a = i.saturating_sub(1);
            let b = (i + 1).min(n_bins - 1);
            let s: usize = counts[a..=b].iter().sum();
            s as f64 / (b - a + 1) as f64
        })
        .collect();
    let peaks: Vec<usize> = (0..n_bins)
        .filter(|&i| {
            let left = i == 0 || smoothed[i] > smoothed[i - 1];
            let right = i + 1 == n_bins || smoothed[i] > smoothed[i + 1];
            left && right
        })
        .take(2)
        .collect();
    if peaks.len() < 2 {
        let mean = series.iter().copied().sum::<T>() / T::of_usize(series.len());
        return Ok(T::of(0.5) * mean);
    }
    let center = |i: usize| lo + (T::of_usize(i) + T::of(0.5)) * width;
    let (m1, m2) = (center(peaks[0]), center(peaks[1]));
    Ok((weight * m1 + m2) / (weight + T::one()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VadConfig {
    pub win_s: f64,
    pub hop_s: f64,
    /// Median filter width for the statistic curves and the frame decisions.
    pub step: usize,
    pub order: usize,
    pub n_bins: usize,
    pub weight: f64,
    /// Median-smooth the binary frame decisions as well.
    pub smooth_mask: bool,
}

impl Default for VadConfig {
    fn default() -> Self {
        Self {
            win_s: 0.050,
            hop_s: 0.025,
            step: 7,
            order: 2,
            n_bins: 30,
            weight: 3.0,
            smooth_mask: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VadMask<T> {
    pub frame_decisions: Vec<bool>,
    pub sample_mask: Vec<bool>,
    pub energy_threshold: T,
    pub centroid_threshold: T,
    /// Smoothed per-frame energy.
    pub energy: Vec<T>,
    /// Smoothed per-frame centroid (bin index).
    pub centroid: Vec<T>,
    pub frame_len: usize,
    pub hop_len: usize,
}

impl<T: Scalar> VadMask<T> {
    pub fn voiced_samples(&self) -> usize {
        self.sample_mask.iter().filter(|&&v| v).count()
    }

    fn unvoiced(len: usize, frame_len: usize, hop_len: usize) -> Self {
        VadMask {
            frame_decisions: Vec::new(),
            sample_mask: vec![false; len],
            energy_threshold: T::zero(),
            centroid_threshold: T::zero(),
            energy: Vec::new(),
            centroid: Vec::new(),
            frame_len,
            hop_len,
        }
    }
}

/// Marks a frame voiced when both its smoothed energy and smoothed spectral
/// centroid exceed per-file histogram thresholds.
pub fn detect_voice<T: Scalar>(audio: &AudioBuffer<T>, cfg: &VadConfig) -> Result<VadMask<T>> {
    let (win, hop) = frame_geometry(audio.sample_rate, cfg.win_s, cfg.hop_s)?;
    if frame_count(audio.len(), win, hop) == 0 {
        warn!(
            "audio of {} samples is shorter than one {win}-sample VAD frame; all unvoiced",
            audio.len()
        );
        return Ok(VadMask::unvoiced(audio.len(), win, hop));
    }
    let energy = frame_series(audio, cfg.win_s, cfg.hop_s, FrameStat::Energy)?.values;
    let centroid = frame_series(audio, cfg.win_s, cfg.hop_s, FrameStat::Centroid)?.values;
    let energy = median_smooth(&energy, cfg.step, cfg.order);
    let centroid = median_smooth(&centroid, cfg.step, cfg.order);
    let weight = T::of(cfg.weight);
    let t_e = histogram_threshold(&energy, cfg.n_bins, weight)?;
    let t_c = histogram_threshold(&centroid, cfg.n_bins, weight)?;

    let mut decisions: Vec<bool> = energy
        .iter()
        .zip(&centroid)
        .map(|(&e, &c)| e > t_e && c > t_c)
        .collect();
    if cfg.smooth_mask {
        decisions = median_smooth(&decisions, cfg.step, cfg.order);
    }

    let mut sample_mask = vec![false; audio.len()];
    for (i, _) in decisions.iter().enumerate().filter(|(_, &v)| v) {
        sample_mask[i * hop..i * hop + win].fill(true);
    }
    Ok(VadMask {
        frame_decisions: decisions,
        sample_mask,
        energy_threshold: t_e,
        centroid_threshold: t_c,
        energy,
        centroid,
        frame_len: win,
        hop_len: hop,
    })
}

/// Keeps the voiced samples, in order.
pub fn extract_voiced<T: Scalar>(audio: &AudioBuffer<T>, mask: &VadMask<T>) -> Result<AudioBuffer<T>> {
    if mask.sample_mask.len() != audio.len() {
        return Err(Error::arg(format!(
            "mask covers {} samples, audio has {}",
            mask.sample_mask.len(),
            audio.len()
        )));
    }
    let samples = audio
        .samples
        .iter()
        .zip(&mask.sample_mask)
        .filter(|(_, &v)| v)
        .map(|(&s, _)| s)
        .collect();
    Ok(AudioBuffer {
        samples,
        sample_rate: audio.sample_rate,
    })
}
