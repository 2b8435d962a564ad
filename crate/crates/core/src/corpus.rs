//! Corpus discovery, speaker splits, WAV I/O and a synthetic mini-corpus.
//!
//! The on-disk layout follows TIMIT: `ROOT/<region>/<speaker>/<sentence>.wav`,
//! where the sentence id prefix (`SX`, `SI`, `SA`) gives the sentence category and
//! the first letter of the speaker id gives the gender. A flat layout
//! (`ROOT/<speaker>_<sentence>.wav`) is also accepted.

use std::collections::{BTreeMap, HashSet};
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Sample rate the pipeline is tuned for.
pub const EXPECTED_SAMPLE_RATE: u32 = 8000;

/// Mono audio with its sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioBuffer<T> {
    pub samples: Vec<T>,
    pub sample_rate: u32,
}

impl<T: Scalar> AudioBuffer<T> {
    pub fn new(samples: Vec<T>, sample_rate: u32) -> Result<Self> {
        if sample_rate == 0 {
            return Err(Error::arg("sample rate must be positive"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numeric("audio contains non-finite samples".into()));
        }
        Ok(Self { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Converts to another scalar type.
    pub fn cast<U: Scalar>(&self) -> AudioBuffer<U> {
        AudioBuffer {
            samples: self.samples.iter().map(|s| U::of(s.as_f64())).collect(),
            sample_rate: self.sample_rate,
        }
    }
}

/// Reads a 16-bit linear PCM mono RIFF/WAVE file, scaling samples by 1/32768.
pub fn read_wav<T: Scalar>(path: impl AsRef<Path>) -> Result<AudioBuffer<T>> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| wav_error(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Format(format!(
            "{}: {} channels, expected mono",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::Format(format!(
            "{}: {}-bit {:?}, expected 16-bit PCM",
            path.display(),
            spec.bits_per_sample,
            spec.sample_format
        )));
    }
    if spec.sample_rate != EXPECTED_SAMPLE_RATE {
        warn!(
            "{}: sample rate {} Hz, pipeline defaults assume {} Hz",
            path.display(),
            spec.sample_rate,
            EXPECTED_SAMPLE_RATE
        );
    }
    let scale = T::of(1.0 / 32768.0);
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| T::of(v as f64) * scale))
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| wav_error(path, e))?;
    AudioBuffer::new(samples, spec.sample_rate)
}

/// Writes `audio` as 16-bit PCM mono, rounding to the nearest step and clipping to range.
pub fn write_wav<T: Scalar>(path: impl AsRef<Path>, audio: &AudioBuffer<T>) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: audio.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| wav_error(path, e))?;
    for &s in &audio.samples {
        let q = (s.as_f64() * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q).map_err(|e| wav_error(path, e))?;
    }
    writer.finalize().map_err(|e| wav_error(path, e))
}

fn wav_error(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io)
            if io.kind() == std::io::ErrorKind::UnexpectedEof || io.to_string().contains("enough bytes") =>
        {
            Error::Parse(format!("{}: truncated file", path.display()))
        }
        hound::Error::IoError(io) => Error::io(path, io),
        hound::Error::FormatError(msg) => Error::Parse(format!("{}: {msg}", path.display())),
        hound::Error::Unsupported => Error::Format(format!("{}: unsupported wav encoding", path.display())),
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}

/// Sentence category, taken from the sentence id prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    #[serde(rename = "SX")]
    Sx,
    #[serde(rename = "SI")]
    Si,
    #[serde(rename = "SA")]
    Sa,
}

impl Category {
    pub fn from_sentence_id(id: &str) -> Option<Self> {
        let upper = id.to_ascii_uppercase();
        if upper.starts_with("SX") {
            Some(Category::Sx)
        } else if upper.starts_with("SI") {
            Some(Category::Si)
        } else if upper.starts_with("SA") {
            Some(Category::Sa)
        } else {
            None
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Sx => "SX",
            Category::Si => "SI",
            Category::Sa => "SA",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "SX" => Ok(Category::Sx),
            "SI" => Ok(Category::Si),
            "SA" => Ok(Category::Sa),
            _ => Err(Error::Parse(format!("unknown sentence category `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub speaker_id: String,
    pub sentence_id: String,
    pub category: Category,
    pub path: PathBuf,
}

impl ManifestEntry {
    /// Gender letter by TIMIT convention (first character of the speaker id).
    pub fn gender(&self) -> Option<char> {
        self.speaker_id.chars().next().map(|c| c.to_ascii_uppercase())
    }

    /// Identifier unique across the corpus.
    pub fn file_id(&self) -> String {
        format!("{}_{}", self.speaker_id, self.sentence_id)
    }
}

/// Ordered corpus listing; entries of one speaker are contiguous.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_HEADER: [&str; 4] = ["speaker_id", "sentence_id", "category", "path"];

impl Manifest {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Speaker ids in manifest order.
    pub fn speakers(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.entries
            .iter()
            .filter(|e| seen.insert(e.speaker_id.as_str()))
            .map(|e| e.speaker_id.clone())
            .collect()
    }

    pub fn files_of<'a>(
        &'a self,
        speaker: &'a str,
        categories: &'a [Category],
    ) -> impl Iterator<Item = &'a ManifestEntry> + 'a {
        self.entries
            .iter()
            .filter(move |e| e.speaker_id == speaker && categories.contains(&e.category))
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_path(path)
            .map_err(|e| csv_error(path, e))?;
        w.write_record(MANIFEST_HEADER).map_err(|e| csv_error(path, e))?;
        for e in &self.entries {
            let p = e.path.to_string_lossy();
            w.write_record([
                e.speaker_id.as_str(),
                e.sentence_id.as_str(),
                e.category.as_str(),
                p.as_ref(),
            ])
            .map_err(|e| csv_error(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a manifest written by [`Manifest::write_csv`], preserving entry order.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
        let header = r.headers().map_err(|e| csv_error(path, e))?.clone();
        if header.iter().collect::<Vec<_>>() != MANIFEST_HEADER {
            return Err(Error::Parse(format!(
                "{}: expected header `{}`",
                path.display(),
                MANIFEST_HEADER.join(",")
            )));
        }
        let mut entries = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| csv_error(path, e))?;
            entries.push(ManifestEntry {
                speaker_id: rec[0].to_string(),
                sentence_id: rec[1].to_string(),
                category: rec[2].parse()?,
                path: PathBuf::from(&rec[3]),
            });
        }
        Ok(Manifest { entries })
    }
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if e.is_io_error() {
        match e.into_kind() {
            csv::ErrorKind::Io(io) => Error::io(path, io),
            _ => unreachable!(),
        }
    } else {
        Error::Parse(format!("{}: {e}", path.display()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Layout {
    /// `ROOT/<region>/<speaker>/<sentence>.wav`
    #[default]
    Timit,
    /// `ROOT/<speaker>_<sentence>.wav`
    Flat,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutRules {
    pub layout: Layout,
    /// Case-insensitive file extension of audio files.
    pub extension: String,
}

impl Default for LayoutRules {
    fn default() -> Self {
        Self {
            layout: Layout::Timit,
            extension: "wav".into(),
        }
    }
}

/// Sort key for a dialect region folder: numeric suffix first (`DR2` < `DR10`), then name.
fn region_key(region: &str) -> (Option<u64>, String) {
    let digits: String = region
        .chars()
        .rev()
        .take_while(|c| c.is_ascii_digit())
        .collect::<Vec<_>>()
        .into_iter()
        .rev()
        .collect();
    (digits.parse().ok(), region.to_string())
}

struct Found {
    region: String,
    entry: ManifestEntry,
}

/// Scans a corpus tree into a deterministically ordered manifest.
///
/// Speakers are ordered by region (numerically by the region's trailing number)
/// and then alphabetically by speaker id; a speaker's sentences are ordered by id.
pub fn build_manifest(root: impl AsRef<Path>, rules: &LayoutRules) -> Result<Manifest> {
    let root = root.as_ref();
    let mut found = Vec::new();
    match rules.layout {
        Layout::Timit => scan_timit(root, root, rules, &mut found)?,
        Layout::Flat => scan_flat(root, rules, &mut found)?,
    }
    sort_found(found)
}

fn sort_found(mut found: Vec<Found>) -> Result<Manifest> {
    let mut regions: BTreeMap<&str, &str> = BTreeMap::new();
    for f in &found {
        let prev = regions.insert(&f.entry.speaker_id, &f.region);
        if let Some(prev) = prev {
            if prev != f.region {
                return Err(Error::Parse(format!(
                    "speaker `{}` appears in regions `{prev}` and `{}`",
                    f.entry.speaker_id, f.region
                )));
            }
        }
    }
    found.sort_by(|a, b| {
        region_key(&a.region)
            .cmp(&region_key(&b.region))
            .then_with(|| a.entry.speaker_id.cmp(&b.entry.speaker_id))
            .then_with(|| a.entry.sentence_id.cmp(&b.entry.sentence_id))
            .then_with(|| a.entry.path.cmp(&b.entry.path))
    });
    Ok(Manifest {
        entries: found.into_iter().map(|f| f.entry).collect(),
    })
}

fn sorted_dir(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn has_extension(path: &Path, ext: &str) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case(ext))
}

fn scan_timit(root: &Path, dir: &Path, rules: &LayoutRules, out: &mut Vec<Found>) -> Result<()> {
    let children = sorted_dir(dir)?;
    let subdirs: Vec<&PathBuf> = children.iter().filter(|p| p.is_dir()).collect();
    let files: Vec<&PathBuf> = children
        .iter()
        .filter(|p| p.is_file() && has_extension(p, &rules.extension))
        .collect();

    if subdirs.is_empty() && dir != root {
        let speaker = file_name(dir);
        let region = dir.parent().map(file_name).unwrap_or_default();
        let before = out.len();
        for f in files {
            let sentence = f
                .file_stem()
                .and_then(|s| s.to_str())
                .unwrap_or_default()
                .to_ascii_uppercase();
            match Category::from_sentence_id(&sentence) {
                Some(category) => out.push(Found {
                    region: region.clone(),
                    entry: ManifestEntry {
                        speaker_id: speaker.clone(),
                        sentence_id: sentence,
                        category,
                        path: f.clone(),
                    },
                }),
                None => warn!("{}: unknown sentence category, skipped", f.display()),
            }
        }
        if out.len() == before {
            warn!("speaker directory {} has no usable files; excluded", dir.display());
        }
        return Ok(());
    }
    for sub in subdirs {
        scan_timit(root, sub, rules, out)?;
    }
    Ok(())
}

fn scan_flat(root: &Path, rules: &LayoutRules, out: &mut Vec<Found>) -> Result<()> {
    for f in sorted_dir(root)? {
        if !(f.is_file() && has_extension(&f, &rules.extension)) {
            continue;
        }
        let stem = f.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let Some((speaker, sentence)) = stem.rsplit_once('_') else {
            warn!("{}: expected <speaker>_<sentence>, skipped", f.display());
            continue;
        };
        let sentence = sentence.to_ascii_uppercase();
        match Category::from_sentence_id(&sentence) {
            Some(category) => out.push(Found {
                region: String::new(),
                entry: ManifestEntry {
                    speaker_id: speaker.to_string(),
                    sentence_id: sentence,
                    category,
                    path: f.clone(),
                },
            }),
            None => warn!("{}: unknown sentence category, skipped", f.display()),
        }
    }
    Ok(())
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Speaker partition into in-domain clients (group A) and imposters (group B).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub group_a: Vec<String>,
    pub group_b: Vec<String>,
    pub train_categories: Vec<Category>,
    pub test_categories: Vec<Category>,
}

impl SplitPlan {
    pub fn train_files<'a>(&'a self, manifest: &'a Manifest, speaker: &'a str) -> Vec<&'a ManifestEntry> {
        manifest.files_of(speaker, &self.train_categories).collect()
    }

    pub fn test_files<'a>(&'a self, manifest: &'a Manifest, speaker: &'a str) -> Vec<&'a ManifestEntry> {
        manifest.files_of(speaker, &self.test_categories).collect()
    }

    /// Class index of an in-domain speaker.
    pub fn class_of(&self, speaker: &str) -> Option<usize> {
        self.group_a.iter().position(|s| s == speaker)
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
    }
}

/// Splits speakers in manifest order: the first `n_in_domain` become group A.
///
/// Group A trains on SX sentences and tests on SA+SI; group B contributes its
/// SA+SI sentences as imposter trials. Speakers without any SX sentence are
/// dropped with a warning, and `gender` optionally keeps only speakers whose id
/// starts with that letter.
pub fn make_split(manifest: &Manifest, n_in_domain: usize, gender: Option<char>) -> Result<SplitPlan> {
    if n_in_domain == 0 {
        return Err(Error::arg("n_in_domain must be positive"));
    }
    let gender = gender.map(|g| g.to_ascii_uppercase());
    let mut speakers = Vec::new();
    for s in manifest.speakers() {
        if let Some(g) = gender {
            if s.chars().next().map(|c| c.to_ascii_uppercase()) != Some(g) {
                continue;
            }
        }
        if manifest.files_of(&s, &[Category::Sx]).next().is_none() {
            warn!("speaker {s} has no SX sentences; excluded from the split");
            continue;
        }
        speakers.push(s);
    }
    if n_in_domain > speakers.len() {
        return Err(Error::arg(format!(
            "n_in_domain = {n_in_domain} exceeds the {} eligible speakers",
            speakers.len()
        )));
    }
    let group_b = speakers.split_off(n_in_domain);
    Ok(SplitPlan {
        group_a: speakers,
        group_b,
        train_categories: vec![Category::Sx],
        test_categories: vec![Category::Sa, Category::Si],
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_speakers: usize,
    pub files_per_speaker: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_speakers: 20,
            files_per_speaker: 10,
            duration_s: 2.5,
            sample_rate: EXPECTED_SAMPLE_RATE,
        }
    }
}

/// Category of the `i`-th synthetic file of a speaker.
///
/// Even slots are SX; odd slots alternate SI, SA. Ten files give the TIMIT
/// proportions of 5 SX, 3 SI and 2 SA.
pub fn synthetic_category(i: usize) -> Category {
    if i.is_multiple_of(2) {
        Category::Sx
    } else if (i / 2).is_multiple_of(2) {
        Category::Si
    } else {
        Category::Sa
    }
}

const SYNTH_REGIONS: usize = 8;

/// Per-speaker voice: resonances, pitch range, source tilt.
#[derive(Debug, Clone)]
struct Voice {
    formants: [f64; 4],
    bandwidths: [f64; 4],
    f0: f64,
    f0_spread: f64,
    tilt: f64,
}

fn mix_seed(parts: &[u64]) -> u64 {
    // splitmix64 over the parts
    let mut h = 0x9E37_79B9_7F4A_7C15u64;
    for &p in parts {
        h ^= p
            .wrapping_add(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(h << 6)
            .wrapping_add(h >> 2);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        h = z ^ (z >> 31);
    }
    h
}

impl Voice {
    fn draw(seed: u64, speaker: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, speaker as u64, 0xF0]));
        let ranges = [(300.0, 850.0), (900.0, 2000.0), (2100.0, 2900.0), (3000.0, 3600.0)];
        let mut formants = [0.0; 4];
        let mut bandwidths = [0.0; 4];
        for (i, (lo, hi)) in ranges.iter().enumerate() {
            formants[i] = rng.random_range(*lo..*hi);
            bandwidths[i] = rng.random_range(60.0..180.0);
        }
        Voice {
            formants,
            bandwidths,
            f0: rng.random_range(85.0..190.0),
            f0_spread: rng.random_range(0.04..0.12),
            tilt: rng.random_range(0.5..0.9),
        }
    }
}

/// Two-pole resonator with unit gain at its centre frequency.
struct Resonator {
    a1: f64,
    a2: f64,
    gain: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new(freq: f64, bw: f64, sr: f64) -> Self {
        let r = (-PI * bw / sr).exp();
        let theta = 2.0 * PI * freq / sr;
        let gain = (1.0 - r) * (1.0 + r * r - 2.0 * r * (2.0 * theta).cos()).sqrt();
        Resonator {
            a1: 2.0 * r * theta.cos(),
            a2: -r * r,
            gain,
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn retune(&mut self, freq: f64, bw: f64, sr: f64) {
        let fresh = Resonator::new(freq, bw, sr);
        self.a1 = fresh.a1;
        self.a2 = fresh.a2;
        self.gain = fresh.gain;
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = self.gain * x + self.a1 * self.y1 + self.a2 * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Synthesizes one utterance: voiced "syllables" separated by low-level pauses.
fn synthesize(voice: &Voice, n_samples: usize, sr: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut out = vec![0.0; n_samples];
    let mut resonators: Vec<Resonator> = (0..4)
        .map(|i| Resonator::new(voice.formants[i], voice.bandwidths[i], sr))
        .collect();
    let mut glottal = 0.0;
    let mut phase = 0.0;

    let mut pos = (rng.random_range(0.08..0.2) * sr) as usize;
    while pos < n_samples {
        let seg_len = ((rng.random_range(0.12..0.35) * sr) as usize).min(n_samples - pos);
        let pause = (rng.random_range(0.04..0.2) * sr) as usize;
        let amp = rng.random_range(0.4..1.0);
        let f0_start = voice.f0 * (1.0 + voice.f0_spread * rng.random_range(-1.0..1.0));
        let f0_end = voice.f0 * (1.0 + voice.f0_spread * rng.random_range(-1.0..1.0));
        let shift: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.97..1.03));
        for (i, r) in resonators.iter_mut().enumerate() {
            let f = (voice.formants[i] * shift[i]).min(0.48 * sr);
            r.retune(f, voice.bandwidths[i], sr);
        }
        let ramp = (0.02 * sr) as usize;
        for n in 0..seg_len {
            let t = n as f64 / seg_len.max(1) as f64;
            let f0 = f0_start + (f0_end - f0_start) * t;
            phase += f0 / sr;
            let pulse = if phase >= 1.0 {
                phase -= 1.0;
                1.0
            } else {
                0.0
            };
            glottal = pulse + voice.tilt * glottal;
            let mut y = glottal;
            for r in resonators.iter_mut() {
                y = r.step(y);
            }
            let env = if n < ramp {
                0.5 - 0.5 * (PI * n as f64 / ramp as f64).cos()
            } else if n + ramp > seg_len {
                0.5 - 0.5 * (PI * (seg_len - n) as f64 / ramp as f64).cos()
            } else {
                1.0
            };
            out[pos + n] = amp * env * y;
        }
        pos += seg_len + pause;
    }

    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if peak > 0.0 {
        out.iter_mut().for_each(|v| *v *= 0.7 / peak);
    }
    add_background_noise(&mut out, 1e-3, rng);
    out
}

/// Adds low-passed (brown-ish) noise with RMS `level`.
pub(crate) fn add_background_noise(signal: &mut [f64], level: f64, rng: &mut ChaCha8Rng) {
    let mut state = 0.0;
    let noise: Vec<f64> = signal
        .iter()
        .map(|_| {
            state = 0.97 * state + rng.random_range(-1.0..1.0);
            state
        })
        .collect();
    let rms = (noise.iter().map(|v| v * v).sum::<f64>() / noise.len().max(1) as f64).sqrt();
    if rms > 0.0 {
        for (s, n) in signal.iter_mut().zip(&noise) {
            *s += level * n / rms;
        }
    }
}

/// Generates a deterministic TIMIT-shaped corpus of synthetic speakers.
///
/// Each speaker gets a fixed set of four resonances and a pitch range drawn from
/// `seed`; every file is seeded from `(seed, speaker, file)` so output does not
/// depend on scheduling.
pub fn generate_synthetic_corpus(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<Manifest> {
    if cfg.n_speakers < 2 || cfg.files_per_speaker < 2 {
        return Err(Error::arg(
            "synthetic corpus needs at least 2 speakers and 2 files each",
        ));
    }
    if !(cfg.duration_s > 0.0) || cfg.sample_rate == 0 {
        return Err(Error::arg("duration and sample rate must be positive"));
    }
    let out_dir = out_dir.as_ref();
    let sr = cfg.sample_rate as f64;
    let n_samples = (cfg.duration_s * sr).round() as usize;

    let mut jobs = Vec::new();
    for spk in 0..cfg.n_speakers {
        let region = format!("DR{}", 1 + spk * SYNTH_REGIONS / cfg.n_speakers);
        let speaker_id = format!("MSYN{spk:03}");
        let dir = out_dir.join(&region).join(&speaker_id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for file in 0..cfg.files_per_speaker {
            let category = synthetic_category(file);
            let sentence_id = format!("{category}{file:03}");
            let path = dir.join(format!("{sentence_id}.wav"));
            jobs.push((
                spk,
                file,
                region.clone(),
                speaker_id.clone(),
                sentence_id,
                category,
                path,
            ));
        }
    }

    let found = jobs
        .into_par_iter()
        .map(|(spk, file, region, speaker_id, sentence_id, category, path)| {
            let voice = Voice::draw(cfg.seed, spk);
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, spk as u64, file as u64]));
            let samples = synthesize(&voice, n_samples, sr, &mut rng);
            write_wav(&path, &AudioBuffer::new(samples, cfg.sample_rate)?)?;
            Ok(Found {
                region,
                entry: ManifestEntry {
                    speaker_id,
                    sentence_id,
                    category,
                    path,
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    sort_found(found)
}
