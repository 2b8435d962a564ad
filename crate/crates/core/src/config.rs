//! Run configuration: one TOML document of dotted keys (`vad.step = 7`).
//!
//! Every key is optional and defaults to the value used by the owning module.
//! Unknown keys are rejected by their full dotted path.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{Layout, LayoutRules, SynthConfig};
use crate::error::{Error, Result};
use crate::features::MfccConfig;
use crate::nn::{CgParams, TrainConfig};
use crate::preprocess::VadConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSection {
    /// Generate the synthetic corpus instead of reading `root`.
    pub synthetic: bool,
    pub root: Option<PathBuf>,
    pub layout: Layout,
    pub extension: String,
    /// Keep only speakers whose id starts with this letter.
    pub gender: Option<char>,
    pub seed: u64,
    pub speakers: usize,
    pub files: usize,
    pub duration_s: f64,
    pub sample_rate: u32,
}

impl Default for CorpusSection {
    fn default() -> Self {
        let synth = SynthConfig::default();
        Self {
            synthetic: true,
            root: None,
            layout: Layout::Timit,
            extension: "wav".into(),
            gender: None,
            seed: synth.seed,
            speakers: synth.n_speakers,
            files: synth.files_per_speaker,
            duration_s: synth.duration_s,
            sample_rate: synth.sample_rate,
        }
    }
}

impl CorpusSection {
    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            n_speakers: self.speakers,
            files_per_speaker: self.files,
            duration_s: self.duration_s,
            sample_rate: self.sample_rate,
        }
    }

    pub fn layout_rules(&self) -> LayoutRules {
        LayoutRules {
            layout: self.layout,
            extension: self.extension.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSection {
    pub n_in_domain: usize,
}

impl Default for SplitSection {
    fn default() -> Self {
        Self { n_in_domain: 12 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MvnMode {
    Speaker,
    Global,
    None,
}

impl FromStr for MvnMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "speaker" => Ok(Self::Speaker),
            "global" => Ok(Self::Global),
            "none" => Ok(Self::None),
            _ => Err(Error::Config(format!("unknown mvn mode `{s}` (speaker|global|none)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureSection {
    pub use_vad: bool,
    pub mvn: MvnMode,
    pub concat_win: usize,
    pub concat_hop: usize,
}

impl Default for FeatureSection {
    fn default() -> Self {
        Self {
            use_vad: true,
            mvn: MvnMode::Speaker,
            concat_win: 10,
            concat_hop: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MonitorSet {
    /// Last fraction of each speaker's training frames, held out from training.
    Val,
    /// The classification test files.
    Test,
}

impl FromStr for MonitorSet {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            _ => Err(Error::Config(format!("unknown monitor set `{s}` (val|test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NnSection {
    pub hidden: Vec<usize>,
    pub lambda_schedule: Vec<f64>,
    pub checkpoint_iters: usize,
    pub stop_delta: f64,
    pub stop_patience: usize,
    pub max_total_iters: usize,
    pub seed: u64,
    pub monitor: MonitorSet,
    pub val_fraction: f64,
    pub cg: CgParams,
}

impl Default for NnSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            hidden: vec![200],
            lambda_schedule: t.lambda_schedule,
            checkpoint_iters: t.checkpoint_iters,
            stop_delta: t.stop_delta,
            stop_patience: t.stop_patience,
            max_total_iters: t.max_total_iters,
            seed: t.seed,
            monitor: MonitorSet::Val,
            val_fraction: 0.1,
            cg: t.cg,
        }
    }
}

impl NnSection {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lambda_schedule: self.lambda_schedule.clone(),
            checkpoint_iters: self.checkpoint_iters,
            stop_delta: self.stop_delta,
            stop_patience: self.stop_patience,
            max_total_iters: self.max_total_iters,
            seed: self.seed,
            cg: self.cg.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ThresholdMode {
    PerSpeaker,
    Global,
}

impl FromStr for ThresholdMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-speaker" => Ok(Self::PerSpeaker),
            "global" => Ok(Self::Global),
            _ => Err(Error::Config(format!(
                "unknown threshold mode `{s}` (per-speaker|global)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VerifySection {
    pub n_files: usize,
    pub thresholds: ThresholdMode,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            n_files: 2,
            thresholds: ThresholdMode::PerSpeaker,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSection {
    pub out_dir: PathBuf,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            out_dir: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub run: RunSection,
    pub corpus: CorpusSection,
    pub split: SplitSection,
    pub vad: VadConfig,
    pub mfcc: MfccConfig,
    pub features: FeatureSection,
    pub nn: NnSection,
    pub verify: VerifySection,
}

impl RunConfig {
    /// Parses and validates a config document; unknown keys are errors.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut unknown = Vec::new();
        let de = toml::Deserializer::new(text);
        let cfg: RunConfig = serde_ignored::deserialize(de, |path| unknown.push(path.to_string()))
            .map_err(|e| Error::Config(e.to_string()))?;
        if !unknown.is_empty() {
            return Err(Error::Config(format!("unknown key `{}`", unknown.join("`, `"))));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !self.corpus.synthetic && self.corpus.root.is_none() {
            return bad("corpus.root is required unless corpus.synthetic = true");
        }
        if self.corpus.synthetic && (self.corpus.speakers < 2 || self.corpus.files < 2) {
            return bad("corpus.speakers and corpus.files must be at least 2");
        }
        if self.split.n_in_domain == 0 {
            return bad("split.n_in_domain must be positive");
        }
        if self.vad.step == 0 || self.vad.n_bins == 0 || !(self.vad.win_s > 0.0) || !(self.vad.hop_s > 0.0) {
            return bad("vad.step, vad.n_bins, vad.win_s and vad.hop_s must be positive");
        }
        if self.mfcc.n_ceps == 0 || self.mfcc.n_ceps > self.mfcc.n_mels {
            return bad("mfcc.n_ceps must lie in 1..=mfcc.n_mels");
        }
        if self.features.concat_win == 0 || self.features.concat_hop == 0 {
            return bad("features.concat_win and features.concat_hop must be positive");
        }
        if self.nn.hidden.contains(&0) {
            return bad("nn.hidden widths must be positive");
        }
        if !(self.nn.val_fraction > 0.0 && self.nn.val_fraction < 1.0) {
            return bad("nn.val_fraction must lie in (0, 1)");
        }
        self.nn
            .train_config()
            .validate()
            .map_err(|e| Error::Config(format!("nn: {e}")))?;
        if self.verify.n_files == 0 {
            return bad("verify.n_files must be positive");
        }
        Ok(())
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_toml_string())
    }
}
