//! Staged experiment runner.
//!
//! Stages run in a fixed order and communicate through files in the output
//! directory. Each stage records a stamp holding the hash of its inputs (config
//! section plus input files) and of every file it wrote; a stage whose inputs
//! and outputs still match its stamp is skipped.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::{info, warn};
use ndarray::{concatenate, s, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classify::{evaluate, ClassificationReport};
use crate::config::{MonitorSet, MvnMode, RunConfig, ThresholdMode};
use crate::corpus::{
    build_manifest, generate_synthetic_corpus, make_split, read_wav, write_wav, Category, Manifest, ManifestEntry,
    SplitPlan,
};
use crate::error::{Error, Result};
use crate::features::{
    add_deltas, apply_mvn, concatenate_frames, fit_speaker_stats, mfcc, read_feature_index, read_features,
    write_feature_index, write_features, FeatureIndexEntry, MfccConfig,
};
use crate::nn::{train, HistoryRecord, LabeledBatch, Model, TrainingMeta};
use crate::preprocess::{detect_voice, extract_voiced, normalize_amplitude, VadConfig};
use crate::verify::{
    argmax_verify_accuracy, client_scores, fit_thresholds, pooled_trials, roc, score_trials, shift_scores,
    SpeakerFiles, ThresholdTable,
};
use crate::{Batch, Features};

pub const MANIFEST_FILE: &str = "manifest.csv";
pub const SPLIT_FILE: &str = "split.json";
pub const CORPUS_DIR: &str = "corpus";
pub const VOICED_DIR: &str = "voiced";
pub const FEATURES_DIR: &str = "features";
pub const INDEX_FILE: &str = "index.csv";
pub const MODEL_FILE: &str = "model.nnsm";
pub const TRAIN_REPORT: &str = "train_report.json";
pub const CLASSIFY_REPORT: &str = "classify_report.json";
pub const VERIFY_REPORT: &str = "verify_report.json";
pub const ROC_FILE: &str = "roc.csv";
const STAMP_DIR: &str = "stamps";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    Prepare,
    Vad,
    Featurize,
    Train,
    EvalClassify,
    EvalVerify,
}

impl Stage {
    pub const ALL: [Stage; 6] = [
        Stage::Prepare,
        Stage::Vad,
        Stage::Featurize,
        Stage::Train,
        Stage::EvalClassify,
        Stage::EvalVerify,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Prepare => "prepare",
            Stage::Vad => "vad",
            Stage::Featurize => "featurize",
            Stage::Train => "train",
            Stage::EvalClassify => "eval-classify",
            Stage::EvalVerify => "eval-verify",
        }
    }

    /// Parses a comma-separated stage list.
    pub fn parse_list(s: &str) -> Result<Vec<Stage>> {
        s.split(',')
            .map(str::trim)
            .filter(|t| !t.is_empty())
            .map(Stage::from_str)
            .collect()
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage `{s}`")))
    }
}

// ---------------------------------------------------------------------------
// Featurization

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturizeOptions {
    /// `None` skips voice-activity detection.
    pub vad: Option<VadConfig>,
    pub mfcc: MfccConfig,
    pub mvn: MvnMode,
    pub concat_win: usize,
    pub concat_hop: usize,
    /// Categories whose files form the training side for normalization statistics.
    pub train_categories: Vec<Category>,
}

impl FeaturizeOptions {
    pub fn from_config(cfg: &RunConfig, vad: bool) -> Self {
        Self {
            vad: vad.then(|| cfg.vad.clone()),
            mfcc: cfg.mfcc.clone(),
            mvn: cfg.features.mvn,
            concat_win: cfg.features.concat_win,
            concat_hop: cfg.features.concat_hop,
            train_categories: vec![Category::Sx],
        }
    }
}

/// Voiced part of one file, amplitude-normalized first. `None` when nothing is voiced.
pub fn voiced_audio(entry: &ManifestEntry, vad: &VadConfig) -> Result<Option<crate::Audio>> {
    let audio = normalize_amplitude(&read_wav::<f64>(&entry.path)?);
    let mask = detect_voice(&audio, vad)?;
    if mask.voiced_samples() == 0 {
        return Ok(None);
    }
    extract_voiced(&audio, &mask).map(Some)
}

fn mfcc39(entry: &ManifestEntry, opts: &FeaturizeOptions) -> Result<Option<Features>> {
    let audio = match &opts.vad {
        Some(vad) => match voiced_audio(entry, vad)? {
            Some(a) => a,
            None => {
                warn!("{}: no voiced frames, file dropped", entry.path.display());
                return Ok(None);
            }
        },
        None => normalize_amplitude(&read_wav::<f64>(&entry.path)?),
    };
    match mfcc(&audio, &opts.mfcc) {
        Ok(m) => Ok(Some(
            add_deltas(&m).with_ids(Some(entry.speaker_id.clone()), Some(entry.file_id())),
        )),
        Err(Error::TooShort(msg)) => {
            warn!("{}: {msg}, file dropped", entry.path.display());
            Ok(None)
        }
        Err(e) => Err(e),
    }
}

/// Turns every manifest file into a stacked, normalized feature file in
/// `out_dir` and writes the index. Files too short to yield a frame are
/// dropped with a warning.
///
/// Normalization statistics are fitted per speaker and per side (training
/// categories vs the rest), or per side over all speakers in global mode.
pub fn featurize_corpus(
    manifest: &Manifest,
    opts: &FeaturizeOptions,
    out_dir: impl AsRef<Path>,
) -> Result<Vec<FeatureIndexEntry>> {
    let out_dir = out_dir.as_ref();
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let raw: Vec<Option<Features>> = manifest
        .entries
        .par_iter()
        .map(|e| mfcc39(e, opts))
        .collect::<Result<_>>()?;

    // Normalization groups in canonical manifest order.
    let mut groups: Vec<(String, bool)> = Vec::new();
    let mut members: HashMap<(String, bool), Vec<usize>> = HashMap::new();
    for (i, (entry, f)) in manifest.entries.iter().zip(&raw).enumerate() {
        if f.is_none() {
            continue;
        }
        let train_side = opts.train_categories.contains(&entry.category);
        let speaker = match opts.mvn {
            MvnMode::Global => String::new(),
            _ => entry.speaker_id.clone(),
        };
        let key = (speaker, train_side);
        if !members.contains_key(&key) {
            groups.push(key.clone());
        }
        members.entry(key).or_default().push(i);
    }

    let mut normalized: Vec<Option<Features>> = vec![None; raw.len()];
    for key in &groups {
        let idx = &members[key];
        let files: Vec<&Features> = idx.iter().filter_map(|&i| raw[i].as_ref()).collect();
        if opts.mvn == MvnMode::None {
            for &i in idx {
                normalized[i] = raw[i].clone();
            }
            continue;
        }
        let stats = match fit_speaker_stats(&key.0, files.iter().copied()) {
            Ok(s) => s,
            Err(e) => {
                warn!("speaker `{}`: {e}; its files are dropped", key.0);
                continue;
            }
        };
        for &i in idx {
            normalized[i] = Some(apply_mvn(raw[i].as_ref().unwrap(), &stats)?);
        }
    }

    let written: Vec<Option<FeatureIndexEntry>> = manifest
        .entries
        .par_iter()
        .zip(normalized.par_iter())
        .map(|(entry, f)| {
            let Some(f) = f else { return Ok(None) };
            let stacked = match concatenate_frames(f, opts.concat_win, opts.concat_hop) {
                Ok(s) => s,
                Err(Error::TooShort(msg)) => {
                    warn!("{}: {msg}, file dropped", entry.path.display());
                    return Ok(None);
                }
                Err(e) => return Err(e),
            };
            let name = format!("{}.nnsf", entry.file_id());
            write_features(out_dir.join(&name), &stacked)?;
            Ok(Some(FeatureIndexEntry {
                speaker_id: entry.speaker_id.clone(),
                file_id: entry.file_id(),
                path: PathBuf::from(name),
                rows: stacked.frames(),
            }))
        })
        .collect::<Result<_>>()?;
    let index: Vec<FeatureIndexEntry> = written.into_iter().flatten().collect();
    write_feature_index(out_dir.join(INDEX_FILE), &index)?;
    info!("featurized {} of {} files", index.len(), manifest.len());
    Ok(index)
}

/// Category encoded in a `<speaker>_<sentence>` file id.
pub fn category_of_file_id(file_id: &str) -> Option<Category> {
    file_id
        .rsplit_once('_')
        .and_then(|(_, sentence)| Category::from_sentence_id(sentence))
}

/// Every feature file of a directory, in index order, widened to `f64`.
pub fn load_feature_dir(dir: impl AsRef<Path>) -> Result<Vec<Features>> {
    let dir = dir.as_ref();
    let index = read_feature_index(dir.join(INDEX_FILE))?;
    index
        .par_iter()
        .map(|e| {
            let path = if e.path.is_absolute() {
                e.path.clone()
            } else {
                dir.join(&e.path)
            };
            let f = read_features::<f64>(&path)?;
            if f.frames() != e.rows {
                return Err(Error::Parse(format!(
                    "{}: {} rows, index says {}",
                    path.display(),
                    f.frames(),
                    e.rows
                )));
            }
            Ok(f.with_ids(Some(e.speaker_id.clone()), Some(e.file_id.clone())))
        })
        .collect()
}

/// Feature files arranged by role.
#[derive(Debug, Clone)]
pub struct Datasets {
    /// Training files of in-domain speakers with their class.
    pub train: Vec<(Features, usize)>,
    /// Test files of in-domain speakers with their class.
    pub test: Vec<(Features, usize)>,
    /// Test files of in-domain speakers, grouped in class order.
    pub clients: Vec<SpeakerFiles<f64>>,
    /// Test files of out-of-domain speakers.
    pub imposters: Vec<SpeakerFiles<f64>>,
}

impl Datasets {
    pub fn assemble(files: Vec<Features>, split: &SplitPlan) -> Result<Self> {
        let mut ds = Datasets {
            train: Vec::new(),
            test: Vec::new(),
            clients: split
                .group_a
                .iter()
                .map(|s| SpeakerFiles {
                    speaker_id: s.clone(),
                    files: Vec::new(),
                })
                .collect(),
            imposters: split
                .group_b
                .iter()
                .map(|s| SpeakerFiles {
                    speaker_id: s.clone(),
                    files: Vec::new(),
                })
                .collect(),
        };
        for f in files {
            let speaker = f.speaker_id.clone().unwrap_or_default();
            let file_id = f.file_id.clone().unwrap_or_default();
            let Some(cat) = category_of_file_id(&file_id) else {
                warn!("{file_id}: no category in file id, skipped");
                continue;
            };
            let is_train = split.train_categories.contains(&cat);
            let is_test = split.test_categories.contains(&cat);
            if let Some(k) = split.class_of(&speaker) {
                if is_train {
                    ds.train.push((f, k));
                } else if is_test {
                    ds.clients[k].files.push(f.clone());
                    ds.test.push((f, k));
                }
            } else if let Some(j) = split.group_b.iter().position(|s| *s == speaker) {
                if is_test {
                    ds.imposters[j].files.push(f);
                }
            }
        }
        // Canonical order: by class, then as listed.
        ds.train.sort_by_key(|(_, k)| *k);
        ds.test.sort_by_key(|(_, k)| *k);
        Ok(ds)
    }

    pub fn n_classes(&self) -> usize {
        self.clients.len()
    }
}

fn stack(files: &[&Features]) -> Result<Array2<f64>> {
    let views: Vec<_> = files.iter().map(|f| f.data.view()).collect();
    concatenate(Axis(0), &views).map_err(|e| Error::arg(format!("cannot stack features: {e}")))
}

/// Training and monitor batches.
///
/// With [`MonitorSet::Val`] the last `val_fraction` of each speaker's training
/// frames (in file order) is held out as the monitor set.
pub fn training_batches(ds: &Datasets, monitor: MonitorSet, val_fraction: f64) -> Result<(Batch, Batch)> {
    let k = ds.n_classes();
    let mut train_parts = Vec::new();
    let mut train_labels = Vec::new();
    let mut mon_parts = Vec::new();
    let mut mon_labels = Vec::new();
    for class in 0..k {
        let files: Vec<&Features> = ds.train.iter().filter(|(_, c)| *c == class).map(|(f, _)| f).collect();
        if files.is_empty() {
            warn!("class {class} has no training files");
            continue;
        }
        let x = stack(&files)?;
        let n = x.nrows();
        let held = match monitor {
            MonitorSet::Val => ((n as f64 * val_fraction).ceil() as usize).min(n.saturating_sub(1)),
            MonitorSet::Test => 0,
        };
        train_labels.extend(std::iter::repeat_n(class, n - held));
        train_parts.push(x.slice(s![..n - held, ..]).to_owned());
        if held > 0 {
            mon_labels.extend(std::iter::repeat_n(class, held));
            mon_parts.push(x.slice(s![n - held.., ..]).to_owned());
        }
    }
    if monitor == MonitorSet::Test {
        for (f, c) in &ds.test {
            mon_parts.push(f.data.clone());
            mon_labels.extend(std::iter::repeat_n(*c, f.frames()));
        }
    }
    let join = |parts: &[Array2<f64>]| -> Result<Array2<f64>> {
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        concatenate(Axis(0), &views).map_err(|e| Error::arg(format!("cannot stack batch: {e}")))
    };
    if train_parts.is_empty() || mon_parts.is_empty() {
        return Err(Error::arg("no training or monitor frames"));
    }
    Ok((
        LabeledBatch::new(join(&train_parts)?, train_labels, k)?,
        LabeledBatch::new(join(&mon_parts)?, mon_labels, k)?,
    ))
}

// ---------------------------------------------------------------------------
// Reports

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: RunConfig,
    pub sizes: Vec<usize>,
    pub train_frames: usize,
    pub monitor_frames: usize,
    pub meta: TrainingMeta,
    pub history: Vec<HistoryRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifyReport {
    pub config: RunConfig,
    pub train: ClassificationReport,
    pub test: ClassificationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocSummary {
    pub eer: f64,
    pub auc: f64,
    pub threshold_at_eer: f64,
    pub polarity_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub config: RunConfig,
    pub n_files: usize,
    pub client_trials: usize,
    pub imposter_trials: usize,
    /// Percent of client trials beating every imposter trial.
    pub argmax_accuracy: f64,
    /// Single threshold swept over the normalized scores of all clients.
    pub global: RocSummary,
    /// Normalized scores shifted by each client's own threshold, then swept.
    pub per_speaker: RocSummary,
    pub thresholds: ThresholdTable<f64>,
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

/// Layer sizes for `dims` inputs, the configured hidden layers and `k` classes.
pub fn network_sizes(dims: usize, hidden: &[usize], k: usize) -> Vec<usize> {
    let mut sizes = vec![dims];
    sizes.extend(hidden);
    sizes.push(k);
    sizes
}

/// Trains on the datasets per the `nn` section.
pub fn train_model(cfg: &RunConfig, ds: &Datasets) -> Result<(Model<f64>, TrainReport)> {
    let (train_set, monitor) = training_batches(ds, cfg.nn.monitor, cfg.nn.val_fraction)?;
    let sizes = network_sizes(train_set.x.ncols(), &cfg.nn.hidden, ds.n_classes());
    let (model, history) = train(&train_set, &monitor, &sizes, &cfg.nn.train_config())?;
    let report = TrainReport {
        config: cfg.clone(),
        sizes,
        train_frames: train_set.len(),
        monitor_frames: monitor.len(),
        meta: model.meta.clone(),
        history,
    };
    Ok((model, report))
}

pub fn classify_report(cfg: &RunConfig, model: &Model<f64>, ds: &Datasets) -> Result<ClassifyReport> {
    let timing = |set: &[(Features, usize)]| {
        set.first()
            .map(|(f, _)| (f.frame_win_s, f.frame_hop_s))
            .unwrap_or((0.1, 0.03))
    };
    let (tw, th) = timing(&ds.train);
    let train = evaluate(model, &ds.train, tw, th)?;
    let (tw, th) = timing(&ds.test);
    let test = evaluate(model, &ds.test, tw, th)?;
    Ok(ClassifyReport {
        config: cfg.clone(),
        train,
        test,
    })
}

/// Verification report and the ROC curve selected by `verify.thresholds`.
pub fn verify_report(
    cfg: &RunConfig,
    model: &Model<f64>,
    ds: &Datasets,
) -> Result<(VerifyReport, crate::verify::RocCurve)> {
    let scores = score_trials(model, &ds.clients, &ds.imposters, cfg.verify.n_files)?;
    let argmax_accuracy = argmax_verify_accuracy(&scores)?;
    let per_client = client_scores(&scores);
    let table = fit_thresholds(&per_client)?;
    let shifted = shift_scores(&per_client, &table)?;
    let global = roc(&pooled_trials(&per_client))?;
    let per_speaker = roc(&pooled_trials(&shifted))?;
    let summary = |r: &crate::verify::RocCurve| RocSummary {
        eer: r.eer,
        auc: r.auc,
        threshold_at_eer: r.global_threshold_at_eer,
        polarity_ok: r.polarity_ok,
    };
    let client_trials = scores.trials.iter().filter(|t| t.client.is_some()).count();
    let report = VerifyReport {
        config: cfg.clone(),
        n_files: cfg.verify.n_files,
        client_trials,
        imposter_trials: scores.trials.len() - client_trials,
        argmax_accuracy,
        global: summary(&global),
        per_speaker: summary(&per_speaker),
        thresholds: table,
    };
    let curve = match cfg.verify.thresholds {
        ThresholdMode::PerSpeaker => per_speaker,
        ThresholdMode::Global => global,
    };
    Ok((report, curve))
}

// ---------------------------------------------------------------------------
// Stamps and stage driver

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub stage: Stage,
    pub skipped: bool,
    pub input_hash: String,
    /// Output path (relative to the run directory) to content hash.
    pub outputs: BTreeMap<String, String>,
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

/// Regular files under `dir`, recursively, sorted.
fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    if !dir.exists() {
        return Ok(out);
    }
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).map_err(|e| Error::io(&d, e))? {
            let path = entry.map_err(|e| Error::io(&d, e))?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path);
            }
        }
    }
    out.sort();
    Ok(out)
}

struct Run<'a> {
    cfg: &'a RunConfig,
    root: PathBuf,
}

impl Run<'_> {
    fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.root)
            .unwrap_or(p)
            .to_string_lossy()
            .replace('\\', "/")
    }

    fn require(&self, stage: Stage, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::Stage {
                stage: stage.to_string(),
                message: format!("missing artifact {}", p.display()),
            })
        }
    }

    fn input_hash(&self, stage: Stage, config_part: &impl Serialize, inputs: &[PathBuf]) -> Result<String> {
        let mut h = Sha256::new();
        h.update(stage.as_str().as_bytes());
        h.update(serde_json::to_vec(config_part).expect("config serializes"));
        for p in inputs {
            h.update(self.rel(p).as_bytes());
            h.update(sha256_file(p)?.as_bytes());
        }
        Ok(hex::encode(h.finalize()))
    }

    fn stamp_path(&self, stage: Stage) -> PathBuf {
        self.root.join(STAMP_DIR).join(format!("{stage}.json"))
    }

    fn up_to_date(&self, stage: Stage, input_hash: &str) -> Option<StageOutcome> {
        let stamp: StageOutcome = read_json(self.stamp_path(stage)).ok()?;
        if stamp.input_hash != input_hash {
            return None;
        }
        for (rel, hash) in &stamp.outputs {
            if sha256_file(&self.root.join(rel)).ok()? != *hash {
                return None;
            }
        }
        Some(StageOutcome { skipped: true, ..stamp })
    }

    /// Runs `work` unless the stamp shows the same inputs and intact outputs.
    fn stage(
        &self,
        stage: Stage,
        config_part: &impl Serialize,
        inputs: &[PathBuf],
        work: impl FnOnce() -> Result<Vec<PathBuf>>,
    ) -> Result<StageOutcome> {
        let wrap = |e: Error| match e {
            e @ Error::Stage { .. } => e,
            other => Error::Stage {
                stage: stage.to_string(),
                message: other.to_string(),
            },
        };
        let input_hash = self.input_hash(stage, config_part, inputs).map_err(wrap)?;
        if let Some(done) = self.up_to_date(stage, &input_hash) {
            info!("{stage}: up to date (inputs {})", &input_hash[..16]);
            return Ok(done);
        }
        let written = work().map_err(wrap)?;
        let mut outputs = BTreeMap::new();
        for p in written {
            outputs.insert(self.rel(&p), sha256_file(&p).map_err(wrap)?);
        }
        let outcome = StageOutcome {
            stage,
            skipped: false,
            input_hash,
            outputs,
        };
        let stamp = self.stamp_path(stage);
        fs::create_dir_all(stamp.parent().unwrap()).map_err(|e| wrap(Error::io(&stamp, e)))?;
        write_json(&stamp, &outcome).map_err(wrap)?;
        info!(
            "{stage}: done (inputs {}, {} outputs, combined {})",
            &outcome.input_hash[..16],
            outcome.outputs.len(),
            &hex::encode(Sha256::digest(serde_json::to_vec(&outcome.outputs).unwrap()))[..16]
        );
        Ok(outcome)
    }

    fn manifest_files(&self, manifest: &Manifest) -> Vec<PathBuf> {
        manifest.entries.iter().map(|e| e.path.clone()).collect()
    }

    fn prepare(&self) -> Result<StageOutcome> {
        let c = &self.cfg.corpus;
        let mut inputs = Vec::new();
        if !c.synthetic {
            let root = c.root.as_ref().expect("validated");
            inputs = list_files(root)?;
        }
        let part = (&self.cfg.corpus, &self.cfg.split);
        self.stage(Stage::Prepare, &part, &inputs, || {
            let manifest = if c.synthetic {
                let dir = self.path(CORPUS_DIR);
                if dir.exists() {
                    fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                }
                generate_synthetic_corpus(&c.synth(), &dir)?
            } else {
                build_manifest(c.root.as_ref().unwrap(), &c.layout_rules())?
            };
            let split = make_split(&manifest, self.cfg.split.n_in_domain, c.gender)?;
            let mpath = self.path(MANIFEST_FILE);
            let spath = self.path(SPLIT_FILE);
            manifest.write_csv(&mpath)?;
            split.write_json(&spath)?;
            let mut out = vec![mpath, spath];
            if c.synthetic {
                out.extend(self.manifest_files(&manifest));
            }
            Ok(out)
        })
    }

    fn vad(&self) -> Result<StageOutcome> {
        let mpath = self.require(Stage::Vad, MANIFEST_FILE)?;
        let manifest = Manifest::read_csv(&mpath)?;
        let mut inputs = vec![mpath];
        inputs.extend(self.manifest_files(&manifest));
        self.stage(Stage::Vad, &self.cfg.vad, &inputs, || {
            let dir = self.path(VOICED_DIR);
            if dir.exists() {
                fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            }
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let voiced: Vec<Option<ManifestEntry>> = manifest
                .entries
                .par_iter()
                .map(|e| {
                    let Some(audio) = voiced_audio(e, &self.cfg.vad)? else {
                        warn!("{}: no voiced frames, file dropped", e.path.display());
                        return Ok(None);
                    };
                    let path = dir.join(format!("{}.wav", e.file_id()));
                    write_wav(&path, &audio)?;
                    Ok(Some(ManifestEntry { path, ..e.clone() }))
                })
                .collect::<Result<_>>()?;
            let out = Manifest {
                entries: voiced.into_iter().flatten().collect(),
            };
            let vpath = dir.join(MANIFEST_FILE);
            out.write_csv(&vpath)?;
            let mut files = vec![vpath];
            files.extend(self.manifest_files(&out));
            Ok(files)
        })
    }

    fn featurize(&self) -> Result<StageOutcome> {
        let use_vad = self.cfg.features.use_vad;
        let mrel = if use_vad {
            format!("{VOICED_DIR}/{MANIFEST_FILE}")
        } else {
            MANIFEST_FILE.to_string()
        };
        let mpath = self.require(Stage::Featurize, &mrel)?;
        let spath = self.require(Stage::Featurize, SPLIT_FILE)?;
        let manifest = Manifest::read_csv(&mpath)?;
        let split = SplitPlan::read_json(&spath)?;
        let mut inputs = vec![mpath, spath];
        inputs.extend(self.manifest_files(&manifest));
        let part = (&self.cfg.mfcc, &self.cfg.features);
        self.stage(Stage::Featurize, &part, &inputs, || {
            let dir = self.path(FEATURES_DIR);
            if dir.exists() {
                fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            }
            // The voiced manifest already went through detection.
            let mut opts = FeaturizeOptions::from_config(self.cfg, false);
            opts.train_categories = split.train_categories.clone();
            featurize_corpus(&manifest, &opts, &dir)?;
            list_files(&dir)
        })
    }

    fn feature_inputs(&self, stage: Stage) -> Result<Vec<PathBuf>> {
        self.require(stage, &format!("{FEATURES_DIR}/{INDEX_FILE}"))?;
        let mut inputs = vec![self.require(stage, SPLIT_FILE)?];
        inputs.extend(list_files(&self.path(FEATURES_DIR))?);
        Ok(inputs)
    }

    fn datasets(&self) -> Result<Datasets> {
        let split = SplitPlan::read_json(self.path(SPLIT_FILE))?;
        Datasets::assemble(load_feature_dir(self.path(FEATURES_DIR))?, &split)
    }

    fn train(&self) -> Result<StageOutcome> {
        let inputs = self.feature_inputs(Stage::Train)?;
        self.stage(Stage::Train, &self.cfg.nn, &inputs, || {
            let ds = self.datasets()?;
            let (model, report) = train_model(self.cfg, &ds)?;
            let mp = self.path(MODEL_FILE);
            let rp = self.path(TRAIN_REPORT);
            model.write(&mp)?;
            write_json(&rp, &report)?;
            Ok(vec![mp, rp])
        })
    }

    fn eval_classify(&self) -> Result<StageOutcome> {
        let mut inputs = self.feature_inputs(Stage::EvalClassify)?;
        inputs.push(self.require(Stage::EvalClassify, MODEL_FILE)?);
        self.stage(Stage::EvalClassify, &(), &inputs, || {
            let model = Model::<f64>::read(self.path(MODEL_FILE))?;
            let report = classify_report(self.cfg, &model, &self.datasets()?)?;
            info!(
                "test accuracy: frame {:.2}%, file {:.2}%",
                report.test.frame_accuracy, report.test.file_accuracy
            );
            let rp = self.path(CLASSIFY_REPORT);
            write_json(&rp, &report)?;
            Ok(vec![rp])
        })
    }

    fn eval_verify(&self) -> Result<StageOutcome> {
        let mut inputs = self.feature_inputs(Stage::EvalVerify)?;
        inputs.push(self.require(Stage::EvalVerify, MODEL_FILE)?);
        self.stage(Stage::EvalVerify, &self.cfg.verify, &inputs, || {
            let model = Model::<f64>::read(self.path(MODEL_FILE))?;
            let (report, curve) = verify_report(self.cfg, &model, &self.datasets()?)?;
            info!(
                "EER: global {:.2}%, per-speaker {:.2}%",
                report.global.eer, report.per_speaker.eer
            );
            let rp = self.path(VERIFY_REPORT);
            let cp = self.path(ROC_FILE);
            write_json(&rp, &report)?;
            curve.write_csv(&cp)?;
            Ok(vec![rp, cp])
        })
    }
}

/// Validates `cfg` and runs the requested stages in pipeline order.
pub fn run_pipeline(cfg: &RunConfig, stages: &[Stage]) -> Result<Vec<StageOutcome>> {
    cfg.validate()?;
    let root = cfg.run.out_dir.clone();
    fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
    let run = Run { cfg, root };
    let mut wanted: Vec<Stage> = stages.to_vec();
    wanted.sort();
    wanted.dedup();
    let mut out = Vec::new();
    for stage in wanted {
        if stage == Stage::Vad && !cfg.features.use_vad {
            info!("vad: disabled by features.use_vad");
            continue;
        }
        out.push(match stage {
            Stage::Prepare => run.prepare()?,
            Stage::Vad => run.vad()?,
            Stage::Featurize => run.featurize()?,
            Stage::Train => run.train()?,
            Stage::EvalClassify => run.eval_classify()?,
            Stage::EvalVerify => run.eval_verify()?,
        });
    }
    Ok(out)
}
