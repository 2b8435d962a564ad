use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;

use nnspeaker::config::{MonitorSet, MvnMode, RunConfig, ThresholdMode};
use nnspeaker::corpus::{
    build_manifest, generate_synthetic_corpus, make_split, read_wav, write_wav, Category, Layout, LayoutRules,
    Manifest, SplitPlan, SynthConfig,
};
use nnspeaker::nn::{format_sizes, gradient_check, grid_search, parse_sizes, standard_grid, GridCandidate, Model};
use nnspeaker::pipeline::{
    classify_report, featurize_corpus, load_feature_dir, run_pipeline, training_batches, verify_report, write_json,
    Datasets, FeaturizeOptions, Stage, TrainReport,
};
use nnspeaker::preprocess::{detect_voice, extract_voiced, normalize_amplitude};
use nnspeaker::{Error, Features, Result};

const LONG_VERSION: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    "\nprofile: ",
    env!("NNSPEAKER_PROFILE"),
    "\ntarget: ",
    env!("NNSPEAKER_TARGET"),
    "\nscalar: f64 (features stored as f32)"
);

#[derive(Parser)]
#[command(name = "nnspeaker", version, long_version = LONG_VERSION)]
#[command(about = "Neural-network speaker classification and verification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArg {
    /// Run configuration supplying defaults for unspecified options.
    #[arg(long)]
    config: Option<PathBuf>,
}

impl ConfigArg {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p),
            None => Ok(RunConfig::default()),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Build a manifest (and optionally a split) from a corpus directory.
    Prepare {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        gender: Option<char>,
        #[arg(long, default_value = "timit")]
        layout: String,
        #[arg(long, default_value = "wav")]
        extension: String,
        /// Also write a split with this many in-domain speakers.
        #[arg(long, requires = "split_out")]
        n_in_domain: Option<usize>,
        #[arg(long)]
        split_out: Option<PathBuf>,
    },
    /// Generate the synthetic corpus and its manifest.
    Synth {
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        speakers: usize,
        #[arg(long, default_value_t = 10)]
        files: usize,
        #[arg(long, default_value_t = 2.5)]
        duration: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run voice-activity detection on one file.
    Vad {
        #[arg(long = "in", alias = "wav")]
        input: PathBuf,
        /// Voiced samples only, as a WAV file.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Median smoothing width.
        #[arg(long)]
        step: Option<usize>,
        /// Median smoothing repetitions.
        #[arg(long)]
        order: Option<usize>,
        /// Histogram bins for the thresholds.
        #[arg(long)]
        bins: Option<usize>,
        /// Weight of the lowest histogram peak.
        #[arg(long)]
        weight: Option<f64>,
        /// Per-frame decisions as CSV.
        #[arg(long)]
        mask_out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Extract stacked, normalized features for every manifest file.
    Featurize {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        mvn: Option<String>,
        /// Frames per stack and hop, e.g. `10x3`.
        #[arg(long)]
        concat: Option<String>,
        #[arg(long)]
        no_vad: bool,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Train a network on a feature directory.
    Train {
        #[arg(long)]
        features: PathBuf,
        /// Layer sizes, e.g. `390:200:200`; defaults to the config's hidden layers.
        #[arg(long)]
        sizes: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        schedule: Option<String>,
        #[arg(long)]
        monitor: Option<String>,
        #[arg(long)]
        max_iters: Option<usize>,
        /// Speaker split; without it every speaker with training files is a class.
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        report: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Rank network structures by monitor accuracy after brief training.
    Gridsearch {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long, default_value_t = 0.1)]
        fraction: f64,
        #[arg(long, default_value_t = 50)]
        iters: usize,
        /// Hidden layouts to try, e.g. `100,200:200`; defaults to the standard grid.
        #[arg(long)]
        hidden: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        #[arg(long, default_value = "9:5:4")]
        sizes: String,
        #[arg(long, default_value_t = 7)]
        samples: usize,
        #[arg(long, default_value_t = 0.0)]
        lambda: f64,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Frame- and file-level classification accuracy.
    EvalClassify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        split: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Verification scores, thresholds and ROC.
    EvalVerify {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        split: PathBuf,
        #[arg(long)]
        nfiles: Option<usize>,
        #[arg(long)]
        thresholds: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        roc_out: Option<PathBuf>,
        #[command(flatten)]
        config: ConfigArg,
    },
    /// Run pipeline stages from a configuration file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated subset of prepare,vad,featurize,train,eval-classify,eval-verify.
        #[arg(long)]
        stages: Option<String>,
    },
}

fn parse_concat(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("--concat `{s}` is not WINxHOP"));
    let (w, h) = s.split_once('x').ok_or_else(bad)?;
    Ok((w.parse().map_err(|_| bad())?, h.parse().map_err(|_| bad())?))
}

fn parse_schedule(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad schedule value `{v}`")))
        })
        .collect()
}

/// Every speaker with training files becomes a class, in index order.
fn split_from_features(files: &[Features]) -> SplitPlan {
    let mut speakers: Vec<String> = Vec::new();
    for f in files {
        let is_train = f
            .file_id
            .as_deref()
            .and_then(nnspeaker::pipeline::category_of_file_id)
            .is_some_and(|c| c == Category::Sx);
        if let Some(s) = &f.speaker_id {
            if is_train && !speakers.contains(s) {
                speakers.push(s.clone());
            }
        }
    }
    SplitPlan {
        group_a: speakers,
        group_b: Vec::new(),
        train_categories: vec![Category::Sx],
        test_categories: vec![Category::Sa, Category::Si],
    }
}

fn datasets(features: &Path, split: Option<&Path>) -> Result<Datasets> {
    let files = load_feature_dir(features)?;
    let split = match split {
        Some(p) => SplitPlan::read_json(p)?,
        None => split_from_features(&files),
    };
    Datasets::assemble(files, &split)
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("serializable"));
}

fn execute(cmd: Command) -> Result<()> {
    match cmd {
        Command::Prepare {
            root,
            out,
            gender,
            layout,
            extension,
            n_in_domain,
            split_out,
        } => {
            let layout = match layout.as_str() {
                "timit" => Layout::Timit,
                "flat" => Layout::Flat,
                other => return Err(Error::Config(format!("unknown layout `{other}` (timit|flat)"))),
            };
            let mut manifest = build_manifest(&root, &LayoutRules { layout, extension })?;
            if let Some(g) = gender {
                let g = g.to_ascii_uppercase();
                manifest
                    .entries
                    .retain(|e| e.gender().map(|c| c.to_ascii_uppercase()) == Some(g));
            }
            manifest.write_csv(&out)?;
            println!("{} files, {} speakers", manifest.len(), manifest.speakers().len());
            if let (Some(n), Some(path)) = (n_in_domain, split_out) {
                let split = make_split(&manifest, n, gender)?;
                split.write_json(&path)?;
                println!(
                    "split: {} in-domain, {} imposters",
                    split.group_a.len(),
                    split.group_b.len()
                );
            }
        }
        Command::Synth {
            seed,
            speakers,
            files,
            duration,
            out,
        } => {
            let cfg = SynthConfig {
                seed,
                n_speakers: speakers,
                files_per_speaker: files,
                duration_s: duration,
                ..SynthConfig::default()
            };
            let manifest = generate_synthetic_corpus(&cfg, &out)?;
            manifest.write_csv(out.join("manifest.csv"))?;
            println!("{} files written to {}", manifest.len(), out.display());
        }
        Command::Vad {
            input,
            out,
            step,
            order,
            bins,
            weight,
            mask_out,
            config,
        } => {
            let mut cfg = config.load()?;
            cfg.vad.step = step.unwrap_or(cfg.vad.step);
            cfg.vad.order = order.unwrap_or(cfg.vad.order);
            cfg.vad.n_bins = bins.unwrap_or(cfg.vad.n_bins);
            cfg.vad.weight = weight.unwrap_or(cfg.vad.weight);
            cfg.validate()?;
            let audio = normalize_amplitude(&read_wav::<f64>(&input)?);
            let mask = detect_voice(&audio, &cfg.vad)?;
            println!(
                "voiced {:.1}% of {} samples (energy threshold {:.6}, centroid threshold {:.3})",
                100.0 * mask.voiced_samples() as f64 / audio.len().max(1) as f64,
                audio.len(),
                mask.energy_threshold,
                mask.centroid_threshold
            );
            if let Some(path) = mask_out {
                ensure_parent(&path)?;
                let mut w = String::new();
                w.push_str("frame,start_s,energy,centroid,voiced\n");
                let sr = audio.sample_rate as f64;
                for (i, v) in mask.frame_decisions.iter().enumerate() {
                    w.push_str(&format!(
                        "{i},{},{},{},{}\n",
                        (i * mask.hop_len) as f64 / sr,
                        mask.energy[i],
                        mask.centroid[i],
                        u8::from(*v)
                    ));
                }
                std::fs::write(&path, w).map_err(|e| Error::io(&path, e))?;
            }
            if let Some(path) = out {
                ensure_parent(&path)?;
                write_wav(&path, &extract_voiced(&audio, &mask)?)?;
            }
        }
        Command::Featurize {
            manifest,
            out,
            mvn,
            concat,
            no_vad,
            config,
        } => {
            let mut cfg = config.load()?;
            if let Some(m) = mvn {
                cfg.features.mvn = m.parse::<MvnMode>()?;
            }
            if let Some(c) = concat {
                (cfg.features.concat_win, cfg.features.concat_hop) = parse_concat(&c)?;
            }
            if no_vad {
                cfg.features.use_vad = false;
            }
            cfg.validate()?;
            let manifest = Manifest::read_csv(&manifest)?;
            let opts = FeaturizeOptions::from_config(&cfg, cfg.features.use_vad);
            let index = featurize_corpus(&manifest, &opts, &out)?;
            println!("{} feature files written to {}", index.len(), out.display());
        }
        Command::Train {
            features,
            sizes,
            seed,
            schedule,
            monitor,
            max_iters,
            split,
            out,
            report,
            config,
        } => {
            let mut cfg = config.load()?;
            if let Some(s) = seed {
                cfg.nn.seed = s;
            }
            if let Some(s) = schedule {
                cfg.nn.lambda_schedule = parse_schedule(&s)?;
            }
            if let Some(m) = monitor {
                cfg.nn.monitor = m.parse::<MonitorSet>()?;
            }
            if let Some(m) = max_iters {
                cfg.nn.max_total_iters = m;
            }
            let ds = datasets(&features, split.as_deref())?;
            if let Some(s) = sizes {
                let sizes = parse_sizes(&s)?;
                if sizes.last() != Some(&ds.n_classes()) {
                    return Err(Error::Config(format!(
                        "--sizes {s} ends in {} outputs but the data has {} classes",
                        sizes.last().unwrap(),
                        ds.n_classes()
                    )));
                }
                cfg.nn.hidden = sizes[1..sizes.len() - 1].to_vec();
            }
            cfg.validate()?;
            let (model, train_report): (Model<f64>, TrainReport) = nnspeaker::pipeline::train_model(&cfg, &ds)?;
            model.write(&out)?;
            if let Some(r) = report {
                write_json(&r, &train_report)?;
            }
            let last = train_report.history.last();
            println!(
                "{} trained for {} iterations ({}), monitor accuracy {:.2}%",
                format_sizes(&train_report.sizes),
                model.meta.iterations,
                model.meta.stop_reason,
                last.map_or(0.0, |h| h.monitor_accuracy)
            );
        }
        Command::Gridsearch {
            features,
            split,
            fraction,
            iters,
            hidden,
            seed,
            out,
            config,
        } => {
            let mut cfg = config.load()?;
            if let Some(s) = seed {
                cfg.nn.seed = s;
            }
            let ds = datasets(&features, split.as_deref())?;
            let (train_set, monitor) = training_batches(&ds, cfg.nn.monitor, cfg.nn.val_fraction)?;
            let candidates = match hidden {
                Some(h) => h
                    .split(',')
                    .map(|layout| {
                        let hidden = layout
                            .split(':')
                            .map(|w| w.parse().map_err(|_| Error::Config(format!("bad width `{w}`"))))
                            .collect::<Result<Vec<usize>>>()?;
                        Ok(GridCandidate {
                            hidden,
                            max_iters: iters,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?,
                None => standard_grid(iters),
            };
            let ranked = grid_search(&train_set, &monitor, &candidates, fraction, &cfg.nn.train_config())?;
            for (i, r) in ranked.iter().enumerate() {
                println!(
                    "{:>2}. {:<16} {:.2}%",
                    i + 1,
                    format_sizes(&r.sizes),
                    r.monitor_accuracy
                );
            }
            if let Some(p) = out {
                write_json(&p, &ranked)?;
            }
        }
        Command::Gradcheck {
            sizes,
            samples,
            lambda,
            seed,
        } => {
            let sizes = parse_sizes(&sizes)?;
            let check = gradient_check(&sizes, samples, lambda, seed)?;
            println!(
                "max relative error {:.3e} (bias entries {:.3e}) over {} weights",
                check.max_relative_error,
                check.bias_max_relative_error,
                check.analytic.len()
            );
            if check.max_relative_error >= 1e-6 {
                return Err(Error::Numeric("gradient check above 1e-6".into()));
            }
        }
        Command::EvalClassify {
            model,
            features,
            split,
            out,
            config,
        } => {
            let cfg = config.load()?;
            let model = Model::<f64>::read(&model)?;
            let report = classify_report(&cfg, &model, &datasets(&features, split.as_deref())?)?;
            write_json(&out, &report)?;
            print_json(&serde_json::json!({
                "train": { "frame_accuracy": report.train.frame_accuracy, "file_accuracy": report.train.file_accuracy },
                "test": { "frame_accuracy": report.test.frame_accuracy, "file_accuracy": report.test.file_accuracy },
            }));
        }
        Command::EvalVerify {
            model,
            features,
            split,
            nfiles,
            thresholds,
            out,
            roc_out,
            config,
        } => {
            let mut cfg = config.load()?;
            if let Some(n) = nfiles {
                cfg.verify.n_files = n;
            }
            if let Some(t) = thresholds {
                cfg.verify.thresholds = t.parse::<ThresholdMode>()?;
            }
            cfg.validate()?;
            let model = Model::<f64>::read(&model)?;
            let (report, curve) = verify_report(&cfg, &model, &datasets(&features, Some(&split))?)?;
            write_json(&out, &report)?;
            if let Some(p) = roc_out {
                curve.write_csv(&p)?;
            }
            println!(
                "argmax accuracy {:.2}%; EER global {:.2}% (AUC {:.2}%), per-speaker {:.2}% (AUC {:.2}%)",
                report.argmax_accuracy,
                report.global.eer,
                report.global.auc,
                report.per_speaker.eer,
                report.per_speaker.auc
            );
        }
        Command::Run { config, stages } => {
            let cfg = RunConfig::load(&config)?;
            let stages = match stages {
                Some(s) => Stage::parse_list(&s)?,
                None => Stage::ALL.to_vec(),
            };
            for outcome in run_pipeline(&cfg, &stages)? {
                println!(
                    "{:<14} {} inputs {}",
                    outcome.stage.as_str(),
                    if outcome.skipped { "up to date" } else { "done      " },
                    &outcome.input_hash[..16]
                );
            }
        }
    }
    Ok(())
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e)),
        None => Ok(()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
