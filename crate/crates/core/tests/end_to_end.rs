//! Synthetic end-to-end runs checked against loop oracles written from scratch.

use std::path::Path;
use std::sync::OnceLock;

use ndarray::{concatenate, Axis};
use nnspeaker::config::RunConfig;
use nnspeaker::corpus::SplitPlan;
use nnspeaker::nn::{Model, PROB_CLIP};
use nnspeaker::pipeline::{
    load_feature_dir, read_json, run_pipeline, ClassifyReport, Datasets, Stage, TrainReport, VerifyReport,
    CLASSIFY_REPORT, FEATURES_DIR, MODEL_FILE, SPLIT_FILE, TRAIN_REPORT, VERIFY_REPORT,
};

fn run(cfg_text: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let cfg = RunConfig::from_toml_str(&format!("run.out_dir = \"{}\"\n{cfg_text}", dir.path().display())).unwrap();
    let stages: Vec<Stage> = if cfg.split.n_in_domain == cfg.corpus.speakers {
        Stage::ALL.into_iter().filter(|s| *s != Stage::EvalVerify).collect()
    } else {
        Stage::ALL.to_vec()
    };
    run_pipeline(&cfg, &stages).unwrap();
    dir
}

/// Ten speakers, all enrolled, 390:200:10.
fn ten_speakers() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| run("corpus.speakers = 10\nsplit.n_in_domain = 10\nnn.hidden = [200]\n"))
        .path()
}

/// Twenty speakers split 12 / 8, 390:100:12.
fn twelve_eight() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| run("nn.hidden = [100]\n")).path()
}

#[test]
fn training_beats_chance_after_first_stage() {
    let r: TrainReport = read_json(ten_speakers().join(TRAIN_REPORT)).unwrap();
    assert_eq!(r.sizes, vec![390, 200, 10]);
    let first_lambda = r.history[0].lambda;
    let stage1_best = r
        .history
        .iter()
        .take_while(|h| h.lambda == first_lambda)
        .map(|h| h.monitor_accuracy)
        .fold(f64::MIN, f64::max);
    assert!(stage1_best > 10.0, "{stage1_best}");
    let overall = r.history.iter().map(|h| h.monitor_accuracy).fold(f64::MIN, f64::max);
    assert!(overall >= stage1_best);
    // Stages appear in schedule order.
    let lambdas: Vec<f64> = r.history.iter().map(|h| h.lambda).collect();
    assert!(lambdas.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn ten_speakers_classify() {
    let r: ClassifyReport = read_json(ten_speakers().join(CLASSIFY_REPORT)).unwrap();
    assert_eq!(r.test.n_files, 50);
    assert!(r.test.file_accuracy >= 95.0, "{}", r.test.file_accuracy);
    assert!(r.test.frame_accuracy >= 50.0, "{}", r.test.frame_accuracy);
    assert!(r.train.file_accuracy >= r.test.file_accuracy);
}

/// Client component of the normalized mean log output of `frames`.
fn oracle_scores(model: &Model<f64>, frames: &[&nnspeaker::Features]) -> Vec<f64> {
    let views: Vec<_> = frames.iter().map(|f| f.data.view()).collect();
    let x = concatenate(Axis(0), &views).unwrap();
    let h = model.predict(x.view()).unwrap();
    let m = h.nrows() as f64;
    let o: Vec<f64> = (0..h.ncols())
        .map(|k| h.column(k).iter().map(|p| p.max(PROB_CLIP).ln()).sum::<f64>() / m)
        .collect();
    let total: f64 = o.iter().sum();
    o.iter().map(|v| v / total).collect()
}

struct Oracle {
    /// Per client: own-trial scores and imposter-trial scores on its component.
    per_client: Vec<(Vec<f64>, Vec<f64>)>,
    /// Per client: success flags of its own trials.
    success: Vec<Vec<bool>>,
}

fn oracle(dir: &Path, n_files: usize) -> Oracle {
    let model = Model::<f64>::read(dir.join(MODEL_FILE)).unwrap();
    let split = SplitPlan::read_json(dir.join(SPLIT_FILE)).unwrap();
    let ds = Datasets::assemble(load_feature_dir(dir.join(FEATURES_DIR)).unwrap(), &split).unwrap();
    let pairs = |n: usize| -> Vec<(usize, usize)> {
        assert_eq!(n_files, 2);
        let mut v = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                v.push((i, j));
            }
        }
        v
    };
    let mut imposter_vectors = Vec::new();
    for imp in &ds.imposters {
        for (i, j) in pairs(imp.files.len()) {
            imposter_vectors.push(oracle_scores(&model, &[&imp.files[i], &imp.files[j]]));
        }
    }
    let mut per_client = Vec::new();
    let mut success = Vec::new();
    for (k, client) in ds.clients.iter().enumerate() {
        let own: Vec<f64> = pairs(client.files.len())
            .into_iter()
            .map(|(i, j)| oracle_scores(&model, &[&client.files[i], &client.files[j]])[k])
            .collect();
        let neg: Vec<f64> = imposter_vectors.iter().map(|v| v[k]).collect();
        success.push(own.iter().map(|s| neg.iter().all(|n| s < n)).collect());
        per_client.push((own, neg));
    }
    Oracle { per_client, success }
}

#[test]
fn argmax_accuracy_matches_loop_oracle() {
    let dir = twelve_eight();
    let r: VerifyReport = read_json(dir.join(VERIFY_REPORT)).unwrap();
    let o = oracle(dir, r.n_files);
    let flags: Vec<bool> = o.success.iter().flatten().copied().collect();
    assert_eq!(flags.len(), r.client_trials);
    let acc = 100.0 * flags.iter().filter(|&&b| b).count() as f64 / flags.len() as f64;
    assert!((acc - r.argmax_accuracy).abs() < 1e-9, "{acc} vs {}", r.argmax_accuracy);
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mu = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / n;
    (mu, var.sqrt().max(1e-6))
}

fn bisect_crossing(mp: f64, sp: f64, p: f64, mn: f64, sn: f64) -> Option<f64> {
    let g = |x: f64| {
        (p.ln() - sp.ln() - 0.5 * ((x - mp) / sp).powi(2)) - ((1.0 - p).ln() - sn.ln() - 0.5 * ((x - mn) / sn).powi(2))
    };
    let (mut lo, mut hi) = (mp.min(mn), mp.max(mn));
    let (glo, ghi) = (g(lo), g(hi));
    if glo.signum() == ghi.signum() {
        return None;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid).signum() == glo.signum() {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(0.5 * (lo + hi))
}

#[test]
fn thresholds_match_refit_oracle() {
    let dir = twelve_eight();
    let r: VerifyReport = read_json(dir.join(VERIFY_REPORT)).unwrap();
    let o = oracle(dir, r.n_files);
    let mut checked = 0;
    for (entry, (pos, neg)) in r.thresholds.entries.iter().zip(&o.per_client) {
        let (mp, sp) = mean_std(pos);
        let (mn, sn) = mean_std(neg);
        let p = pos.len() as f64 / (pos.len() + neg.len()) as f64;
        assert!((entry.mu_pos - mp).abs() < 1e-9 && (entry.mu_neg - mn).abs() < 1e-9);
        assert!((entry.sigma_pos - sp).abs() < 1e-9 && (entry.sigma_neg - sn).abs() < 1e-9);
        assert!((entry.prior - p).abs() < 1e-12);
        if entry.fallback.is_none() {
            if let Some(t) = bisect_crossing(mp, sp, p, mn, sn) {
                assert!(
                    (entry.threshold - t).abs() < 1e-9,
                    "{}: {} vs {t}",
                    entry.speaker_id,
                    entry.threshold
                );
                checked += 1;
            }
        }
    }
    assert!(
        checked >= 6,
        "only {checked} thresholds had a crossing between the means"
    );
}
