//! Speaker verification on top of the classifier outputs.
//!
//! A trial is one or more test files of a single speaker. Its score vector is
//! the frame-weighted mean of the log outputs, normalized by its own sum. The
//! inputs are negative, so normalization inverts the order: the smaller the
//! normalized component of client `k`, the more the trial resembles `k`.

use std::path::Path;

use log::{debug, warn};
use ndarray::{Array1, Array2, ArrayView1, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classify::frame_scores;
use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, STD_FLOOR};
use crate::nn::Model;
use crate::scalar::Scalar;

/// Mean over frames of the log network outputs.
pub fn mean_log_output<T: Scalar>(model: &Model<T>, features: &FeatureMatrix<T>) -> Result<Array1<T>> {
    if features.frames() == 0 {
        return Err(Error::arg("no frames to score"));
    }
    let s = frame_scores(model, features)?;
    Ok(s.scores.mean_axis(Axis(0)).expect("at least one frame"))
}

/// Divides each component by the sum of all components.
pub fn normalize_scores<T: Scalar>(o: ArrayView1<T>) -> Result<Array1<T>> {
    let total: T = o.sum();
    if total == T::zero() || !total.is_finite() {
        return Err(Error::Numeric(format!("cannot normalize by sum {total}")));
    }
    Ok(o.mapv(|v| v / total))
}

/// All `k`-subsets of `0..n` in lexicographic order.
pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k == 0 || k > n {
        return out;
    }
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        out.push(idx.clone());
        let Some(i) = (0..k).rev().find(|&i| idx[i] != i + n - k) else {
            return out;
        };
        idx[i] += 1;
        for j in i + 1..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}

/// Test files of one speaker.
#[derive(Debug, Clone)]
pub struct SpeakerFiles<T> {
    pub speaker_id: String,
    pub files: Vec<FeatureMatrix<T>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trial {
    pub speaker_id: String,
    pub file_ids: Vec<String>,
    /// Class index for a client's own trial, `None` for imposters.
    pub client: Option<usize>,
}

/// Mean log outputs of every trial (one column per trial) and their
/// normalized counterparts.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix<T> {
    pub clients: Vec<String>,
    pub trials: Vec<Trial>,
    pub raw: Array2<T>,
    pub normalized: Array2<T>,
}

/// Scores every `n_files` combination of each client's and each imposter's
/// files. `clients` must be in class order.
///
/// A combination's score is the mean over all frames of its files, the same
/// as scoring the files concatenated.
pub fn score_trials<T: Scalar>(
    model: &Model<T>,
    clients: &[SpeakerFiles<T>],
    imposters: &[SpeakerFiles<T>],
    n_files: usize,
) -> Result<ScoreMatrix<T>> {
    if clients.len() != model.n_outputs() {
        return Err(Error::arg(format!(
            "{} clients but the model has {} outputs",
            clients.len(),
            model.n_outputs()
        )));
    }
    if imposters.is_empty() {
        return Err(Error::arg("imposter pool is empty"));
    }
    if n_files == 0 {
        return Err(Error::arg("n_files must be positive"));
    }
    let speakers: Vec<(&SpeakerFiles<T>, Option<usize>)> = clients
        .iter()
        .enumerate()
        .map(|(k, s)| (s, Some(k)))
        .chain(imposters.iter().map(|s| (s, None)))
        .collect();
    if let Some((s, _)) = speakers.iter().find(|(s, _)| s.files.len() < n_files) {
        return Err(Error::arg(format!(
            "speaker {} has {} test files, fewer than n_files = {n_files}",
            s.speaker_id,
            s.files.len()
        )));
    }

    // Per-file column sums of log outputs and frame counts.
    let per_file: Vec<Vec<(Array1<T>, usize)>> = speakers
        .par_iter()
        .map(|(s, _)| {
            s.files
                .par_iter()
                .map(|f| {
                    if f.frames() == 0 {
                        return Err(Error::arg(format!("{}: file without frames", s.speaker_id)));
                    }
                    let sc = frame_scores(model, f)?;
                    Ok((sc.scores.sum_axis(Axis(0)), sc.frames()))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let k = model.n_outputs();
    let mut trials = Vec::new();
    let mut columns = Vec::new();
    for ((s, client), sums) in speakers.iter().zip(&per_file) {
        for combo in combinations(s.files.len(), n_files) {
            let mut total = Array1::<T>::zeros(k);
            let mut frames = 0;
            for &i in &combo {
                total += &sums[i].0;
                frames += sums[i].1;
            }
            columns.push(total / T::of_usize(frames));
            trials.push(Trial {
                speaker_id: s.speaker_id.clone(),
                file_ids: combo
                    .iter()
                    .map(|&i| s.files[i].file_id.clone().unwrap_or_else(|| i.to_string()))
                    .collect(),
                client: *client,
            });
        }
    }
    let mut raw = Array2::zeros((k, trials.len()));
    let mut normalized = Array2::zeros((k, trials.len()));
    for (l, col) in columns.iter().enumerate() {
        raw.column_mut(l).assign(col);
        normalized.column_mut(l).assign(&normalize_scores(col.view())?);
    }
    debug!("scored {} trials", trials.len());
    Ok(ScoreMatrix {
        clients: clients.iter().map(|c| c.speaker_id.clone()).collect(),
        trials,
        raw,
        normalized,
    })
}

/// Percentage of client trials whose normalized client component is smaller
/// than that of every imposter trial.
pub fn argmax_verify_accuracy<T: Scalar>(scores: &ScoreMatrix<T>) -> Result<f64> {
    let imposters: Vec<usize> = (0..scores.trials.len())
        .filter(|&l| scores.trials[l].client.is_none())
        .collect();
    if imposters.is_empty() {
        return Err(Error::arg("no imposter trials"));
    }
    let mut total = 0usize;
    let mut correct = 0usize;
    for (t, trial) in scores.trials.iter().enumerate() {
        let Some(k) = trial.client else { continue };
        total += 1;
        let own = scores.normalized[[k, t]];
        if imposters.iter().all(|&l| own < scores.normalized[[k, l]]) {
            correct += 1;
        }
    }
    if total == 0 {
        return Err(Error::arg("no client trials"));
    }
    Ok(100.0 * correct as f64 / total as f64)
}

/// Normalized scores on one client's component: its own trials and the imposter trials.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientScores<T> {
    pub speaker_id: String,
    pub positives: Vec<T>,
    pub negatives: Vec<T>,
}

pub fn client_scores<T: Scalar>(scores: &ScoreMatrix<T>) -> Vec<ClientScores<T>> {
    scores
        .clients
        .iter()
        .enumerate()
        .map(|(k, id)| {
            let mut positives = Vec::new();
            let mut negatives = Vec::new();
            for (l, trial) in scores.trials.iter().enumerate() {
                match trial.client {
                    Some(c) if c == k => positives.push(scores.normalized[[k, l]]),
                    None => negatives.push(scores.normalized[[k, l]]),
                    Some(_) => {}
                }
            }
            ClientScores {
                speaker_id: id.clone(),
                positives,
                negatives,
            }
        })
        .collect()
}

/// Crossing point of `p1·N(μ1, σ1²)` and `(1−p1)·N(μ2, σ2²)`.
///
/// Prefers the root between the two means, otherwise the root nearest their
/// midpoint.
pub fn gaussian_intersection(mu1: f64, sigma1: f64, p1: f64, mu2: f64, sigma2: f64) -> Result<f64> {
    if !(sigma1 > 0.0 && sigma2 > 0.0 && sigma1.is_finite() && sigma2.is_finite()) {
        return Err(Error::arg("standard deviations must be positive and finite"));
    }
    if !(p1 > 0.0 && p1 < 1.0) {
        return Err(Error::arg(format!("prior {p1} outside (0, 1)")));
    }
    if !(mu1.is_finite() && mu2.is_finite()) || mu1 == mu2 {
        return Err(Error::arg("means must be finite and distinct"));
    }
    let p2 = 1.0 - p1;
    let (v1, v2) = (sigma1 * sigma1, sigma2 * sigma2);
    let a = 0.5 / v2 - 0.5 / v1;
    let b = mu1 / v1 - mu2 / v2;
    let c = 0.5 * mu2 * mu2 / v2 - 0.5 * mu1 * mu1 / v1 + (p1 / sigma1).ln() - (p2 / sigma2).ln();

    let roots = if a == 0.0 {
        vec![-c / b]
    } else {
        let disc = b * b - 4.0 * a * c;
        if disc < 0.0 {
            return Err(Error::NoIntersection);
        }
        let q = -0.5 * (b + b.signum() * disc.sqrt());
        if q == 0.0 {
            vec![0.0]
        } else {
            vec![q / a, c / q]
        }
    };
    let (lo, hi) = (mu1.min(mu2), mu1.max(mu2));
    let mid = 0.5 * (mu1 + mu2);
    let by_distance = |x: &&f64| (**x - mid).abs();
    let inside: Vec<f64> = roots.iter().copied().filter(|x| (lo..=hi).contains(x)).collect();
    let pick = if inside.is_empty() { &roots } else { &inside };
    pick.iter()
        .filter(|x| x.is_finite())
        .min_by(|x, y| by_distance(x).total_cmp(&by_distance(y)))
        .copied()
        .ok_or(Error::NoIntersection)
}

/// Population mean and standard deviation, the latter floored.
fn fit_gaussian(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mu = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / n;
    (mu, var.sqrt().max(STD_FLOOR))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdEntry<T> {
    pub speaker_id: String,
    pub threshold: T,
    pub mu_pos: T,
    pub sigma_pos: T,
    pub mu_neg: T,
    pub sigma_neg: T,
    pub prior: T,
    /// Why the Gaussian intersection was not used, if it was not.
    pub fallback: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable<T> {
    pub entries: Vec<ThresholdEntry<T>>,
    /// Intersection fitted on all clients' scores pooled.
    pub global: T,
}

impl<T: Scalar> ThresholdTable<T> {
    pub fn get(&self, speaker_id: &str) -> Option<&ThresholdEntry<T>> {
        self.entries.iter().find(|e| e.speaker_id == speaker_id)
    }
}

/// `(mu, sigma)` of both classes, prior of the positives, threshold, fallback note.
type Intersection = ((f64, f64), (f64, f64), f64, f64, Option<String>);

/// Fits both classes and intersects them, falling back to the midpoint when
/// the weighted densities never cross.
fn intersect(pos: &[f64], neg: &[f64]) -> Intersection {
    let (mp, sp) = fit_gaussian(pos);
    let (mn, sn) = fit_gaussian(neg);
    let prior = pos.len() as f64 / (pos.len() + neg.len()) as f64;
    match gaussian_intersection(mp, sp, prior, mn, sn) {
        Ok(t) => ((mp, sp), (mn, sn), prior, t, None),
        Err(e) => (
            (mp, sp),
            (mn, sn),
            prior,
            0.5 * (mp + mn),
            Some(format!("midpoint: {e}")),
        ),
    }
}

/// Per-client thresholds at the intersection of the fitted positive and
/// negative score distributions. Clients with fewer than two scores in either
/// class get the pooled threshold.
pub fn fit_thresholds<T: Scalar>(scores: &[ClientScores<T>]) -> Result<ThresholdTable<T>> {
    let to64 = |v: &[T]| v.iter().map(|x| x.as_f64()).collect::<Vec<_>>();
    let all_pos: Vec<f64> = scores.iter().flat_map(|c| to64(&c.positives)).collect();
    let all_neg: Vec<f64> = scores.iter().flat_map(|c| to64(&c.negatives)).collect();
    if all_pos.len() < 2 || all_neg.len() < 2 {
        return Err(Error::Stats(
            "need at least two positive and two negative scores".into(),
        ));
    }
    let (_, _, _, global, why) = intersect(&all_pos, &all_neg);
    if let Some(why) = why {
        warn!("pooled threshold: {why}");
    }

    let entries = scores
        .iter()
        .map(|c| {
            let (pos, neg) = (to64(&c.positives), to64(&c.negatives));
            let entry = |(mp, sp): (f64, f64), (mn, sn): (f64, f64), prior: f64, t: f64, fallback| ThresholdEntry {
                speaker_id: c.speaker_id.clone(),
                threshold: T::of(t),
                mu_pos: T::of(mp),
                sigma_pos: T::of(sp),
                mu_neg: T::of(mn),
                sigma_neg: T::of(sn),
                prior: T::of(prior),
                fallback,
            };
            if pos.len() < 2 || neg.len() < 2 {
                let why = format!("{} positives, {} negatives; pooled threshold", pos.len(), neg.len());
                warn!("client {}: {why}", c.speaker_id);
                let nan = (f64::NAN, f64::NAN);
                let gauss = |v: &[f64]| if v.is_empty() { nan } else { fit_gaussian(v) };
                let prior = pos.len() as f64 / (pos.len() + neg.len()).max(1) as f64;
                return entry(gauss(&pos), gauss(&neg), prior, global, Some(why));
            }
            let (g_pos, g_neg, prior, t, why) = intersect(&pos, &neg);
            if let Some(why) = &why {
                warn!("client {}: {why}", c.speaker_id);
            }
            entry(g_pos, g_neg, prior, t, why)
        })
        .collect();
    Ok(ThresholdTable {
        entries,
        global: T::of(global),
    })
}

/// Subtracts each client's threshold from all of that client's scores.
pub fn shift_scores<T: Scalar>(scores: &[ClientScores<T>], table: &ThresholdTable<T>) -> Result<Vec<ClientScores<T>>> {
    scores
        .iter()
        .map(|c| {
            let t = table
                .get(&c.speaker_id)
                .ok_or_else(|| Error::arg(format!("no threshold for client {}", c.speaker_id)))?
                .threshold;
            Ok(ClientScores {
                speaker_id: c.speaker_id.clone(),
                positives: c.positives.iter().map(|&v| v - t).collect(),
                negatives: c.negatives.iter().map(|&v| v - t).collect(),
            })
        })
        .collect()
}

/// `(score, is_client)` pairs of every client, in client order.
pub fn pooled_trials<T: Scalar>(scores: &[ClientScores<T>]) -> Vec<(T, bool)> {
    scores
        .iter()
        .flat_map(|c| {
            c.positives
                .iter()
                .map(|&v| (v, true))
                .chain(c.negatives.iter().map(|&v| (v, false)))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    /// Trials with a score at or below this value are accepted.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RocCurve {
    pub points: Vec<RocPoint>,
    /// Percent.
    pub eer: f64,
    /// Percent.
    pub auc: f64,
    pub global_threshold_at_eer: f64,
    /// False when the AUC falls below 50%, i.e. the score polarity looks inverted.
    pub polarity_ok: bool,
}

/// ROC of the accept-if-score-is-small rule, swept over every distinct score.
///
/// The curve starts at (0, 0) with nothing accepted. The EER is interpolated
/// on the segment where FPR + TPR reaches 1.
pub fn roc<T: Scalar>(trials: &[(T, bool)]) -> Result<RocCurve> {
    let n_pos = trials.iter().filter(|t| t.1).count();
    let n_neg = trials.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::arg("ROC needs both client and imposter trials"));
    }
    if trials.iter().any(|t| !t.0.is_finite()) {
        return Err(Error::Numeric("non-finite trial score".into()));
    }
    // Ascending score = descending negated statistic.
    let mut sorted: Vec<(f64, bool)> = trials.iter().map(|&(s, l)| (s.as_f64(), l)).collect();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));

    let mut points = vec![RocPoint {
        threshold: f64::NEG_INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let v = sorted[i].0;
        while i < sorted.len() && sorted[i].0 == v {
            if sorted[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint {
            threshold: v,
            fpr: fp as f64 / n_neg as f64,
            tpr: tp as f64 / n_pos as f64,
        });
    }

    let auc = points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * 0.5 * (w[1].tpr + w[0].tpr))
        .sum::<f64>();

    let g = |p: &RocPoint| p.fpr + p.tpr - 1.0;
    let j = points.iter().position(|p| g(p) >= 0.0).expect("last point has g = 1");
    let (eer, threshold) = if j == 0 {
        (points[0].fpr, points[0].threshold)
    } else {
        let (a, b) = (&points[j - 1], &points[j]);
        let t = -g(a) / (g(b) - g(a));
        (a.fpr + t * (b.fpr - a.fpr), b.threshold)
    };
    let polarity_ok = auc >= 0.5;
    if !polarity_ok {
        warn!("AUC {:.2}% is below chance; score polarity looks inverted", 100.0 * auc);
    }
    Ok(RocCurve {
        points,
        eer: 100.0 * eer,
        auc: 100.0 * auc,
        global_threshold_at_eer: threshold,
        polarity_ok,
    })
}

impl RocCurve {
    /// `threshold,FPR,TPR` rows.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let csv_err = |e: csv::Error| Error::Parse(format!("{}: {e}", path.display()));
        w.write_record(["threshold", "FPR", "TPR"]).map_err(csv_err)?;
        for p in &self.points {
            w.write_record([p.threshold.to_string(), p.fpr.to_string(), p.tpr.to_string()])
                .map_err(csv_err)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_weights;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn log_weighted_density(x: f64, mu: f64, sigma: f64, p: f64) -> f64 {
        p.ln() - sigma.ln() - (x - mu).powi(2) / (2.0 * sigma * sigma)
    }

    #[test]
    fn normalize_examples() {
        let n = normalize_scores(ndarray::array![-1.0, -1.0, -2.0].view()).unwrap();
        assert_eq!(n, ndarray::array![0.25, 0.25, 0.5]);
        let u = normalize_scores(Array1::from_elem(4, -3.0f64).view()).unwrap();
        assert!(u.iter().all(|&v| (v - 0.25).abs() < 1e-15));
        assert!(matches!(
            normalize_scores(ndarray::array![0.0, 0.0].view()),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn mean_log_output_examples() {
        let zero = Model::<f64>::zeros(&[3, 2]).unwrap();
        let f = FeatureMatrix::new(Array2::ones((4, 3)), 0.1, 0.03);
        let m = mean_log_output(&zero, &f).unwrap();
        assert!(m.iter().all(|&v| (v - 0.5f64.ln()).abs() < 1e-15));
        assert!(mean_log_output(&zero, &FeatureMatrix::new(Array2::zeros((0, 3)), 0.1, 0.03)).is_err());

        let model = init_weights::<f64>(&[3, 4, 2], 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array2::from_shape_simple_fn((9, 3), || rng.random_range(-1.0..1.0));
        let f = FeatureMatrix::new(x, 0.1, 0.03);
        let s = frame_scores(&model, &f).unwrap();
        let m = mean_log_output(&model, &f).unwrap();
        for k in 0..2 {
            let col_mean = s.scores.column(k).sum() / 9.0;
            assert!((m[k] - col_mean).abs() < 1e-12);
        }
    }

    #[test]
    fn combinations_are_lexicographic() {
        assert_eq!(
            combinations(4, 2),
            vec![vec![0, 1], vec![0, 2], vec![0, 3], vec![1, 2], vec![1, 3], vec![2, 3]]
        );
        assert_eq!(combinations(5, 2).len(), 10);
        assert_eq!(combinations(3, 3), vec![vec![0, 1, 2]]);
        assert!(combinations(2, 3).is_empty());
    }

    #[test]
    fn intersection_symmetric_cases() {
        assert!(gaussian_intersection(-1.0, 0.7, 0.5, 1.0, 0.7).unwrap().abs() < 1e-12);
        assert!((gaussian_intersection(0.0, 1.0, 0.5, 4.0, 1.0).unwrap() - 2.0).abs() < 1e-12);
        assert!(gaussian_intersection(0.0, 1.0, 0.5, 0.0, 2.0).is_err());
        assert!(gaussian_intersection(0.0, 1.0, 1.0, 1.0, 2.0).is_err());
    }

    #[test]
    fn intersection_without_real_root() {
        // A tiny prior on a narrow component stays below the wide one everywhere.
        assert!(matches!(
            gaussian_intersection(0.0, 0.01, 1e-9, 0.001, 10.0),
            Err(Error::NoIntersection)
        ));
    }

    fn bisect(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64) -> f64 {
        let mut flo = f(lo);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            let fm = f(mid);
            if (fm < 0.0) == (flo < 0.0) {
                lo = mid;
                flo = fm;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn intersection_matches_bisection() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        while checked < 100 {
            let mu1 = rng.random_range(-1.0..1.0);
            let mu2 = mu1 + rng.random_range(0.5..3.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let (s1, s2) = (rng.random_range(0.2..1.5), rng.random_range(0.2..1.5));
            let p1 = rng.random_range(0.05..0.95);
            let f = |x| log_weighted_density(x, mu1, s1, p1) - log_weighted_density(x, mu2, s2, 1.0 - p1);
            let (lo, hi) = (mu1.min(mu2), mu1.max(mu2));
            if f(lo).signum() == f(hi).signum() {
                continue;
            }
            let x = gaussian_intersection(mu1, s1, p1, mu2, s2).unwrap();
            assert!((x - bisect(f, lo, hi)).abs() < 1e-9, "{mu1} {s1} {p1} {mu2} {s2}");
            checked += 1;
        }
    }

    fn client(id: &str, pos: &[f64], neg: &[f64]) -> ClientScores<f64> {
        ClientScores {
            speaker_id: id.into(),
            positives: pos.to_vec(),
            negatives: neg.to_vec(),
        }
    }

    #[test]
    fn thresholds_bracket_separated_classes() {
        let c = client("a", &[0.10, 0.11, 0.09], &[0.30, 0.31, 0.29, 0.30, 0.32]);
        let t = fit_thresholds(&[c]).unwrap();
        let e = &t.entries[0];
        assert!(e.threshold > 0.11 && e.threshold < 0.29);
        assert!(e.fallback.is_none());
        assert!((e.prior - 3.0 / 8.0).abs() < 1e-15);
    }

    #[test]
    fn sparse_client_uses_pooled_threshold() {
        let t = fit_thresholds(&[
            client("a", &[0.1, 0.12], &[0.3, 0.31, 0.33]),
            client("b", &[0.1], &[0.3, 0.32]),
        ])
        .unwrap();
        assert_eq!(t.entries[1].threshold, t.global);
        assert!(t.entries[1].fallback.is_some());
    }

    #[test]
    fn shift_examples() {
        let c = client("a", &[0.3], &[0.5]);
        let zero = ThresholdTable {
            entries: vec![ThresholdEntry {
                speaker_id: "a".into(),
                threshold: 0.0,
                mu_pos: 0.0,
                sigma_pos: 1.0,
                mu_neg: 1.0,
                sigma_neg: 1.0,
                prior: 0.5,
                fallback: None,
            }],
            global: 0.0,
        };
        assert_eq!(shift_scores(std::slice::from_ref(&c), &zero).unwrap()[0], c);
        let mut table = zero.clone();
        table.entries[0].threshold = 0.1;
        assert!((shift_scores(std::slice::from_ref(&c), &table).unwrap()[0].positives[0] - 0.2).abs() < 1e-15);
        assert!(shift_scores(&[client("b", &[0.3], &[0.5])], &table).is_err());
    }

    #[test]
    fn refit_after_shift_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let clients: Vec<_> = (0..4)
            .map(|i| ClientScores {
                speaker_id: i.to_string(),
                positives: (0..10).map(|_| rng.random_range(0.05..0.09)).collect(),
                negatives: (0..40).map(|_| rng.random_range(0.08..0.15)).collect(),
            })
            .collect();
        let table = fit_thresholds(&clients).unwrap();
        let shifted = shift_scores(&clients, &table).unwrap();
        let again = fit_thresholds(&shifted).unwrap();
        assert!(again
            .entries
            .iter()
            .all(|e: &ThresholdEntry<f64>| e.threshold.abs() < 1e-9));
    }

    #[test]
    fn roc_perfect_separation() {
        let trials = [(0.1, true), (0.2, true), (0.5, false), (0.6, false), (0.7, false)];
        let r = roc(&trials).unwrap();
        assert_eq!(r.eer, 0.0);
        assert_eq!(r.auc, 100.0);
        assert!(r.polarity_ok);
        assert!(r.global_threshold_at_eer >= 0.2 && r.global_threshold_at_eer < 0.5);
        assert!(roc(&[(0.1, true)]).is_err());
    }

    #[test]
    fn roc_random_labels_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let trials: Vec<(f64, bool)> = (0..10_000)
            .map(|_| (rng.random::<f64>(), rng.random_bool(0.5)))
            .collect();
        let r = roc(&trials).unwrap();
        assert!((r.eer - 50.0).abs() < 5.0, "{}", r.eer);
    }

    #[test]
    fn verify_accuracy_trivial_client() {
        let scores = ScoreMatrix {
            clients: vec!["a".into()],
            trials: vec![
                Trial {
                    speaker_id: "a".into(),
                    file_ids: vec![],
                    client: Some(0),
                },
                Trial {
                    speaker_id: "x".into(),
                    file_ids: vec![],
                    client: None,
                },
            ],
            raw: ndarray::array![[-1.0, -2.0]],
            normalized: ndarray::array![[0.1, 0.9]],
        };
        assert_eq!(argmax_verify_accuracy(&scores).unwrap(), 100.0);
    }

    proptest! {
        #[test]
        fn normalization_sums_to_one_and_inverts(v in prop::collection::vec(-50.0f64..-1e-3, 1..30)) {
            let o = Array1::from(v);
            let n = normalize_scores(o.view()).unwrap();
            prop_assert!((n.sum() - 1.0).abs() < 1e-12);
            let argmax = crate::nn::argmax(o.iter().copied());
            let argmin = crate::nn::argmax(n.iter().map(|&x| -x));
            prop_assert_eq!(o[argmax], o[argmin]);
        }

        #[test]
        fn intersection_balances_weighted_logs(
            mu1 in -2.0f64..2.0, gap in 0.2f64..3.0, s1 in 0.1f64..2.0, s2 in 0.1f64..2.0, p1 in 0.02f64..0.98,
        ) {
            let mu2 = mu1 + gap;
            if let Ok(x) = gaussian_intersection(mu1, s1, p1, mu2, s2) {
                let d = log_weighted_density(x, mu1, s1, p1) - log_weighted_density(x, mu2, s2, 1.0 - p1);
                prop_assert!(d.abs() < 1e-8, "residual {}", d);
            }
        }

        #[test]
        fn roc_curve_invariants(seed in 0u64..200, n in 2usize..60) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut trials: Vec<(f64, bool)> = (0..n).map(|_| ((rng.random_range(0..10) as f64) / 10.0, rng.random_bool(0.5))).collect();
            trials[0].1 = true;
            trials[1].1 = false;
            let r = roc(&trials).unwrap();
            prop_assert!(r.points.windows(2).all(|w| w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr));
            prop_assert!((0.0..=100.0).contains(&r.auc) && (0.0..=100.0).contains(&r.eer));
        }

        #[test]
        fn client_shift_is_removed_by_refit(shift in -0.05f64..0.05) {
            let base = vec![
                client("a", &[0.05, 0.07, 0.06], &[0.10, 0.12, 0.14, 0.11]),
                client("b", &[0.04, 0.06, 0.05], &[0.09, 0.13, 0.12, 0.10]),
            ];
            let mut moved = base.clone();
            let c = &mut moved[0];
            c.positives.iter_mut().chain(c.negatives.iter_mut()).for_each(|v| *v += shift);
            let a = shift_scores(&base, &fit_thresholds(&base).unwrap()).unwrap();
            let b = shift_scores(&moved, &fit_thresholds(&moved).unwrap()).unwrap();
            for (x, y) in a[0].positives.iter().zip(&b[0].positives) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }
    }
}
