//! Closed-set speaker classification from per-frame log outputs.

use ndarray::{Array1, Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::nn::{argmax, Model, PROB_CLIP};
use crate::scalar::Scalar;

/// Default window and hop of one stacked feature frame, in seconds.
pub const STACK_WIN_S: f64 = 0.100;
pub const STACK_HOP_S: f64 = 0.030;

/// `log` of the clipped network outputs, one row per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct LogScoreFrameMatrix<T> {
    pub scores: Array2<T>,
    pub speaker_id: Option<String>,
    pub file_id: Option<String>,
}

impl<T: Scalar> LogScoreFrameMatrix<T> {
    pub fn frames(&self) -> usize {
        self.scores.nrows()
    }

    pub fn classes(&self) -> usize {
        self.scores.ncols()
    }
}

pub fn frame_scores<T: Scalar>(model: &Model<T>, features: &FeatureMatrix<T>) -> Result<LogScoreFrameMatrix<T>> {
    let clip = T::of(PROB_CLIP).max(T::min_positive_value());
    let out = model.predict(features.data.view())?;
    Ok(LogScoreFrameMatrix {
        scores: out.mapv(|p| p.max(clip).ln()),
        speaker_id: features.speaker_id.clone(),
        file_id: features.file_id.clone(),
    })
}

/// Speaker with the largest summed log score over the first `first_m` frames.
///
/// Panics unless `1 <= first_m <= frames`.
pub fn predict<T: Scalar>(scores: &LogScoreFrameMatrix<T>, first_m: usize) -> usize {
    assert!(
        first_m >= 1 && first_m <= scores.frames(),
        "first_m = {first_m} outside 1..={}",
        scores.frames()
    );
    let sums = scores.scores.slice(ndarray::s![..first_m, ..]).sum_axis(Axis(0));
    argmax(sums.iter().copied())
}

/// Smallest `n` such that every prefix of at least `n` frames predicts
/// `true_k`; `None` when the full file is misclassified.
pub fn frames_needed<T: Scalar>(scores: &LogScoreFrameMatrix<T>, true_k: usize) -> Option<usize> {
    let mut sums = Array1::<T>::zeros(scores.classes());
    let mut last_wrong = 0;
    for (m, row) in scores.scores.rows().into_iter().enumerate() {
        sums += &row;
        if argmax(sums.iter().copied()) != true_k {
            last_wrong = m + 1;
        }
    }
    (last_wrong < scores.frames()).then_some(last_wrong + 1)
}

/// Signal duration covered by `n` consecutive stacked frames.
///
/// Fractional `n` is accepted so that mean frame counts can be converted.
pub fn duration_from_frames(n: f64, t_win: f64, t_hop: f64) -> Result<f64> {
    if !(n >= 1.0) {
        return Err(Error::arg(format!("frame count {n} must be at least 1")));
    }
    Ok((n - 1.0) * t_hop + t_win)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileResult {
    pub file_id: Option<String>,
    pub speaker_id: Option<String>,
    pub true_class: usize,
    pub predicted: usize,
    pub frames: usize,
    pub correct_frames: usize,
    pub frames_needed: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramesNeededSummary {
    pub min: usize,
    pub mean: f64,
    pub max: usize,
    pub min_s: f64,
    pub mean_s: f64,
    pub max_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassificationReport {
    pub frame_accuracy: f64,
    pub file_accuracy: f64,
    pub n_files: usize,
    pub n_frames: usize,
    /// Over files whose full-length prediction is correct; absent if none is.
    pub frames_needed: Option<FramesNeededSummary>,
    pub files: Vec<FileResult>,
}

fn score_file<T: Scalar>(model: &Model<T>, features: &FeatureMatrix<T>, class: usize) -> Result<FileResult> {
    if class >= model.n_outputs() {
        return Err(Error::arg(format!(
            "class {class} outside the model's {} outputs",
            model.n_outputs()
        )));
    }
    if features.frames() == 0 {
        return Err(Error::arg("feature file without frames"));
    }
    let scores = frame_scores(model, features)?;
    let correct_frames = scores
        .scores
        .rows()
        .into_iter()
        .filter(|r| argmax(r.iter().copied()) == class)
        .count();
    Ok(FileResult {
        file_id: features.file_id.clone(),
        speaker_id: features.speaker_id.clone(),
        true_class: class,
        predicted: predict(&scores, scores.frames()),
        frames: scores.frames(),
        correct_frames,
        frames_needed: frames_needed(&scores, class),
    })
}

/// Frame-level and file-level accuracy of `model` on labelled files.
///
/// `t_win`/`t_hop` describe one stacked frame and convert frame counts to seconds.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    dataset: &[(FeatureMatrix<T>, usize)],
    t_win: f64,
    t_hop: f64,
) -> Result<ClassificationReport> {
    if dataset.is_empty() {
        return Err(Error::arg("empty dataset"));
    }
    let files = dataset
        .par_iter()
        .map(|(f, class)| score_file(model, f, *class))
        .collect::<Result<Vec<_>>>()?;

    let n_frames: usize = files.iter().map(|f| f.frames).sum();
    let correct_frames: usize = files.iter().map(|f| f.correct_frames).sum();
    let correct_files = files.iter().filter(|f| f.predicted == f.true_class).count();
    let needed: Vec<usize> = files.iter().filter_map(|f| f.frames_needed).collect();
    debug_assert!(correct_files >= needed.len());

    let frames_needed = if needed.is_empty() {
        None
    } else {
        let min = *needed.iter().min().unwrap();
        let max = *needed.iter().max().unwrap();
        let mean = needed.iter().sum::<usize>() as f64 / needed.len() as f64;
        Some(FramesNeededSummary {
            min,
            mean,
            max,
            min_s: duration_from_frames(min as f64, t_win, t_hop)?,
            mean_s: duration_from_frames(mean, t_win, t_hop)?,
            max_s: duration_from_frames(max as f64, t_win, t_hop)?,
        })
    };
    Ok(ClassificationReport {
        frame_accuracy: 100.0 * correct_frames as f64 / n_frames as f64,
        file_accuracy: 100.0 * correct_files as f64 / files.len() as f64,
        n_files: files.len(),
        n_frames,
        frames_needed,
        files,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{forward, init_weights};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn matrix(scores: Array2<f64>) -> LogScoreFrameMatrix<f64> {
        LogScoreFrameMatrix {
            scores,
            speaker_id: None,
            file_id: None,
        }
    }

    fn random_scores(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_simple_fn((rows, cols), || -rng.random_range(0.0..5.0))
    }

    #[test]
    fn zero_model_scores_log_half() {
        let model = Model::<f64>::zeros(&[4, 3]).unwrap();
        let f = FeatureMatrix::new(Array2::ones((1, 4)), 0.1, 0.03);
        let s = frame_scores(&model, &f).unwrap();
        assert_eq!(s.scores.dim(), (1, 3));
        assert!(s.scores.iter().all(|&v| (v - 0.5f64.ln()).abs() < 1e-15));
    }

    #[test]
    fn scores_match_forward_log() {
        let model = init_weights::<f64>(&[5, 7, 4], 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = Array2::from_shape_simple_fn((11, 5), || rng.random_range(-1.0..1.0));
        let s = frame_scores(&model, &FeatureMatrix::new(x.clone(), 0.1, 0.03)).unwrap();
        let acts = forward(&model, x.view()).unwrap();
        let expected = acts.last().unwrap().mapv(f64::ln);
        for (a, b) in s.scores.iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn dims_mismatch_rejected() {
        let model = Model::<f64>::zeros(&[4, 3]).unwrap();
        let f = FeatureMatrix::new(Array2::ones((2, 5)), 0.1, 0.03);
        assert!(matches!(frame_scores(&model, &f), Err(Error::Argument(_))));
    }

    #[test]
    fn predict_single_row_and_ties() {
        let s = matrix(ndarray::array![[-2.0, -0.5, -1.0]]);
        assert_eq!(predict(&s, 1), 1);
        let tie = matrix(ndarray::array![[-1.0, -1.0, -3.0], [-2.0, -2.0, -0.1]]);
        assert_eq!(predict(&tie, 1), 0);
    }

    #[test]
    fn predict_matches_column_sums() {
        let raw = random_scores(20, 5, 4);
        let mut best = (0, f64::NEG_INFINITY);
        for k in 0..5 {
            let total: f64 = (0..20).map(|m| raw[[m, k]]).sum();
            if total > best.1 {
                best = (k, total);
            }
        }
        assert_eq!(predict(&matrix(raw), 20), best.0);
    }

    #[test]
    fn frames_needed_edges() {
        let always = matrix(ndarray::array![[-0.1, -3.0], [-0.2, -3.0], [-0.1, -2.0]]);
        assert_eq!(frames_needed(&always, 0), Some(1));
        let last_only = matrix(ndarray::array![[-3.0, -0.1], [-3.0, -0.1], [-0.1, -9.0]]);
        assert_eq!(frames_needed(&last_only, 0), Some(3));
        assert_eq!(frames_needed(&last_only, 1), None);
    }

    #[test]
    fn durations() {
        let d = |n| duration_from_frames(n, STACK_WIN_S, STACK_HOP_S).unwrap();
        assert!((d(1.0) - 0.100).abs() < 1e-12);
        assert!((d(2.0) - 0.13).abs() < 1e-12);
        assert!((d(6.0) - 0.25).abs() < 1e-12);
        assert!((d(37.0) - 1.18).abs() < 1e-12);
        assert!((d(13.55) - 0.4765).abs() < 1e-12);
        assert!(duration_from_frames(0.5, 0.1, 0.03).is_err());
        assert!(duration_from_frames(f64::NAN, 0.1, 0.03).is_err());
    }

    #[test]
    fn memorized_dataset_scores_perfectly() {
        // One-layer model whose output k fires only for the k-th unit vector.
        let mut model = Model::<f64>::zeros(&[3, 3]).unwrap();
        for k in 0..3 {
            model.weights[0][[k, 0]] = -5.0;
            model.weights[0][[k, k + 1]] = 10.0;
        }
        let dataset: Vec<_> = (0..3)
            .map(|k| {
                let mut x = Array2::zeros((4, 3));
                x.column_mut(k).fill(1.0);
                (FeatureMatrix::new(x, 0.1, 0.03), k)
            })
            .collect();
        let r = evaluate(&model, &dataset, 0.1, 0.03).unwrap();
        assert_eq!(r.frame_accuracy, 100.0);
        assert_eq!(r.file_accuracy, 100.0);
        let fnd = r.frames_needed.unwrap();
        assert_eq!((fnd.min, fnd.max), (1, 1));
        assert!(evaluate(&model, &[], 0.1, 0.03).is_err());
    }

    proptest! {
        #[test]
        fn frames_needed_matches_scan(seed in 0u64..500, rows in 1usize..25, k in 0usize..4) {
            let s = matrix(random_scores(rows, 4, seed));
            let brute = (1..=rows).find(|&n| (n..=rows).all(|m| predict(&s, m) == k));
            prop_assert_eq!(frames_needed(&s, k), brute);
        }

        #[test]
        fn row_shift_does_not_change_prediction(seed in 0u64..500, shift in -10.0f64..10.0, row in 0usize..8) {
            let raw = random_scores(8, 5, seed);
            let mut shifted = raw.clone();
            shifted.row_mut(row).mapv_inplace(|v| v + shift);
            prop_assert_eq!(predict(&matrix(raw), 8), predict(&matrix(shifted), 8));
        }
    }
}
