//! Full-batch training with a stepwise-decreasing L2 schedule, plus a small
//! structure grid search.

use log::{debug, info, warn};
use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::cg::{CgParams, ConjugateGradient, StopReason};
use super::{cost_grad, frame_accuracy, init_weights, LabeledBatch, Model};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Strictly decreasing, ending at 0.
    pub lambda_schedule: Vec<f64>,
    /// CG iterations between monitor evaluations.
    pub checkpoint_iters: usize,
    /// Minimum monitor accuracy gain (percentage points) that counts as progress.
    pub stop_delta: f64,
    /// Consecutive stalled checkpoints that end a stage.
    pub stop_patience: usize,
    pub max_total_iters: usize,
    pub seed: u64,
    pub cg: CgParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_schedule: vec![3.0, 1.0, 0.3, 0.1, 0.0],
            checkpoint_iters: 10,
            stop_delta: 0.1,
            stop_patience: 2,
            max_total_iters: 1000,
            seed: 1,
            cg: CgParams::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let s = &self.lambda_schedule;
        if s.is_empty() || *s.last().unwrap() != 0.0 {
            return Err(Error::arg("lambda schedule must end at 0"));
        }
        if s.windows(2).any(|w| w[1] >= w[0]) || s.iter().any(|&l| !(l >= 0.0)) {
            return Err(Error::arg(
                "lambda schedule must be strictly decreasing and non-negative",
            ));
        }
        if self.checkpoint_iters == 0 || self.stop_patience == 0 {
            return Err(Error::arg("checkpoint_iters and stop_patience must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    /// Cumulative CG iterations.
    pub iteration: usize,
    pub lambda: f64,
    pub cost: f64,
    /// Monitor-set frame accuracy in percent.
    pub monitor_accuracy: f64,
}

/// Trains a network of shape `sizes` on the whole `train` batch.
///
/// Each lambda in the schedule is a stage. Within a stage CG runs in blocks of
/// `checkpoint_iters` iterations and the monitor frame accuracy is measured
/// after every block; the stage ends when the gain stays below `stop_delta`
/// for `stop_patience` consecutive checkpoints, or when CG stops on its own.
/// Training ends after the last stage or at `max_total_iters`.
pub fn train<T: Scalar>(
    train: &LabeledBatch<T>,
    monitor: &LabeledBatch<T>,
    sizes: &[usize],
    cfg: &TrainConfig,
) -> Result<(Model<T>, Vec<HistoryRecord>)> {
    cfg.validate()?;
    if sizes.first() != Some(&train.x.ncols()) {
        return Err(Error::arg(format!(
            "input layer {:?} does not match feature dimension {}",
            sizes.first(),
            train.x.ncols()
        )));
    }
    if sizes.last() != Some(&train.n_classes) || monitor.n_classes != train.n_classes {
        return Err(Error::arg("output layer must equal the number of classes"));
    }
    if monitor.is_empty() {
        return Err(Error::arg("monitor set is empty"));
    }
    let mut present = vec![false; train.n_classes];
    train.labels.iter().for_each(|&l| present[l] = true);
    let n_present = present.iter().filter(|&&p| p).count();
    if n_present < 2 {
        return Err(Error::arg("training set contains a single class"));
    }
    if n_present < train.n_classes {
        warn!(
            "{} of {} classes have no training frames",
            train.n_classes - n_present,
            train.n_classes
        );
    }

    let mut model = init_weights::<T>(sizes, cfg.seed)?;
    model.meta.threads = rayon::current_num_threads();
    let mut history = Vec::new();
    let mut total = 0usize;
    let mut prev_acc = frame_accuracy(&model, monitor)?;
    let mut stop_reason = "schedule-complete".to_string();

    'stages: for &lambda in &cfg.lambda_schedule {
        if total >= cfg.max_total_iters {
            stop_reason = "max-iterations".into();
            break;
        }
        model.meta.lambda_trace.push((total, lambda));
        let lam = T::of(lambda);
        let mut shape = model.clone();
        let mut objective = |w: &Array1<T>| -> Result<(T, Array1<T>)> {
            shape.set_flat(w)?;
            let (j, grads) = cost_grad(&shape, train, lam)?;
            Ok((j, grads.iter().flat_map(|g| g.iter().copied()).collect()))
        };
        let mut cg = ConjugateGradient::new(cfg.cg.clone(), model.flatten(), &mut objective)?;
        let mut stalls = 0;
        loop {
            let block = cfg.checkpoint_iters.min(cfg.max_total_iters - total);
            if block == 0 {
                model.set_flat(cg.x())?;
                stop_reason = "max-iterations".into();
                break 'stages;
            }
            let outcome = cg.run(&mut objective, block)?;
            total += outcome.iterations;
            model.set_flat(cg.x())?;
            let acc = frame_accuracy(&model, monitor)?;
            history.push(HistoryRecord {
                iteration: total,
                lambda,
                cost: cg.cost().as_f64(),
                monitor_accuracy: acc,
            });
            debug!(
                "iter {total} lambda {lambda} cost {:.6} monitor {acc:.2}%",
                cg.cost().as_f64()
            );
            if acc - prev_acc < cfg.stop_delta {
                stalls += 1;
            } else {
                stalls = 0;
            }
            prev_acc = acc;
            if stalls >= cfg.stop_patience || outcome.reason != StopReason::MaxIterations {
                info!(
                    "lambda {lambda} stage done after {total} iterations ({}), monitor {acc:.2}%",
                    if stalls >= cfg.stop_patience {
                        "stalled"
                    } else {
                        outcome.reason.as_str()
                    }
                );
                break;
            }
        }
    }
    model.meta.iterations = total;
    model.meta.stop_reason = stop_reason;
    Ok((model, history))
}

/// One structure to try: hidden layer widths and its iteration budget.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCandidate {
    pub hidden: Vec<usize>,
    pub max_iters: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub sizes: Vec<usize>,
    pub monitor_accuracy: f64,
}

/// One and two hidden layers of 50, 100, 200 or 400 units.
pub fn standard_grid(max_iters: usize) -> Vec<GridCandidate> {
    let mut out = Vec::new();
    for layers in 1..=2 {
        for width in [50, 100, 200, 400] {
            out.push(GridCandidate {
                hidden: vec![width; layers],
                max_iters,
            });
        }
    }
    out
}

fn random_subset<T: Scalar>(batch: &LabeledBatch<T>, fraction: f64, rng: &mut ChaCha8Rng) -> Result<LabeledBatch<T>> {
    let mut idx: Vec<usize> = (0..batch.len()).collect();
    idx.shuffle(rng);
    let keep = ((batch.len() as f64 * fraction).ceil() as usize).clamp(1, batch.len());
    idx.truncate(keep);
    idx.sort_unstable();
    batch.select(&idx)
}

/// Trains each candidate briefly on a seeded random subset and ranks them by
/// monitor frame accuracy (stable: ties keep candidate order).
pub fn grid_search<T: Scalar>(
    train_set: &LabeledBatch<T>,
    monitor: &LabeledBatch<T>,
    candidates: &[GridCandidate],
    subset_fraction: f64,
    base: &TrainConfig,
) -> Result<Vec<GridResult>> {
    if train_set.is_empty() || monitor.is_empty() {
        return Err(Error::arg("grid search needs non-empty subsets"));
    }
    if !(subset_fraction > 0.0 && subset_fraction <= 1.0) {
        return Err(Error::arg("subset fraction must lie in (0, 1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(base.seed);
    let train_sub = random_subset(train_set, subset_fraction, &mut rng)?;
    let monitor_sub = random_subset(monitor, subset_fraction, &mut rng)?;

    let mut results = Vec::with_capacity(candidates.len());
    for c in candidates {
        let mut sizes = vec![train_set.x.ncols()];
        sizes.extend(&c.hidden);
        sizes.push(train_set.n_classes);
        let cfg = TrainConfig {
            max_total_iters: c.max_iters,
            ..base.clone()
        };
        let (model, _) = train(&train_sub, &monitor_sub, &sizes, &cfg)?;
        let acc = frame_accuracy(&model, &monitor_sub)?;
        info!("grid {}: {acc:.2}%", super::format_sizes(&sizes));
        results.push(GridResult {
            sizes,
            monitor_accuracy: acc,
        });
    }
    results.sort_by(|a, b| b.monitor_accuracy.total_cmp(&a.monitor_accuracy));
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::Rng;

    /// Gaussian-ish blobs around well separated class centres.
    fn blobs(n_classes: usize, per_class: usize, dims: usize, seed: u64) -> LabeledBatch<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centres = Array2::from_shape_simple_fn((n_classes, dims), || rng.random_range(-2.0..2.0));
        let mut x = Array2::zeros((n_classes * per_class, dims));
        let mut labels = Vec::new();
        for i in 0..n_classes * per_class {
            let c = i % n_classes;
            for d in 0..dims {
                x[[i, d]] = centres[[c, d]] + rng.random_range(-0.8..0.8);
            }
            labels.push(c);
        }
        LabeledBatch::new(x, labels, n_classes).unwrap()
    }

    #[test]
    fn schedule_validation() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.lambda_schedule = vec![3.0, 1.0];
        assert!(cfg.validate().is_err());
        cfg.lambda_schedule = vec![1.0, 3.0, 0.0];
        assert!(cfg.validate().is_err());
        cfg.lambda_schedule = vec![0.0];
        assert!(cfg.validate().is_ok());
    }

    #[test]
    fn zero_budget_returns_initial_model() {
        let data = blobs(3, 10, 4, 1);
        let cfg = TrainConfig {
            max_total_iters: 0,
            ..Default::default()
        };
        let (model, history) = train(&data, &data, &[4, 5, 3], &cfg).unwrap();
        assert!(history.is_empty());
        assert_eq!(
            model.weights,
            init_weights::<f64>(&[4, 5, 3], cfg.seed).unwrap().weights
        );
    }

    #[test]
    fn single_class_is_rejected() {
        let x = Array2::<f64>::zeros((4, 2));
        let data = LabeledBatch::new(x, vec![1; 4], 3).unwrap();
        assert!(train(&data, &data, &[2, 3, 3], &TrainConfig::default()).is_err());
    }

    #[test]
    fn learns_separable_blobs_and_is_reproducible() {
        let train_set = blobs(5, 40, 6, 2);
        let monitor = blobs(5, 10, 6, 2);
        let cfg = TrainConfig::default();
        let (model, history) = train(&train_set, &monitor, &[6, 8, 5], &cfg).unwrap();
        assert!(!history.is_empty());
        assert!(history.last().unwrap().monitor_accuracy > 80.0);
        assert_eq!(model.meta.lambda_trace.first().unwrap().1, 3.0);
        assert!(history.iter().all(|h| h.iteration <= cfg.max_total_iters));
        let (again, history2) = train(&train_set, &monitor, &[6, 8, 5], &cfg).unwrap();
        assert_eq!(model, again);
        assert_eq!(history, history2);
    }

    #[test]
    fn grid_single_and_untrained_candidates() {
        let train_set = blobs(4, 60, 5, 3);
        let monitor = blobs(4, 60, 5, 4);
        let base = TrainConfig::default();
        let one = grid_search(
            &train_set,
            &monitor,
            &[GridCandidate {
                hidden: vec![6],
                max_iters: 20,
            }],
            0.5,
            &base,
        )
        .unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one[0].sizes, vec![5, 6, 4]);

        let cands = [
            GridCandidate {
                hidden: vec![6],
                max_iters: 0,
            },
            GridCandidate {
                hidden: vec![6],
                max_iters: 60,
            },
        ];
        let ranked = grid_search(&train_set, &monitor, &cands, 0.5, &base).unwrap();
        assert!(ranked[0].monitor_accuracy > ranked[1].monitor_accuracy);
        assert_eq!(standard_grid(10).len(), 8);
    }
}
