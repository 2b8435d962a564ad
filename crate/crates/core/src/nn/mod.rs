//! Sigmoid feed-forward network with a K-way binary cross-entropy cost.
//!
//! Layer `l` maps `s_l` inputs to `s_{l+1}` outputs through a weight matrix of
//! shape `s_{l+1} × (s_l + 1)` whose first column holds the biases. The cost
//! sums one logistic loss per output unit (no softmax) and adds an L2 penalty
//! on every non-bias weight.

mod cg;
mod train;

pub use cg::{cg_minimize, CgOutcome, CgParams, ConjugateGradient, StopReason};
pub use train::{grid_search, standard_grid, train, GridCandidate, GridResult, HistoryRecord, TrainConfig};

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Rows per parallel work unit. Fixed so that reductions are summed in the
/// same order whatever the thread count.
const CHUNK_ROWS: usize = 256;

/// Half-width of the uniform weight initialization interval.
pub const INIT_RANGE: f64 = 0.1;

/// Probability clip applied inside the logarithms of the cost.
pub const PROB_CLIP: f64 = 1e-12;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    /// `(iteration at which the stage started, lambda)` for each stage entered.
    pub lambda_trace: Vec<(usize, f64)>,
    pub iterations: usize,
    pub stop_reason: String,
    pub threads: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub layer_sizes: Vec<usize>,
    pub weights: Vec<Array2<T>>,
    pub meta: TrainingMeta,
}

fn validate_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 {
        return Err(Error::arg("a network needs at least an input and an output layer"));
    }
    if sizes.contains(&0) {
        return Err(Error::arg("layer sizes must be positive"));
    }
    Ok(())
}

/// Parses `390:200:200` style layer specifications.
pub fn parse_sizes(spec: &str) -> Result<Vec<usize>> {
    let sizes = spec
        .split(':')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::arg(format!("bad layer size `{p}` in `{spec}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    validate_sizes(&sizes)?;
    Ok(sizes)
}

pub fn format_sizes(sizes: &[usize]) -> String {
    sizes.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(":")
}

/// Draws every weight i.i.d. from U(-0.1, 0.1) with a seeded generator.
pub fn init_weights<T: Scalar>(layer_sizes: &[usize], seed: u64) -> Result<Model<T>> {
    validate_sizes(layer_sizes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = layer_sizes
        .windows(2)
        .map(|w| {
            Array2::from_shape_simple_fn((w[1], w[0] + 1), || loop {
                let v: f64 = rng.random_range(-INIT_RANGE..INIT_RANGE);
                if v != -INIT_RANGE {
                    break T::of(v);
                }
            })
        })
        .collect();
    Ok(Model {
        layer_sizes: layer_sizes.to_vec(),
        weights,
        meta: TrainingMeta {
            seed,
            ..Default::default()
        },
    })
}

#[inline]
fn sigmoid<T: Scalar>(z: T) -> T {
    T::one() / (T::one() + (-z).exp())
}

/// `g(W[:, 1..] · a + W[:, 0])` for every row of `a`.
fn layer_forward<T: Scalar>(a: ArrayView2<T>, w: &Array2<T>) -> Array2<T> {
    let mut z = a.dot(&w.slice(s![.., 1..]).t());
    z += &w.column(0).insert_axis(Axis(0));
    z.mapv_inplace(sigmoid);
    z
}

impl<T: Scalar> Model<T> {
    pub fn n_inputs(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn n_outputs(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum()
    }

    pub fn zeros(layer_sizes: &[usize]) -> Result<Self> {
        validate_sizes(layer_sizes)?;
        Ok(Model {
            layer_sizes: layer_sizes.to_vec(),
            weights: layer_sizes
                .windows(2)
                .map(|w| Array2::zeros((w[1], w[0] + 1)))
                .collect(),
            meta: TrainingMeta::default(),
        })
    }

    /// Weights concatenated layer by layer, row-major.
    pub fn flatten(&self) -> Array1<T> {
        self.weights.iter().flat_map(|w| w.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &Array1<T>) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::arg(format!(
                "{} parameters given, model has {}",
                flat.len(),
                self.n_params()
            )));
        }
        let mut offset = 0;
        for w in &mut self.weights {
            let n = w.len();
            for (dst, &src) in w.iter_mut().zip(flat.slice(s![offset..offset + n])) {
                *dst = src;
            }
            offset += n;
        }
        Ok(())
    }

    fn check_finite(&self) -> Result<()> {
        if self.weights.iter().any(|w| w.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric("model has non-finite weights".into()));
        }
        Ok(())
    }

    fn check_input(&self, x: &ArrayView2<T>) -> Result<()> {
        if x.ncols() != self.n_inputs() {
            return Err(Error::arg(format!(
                "input has {} columns, network expects {}",
                x.ncols(),
                self.n_inputs()
            )));
        }
        Ok(())
    }

    /// Final-layer activations only.
    pub fn predict(&self, x: ArrayView2<T>) -> Result<Array2<T>> {
        self.check_input(&x)?;
        if x.nrows() <= CHUNK_ROWS {
            return Ok(self
                .weights
                .iter()
                .fold(x.to_owned(), |a, w| layer_forward(a.view(), w)));
        }
        let parts: Vec<Array2<T>> = x
            .axis_chunks_iter(Axis(0), CHUNK_ROWS)
            .into_par_iter()
            .map(|chunk| {
                self.weights
                    .iter()
                    .fold(chunk.to_owned(), |a, w| layer_forward(a.view(), w))
            })
            .collect();
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        Ok(ndarray::concatenate(Axis(0), &views).expect("chunks share column count"))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&self.to_bytes()?).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Parse(msg) => Error::Parse(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// `NNSM` layout: magic, version u32, layer count u32, sizes u32 each,
    /// weights as f64 row-major, then a u32-length-prefixed UTF-8 metadata blob.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(16 + 8 * self.n_params());
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.layer_sizes.len() as u32).to_le_bytes());
        for &s in &self.layer_sizes {
            let s = u32::try_from(s).map_err(|_| Error::arg("layer too large"))?;
            out.extend_from_slice(&s.to_le_bytes());
        }
        for w in &self.weights {
            for &v in w.iter() {
                out.extend_from_slice(&v.as_f64().to_le_bytes());
            }
        }
        let meta = serde_json::to_string(&self.meta).map_err(|e| Error::Parse(e.to_string()))?;
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(meta.as_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader { bytes, pos: 0 };
        if r.take(4)? != MODEL_MAGIC {
            return Err(Error::Parse("bad model magic".into()));
        }
        if r.u32()? != MODEL_VERSION {
            return Err(Error::Parse("unsupported model version".into()));
        }
        let n_layers = r.u32()? as usize;
        if n_layers > 1024 {
            return Err(Error::Parse("implausible layer count".into()));
        }
        let sizes = (0..n_layers)
            .map(|_| r.u32().map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let mut model = Model::zeros(&sizes).map_err(|e| Error::Parse(e.to_string()))?;
        for w in &mut model.weights {
            for v in w.iter_mut() {
                *v = T::of(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
            }
        }
        let meta_len = r.u32()? as usize;
        let meta = std::str::from_utf8(r.take(meta_len)?).map_err(|_| Error::Parse("metadata is not UTF-8".into()))?;
        model.meta = serde_json::from_str(meta).map_err(|e| Error::Parse(e.to_string()))?;
        if r.pos != bytes.len() {
            return Err(Error::Parse("trailing bytes after model".into()));
        }
        Ok(model)
    }
}

pub const MODEL_MAGIC: &[u8; 4] = b"NNSM";
pub const MODEL_VERSION: u32 = 1;

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Parse("truncated model file".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Inputs and 0-based class labels for full-batch training.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledBatch<T> {
    pub x: Array2<T>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl<T: Scalar> LabeledBatch<T> {
    pub fn new(x: Array2<T>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if x.nrows() != labels.len() {
            return Err(Error::arg(format!("{} rows but {} labels", x.nrows(), labels.len())));
        }
        if x.nrows() == 0 {
            return Err(Error::arg("empty batch"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::arg(format!("label {bad} outside 0..{n_classes}")));
        }
        Ok(Self { x, labels, n_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn one_hot(&self) -> Array2<T> {
        let mut y = Array2::zeros((self.len(), self.n_classes));
        for (i, &l) in self.labels.iter().enumerate() {
            y[[i, l]] = T::one();
        }
        y
    }

    /// Rows at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let x = self.x.select(Axis(0), indices);
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self::new(x, labels, self.n_classes)
    }
}

/// Activations of every layer, input first.
pub fn forward<T: Scalar>(model: &Model<T>, x: ArrayView2<T>) -> Result<Vec<Array2<T>>> {
    model.check_input(&x)?;
    let mut acts = vec![x.to_owned()];
    for w in &model.weights {
        let next = layer_forward(acts.last().unwrap().view(), w);
        acts.push(next);
    }
    Ok(acts)
}

/// Percentage of rows whose largest output is the labelled class.
pub fn frame_accuracy<T: Scalar>(model: &Model<T>, batch: &LabeledBatch<T>) -> Result<f64> {
    let out = model.predict(batch.x.view())?;
    let correct = out
        .rows()
        .into_iter()
        .zip(&batch.labels)
        .filter(|(row, &l)| argmax(row.iter().copied()) == l)
        .count();
    Ok(100.0 * correct as f64 / batch.len() as f64)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<T: PartialOrd>(values: impl IntoIterator<Item = T>) -> usize {
    let mut best: Option<(usize, T)> = None;
    for (i, v) in values.into_iter().enumerate() {
        match &best {
            Some((_, b)) if !(v > *b) => {}
            _ => best = Some((i, v)),
        }
    }
    best.map(|(i, _)| i).unwrap_or(0)
}

struct ChunkGrad<T> {
    cost: T,
    grads: Vec<Array2<T>>,
}

fn chunk_cost_grad<T: Scalar>(model: &Model<T>, x: ArrayView2<T>, labels: &[usize]) -> ChunkGrad<T> {
    let acts = forward(model, x).expect("shape checked by caller");
    let out = acts.last().unwrap();
    let lo = T::of(PROB_CLIP).max(T::epsilon());
    let hi = T::one() - lo;

    let mut cost = T::zero();
    let mut delta = out.clone();
    for (i, (row, &label)) in out.rows().into_iter().zip(labels).enumerate() {
        for (k, &h) in row.iter().enumerate() {
            let h = h.max(lo).min(hi);
            if k == label {
                cost -= h.ln();
                delta[[i, k]] -= T::one();
            } else {
                cost -= (T::one() - h).ln();
            }
        }
    }

    let n_layers = model.weights.len();
    let mut grads: Vec<Array2<T>> = Vec::with_capacity(n_layers);
    for l in (0..n_layers).rev() {
        let a = &acts[l];
        let mut g = Array2::zeros(model.weights[l].dim());
        g.column_mut(0).assign(&delta.sum_axis(Axis(0)));
        g.slice_mut(s![.., 1..]).assign(&delta.t().dot(a));
        grads.push(g);
        if l > 0 {
            let back = delta.dot(&model.weights[l].slice(s![.., 1..]));
            delta = back * &a.mapv(|v| v * (T::one() - v));
        }
    }
    grads.reverse();
    ChunkGrad { cost, grads }
}

/// Regularized cost and its gradient with respect to every weight.
///
/// `J = -(1/M) Σ_m Σ_k [y log h + (1-y) log(1-h)] + λ/(2M) Σ θ²` over
/// non-bias weights, with `h` clipped to `[1e-12, 1-1e-12]` inside the logs.
pub fn cost_grad<T: Scalar>(model: &Model<T>, batch: &LabeledBatch<T>, lambda: T) -> Result<(T, Vec<Array2<T>>)> {
    model.check_finite()?;
    model.check_input(&batch.x.view())?;
    if batch.n_classes != model.n_outputs() {
        return Err(Error::arg(format!(
            "batch has {} classes, network has {} outputs",
            batch.n_classes,
            model.n_outputs()
        )));
    }
    let m = T::of_usize(batch.len());
    let parts: Vec<ChunkGrad<T>> = batch
        .x
        .axis_chunks_iter(Axis(0), CHUNK_ROWS)
        .into_par_iter()
        .zip(batch.labels.par_chunks(CHUNK_ROWS))
        .map(|(x, labels)| chunk_cost_grad(model, x, labels))
        .collect();

    let mut parts = parts.into_iter();
    let first = parts.next().expect("batch is non-empty");
    let (mut cost, mut grads) = (first.cost, first.grads);
    for p in parts {
        cost += p.cost;
        for (g, pg) in grads.iter_mut().zip(&p.grads) {
            *g += pg;
        }
    }

    let mut penalty = T::zero();
    for (g, w) in grads.iter_mut().zip(&model.weights) {
        *g /= m;
        let body = w.slice(s![.., 1..]);
        penalty += body.iter().map(|&v| v * v).sum::<T>();
        g.slice_mut(s![.., 1..]).scaled_add(lambda / m, &body);
    }
    let cost = cost / m + lambda / (T::of(2.0) * m) * penalty;
    Ok((cost, grads))
}

/// Analytic vs central-difference gradients on random data.
#[derive(Debug, Clone)]
pub struct GradientCheck {
    pub max_relative_error: f64,
    /// Same maximum restricted to bias entries.
    pub bias_max_relative_error: f64,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    pub is_bias: Vec<bool>,
}

pub const GRADCHECK_STEP: f64 = 1e-6;

/// Compares back-propagated gradients with central differences (step 1e-6).
///
/// Weights are drawn from U(-1, 1) and inputs from U(-1, 1) so that the check
/// exercises non-trivial activations. The error per entry is
/// `|g_a - g_n| / max(|g_a| + |g_n|, 1e-12)`.
pub fn gradient_check(sizes: &[usize], n_samples: usize, lambda: f64, seed: u64) -> Result<GradientCheck> {
    validate_sizes(sizes)?;
    if n_samples == 0 {
        return Err(Error::arg("gradient check needs at least one sample"));
    }
    let mut model = Model::<f64>::zeros(sizes)?;
    if model.n_params() > 10_000 {
        return Err(Error::arg("gradient check is meant for small networks"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for w in &mut model.weights {
        w.mapv_inplace(|_| rng.random_range(-1.0..1.0));
    }
    let k = *sizes.last().unwrap();
    let x = Array2::from_shape_simple_fn((n_samples, sizes[0]), || rng.random_range(-1.0..1.0));
    let labels = (0..n_samples).map(|_| rng.random_range(0..k)).collect();
    let batch = LabeledBatch::new(x, labels, k)?;

    let (_, grads) = cost_grad(&model, &batch, lambda)?;
    let analytic: Vec<f64> = grads.iter().flat_map(|g| g.iter().copied()).collect();
    let is_bias: Vec<bool> = model
        .weights
        .iter()
        .flat_map(|w| (0..w.len()).map(move |i| i % w.ncols() == 0))
        .collect();

    let theta = model.flatten();
    let mut numeric = Vec::with_capacity(theta.len());
    for i in 0..theta.len() {
        let mut plus = theta.clone();
        plus[i] += GRADCHECK_STEP;
        let mut minus = theta.clone();
        minus[i] -= GRADCHECK_STEP;
        model.set_flat(&plus)?;
        let (jp, _) = cost_grad(&model, &batch, lambda)?;
        model.set_flat(&minus)?;
        let (jm, _) = cost_grad(&model, &batch, lambda)?;
        numeric.push((jp - jm) / (2.0 * GRADCHECK_STEP));
    }

    let rel = |a: f64, n: f64| (a - n).abs() / (a.abs() + n.abs()).max(1e-12);
    let errors: Vec<f64> = analytic.iter().zip(&numeric).map(|(&a, &n)| rel(a, n)).collect();
    let max_of = |f: &dyn Fn(usize) -> bool| {
        errors
            .iter()
            .enumerate()
            .filter(|(i, _)| f(*i))
            .fold(0.0f64, |m, (_, &e)| m.max(e))
    };
    Ok(GradientCheck {
        max_relative_error: max_of(&|_| true),
        bias_max_relative_error: max_of(&|i| is_bias[i]),
        analytic,
        numeric,
        is_bias,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn init_shapes_range_and_determinism() {
        let m = init_weights::<f64>(&[390, 200, 200], 1).unwrap();
        assert_eq!(m.weights[0].dim(), (200, 391));
        assert_eq!(m.weights[1].dim(), (200, 201));
        assert!(m.weights.iter().all(|w| w.iter().all(|v| v.abs() < 0.1)));
        assert_eq!(m, init_weights::<f64>(&[390, 200, 200], 1).unwrap());
        assert_ne!(m, init_weights::<f64>(&[390, 200, 200], 2).unwrap());
        assert!(init_weights::<f64>(&[5], 0).is_err());
    }

    #[test]
    fn zero_weights_give_one_half() {
        let m = Model::<f64>::zeros(&[3, 4, 2]).unwrap();
        let out = m.predict(array![[1.0, -2.0, 3.0], [0.0, 0.0, 0.0]].view()).unwrap();
        assert!(out.iter().all(|&v| v == 0.5));
        let mut single = Model::<f64>::zeros(&[1, 1]).unwrap();
        single.weights[0] = array![[0.0, 1.0]];
        assert_eq!(single.predict(array![[0.0]].view()).unwrap()[[0, 0]], 0.5);
        assert!(m.predict(array![[1.0, 2.0]].view()).is_err());
    }

    #[test]
    fn forward_matches_hand_unrolled() {
        let mut m = Model::<f64>::zeros(&[2, 2, 1]).unwrap();
        m.weights[0] = array![[0.1, -0.3, 0.5], [-0.2, 0.7, 0.4]];
        m.weights[1] = array![[0.05, 1.5, -2.0]];
        let (x0, x1) = (0.9, -1.1);
        let g = |z: f64| 1.0 / (1.0 + (-z).exp());
        let h0 = g(0.1 - 0.3 * x0 + 0.5 * x1);
        let h1 = g(-0.2 + 0.7 * x0 + 0.4 * x1);
        let out = g(0.05 + 1.5 * h0 - 2.0 * h1);
        let acts = forward(&m, array![[x0, x1]].view()).unwrap();
        assert!((acts[1][[0, 0]] - h0).abs() < 1e-12 && (acts[1][[0, 1]] - h1).abs() < 1e-12);
        assert!((acts[2][[0, 0]] - out).abs() < 1e-12);
    }

    #[test]
    fn cost_of_one_half_output_is_ln2() {
        let m = Model::<f64>::zeros(&[2, 1]).unwrap();
        let batch = LabeledBatch::new(array![[0.3, 0.4]], vec![0], 1).unwrap();
        let (j, _) = cost_grad(&m, &batch, 0.0).unwrap();
        assert!((j - std::f64::consts::LN_2).abs() < 1e-15);
        let (j5, _) = cost_grad(&m, &batch, 5.0).unwrap();
        assert_eq!(j5, j);
    }

    #[test]
    fn non_finite_weights_are_rejected() {
        let mut m = Model::<f64>::zeros(&[2, 1]).unwrap();
        m.weights[0][[0, 1]] = f64::NAN;
        let batch = LabeledBatch::new(array![[0.3, 0.4]], vec![0], 1).unwrap();
        assert!(matches!(cost_grad(&m, &batch, 0.0), Err(Error::Numeric(_))));
    }

    #[test]
    fn gradients_match_finite_differences() {
        for lambda in [0.0, 2.5] {
            let check = gradient_check(&[9, 5, 4], 7, lambda, 42).unwrap();
            assert!(
                check.max_relative_error < 1e-6,
                "lambda {lambda}: {}",
                check.max_relative_error
            );
        }
    }

    #[test]
    fn bias_gradient_ignores_lambda() {
        let a = gradient_check(&[9, 5, 4], 7, 0.0, 3).unwrap();
        let b = gradient_check(&[9, 5, 4], 7, 10.0, 3).unwrap();
        for i in (0..a.analytic.len()).filter(|&i| a.is_bias[i]) {
            assert_eq!(a.analytic[i], b.analytic[i]);
        }
        assert!(b.max_relative_error < 1e-6);
    }

    #[test]
    fn chunked_gradient_matches_single_pass() {
        let m = init_weights::<f64>(&[6, 5, 3], 8).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let n = 3 * CHUNK_ROWS + 17;
        let x = Array2::from_shape_simple_fn((n, 6), || rng.random_range(-2.0..2.0));
        let labels = (0..n).map(|i| i % 3).collect::<Vec<_>>();
        let batch = LabeledBatch::new(x.clone(), labels.clone(), 3).unwrap();
        let (j, g) = cost_grad(&m, &batch, 0.7).unwrap();
        let single = chunk_cost_grad(&m, x.view(), &labels);
        let nf = n as f64;
        assert!(
            (single.cost / nf
                - (j - 0.7 / (2.0 * nf)
                    * m.weights
                        .iter()
                        .map(|w| w.slice(s![.., 1..]).mapv(|v| v * v).sum())
                        .sum::<f64>()))
            .abs()
                < 1e-10
        );
        for (l, (gc, gs)) in g.iter().zip(&single.grads).enumerate() {
            let mut expected = gs / nf;
            expected
                .slice_mut(s![.., 1..])
                .scaled_add(0.7 / nf, &m.weights[l].slice(s![.., 1..]));
            assert!(gc.iter().zip(expected.iter()).all(|(a, b)| (a - b).abs() < 1e-12));
        }
    }

    #[test]
    fn cost_grad_is_bitwise_independent_of_thread_count() {
        let m = init_weights::<f64>(&[6, 5, 3], 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 5 * CHUNK_ROWS + 3;
        let x = Array2::from_shape_simple_fn((n, 6), || rng.random_range(-2.0..2.0));
        let batch = LabeledBatch::new(x, (0..n).map(|i| i % 3).collect(), 3).unwrap();
        let on = |threads: usize| {
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap()
                .install(|| cost_grad(&m, &batch, 0.3).unwrap())
        };
        let (j1, g1) = on(1);
        let (j4, g4) = on(4);
        assert_eq!(j1.to_bits(), j4.to_bits());
        assert_eq!(g1, g4);
    }

    #[test]
    fn model_bytes_round_trip() {
        let mut m = init_weights::<f64>(&[4, 3, 2], 5).unwrap();
        m.meta.stop_reason = "test".into();
        m.meta.lambda_trace = vec![(0, 3.0), (10, 1.0)];
        let bytes = m.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"NNSM");
        assert_eq!(Model::<f64>::from_bytes(&bytes).unwrap(), m);
        assert!(Model::<f64>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let f32_model = Model::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(f32_model.layer_sizes, vec![4, 3, 2]);
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax([1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax([-1.0]), 0);
    }

    #[test]
    fn sizes_parse() {
        assert_eq!(parse_sizes("390:200:200").unwrap(), vec![390, 200, 200]);
        assert!(parse_sizes("390").is_err());
        assert!(parse_sizes("390:x").is_err());
        assert_eq!(format_sizes(&[9, 5, 4]), "9:5:4");
    }

    proptest! {
        #[test]
        fn cost_is_nonnegative_and_monotone_in_lambda(seed in 0u64..500, l1 in 0.0f64..5.0, dl in 0.0f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut m = Model::<f64>::zeros(&[3, 4, 2]).unwrap();
            for w in &mut m.weights {
                w.mapv_inplace(|_| rng.random_range(-3.0..3.0));
            }
            let x = Array2::from_shape_simple_fn((5, 3), || rng.random_range(-1.0..1.0));
            let batch = LabeledBatch::new(x, vec![0, 1, 1, 0, 1], 2).unwrap();
            let (ja, _) = cost_grad(&m, &batch, l1).unwrap();
            let (jb, _) = cost_grad(&m, &batch, l1 + dl).unwrap();
            prop_assert!(ja >= 0.0 && ja.is_finite());
            prop_assert!(jb >= ja);
            let out = m.predict(batch.x.view()).unwrap();
            prop_assert!(out.iter().all(|&v| v > 0.0 && v < 1.0));
        }

        #[test]
        fn penalty_zero_iff_nonbias_zero(bias in -2.0f64..2.0, lambda in 0.1f64..5.0) {
            let mut m = Model::<f64>::zeros(&[2, 2]).unwrap();
            m.weights[0].column_mut(0).fill(bias);
            let batch = LabeledBatch::new(array![[0.5, -0.5]], vec![1], 2).unwrap();
            let (j0, _) = cost_grad(&m, &batch, 0.0).unwrap();
            let (jl, _) = cost_grad(&m, &batch, lambda).unwrap();
            prop_assert_eq!(j0, jl);
            m.weights[0][[0, 1]] = 0.1;
            let (j0, _) = cost_grad(&m, &batch, 0.0).unwrap();
            let (jl, _) = cost_grad(&m, &batch, lambda).unwrap();
            prop_assert!(jl > j0);
        }
    }
}
