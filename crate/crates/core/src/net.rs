//! Dense ReLU network with hand-written backpropagation, the temperature
//! softmax and KL distillation loss, and an Adam optimizer.
//!
//! Weights are stored `fan_in × fan_out` so a batch forward is `X·W + b`.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::STATE_DIM;
use crate::error::{Error, Result};
use crate::mcs::NUM_MCS;
use crate::rng::{derive_seed, rng_from_seed, stream};

pub const INPUT_DIM: usize = STATE_DIM;
pub const OUTPUT_DIM: usize = NUM_MCS;

/// Default distillation temperature applied to the teacher's Q-values.
pub const DEFAULT_TAU: f64 = 0.01;

const MODEL_MAGIC: &[u8; 4] = b"LDNN";
const MODEL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weights: Array2::zeros((fan_in, fan_out)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn zeros_like(other: &Layer) -> Self {
        Self::zeros(other.weights.nrows(), other.weights.ncols())
    }
}

/// Parameter-shaped buffers: gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Layer>,
}

impl Gradients {
    pub fn zeros_like(net: &DenseNet) -> Self {
        Self {
            layers: net.layers.iter().map(Layer::zeros_like).collect(),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn scale(&mut self, k: f64) {
        for l in &mut self.layers {
            l.weights *= k;
            l.bias *= k;
        }
    }
}

fn flatten(layers: &[Layer]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend(l.weights.iter());
        out.extend(l.bias.iter());
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseNet {
    dims: Vec<usize>,
    layers: Vec<Layer>,
}

/// Inputs to every layer from a batch forward pass (post-activation), plus
/// the network output.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    inputs: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

/// Rejects layer widths that do not run from 16 inputs to 28 outputs.
pub fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.len() < 2 {
        return Err(Error::config(format!(
            "need at least input and output dims, got {dims:?}"
        )));
    }
    if dims[0] != INPUT_DIM || dims[dims.len() - 1] != OUTPUT_DIM {
        return Err(Error::config(format!(
            "dims must start at {INPUT_DIM} and end at {OUTPUT_DIM}, got {dims:?}"
        )));
    }
    if dims.contains(&0) {
        return Err(Error::config(format!("zero-width layer in {dims:?}")));
    }
    Ok(())
}

/// `[16, h, h, …, 28]` with `depth` hidden layers of `width` units.
pub fn mlp_dims(depth: usize, width: usize) -> Vec<usize> {
    let mut d = vec![INPUT_DIM];
    d.extend(std::iter::repeat_n(width, depth));
    d.push(OUTPUT_DIM);
    d
}

pub fn param_count_for(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| (w[0] + 1) * w[1]).sum()
}

impl DenseNet {
    /// He-normal weights (`N(0, 2/fan_in)`), zero biases.
    pub fn init(dims: &[usize], seed: u64) -> Result<Self> {
        check_dims(dims)?;
        let mut rng = rng_from_seed(derive_seed(seed, stream::INIT));
        let layers = dims
            .windows(2)
            .map(|w| {
                let normal = Normal::new(0.0, (2.0 / w[0] as f64).sqrt()).expect("positive std");
                Layer {
                    weights: Array2::from_shape_simple_fn((w[0], w[1]), || normal.sample(&mut rng)),
                    bias: Array1::zeros(w[1]),
                }
            })
            .collect();
        Ok(Self {
            dims: dims.to_vec(),
            layers,
        })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self> {
        check_dims(dims)?;
        Ok(Self {
            dims: dims.to_vec(),
            layers: dims.windows(2).map(|w| Layer::zeros(w[0], w[1])).collect(),
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        param_count_for(&self.dims)
    }

    pub fn params_flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::config(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut it = flat.iter().copied();
        for l in &mut self.layers {
            l.weights.iter_mut().for_each(|w| *w = it.next().unwrap());
            l.bias.iter_mut().for_each(|b| *b = it.next().unwrap());
        }
        Ok(())
    }

    /// Q-values for one state. Allocation-free apart from the output.
    pub fn forward(&self, x: &[f64]) -> [f64; OUTPUT_DIM] {
        debug_assert_eq!(x.len(), INPUT_DIM);
        let mut cur: Vec<f64> = x.to_vec();
        let mut next: Vec<f64> = Vec::new();
        let last = self.layers.len() - 1;
        for (li, layer) in self.layers.iter().enumerate() {
            next.clear();
            next.extend(layer.bias.iter());
            let w = layer.weights.as_slice().expect("weights are standard layout");
            let fan_out = next.len();
            for (i, xi) in cur.iter().enumerate() {
                if *xi == 0.0 {
                    continue;
                }
                let row = &w[i * fan_out..(i + 1) * fan_out];
                for (o, wij) in next.iter_mut().zip(row) {
                    *o += xi * wij;
                }
            }
            if li != last {
                next.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            std::mem::swap(&mut cur, &mut next);
        }
        let mut out = [0.0; OUTPUT_DIM];
        out.copy_from_slice(&cur);
        out
    }

    /// Q-values for a batch, one row per state.
    pub fn forward_batch(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let last = self.layers.len() - 1;
        let mut a = x.to_owned();
        for (li, layer) in self.layers.iter().enumerate() {
            let mut z = a.dot(&layer.weights);
            z += &layer.bias;
            if li != last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            a = z;
        }
        a
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>) -> ForwardCache {
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut a = x.to_owned();
        for (li, layer) in self.layers.iter().enumerate() {
            let mut z = a.dot(&layer.weights);
            z += &layer.bias;
            if li != last {
                z.mapv_inplace(|v| v.max(0.0));
            }
            inputs.push(a);
            a = z;
        }
        ForwardCache { inputs, output: a }
    }

    /// Backpropagates `grad_out` (∂loss/∂output, one row per sample) and
    /// returns the parameter gradient summed over the batch.
    pub fn backward(&self, cache: &ForwardCache, grad_out: ArrayView2<f64>) -> Gradients {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut dz = grad_out.to_owned();
        for li in (0..self.layers.len()).rev() {
            let input = &cache.inputs[li];
            let dw = input.t().dot(&dz);
            let db = dz.sum_axis(Axis(0));
            if li > 0 {
                let mut da = dz.dot(&self.layers[li].weights.t());
                // input > 0 exactly where the previous pre-activation was positive
                Zip::from(&mut da).and(input).for_each(|d, &a| {
                    if a <= 0.0 {
                        *d = 0.0;
                    }
                });
                dz = da;
            }
            grads.push(Layer { weights: dw, bias: db });
        }
        grads.reverse();
        Gradients { layers: grads }
    }

    /// Serialized model file:
    /// `b"LDNN"`, u32 version, u32 layer-dim count, u32 dims…, then f64
    /// parameters, layer by layer, weights row-major `[fan_in][fan_out]`
    /// followed by biases. Everything little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(12 + 4 * self.dims.len() + 8 * self.param_count());
        out.extend_from_slice(MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dims.len() as u32).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for p in self.params_flat() {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let magic = r.take(4)?;
        if magic != MODEL_MAGIC {
            return Err(r.error_at(0, "bad magic, not a model file"));
        }
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(r.error_at(4, format!("unsupported model version {version}")));
        }
        let n = r.u32()? as usize;
        if !(2..=1024).contains(&n) {
            return Err(r.error_at(8, format!("implausible layer-dim count {n}")));
        }
        let mut dims = Vec::with_capacity(n);
        for _ in 0..n {
            dims.push(r.u32()? as usize);
        }
        check_dims(&dims).map_err(|e| r.error_at(12, e.to_string()))?;
        let count = param_count_for(&dims);
        let expected = r.pos() + 8 * count;
        if bytes.len() != expected {
            return Err(r.error_at(
                r.pos() as u64,
                format!(
                    "dims header {dims:?} needs {count} parameters ({expected} bytes total), file has {} bytes",
                    bytes.len()
                ),
            ));
        }
        let mut flat = Vec::with_capacity(count);
        for _ in 0..count {
            flat.push(r.f64()?);
        }
        let mut net = DenseNet::zeros(&dims)?;
        net.set_params_flat(&flat)?;
        Ok(net)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// SHA-256 of the serialized model, hex encoded.
    pub fn fingerprint(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

pub(crate) fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Little-endian cursor that reports byte offsets on failure.
pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn pos(&self) -> usize {
        self.pos
    }

    pub(crate) fn error_at(&self, offset: u64, reason: impl Into<String>) -> Error {
        Error::Format {
            offset,
            reason: reason.into(),
        }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.error_at(
                self.pos as u64,
                format!("truncated: wanted {n} bytes, {} left", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::domain(format!("temperature must be finite and > 0, got {tau}")))
    }
}

/// `ln softmax(q/τ)`, max-subtracted.
pub fn log_softmax_temp(q: &[f64], tau: f64) -> Result<Vec<f64>> {
    check_tau(tau)?;
    Ok(log_softmax_unchecked(q, tau))
}

fn log_softmax_unchecked(q: &[f64], tau: f64) -> Vec<f64> {
    let max = q.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = q.iter().map(|v| (v - max) / tau).collect();
    let lse = scaled.iter().map(|v| v.exp()).sum::<f64>().ln();
    scaled.into_iter().map(|v| v - lse).collect()
}

pub fn softmax_temp(q: &[f64], tau: f64) -> Result<Vec<f64>> {
    Ok(log_softmax_temp(q, tau)?.into_iter().map(f64::exp).collect())
}

/// KL(softmax(qT/τ) ‖ softmax(qS)) and its gradient with respect to `qS`,
/// which is `softmax(qS) − softmax(qT/τ)`. The teacher side is a constant.
pub fn kl_loss(q_teacher: &[f64], q_student: &[f64], tau: f64) -> Result<(f64, Vec<f64>)> {
    check_tau(tau)?;
    if q_teacher.len() != q_student.len() {
        return Err(Error::domain(format!(
            "teacher/student widths differ: {} vs {}",
            q_teacher.len(),
            q_student.len()
        )));
    }
    let mut grad = vec![0.0; q_student.len()];
    let loss = kl_row(q_teacher, q_student, tau, &mut grad);
    Ok((loss, grad))
}

fn kl_row(q_teacher: &[f64], q_student: &[f64], tau: f64, grad: &mut [f64]) -> f64 {
    let lp = log_softmax_unchecked(q_teacher, tau);
    let ls = log_softmax_unchecked(q_student, 1.0);
    let mut loss = 0.0;
    for i in 0..lp.len() {
        let p = lp[i].exp();
        // p = 0 terms contribute nothing (0·ln 0 = 0)
        if p > 0.0 {
            loss += p * (lp[i] - ls[i]);
        }
        grad[i] = ls[i].exp() - p;
    }
    loss.max(0.0)
}

/// Row-wise [`kl_loss`] over a batch. Returns the summed loss and the
/// per-row gradients.
pub fn kl_loss_batch(q_teacher: ArrayView2<f64>, q_student: ArrayView2<f64>, tau: f64) -> Result<(f64, Array2<f64>)> {
    check_tau(tau)?;
    if q_teacher.dim() != q_student.dim() {
        return Err(Error::domain(format!(
            "teacher/student batch shapes differ: {:?} vs {:?}",
            q_teacher.dim(),
            q_student.dim()
        )));
    }
    let mut grad = Array2::zeros(q_student.dim());
    let mut total = 0.0;
    for ((t, s), mut g) in q_teacher
        .outer_iter()
        .zip(q_student.outer_iter())
        .zip(grad.outer_iter_mut())
    {
        let t = t.to_vec();
        let s = s.to_vec();
        total += kl_row(&t, &s, tau, g.as_slice_mut().expect("fresh array is contiguous"));
    }
    Ok((total, grad))
}

/// Adam moments and hyper-parameters.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Gradients,
    v: Gradients,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl OptimState {
    pub fn new(net: &DenseNet, cfg: AdamConfig) -> Self {
        Self {
            learning_rate: cfg.learning_rate,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            step: 0,
            m: Gradients::zeros_like(net),
            v: Gradients::zeros_like(net),
        }
    }

    pub fn apply(&mut self, net: &mut DenseNet, grads: &Gradients) {
        self.step += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        let lr = self.learning_rate;
        let eps = self.eps;
        let update = |p: &mut f64, g: &f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= lr * mh / (vh.sqrt() + eps);
        };
        for (((layer, g), m), v) in net
            .layers
            .iter_mut()
            .zip(&grads.layers)
            .zip(&mut self.m.layers)
            .zip(&mut self.v.layers)
        {
            Zip::from(&mut layer.weights)
                .and(&g.weights)
                .and(&mut m.weights)
                .and(&mut v.weights)
                .for_each(update);
            Zip::from(&mut layer.bias)
                .and(&g.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .for_each(update);
        }
    }
}

/// Mean loss and mean-reduced parameter gradient for one batch.
/// `loss_fn` maps the batch output to `(summed loss, ∂summed loss/∂output)`.
pub fn batch_gradients<F>(net: &DenseNet, inputs: ArrayView2<f64>, loss_fn: F) -> (f64, Gradients)
where
    F: FnOnce(&Array2<f64>) -> (f64, Array2<f64>),
{
    let n = inputs.nrows().max(1) as f64;
    let cache = net.forward_cached(inputs);
    let (sum_loss, mut grad_out) = loss_fn(&cache.output);
    grad_out /= n;
    (sum_loss / n, net.backward(&cache, grad_out.view()))
}

/// One optimizer step on one batch. Returns the batch's mean loss.
pub fn train_step<F>(net: &mut DenseNet, inputs: ArrayView2<f64>, loss_fn: F, optim: &mut OptimState) -> Result<f64>
where
    F: FnOnce(&Array2<f64>) -> (f64, Array2<f64>),
{
    let (loss, grads) = batch_gradients(net, inputs, loss_fn);
    if !loss.is_finite() {
        return Err(Error::Training {
            step: optim.step as usize,
            reason: format!(
                "non-finite loss {loss} on a batch of {} (max |param| {:.3e})",
                inputs.nrows(),
                net.params_flat().iter().fold(0.0f64, |a, p| a.max(p.abs()))
            ),
        });
    }
    optim.apply(net, &grads);
    Ok(loss)
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(q: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in q.iter().enumerate().skip(1) {
        if *v > q[best] {
            best = i;
        }
    }
    best
}

/// Stacks rows into a `rows × width` matrix.
pub fn stack_rows<'a, I>(rows: I, width: usize) -> Array2<f64>
where
    I: IntoIterator<Item = &'a [f64]>,
{
    let mut flat = Vec::new();
    let mut n = 0;
    for r in rows {
        debug_assert_eq!(r.len(), width);
        flat.extend_from_slice(r);
        n += 1;
    }
    Array2::from_shape_vec((n, width), flat).expect("row widths checked")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from_seed;
    use rand::Rng;

    fn random_input(rng: &mut crate::rng::Rng) -> Vec<f64> {
        (0..INPUT_DIM).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn param_counts() {
        assert_eq!(param_count_for(&[16, 32, 32, 28]), 2_524);
        assert_eq!(param_count_for(&mlp_dims(7, 128)), 104_860);
        assert_eq!(param_count_for(&mlp_dims(6, 128)), 88_348);
        assert_eq!(param_count_for(&mlp_dims(4, 64)), 15_388);
        assert_eq!(param_count_for(&mlp_dims(4, 32)), 4_636);
        assert_eq!(param_count_for(&mlp_dims(3, 32)), 3_580);
        let net = DenseNet::init(&[16, 32, 32, 28], 0).unwrap();
        assert_eq!(net.params_flat().len(), 2_524);
    }

    #[test]
    fn init_is_seeded_and_scaled() {
        let a = DenseNet::init(&mlp_dims(2, 64), 5).unwrap();
        let b = DenseNet::init(&mlp_dims(2, 64), 5).unwrap();
        let c = DenseNet::init(&mlp_dims(2, 64), 6).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        let w = &a.layers()[1].weights;
        let var = w.iter().map(|x| x * x).sum::<f64>() / w.len() as f64;
        assert!((var - 2.0 / 64.0).abs() < 0.2 * 2.0 / 64.0, "{var}");
        assert!(a.layers().iter().all(|l| l.bias.iter().all(|b| *b == 0.0)));
    }

    #[test]
    fn bad_dims_rejected() {
        assert!(DenseNet::init(&[15, 28], 0).is_err());
        assert!(DenseNet::init(&[16, 27], 0).is_err());
        assert!(DenseNet::init(&[16], 0).is_err());
        assert!(DenseNet::init(&[16, 0, 28], 0).is_err());
    }

    #[test]
    fn zero_net_outputs_zero() {
        let net = DenseNet::zeros(&mlp_dims(2, 8)).unwrap();
        assert_eq!(net.forward(&[0.3; 16]), [0.0; 28]);
    }

    #[test]
    fn doubling_output_weights_doubles_q_without_output_bias() {
        let mut net = DenseNet::init(&mlp_dims(2, 16), 1).unwrap();
        let x = [0.5; 16];
        let q1 = net.forward(&x);
        let last = net.layers_mut().last_mut().unwrap();
        last.weights *= 2.0;
        let q2 = net.forward(&x);
        for (a, b) in q1.iter().zip(&q2) {
            assert!((2.0 * a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn single_and_batch_forward_agree() {
        let net = DenseNet::init(&mlp_dims(3, 32), 2).unwrap();
        let mut rng = rng_from_seed(0);
        let rows: Vec<Vec<f64>> = (0..20).map(|_| random_input(&mut rng)).collect();
        let batch = stack_rows(rows.iter().map(|r| r.as_slice()), INPUT_DIM);
        let out = net.forward_batch(batch.view());
        for (i, r) in rows.iter().enumerate() {
            let q = net.forward(r);
            for j in 0..OUTPUT_DIM {
                assert!((q[j] - out[[i, j]]).abs() < 1e-12);
            }
            assert!(q.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_temp(&[0.0; 28], 0.3).unwrap();
        assert!(p.iter().all(|v| (v - 1.0 / 28.0).abs() < 1e-15));
        let q: Vec<f64> = (0..28).map(|i| (i as f64 * 0.37).sin()).collect();
        let shifted: Vec<f64> = q.iter().map(|v| v + 123.0).collect();
        let a = softmax_temp(&q, 0.5).unwrap();
        let b = softmax_temp(&shifted, 0.5).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        let entropy = |p: &[f64]| -p.iter().filter(|v| **v > 0.0).map(|v| v * v.ln()).sum::<f64>();
        let hs: Vec<f64> = [0.01, 0.1, 1.0, 10.0]
            .iter()
            .map(|t| entropy(&softmax_temp(&q, *t).unwrap()))
            .collect();
        assert!(hs.windows(2).all(|w| w[0] <= w[1]), "{hs:?}");
        assert!(matches!(softmax_temp(&q, 0.0), Err(Error::Domain(_))));
        assert!(matches!(softmax_temp(&q, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn kl_two_action_example() {
        let (loss, grad) = kl_loss(&[1.0, 0.0], &[0.0, 0.0], 1.0).unwrap();
        assert!((loss - 0.11094407167172735).abs() < 1e-12);
        assert!((grad[0] - (0.5 - 0.7310585786300049)).abs() < 1e-12);
        assert!((grad[0] + grad[1]).abs() < 1e-15);
    }

    #[test]
    fn kl_is_zero_at_matching_distribution() {
        let qt: Vec<f64> = (0..28).map(|i| (i as f64).cos()).collect();
        let tau = 0.25;
        // softmax(qS) = softmax(qT/τ) when qS = qT/τ
        let qs: Vec<f64> = qt.iter().map(|v| v / tau).collect();
        let (loss, grad) = kl_loss(&qt, &qs, tau).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(grad.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut net = DenseNet::init(&mlp_dims(2, 8), 3).unwrap();
        let before = net.clone();
        let mut opt = OptimState::new(&net, AdamConfig::with_lr(1e-3));
        let x = Array2::from_elem((4, 16), 0.2);
        train_step(&mut net, x.view(), |out| (0.0, Array2::zeros(out.dim())), &mut opt).unwrap();
        assert_eq!(net, before);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn non_finite_loss_is_a_training_error() {
        let mut net = DenseNet::init(&mlp_dims(1, 8), 3).unwrap();
        let mut opt = OptimState::new(&net, AdamConfig::with_lr(1e-3));
        let x = Array2::from_elem((2, 16), 0.2);
        let r = train_step(&mut net, x.view(), |o| (f64::NAN, Array2::zeros(o.dim())), &mut opt);
        assert!(matches!(r, Err(Error::Training { .. })));
    }

    #[test]
    fn one_step_reduces_single_sample_kl() {
        let mut net = DenseNet::init(&mlp_dims(2, 16), 4).unwrap();
        let mut rng = rng_from_seed(4);
        let x = random_input(&mut rng);
        let qt: Vec<f64> = (0..28).map(|_| rng.random_range(0.0..5.0)).collect();
        let batch = stack_rows([x.as_slice()], 16);
        let target = stack_rows([qt.as_slice()], 28);
        let loss_of = |net: &DenseNet| {
            let q = net.forward(&x);
            kl_loss(&qt, &q, 0.5).unwrap().0
        };
        let before = loss_of(&net);
        let mut opt = OptimState::new(&net, AdamConfig::with_lr(1e-3));
        train_step(
            &mut net,
            batch.view(),
            |out| kl_loss_batch(target.view(), out.view(), 0.5).unwrap(),
            &mut opt,
        )
        .unwrap();
        assert!(loss_of(&net) < before);
    }

    #[test]
    fn file_round_trip_and_layout() {
        let net = DenseNet::init(&mlp_dims(3, 32), 9).unwrap();
        let bytes = net.to_bytes();
        assert_eq!(bytes.len(), 12 + 4 * 5 + 8 * 3_580);
        let back = DenseNet::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        let mut rng = rng_from_seed(1);
        for _ in 0..100 {
            let x = random_input(&mut rng);
            assert_eq!(net.forward(&x), back.forward(&x));
        }
    }

    #[test]
    fn corrupt_files_report_offsets() {
        let net = DenseNet::init(&mlp_dims(1, 8), 9).unwrap();
        let bytes = net.to_bytes();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(
            DenseNet::from_bytes(&bad),
            Err(Error::Format { offset: 0, .. })
        ));
        // header claims a wider hidden layer than the payload holds
        let mut wrong_dims = bytes.clone();
        wrong_dims[16..20].copy_from_slice(&9u32.to_le_bytes());
        assert!(matches!(DenseNet::from_bytes(&wrong_dims), Err(Error::Format { .. })));
        let truncated = &bytes[..bytes.len() - 3];
        assert!(matches!(DenseNet::from_bytes(truncated), Err(Error::Format { .. })));
    }
}
