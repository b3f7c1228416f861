//! Parameter storage, initialization, clipped SGD and a finite-difference
//! gradient checker shared by every trainable component.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(x.len(), out.len());
    for (o, v) in out.iter_mut().zip(x) {
        *o += alpha * v;
    }
}

/// Numerically stable softmax. Empty input gives an empty output.
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = out.iter().sum();
    for v in &mut out {
        *v /= z;
    }
    out
}

/// `log softmax(x)`, computed with the log-sum-exp shift.
pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

/// Deterministic generator (ChaCha8) whose position can be saved and restored.
#[derive(Debug, Clone, PartialEq)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

/// Serializable position of an [`Rng`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub stream: u64,
    pub word_pos: u128,
}

impl Rng {
    pub const ALGORITHM: &'static str = "chacha8";

    pub fn new(seed: u64) -> Self {
        Self { seed, inner: ChaCha8Rng::seed_from_u64(seed) }
    }

    /// Independent stream derived from the same seed.
    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            stream: self.inner.get_stream(),
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn from_state(state: RngState) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(state.seed);
        inner.set_stream(state.stream);
        inner.set_word_pos(state.word_pos);
        Self { seed: state.seed, inner }
    }

    pub fn uniform(&mut self) -> f64 {
        self.inner.gen::<f64>()
    }

    pub fn below(&mut self, n: usize) -> usize {
        self.inner.gen_range(0..n)
    }
}

impl RngCore for Rng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}

impl std::fmt::Display for RngState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}:{}:{}", self.seed, self.stream, self.word_pos)
    }
}

impl std::str::FromStr for RngState {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split(':').collect();
        let bad = || Error::Checkpoint(format!("malformed rng state {s:?}"));
        if parts.len() != 3 {
            return Err(bad());
        }
        Ok(RngState {
            seed: parts[0].parse().map_err(|_| bad())?,
            stream: parts[1].parse().map_err(|_| bad())?,
            word_pos: parts[2].parse().map_err(|_| bad())?,
        })
    }
}

/// A named trainable tensor with its gradient buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub grad: Vec<f64>,
}

impl ParamTensor {
    pub fn zeros(name: impl Into<String>, shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            name: name.into(),
            shape: shape.to_vec(),
            values: vec![0.0; n],
            grad: vec![0.0; n],
        }
    }

    pub fn from_values(name: impl Into<String>, shape: &[usize], values: Vec<f64>) -> Result<Self> {
        let name = name.into();
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::Shape(format!(
                "{name}: shape {shape:?} needs {n} values, got {}",
                values.len()
            )));
        }
        Ok(Self { name, shape: shape.to_vec(), grad: vec![0.0; n], values })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Row `r` of a 2-D tensor.
    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        let cols = self.shape[1];
        &self.values[r * cols..(r + 1) * cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let cols = self.shape[1];
        &mut self.values[r * cols..(r + 1) * cols]
    }

    #[inline]
    pub fn grad_row_mut(&mut self, r: usize) -> &mut [f64] {
        let cols = self.shape[1];
        &mut self.grad[r * cols..(r + 1) * cols]
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Uniform initialization in `[low, high)`.
pub fn init_uniform(
    name: impl Into<String>,
    shape: &[usize],
    low: f64,
    high: f64,
    rng: &mut Rng,
) -> Result<ParamTensor> {
    let name = name.into();
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::Shape(format!("{name}: empty shape {shape:?}")));
    }
    if !(low < high) {
        return Err(Error::InvalidArgument(format!(
            "{name}: empty interval [{low}, {high})"
        )));
    }
    let mut t = ParamTensor::zeros(name, shape);
    for v in t.values.iter_mut() {
        *v = low + (high - low) * rng.uniform();
    }
    Ok(t)
}

/// Anything that owns a fixed list of trainable tensors.
pub trait Parameters {
    fn tensors(&self) -> Vec<&ParamTensor>;
    fn tensors_mut(&mut self) -> Vec<&mut ParamTensor>;

    fn zero_grad(&mut self) {
        for t in self.tensors_mut() {
            t.zero_grad();
        }
    }

    fn num_values(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

impl Parameters for ParamTensor {
    fn tensors(&self) -> Vec<&ParamTensor> {
        vec![self]
    }
    fn tensors_mut(&mut self) -> Vec<&mut ParamTensor> {
        vec![self]
    }
}

impl Parameters for Vec<ParamTensor> {
    fn tensors(&self) -> Vec<&ParamTensor> {
        self.iter().collect()
    }
    fn tensors_mut(&mut self) -> Vec<&mut ParamTensor> {
        self.iter_mut().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    /// Per-coordinate clip bound `c`; updates are clipped to `[-c, c]`.
    pub clip: f64,
    pub l2_lambda: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self { learning_rate: 1e-4, clip: 0.2, l2_lambda: 0.05 }
    }
}

impl OptimizerConfig {
    pub fn with_learning_rate(lr: f64) -> Self {
        Self { learning_rate: lr, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(self.clip > 0.0) {
            return Err(Error::Config(format!("clip bound must be positive, got {}", self.clip)));
        }
        if !(self.l2_lambda >= 0.0) {
            return Err(Error::Config(format!(
                "l2 lambda must be non-negative, got {}",
                self.l2_lambda
            )));
        }
        Ok(())
    }

    /// The clipped step for a single coordinate: `lr * clip(g + lambda * v, -c, c)`.
    #[inline]
    pub fn step(&self, value: f64, grad: f64) -> f64 {
        self.learning_rate * (grad + self.l2_lambda * value).clamp(-self.clip, self.clip)
    }
}

/// Applies `v <- v - lr * clip(g + lambda * v, -c, c)` to one slice pair.
#[inline]
pub fn sgd_update(values: &mut [f64], grads: &[f64], cfg: &OptimizerConfig) {
    for (v, g) in values.iter_mut().zip(grads) {
        *v -= cfg.step(*v, *g);
    }
}

/// One SGD step over every tensor; gradients are zeroed afterwards.
///
/// Non-finite gradients abort the step before any tensor is touched.
pub fn sgd_step<P: Parameters + ?Sized>(params: &mut P, cfg: &OptimizerConfig) -> Result<()> {
    for t in params.tensors() {
        if let Some(pos) = t.grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {} at coordinate {pos}", t.name)));
        }
    }
    for t in params.tensors_mut() {
        sgd_update(&mut t.values, &t.grad, cfg);
        t.zero_grad();
        if !t.is_finite() {
            return Err(Error::NonFinite(format!("values of {} after update", t.name)));
        }
    }
    Ok(())
}

/// Compares the analytic gradients stored in `params` against central
/// differences of `f`, returning the maximum of
/// `|analytic - numeric| / max(1, |analytic|)` over the checked coordinates.
///
/// With `sample = Some((n, rng))` only `n` uniformly drawn coordinates are
/// checked; otherwise every coordinate is.
pub fn finite_diff_check<P, F>(
    params: &mut P,
    mut f: F,
    epsilon: f64,
    sample: Option<(usize, &mut Rng)>,
) -> Result<f64>
where
    P: Parameters,
    F: FnMut(&P) -> f64,
{
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(Error::InvalidArgument(format!(
            "epsilon {epsilon} outside [1e-7, 1e-3]"
        )));
    }
    let base = f(params);
    let again = f(params);
    if base.to_bits() != again.to_bits() {
        return Err(Error::Contract(format!(
            "objective is not deterministic ({base} vs {again})"
        )));
    }

    let sizes: Vec<usize> = params.tensors().iter().map(|t| t.len()).collect();
    let total: usize = sizes.iter().sum();
    let coords: Vec<(usize, usize)> = {
        let all = |flat: usize| {
            let mut rem = flat;
            for (ti, &n) in sizes.iter().enumerate() {
                if rem < n {
                    return (ti, rem);
                }
                rem -= n;
            }
            unreachable!()
        };
        match sample {
            Some((n, rng)) if n < total => (0..n).map(|_| all(rng.below(total))).collect(),
            _ => (0..total).map(all).collect(),
        }
    };

    let mut worst = 0.0f64;
    for (ti, ci) in coords {
        let (orig, analytic) = {
            let t = &params.tensors()[ti];
            (t.values[ci], t.grad[ci])
        };
        params.tensors_mut()[ti].values[ci] = orig + epsilon;
        let plus = f(params);
        params.tensors_mut()[ti].values[ci] = orig - epsilon;
        let minus = f(params);
        params.tensors_mut()[ti].values[ci] = orig;
        let numeric = (plus - minus) / (2.0 * epsilon);
        let err = (analytic - numeric).abs() / analytic.abs().max(1.0);
        worst = worst.max(err);
    }
    Ok(worst)
}
