//! Small fixed-architecture networks with hand-written reverse mode.
//!
//! Batches are stored column-major with one sample per column, so a layer is a single
//! matrix product `W X + b`.

use std::fmt::Debug;

use nalgebra::{DMatrix, DVector, RealField};
use rand::Rng;

use crate::error::{Error, Result};

pub trait Scalar: RealField + Copy + Default + Debug + 'static {
    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn lit(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn lit(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

fn c<T: Scalar>(v: f64) -> T {
    T::lit(v)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense<T: Scalar> {
    /// `out × in`.
    pub w: DMatrix<T>,
    pub b: DVector<T>,
}

impl<T: Scalar> Dense<T> {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self { w: DMatrix::zeros(output, input), b: DVector::zeros(output) }
    }

    fn apply(&self, x: &DMatrix<T>) -> DMatrix<T> {
        let mut z = &self.w * x;
        for mut col in z.column_iter_mut() {
            col += &self.b;
        }
        z
    }
}

/// Multilayer perceptron with ReLU hidden layers and a linear output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T: Scalar> {
    pub layers: Vec<Dense<T>>,
}

/// Activations recorded by [`Mlp::forward_cached`].
#[derive(Debug, Clone)]
pub struct MlpCache<T: Scalar> {
    /// Input to each layer.
    inputs: Vec<DMatrix<T>>,
}

/// Gradient with the same layout as the network.
pub type MlpGrad<T> = Mlp<T>;

impl<T: Scalar> Mlp<T> {
    /// Uniform fan-in initialization `U(−1/√fan_in, 1/√fan_in)`; the output layer is further
    /// multiplied by `out_scale`.
    pub fn new<R: Rng + ?Sized>(sizes: &[usize], out_scale: f64, rng: &mut R) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output widths");
        let n = sizes.len() - 1;
        let layers = (0..n)
            .map(|k| {
                let bound = 1.0 / (sizes[k] as f64).sqrt();
                let scale = if k + 1 == n { out_scale } else { 1.0 };
                let mut draw = || c::<T>(rng.random_range(-bound..bound) * scale);
                let w = DMatrix::from_fn(sizes[k + 1], sizes[k], |_, _| draw());
                let b = DVector::from_fn(sizes[k + 1], |_, _| draw());
                Dense { w, b }
            })
            .collect();
        Self { layers }
    }

    pub fn zeros_like(&self) -> Self {
        Self { layers: self.layers.iter().map(|l| Dense::zeros(l.w.ncols(), l.w.nrows())).collect() }
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![self.layers[0].w.ncols()];
        s.extend(self.layers.iter().map(|l| l.w.nrows()));
        s
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.w.nrows())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Parameter tensors in a fixed order: `l0.w, l0.b, l1.w, ...`. Matrices are column-major.
    pub fn tensors(&self) -> Vec<&[T]> {
        self.layers.iter().flat_map(|l| [l.w.as_slice(), l.b.as_slice()]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.w.as_mut_slice(), l.b.as_mut_slice()])
            .collect()
    }

    /// `(name, shape)` for each tensor, matching [`Mlp::tensors`].
    pub fn tensor_specs(&self) -> Vec<(String, Vec<usize>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(k, l)| {
                [(format!("l{k}.w"), vec![l.w.nrows(), l.w.ncols()]), (format!("l{k}.b"), vec![l.b.len()])]
            })
            .collect()
    }

    pub fn flat(&self) -> Vec<T> {
        self.tensors().concat()
    }

    pub fn set_flat(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::ShapeMismatch(format!("{} values for {} parameters", flat.len(), self.param_count())));
        }
        let mut at = 0;
        for t in self.tensors_mut() {
            t.copy_from_slice(&flat[at..at + t.len()]);
            at += t.len();
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Mlp<U> {
        let conv = |v: &T| U::lit(v.as_f64());
        Mlp {
            layers: self.layers.iter().map(|l| Dense { w: l.w.map(|v| conv(&v)), b: l.b.map(|v| conv(&v)) }).collect(),
        }
    }

    pub fn forward(&self, x: &DMatrix<T>) -> DMatrix<T> {
        let mut h = self.layers[0].apply(x);
        for layer in &self.layers[1..] {
            relu_mut(&mut h);
            h = layer.apply(&h);
        }
        h
    }

    pub fn forward_cached(&self, x: &DMatrix<T>) -> (DMatrix<T>, MlpCache<T>) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (k, layer) in self.layers.iter().enumerate() {
            let z = layer.apply(&h);
            inputs.push(h);
            h = z;
            if k + 1 < self.layers.len() {
                relu_mut(&mut h);
            }
        }
        (h, MlpCache { inputs })
    }

    /// Backpropagates `d_out` (gradient of a scalar loss with respect to the output batch).
    /// Returns the parameter gradient and the gradient with respect to the input batch.
    pub fn backward(&self, cache: &MlpCache<T>, d_out: &DMatrix<T>) -> (MlpGrad<T>, DMatrix<T>) {
        let n = self.layers.len();
        let mut grads: Vec<Dense<T>> = Vec::with_capacity(n);
        let mut delta = d_out.clone();
        for k in (0..n).rev() {
            let x = &cache.inputs[k];
            let w_grad = &delta * x.transpose();
            let b_grad = DVector::from_iterator(delta.nrows(), delta.row_iter().map(|r| r.sum()));
            grads.push(Dense { w: w_grad, b: b_grad });
            let mut d_in = self.layers[k].w.transpose() * &delta;
            if k > 0 {
                // x is the post-ReLU activation of layer k - 1.
                d_in.zip_apply(x, |d, a| {
                    if a <= T::zero() {
                        *d = T::zero();
                    }
                });
            }
            delta = d_in;
        }
        grads.reverse();
        (Mlp { layers: grads }, delta)
    }

    /// Gradient with respect to the input batch only; skips the parameter products.
    pub fn backward_input(&self, cache: &MlpCache<T>, d_out: &DMatrix<T>) -> DMatrix<T> {
        let mut delta = d_out.clone();
        for k in (0..self.layers.len()).rev() {
            let mut d_in = self.layers[k].w.transpose() * &delta;
            if k > 0 {
                d_in.zip_apply(&cache.inputs[k], |d, a| {
                    if a <= T::zero() {
                        *d = T::zero();
                    }
                });
            }
            delta = d_in;
        }
        delta
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: T, other: &Mlp<T>) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.w.zip_apply(&b.w, |x, y| *x += alpha * y);
            a.b.zip_apply(&b.b, |x, y| *x += alpha * y);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.as_f64().is_finite()))
    }
}

fn relu_mut<T: Scalar>(m: &mut DMatrix<T>) {
    m.apply(|v| {
        if *v < T::zero() {
            *v = T::zero();
        }
    });
}

/// `log(1 − tanh²(x))`, stable for large `|x|`.
pub fn log_one_minus_tanh_sq<T: Scalar>(x: T) -> T {
    let two = c::<T>(2.0);
    two * (c::<T>(std::f64::consts::LN_2) - x - softplus(-two * x))
}

pub fn softplus<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub const LOG_STD_MIN: f64 = -20.0;
pub const LOG_STD_MAX: f64 = 2.0;

/// Tanh-squashed diagonal Gaussian over a box `[low, high]^p`.
///
/// The network outputs `2p` rows per sample: the pre-squash mean `μ` followed by the raw
/// log standard deviation, which is clamped to `[LOG_STD_MIN, LOG_STD_MAX]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SquashedGaussianPolicy<T: Scalar> {
    pub net: Mlp<T>,
    pub act_dim: usize,
    pub low: T,
    pub high: T,
}

/// Forward record of a reparameterized policy sample.
#[derive(Debug, Clone)]
pub struct PolicySample<T: Scalar> {
    /// Squashed actions, `p × B`.
    pub u: DMatrix<T>,
    pub log_prob: DVector<T>,
    /// Pre-squash means `μ`, `p × B`.
    pub mu: DMatrix<T>,
    pub log_std: DMatrix<T>,
    eps: DMatrix<T>,
    tanh: DMatrix<T>,
    clamp_active: DMatrix<bool>,
    cache: MlpCache<T>,
}

impl<T: Scalar> SquashedGaussianPolicy<T> {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, hidden: &[usize], act_dim: usize, low: f64, high: f64, rng: &mut R) -> Self {
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(2 * act_dim);
        Self { net: Mlp::new(&sizes, 0.01, rng), act_dim, low: c(low), high: c(high) }
    }

    fn mid_half(&self) -> (T, T) {
        let half = (self.high - self.low) * c::<T>(0.5);
        (self.low + half, half)
    }

    pub fn cast<U: Scalar>(&self) -> SquashedGaussianPolicy<U> {
        SquashedGaussianPolicy {
            net: self.net.cast(),
            act_dim: self.act_dim,
            low: U::lit(self.low.as_f64()),
            high: U::lit(self.high.as_f64()),
        }
    }

    /// Pre-squash means for a batch of observations.
    pub fn logits(&self, s: &DMatrix<T>) -> DMatrix<T> {
        self.net.forward(s).rows(0, self.act_dim).into_owned()
    }

    /// Deterministic action `mid + half · tanh(μ)`.
    pub fn mean_action(&self, s: &DMatrix<T>) -> DMatrix<T> {
        let (mid, half) = self.mid_half();
        self.logits(s).map(|m| mid + half * m.tanh())
    }

    /// Reparameterized sample with standard normal `noise` (`p × B`).
    pub fn sample(&self, s: &DMatrix<T>, noise: &DMatrix<T>) -> PolicySample<T> {
        let p = self.act_dim;
        let (out, cache) = self.net.forward_cached(s);
        let mu = out.rows(0, p).into_owned();
        let raw = out.rows(p, p).into_owned();
        let (lo, hi) = (c::<T>(LOG_STD_MIN), c::<T>(LOG_STD_MAX));
        let clamp_active = raw.map(|r| r < lo || r > hi);
        let log_std = raw.map(|r| r.clamp(lo, hi));
        let pre = DMatrix::from_fn(p, s.ncols(), |i, j| mu[(i, j)] + log_std[(i, j)].exp() * noise[(i, j)]);
        let tanh = pre.map(|x| x.tanh());
        let (mid, half) = self.mid_half();
        let u = tanh.map(|a| mid + half * a);
        let half_log_2pi = c::<T>(0.5 * (2.0 * std::f64::consts::PI).ln());
        let log_half = half.ln();
        let log_prob = DVector::from_fn(s.ncols(), |j, _| {
            let mut lp = T::zero();
            for i in 0..p {
                let e = noise[(i, j)];
                lp += -c::<T>(0.5) * e * e - log_std[(i, j)] - half_log_2pi;
                lp -= log_one_minus_tanh_sq(pre[(i, j)]) + log_half;
            }
            lp
        });
        PolicySample { u, log_prob, mu, log_std, eps: noise.clone(), tanh, clamp_active, cache }
    }

    /// Gradient of a loss given its partials with respect to the sampled actions `d_u`, the
    /// log-densities `d_logp`, and (directly) the means `d_mu`. Any of them may be `None`.
    pub fn backward(
        &self,
        sample: &PolicySample<T>,
        d_u: Option<&DMatrix<T>>,
        d_logp: Option<&DVector<T>>,
        d_mu: Option<&DMatrix<T>>,
    ) -> MlpGrad<T> {
        let p = self.act_dim;
        let b = sample.u.ncols();
        let (_, half) = self.mid_half();
        let two = c::<T>(2.0);
        let mut d_out = DMatrix::zeros(2 * p, b);
        for j in 0..b {
            let gl = d_logp.map_or(T::zero(), |v| v[j]);
            for i in 0..p {
                let a = sample.tanh[(i, j)];
                let sigma = sample.log_std[(i, j)].exp();
                let gu = d_u.map_or(T::zero(), |m| m[(i, j)]);
                // log π contains −log(1 − tanh²(pre)), whose derivative is 2 tanh(pre).
                let d_pre = gu * half * (T::one() - a * a) + gl * two * a;
                let gm = d_mu.map_or(T::zero(), |m| m[(i, j)]);
                d_out[(i, j)] = d_pre + gm;
                let d_log_std = d_pre * sigma * sample.eps[(i, j)] - gl;
                d_out[(p + i, j)] = if sample.clamp_active[(i, j)] { T::zero() } else { d_log_std };
            }
        }
        self.net.backward(&sample.cache, &d_out).0
    }

    /// Gradient of a loss on the deterministic action `mid + half · tanh(μ)` given `d_mean`.
    pub fn mean_action_backward(&self, s: &DMatrix<T>, d_mean: &DMatrix<T>) -> MlpGrad<T> {
        let p = self.act_dim;
        let (out, cache) = self.net.forward_cached(s);
        let (_, half) = self.mid_half();
        let mut d_out = DMatrix::zeros(2 * p, s.ncols());
        for j in 0..s.ncols() {
            for i in 0..p {
                let a = out[(i, j)].tanh();
                d_out[(i, j)] = d_mean[(i, j)] * half * (T::one() - a * a);
            }
        }
        self.net.backward(&cache, &d_out).0
    }

    /// Gradient of a loss on the means `μ` alone.
    pub fn logit_backward(&self, s: &DMatrix<T>, d_mu: &DMatrix<T>) -> MlpGrad<T> {
        let p = self.act_dim;
        let (_, cache) = self.net.forward_cached(s);
        let mut d_out = DMatrix::zeros(2 * p, s.ncols());
        d_out.rows_mut(0, p).copy_from(d_mu);
        self.net.backward(&cache, &d_out).0
    }
}

/// State-action value network over `[s; u]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Critic<T: Scalar> {
    pub net: Mlp<T>,
}

impl<T: Scalar> Critic<T> {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, act_dim: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut sizes = vec![obs_dim + act_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(1);
        Self { net: Mlp::new(&sizes, 1.0, rng) }
    }

    pub fn input(s: &DMatrix<T>, u: &DMatrix<T>) -> DMatrix<T> {
        let mut x = DMatrix::zeros(s.nrows() + u.nrows(), s.ncols());
        x.rows_mut(0, s.nrows()).copy_from(s);
        x.rows_mut(s.nrows(), u.nrows()).copy_from(u);
        x
    }

    pub fn q(&self, s: &DMatrix<T>, u: &DMatrix<T>) -> DVector<T> {
        let out = self.net.forward(&Self::input(s, u));
        DVector::from_iterator(out.ncols(), out.row(0).iter().copied())
    }

    pub fn q_cached(&self, s: &DMatrix<T>, u: &DMatrix<T>) -> (DVector<T>, MlpCache<T>) {
        let (out, cache) = self.net.forward_cached(&Self::input(s, u));
        (DVector::from_iterator(out.ncols(), out.row(0).iter().copied()), cache)
    }

    /// Parameter gradient and gradient with respect to the action rows, given `dL/dQ`.
    pub fn backward(&self, cache: &MlpCache<T>, d_q: &DVector<T>, obs_dim: usize) -> (MlpGrad<T>, DMatrix<T>) {
        let d_out = DMatrix::from_row_slice(1, d_q.len(), d_q.as_slice());
        let (g, dx) = self.net.backward(cache, &d_out);
        let act = dx.nrows() - obs_dim;
        (g, dx.rows(obs_dim, act).into_owned())
    }

    /// Gradient with respect to the action rows only.
    pub fn action_gradient(&self, cache: &MlpCache<T>, d_q: &DVector<T>, obs_dim: usize) -> DMatrix<T> {
        let d_out = DMatrix::from_row_slice(1, d_q.len(), d_q.as_slice());
        let dx = self.net.backward_input(cache, &d_out);
        let act = dx.nrows() - obs_dim;
        dx.rows(obs_dim, act).into_owned()
    }

    pub fn cast<U: Scalar>(&self) -> Critic<U> {
        Critic { net: self.net.cast() }
    }
}

/// Two online critics and their slowly tracking targets.
#[derive(Debug, Clone, PartialEq)]
pub struct TwinCritics<T: Scalar> {
    pub q: [Critic<T>; 2],
    pub target: [Critic<T>; 2],
}

impl<T: Scalar> TwinCritics<T> {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, act_dim: usize, hidden: &[usize], rng: &mut R) -> Self {
        let q1 = Critic::new(obs_dim, act_dim, hidden, rng);
        let q2 = Critic::new(obs_dim, act_dim, hidden, rng);
        Self { target: [q1.clone(), q2.clone()], q: [q1, q2] }
    }

    pub fn min_q(&self, s: &DMatrix<T>, u: &DMatrix<T>) -> DVector<T> {
        let a = self.q[0].q(s, u);
        let b = self.q[1].q(s, u);
        a.zip_map(&b, |x, y| x.min(y))
    }

    pub fn min_target(&self, s: &DMatrix<T>, u: &DMatrix<T>) -> DVector<T> {
        let a = self.target[0].q(s, u);
        let b = self.target[1].q(s, u);
        a.zip_map(&b, |x, y| x.min(y))
    }

    pub fn cast<U: Scalar>(&self) -> TwinCritics<U> {
        TwinCritics {
            q: [self.q[0].cast(), self.q[1].cast()],
            target: [self.target[0].cast(), self.target[1].cast()],
        }
    }
}

/// `θ_targ ← ρ θ_targ + (1 − ρ) θ`.
pub fn polyak_update<T: Scalar>(target: &mut Mlp<T>, online: &Mlp<T>, rho: f64) -> Result<()> {
    if target.sizes() != online.sizes() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", target.sizes(), online.sizes())));
    }
    let r = c::<T>(rho);
    let one_minus = c::<T>(1.0 - rho);
    for (t, o) in target.tensors_mut().into_iter().zip(online.tensors()) {
        for (a, &b) in t.iter_mut().zip(o) {
            *a = r * *a + one_minus * b;
        }
    }
    Ok(())
}

/// Adaptive-moment optimizer over a list of tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T: Scalar> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, shapes: &[usize]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
        }
    }

    pub fn for_mlp(lr: f64, net: &Mlp<T>) -> Self {
        let shapes: Vec<usize> = net.tensors().iter().map(|t| t.len()).collect();
        Self::new(lr, &shapes)
    }

    pub fn update(&mut self, params: Vec<&mut [T]>, grads: Vec<&[T]>) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch("optimizer tensor count".into()));
        }
        self.step += 1;
        let (b1, b2) = (c::<T>(self.beta1), c::<T>(self.beta2));
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let step_size = c::<T>(self.lr / bc1);
        let bc2_sqrt = c::<T>(bc2.sqrt());
        let eps = c::<T>(self.eps);
        let one = T::one();
        for (k, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if p.len() != g.len() || p.len() != self.m[k].len() {
                return Err(Error::ShapeMismatch(format!("optimizer tensor {k}")));
            }
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.len() {
                m[i] = b1 * m[i] + (one - b1) * g[i];
                v[i] = b2 * v[i] + (one - b2) * g[i] * g[i];
                p[i] -= step_size * m[i] / (v[i].sqrt() / bc2_sqrt + eps);
            }
        }
        Ok(())
    }

    pub fn step_mlp(&mut self, net: &mut Mlp<T>, grad: &MlpGrad<T>) -> Result<()> {
        self.update(net.tensors_mut(), grad.tensors())
    }
}

/// Central finite-difference gradient of `f` at `x`.
pub fn finite_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn normal(r: &mut ChaCha8Rng, rows: usize, cols: usize) -> DMatrix<f64> {
        DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(r))
    }

    #[test]
    fn parameter_count_matches_architecture() {
        let net = Mlp::<f64>::new(&[4, 256, 256, 4], 1.0, &mut rng(0));
        assert_eq!(net.param_count(), 4 * 256 + 256 + 256 * 256 + 256 + 256 * 4 + 4);
        let specs = net.tensor_specs();
        assert_eq!(specs[0], ("l0.w".to_string(), vec![256, 4]));
        assert_eq!(specs.len(), 6);
    }

    #[test]
    fn mlp_backward_matches_finite_differences() {
        let mut r = rng(1);
        let net = Mlp::<f64>::new(&[3, 8, 8, 2], 1.0, &mut r);
        let x = normal(&mut r, 3, 5);
        let wts = normal(&mut r, 2, 5);
        let loss = |n: &Mlp<f64>| n.forward(&x).component_mul(&wts).sum();
        let (_, cache) = net.forward_cached(&x);
        let (g, dx) = net.backward(&cache, &wts);
        let fd = finite_difference(
            |p| {
                let mut n = net.clone();
                n.set_flat(p).unwrap();
                loss(&n)
            },
            &net.flat(),
            1e-5,
        );
        assert!(relative_error(&g.flat(), &fd) <= 1e-6);
        let fdx = finite_difference(
            |v| net.forward(&DMatrix::from_column_slice(3, 5, v)).component_mul(&wts).sum(),
            x.as_slice(),
            1e-5,
        );
        assert!(relative_error(dx.as_slice(), &fdx) <= 1e-6);
    }

    #[test]
    fn gradient_is_linear_in_the_upstream_signal() {
        let mut r = rng(2);
        let net = Mlp::<f64>::new(&[3, 8, 8, 2], 1.0, &mut r);
        let x = normal(&mut r, 3, 4);
        let (a, b) = (normal(&mut r, 2, 4), normal(&mut r, 2, 4));
        let (_, cache) = net.forward_cached(&x);
        let ga = net.backward(&cache, &a).0.flat();
        let gb = net.backward(&cache, &b).0.flat();
        let gab = net.backward(&cache, &(&a + &b)).0.flat();
        let sum: Vec<f64> = ga.iter().zip(&gb).map(|(p, q)| p + q).collect();
        assert!(sum.iter().zip(&gab).all(|(p, q)| (p - q).abs() <= 1e-9));
    }

    #[test]
    fn zero_network_output_bias_gradient_is_the_loss_slope() {
        let mut net = Mlp::<f64>::new(&[2, 8, 1], 1.0, &mut rng(3));
        net.set_flat(&vec![0.0; net.param_count()]).unwrap();
        let x = DMatrix::from_column_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        let (_, cache) = net.forward_cached(&x);
        let slope = DMatrix::from_row_slice(1, 2, &[0.3, 0.3]);
        let g = net.backward(&cache, &slope).0;
        assert!((g.layers[1].b[0] - 0.6).abs() < 1e-15);
        assert!(g.layers[0].w.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn squashing_stays_in_the_closed_box() {
        let mut r = rng(4);
        let policy = SquashedGaussianPolicy::<f64>::new(4, &[8, 8], 2, -0.7, 0.7, &mut r);
        let s = normal(&mut r, 4, 1000);
        for _ in 0..20 {
            let noise = normal(&mut r, 2, 1000) * 30.0;
            let smp = policy.sample(&s, &noise);
            assert!(smp.u.iter().all(|&u| (-0.7..=0.7).contains(&u)));
            assert!(smp.log_prob.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn zero_mean_small_spread_gives_midpoint() {
        let mut policy = SquashedGaussianPolicy::<f64>::new(1, &[8], 1, 0.2, 1.0, &mut rng(5));
        let last = policy.net.layers.len() - 1;
        policy.net.layers[last].w.fill(0.0);
        policy.net.layers[last].b[0] = 0.0;
        policy.net.layers[last].b[1] = -20.0;
        let smp = policy.sample(&DMatrix::from_element(1, 1, 0.5), &DMatrix::from_element(1, 1, 1.0));
        assert!((smp.u[(0, 0)] - 0.6).abs() < 1e-9);
    }

    #[test]
    fn log_density_matches_histogram() {
        // One-dimensional policy with fixed mean and spread; compare the density of the squashed
        // variable against a histogram of 10^6 draws.
        let mut policy = SquashedGaussianPolicy::<f64>::new(1, &[4], 1, -0.7, 0.7, &mut rng(6));
        let last = policy.net.layers.len() - 1;
        policy.net.layers[last].w.fill(0.0);
        policy.net.layers[last].b[0] = 0.3;
        policy.net.layers[last].b[1] = (0.8f64).ln();
        let s = DMatrix::from_element(1, 1, 0.0);
        let mut r = rng(7);
        let n = 1_000_000;
        let noise = normal(&mut r, 1, n);
        let draws = policy.sample(&DMatrix::from_element(1, n, 0.0), &noise).u;
        let (lo, width) = (0.1, 0.02);
        let count = draws.iter().filter(|&&u| u >= lo && u < lo + width).count();
        let empirical = count as f64 / n as f64 / width;
        // Density at the bin centre from the closed form.
        let u = lo + width / 2.0;
        let pre = (u / 0.7).atanh();
        let eps = (pre - 0.3) / 0.8;
        let smp = policy.sample(&s, &DMatrix::from_element(1, 1, eps));
        assert!((smp.u[(0, 0)] - u).abs() < 1e-12);
        let density = smp.log_prob[0].exp();
        assert!((density - empirical).abs() <= 1e-3 * 10.0 * density.max(1.0), "{density} vs {empirical}");
    }

    #[test]
    fn policy_backward_matches_finite_differences() {
        let mut r = rng(8);
        let policy = SquashedGaussianPolicy::<f64>::new(4, &[8, 8], 2, -0.7, 0.7, &mut r);
        let s = normal(&mut r, 4, 6);
        let noise = normal(&mut r, 2, 6);
        let (wu, wl, wm) = (normal(&mut r, 2, 6), normal(&mut r, 6, 1), normal(&mut r, 2, 6));
        let loss = |p: &SquashedGaussianPolicy<f64>| {
            let smp = p.sample(&s, &noise);
            smp.u.component_mul(&wu).sum() + smp.log_prob.dot(&DVector::from_column_slice(wl.as_slice())) + smp.mu.component_mul(&wm).sum()
        };
        let smp = policy.sample(&s, &noise);
        let wl_v = DVector::from_column_slice(wl.as_slice());
        let g = policy.backward(&smp, Some(&wu), Some(&wl_v), Some(&wm)).flat();
        let fd = finite_difference(
            |p| {
                let mut q = policy.clone();
                q.net.set_flat(p).unwrap();
                loss(&q)
            },
            &policy.net.flat(),
            1e-5,
        );
        assert!(relative_error(&g, &fd) <= 1e-6);
    }

    #[test]
    fn polyak_limits() {
        let mut r = rng(9);
        let online = Mlp::<f64>::new(&[2, 4, 1], 1.0, &mut r);
        let start = Mlp::<f64>::new(&[2, 4, 1], 1.0, &mut r);
        let mut t = start.clone();
        polyak_update(&mut t, &online, 1.0).unwrap();
        assert_eq!(t, start);
        polyak_update(&mut t, &online, 0.0).unwrap();
        assert_eq!(t, online);

        let mut t = start.clone();
        let gap0: f64 = start.flat().iter().zip(online.flat()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        for k in 1..=200 {
            polyak_update(&mut t, &online, 0.995).unwrap();
            let gap: f64 = t.flat().iter().zip(online.flat()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            assert!((gap - gap0 * 0.995f64.powi(k)).abs() <= 1e-12);
        }
        let other = Mlp::<f64>::new(&[2, 5, 1], 1.0, &mut r);
        assert!(polyak_update(&mut t, &other, 0.5).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = vec![1.0f64, -2.0];
        let mut opt = Adam::<f64>::new(0.1, &[2]);
        opt.update(vec![&mut p], vec![&[3.0, -0.5]]).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-7 && (p[1] + 1.9).abs() < 1e-7);
    }

    #[test]
    fn initialization_is_deterministic() {
        let a = SquashedGaussianPolicy::<f32>::new(4, &[64, 64], 2, -0.7, 0.7, &mut rng(10));
        let b = SquashedGaussianPolicy::<f32>::new(4, &[64, 64], 2, -0.7, 0.7, &mut rng(10));
        assert_eq!(a, b);
    }
}
