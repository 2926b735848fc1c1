//! Minimal dense-network kernel with explicit backpropagation.
//!
//! Only what the actor, critic and denoiser need: affine layers, a handful of
//! pointwise nonlinearities, Adam, flattening for federated deltas, and soft
//! target updates.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn apply(self, z: &mut Array2<f64>) {
        match self {
            Activation::Tanh => z.mapv_inplace(f64::tanh),
            Activation::Relu => z.mapv_inplace(|v| v.max(0.0)),
            Activation::Identity => {}
        }
    }

    /// Derivative expressed through the activation output.
    fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    /// `in x out`
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

/// Fully connected network. Hidden layers use `hidden`, the last layer `output`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub layers: Vec<Dense>,
    pub activations: Vec<Activation>,
}

/// Per-layer activations recorded by [`Mlp::forward_cached`]; `acts[0]` is the input.
pub struct MlpCache {
    acts: Vec<Array2<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &Array2<f64> {
        self.acts.last().expect("cache holds at least the input")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub dw: Vec<Array2<f64>>,
    pub db: Vec<Array1<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        MlpGrads {
            dw: mlp.layers.iter().map(|l| Array2::zeros(l.w.raw_dim())).collect(),
            db: mlp.layers.iter().map(|l| Array1::zeros(l.b.raw_dim())).collect(),
        }
    }

    pub fn norm(&self) -> f64 {
        let s: f64 = self.dw.iter().map(|w| w.iter().map(|v| v * v).sum::<f64>()).sum::<f64>()
            + self.db.iter().map(|b| b.iter().map(|v| v * v).sum::<f64>()).sum::<f64>();
        s.sqrt()
    }

    pub fn scale(&mut self, k: f64) {
        self.dw.iter_mut().for_each(|w| *w *= k);
        self.db.iter_mut().for_each(|b| *b *= k);
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.dw.iter_mut().zip(&other.dw) {
            *a += b;
        }
        for (a, b) in self.db.iter_mut().zip(&other.db) {
            *a += b;
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::new();
        for (w, b) in self.dw.iter().zip(&self.db) {
            out.extend(w.iter().copied());
            out.extend(b.iter().copied());
        }
        out
    }

    pub fn is_finite(&self) -> bool {
        self.dw.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.db.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn new(sizes: &[usize], hidden: Activation, output: Activation, rng: &mut impl Rng) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs at least input and output sizes");
        let mut layers = Vec::with_capacity(sizes.len() - 1);
        let mut activations = Vec::with_capacity(sizes.len() - 1);
        for (i, win) in sizes.windows(2).enumerate() {
            let (fan_in, fan_out) = (win[0], win[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-limit..limit));
            layers.push(Dense {
                w,
                b: Array1::zeros(fan_out),
            });
            activations.push(if i + 2 == sizes.len() { output } else { hidden });
        }
        Mlp {
            sizes: sizes.to_vec(),
            layers,
            activations,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut h = x.to_owned();
        for (layer, act) in self.layers.iter().zip(&self.activations) {
            let mut z = h.dot(&layer.w);
            z += &layer.b;
            act.apply(&mut z);
            h = z;
        }
        h
    }

    pub fn forward_cached(&self, x: ArrayView2<f64>) -> MlpCache {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x.to_owned());
        for (layer, act) in self.layers.iter().zip(&self.activations) {
            let mut z = acts.last().unwrap().dot(&layer.w);
            z += &layer.b;
            act.apply(&mut z);
            acts.push(z);
        }
        MlpCache { acts }
    }

    /// Backpropagate `d_out` (dLoss/dOutput, batch x out). Returns parameter
    /// gradients and dLoss/dInput.
    pub fn backward(&self, cache: &MlpCache, d_out: &Array2<f64>) -> (MlpGrads, Array2<f64>) {
        let n = self.layers.len();
        let mut dw = Vec::with_capacity(n);
        let mut db = Vec::with_capacity(n);
        let mut delta = d_out.clone();
        for l in (0..n).rev() {
            let act = self.activations[l];
            let y = &cache.acts[l + 1];
            ndarray::Zip::from(&mut delta)
                .and(y)
                .for_each(|d, &yv| *d *= act.grad_from_output(yv));
            let input = &cache.acts[l];
            dw.push(input.t().dot(&delta));
            db.push(delta.sum_axis(Axis(0)));
            delta = delta.dot(&self.layers[l].w.t());
        }
        dw.reverse();
        db.reverse();
        (MlpGrads { dw, db }, delta)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Row-major weights then bias, layer by layer.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.write_flat(&mut out);
        out
    }

    pub fn write_flat(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend(l.w.iter().copied());
            out.extend(l.b.iter().copied());
        }
    }

    /// Inverse of [`Mlp::to_flat`]; consumes `param_count()` values and returns the rest.
    pub fn read_flat<'a>(&mut self, flat: &'a [f64]) -> &'a [f64] {
        let mut rest = flat;
        for l in &mut self.layers {
            let (w, r) = rest.split_at(l.w.len());
            l.w.iter_mut().zip(w).for_each(|(d, s)| *d = *s);
            let (b, r) = r.split_at(l.b.len());
            l.b.iter_mut().zip(b).for_each(|(d, s)| *d = *s);
            rest = r;
        }
        rest
    }

    /// `self <- tau * source + (1 - tau) * self`
    pub fn soft_update_from(&mut self, source: &Mlp, tau: f64) {
        for (t, s) in self.layers.iter_mut().zip(&source.layers) {
            t.w.zip_mut_with(&s.w, |a, &b| *a = tau * b + (1.0 - tau) * *a);
            t.b.zip_mut_with(&s.b, |a, &b| *a = tau * b + (1.0 - tau) * *a);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().all(|v| v.is_finite()) && l.b.iter().all(|v| v.is_finite()))
    }

    pub fn same_shape(&self, other: &Mlp) -> bool {
        self.sizes == other.sizes && self.activations == other.activations
    }

    /// Apply raw gradients with plain SGD.
    pub fn sgd_step(&mut self, grads: &MlpGrads, lr: f64) {
        for (l, (dw, db)) in self.layers.iter_mut().zip(grads.dw.iter().zip(&grads.db)) {
            l.w.scaled_add(-lr, dw);
            l.b.scaled_add(-lr, db);
        }
    }
}

/// Adam with optional global-norm clipping.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: Option<f64>,
    t: u64,
    m: MlpGrads,
    v: MlpGrads,
}

impl Adam {
    pub fn new(mlp: &Mlp, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(10.0),
            t: 0,
            m: MlpGrads::zeros_like(mlp),
            v: MlpGrads::zeros_like(mlp),
        }
    }

    /// Descend along `grads` (gradient of a loss to minimize).
    pub fn step(&mut self, mlp: &mut Mlp, grads: &MlpGrads) {
        let mut scale = 1.0;
        if let Some(c) = self.clip_norm {
            let n = grads.norm();
            if n > c {
                scale = c / n;
            }
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let step = self.lr * bc2.sqrt() / bc1;
        let eps = self.eps;
        for (i, layer) in mlp.layers.iter_mut().enumerate() {
            ndarray::Zip::from(&mut layer.w)
                .and(&mut self.m.dw[i])
                .and(&mut self.v.dw[i])
                .and(&grads.dw[i])
                .for_each(|p, m, v, &g| {
                    let g = g * scale;
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= step * *m / (v.sqrt() + eps);
                });
            ndarray::Zip::from(&mut layer.b)
                .and(&mut self.m.db[i])
                .and(&mut self.v.db[i])
                .and(&grads.db[i])
                .for_each(|p, m, v, &g| {
                    let g = g * scale;
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= step * *m / (v.sqrt() + eps);
                });
        }
    }
}

/// Adam over a flat parameter vector, for models not built from [`Mlp`].
#[derive(Clone, Debug)]
pub struct FlatAdam {
    pub lr: f64,
    pub clip_norm: Option<f64>,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl FlatAdam {
    pub fn new(n: usize, lr: f64) -> Self {
        FlatAdam {
            lr,
            clip_norm: Some(10.0),
            t: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        let (b1, b2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);
        let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
        let scale = match self.clip_norm {
            Some(c) if norm > c => c / norm,
            _ => 1.0,
        };
        self.t += 1;
        let step = self.lr * (1.0 - b2.powi(self.t as i32)).sqrt() / (1.0 - b1.powi(self.t as i32));
        for i in 0..params.len() {
            let g = grads[i] * scale;
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g;
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g;
            params[i] -= step * self.m[i] / (self.v[i].sqrt() + eps);
        }
    }
}

/// Numerically stable softmax over a slice, at the given temperature.
pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| ((l - max) / temperature).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Vector-Jacobian product of `softmax(z / temperature)` given its output `y`.
pub fn softmax_vjp(y: &[f64], dy: &[f64], temperature: f64) -> Vec<f64> {
    let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
    y.iter()
        .zip(dy)
        .map(|(&yi, &dyi)| yi * (dyi - dot) / temperature)
        .collect()
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use ndarray::Array2;

    fn loss(mlp: &Mlp, x: &Array2<f64>, target: &Array2<f64>) -> f64 {
        let y = mlp.forward(x.view());
        (&y - target).mapv(|v| v * v).sum() * 0.5
    }

    #[test]
    fn backward_matches_central_differences() {
        let mut rng = seeded(3);
        let mlp = Mlp::new(&[5, 7, 6, 3], Activation::Tanh, Activation::Identity, &mut rng);
        let x = Array2::from_shape_fn((4, 5), |_| rng.random_range(-1.0..1.0));
        let target = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let cache = mlp.forward_cached(x.view());
        let d_out = cache.output() - &target;
        let (grads, dx) = mlp.backward(&cache, &d_out);
        let analytic = grads.to_flat();
        let base = mlp.to_flat();
        let h = 1e-6;
        for i in 0..base.len() {
            let mut p = mlp.clone();
            let mut f = base.clone();
            f[i] += h;
            p.read_flat(&f);
            let lp = loss(&p, &x, &target);
            f[i] -= 2.0 * h;
            p.read_flat(&f);
            let lm = loss(&p, &x, &target);
            let numeric = (lp - lm) / (2.0 * h);
            let denom = numeric.abs().max(analytic[i].abs()).max(1e-8);
            assert!((numeric - analytic[i]).abs() / denom < 1e-5 || (numeric - analytic[i]).abs() < 1e-9);
        }
        // input gradient
        for r in 0..4 {
            for c in 0..5 {
                let mut xp = x.clone();
                xp[[r, c]] += h;
                let lp = loss(&mlp, &xp, &target);
                xp[[r, c]] -= 2.0 * h;
                let lm = loss(&mlp, &xp, &target);
                let numeric = (lp - lm) / (2.0 * h);
                assert!((numeric - dx[[r, c]]).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn flat_round_trip() {
        let mut rng = seeded(1);
        let mlp = Mlp::new(&[3, 4, 2], Activation::Relu, Activation::Tanh, &mut rng);
        let flat = mlp.to_flat();
        assert_eq!(flat.len(), mlp.param_count());
        let mut other = Mlp::new(&[3, 4, 2], Activation::Relu, Activation::Tanh, &mut rng);
        let rest = other.read_flat(&flat);
        assert!(rest.is_empty());
        assert_eq!(other, mlp);
    }

    #[test]
    fn softmax_vjp_matches_differences() {
        let z = [0.3, -1.2, 2.0, 0.1];
        let dy = [0.5, -0.2, 0.1, 1.0];
        let t = 0.7;
        let y = softmax(&z, t);
        let g = softmax_vjp(&y, &dy, t);
        for i in 0..4 {
            let mut zp = z;
            zp[i] += 1e-6;
            let mut zm = z;
            zm[i] -= 1e-6;
            let fp: f64 = softmax(&zp, t).iter().zip(&dy).map(|(a, b)| a * b).sum();
            let fm: f64 = softmax(&zm, t).iter().zip(&dy).map(|(a, b)| a * b).sum();
            assert!(((fp - fm) / 2e-6 - g[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn soft_update_tau_one_copies() {
        let mut rng = seeded(2);
        let a = Mlp::new(&[2, 3, 1], Activation::Tanh, Activation::Identity, &mut rng);
        let mut b = Mlp::new(&[2, 3, 1], Activation::Tanh, Activation::Identity, &mut rng);
        b.soft_update_from(&a, 1.0);
        assert_eq!(a, b);
    }
}
