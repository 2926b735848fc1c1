use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::scenario::{Conditioning, ScenarioGrid};
use crate::error::{Error, Result};
use crate::nn::{Activation, Adam, Mlp, MlpGrads};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DiffusionConfig {
    pub grid: usize,
    pub t_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub hidden: Vec<usize>,
    pub time_embed: usize,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            grid: 16,
            t_steps: 50,
            beta_start: 1e-3,
            beta_end: 0.2,
            hidden: vec![128, 128],
            time_embed: 16,
            lr: 1e-3,
            batch: 32,
            epochs: 30,
        }
    }
}

/// Conditioning one-hot width: 3 jam classes + 3 load classes.
pub const COND_DIM: usize = 6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffusionModel {
    pub cfg: DiffusionConfig,
    pub denoiser: Mlp,
    pub betas: Vec<f64>,
    pub alpha_bars: Vec<f64>,
    /// Mean denoising loss per epoch.
    pub loss_curve: Vec<f64>,
    /// The training set held a single distinct grid.
    pub low_diversity: bool,
    pub prior: DataPrior,
}

/// Linear schedule `beta_start..=beta_end` and its cumulative products.
pub fn linear_schedule(cfg: &DiffusionConfig) -> (Vec<f64>, Vec<f64>) {
    let t = cfg.t_steps;
    let betas: Vec<f64> = (0..t)
        .map(|i| {
            if t == 1 {
                cfg.beta_start
            } else {
                cfg.beta_start + (cfg.beta_end - cfg.beta_start) * i as f64 / (t - 1) as f64
            }
        })
        .collect();
    let mut ab = Vec::with_capacity(t);
    let mut acc = 1.0;
    for b in &betas {
        acc *= 1.0 - b;
        ab.push(acc);
    }
    (betas, ab)
}

pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut v = Vec::with_capacity(dim);
    for i in 0..half {
        let w = (-(1000f64.ln()) * i as f64 / half.max(1) as f64).exp();
        v.push((t as f64 * w).sin());
        v.push((t as f64 * w).cos());
    }
    v.resize(dim, 0.0);
    v
}

fn cond_onehot(c: Conditioning) -> [f64; COND_DIM] {
    let mut v = [0.0; COND_DIM];
    v[(c.jam as usize).min(2)] = 1.0;
    v[3 + (c.load as usize).min(2)] = 1.0;
    v
}

/// Denoiser input rows: noisy grid, timestep embedding, conditioning.
pub fn denoiser_input(x_t: &Array2<f64>, ts: &[usize], conds: &[Conditioning], time_embed: usize) -> Array2<f64> {
    let (n, g) = x_t.dim();
    let mut out = Array2::zeros((n, g + time_embed + COND_DIM));
    for r in 0..n {
        out.row_mut(r).slice_mut(ndarray::s![..g]).assign(&x_t.row(r));
        for (k, v) in time_embedding(ts[r], time_embed).into_iter().enumerate() {
            out[[r, g + k]] = v;
        }
        for (k, v) in cond_onehot(conds[r]).into_iter().enumerate() {
            out[[r, g + time_embed + k]] = v;
        }
    }
    out
}

fn to_model_space(g: &ScenarioGrid) -> Vec<f64> {
    g.values.iter().map(|v| 2.0 * v - 1.0).collect()
}

/// Per-pixel mean and pooled variance of the training grids (model space).
/// The denoiser predicts only a residual on top of the noise estimate that
/// is optimal when grids are Gaussian with these moments; without that skip
/// a hidden layer narrower than the grid cannot pass full-rank noise through.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataPrior {
    pub mean: Vec<f64>,
    pub var: f64,
}

impl DataPrior {
    /// Uninformative prior: zero mean, unit variance.
    pub fn standard(g2: usize) -> Self {
        DataPrior {
            mean: vec![0.0; g2],
            var: 1.0,
        }
    }

    fn fit(data: &[Vec<f64>]) -> Self {
        let g2 = data[0].len();
        let n = data.len() as f64;
        let mut mean = vec![0.0; g2];
        for d in data {
            for (m, v) in mean.iter_mut().zip(d) {
                *m += v / n;
            }
        }
        let var = data
            .iter()
            .flat_map(|d| d.iter().zip(&mean).map(|(v, m)| (v - m).powi(2)))
            .sum::<f64>()
            / (n * g2 as f64);
        DataPrior { mean, var }
    }

    /// `eps_hat += sqrt(1-ab) / (ab var + 1 - ab) * (x_t - sqrt(ab) mean)`.
    fn add_skip(&self, eps_hat: &mut Array2<f64>, x_t: &Array2<f64>, ts: &[usize], alpha_bars: &[f64]) {
        for (r, mut row) in eps_hat.axis_iter_mut(Axis(0)).enumerate() {
            let ab = alpha_bars[ts[r]];
            let k = (1.0 - ab).sqrt() / (ab * self.var + 1.0 - ab);
            let s = ab.sqrt();
            ndarray::Zip::from(&mut row)
                .and(x_t.row(r))
                .and(&self.mean)
                .for_each(|e, &x, &m| *e += k * (x - s * m));
        }
    }
}

/// Noise-regression loss `mean((eps_hat - eps)^2)` on a batch of clean grids
/// `x0` (model space, [-1, 1]) at timesteps `ts` with noise `eps`, and its
/// gradient w.r.t. the denoiser.
pub fn noise_loss_grad(
    denoiser: &Mlp,
    prior: &DataPrior,
    alpha_bars: &[f64],
    time_embed: usize,
    x0: &Array2<f64>,
    ts: &[usize],
    eps: &Array2<f64>,
    conds: &[Conditioning],
) -> (f64, MlpGrads) {
    let mut x_t = x0.clone();
    for (r, mut row) in x_t.axis_iter_mut(Axis(0)).enumerate() {
        let ab = alpha_bars[ts[r]];
        let (a, b) = (ab.sqrt(), (1.0 - ab).sqrt());
        ndarray::Zip::from(&mut row)
            .and(eps.row(r))
            .for_each(|x, &e| *x = a * *x + b * e);
    }
    let input = denoiser_input(&x_t, ts, conds, time_embed);
    let cache = denoiser.forward_cached(input.view());
    let mut eps_hat = cache.output().clone();
    prior.add_skip(&mut eps_hat, &x_t, ts, alpha_bars);
    let diff = eps_hat - eps;
    let count = diff.len() as f64;
    let loss = diff.mapv(|d| d * d).sum() / count;
    let d_out = diff.mapv(|d| 2.0 * d / count);
    let (grads, _) = denoiser.backward(&cache, &d_out);
    (loss, grads)
}

/// Fit the denoiser with the standard noise-prediction objective.
pub fn train_diffusion(dataset: &[ScenarioGrid], cfg: &DiffusionConfig, rng: &mut impl Rng) -> Result<DiffusionModel> {
    if dataset.len() < cfg.batch || cfg.batch == 0 {
        return Err(Error::Config(format!(
            "diffusion dataset of {} grids is smaller than the batch size {}",
            dataset.len(),
            cfg.batch
        )));
    }
    let g2 = cfg.grid * cfg.grid;
    if dataset.iter().any(|g| g.values.len() != g2) {
        return Err(Error::Shape(format!("expected {}x{} grids", cfg.grid, cfg.grid)));
    }
    let (betas, alpha_bars) = linear_schedule(cfg);
    let mut sizes = vec![g2 + cfg.time_embed + COND_DIM];
    sizes.extend(&cfg.hidden);
    sizes.push(g2);
    let mut denoiser = Mlp::new(&sizes, Activation::Tanh, Activation::Identity, rng);
    let mut opt = Adam::new(&denoiser, cfg.lr);
    let data: Vec<Vec<f64>> = dataset.iter().map(to_model_space).collect();
    let low_diversity = dataset.windows(2).all(|w| w[0].values == w[1].values);
    let prior = DataPrior::fit(&data);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        let (mut sum, mut batches) = (0.0, 0);
        for chunk in order.chunks_exact(cfg.batch) {
            let mut x0 = Array2::zeros((chunk.len(), g2));
            for (r, &i) in chunk.iter().enumerate() {
                x0.row_mut(r).assign(&ndarray::ArrayView1::from(&data[i]));
            }
            let ts: Vec<usize> = chunk.iter().map(|_| rng.random_range(0..cfg.t_steps)).collect();
            let eps = Array2::from_shape_fn((chunk.len(), g2), |_| rng.sample(StandardNormal));
            let conds: Vec<Conditioning> = chunk.iter().map(|&i| dataset[i].conditioning).collect();
            let (loss, grads) = noise_loss_grad(&denoiser, &prior, &alpha_bars, cfg.time_embed, &x0, &ts, &eps, &conds);
            if !loss.is_finite() {
                return Err(Error::NumericalDivergence);
            }
            opt.step(&mut denoiser, &grads);
            sum += loss;
            batches += 1;
        }
        loss_curve.push(sum / batches as f64);
    }
    Ok(DiffusionModel {
        cfg: cfg.clone(),
        denoiser,
        betas,
        alpha_bars,
        loss_curve,
        low_diversity,
        prior,
    })
}

impl DiffusionModel {
    /// Ancestral sampling from pure noise, one chain per conditioning entry.
    pub fn sample_batch(&self, conds: &[Conditioning], rng: &mut impl Rng) -> Vec<ScenarioGrid> {
        let g2 = self.cfg.grid * self.cfg.grid;
        let n = conds.len();
        let mut x = Array2::from_shape_fn((n, g2), |_| rng.sample::<f64, _>(StandardNormal));
        for t in (0..self.cfg.t_steps).rev() {
            let ts = vec![t; n];
            let mut eps_hat = self
                .denoiser
                .forward(denoiser_input(&x, &ts, conds, self.cfg.time_embed).view());
            self.prior.add_skip(&mut eps_hat, &x, &ts, &self.alpha_bars);
            // Posterior q(x_{t-1} | x_t, x0_hat) with the predicted clean grid
            // clipped to the data range.
            let beta = self.betas[t];
            let ab = self.alpha_bars[t];
            let ab_prev = if t > 0 { self.alpha_bars[t - 1] } else { 1.0 };
            let c0 = beta * ab_prev.sqrt() / (1.0 - ab);
            let ct = (1.0 - ab_prev) * (1.0 - beta).sqrt() / (1.0 - ab);
            let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt();
            ndarray::Zip::from(&mut x).and(&eps_hat).for_each(|xv, &e| {
                let x0 = ((*xv - (1.0 - ab).sqrt() * e) / ab.sqrt()).clamp(-1.0, 1.0);
                *xv = c0 * x0 + ct * *xv;
            });
            if t > 0 {
                x.mapv_inplace(|v| v + sigma * rng.sample::<f64, _>(StandardNormal));
            }
        }
        x.axis_iter(Axis(0))
            .zip(conds)
            .map(|(row, &c)| ScenarioGrid {
                size: self.cfg.grid,
                values: row.iter().map(|v| ((v + 1.0) / 2.0).clamp(0.0, 1.0)).collect(),
                conditioning: c,
            })
            .collect()
    }
}

/// One reverse-diffusion chain; outputs are clamped to [0, 1].
pub fn sample_grid(model: &DiffusionModel, conditioning: Conditioning, rng: &mut impl Rng) -> ScenarioGrid {
    model.sample_batch(&[conditioning], rng).pop().expect("one sample")
}
