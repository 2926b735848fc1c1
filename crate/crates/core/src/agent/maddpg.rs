use ndarray::{concatenate, s, Array1, Array2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::policy::{gumbel, AgentSpec, CriticView, PolicyParams};
use super::replay::{ExperienceTuple, ReplayBuffer};
use crate::error::{Error, Result};
use crate::nn::{softmax, softmax_vjp, Adam, Mlp, MlpGrads};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub gamma: f64,
    pub tau: f64,
    pub batch_size: usize,
    pub actor_lr: f64,
    pub critic_lr: f64,
    /// Relaxation temperature used in updates and exploration.
    pub temperature: f64,
    /// Penalty on squared logits, keeps the relaxation away from saturation.
    pub logit_reg: f64,
    /// Gaussian noise on actor inputs during the actor step.
    pub obs_noise: f64,
    /// Gaussian noise on logits while exploring.
    pub explore_noise: f64,
    pub grad_clip: f64,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            gamma: 0.95,
            tau: 0.01,
            batch_size: 64,
            actor_lr: 5e-4,
            critic_lr: 1e-3,
            temperature: 1.0,
            logit_reg: 1e-3,
            obs_noise: 0.0,
            explore_noise: 0.1,
            grad_clip: 10.0,
            actor_hidden: vec![64, 64],
            critic_hidden: vec![128, 128],
        }
    }
}

/// A training minibatch laid out for the critic view.
///
/// Joint view: one row per tuple, reward = mean over agents. Local view: one
/// row per (tuple, alive agent), reward = that agent's reward.
#[derive(Clone, Debug)]
pub struct Batch {
    pub obs: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_obs: Array2<f64>,
    pub not_done: Array1<f64>,
    pub weights: Array1<f64>,
}

impl Batch {
    pub fn rows(&self) -> usize {
        self.obs.nrows()
    }

    /// `agent` restricts a local-view batch to one agent's rows.
    pub fn from_tuples(tuples: &[&ExperienceTuple], spec: &AgentSpec, agent: Option<usize>) -> Batch {
        let (od, ad, n) = (spec.obs_dim, spec.act_dim(), spec.n_agents);
        let mut obs = Vec::new();
        let mut act = Vec::new();
        let mut next = Vec::new();
        let mut rew = Vec::new();
        let mut nd = Vec::new();
        let mut w = Vec::new();
        let rows = match spec.critic_view {
            CriticView::Joint => {
                for t in tuples {
                    obs.extend_from_slice(&t.joint_obs);
                    act.extend_from_slice(&t.joint_action);
                    next.extend_from_slice(&t.joint_next_obs);
                    rew.push(t.mean_reward());
                    nd.push(if t.done { 0.0 } else { 1.0 });
                    w.push(t.weight);
                }
                (tuples.len(), n * od, n * ad)
            }
            CriticView::Local => {
                let mut r = 0;
                for t in tuples {
                    for i in 0..n {
                        if agent.is_some_and(|a| a != i) {
                            continue;
                        }
                        let o = &t.joint_obs[i * od..(i + 1) * od];
                        if o[0] == 0.0 {
                            continue; // dead agent
                        }
                        obs.extend_from_slice(o);
                        act.extend_from_slice(&t.joint_action[i * ad..(i + 1) * ad]);
                        next.extend_from_slice(&t.joint_next_obs[i * od..(i + 1) * od]);
                        rew.push(t.rewards[i]);
                        nd.push(if t.done { 0.0 } else { 1.0 });
                        w.push(t.weight);
                        r += 1;
                    }
                }
                (r, od, ad)
            }
        };
        let (r, oc, ac) = rows;
        Batch {
            obs: Array2::from_shape_vec((r, oc), obs).expect("obs layout"),
            actions: Array2::from_shape_vec((r, ac), act).expect("action layout"),
            rewards: Array1::from(rew),
            next_obs: Array2::from_shape_vec((r, oc), next).expect("next obs layout"),
            not_done: Array1::from(nd),
            weights: Array1::from(w),
        }
    }
}

/// View a critic-layout observation matrix as one actor input row per agent.
fn actor_rows(obs: &Array2<f64>, spec: &AgentSpec) -> Array2<f64> {
    match spec.critic_view {
        CriticView::Joint => {
            let rows = obs.nrows() * spec.n_agents;
            obs.as_standard_layout()
                .into_owned()
                .into_shape_with_order((rows, spec.obs_dim))
                .expect("joint obs reshapes per agent")
        }
        CriticView::Local => obs.clone(),
    }
}

/// Inverse of [`actor_rows`] for action matrices.
fn critic_actions(a: Array2<f64>, spec: &AgentSpec, batch_rows: usize) -> Array2<f64> {
    match spec.critic_view {
        CriticView::Joint => a
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order((batch_rows, spec.n_agents * spec.act_dim()))
            .expect("per-agent actions reshape jointly"),
        CriticView::Local => a,
    }
}

fn relax_matrix(logits: &Array2<f64>, noise: Option<&Array2<f64>>, heads: &[usize], temperature: f64) -> Array2<f64> {
    let mut out = Array2::zeros(logits.raw_dim());
    for r in 0..logits.nrows() {
        let mut o = 0;
        for &n in heads {
            let seg: Vec<f64> = (0..n)
                .map(|k| logits[[r, o + k]] + noise.map_or(0.0, |g| g[[r, o + k]]))
                .collect();
            for (k, y) in softmax(&seg, temperature).into_iter().enumerate() {
                out[[r, o + k]] = y;
            }
            o += n;
        }
    }
    out
}

/// TD targets `r + gamma * (1 - done) * Q_target(s', target_actor(s'))`, with the
/// target actor's relaxation taken noise-free at the configured temperature.
pub fn critic_targets(params: &PolicyParams, batch: &Batch, hyper: &Hyperparams) -> Array1<f64> {
    let spec = &params.spec;
    let rows = actor_rows(&batch.next_obs, spec);
    let logits = params.target_actor.forward(rows.view());
    let relaxed = relax_matrix(&logits, None, &spec.heads, hyper.temperature);
    let next_act = critic_actions(relaxed, spec, batch.rows());
    let input = concatenate![Axis(1), batch.next_obs, next_act];
    let q_next = params.target_critic.forward(input.view()).column(0).to_owned();
    &batch.rewards + &(hyper.gamma * &batch.not_done * &q_next)
}

/// Weighted mean squared TD error and its gradient w.r.t. the critic.
pub fn critic_loss_grad(critic: &Mlp, batch: &Batch, targets: &Array1<f64>) -> (f64, MlpGrads) {
    let input = concatenate![Axis(1), batch.obs, batch.actions];
    let cache = critic.forward_cached(input.view());
    let q = cache.output().column(0).to_owned();
    let wsum = batch.weights.sum().max(f64::MIN_POSITIVE);
    let err = &q - targets;
    let loss = (&batch.weights * &err * &err).sum() / wsum;
    let d = (2.0 / wsum) * &batch.weights * &err;
    let d_out = d.insert_axis(Axis(1));
    let (grads, _) = critic.backward(&cache, &d_out);
    (loss, grads)
}

/// Actor loss `-weighted_mean(Q(s, relax(actor(s) + gumbel))) + reg * mean(logits^2)`
/// and its gradient w.r.t. the actor, with the critic frozen.
///
/// `actor_obs` holds one row per agent (possibly noise-perturbed); `gumbel` has
/// the same shape as the logits.
pub fn actor_loss_grad(
    actor: &Mlp,
    critic: &Mlp,
    spec: &AgentSpec,
    batch: &Batch,
    actor_obs: &Array2<f64>,
    gumbel_noise: &Array2<f64>,
    hyper: &Hyperparams,
) -> (f64, MlpGrads) {
    let t = hyper.temperature;
    let cache = actor.forward_cached(actor_obs.view());
    let logits = cache.output().clone();
    let relaxed = relax_matrix(&logits, Some(gumbel_noise), &spec.heads, t);
    let joint = critic_actions(relaxed.clone(), spec, batch.rows());
    let input = concatenate![Axis(1), batch.obs, joint];
    let ccache = critic.forward_cached(input.view());
    let q = ccache.output().column(0).to_owned();
    let wsum = batch.weights.sum().max(f64::MIN_POSITIVE);
    let n_logits = logits.len() as f64;
    let loss = -(&batch.weights * &q).sum() / wsum + hyper.logit_reg * logits.mapv(|v| v * v).sum() / n_logits;

    let d_q = (-1.0 / wsum) * &batch.weights;
    let (_, d_input) = critic.backward(&ccache, &d_q.insert_axis(Axis(1)));
    let obs_cols = batch.obs.ncols();
    let d_joint = d_input.slice(s![.., obs_cols..]).as_standard_layout().into_owned();
    let d_relaxed = d_joint
        .into_shape_with_order(relaxed.raw_dim())
        .expect("joint action gradient reshapes per agent");
    let mut d_logits = Array2::zeros(logits.raw_dim());
    for r in 0..logits.nrows() {
        let mut o = 0;
        for &n in &spec.heads {
            let y: Vec<f64> = (0..n).map(|k| relaxed[[r, o + k]]).collect();
            let dy: Vec<f64> = (0..n).map(|k| d_relaxed[[r, o + k]]).collect();
            for (k, g) in softmax_vjp(&y, &dy, t).into_iter().enumerate() {
                d_logits[[r, o + k]] = g + 2.0 * hyper.logit_reg * logits[[r, o + k]] / n_logits;
            }
            o += n;
        }
    }
    let (grads, _) = actor.backward(&cache, &d_logits);
    (loss, grads)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct UpdateStats {
    pub critic_loss: f64,
    pub actor_loss: f64,
    pub rows: usize,
}

/// Policy parameters together with their optimizer state.
#[derive(Clone, Debug)]
pub struct Learner {
    pub params: PolicyParams,
    pub actor_opt: Adam,
    pub critic_opt: Adam,
}

impl Learner {
    pub fn new(params: PolicyParams, hyper: &Hyperparams) -> Self {
        let mut actor_opt = Adam::new(&params.actor, hyper.actor_lr);
        let mut critic_opt = Adam::new(&params.critic, hyper.critic_lr);
        actor_opt.clip_norm = Some(hyper.grad_clip);
        critic_opt.clip_norm = Some(hyper.grad_clip);
        Learner {
            params,
            actor_opt,
            critic_opt,
        }
    }

    /// Fresh optimizer state around existing parameters.
    pub fn reset_optimizers(&mut self, hyper: &Hyperparams) {
        *self = Learner::new(self.params.clone(), hyper);
    }

    /// One critic step, one actor step (critic frozen), then a soft target update.
    pub fn update_on_batch(
        &mut self,
        tuples: &[&ExperienceTuple],
        hyper: &Hyperparams,
        agent: Option<usize>,
        rng: &mut impl Rng,
    ) -> Result<UpdateStats> {
        let spec = self.params.spec.clone();
        let batch = Batch::from_tuples(tuples, &spec, agent);
        if batch.rows() == 0 {
            return Ok(UpdateStats::default());
        }
        let y = critic_targets(&self.params, &batch, hyper);
        let (critic_loss, cg) = critic_loss_grad(&self.params.critic, &batch, &y);
        if !critic_loss.is_finite() || !cg.is_finite() {
            return Err(Error::NumericalDivergence);
        }
        self.critic_opt.step(&mut self.params.critic, &cg);

        let mut actor_obs = actor_rows(&batch.obs, &spec);
        if hyper.obs_noise > 0.0 {
            let normal = Normal::new(0.0, hyper.obs_noise).expect("positive noise");
            actor_obs.mapv_inplace(|v| v + normal.sample(rng));
        }
        let g = Array2::from_shape_fn((actor_obs.nrows(), spec.act_dim()), |_| gumbel(rng));
        let (actor_loss, ag) = actor_loss_grad(
            &self.params.actor,
            &self.params.critic,
            &spec,
            &batch,
            &actor_obs,
            &g,
            hyper,
        );
        if !actor_loss.is_finite() || !ag.is_finite() {
            return Err(Error::NumericalDivergence);
        }
        self.actor_opt.step(&mut self.params.actor, &ag);
        self.params.soft_update_targets(hyper.tau);
        self.params.version += 1;
        Ok(UpdateStats {
            critic_loss,
            actor_loss,
            rows: batch.rows(),
        })
    }
}

/// Sample a minibatch uniformly from `buffer` and run one update round.
pub fn maddpg_update(
    buffer: &ReplayBuffer,
    learner: &mut Learner,
    hyper: &Hyperparams,
    rng: &mut impl Rng,
) -> Result<UpdateStats> {
    if buffer.len() < hyper.batch_size {
        return Err(Error::BufferUnderfilled {
            have: buffer.len(),
            need: hyper.batch_size,
        });
    }
    let batch = buffer.sample(hyper.batch_size, rng);
    learner.update_on_batch(&batch, hyper, None, rng)
}
