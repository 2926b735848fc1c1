use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::netsim::{Action, Observation};
use crate::nn::{argmax, softmax, Activation, Mlp};

/// What the critic conditions on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum CriticView {
    /// Concatenated observations and relaxed actions of every agent.
    Joint,
    /// The agent's own observation and action only.
    Local,
}

/// Shapes shared by every network of one learner.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub n_agents: usize,
    pub obs_dim: usize,
    /// Sizes of the categorical action heads: next hop, channel, power.
    pub heads: Vec<usize>,
    pub critic_view: CriticView,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
}

impl AgentSpec {
    pub fn act_dim(&self) -> usize {
        self.heads.iter().sum()
    }

    pub fn critic_input_dim(&self) -> usize {
        match self.critic_view {
            CriticView::Joint => self.n_agents * (self.obs_dim + self.act_dim()),
            CriticView::Local => self.obs_dim + self.act_dim(),
        }
    }
}

/// Actor/critic weights with their delayed target copies.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub spec: AgentSpec,
    pub actor: Mlp,
    pub critic: Mlp,
    pub target_actor: Mlp,
    pub target_critic: Mlp,
    pub version: u64,
}

impl PolicyParams {
    /// Tanh hidden layers, linear outputs; targets start as exact copies.
    pub fn new(spec: AgentSpec, rng: &mut impl Rng) -> Self {
        let mut a_sizes = vec![spec.obs_dim];
        a_sizes.extend(&spec.actor_hidden);
        a_sizes.push(spec.act_dim());
        let mut c_sizes = vec![spec.critic_input_dim()];
        c_sizes.extend(&spec.critic_hidden);
        c_sizes.push(1);
        let actor = Mlp::new(&a_sizes, Activation::Tanh, Activation::Identity, rng);
        let critic = Mlp::new(&c_sizes, Activation::Tanh, Activation::Identity, rng);
        PolicyParams {
            target_actor: actor.clone(),
            target_critic: critic.clone(),
            actor,
            critic,
            spec,
            version: 0,
        }
    }

    /// Live actor then live critic parameters. Targets are not part of the flat view.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = self.actor.to_flat();
        self.critic.write_flat(&mut v);
        v
    }

    pub fn flat_len(&self) -> usize {
        self.actor.param_count() + self.critic.param_count()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.flat_len() {
            return Err(Error::Shape(format!(
                "flat length {} != {}",
                flat.len(),
                self.flat_len()
            )));
        }
        let rest = self.actor.read_flat(flat);
        self.critic.read_flat(rest);
        Ok(())
    }

    pub fn soft_update_targets(&mut self, tau: f64) {
        self.target_actor.soft_update_from(&self.actor, tau);
        self.target_critic.soft_update_from(&self.critic, tau);
    }

    pub fn is_finite(&self) -> bool {
        self.actor.is_finite() && self.critic.is_finite()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ActMode {
    /// Argmax of the logits, no noise.
    Eval,
    /// Gaussian logit noise of `noise` scale, then Gumbel-softmax at `temperature`.
    Explore { temperature: f64, noise: f64 },
}

/// Additive zero-mean Gaussian noise; `scale == 0` is the identity.
pub fn add_noise(values: &[f64], scale: f64, rng: &mut impl Rng) -> Vec<f64> {
    if scale <= 0.0 {
        return values.to_vec();
    }
    let normal = Normal::new(0.0, scale).expect("positive scale");
    values.iter().map(|v| v + normal.sample(rng)).collect()
}

pub(crate) fn gumbel(rng: &mut impl Rng) -> f64 {
    let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
    -(-u.ln()).ln()
}

fn decode(heads: &[usize], relaxed: &[f64]) -> Action {
    let mut o = 0;
    let mut idx = [0usize; 3];
    for (h, &n) in heads.iter().enumerate().take(3) {
        idx[h] = argmax(&relaxed[o..o + n]);
        o += n;
    }
    Action {
        next_hop: idx[0],
        channel: idx[1],
        power_level: idx[2],
    }
}

/// Relax one row of logits head by head. Eval mode yields one-hot vectors.
fn relax_row(heads: &[usize], logits: &[f64], mode: ActMode, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalDivergence);
    }
    let mut out = Vec::with_capacity(logits.len());
    let mut o = 0;
    for &n in heads {
        let seg = &logits[o..o + n];
        match mode {
            ActMode::Eval => {
                let a = argmax(seg);
                out.extend((0..n).map(|i| (i == a) as u8 as f64));
            }
            ActMode::Explore { temperature, noise } => {
                let noisy = add_noise(seg, noise, rng);
                let perturbed: Vec<f64> = noisy.iter().map(|l| l + gumbel(rng)).collect();
                out.extend(softmax(&perturbed, temperature));
            }
        }
        o += n;
    }
    Ok(out)
}

/// Actor decision for one observation: the hard action and the relaxed vector
/// the critic sees.
pub fn actor_forward(
    obs: &Observation,
    params: &PolicyParams,
    mode: ActMode,
    rng: &mut impl Rng,
) -> Result<(Action, Vec<f64>)> {
    if obs.0.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalDivergence);
    }
    let x = Array2::from_shape_vec((1, obs.0.len()), obs.0.clone())
        .map_err(|e| Error::Shape(e.to_string()))?;
    let logits = params.actor.forward(x.view());
    let relaxed = relax_row(&params.spec.heads, logits.row(0).as_slice().unwrap(), mode, rng)?;
    Ok((decode(&params.spec.heads, &relaxed), relaxed))
}

/// Batched [`actor_forward`] over every agent's observation.
pub fn act_batch(
    observations: &[Observation],
    actor: &Mlp,
    heads: &[usize],
    mode: ActMode,
    rng: &mut impl Rng,
) -> Result<(Vec<Action>, Vec<Vec<f64>>)> {
    let dim = actor.input_dim();
    let mut flat = Vec::with_capacity(observations.len() * dim);
    for o in observations {
        if o.0.len() != dim {
            return Err(Error::Shape(format!("observation dim {} != {}", o.0.len(), dim)));
        }
        flat.extend_from_slice(&o.0);
    }
    let x = Array2::from_shape_vec((observations.len(), dim), flat).map_err(|e| Error::Shape(e.to_string()))?;
    let logits = actor.forward(x.view());
    let mut actions = Vec::with_capacity(observations.len());
    let mut relaxed = Vec::with_capacity(observations.len());
    for row in logits.rows() {
        let r = relax_row(heads, row.as_slice().unwrap(), mode, rng)?;
        actions.push(decode(heads, &r));
        relaxed.push(r);
    }
    Ok((actions, relaxed))
}

/// Centralized critic value for one joint observation/action.
pub fn critic_forward(joint_obs: &[Observation], joint_action: &[Vec<f64>], params: &PolicyParams) -> Result<f64> {
    let spec = &params.spec;
    let n = match spec.critic_view {
        CriticView::Joint => spec.n_agents,
        CriticView::Local => 1,
    };
    if joint_obs.len() != n
        || joint_action.len() != n
        || joint_obs.iter().any(|o| o.0.len() != spec.obs_dim)
        || joint_action.iter().any(|a| a.len() != spec.act_dim())
    {
        return Err(Error::Shape("critic input does not match the agent spec".into()));
    }
    let mut flat: Vec<f64> = joint_obs.iter().flat_map(|o| o.0.iter().copied()).collect();
    flat.extend(joint_action.iter().flat_map(|a| a.iter().copied()));
    let x = Array2::from_shape_vec((1, flat.len()), flat).map_err(|e| Error::Shape(e.to_string()))?;
    Ok(params.critic.forward(x.view())[[0, 0]])
}
