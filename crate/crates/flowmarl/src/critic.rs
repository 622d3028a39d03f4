//! Per-agent twin Q networks with Polyak targets, the average mixer, and
//! the TD update driven by next actions from the joint flow policy.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::flow::ActionSpace;
use crate::nn::{self, AdamState, MlpParams, MlpSpec};
use crate::tensor::Tensor;

/// How the two twins are combined into one value.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TwinReduction {
    Mean,
    Min,
}

impl TwinReduction {
    fn apply(&self, a: f64, b: f64) -> f64 {
        match self {
            TwinReduction::Mean => 0.5 * (a + b),
            TwinReduction::Min => a.min(b),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AgentCritic {
    pub q1: MlpParams,
    pub q2: MlpParams,
    pub q1_target: MlpParams,
    pub q2_target: MlpParams,
}

/// Twin critics for every agent plus the mixing/targets configuration.
#[derive(Clone, Debug)]
pub struct CriticEnsemble {
    pub agents: Vec<AgentCritic>,
    pub gamma: f64,
    pub tau: f64,
    pub reduction: TwinReduction,
}

impl CriticEnsemble {
    /// Fresh ensemble; layer norm is always enabled on critic nets.
    pub fn init(
        obs_dims: &[usize],
        space: &ActionSpace,
        hidden: &[usize],
        gamma: f64,
        tau: f64,
        reduction: TwinReduction,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let agents = (0..space.agent_count())
            .map(|i| {
                let spec = MlpSpec::new(obs_dims[i] + space.agent_dim(i), hidden, 1, true);
                let q1 = MlpParams::init(spec.clone(), rng);
                let q2 = MlpParams::init(spec, rng);
                AgentCritic {
                    q1_target: q1.clone(),
                    q2_target: q2.clone(),
                    q1,
                    q2,
                }
            })
            .collect();
        CriticEnsemble {
            agents,
            gamma,
            tau,
            reduction,
        }
    }

    pub fn agent_count(&self) -> usize {
        self.agents.len()
    }

    fn concat_inputs(obs: &Tensor, act: &Tensor) -> Result<Tensor> {
        if obs.rows() != act.rows() {
            return Err(Error::shape(
                format!("{} rows", obs.rows()),
                format!("{} rows", act.rows()),
            ));
        }
        let (b, oc, ac) = (obs.rows(), obs.cols(), act.cols());
        let mut out = Tensor::zeros(vec![b, oc + ac]);
        for r in 0..b {
            let row = &mut out.data_mut()[r * (oc + ac)..(r + 1) * (oc + ac)];
            row[..oc].copy_from_slice(obs.row(r));
            row[oc..].copy_from_slice(act.row(r));
        }
        Ok(out)
    }

    /// Reduced online twin value for one agent: [batch] of scalars.
    pub fn q_value(&self, agent: usize, obs_i: &Tensor, act_i: &Tensor) -> Result<Vec<f64>> {
        let input = Self::concat_inputs(obs_i, act_i)?;
        let a = self.agents[agent].q1.forward(&input)?;
        let b = self.agents[agent].q2.forward(&input)?;
        Ok(a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| self.reduction.apply(x, y))
            .collect())
    }

    /// Reduced target twin value for one agent.
    pub fn q_value_target(&self, agent: usize, obs_i: &Tensor, act_i: &Tensor) -> Result<Vec<f64>> {
        let input = Self::concat_inputs(obs_i, act_i)?;
        let a = self.agents[agent].q1_target.forward(&input)?;
        let b = self.agents[agent].q2_target.forward(&input)?;
        Ok(a.data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| self.reduction.apply(x, y))
            .collect())
    }

    /// Average mixer over per-agent values: [batch] of Q_tot.
    ///
    /// `obs_slices` and `act_slices` carry each agent's block of the joint
    /// observation/action batch.
    pub fn q_tot(&self, obs_slices: &[Tensor], act_slices: &[Tensor]) -> Result<Vec<f64>> {
        if obs_slices.len() != self.agent_count() || act_slices.len() != self.agent_count() {
            return Err(Error::shape(
                format!("{} per-agent slices", self.agent_count()),
                format!("{}/{}", obs_slices.len(), act_slices.len()),
            ));
        }
        let batch = obs_slices[0].rows();
        let mut total = vec![0.0; batch];
        for agent in 0..self.agent_count() {
            let q = self.q_value(agent, &obs_slices[agent], &act_slices[agent])?;
            for (t, v) in total.iter_mut().zip(q) {
                *t += v;
            }
        }
        let inv = 1.0 / self.agent_count() as f64;
        for t in total.iter_mut() {
            *t *= inv;
        }
        Ok(total)
    }

    /// TD targets for one agent: r + gamma * (1 - terminal) * Qbar(o', a').
    pub fn td_targets(
        &self,
        agent: usize,
        rewards: &[f64],
        terminals: &[bool],
        next_obs_i: &Tensor,
        next_act_i: &Tensor,
    ) -> Result<Vec<f64>> {
        if rewards.len() != terminals.len() || rewards.len() != next_obs_i.rows() {
            return Err(Error::shape(
                format!("{} rewards/terminals", next_obs_i.rows()),
                format!("{}/{}", rewards.len(), terminals.len()),
            ));
        }
        let next_q = self.q_value_target(agent, next_obs_i, next_act_i)?;
        Ok(rewards
            .iter()
            .zip(terminals)
            .zip(next_q)
            .map(|((&r, &term), q)| r + self.gamma * if term { 0.0 } else { q })
            .collect())
    }

    /// Polyak-update every agent's target nets toward the online nets.
    pub fn polyak_targets(&mut self) -> Result<()> {
        for a in &mut self.agents {
            a.q1_target = nn::polyak_update(&a.q1_target, &a.q1, self.tau)?;
            a.q2_target = nn::polyak_update(&a.q2_target, &a.q2, self.tau)?;
        }
        Ok(())
    }
}

/// Mean over the batch of the squared TD residual, averaged over the twins,
/// for one agent with precomputed (gradient-blocked) targets.
pub fn agent_critic_loss_value(
    critic: &AgentCritic,
    obs_i: &Tensor,
    act_i: &Tensor,
    targets: &[f64],
) -> Result<f64> {
    let input = CriticEnsemble::concat_inputs(obs_i, act_i)?;
    let q1 = critic.q1.forward(&input)?;
    let q2 = critic.q2.forward(&input)?;
    let b = targets.len() as f64;
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let d1 = q1.data()[r] - t;
        let d2 = q2.data()[r] - t;
        total += 0.5 * (d1 * d1 + d2 * d2);
    }
    Ok(total / b)
}

/// Loss and gradients for one agent's twins. Returns
/// (loss, grads for q1, grads for q2).
pub fn agent_critic_loss_grad(
    critic: &AgentCritic,
    obs_i: &Tensor,
    act_i: &Tensor,
    targets: &[f64],
) -> Result<(f64, Vec<Tensor>, Vec<Tensor>)> {
    let input = CriticEnsemble::concat_inputs(obs_i, act_i)?;
    let target_col = Tensor::new(vec![targets.len(), 1], targets.to_vec())?;
    let b = targets.len() as f64;

    let mut tape = Tape::new();
    let n1 = critic.q1.insert_on_tape(&mut tape, true);
    let n2 = critic.q2.insert_on_tape(&mut tape, true);
    let x = tape.constant(input);
    let t = tape.constant(target_col);
    let q1 = n1.forward(&mut tape, x)?;
    let q2 = n2.forward(&mut tape, x)?;
    let e1 = tape.squared_error(q1, t)?;
    let e2 = tape.squared_error(q2, t)?;
    let sum = tape.add(e1, e2)?;
    let loss = tape.scale(sum, 0.5 / b);
    let value = tape.value(loss).item();
    if !value.is_finite() {
        return Err(Error::NonFinite("critic loss".into()));
    }
    tape.backward(loss)?;
    let g1 = critic.q1.grads_from_tape(&tape, &n1);
    let g2 = critic.q2.grads_from_tape(&tape, &n2);
    Ok((value, g1, g2))
}

/// Aggregate critic loss over agents (for logging): mean over agents of the
/// per-agent twin-averaged squared TD residual.
pub fn critic_loss(
    ensemble: &CriticEnsemble,
    obs_slices: &[Tensor],
    act_slices: &[Tensor],
    rewards: &[Vec<f64>],
    terminals: &[bool],
    next_obs_slices: &[Tensor],
    next_act_slices: &[Tensor],
) -> Result<f64> {
    let mut total = 0.0;
    for agent in 0..ensemble.agent_count() {
        let targets = ensemble.td_targets(
            agent,
            &rewards[agent],
            terminals,
            &next_obs_slices[agent],
            &next_act_slices[agent],
        )?;
        total += agent_critic_loss_value(
            &ensemble.agents[agent],
            &obs_slices[agent],
            &act_slices[agent],
            &targets,
        )?;
    }
    Ok(total / ensemble.agent_count() as f64)
}

/// Per-agent Adam states for the twins.
#[derive(Clone, Debug)]
pub struct CriticOptimizer {
    pub states: Vec<(AdamState, AdamState)>,
}

impl CriticOptimizer {
    pub fn new(ensemble: &CriticEnsemble, lr: f64, eps: f64) -> Self {
        CriticOptimizer {
            states: ensemble
                .agents
                .iter()
                .map(|a| (AdamState::new(&a.q1, lr, eps), AdamState::new(&a.q2, lr, eps)))
                .collect(),
        }
    }
}

/// Largest sampled slope |Q_tot(o, a) - Q_tot(o, y)| / ||a - y|| at a fixed
/// joint observation. Pairs closer than 1e-9 are skipped. The pair stream is
/// driven by `sample_pair`, called once per pair in order, so the running
/// max over a prefix of the stream never exceeds the max over the full
/// stream. Evaluation is batched over all pairs.
pub fn estimate_lipschitz(
    ensemble: &CriticEnsemble,
    obs_slices_single: &[Tensor],
    pair_count: usize,
    mut sample_pair: impl FnMut() -> (Vec<f64>, Vec<f64>),
    agent_blocks: &[(usize, usize)],
) -> Result<f64> {
    if pair_count == 0 {
        return Err(Error::InvalidArgument("pair count must be >= 1".into()));
    }
    let total_dim: usize = agent_blocks.iter().map(|&(_, len)| len).sum();
    let mut side_a = Tensor::zeros(vec![pair_count, total_dim]);
    let mut side_b = Tensor::zeros(vec![pair_count, total_dim]);
    let mut dists = vec![0.0; pair_count];
    for p in 0..pair_count {
        let (a, y) = sample_pair();
        if a.len() != total_dim || y.len() != total_dim {
            return Err(Error::shape(
                format!("pair of dim {}", total_dim),
                format!("{}/{}", a.len(), y.len()),
            ));
        }
        dists[p] = a
            .iter()
            .zip(&y)
            .map(|(x, z)| (x - z) * (x - z))
            .sum::<f64>()
            .sqrt();
        side_a.data_mut()[p * total_dim..(p + 1) * total_dim].copy_from_slice(&a);
        side_b.data_mut()[p * total_dim..(p + 1) * total_dim].copy_from_slice(&y);
    }
    let tile = |t: &Tensor| -> Tensor {
        let (cols, row) = (t.cols(), t.row(0));
        let mut out = Tensor::zeros(vec![pair_count, cols]);
        for r in 0..pair_count {
            out.data_mut()[r * cols..(r + 1) * cols].copy_from_slice(row);
        }
        out
    };
    let obs_tiled: Vec<Tensor> = obs_slices_single.iter().map(tile).collect();
    let split = |joint: &Tensor| -> Result<Vec<Tensor>> {
        agent_blocks
            .iter()
            .map(|&(start, len)| {
                let mut t = Tensor::zeros(vec![pair_count, len]);
                for r in 0..pair_count {
                    t.data_mut()[r * len..(r + 1) * len]
                        .copy_from_slice(&joint.row(r)[start..start + len]);
                }
                Ok(t)
            })
            .collect()
    };
    let qa = ensemble.q_tot(&obs_tiled, &split(&side_a)?)?;
    let qb = ensemble.q_tot(&obs_tiled, &split(&side_b)?)?;
    let mut best: Option<f64> = None;
    for p in 0..pair_count {
        if dists[p] < 1e-9 {
            continue;
        }
        let ratio = (qa[p] - qb[p]).abs() / dists[p];
        best = Some(match best {
            Some(b) => b.max(ratio),
            None => ratio,
        });
    }
    best.ok_or_else(|| Error::InvalidArgument("no valid pairs for Lipschitz estimate".into()))
}
