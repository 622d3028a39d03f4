//! Factorizing the joint flow policy into per-agent one-step policies:
//! shared-noise distillation, mixed-value maximization, and the checks
//! relating the distillation residual to the exact Wasserstein distance
//! and to the value gap.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::critic::CriticEnsemble;
use crate::error::{Error, Result};
use crate::flow::{ActionSpace, JointFlowPolicy, NfeMeter};
use crate::metrics;
use crate::nn::MlpParams;
use crate::rng;
use crate::tensor::Tensor;

/// Largest sample count accepted by the assignment-based verifiers.
pub const MAX_VERIFY_SAMPLES: usize = 512;

/// Per-agent one-step sampling policies mapping concat(o_i, z_i) directly to
/// an action block (continuous values, or logits for discrete agents).
#[derive(Clone, Debug)]
pub struct OneStepPolicySet {
    pub nets: Vec<MlpParams>,
    pub alpha: f64,
    pub space: ActionSpace,
    pub obs_dims: Vec<usize>,
}

impl OneStepPolicySet {
    pub fn new(
        nets: Vec<MlpParams>,
        alpha: f64,
        space: ActionSpace,
        obs_dims: Vec<usize>,
    ) -> Result<Self> {
        if nets.len() != space.agent_count() || obs_dims.len() != space.agent_count() {
            return Err(Error::shape(
                format!("{} per-agent nets/obs dims", space.agent_count()),
                format!("{}/{}", nets.len(), obs_dims.len()),
            ));
        }
        for (i, net) in nets.iter().enumerate() {
            let want_in = obs_dims[i] + space.agent_dim(i);
            if net.in_dim() != want_in || net.out_dim() != space.agent_dim(i) {
                return Err(Error::shape(
                    format!("agent {} net {} -> {}", i, want_in, space.agent_dim(i)),
                    format!("net {} -> {}", net.in_dim(), net.out_dim()),
                ));
            }
        }
        Ok(OneStepPolicySet {
            nets,
            alpha,
            space,
            obs_dims,
        })
    }

    pub fn agent_count(&self) -> usize {
        self.nets.len()
    }

    /// One network evaluation for one agent: draw z_i, return the action
    /// block (or logits for discrete agents).
    pub fn one_step_act(
        &self,
        agent: usize,
        obs_i: &[f64],
        rng: &mut impl Rng,
        meter: Option<&mut NfeMeter>,
    ) -> Result<Vec<f64>> {
        let mut z = vec![0.0; self.space.agent_dim(agent)];
        rng::fill_normal(rng, &mut z);
        self.act_with_noise(agent, obs_i, &z, meter)
    }

    pub fn act_with_noise(
        &self,
        agent: usize,
        obs_i: &[f64],
        z_i: &[f64],
        meter: Option<&mut NfeMeter>,
    ) -> Result<Vec<f64>> {
        let mut input = obs_i.to_vec();
        input.extend_from_slice(z_i);
        let x = Tensor::new(vec![1, input.len()], input)?;
        if let Some(m) = meter {
            m.evals += 1;
        }
        Ok(self.nets[agent].forward(&x)?.data().to_vec())
    }

    /// Batched factored action: every agent evaluated on its own obs block
    /// and noise block from a shared joint noise matrix. Output is the joint
    /// action matrix [batch, act_total].
    pub fn forward_joint(
        &self,
        obs_slices: &[Tensor],
        joint_noise: &Tensor,
    ) -> Result<Tensor> {
        let batch = joint_noise.rows();
        let total = self.space.total_dim();
        let mut out = Tensor::zeros(vec![batch, total]);
        for agent in 0..self.agent_count() {
            let (start, len) = self.space.agent_block(agent);
            let obs = &obs_slices[agent];
            if obs.rows() != batch {
                return Err(Error::shape(
                    format!("{} rows", batch),
                    format!("{} rows", obs.rows()),
                ));
            }
            let oc = obs.cols();
            let mut input = Tensor::zeros(vec![batch, oc + len]);
            for r in 0..batch {
                let row = &mut input.data_mut()[r * (oc + len)..(r + 1) * (oc + len)];
                row[..oc].copy_from_slice(obs.row(r));
                row[oc..].copy_from_slice(&joint_noise.row(r)[start..start + len]);
            }
            let block = self.nets[agent].forward(&input)?;
            for r in 0..batch {
                out.data_mut()[r * total + start..r * total + start + len]
                    .copy_from_slice(block.row(r));
            }
        }
        Ok(out)
    }
}

/// Actor objective switches.
#[derive(Clone, Copy, Debug)]
pub struct ActorOptions {
    /// Include the value-maximization term (off = pure distillation).
    pub q_max: bool,
    /// Divide the value term by the gradient-blocked batch mean |Q_tot|.
    pub q_normalization: bool,
}

impl Default for ActorOptions {
    fn default() -> Self {
        ActorOptions {
            q_max: true,
            q_normalization: false,
        }
    }
}

/// Scalars reported by one actor update.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct DistillBatchResult {
    pub distill_loss: f64,
    pub q_term: f64,
    pub total_actor_loss: f64,
}

/// Mean over the batch of the summed per-agent squared distillation
/// residuals against the shared-noise flow targets.
pub fn distill_loss(
    policies: &OneStepPolicySet,
    flow: &JointFlowPolicy,
    obs: &Tensor,
    rng: &mut impl Rng,
) -> Result<f64> {
    let noise = flow.noise_spec().sample(obs.rows(), rng);
    let obs_slices = split_obs(obs, &policies.obs_dims)?;
    distill_loss_value(policies, flow, &obs_slices, obs, &noise)
}

/// Deterministic distillation loss for a fixed shared noise draw.
pub fn distill_loss_value(
    policies: &OneStepPolicySet,
    flow: &JointFlowPolicy,
    obs_slices: &[Tensor],
    joint_obs: &Tensor,
    shared_noise: &Tensor,
) -> Result<f64> {
    let target = flow.euler_sample(joint_obs, shared_noise, None)?;
    let student = policies.forward_joint(obs_slices, shared_noise)?;
    let b = joint_obs.rows() as f64;
    let mut total = 0.0;
    for (s, t) in student.data().iter().zip(target.data()) {
        let d = s - t;
        total += d * d;
    }
    Ok(total / b)
}

/// Inputs of one actor update, drawn once.
pub struct ActorBatch {
    pub obs_slices: Vec<Tensor>,
    pub joint_obs: Tensor,
    pub shared_noise: Tensor,
    pub flow_target: Tensor,
}

pub fn sample_actor_batch(
    flow: &JointFlowPolicy,
    obs: &Tensor,
    obs_dims: &[usize],
    rng: &mut impl Rng,
) -> Result<ActorBatch> {
    let shared_noise = flow.noise_spec().sample(obs.rows(), rng);
    let flow_target = flow.euler_sample(obs, &shared_noise, None)?;
    Ok(ActorBatch {
        obs_slices: split_obs(obs, obs_dims)?,
        joint_obs: obs.clone(),
        shared_noise,
        flow_target,
    })
}

/// Split a joint observation matrix into per-agent blocks.
pub fn split_obs(obs: &Tensor, obs_dims: &[usize]) -> Result<Vec<Tensor>> {
    let total: usize = obs_dims.iter().sum();
    if obs.cols() != total {
        return Err(Error::shape(
            format!("joint obs dim {}", total),
            format!("joint obs dim {}", obs.cols()),
        ));
    }
    let batch = obs.rows();
    let mut out = Vec::with_capacity(obs_dims.len());
    let mut start = 0;
    for &d in obs_dims {
        let mut t = Tensor::zeros(vec![batch, d]);
        for r in 0..batch {
            t.data_mut()[r * d..(r + 1) * d].copy_from_slice(&obs.row(r)[start..start + d]);
        }
        out.push(t);
        start += d;
    }
    Ok(out)
}

/// Per-agent gradients of the full actor objective
/// `-q_term + alpha * distill_loss`, with the critic and the flow target
/// gradient-blocked. Returns the gradients in agent order plus the scalars.
///
/// Continuous agents reparameterize the action through the critic; discrete
/// agents maximize the expected mixed value under their softmax.
pub fn actor_loss_grads(
    policies: &OneStepPolicySet,
    critics: &CriticEnsemble,
    batch: &ActorBatch,
    opts: ActorOptions,
) -> Result<(Vec<Vec<Tensor>>, DistillBatchResult)> {
    let n_agents = policies.agent_count();
    let b = batch.joint_obs.rows();
    let alpha = policies.alpha;

    // Gradient-blocked normalizer: batch mean |Q_tot| under the current
    // factored actions.
    let q_denom = if opts.q_max && opts.q_normalization {
        let student = policies.forward_joint(&batch.obs_slices, &batch.shared_noise)?;
        let act_slices = split_joint_action(&student, &policies.space)?;
        let q = critics.q_tot(&batch.obs_slices, &act_slices)?;
        let mean_abs = q.iter().map(|v| v.abs()).sum::<f64>() / b as f64;
        mean_abs.max(1e-6)
    } else {
        1.0
    };

    let mut grads = Vec::with_capacity(n_agents);
    let mut distill_total = 0.0;
    let mut q_total = 0.0;

    for agent in 0..n_agents {
        let (start, len) = policies.space.agent_block(agent);
        let obs_i = &batch.obs_slices[agent];
        let oc = obs_i.cols();

        // concat(o_i, z_i) input
        let mut input = Tensor::zeros(vec![b, oc + len]);
        for r in 0..b {
            let row = &mut input.data_mut()[r * (oc + len)..(r + 1) * (oc + len)];
            row[..oc].copy_from_slice(obs_i.row(r));
            row[oc..].copy_from_slice(&batch.shared_noise.row(r)[start..start + len]);
        }
        // flow target block for this agent
        let mut target = Tensor::zeros(vec![b, len]);
        for r in 0..b {
            target
                .data_mut()[r * len..(r + 1) * len]
                .copy_from_slice(&batch.flow_target.row(r)[start..start + len]);
        }

        let mut tape = Tape::new();
        let nodes = policies.nets[agent].insert_on_tape(&mut tape, true);
        let x = tape.constant(input);
        let out = nodes.forward(&mut tape, x)?;

        let tgt = tape.constant(target);
        let distill_sq = tape.squared_error(out, tgt)?;
        let distill_i = tape.scale(distill_sq, 1.0 / b as f64);

        let q_term_i = if !opts.q_max {
            None
        } else {
            Some(match &policies.space {
            ActionSpace::Continuous { .. } => {
                // Q_i(o_i, a_i) with a_i = net output, critic params frozen.
                let obs_node = tape.constant(obs_i.clone());
                let qin = tape.concat_cols(&[obs_node, out])?;
                let q1n = critics.agents[agent].q1.insert_on_tape(&mut tape, false);
                let q2n = critics.agents[agent].q2.insert_on_tape(&mut tape, false);
                let q1 = q1n.forward(&mut tape, qin)?;
                let q2 = q2n.forward(&mut tape, qin)?;
                let q = match critics.reduction {
                    crate::critic::TwinReduction::Mean => {
                        let s = tape.add(q1, q2)?;
                        tape.scale(s, 0.5)
                    }
                    crate::critic::TwinReduction::Min => tape.min_elem(q1, q2)?,
                };
                tape.mean_all(q)
            }
            ActionSpace::Discrete { cardinalities } => {
                // Expected Q under the per-agent softmax; the per-action Q
                // values are constants on the tape.
                let k = cardinalities[agent];
                let mut qvals = Tensor::zeros(vec![b, k]);
                for a_idx in 0..k {
                    let mut onehot = Tensor::zeros(vec![b, k]);
                    for r in 0..b {
                        onehot.data_mut()[r * k + a_idx] = 1.0;
                    }
                    let q = critics.q_value(agent, obs_i, &onehot)?;
                    for r in 0..b {
                        qvals.data_mut()[r * k + a_idx] = q[r];
                    }
                }
                let probs = tape.softmax_rows(out)?;
                let qconst = tape.constant(qvals);
                let weighted = tape.mul(probs, qconst)?;
                let s = tape.sum_all(weighted);
                tape.scale(s, 1.0 / b as f64)
            }
            })
        };

        // loss_i = -(1/I) * q_i / denom + alpha * distill_i
        let dn = tape.scale(distill_i, alpha);
        let loss_i = match q_term_i {
            Some(q) => {
                let qn = tape.scale(q, -1.0 / (n_agents as f64 * q_denom));
                tape.add(qn, dn)?
            }
            None => dn,
        };
        let distill_val = tape.value(distill_i).item();
        let q_val = q_term_i.map(|q| tape.value(q).item()).unwrap_or(0.0);
        if !tape.value(loss_i).item().is_finite() {
            return Err(Error::NonFinite("actor loss".into()));
        }
        tape.backward(loss_i)?;
        grads.push(policies.nets[agent].grads_from_tape(&tape, &nodes));
        distill_total += distill_val;
        q_total += q_val / n_agents as f64;
    }

    let q_term = q_total / q_denom;
    let total_actor_loss = -q_term + alpha * distill_total;
    Ok((
        grads,
        DistillBatchResult {
            distill_loss: distill_total,
            q_term,
            total_actor_loss,
        },
    ))
}

/// Split a joint action matrix into per-agent blocks.
pub fn split_joint_action(joint: &Tensor, space: &ActionSpace) -> Result<Vec<Tensor>> {
    let batch = joint.rows();
    let mut out = Vec::with_capacity(space.agent_count());
    for agent in 0..space.agent_count() {
        let (start, len) = space.agent_block(agent);
        let mut t = Tensor::zeros(vec![batch, len]);
        for r in 0..batch {
            t.data_mut()[r * len..(r + 1) * len]
                .copy_from_slice(&joint.row(r)[start..start + len]);
        }
        out.push(t);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Prop1Report {
    pub w2_exact: f64,
    pub coupling_rms: f64,
    pub holds: bool,
}

/// Exact empirical W2 between the two policies' push-forwards at a fixed
/// joint observation versus the shared-noise coupling estimate.
///
/// W2 uses two independent noise sets; the coupling RMS uses a third,
/// shared draw. `holds` applies the finite-sample slack `tol`.
pub fn verify_prop1(
    policies: &OneStepPolicySet,
    flow: &JointFlowPolicy,
    joint_obs: &[f64],
    samples: usize,
    tol: f64,
    rng: &mut impl Rng,
) -> Result<Prop1Report> {
    if samples > MAX_VERIFY_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "sample count {} exceeds exact-OT cap {}",
            samples, MAX_VERIFY_SAMPLES
        )));
    }
    let obs = tile_obs(joint_obs, samples)?;
    let obs_slices = split_obs(&obs, &policies.obs_dims)?;
    let spec = flow.noise_spec();

    let z_fact = spec.sample(samples, rng);
    let factored = policies.forward_joint(&obs_slices, &z_fact)?;
    let z_flow = spec.sample(samples, rng);
    let joint = flow.euler_sample(&obs, &z_flow, None)?;
    let w2 = metrics::w2_exact(
        &metrics::EmpiricalDistribution::new(factored)?,
        &metrics::EmpiricalDistribution::new(joint)?,
    )?;

    let coupling_rms = coupling_rms(policies, flow, &obs, &obs_slices, samples, rng)?;
    Ok(Prop1Report {
        w2_exact: w2,
        coupling_rms,
        holds: w2 <= coupling_rms * (1.0 + tol),
    })
}

/// sqrt(mean over shared z of the squared joint action mismatch).
pub fn coupling_rms(
    policies: &OneStepPolicySet,
    flow: &JointFlowPolicy,
    obs: &Tensor,
    obs_slices: &[Tensor],
    samples: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    let z = flow.noise_spec().sample(samples, rng);
    let a_w = policies.forward_joint(obs_slices, &z)?;
    let a_phi = flow.euler_sample(obs, &z, None)?;
    let mut total = 0.0;
    for (x, y) in a_w.data().iter().zip(a_phi.data()) {
        let d = x - y;
        total += d * d;
    }
    Ok((total / samples as f64).sqrt())
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Prop2Report {
    pub value_gap: f64,
    pub l_hat: f64,
    pub coupling_rms: f64,
    pub bound: f64,
    pub holds: bool,
}

/// Value-gap bound at a fixed joint observation: the Monte-Carlo gap in
/// mixed value between the factored and joint policies must stay below the
/// sampled Lipschitz slope times the coupling RMS.
///
/// The gap and the coupling share one noise draw, and that draw's coupled
/// action pairs are included in the Lipschitz pair stream, so the bound is
/// checked deterministically rather than statistically.
pub fn verify_prop2(
    policies: &OneStepPolicySet,
    flow: &JointFlowPolicy,
    critics: &CriticEnsemble,
    joint_obs: &[f64],
    samples: usize,
    lipschitz_pairs: usize,
    tol: f64,
    rng: &mut impl Rng,
) -> Result<Prop2Report> {
    if samples > MAX_VERIFY_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "sample count {} exceeds exact-OT cap {}",
            samples, MAX_VERIFY_SAMPLES
        )));
    }
    let obs = tile_obs(joint_obs, samples)?;
    let obs_slices = split_obs(&obs, &policies.obs_dims)?;
    let single_obs_slices = split_obs(&tile_obs(joint_obs, 1)?, &policies.obs_dims)?;
    let spec = flow.noise_spec();

    // Shared draw for both the gap and the coupling RMS.
    let z = spec.sample(samples, rng);
    let a_w = policies.forward_joint(&obs_slices, &z)?;
    let a_phi = flow.euler_sample(&obs, &z, None)?;

    let q_w = critics.q_tot(&obs_slices, &split_joint_action(&a_w, &policies.space)?)?;
    let q_phi = critics.q_tot(&obs_slices, &split_joint_action(&a_phi, &policies.space)?)?;
    let value_gap = (mean(&q_w) - mean(&q_phi)).abs();

    let mut sq_total = 0.0;
    for (x, y) in a_w.data().iter().zip(a_phi.data()) {
        let d = x - y;
        sq_total += d * d;
    }
    let coupling = (sq_total / samples as f64).sqrt();

    // Pair stream: first the coupled pairs from the shared draw, then fresh
    // independent draws from the two policies.
    let blocks: Vec<(usize, usize)> = (0..policies.agent_count())
        .map(|i| policies.space.agent_block(i))
        .collect();
    let mut idx = 0usize;
    let mut extra_pairs: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    if lipschitz_pairs > samples {
        let n_extra = lipschitz_pairs - samples;
        let z_a = spec.sample(n_extra, rng);
        let z_b = spec.sample(n_extra, rng);
        let obs_extra = tile_obs(joint_obs, n_extra)?;
        let obs_slices_extra = split_obs(&obs_extra, &policies.obs_dims)?;
        let from_w = policies.forward_joint(&obs_slices_extra, &z_a)?;
        let from_phi = flow.euler_sample(&obs_extra, &z_b, None)?;
        for r in 0..n_extra {
            extra_pairs.push((from_w.row(r).to_vec(), from_phi.row(r).to_vec()));
        }
    }
    let l_hat = crate::critic::estimate_lipschitz(
        critics,
        &single_obs_slices,
        lipschitz_pairs,
        || {
            let pair = if idx < samples {
                (a_w.row(idx).to_vec(), a_phi.row(idx).to_vec())
            } else {
                extra_pairs[idx - samples].clone()
            };
            idx += 1;
            pair
        },
        &blocks,
    )?;

    let bound = l_hat * coupling;
    Ok(Prop2Report {
        value_gap,
        l_hat,
        coupling_rms: coupling,
        bound,
        holds: value_gap <= bound * (1.0 + tol),
    })
}

/// Everything the per-checkpoint bound check measures.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct BoundsReport {
    pub w2_exact: f64,
    pub coupling_rms: f64,
    pub l_hat: f64,
    pub value_gap: f64,
    pub bound: f64,
    pub w2_holds: bool,
    pub gap_holds: bool,
}

/// Combined per-checkpoint verification at a fixed joint observation.
///
/// One shared noise draw feeds the coupling RMS and the value gap (its
/// coupled action pairs lead the Lipschitz pair stream); two further
/// independent draws feed the exact empirical W2.
#[allow(clippy::too_many_arguments)]
pub fn verify_bounds(
    policies: &OneStepPolicySet,
    flow: &JointFlowPolicy,
    critics: &CriticEnsemble,
    joint_obs: &[f64],
    samples: usize,
    lipschitz_pairs: usize,
    tol: f64,
    rng: &mut impl Rng,
) -> Result<BoundsReport> {
    if samples > MAX_VERIFY_SAMPLES {
        return Err(Error::InvalidArgument(format!(
            "sample count {} exceeds exact-OT cap {}",
            samples, MAX_VERIFY_SAMPLES
        )));
    }
    let obs = tile_obs(joint_obs, samples)?;
    let obs_slices = split_obs(&obs, &policies.obs_dims)?;
    let single_obs_slices = split_obs(&tile_obs(joint_obs, 1)?, &policies.obs_dims)?;
    let spec = flow.noise_spec();

    // Shared draw: coupling RMS and value gap.
    let z = spec.sample(samples, rng);
    let a_w = policies.forward_joint(&obs_slices, &z)?;
    let a_phi = flow.euler_sample(&obs, &z, None)?;
    let mut sq_total = 0.0;
    for (x, y) in a_w.data().iter().zip(a_phi.data()) {
        let d = x - y;
        sq_total += d * d;
    }
    let coupling = (sq_total / samples as f64).sqrt();
    let q_w = critics.q_tot(&obs_slices, &split_joint_action(&a_w, &policies.space)?)?;
    let q_phi = critics.q_tot(&obs_slices, &split_joint_action(&a_phi, &policies.space)?)?;
    let value_gap = (mean(&q_w) - mean(&q_phi)).abs();

    // Independent draws: exact empirical W2.
    let z_fact = spec.sample(samples, rng);
    let factored = policies.forward_joint(&obs_slices, &z_fact)?;
    let z_flow = spec.sample(samples, rng);
    let joint = flow.euler_sample(&obs, &z_flow, None)?;
    let w2 = metrics::w2_exact(
        &metrics::EmpiricalDistribution::new(factored)?,
        &metrics::EmpiricalDistribution::new(joint)?,
    )?;

    // Lipschitz pair stream: coupled pairs first, then fresh cross pairs.
    let blocks: Vec<(usize, usize)> = (0..policies.agent_count())
        .map(|i| policies.space.agent_block(i))
        .collect();
    let mut extra_pairs: Vec<(Vec<f64>, Vec<f64>)> = Vec::new();
    if lipschitz_pairs > samples {
        let n_extra = lipschitz_pairs - samples;
        let z_a = spec.sample(n_extra, rng);
        let z_b = spec.sample(n_extra, rng);
        let obs_extra = tile_obs(joint_obs, n_extra)?;
        let obs_slices_extra = split_obs(&obs_extra, &policies.obs_dims)?;
        let from_w = policies.forward_joint(&obs_slices_extra, &z_a)?;
        let from_phi = flow.euler_sample(&obs_extra, &z_b, None)?;
        for r in 0..n_extra {
            extra_pairs.push((from_w.row(r).to_vec(), from_phi.row(r).to_vec()));
        }
    }
    let mut idx = 0usize;
    let l_hat = crate::critic::estimate_lipschitz(
        critics,
        &single_obs_slices,
        lipschitz_pairs.max(samples),
        || {
            let pair = if idx < samples {
                (a_w.row(idx).to_vec(), a_phi.row(idx).to_vec())
            } else {
                extra_pairs[idx - samples].clone()
            };
            idx += 1;
            pair
        },
        &blocks,
    )?;
    let bound = l_hat * coupling;
    Ok(BoundsReport {
        w2_exact: w2,
        coupling_rms: coupling,
        l_hat,
        value_gap,
        bound,
        w2_holds: w2 <= coupling * (1.0 + tol),
        gap_holds: value_gap <= bound * (1.0 + tol),
    })
}

fn tile_obs(joint_obs: &[f64], rows: usize) -> Result<Tensor> {
    let mut t = Tensor::zeros(vec![rows, joint_obs.len()]);
    for r in 0..rows {
        t.data_mut()[r * joint_obs.len()..(r + 1) * joint_obs.len()].copy_from_slice(joint_obs);
    }
    Ok(t)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}
