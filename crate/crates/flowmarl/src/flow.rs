//! Flow-matching joint behavior cloning: the velocity field v(t, o, x),
//! the linear-interpolation flow loss, and the fixed-step Euler sampler.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::nn::{self, MlpParams};
use crate::rng;
use crate::tensor::{self, Tensor};

/// Per-agent action layout. Discrete actions are one-hot embedded, so each
/// agent's block width is its cardinality.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ActionSpace {
    Continuous { dims: Vec<usize> },
    Discrete { cardinalities: Vec<usize> },
}

impl ActionSpace {
    pub fn agent_count(&self) -> usize {
        match self {
            ActionSpace::Continuous { dims } => dims.len(),
            ActionSpace::Discrete { cardinalities } => cardinalities.len(),
        }
    }

    /// Width of agent i's block in the joint action vector.
    pub fn agent_dim(&self, agent: usize) -> usize {
        match self {
            ActionSpace::Continuous { dims } => dims[agent],
            ActionSpace::Discrete { cardinalities } => cardinalities[agent],
        }
    }

    pub fn total_dim(&self) -> usize {
        (0..self.agent_count()).map(|i| self.agent_dim(i)).sum()
    }

    /// (start, len) of agent i's block in the joint action vector.
    pub fn agent_block(&self, agent: usize) -> (usize, usize) {
        let start: usize = (0..agent).map(|i| self.agent_dim(i)).sum();
        (start, self.agent_dim(agent))
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, ActionSpace::Discrete { .. })
    }
}

/// Joint noise distribution: one standard normal block per agent, with
/// block widths matching the action layout.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NoiseSpec {
    dims: Vec<usize>,
}

impl NoiseSpec {
    pub fn for_space(space: &ActionSpace) -> Self {
        NoiseSpec {
            dims: (0..space.agent_count()).map(|i| space.agent_dim(i)).collect(),
        }
    }

    pub fn total_dim(&self) -> usize {
        self.dims.iter().sum()
    }

    /// Draw a [batch, total_dim] matrix of joint noise.
    pub fn sample(&self, batch: usize, rng: &mut impl Rng) -> Tensor {
        let mut out = Tensor::zeros(vec![batch, self.total_dim()]);
        rng::fill_normal(rng, out.data_mut());
        out
    }
}

/// Counts network forward evaluations per decision.
#[derive(Clone, Copy, Debug, Default)]
pub struct NfeMeter {
    pub evals: u64,
}

impl NfeMeter {
    pub fn new() -> Self {
        NfeMeter::default()
    }
}

/// The joint flow policy: velocity net over concat(t, joint obs, joint x),
/// integrated with M fixed Euler steps.
#[derive(Clone, Debug)]
pub struct JointFlowPolicy {
    pub net: MlpParams,
    pub steps: usize,
    pub space: ActionSpace,
    pub obs_dims: Vec<usize>,
}

impl JointFlowPolicy {
    pub fn new(net: MlpParams, steps: usize, space: ActionSpace, obs_dims: Vec<usize>) -> Result<Self> {
        if steps == 0 {
            return Err(Error::InvalidArgument("flow step count must be >= 1".into()));
        }
        let obs_total: usize = obs_dims.iter().sum();
        let act_total = space.total_dim();
        let want_in = 1 + obs_total + act_total;
        if net.in_dim() != want_in {
            return Err(Error::shape(
                format!("velocity net input dim {}", want_in),
                format!("velocity net input dim {}", net.in_dim()),
            ));
        }
        if net.out_dim() != act_total {
            return Err(Error::shape(
                format!("velocity net output dim {}", act_total),
                format!("velocity net output dim {}", net.out_dim()),
            ));
        }
        if obs_dims.len() != space.agent_count() {
            return Err(Error::shape(
                format!("{} per-agent observation dims", space.agent_count()),
                format!("{}", obs_dims.len()),
            ));
        }
        Ok(JointFlowPolicy {
            net,
            steps,
            space,
            obs_dims,
        })
    }

    pub fn obs_total(&self) -> usize {
        self.obs_dims.iter().sum()
    }

    pub fn noise_spec(&self) -> NoiseSpec {
        NoiseSpec::for_space(&self.space)
    }

    /// v(t, o, x) for a batch; `t` is a per-row scalar column.
    fn velocity(&self, t: &Tensor, obs: &Tensor, x: &Tensor, meter: Option<&mut NfeMeter>) -> Result<Tensor> {
        let batch = obs.rows();
        let mut input = Tensor::zeros(vec![batch, self.net.in_dim()]);
        let oc = obs.cols();
        let xc = x.cols();
        for r in 0..batch {
            let row = &mut input.data_mut()[r * (1 + oc + xc)..(r + 1) * (1 + oc + xc)];
            row[0] = t.data()[r];
            row[1..1 + oc].copy_from_slice(obs.row(r));
            row[1 + oc..].copy_from_slice(x.row(r));
        }
        if let Some(m) = meter {
            m.evals += 1;
        }
        self.net.forward(&input)
    }

    /// Integrate the velocity field from the given noise with M Euler steps
    /// of size 1/M. Deterministic given the noise.
    pub fn euler_sample(&self, obs: &Tensor, noise: &Tensor, mut meter: Option<&mut NfeMeter>) -> Result<Tensor> {
        if noise.cols() != self.space.total_dim() {
            return Err(Error::shape(
                format!("noise dim {}", self.space.total_dim()),
                format!("noise dim {}", noise.cols()),
            ));
        }
        if obs.rows() != noise.rows() {
            return Err(Error::shape(
                format!("{} rows", obs.rows()),
                format!("{} rows", noise.rows()),
            ));
        }
        let batch = obs.rows();
        let d = 1.0 / self.steps as f64;
        let mut x = noise.clone();
        let mut t = 0.0;
        for _ in 0..self.steps {
            let t_col = Tensor::full(vec![batch, 1], t);
            let v = self.velocity(&t_col, obs, &x, meter.as_deref_mut())?;
            for (xv, vv) in x.data_mut().iter_mut().zip(v.data()) {
                *xv += vv * d;
            }
            t += d;
        }
        Ok(x)
    }

    /// Draw joint noise, integrate, and return both the action and the noise
    /// that produced it (the shared-noise coupling).
    pub fn sample_joint_action(
        &self,
        obs: &Tensor,
        rng: &mut impl Rng,
        meter: Option<&mut NfeMeter>,
    ) -> Result<(Tensor, Tensor)> {
        let noise = self.noise_spec().sample(obs.rows(), rng);
        let action = self.euler_sample(obs, &noise, meter)?;
        Ok((action, noise))
    }
}

/// Stochastic inputs of one flow-matching loss evaluation, drawn once so the
/// loss is a deterministic function of the parameters.
#[derive(Clone, Debug)]
pub struct FlowLossInputs {
    pub x0: Tensor, // [batch, act]
    pub t: Tensor,  // [batch, 1]
}

pub fn sample_flow_inputs(batch: usize, space: &ActionSpace, rng: &mut impl Rng) -> FlowLossInputs {
    let x0 = NoiseSpec::for_space(space).sample(batch, rng);
    let mut t = Tensor::zeros(vec![batch, 1]);
    for v in t.data_mut().iter_mut() {
        *v = rng::uniform(rng);
    }
    FlowLossInputs { x0, t }
}

fn interpolate(x0: &Tensor, actions: &Tensor, t: &Tensor) -> Result<Tensor> {
    if x0.shape() != actions.shape() {
        return Err(Error::shape(
            format!("{:?}", actions.shape()),
            format!("{:?}", x0.shape()),
        ));
    }
    let cols = x0.cols();
    let mut xt = x0.clone();
    for r in 0..x0.rows() {
        let tv = t.data()[r];
        let row = &mut xt.data_mut()[r * cols..(r + 1) * cols];
        let arow = actions.row(r);
        for (j, v) in row.iter_mut().enumerate() {
            *v = (1.0 - tv) * *v + tv * arow[j];
        }
    }
    Ok(xt)
}

/// Mean over the batch of the squared velocity-target residual along the
/// straight path from noise to actions. Actions must already be encoded
/// (one-hot for discrete agents).
pub fn flow_bc_loss(
    policy: &JointFlowPolicy,
    obs: &Tensor,
    actions: &Tensor,
    rng: &mut impl Rng,
) -> Result<f64> {
    let inputs = sample_flow_inputs(obs.rows(), &policy.space, rng);
    flow_bc_loss_value(policy, obs, actions, &inputs)
}

/// Deterministic loss for fixed stochastic inputs.
pub fn flow_bc_loss_value(
    policy: &JointFlowPolicy,
    obs: &Tensor,
    actions: &Tensor,
    inputs: &FlowLossInputs,
) -> Result<f64> {
    check_batch(policy, obs, actions)?;
    let xt = interpolate(&inputs.x0, actions, &inputs.t)?;
    let v = policy.velocity(&inputs.t, obs, &xt, None)?;
    let batch = obs.rows() as f64;
    let mut total = 0.0;
    for r in 0..obs.rows() {
        let vrow = v.row(r);
        let arow = actions.row(r);
        let x0row = inputs.x0.row(r);
        for j in 0..v.cols() {
            let resid = vrow[j] - (arow[j] - x0row[j]);
            total += resid * resid;
        }
    }
    Ok(total / batch)
}

/// Loss plus gradients for the velocity net, in canonical flat order.
pub fn flow_bc_loss_grad(
    policy: &JointFlowPolicy,
    obs: &Tensor,
    actions: &Tensor,
    inputs: &FlowLossInputs,
) -> Result<(f64, Vec<Tensor>)> {
    check_batch(policy, obs, actions)?;
    let xt = interpolate(&inputs.x0, actions, &inputs.t)?;
    let batch = obs.rows();
    let mut net_input = Tensor::zeros(vec![batch, policy.net.in_dim()]);
    let oc = obs.cols();
    let xc = xt.cols();
    for r in 0..batch {
        let row = &mut net_input.data_mut()[r * (1 + oc + xc)..(r + 1) * (1 + oc + xc)];
        row[0] = inputs.t.data()[r];
        row[1..1 + oc].copy_from_slice(obs.row(r));
        row[1 + oc..].copy_from_slice(xt.row(r));
    }
    let target = tensor::zip(actions, &inputs.x0, |a, x0| a - x0)?;
    nn::grad(&policy.net, |tape: &mut Tape, nodes| {
        let input = tape.constant(net_input.clone());
        let v = nodes.forward(tape, input)?;
        let tgt = tape.constant(target.clone());
        let sq = tape.squared_error(v, tgt)?;
        Ok(tape.scale(sq, 1.0 / batch as f64))
    })
}

fn check_batch(policy: &JointFlowPolicy, obs: &Tensor, actions: &Tensor) -> Result<()> {
    if obs.rows() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if obs.cols() != policy.obs_total() {
        return Err(Error::shape(
            format!("joint obs dim {}", policy.obs_total()),
            format!("joint obs dim {}", obs.cols()),
        ));
    }
    if actions.cols() != policy.space.total_dim() || actions.rows() != obs.rows() {
        return Err(Error::shape(
            format!("actions [{}, {}]", obs.rows(), policy.space.total_dim()),
            format!("actions {:?}", actions.shape()),
        ));
    }
    Ok(())
}

/// Decode a joint continuous action vector into per-agent action indices.
///
/// Temperature 0 takes the argmax of each agent's block (lowest index wins
/// ties); positive temperatures sample from softmax(block / temperature).
/// A legal-action mask, when given, is applied before either rule.
pub fn decode_discrete(
    joint_action: &[f64],
    space: &ActionSpace,
    temperature: f64,
    mask: Option<&[Vec<bool>]>,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let cardinalities = match space {
        ActionSpace::Discrete { cardinalities } => cardinalities,
        ActionSpace::Continuous { .. } => {
            return Err(Error::InvalidArgument(
                "decode_discrete requires a discrete action space".into(),
            ))
        }
    };
    if joint_action.len() != space.total_dim() {
        return Err(Error::shape(
            format!("joint action dim {}", space.total_dim()),
            format!("joint action dim {}", joint_action.len()),
        ));
    }
    let mut out = Vec::with_capacity(cardinalities.len());
    for agent in 0..cardinalities.len() {
        let (start, len) = space.agent_block(agent);
        let block = &joint_action[start..start + len];
        let legal: Vec<bool> = match mask {
            Some(m) => {
                if m[agent].len() != len {
                    return Err(Error::shape(
                        format!("mask of length {}", len),
                        format!("mask of length {}", m[agent].len()),
                    ));
                }
                m[agent].clone()
            }
            None => vec![true; len],
        };
        if !legal.iter().any(|&l| l) {
            return Err(Error::InvalidArgument(format!(
                "agent {}: all actions masked illegal",
                agent
            )));
        }
        if temperature <= 0.0 {
            let mut best = None;
            for (k, &v) in block.iter().enumerate() {
                if !legal[k] {
                    continue;
                }
                match best {
                    None => best = Some((k, v)),
                    Some((_, bv)) if v > bv => best = Some((k, v)),
                    _ => {}
                }
            }
            out.push(best.expect("at least one legal action").0);
        } else {
            let mx = block
                .iter()
                .zip(&legal)
                .filter(|(_, &l)| l)
                .map(|(&v, _)| v / temperature)
                .fold(f64::NEG_INFINITY, f64::max);
            let weights: Vec<f64> = block
                .iter()
                .zip(&legal)
                .map(|(&v, &l)| if l { (v / temperature - mx).exp() } else { 0.0 })
                .collect();
            let z: f64 = weights.iter().sum();
            let mut u = rng::uniform(rng) * z;
            let mut chosen = len - 1;
            for (k, &w) in weights.iter().enumerate() {
                if u < w {
                    chosen = k;
                    break;
                }
                u -= w;
            }
            // Guard against rounding pushing u past the last positive weight.
            while !legal[chosen] {
                chosen -= 1;
            }
            out.push(chosen);
        }
    }
    Ok(out)
}

/// One-hot encode per-agent action indices into the joint action vector.
pub fn encode_discrete(indices: &[usize], space: &ActionSpace) -> Result<Vec<f64>> {
    let cardinalities = match space {
        ActionSpace::Discrete { cardinalities } => cardinalities,
        ActionSpace::Continuous { .. } => {
            return Err(Error::InvalidArgument(
                "encode_discrete requires a discrete action space".into(),
            ))
        }
    };
    if indices.len() != cardinalities.len() {
        return Err(Error::shape(
            format!("{} agent indices", cardinalities.len()),
            format!("{}", indices.len()),
        ));
    }
    let mut out = vec![0.0; space.total_dim()];
    for (agent, &idx) in indices.iter().enumerate() {
        if idx >= cardinalities[agent] {
            return Err(Error::InvalidArgument(format!(
                "agent {}: action index {} out of range {}",
                agent, idx, cardinalities[agent]
            )));
        }
        let (start, _) = space.agent_block(agent);
        out[start + idx] = 1.0;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{MlpParams, MlpSpec};
    use crate::rng::SeedStreams;

    fn continuous_policy(steps: usize) -> JointFlowPolicy {
        // 2 agents, 1-d actions, 1-d observations each.
        let space = ActionSpace::Continuous { dims: vec![1, 1] };
        let spec = MlpSpec::new(1 + 2 + 2, &[8], 2, false);
        let mut rng = SeedStreams::new(5).stream(0);
        let net = MlpParams::init(spec, &mut rng);
        JointFlowPolicy::new(net, steps, space, vec![1, 1]).unwrap()
    }

    #[test]
    fn zero_velocity_returns_noise() {
        let mut p = continuous_policy(10);
        p.net = MlpParams::zeros(p.net.spec().clone());
        let obs = Tensor::new(vec![1, 2], vec![0.3, -0.7]).unwrap();
        let noise = Tensor::new(vec![1, 2], vec![1.5, -2.5]).unwrap();
        let out = p.euler_sample(&obs, &noise, None).unwrap();
        assert_eq!(out.data(), noise.data());
    }

    #[test]
    fn constant_velocity_is_exact_for_any_step_count() {
        // v = c realized by a bias-only linear net that ignores its input.
        let space = ActionSpace::Continuous { dims: vec![2] };
        let spec = MlpSpec::new(1 + 1 + 2, &[], 2, false);
        let mut net = MlpParams::zeros(spec);
        net.layer_mut(0).b.data_mut().copy_from_slice(&[0.5, -1.0]);
        for steps in [1, 3, 10] {
            let p = JointFlowPolicy::new(net.clone(), steps, space.clone(), vec![1]).unwrap();
            let obs = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
            let noise = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
            let out = p.euler_sample(&obs, &noise, None).unwrap();
            assert!((out.data()[0] - 1.5).abs() < 1e-12);
            assert!((out.data()[1] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn euler_two_steps_match_hand_recursion() {
        // v(t, x) = x via an identity weight on the x input column.
        let space = ActionSpace::Continuous { dims: vec![1] };
        let spec = MlpSpec::new(1 + 1 + 1, &[], 1, false);
        let mut net = MlpParams::zeros(spec);
        // input columns: [t, o, x]; select x
        net.layer_mut(0).w.data_mut()[2] = 1.0;
        let p = JointFlowPolicy::new(net, 2, space, vec![1]).unwrap();
        let obs = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        let noise = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let out = p.euler_sample(&obs, &noise, None).unwrap();
        // step1: 1 + 0.5*1 = 1.5; step2: 1.5 + 0.5*1.5 = 2.25
        assert!((out.data()[0] - 2.25).abs() < 1e-12);
    }

    #[test]
    fn single_step_is_noise_plus_initial_velocity() {
        let p = continuous_policy(1);
        let obs = Tensor::new(vec![1, 2], vec![0.1, 0.2]).unwrap();
        let noise = Tensor::new(vec![1, 2], vec![-0.4, 0.9]).unwrap();
        let t0 = Tensor::full(vec![1, 1], 0.0);
        let v0 = p.velocity(&t0, &obs, &noise, None).unwrap();
        let out = p.euler_sample(&obs, &noise, None).unwrap();
        for j in 0..2 {
            assert!((out.data()[j] - (noise.data()[j] + v0.data()[j])).abs() < 1e-12);
        }
    }

    #[test]
    fn sample_joint_action_is_reproducible() {
        let p = continuous_policy(4);
        let obs = Tensor::new(vec![1, 2], vec![0.3, -0.1]).unwrap();
        let s = SeedStreams::new(9);
        let (a1, z1) = p.sample_joint_action(&obs, &mut s.stream(1), None).unwrap();
        let (a2, z2) = p.sample_joint_action(&obs, &mut s.stream(1), None).unwrap();
        assert_eq!(a1.data(), a2.data());
        assert_eq!(z1.data(), z2.data());
    }

    #[test]
    fn flow_loss_on_fixed_inputs_matches_straight_line_oracle() {
        let p = continuous_policy(10);
        let s = SeedStreams::new(21);
        let batch = 5;
        let obs = {
            let mut r = s.stream(2);
            let mut t = Tensor::zeros(vec![batch, 2]);
            rng::fill_normal(&mut r, t.data_mut());
            t
        };
        let actions = {
            let mut r = s.stream(3);
            let mut t = Tensor::zeros(vec![batch, 2]);
            rng::fill_normal(&mut r, t.data_mut());
            t
        };
        let inputs = sample_flow_inputs(batch, &p.space, &mut s.stream(4));
        let loss = flow_bc_loss_value(&p, &obs, &actions, &inputs).unwrap();

        // Independent recomputation of the interpolation + MSE pipeline.
        let mut expect = 0.0;
        for r in 0..batch {
            let tv = inputs.t.data()[r];
            let mut xt = vec![0.0; 2];
            for j in 0..2 {
                xt[j] = (1.0 - tv) * inputs.x0.row(r)[j] + tv * actions.row(r)[j];
            }
            let mut input = vec![tv];
            input.extend_from_slice(obs.row(r));
            input.extend_from_slice(&xt);
            let v = p
                .net
                .forward(&Tensor::new(vec![1, 5], input).unwrap())
                .unwrap();
            for j in 0..2 {
                let resid = v.data()[j] - (actions.row(r)[j] - inputs.x0.row(r)[j]);
                expect += resid * resid;
            }
        }
        expect /= batch as f64;
        assert!((loss - expect).abs() < 1e-12, "{} vs {}", loss, expect);
    }

    #[test]
    fn perfect_velocity_net_gives_zero_loss() {
        // Single sample: net output u, target w = a - x0, loss |u - w|^2.
        // With u forced equal to w the loss vanishes.
        let space = ActionSpace::Continuous { dims: vec![1] };
        let spec = MlpSpec::new(3, &[], 1, false);
        let mut net = MlpParams::zeros(spec);
        net.layer_mut(0).b.data_mut()[0] = 0.25; // u = 0.25 everywhere
        let p = JointFlowPolicy::new(net, 1, space, vec![1]).unwrap();
        let obs = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        let actions = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let inputs = FlowLossInputs {
            x0: Tensor::new(vec![1, 1], vec![0.75]).unwrap(),
            t: Tensor::new(vec![1, 1], vec![0.4]).unwrap(),
        };
        // target = 1.0 - 0.75 = 0.25 = u
        let loss = flow_bc_loss_value(&p, &obs, &actions, &inputs).unwrap();
        assert!(loss.abs() < 1e-15);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let p = continuous_policy(2);
        let obs = Tensor::zeros(vec![0, 2]);
        let actions = Tensor::zeros(vec![0, 2]);
        let mut r = SeedStreams::new(1).stream(0);
        assert!(flow_bc_loss(&p, &obs, &actions, &mut r).is_err());
    }

    #[test]
    fn decode_argmax_and_mask() {
        let space = ActionSpace::Discrete { cardinalities: vec![3] };
        let mut r = SeedStreams::new(2).stream(0);
        let idx = decode_discrete(&[0.1, 2.0, -1.0], &space, 0.0, None, &mut r).unwrap();
        assert_eq!(idx, vec![1]);
        let mask = vec![vec![true, false, true]];
        let idx = decode_discrete(&[0.1, 2.0, -1.0], &space, 0.0, Some(&mask), &mut r).unwrap();
        assert_eq!(idx, vec![0]);
        let all_illegal = vec![vec![false, false, false]];
        assert!(decode_discrete(&[0.1, 2.0, -1.0], &space, 0.0, Some(&all_illegal), &mut r).is_err());
    }

    #[test]
    fn decode_uniform_block_samples_evenly() {
        let space = ActionSpace::Discrete { cardinalities: vec![3] };
        let mut r = SeedStreams::new(7).stream(1);
        let mut counts = [0usize; 3];
        let draws = 10_000;
        for _ in 0..draws {
            let idx = decode_discrete(&[0.5, 0.5, 0.5], &space, 1.0, None, &mut r).unwrap();
            counts[idx[0]] += 1;
        }
        for &c in &counts {
            let p = c as f64 / draws as f64;
            assert!((p - 1.0 / 3.0).abs() < 0.03, "p = {}", p);
        }
    }

    #[test]
    fn one_hot_encode_round_trip() {
        let space = ActionSpace::Discrete { cardinalities: vec![2, 3] };
        let joint = encode_discrete(&[1, 2], &space).unwrap();
        assert_eq!(joint, vec![0.0, 1.0, 0.0, 0.0, 1.0]);
        let mut r = SeedStreams::new(2).stream(0);
        let back = decode_discrete(&joint, &space, 0.0, None, &mut r).unwrap();
        assert_eq!(back, vec![1, 2]);
    }
}
