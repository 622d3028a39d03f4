//! Exact small-sample optimal transport, histogram mutual information,
//! return evaluation, and the value-gap estimator.

use std::collections::BTreeMap;

use rand::Rng;

use crate::assignment::{min_cost_assignment, MAX_ASSIGNMENT_N};
use crate::critic::CriticEnsemble;
use crate::dataset::OfflineDataset;
use crate::distill::{split_joint_action, split_obs, OneStepPolicySet};
use crate::env::DidacticEnv;
use crate::error::{Error, Result};
use crate::flow::{decode_discrete, JointFlowPolicy};
use crate::tensor::Tensor;

/// Equal-weight empirical distribution: n samples of dimension d.
#[derive(Clone, Debug)]
pub struct EmpiricalDistribution {
    samples: Tensor, // [n, d]
}

impl EmpiricalDistribution {
    pub fn new(samples: Tensor) -> Result<Self> {
        if samples.rows() == 0 {
            return Err(Error::InvalidArgument("empirical distribution needs n >= 1".into()));
        }
        if !samples.all_finite() {
            return Err(Error::NonFinite("empirical distribution samples".into()));
        }
        Ok(EmpiricalDistribution { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dim(&self) -> usize {
        self.samples.cols()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        self.samples.row(i)
    }
}

/// Exact 2-Wasserstein distance between equal-size empirical distributions:
/// sqrt of the minimum mean squared-Euclidean matching cost.
pub fn w2_exact(p: &EmpiricalDistribution, q: &EmpiricalDistribution) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::InvalidArgument(format!(
            "equal-weight empirical OT needs equal sample counts, got {} vs {}",
            p.len(),
            q.len()
        )));
    }
    if p.dim() != q.dim() {
        return Err(Error::shape(
            format!("dimension {}", p.dim()),
            format!("dimension {}", q.dim()),
        ));
    }
    let n = p.len();
    if n > MAX_ASSIGNMENT_N {
        return Err(Error::InvalidArgument(format!(
            "sample count {} exceeds exact-OT cap {}",
            n, MAX_ASSIGNMENT_N
        )));
    }
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        let a = p.sample(i);
        for j in 0..n {
            let b = q.sample(j);
            let mut s = 0.0;
            for (x, y) in a.iter().zip(b.iter()) {
                let d = x - y;
                s += d * d;
            }
            cost[i * n + j] = s;
        }
    }
    let (_, total) = min_cost_assignment(&cost, n)?;
    Ok((total / n as f64).sqrt())
}

fn bin_index(v: f64, lo: f64, hi: f64, bins: usize) -> usize {
    if hi <= lo {
        return 0;
    }
    let t = (v - lo) / (hi - lo);
    ((t * bins as f64) as usize).min(bins - 1)
}

/// Histogram plug-in mutual information (nats) between two continuous
/// vector variables, each binned on equal-width grids over its empirical
/// range with `bins` bins per dimension.
pub fn mi_continuous(a: &Tensor, b: &Tensor, bins: usize) -> Result<f64> {
    let n = a.rows();
    if n < 100 {
        return Err(Error::InvalidArgument(format!(
            "mutual information needs >= 100 samples, got {}",
            n
        )));
    }
    if bins < 2 {
        return Err(Error::InvalidArgument("mutual information needs >= 2 bins".into()));
    }
    if b.rows() != n {
        return Err(Error::shape(
            format!("{} rows", n),
            format!("{} rows", b.rows()),
        ));
    }
    let ranges = |t: &Tensor| -> Vec<(f64, f64)> {
        (0..t.cols())
            .map(|c| {
                let mut lo = f64::INFINITY;
                let mut hi = f64::NEG_INFINITY;
                for r in 0..n {
                    let v = t.row(r)[c];
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
                (lo, hi)
            })
            .collect()
    };
    let ra = ranges(a);
    let rb = ranges(b);
    let code = |t: &Tensor, ranges: &[(f64, f64)], r: usize| -> Vec<u32> {
        t.row(r)
            .iter()
            .zip(ranges)
            .map(|(&v, &(lo, hi))| bin_index(v, lo, hi, bins) as u32)
            .collect()
    };
    let xa: Vec<Vec<u32>> = (0..n).map(|r| code(a, &ra, r)).collect();
    let xb: Vec<Vec<u32>> = (0..n).map(|r| code(b, &rb, r)).collect();
    Ok(mi_from_codes(&xa, &xb))
}

/// Exact category counts for two discrete variables.
pub fn mi_discrete(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::shape(
            format!("{} samples", a.len()),
            format!("{} samples", b.len()),
        ));
    }
    if a.len() < 100 {
        return Err(Error::InvalidArgument(format!(
            "mutual information needs >= 100 samples, got {}",
            a.len()
        )));
    }
    let xa: Vec<Vec<u32>> = a.iter().map(|&v| vec![v as u32]).collect();
    let xb: Vec<Vec<u32>> = b.iter().map(|&v| vec![v as u32]).collect();
    Ok(mi_from_codes(&xa, &xb))
}

fn mi_from_codes(xa: &[Vec<u32>], xb: &[Vec<u32>]) -> f64 {
    let n = xa.len() as f64;
    let mut joint: BTreeMap<(Vec<u32>, Vec<u32>), usize> = BTreeMap::new();
    let mut ma: BTreeMap<Vec<u32>, usize> = BTreeMap::new();
    let mut mb: BTreeMap<Vec<u32>, usize> = BTreeMap::new();
    for (ca, cb) in xa.iter().zip(xb) {
        *joint.entry((ca.clone(), cb.clone())).or_insert(0) += 1;
        *ma.entry(ca.clone()).or_insert(0) += 1;
        *mb.entry(cb.clone()).or_insert(0) += 1;
    }
    let mut mi = 0.0;
    for ((ca, cb), &c) in &joint {
        let pxy = c as f64 / n;
        let px = ma[ca] as f64 / n;
        let py = mb[cb] as f64 / n;
        mi += pxy * (pxy / (px * py)).ln();
    }
    mi.max(0.0)
}

/// An actor that can be rolled out in a didactic environment.
pub enum PolicyActor<'a> {
    /// Joint flow with Euler sampling.
    Flow(&'a JointFlowPolicy),
    /// Decentralized one-step policies.
    OneStep(&'a OneStepPolicySet),
    /// Replays the dataset's recorded episodes (ignores the env dynamics).
    Replay(&'a OfflineDataset),
}

/// Undiscounted team return (summed across agents and timesteps), averaged
/// over episodes.
pub fn evaluate_return(
    actor: &PolicyActor,
    env: &DidacticEnv,
    episodes: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    if episodes == 0 {
        return Err(Error::InvalidArgument("episodes must be >= 1".into()));
    }
    if let PolicyActor::Replay(dataset) = actor {
        // Average recorded team return over dataset episodes, cycling if
        // more episodes are requested than recorded.
        let eps = dataset.episodes();
        let mut total = 0.0;
        for e in 0..episodes {
            let tr = &eps[e % eps.len()];
            total += tr
                .rewards
                .iter()
                .map(|per_agent| per_agent.iter().sum::<f64>())
                .sum::<f64>();
        }
        return Ok(total / episodes as f64);
    }
    let mut total = 0.0;
    for _ in 0..episodes {
        let mut state = env.reset(rng)?;
        loop {
            let joint_obs = state.joint_obs();
            let cont_action = act_continuous(actor, &joint_obs, env, rng)?;
            let step = if env.action_space().is_discrete() {
                let indices =
                    decode_discrete(&cont_action, &env.action_space(), 0.0, None, rng)?;
                env.step_discrete(&mut state, &indices)?
            } else {
                env.step_continuous(&mut state, &cont_action)?
            };
            total += step.rewards.iter().sum::<f64>();
            if step.done {
                break;
            }
        }
    }
    Ok(total / episodes as f64)
}

fn act_continuous(
    actor: &PolicyActor,
    joint_obs: &[f64],
    env: &DidacticEnv,
    rng: &mut impl Rng,
) -> Result<Vec<f64>> {
    match actor {
        PolicyActor::Flow(flow) => {
            let obs = Tensor::new(vec![1, joint_obs.len()], joint_obs.to_vec())?;
            let (action, _) = flow.sample_joint_action(&obs, rng, None)?;
            Ok(action.data().to_vec())
        }
        PolicyActor::OneStep(policies) => {
            let mut out = Vec::with_capacity(policies.space.total_dim());
            let mut start = 0;
            for agent in 0..policies.agent_count() {
                let d = policies.obs_dims[agent];
                let obs_i = &joint_obs[start..start + d];
                out.extend(policies.one_step_act(agent, obs_i, rng, None)?);
                start += d;
            }
            let _ = env;
            Ok(out)
        }
        PolicyActor::Replay(_) => unreachable!("replay handled before rollout"),
    }
}

/// |mean Q_tot under the factored policy - mean Q_tot under the joint flow|
/// at a fixed observation, with one shared noise draw for both sides.
pub fn value_gap(
    critics: &CriticEnsemble,
    flow: &JointFlowPolicy,
    one_step: &OneStepPolicySet,
    joint_obs: &[f64],
    samples: usize,
    rng: &mut impl Rng,
) -> Result<f64> {
    let mut obs = Tensor::zeros(vec![samples, joint_obs.len()]);
    for r in 0..samples {
        obs.data_mut()[r * joint_obs.len()..(r + 1) * joint_obs.len()].copy_from_slice(joint_obs);
    }
    let obs_slices = split_obs(&obs, &one_step.obs_dims)?;
    let z = flow.noise_spec().sample(samples, rng);
    let a_w = one_step.forward_joint(&obs_slices, &z)?;
    let a_phi = flow.euler_sample(&obs, &z, None)?;
    let q_w = critics.q_tot(&obs_slices, &split_joint_action(&a_w, &one_step.space)?)?;
    let q_phi = critics.q_tot(&obs_slices, &split_joint_action(&a_phi, &one_step.space)?)?;
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok((mean(&q_w) - mean(&q_phi)).abs())
}

/// 2x2 joint-action mass of the flow policy (argmax decode) at one
/// observation, for two-agent binary games.
pub fn joint_mass_flow(
    flow: &JointFlowPolicy,
    joint_obs: &[f64],
    samples: usize,
    rng: &mut impl Rng,
) -> Result<[[f64; 2]; 2]> {
    let mut obs = Tensor::zeros(vec![samples, joint_obs.len()]);
    for r in 0..samples {
        obs.data_mut()[r * joint_obs.len()..(r + 1) * joint_obs.len()].copy_from_slice(joint_obs);
    }
    let (actions, _) = flow.sample_joint_action(&obs, rng, None)?;
    mass_from_rows(&actions, &flow.space, rng)
}

/// 2x2 joint-action mass of the factored one-step policies.
pub fn joint_mass_onestep(
    policies: &OneStepPolicySet,
    joint_obs: &[f64],
    samples: usize,
    rng: &mut impl Rng,
) -> Result<[[f64; 2]; 2]> {
    let mut obs = Tensor::zeros(vec![samples, joint_obs.len()]);
    for r in 0..samples {
        obs.data_mut()[r * joint_obs.len()..(r + 1) * joint_obs.len()].copy_from_slice(joint_obs);
    }
    let obs_slices = split_obs(&obs, &policies.obs_dims)?;
    let spec = crate::flow::NoiseSpec::for_space(&policies.space);
    let noise = spec.sample(samples, rng);
    let actions = policies.forward_joint(&obs_slices, &noise)?;
    mass_from_rows(&actions, &policies.space, rng)
}

fn mass_from_rows(
    actions: &Tensor,
    space: &crate::flow::ActionSpace,
    rng: &mut impl Rng,
) -> Result<[[f64; 2]; 2]> {
    match space {
        crate::flow::ActionSpace::Discrete { cardinalities } if cardinalities == &vec![2, 2] => {}
        _ => {
            return Err(Error::InvalidArgument(
                "joint-action mass needs a two-agent binary action space".into(),
            ))
        }
    }
    let mut table = [[0.0; 2]; 2];
    for r in 0..actions.rows() {
        let idx = decode_discrete(actions.row(r), space, 0.0, None, rng)?;
        table[idx[0]][idx[1]] += 1.0;
    }
    for row in table.iter_mut() {
        for v in row.iter_mut() {
            *v /= actions.rows() as f64;
        }
    }
    Ok(table)
}
