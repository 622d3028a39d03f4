//! Wall-clock and NFE measurement of one decision step: the decentralized
//! one-step policies (one evaluation per agent) versus the M-step Euler
//! integration of the joint flow.

use std::path::Path;
use std::time::Instant;

use rand::Rng;

use crate::distill::OneStepPolicySet;
use crate::error::{Error, Result};
use crate::flow::{ActionSpace, JointFlowPolicy, NfeMeter};
use crate::nn::{MlpParams, MlpSpec};
use crate::rng::SeedStreams;
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct BenchRow {
    pub policy: String,
    pub trials: usize,
    pub nfe_per_decision: u64,
    pub median_us: f64,
    pub p95_us: f64,
}

/// Untrained networks at the requested sizes, for latency measurement.
pub fn bench_models(
    obs_dims: &[usize],
    space: &ActionSpace,
    hidden: &[usize],
    flow_steps: usize,
    seed: u64,
) -> Result<(JointFlowPolicy, OneStepPolicySet)> {
    let streams = SeedStreams::new(seed);
    let obs_total: usize = obs_dims.iter().sum();
    let act_total = space.total_dim();
    let flow_net = MlpParams::init(
        MlpSpec::new(1 + obs_total + act_total, hidden, act_total, true),
        &mut streams.stream(0),
    );
    let flow = JointFlowPolicy::new(flow_net, flow_steps, space.clone(), obs_dims.to_vec())?;
    let nets = (0..space.agent_count())
        .map(|i| {
            MlpParams::init(
                MlpSpec::new(obs_dims[i] + space.agent_dim(i), hidden, space.agent_dim(i), true),
                &mut streams.stream(1 + i as u64),
            )
        })
        .collect();
    let policies = OneStepPolicySet::new(nets, 3.0, space.clone(), obs_dims.to_vec())?;
    Ok((flow, policies))
}

fn percentile(sorted: &[f64], p: f64) -> f64 {
    let idx = ((sorted.len() as f64 - 1.0) * p).round() as usize;
    sorted[idx]
}

/// Measure both policies for `trials` single decisions at one observation.
pub fn bench_inference(
    flow: &JointFlowPolicy,
    policies: &OneStepPolicySet,
    joint_obs: &[f64],
    trials: usize,
    rng: &mut impl Rng,
) -> Result<Vec<BenchRow>> {
    if trials == 0 {
        return Err(Error::InvalidArgument("trials must be >= 1".into()));
    }
    let obs_dims = &policies.obs_dims;
    let obs = Tensor::new(vec![1, joint_obs.len()], joint_obs.to_vec())?;

    // Per-agent observation slices for the one-step path.
    let mut per_agent: Vec<Vec<f64>> = Vec::new();
    let mut start = 0;
    for &d in obs_dims.iter() {
        per_agent.push(joint_obs[start..start + d].to_vec());
        start += d;
    }

    // Warm both paths so the measured trials see steady caches.
    for _ in 0..(trials / 20).clamp(1, 50) {
        for agent in 0..policies.agent_count() {
            let action = policies.one_step_act(agent, &per_agent[agent], rng, None)?;
            std::hint::black_box(&action);
        }
        let (action, _) = flow.sample_joint_action(&obs, rng, None)?;
        std::hint::black_box(&action);
    }

    // Alternate measurement blocks so slow machine-state drift (frequency,
    // steal time) hits both policies alike.
    let mut onestep_times = Vec::with_capacity(trials);
    let mut flow_times = Vec::with_capacity(trials);
    let mut onestep_nfe = 0u64;
    let mut flow_nfe = 0u64;
    let block = (trials / 20).max(1);
    let mut done = 0;
    while done < trials {
        let count = block.min(trials - done);
        for t in 0..count {
            let mut meter = NfeMeter::new();
            let begin = Instant::now();
            for agent in 0..policies.agent_count() {
                let action =
                    policies.one_step_act(agent, &per_agent[agent], rng, Some(&mut meter))?;
                std::hint::black_box(&action);
            }
            onestep_times.push(begin.elapsed().as_secs_f64() * 1e6);
            if done == 0 && t == 0 {
                onestep_nfe = meter.evals;
            } else if meter.evals != onestep_nfe {
                return Err(Error::InvalidArgument("one-step NFE varied across trials".into()));
            }
        }
        for t in 0..count {
            let mut meter = NfeMeter::new();
            let begin = Instant::now();
            let (action, _) = flow.sample_joint_action(&obs, rng, Some(&mut meter))?;
            std::hint::black_box(&action);
            flow_times.push(begin.elapsed().as_secs_f64() * 1e6);
            if done == 0 && t == 0 {
                flow_nfe = meter.evals;
            } else if meter.evals != flow_nfe {
                return Err(Error::InvalidArgument("flow NFE varied across trials".into()));
            }
        }
        done += count;
    }

    onestep_times.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
    flow_times.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
    Ok(vec![
        BenchRow {
            policy: "one_step".into(),
            trials,
            nfe_per_decision: onestep_nfe,
            median_us: percentile(&onestep_times, 0.5),
            p95_us: percentile(&onestep_times, 0.95),
        },
        BenchRow {
            policy: "joint_flow".into(),
            trials,
            nfe_per_decision: flow_nfe,
            median_us: percentile(&flow_times, 0.5),
            p95_us: percentile(&flow_times, 0.95),
        },
    ])
}

pub fn write_bench_csv(path: &Path, rows: &[BenchRow]) -> Result<()> {
    let mut text = String::from("policy,trials,nfe_per_decision,median_us,p95_us\n");
    for r in rows {
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            r.policy, r.trials, r.nfe_per_decision, r.median_us, r.p95_us
        ));
    }
    std::fs::write(path, text)?;
    Ok(())
}
