//! The didactic experiment suite: the landmark-covering study with its
//! bound series, the pure coordination game with and without value
//! maximization, the anti-aligned coordination stress test, and the
//! diagonal-mixing payoff sweep. Each study emits per-figure CSVs and SVGs
//! plus a machine-readable summary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::config::ExperimentConfig;
use crate::distill::{split_obs, OneStepPolicySet};
use crate::env::{joint_action_table, matrix_game_obs};
use crate::error::{Error, Result};
use crate::flow::JointFlowPolicy;
use crate::metrics::{self, EmpiricalDistribution, PolicyActor};
use crate::plot::{self, Series};
use crate::rng::SeedStreams;
use crate::tensor::Tensor;
use crate::train::{self, read_bounds, read_metrics, RunArtifacts, TrainedModels};

/// Training length for the one-shot matrix games.
pub const MATRIX_GAME_STEPS: usize = 2000;
/// Distillation coefficient for the discrete matrix games. The didactic
/// rewards are O(1), far below the benchmark-scale returns the default
/// coefficient is tuned for, so the value term is given more room and is
/// normalized by the batch mean |Q_tot|.
pub const MATRIX_GAME_ALPHA: f64 = 0.03;
/// Hidden sizes for the matrix-game networks; the 4-d action layouts do
/// not need the full desk-scale width.
pub const MATRIX_GAME_HIDDEN: [usize; 2] = [32, 32];
/// Sample count for joint-action mass and quadrant estimates.
pub const MASS_SAMPLES: usize = 10_000;
/// Training length for the convergence-focused landmark run.
pub const LANDMARK_DIDACTIC_STEPS: usize = 5000;

/// The landmark run with the scaling-study settings: 50 trajectories,
/// 1000 iterations, batch 64. Carries the bound-check series.
pub fn landmark_config(out_dir: &Path, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.env = "landmark".into();
    cfg.agents = 3;
    cfg.episodes = 50;
    cfg.gradient_steps = 1000;
    cfg.batch_size = 64;
    cfg.seed = seed;
    cfg.eval_episodes = 50;
    cfg.out_dir = out_dir.join(format!("landmark_seed{}", seed));
    cfg
}

/// The longer landmark run whose loss, gap, and mutual-information curves
/// are given time to converge.
pub fn landmark_didactic_config(out_dir: &Path, seed: u64) -> ExperimentConfig {
    let mut cfg = landmark_config(out_dir, seed);
    cfg.gradient_steps = LANDMARK_DIDACTIC_STEPS;
    cfg.out_dir = out_dir.join(format!("landmark_didactic_seed{}", seed));
    cfg
}

pub fn pure_coordination_config(out_dir: &Path, seed: u64, q_max: bool) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.env = "pure_coordination".into();
    cfg.epsilon_rare = 0.1;
    cfg.episodes = 10_000;
    cfg.gradient_steps = MATRIX_GAME_STEPS;
    cfg.seed = seed;
    cfg.alpha = MATRIX_GAME_ALPHA;
    cfg.q_normalization = true;
    cfg.q_max = q_max;
    cfg.hidden = MATRIX_GAME_HIDDEN.to_vec();
    cfg.eval_interval = Some(MATRIX_GAME_STEPS);
    cfg.eval_episodes = 512;
    cfg.mi_samples = 512;
    cfg.lipschitz_pairs = 600;
    let tag = if q_max { "igm" } else { "no_q" };
    cfg.out_dir = out_dir.join(format!("pure_coordination_{}_seed{}", tag, seed));
    cfg
}

pub fn xor_config(out_dir: &Path, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.env = "xor".into();
    cfg.mode_std = 0.1;
    cfg.episodes = 10_000;
    cfg.gradient_steps = MATRIX_GAME_STEPS;
    cfg.seed = seed;
    cfg.hidden = MATRIX_GAME_HIDDEN.to_vec();
    cfg.eval_interval = Some(MATRIX_GAME_STEPS);
    cfg.eval_episodes = 512;
    cfg.mi_samples = 512;
    cfg.lipschitz_pairs = 600;
    cfg.out_dir = out_dir.join(format!("xor_seed{}", seed));
    cfg
}

pub fn payoff_config(out_dir: &Path, seed: u64, zeta: f64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    cfg.env = "payoff".into();
    cfg.zeta = zeta;
    cfg.episodes = 8_000;
    cfg.gradient_steps = MATRIX_GAME_STEPS;
    cfg.seed = seed;
    cfg.alpha = MATRIX_GAME_ALPHA;
    cfg.q_normalization = true;
    cfg.hidden = MATRIX_GAME_HIDDEN.to_vec();
    cfg.eval_interval = Some(MATRIX_GAME_STEPS);
    cfg.eval_episodes = 2000;
    cfg.mi_samples = 512;
    cfg.lipschitz_pairs = 600;
    cfg.out_dir = out_dir.join(format!("payoff_z{:03}_seed{}", (zeta * 100.0) as u32, seed));
    cfg
}

/// Exact empirical W2 between the two policies' push-forwards at one
/// observation, from independent noise draws.
pub fn w2_between_policies(
    flow: &JointFlowPolicy,
    policies: &OneStepPolicySet,
    joint_obs: &[f64],
    samples: usize,
    seed_streams: &SeedStreams,
    stream_base: u64,
) -> Result<f64> {
    let mut obs = Tensor::zeros(vec![samples, joint_obs.len()]);
    for r in 0..samples {
        obs.data_mut()[r * joint_obs.len()..(r + 1) * joint_obs.len()].copy_from_slice(joint_obs);
    }
    let obs_slices = split_obs(&obs, &policies.obs_dims)?;
    let z_w = flow.noise_spec().sample(samples, &mut seed_streams.stream(stream_base));
    let factored = policies.forward_joint(&obs_slices, &z_w)?;
    let z_phi = flow
        .noise_spec()
        .sample(samples, &mut seed_streams.stream(stream_base + 1));
    let joint = flow.euler_sample(&obs, &z_phi, None)?;
    metrics::w2_exact(
        &EmpiricalDistribution::new(factored)?,
        &EmpiricalDistribution::new(joint)?,
    )
}

pub struct LandmarkStudy {
    pub artifacts: RunArtifacts,
    pub models: TrainedModels,
}

pub fn landmark_study(out_dir: &Path, seed: u64) -> Result<LandmarkStudy> {
    let cfg = landmark_config(out_dir, seed);
    let (artifacts, models) = train::train(&cfg)?;
    plot::emit_plots(&artifacts.run_dir)?;
    Ok(LandmarkStudy { artifacts, models })
}

pub fn landmark_didactic_study(out_dir: &Path, seed: u64) -> Result<LandmarkStudy> {
    let cfg = landmark_didactic_config(out_dir, seed);
    let (artifacts, models) = train::train(&cfg)?;
    plot::emit_plots(&artifacts.run_dir)?;
    Ok(LandmarkStudy { artifacts, models })
}

#[derive(Clone, Copy, Debug)]
pub struct CoordinationOutcome {
    pub dataset_mass: [[f64; 2]; 2],
    pub flow_mass: [[f64; 2]; 2],
    pub distilled_mass: [[f64; 2]; 2],
    pub ablation_mass: [[f64; 2]; 2],
}

pub fn pure_coordination_study(out_dir: &Path, seed: u64) -> Result<CoordinationOutcome> {
    let cfg_igm = pure_coordination_config(out_dir, seed, true);
    let (artifacts_igm, igm) = train::train(&cfg_igm)?;
    let cfg_ablation = pure_coordination_config(out_dir, seed, false);
    let (_, ablation) = train::train(&cfg_ablation)?;

    let obs: Vec<f64> = (0..2).flat_map(|i| matrix_game_obs(i, 2)).collect();
    let streams = SeedStreams::new(seed ^ 0x5eed);
    let dataset_mass = joint_action_table(&igm.dataset)?;
    let flow_mass =
        metrics::joint_mass_flow(&igm.flow, &obs, MASS_SAMPLES, &mut streams.stream(1))?;
    let distilled_mass =
        metrics::joint_mass_onestep(&igm.policies, &obs, MASS_SAMPLES, &mut streams.stream(2))?;
    let ablation_mass =
        metrics::joint_mass_onestep(&ablation.policies, &obs, MASS_SAMPLES, &mut streams.stream(3))?;

    plot::heatmap2(
        &artifacts_igm.run_dir.join("mass_dataset.svg"),
        "dataset joint-action mass",
        &dataset_mass,
    )?;
    plot::heatmap2(
        &artifacts_igm.run_dir.join("mass_flow_final.svg"),
        "joint flow action mass",
        &flow_mass,
    )?;
    plot::heatmap2(
        &artifacts_igm.run_dir.join("mass_distilled.svg"),
        "distilled policy action mass",
        &distilled_mass,
    )?;
    plot::heatmap2(
        &artifacts_igm.run_dir.join("mass_no_q.svg"),
        "no value-max ablation action mass",
        &ablation_mass,
    )?;
    Ok(CoordinationOutcome {
        dataset_mass,
        flow_mass,
        distilled_mass,
        ablation_mass,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct XorOutcome {
    /// Fraction of joint-flow samples in the two anti-aligned quadrants.
    pub joint_fraction: f64,
    /// Same fraction for the factored one-step policies.
    pub factored_fraction: f64,
}

/// Fraction of rows with oppositely signed per-agent actions.
pub fn anti_aligned_fraction(actions: &Tensor) -> f64 {
    let n = actions.rows();
    let hits = (0..n)
        .filter(|&r| {
            let row = actions.row(r);
            row[0] * row[1] < 0.0
        })
        .count();
    hits as f64 / n as f64
}

pub fn xor_study(out_dir: &Path, seed: u64, samples: usize) -> Result<XorOutcome> {
    let cfg = xor_config(out_dir, seed);
    let (artifacts, models) = train::train(&cfg)?;
    let obs_single: Vec<f64> = (0..2).flat_map(|i| matrix_game_obs(i, 2)).collect();
    let mut obs = Tensor::zeros(vec![samples, obs_single.len()]);
    for r in 0..samples {
        obs.data_mut()[r * obs_single.len()..(r + 1) * obs_single.len()]
            .copy_from_slice(&obs_single);
    }
    let streams = SeedStreams::new(seed ^ 0x0f0f);
    let (joint_actions, _) =
        models.flow.sample_joint_action(&obs, &mut streams.stream(1), None)?;
    let obs_slices = split_obs(&obs, &models.policies.obs_dims)?;
    let noise = models.flow.noise_spec().sample(samples, &mut streams.stream(2));
    let factored_actions = models.policies.forward_joint(&obs_slices, &noise)?;

    // Scatter of both sample clouds in the two-agent action plane.
    let as_points = |t: &Tensor| -> Vec<(f64, f64)> {
        (0..t.rows()).map(|r| (t.row(r)[0], t.row(r)[1])).collect()
    };
    plot::line_plot(
        &artifacts.run_dir.join("xor_samples.svg"),
        "joint flow vs factored action samples",
        "agent 1 action",
        "agent 2 action",
        &[
            Series {
                label: "joint flow".into(),
                points: as_points(&joint_actions).into_iter().take(400).collect(),
            },
            Series {
                label: "factored".into(),
                points: as_points(&factored_actions).into_iter().take(400).collect(),
            },
        ],
    )
    .ok();
    Ok(XorOutcome {
        joint_fraction: anti_aligned_fraction(&joint_actions),
        factored_fraction: anti_aligned_fraction(&factored_actions),
    })
}

#[derive(Clone, Copy, Debug)]
pub struct PayoffPoint {
    pub zeta: f64,
    pub w2: f64,
    pub return_flow: f64,
    pub return_onestep: f64,
}

pub const PAYOFF_ZETAS: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];

pub fn payoff_sweep(out_dir: &Path, seed: u64) -> Result<Vec<PayoffPoint>> {
    let obs: Vec<f64> = (0..2).flat_map(|i| matrix_game_obs(i, 2)).collect();
    let mut points = Vec::new();
    for (zi, &zeta) in PAYOFF_ZETAS.iter().enumerate() {
        let cfg = payoff_config(out_dir, seed, zeta);
        let (_, models) = train::train(&cfg)?;
        let streams = SeedStreams::new(seed ^ 0xbeef);
        let w2 = w2_between_policies(
            &models.flow,
            &models.policies,
            &obs,
            256,
            &streams,
            100 + 2 * zi as u64,
        )?;
        let mut rng = streams.stream(200 + zi as u64);
        let return_flow = metrics::evaluate_return(
            &PolicyActor::Flow(&models.flow),
            &models.env,
            2000,
            &mut rng,
        )?;
        let mut rng = streams.stream(300 + zi as u64);
        let return_onestep = metrics::evaluate_return(
            &PolicyActor::OneStep(&models.policies),
            &models.env,
            2000,
            &mut rng,
        )?;
        points.push(PayoffPoint {
            zeta,
            w2,
            return_flow,
            return_onestep,
        });
    }
    Ok(points)
}

/// Spearman rank correlation; ties get average ranks.
pub fn spearman(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let n = xs.len();
    let ranks = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).expect("finite"));
        let mut out = vec![0.0; n];
        let mut i = 0;
        while i < n {
            let mut j = i;
            while j + 1 < n && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                out[k] = avg;
            }
            i = j + 1;
        }
        out
    };
    let rx = ranks(xs);
    let ry = ranks(ys);
    let mx = rx.iter().sum::<f64>() / n as f64;
    let my = ry.iter().sum::<f64>() / n as f64;
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx) * (a - mx)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my) * (b - my)).sum();
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

#[derive(Clone, Debug)]
pub struct SuiteOutcome {
    pub name: String,
    pub ok: bool,
    pub detail: String,
}

#[derive(Clone, Debug)]
pub struct SuiteReport {
    pub outcomes: Vec<SuiteOutcome>,
    pub summary_path: PathBuf,
}

impl SuiteReport {
    pub fn all_ok(&self) -> bool {
        self.outcomes.iter().all(|o| o.ok)
    }
}

fn record(outcomes: &mut Vec<SuiteOutcome>, name: &str, result: Result<String>) {
    match result {
        Ok(detail) => outcomes.push(SuiteOutcome {
            name: name.into(),
            ok: true,
            detail,
        }),
        Err(e) => outcomes.push(SuiteOutcome {
            name: name.into(),
            ok: false,
            detail: e.to_string(),
        }),
    }
}

/// Run every didactic study for the given seeds. Individual failures are
/// recorded and the suite continues.
pub fn run_didactic_suite(out_dir: &Path, seeds: &[u64]) -> Result<SuiteReport> {
    if seeds.is_empty() {
        return Err(Error::InvalidArgument("suite needs at least one seed".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut outcomes = Vec::new();
    let mut summary = String::from("study,seed,key,value\n");

    // Landmark: the scaling-study run carries the bound series, the longer
    // run carries the convergence curves (first seed only; the matrix
    // studies cover seed replication).
    let seed0 = seeds[0];
    record(&mut outcomes, "landmark", {
        landmark_study(out_dir, seed0).and_then(|study| {
            let bounds = read_bounds(&study.artifacts.bounds_path)?;
            let held = bounds.iter().filter(|b| b.holds).count();
            let _ = write!(
                summary,
                "landmark,{},bounds_held,{}\nlandmark,{},checkpoints,{}\n",
                seed0,
                held,
                seed0,
                bounds.len(),
            );
            Ok(format!("{}/{} checkpoints held both bounds", held, bounds.len()))
        })
    });
    record(&mut outcomes, "landmark_didactic", {
        landmark_didactic_study(out_dir, seed0).and_then(|study| {
            let metrics_rows = read_metrics(&study.artifacts.metrics_path)?;
            let mi_peak = metrics_rows
                .iter()
                .filter(|m| m.metric == "mi_joint")
                .map(|m| m.value)
                .fold(0.0f64, f64::max);
            let gap: Vec<f64> = metrics_rows
                .iter()
                .filter(|m| m.metric == "value_gap_return")
                .map(|m| m.value)
                .collect();
            let first = gap.iter().take(10).sum::<f64>() / 10.0;
            let last = gap.iter().rev().take(10).sum::<f64>() / 10.0;
            let _ = write!(
                summary,
                "landmark_didactic,{},mi_joint_peak,{}\nlandmark_didactic,{},gap_first10,{}\nlandmark_didactic,{},gap_last10,{}\n",
                seed0, mi_peak, seed0, first, seed0, last
            );
            Ok(format!("return gap smoothed {:.2} -> {:.2}", first, last))
        })
    });

    for &seed in seeds {
        record(&mut outcomes, &format!("pure_coordination_seed{}", seed), {
            pure_coordination_study(out_dir, seed).map(|o| {
                let _ = write!(
                    summary,
                    "pure_coordination,{},p11_dataset,{}\npure_coordination,{},p11_distilled,{}\npure_coordination,{},p11_no_q,{}\n",
                    seed, o.dataset_mass[1][1], seed, o.distilled_mass[1][1], seed, o.ablation_mass[1][1]
                );
                format!(
                    "P(1,1): dataset {:.3}, distilled {:.3}, no-Q {:.3}",
                    o.dataset_mass[1][1], o.distilled_mass[1][1], o.ablation_mass[1][1]
                )
            })
        });
    }

    record(&mut outcomes, "xor", {
        xor_study(out_dir, seed0, 1000).map(|o| {
            let _ = write!(
                summary,
                "xor,{},joint_anti_aligned,{}\nxor,{},factored_anti_aligned,{}\n",
                seed0, o.joint_fraction, seed0, o.factored_fraction
            );
            format!(
                "anti-aligned fraction: joint {:.3}, factored {:.3}",
                o.joint_fraction, o.factored_fraction
            )
        })
    });

    let mut w2_series: Vec<Series> = Vec::new();
    let mut return_series: Vec<Series> = Vec::new();
    for &seed in seeds {
        record(&mut outcomes, &format!("payoff_seed{}", seed), {
            payoff_sweep(out_dir, seed).map(|points| {
                let rho = spearman(
                    &points.iter().map(|p| p.zeta).collect::<Vec<_>>(),
                    &points.iter().map(|p| p.w2).collect::<Vec<_>>(),
                );
                for p in &points {
                    let _ = write!(
                        summary,
                        "payoff,{},w2_z{},{}\npayoff,{},return_flow_z{},{}\n",
                        seed, p.zeta, p.w2, seed, p.zeta, p.return_flow
                    );
                }
                let _ = write!(summary, "payoff,{},spearman,{}\n", seed, rho);
                w2_series.push(Series {
                    label: format!("seed {}", seed),
                    points: points.iter().map(|p| (p.zeta, p.w2)).collect(),
                });
                return_series.push(Series {
                    label: format!("seed {}", seed),
                    points: points.iter().map(|p| (p.zeta, p.return_flow)).collect(),
                });
                format!("spearman(zeta, w2) = {:.3}", rho)
            })
        });
    }
    if !w2_series.is_empty() {
        plot::line_plot(
            &out_dir.join("payoff_w2.svg"),
            "W2(joint, factored) vs interaction strength",
            "zeta",
            "exact W2",
            &w2_series,
        )
        .ok();
        plot::line_plot(
            &out_dir.join("payoff_return.svg"),
            "joint flow return vs interaction strength",
            "zeta",
            "mean team return",
            &return_series,
        )
        .ok();
    }

    let summary_path = out_dir.join("summary.csv");
    std::fs::write(&summary_path, summary)?;
    Ok(SuiteReport {
        outcomes,
        summary_path,
    })
}
