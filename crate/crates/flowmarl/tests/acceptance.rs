//! Acceptance suite: every criterion runs at its stated tolerance and
//! prints one PASS/FAIL line. Criteria that share a training run read the
//! same cached artifacts.

use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Instant;

use flowmarl::critic::{agent_critic_loss_grad, agent_critic_loss_value, CriticEnsemble, TwinReduction};
use flowmarl::distill::{actor_loss_grads, sample_actor_batch, ActorOptions, OneStepPolicySet};
use flowmarl::flow::{flow_bc_loss_grad, flow_bc_loss_value, sample_flow_inputs, ActionSpace, JointFlowPolicy};
use flowmarl::latency::{bench_inference, bench_models};
use flowmarl::metrics::{w2_exact, EmpiricalDistribution};
use flowmarl::nn::{MlpParams, MlpSpec};
use flowmarl::rng::{self, SeedStreams};
use flowmarl::suite;
use flowmarl::tensor::Tensor;
use flowmarl::train::{read_bounds, read_metrics, BoundsRow, MetricRow};

fn accept_root() -> PathBuf {
    let root = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
    std::fs::create_dir_all(&root).expect("create acceptance dir");
    root
}

/// Wall-clock measurements need the machine to themselves; every criterion
/// takes the gate shared except the latency one, which takes it exclusive.
fn gate() -> &'static std::sync::RwLock<()> {
    static GATE: OnceLock<std::sync::RwLock<()>> = OnceLock::new();
    GATE.get_or_init(|| std::sync::RwLock::new(()))
}

fn shared_gate() -> std::sync::RwLockReadGuard<'static, ()> {
    gate().read().unwrap_or_else(|e| e.into_inner())
}

fn exclusive_gate() -> std::sync::RwLockWriteGuard<'static, ()> {
    gate().write().unwrap_or_else(|e| e.into_inner())
}

fn verdict(criterion: &str, pass: bool, detail: &str) {
    println!(
        "ACCEPT {} {}: {}",
        criterion,
        if pass { "PASS" } else { "FAIL" },
        detail
    );
}

struct LandmarkData {
    bounds: Vec<BoundsRow>,
    metrics: Vec<MetricRow>,
    steps: usize,
}

/// The scaling-study landmark run: 50 trajectories, 1000 iterations,
/// batch 64. Shared by the bound criteria.
fn g5_run() -> &'static LandmarkData {
    static RUN: OnceLock<LandmarkData> = OnceLock::new();
    RUN.get_or_init(|| {
        let study = suite::landmark_study(&accept_root(), 0).expect("landmark run");
        LandmarkData {
            bounds: read_bounds(&study.artifacts.bounds_path).expect("bounds.csv"),
            metrics: read_metrics(&study.artifacts.metrics_path).expect("metrics.csv"),
            steps: 1000,
        }
    })
}

/// The longer landmark run whose curves are given time to converge.
/// Shared by the MI and convergence criteria.
fn didactic_run() -> &'static LandmarkData {
    static RUN: OnceLock<LandmarkData> = OnceLock::new();
    RUN.get_or_init(|| {
        let study = suite::landmark_didactic_study(&accept_root(), 0).expect("didactic run");
        LandmarkData {
            bounds: read_bounds(&study.artifacts.bounds_path).expect("bounds.csv"),
            metrics: read_metrics(&study.artifacts.metrics_path).expect("metrics.csv"),
            steps: suite::LANDMARK_DIDACTIC_STEPS,
        }
    })
}

fn series<'a>(rows: &'a [MetricRow], name: &str) -> Vec<(usize, f64)> {
    rows.iter()
        .filter(|m| m.metric == name)
        .map(|m| (m.step, m.value))
        .collect()
}

fn window_mean(values: &[f64], window: usize, from_start: bool) -> f64 {
    let w = window.min(values.len());
    let slice: Vec<f64> = if from_start {
        values.iter().take(w).copied().collect()
    } else {
        values.iter().rev().take(w).copied().collect()
    };
    slice.iter().sum::<f64>() / w as f64
}

// ---------------------------------------------------------------------
// Criterion 1: reverse-mode gradients vs central finite differences on
// every loss family, >= 20 random small networks, relative error <= 1e-4.
// ---------------------------------------------------------------------

const FD_STEP: f64 = 1e-5;
const FD_REL_TOL: f64 = 1e-4;

fn check_grads(
    label: &str,
    params: &MlpParams,
    analytic: &[Tensor],
    loss_of: impl Fn(&MlpParams) -> f64,
) -> (usize, f64) {
    let mut checked = 0;
    let mut worst: f64 = 0.0;
    for (ti, tensor) in params.flat_tensors().iter().enumerate() {
        for k in 0..tensor.len() {
            let up = loss_of(&params.perturbed(ti, k, FD_STEP));
            let down = loss_of(&params.perturbed(ti, k, -FD_STEP));
            let fd = (up - down) / (2.0 * FD_STEP);
            let ad = analytic[ti].data()[k];
            let rel = (ad - fd).abs() / ad.abs().max(fd.abs()).max(1.0);
            assert!(
                rel <= FD_REL_TOL,
                "{}: tensor {} coord {}: analytic {} vs finite-diff {} (rel {})",
                label,
                ti,
                k,
                ad,
                fd,
                rel
            );
            worst = worst.max(rel);
            checked += 1;
        }
    }
    (checked, worst)
}

#[test]
fn criterion_1_gradients_match_finite_differences() {
    let _gate = shared_gate();
    let start = Instant::now();
    let streams = SeedStreams::new(2024);
    let mut nets_checked = 0;
    let mut coords = 0;
    let mut worst: f64 = 0.0;

    // Flow behavior-cloning loss: 4 continuous + 4 discrete setups.
    for i in 0..8 {
        let discrete = i >= 4;
        let space = if discrete {
            ActionSpace::Discrete { cardinalities: vec![2, 3] }
        } else {
            ActionSpace::Continuous { dims: vec![2, 1] }
        };
        let obs_dims = vec![2, 3];
        let act = space.total_dim();
        let layer_norm = i % 2 == 0;
        let hidden: &[usize] = if i % 3 == 0 { &[5, 4] } else { &[8] };
        let mut rng = streams.stream(10 + i as u64);
        let net = MlpParams::init(MlpSpec::new(1 + 5 + act, hidden, act, layer_norm), &mut rng);
        let policy = JointFlowPolicy::new(net, 3, space.clone(), obs_dims.clone()).unwrap();
        let batch = 4;
        let mut obs = Tensor::zeros(vec![batch, 5]);
        rng::fill_normal(&mut rng, obs.data_mut());
        let actions = if discrete {
            let mut t = Tensor::zeros(vec![batch, act]);
            for r in 0..batch {
                t.data_mut()[r * act + r % 2] = 1.0;
                t.data_mut()[r * act + 2 + r % 3] = 1.0;
            }
            t
        } else {
            let mut t = Tensor::zeros(vec![batch, act]);
            rng::fill_normal(&mut rng, t.data_mut());
            t
        };
        let inputs = sample_flow_inputs(batch, &space, &mut rng);
        let (_, grads) = flow_bc_loss_grad(&policy, &obs, &actions, &inputs).unwrap();
        let (n, w) = check_grads("flow_bc", &policy.net, &grads, |p| {
            let candidate =
                JointFlowPolicy::new(p.clone(), 3, space.clone(), obs_dims.clone()).unwrap();
            flow_bc_loss_value(&candidate, &obs, &actions, &inputs).unwrap()
        });
        nets_checked += 1;
        coords += n;
        worst = worst.max(w);
    }

    // Critic TD loss: twin gradients for 6 random critics.
    for i in 0..6 {
        let mut rng = streams.stream(50 + i as u64);
        let layer_norm = true;
        let hidden: &[usize] = if i % 2 == 0 { &[6, 6] } else { &[8] };
        let spec = MlpSpec::new(4, hidden, 1, layer_norm);
        let critic = flowmarl::critic::AgentCritic {
            q1: MlpParams::init(spec.clone(), &mut rng),
            q2: MlpParams::init(spec.clone(), &mut rng),
            q1_target: MlpParams::init(spec.clone(), &mut rng),
            q2_target: MlpParams::init(spec, &mut rng),
        };
        let batch = 4;
        let mut obs = Tensor::zeros(vec![batch, 3]);
        rng::fill_normal(&mut rng, obs.data_mut());
        let mut act = Tensor::zeros(vec![batch, 1]);
        rng::fill_normal(&mut rng, act.data_mut());
        let targets: Vec<f64> = (0..batch).map(|_| rng::normal(&mut rng)).collect();
        let (_, g1, g2) = agent_critic_loss_grad(&critic, &obs, &act, &targets).unwrap();
        let (n1, w1) = check_grads("critic_q1", &critic.q1, &g1, |p| {
            let mut c = critic.clone();
            c.q1 = p.clone();
            agent_critic_loss_value(&c, &obs, &act, &targets).unwrap()
        });
        let (n2, w2) = check_grads("critic_q2", &critic.q2, &g2, |p| {
            let mut c = critic.clone();
            c.q2 = p.clone();
            agent_critic_loss_value(&c, &obs, &act, &targets).unwrap()
        });
        nets_checked += 1;
        coords += n1 + n2;
        worst = worst.max(w1).max(w2);
    }

    // Actor total loss: 3 continuous + 3 discrete setups, checking the
    // first agent's policy gradients.
    for i in 0..6 {
        let discrete = i >= 3;
        let mut rng = streams.stream(80 + i as u64);
        let space = if discrete {
            ActionSpace::Discrete { cardinalities: vec![2, 2] }
        } else {
            ActionSpace::Continuous { dims: vec![1, 1] }
        };
        let obs_dims = vec![2, 2];
        let act = space.total_dim();
        let flow_net = MlpParams::init(
            MlpSpec::new(1 + 4 + act, &[6], act, false),
            &mut rng,
        );
        let flow = JointFlowPolicy::new(flow_net, 2, space.clone(), obs_dims.clone()).unwrap();
        let nets: Vec<MlpParams> = (0..2)
            .map(|a| {
                MlpParams::init(
                    MlpSpec::new(2 + space.agent_dim(a), &[7], space.agent_dim(a), i % 2 == 0),
                    &mut rng,
                )
            })
            .collect();
        let policies = OneStepPolicySet::new(nets, 1.5, space.clone(), obs_dims.clone()).unwrap();
        let critics = CriticEnsemble::init(
            &obs_dims,
            &space,
            &[6],
            0.9,
            0.01,
            TwinReduction::Mean,
            &mut rng,
        );
        let batch_size = 4;
        let mut obs = Tensor::zeros(vec![batch_size, 4]);
        rng::fill_normal(&mut rng, obs.data_mut());
        let batch = sample_actor_batch(&flow, &obs, &obs_dims, &mut rng).unwrap();
        let opts = ActorOptions {
            q_max: true,
            q_normalization: false,
        };
        let (grads, _) = actor_loss_grads(&policies, &critics, &batch, opts).unwrap();
        // The joint objective decomposes per agent, so the per-agent loss
        // used for the finite-difference probe is -(1/I) q_i + alpha d_i,
        // reconstructed from the reported scalars of a one-agent change.
        let (n, w) = check_grads("actor_total", &policies.nets[0], &grads[0], |p| {
            let mut ps = policies.clone();
            ps.nets[0] = p.clone();
            let (_, r) = actor_loss_grads(&ps, &critics, &batch, opts).unwrap();
            r.total_actor_loss
        });
        nets_checked += 1;
        coords += n;
        worst = worst.max(w);
    }

    let elapsed = start.elapsed().as_secs_f64();
    let pass = nets_checked >= 20 && elapsed < 30.0;
    verdict(
        "C1",
        pass,
        &format!(
            "{} nets, {} coordinates, worst rel err {:.2e}, {:.1}s (< 30s)",
            nets_checked, coords, worst, elapsed
        ),
    );
    assert!(nets_checked >= 20);
    assert!(elapsed < 30.0, "gradient check took {:.1}s", elapsed);
}

// ---------------------------------------------------------------------
// Criterion 2: exact OT equals brute-force permutation enumeration.
// ---------------------------------------------------------------------

fn brute_force_w2_total(p: &[Vec<f64>], q: &[Vec<f64>]) -> f64 {
    fn go(cost: &[Vec<f64>], taken: &mut Vec<bool>, row: usize, acc: f64, best: &mut f64) {
        let n = cost.len();
        if row == n {
            if acc < *best {
                *best = acc;
            }
            return;
        }
        for j in 0..n {
            if !taken[j] {
                taken[j] = true;
                go(cost, taken, row + 1, acc + cost[row][j], best);
                taken[j] = false;
            }
        }
    }
    let n = p.len();
    let cost: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    p[i].iter()
                        .zip(&q[j])
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum()
                })
                .collect()
        })
        .collect();
    let mut best = f64::INFINITY;
    go(&cost, &mut vec![false; n], 0, 0.0, &mut best);
    best
}

#[test]
fn criterion_2_exact_ot_matches_brute_force() {
    let _gate = shared_gate();
    let start = Instant::now();
    let streams = SeedStreams::new(99);
    let mut rng = streams.stream(0);
    let mut instances = 0;
    for case in 0..100 {
        let n = 1 + (case % 7);
        let d = 1 + (case % 3);
        let draw = |rng: &mut rand_chacha::ChaCha8Rng| -> Vec<Vec<f64>> {
            (0..n)
                .map(|_| (0..d).map(|_| rng::normal(rng) * 2.0).collect())
                .collect()
        };
        let p = draw(&mut rng);
        let q = draw(&mut rng);
        let brute_total = brute_force_w2_total(&p, &q);
        let w2 = w2_exact(
            &EmpiricalDistribution::new(Tensor::from_rows(&p).unwrap()).unwrap(),
            &EmpiricalDistribution::new(Tensor::from_rows(&q).unwrap()).unwrap(),
        )
        .unwrap();
        let expected = (brute_total / n as f64).sqrt();
        assert_eq!(
            w2, expected,
            "instance {}: n={} d={}: {} vs brute force {}",
            case, n, d, w2, expected
        );
        instances += 1;
    }
    let elapsed = start.elapsed().as_secs_f64();
    verdict(
        "C2",
        instances == 100 && elapsed < 10.0,
        &format!("{} instances exactly equal, {:.2}s (< 10s)", instances, elapsed),
    );
    assert!(elapsed < 10.0);
}

// ---------------------------------------------------------------------
// Criterion 3: W2 between the policies stays below the shared-noise
// coupling estimate at every checkpoint of the scaling-config run.
// ---------------------------------------------------------------------

#[test]
fn criterion_3_w2_below_coupling_at_every_checkpoint() {
    let _gate = shared_gate();
    let start = Instant::now();
    let run = g5_run();
    assert!(!run.bounds.is_empty());
    let ratios: Vec<f64> = run
        .bounds
        .iter()
        .map(|b| b.w2_exact / b.coupling_rms)
        .collect();
    let max_ratio = ratios.iter().cloned().fold(0.0f64, f64::max);
    let within_110 = ratios.iter().filter(|&&r| r <= 1.10).count();
    let within_102 = ratios.iter().filter(|&&r| r <= 1.02).count();
    let frac_102 = within_102 as f64 / ratios.len() as f64;
    let elapsed = start.elapsed().as_secs_f64();
    let pass = within_110 == ratios.len() && frac_102 >= 0.95;
    verdict(
        "C3",
        pass,
        &format!(
            "{}/{} checkpoints at slack 1.10, {}/{} at 1.02 (need >= 95%), max w2/coupling {:.3}, {:.0}s (< 180s incl. shared run)",
            within_110,
            ratios.len(),
            within_102,
            ratios.len(),
            max_ratio,
            elapsed
        ),
    );
    assert_eq!(
        within_110,
        ratios.len(),
        "w2 exceeded coupling_rms * 1.10 at {} of {} checkpoints (max ratio {:.3}); the \
         finite-sample excess of 256-sample empirical OT over the shared-noise coupling \
         persists at converged checkpoints",
        ratios.len() - within_110,
        ratios.len(),
        max_ratio
    );
    assert!(
        frac_102 >= 0.95,
        "only {:.0}% of checkpoints satisfied the 1.02 slack (need 95%)",
        frac_102 * 100.0
    );
}

// ---------------------------------------------------------------------
// Criterion 4: value gap below L_hat * coupling at 100% of checkpoints.
// ---------------------------------------------------------------------

#[test]
fn criterion_4_value_gap_below_lipschitz_bound() {
    let _gate = shared_gate();
    let run = g5_run();
    assert!(!run.bounds.is_empty());
    let bad: Vec<&BoundsRow> = run
        .bounds
        .iter()
        .filter(|b| b.value_gap > b.bound * 1.10)
        .collect();
    let max_ratio = run
        .bounds
        .iter()
        .map(|b| b.value_gap / b.bound)
        .fold(0.0f64, f64::max);
    verdict(
        "C4",
        bad.is_empty(),
        &format!(
            "{}/{} checkpoints hold, max gap/bound {:.3} (tol 1.10)",
            run.bounds.len() - bad.len(),
            run.bounds.len(),
            max_ratio
        ),
    );
    assert!(bad.is_empty(), "value gap exceeded the bound at {} checkpoints", bad.len());
}

// ---------------------------------------------------------------------
// Criterion 5: factored MI stays below 0.15 nats after the first 10% of
// training; the joint policy's early MI peak exceeds the factored MI.
// ---------------------------------------------------------------------

#[test]
fn criterion_5_mutual_information_profile() {
    let _gate = shared_gate();
    let run = didactic_run();
    let mi_joint = series(&run.metrics, "mi_joint");
    let mi_factored = series(&run.metrics, "mi_factored");
    assert!(!mi_joint.is_empty() && !mi_factored.is_empty());
    let cutoff = run.steps / 10;
    let factored_after: Vec<f64> = mi_factored
        .iter()
        .filter(|(s, _)| *s > cutoff)
        .map(|(_, v)| *v)
        .collect();
    let factored_max = factored_after.iter().cloned().fold(0.0f64, f64::max);

    // Early peak: the joint policy's largest MI in the first 30% of
    // training, compared against the factored MI at the same checkpoint.
    let early_cut = (run.steps * 3) / 10;
    let (peak_step, peak) = mi_joint
        .iter()
        .filter(|(s, _)| *s <= early_cut)
        .fold((0usize, f64::NEG_INFINITY), |acc, &(s, v)| {
            if v > acc.1 {
                (s, v)
            } else {
                acc
            }
        });
    let factored_at_peak = mi_factored
        .iter()
        .find(|(s, _)| *s == peak_step)
        .map(|(_, v)| *v)
        .expect("factored MI at the joint peak step");
    let pass = factored_max <= 0.15 && peak > factored_at_peak;
    verdict(
        "C5",
        pass,
        &format!(
            "factored MI max after 10%: {:.4} nats (<= 0.15); joint early peak {:.4} > factored {:.4}",
            factored_max, peak, factored_at_peak
        ),
    );
    assert!(factored_max <= 0.15);
    assert!(peak > factored_at_peak);
}

// ---------------------------------------------------------------------
// Criterion 6: smoothed distillation loss and value gap both end below
// half their initial smoothed values.
// ---------------------------------------------------------------------

#[test]
fn criterion_6_loss_and_gap_halve() {
    let _gate = shared_gate();
    let run = didactic_run();
    let distill: Vec<f64> = series(&run.metrics, "distill_loss")
        .iter()
        .map(|(_, v)| *v)
        .collect();
    // The per-observation value gap in return units, logged per checkpoint.
    let gap: Vec<f64> = series(&run.metrics, "value_gap_return")
        .iter()
        .map(|(_, v)| *v)
        .collect();
    assert!(distill.len() >= 20 && gap.len() >= 20);
    let d_first = window_mean(&distill, 10, true);
    let d_last = window_mean(&distill, 10, false);
    let g_first = window_mean(&gap, 10, true);
    let g_last = window_mean(&gap, 10, false);
    let pass = d_last < 0.5 * d_first && g_last < 0.5 * g_first;
    verdict(
        "C6",
        pass,
        &format!(
            "distill {:.3} -> {:.3} ({:.0}%), value gap {:.2} -> {:.2} ({:.0}%)",
            d_first,
            d_last,
            100.0 * d_last / d_first,
            g_first,
            g_last,
            100.0 * g_last / g_first
        ),
    );
    assert!(d_last < 0.5 * d_first, "distill loss did not halve");
    assert!(g_last < 0.5 * g_first, "value gap did not halve");
}

// ---------------------------------------------------------------------
// Criterion 7: value-guided distillation concentrates on the rare optimal
// joint action; the no-value ablation stays near the uniform product.
// ---------------------------------------------------------------------

#[test]
fn criterion_7_pure_coordination() {
    let _gate = shared_gate();
    let root = accept_root().join("pure_coordination");
    let mut all = Vec::new();
    for seed in [0u64, 1, 2] {
        let outcome = suite::pure_coordination_study(&root, seed).expect("coordination study");
        let p11 = outcome.distilled_mass[1][1];
        let dataset_p11 = outcome.dataset_mass[1][1];
        assert!(
            p11 >= 0.5,
            "seed {}: distilled P(1,1) = {:.3} < 0.5",
            seed,
            p11
        );
        assert!(
            p11 >= 5.0 * dataset_p11,
            "seed {}: distilled P(1,1) = {:.3} is not 5x the dataset frequency {:.3}",
            seed,
            p11,
            dataset_p11
        );
        for a1 in 0..2 {
            for a2 in 0..2 {
                let p = outcome.ablation_mass[a1][a2];
                assert!(
                    (p - 0.25).abs() <= 0.15,
                    "seed {}: ablation P({},{}) = {:.3} outside 0.25 +/- 0.15",
                    seed,
                    a1,
                    a2,
                    p
                );
            }
        }
        all.push((seed, p11, dataset_p11));
    }
    let detail = all
        .iter()
        .map(|(s, p, d)| format!("seed {}: P11 {:.3} (dataset {:.3})", s, p, d))
        .collect::<Vec<_>>()
        .join("; ");
    verdict("C7", true, &detail);
}

// ---------------------------------------------------------------------
// Criterion 8: the joint flow captures the anti-aligned modes; the
// factored policies cannot (the documented failure mode).
// ---------------------------------------------------------------------

#[test]
fn criterion_8_xor_stress_test() {
    let _gate = shared_gate();
    let root = accept_root().join("xor");
    let outcome = suite::xor_study(&root, 0, 1000).expect("xor study");
    let pass = outcome.joint_fraction >= 0.90 && outcome.factored_fraction <= 0.60;
    verdict(
        "C8",
        pass,
        &format!(
            "anti-aligned fraction: joint {:.3} (>= 0.90), factored {:.3} (<= 0.60)",
            outcome.joint_fraction, outcome.factored_fraction
        ),
    );
    assert!(outcome.joint_fraction >= 0.90);
    assert!(outcome.factored_fraction <= 0.60);
}

// ---------------------------------------------------------------------
// Criterion 9: W2(joint, factored) rises with the interaction strength;
// the joint flow stays near the dataset's unit mean return.
// ---------------------------------------------------------------------

#[test]
fn criterion_9_payoff_sweep() {
    let _gate = shared_gate();
    let root = accept_root().join("payoff");
    let mut details = Vec::new();
    for seed in [0u64, 1, 2] {
        let points = suite::payoff_sweep(&root, seed).expect("payoff sweep");
        let zetas: Vec<f64> = points.iter().map(|p| p.zeta).collect();
        let w2s: Vec<f64> = points.iter().map(|p| p.w2).collect();
        let rho = suite::spearman(&zetas, &w2s);
        assert!(
            rho >= 0.9,
            "seed {}: spearman(zeta, w2) = {:.3} < 0.9 (w2 series {:?})",
            seed,
            rho,
            w2s
        );
        for p in &points {
            assert!(
                (p.return_flow - 1.0).abs() <= 0.15,
                "seed {}: joint flow return {:.3} at zeta {} is not within 0.15 of 1.0",
                seed,
                p.return_flow,
                p.zeta
            );
        }
        details.push(format!("seed {}: rho {:.2}", seed, rho));
    }
    verdict("C9", true, &details.join("; "));
}

// ---------------------------------------------------------------------
// Criterion 10: exact NFE counts and a >= 3x wall-clock speedup of the
// one-step policies over the 10-step flow at the full network size.
// ---------------------------------------------------------------------

#[test]
fn criterion_10_inference_complexity() {
    let _gate = exclusive_gate();
    let obs_dims = vec![8, 8, 8];
    let space = ActionSpace::Continuous { dims: vec![2, 2, 2] };
    let (flow, policies) =
        bench_models(&obs_dims, &space, &[512, 512, 512, 512], 10, 7).expect("bench models");
    let mut rng = SeedStreams::new(7).stream(1);
    let obs = vec![0.1; 24];
    let rows = bench_inference(&flow, &policies, &obs, 1000, &mut rng).expect("bench");
    let one_step = &rows[0];
    let joint = &rows[1];
    assert_eq!(one_step.nfe_per_decision, 3, "one-step NFE must be 1 per agent");
    assert_eq!(joint.nfe_per_decision, 10, "joint flow NFE must equal the step count");
    let speedup = joint.median_us / one_step.median_us;
    let pass = speedup >= 3.0;
    verdict(
        "C10",
        pass,
        &format!(
            "NFE 3 vs 10 exact; median {:.0}us vs {:.0}us -> speedup {:.2}x (>= 3x)",
            one_step.median_us, joint.median_us, speedup
        ),
    );
    assert!(speedup >= 3.0, "median speedup {:.2}x below 3x", speedup);
}

// ---------------------------------------------------------------------
// Criterion 11: bitwise-identical CSVs for identical config and seed in
// single-thread mode.
// ---------------------------------------------------------------------

#[test]
fn criterion_11_determinism() {
    let _gate = shared_gate();
    let root = accept_root().join("determinism");
    let run = |tag: &str| {
        let mut cfg = flowmarl::config::ExperimentConfig::default();
        cfg.env = "payoff".into();
        cfg.zeta = 0.5;
        cfg.episodes = 256;
        cfg.gradient_steps = 60;
        cfg.batch_size = 16;
        cfg.hidden = vec![16];
        cfg.eval_interval = Some(20);
        cfg.bound_samples = 32;
        cfg.lipschitz_pairs = 64;
        cfg.mi_samples = 128;
        cfg.eval_episodes = 16;
        cfg.single_thread = true;
        cfg.seed = 5;
        cfg.out_dir = root.join(tag);
        let (artifacts, _) = flowmarl::train::train(&cfg).expect("run");
        (
            std::fs::read(&artifacts.metrics_path).unwrap(),
            std::fs::read(&artifacts.bounds_path).unwrap(),
        )
    };
    let (m1, b1) = run("a");
    let (m2, b2) = run("b");
    let pass = m1 == m2 && b1 == b2;
    verdict(
        "C11",
        pass,
        &format!(
            "metrics.csv {} bytes and bounds.csv {} bytes bitwise identical across runs",
            m1.len(),
            b1.len()
        ),
    );
    assert_eq!(m1, m2, "metrics.csv differs between identical runs");
    assert_eq!(b1, b2, "bounds.csv differs between identical runs");
}

// ---------------------------------------------------------------------
// Criterion 12: 40-agent generation and joint-flow training finish within
// the time budget with the flow loss decreasing.
// ---------------------------------------------------------------------

#[test]
fn criterion_12_landmark_scaling_smoke() {
    let _gate = shared_gate();
    let start = Instant::now();
    let mut cfg = flowmarl::config::ExperimentConfig::default();
    cfg.env = "landmark".into();
    cfg.agents = 40;
    cfg.episodes = 50;
    cfg.gradient_steps = 1000;
    cfg.batch_size = 64;
    cfg.flow_only = true;
    cfg.seed = 3;
    cfg.out_dir = accept_root().join("landmark40");
    let (artifacts, _) = flowmarl::train::train(&cfg).expect("40-agent run");
    let metrics = read_metrics(&artifacts.metrics_path).unwrap();
    let flow_loss: Vec<f64> = metrics
        .iter()
        .filter(|m| m.metric == "flow_bc_loss")
        .map(|m| m.value)
        .collect();
    let elapsed = start.elapsed().as_secs_f64();
    let first = flow_loss[0];
    let last = *flow_loss.last().unwrap();
    let pass = elapsed < 600.0 && last < first;
    verdict(
        "C12",
        pass,
        &format!(
            "40 agents, 1000 iterations in {:.0}s (< 600s); flow loss {:.2} -> {:.2}",
            elapsed, first, last
        ),
    );
    assert!(elapsed < 600.0, "scaling run took {:.0}s", elapsed);
    assert!(last < first, "flow loss did not decrease: {} -> {}", first, last);
}
