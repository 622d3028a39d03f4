//! End-to-end training: per gradient step the joint flow takes a
//! behavior-cloning update, the per-agent twin critics take a TD update with
//! next actions sampled from the flow, and the one-step policies take a
//! distillation + value-maximization update, all on the same batch. Bound
//! checks, mutual information, returns, and checkpoints are emitted at a
//! fixed cadence.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::critic::{agent_critic_loss_grad, CriticEnsemble, CriticOptimizer};
use crate::dataset::{load_dataset, OfflineDataset, TransitionBatch};
use crate::distill::{
    actor_loss_grads, sample_actor_batch, split_joint_action, split_obs, verify_bounds,
    BoundsReport, OneStepPolicySet,
};
use crate::env::{DidacticEnv, GameTag, LandmarkEnv, MatrixGameSpec};
use crate::error::{Error, Result};
use crate::exec;
use crate::flow::{sample_flow_inputs, ActionSpace, JointFlowPolicy};
use crate::metrics::{self, PolicyActor};
use crate::nn::{adam_step, AdamState, MlpParams, MlpSpec};
use crate::rng::SeedStreams;
use crate::tensor::Tensor;

mod stream_ids {
    pub const INIT_FLOW: u64 = 0;
    pub const BATCH: u64 = 1;
    pub const FLOW_NOISE: u64 = 2;
    pub const CRITIC_NOISE: u64 = 3;
    pub const ACTOR_NOISE: u64 = 4;
    pub const INIT_POLICY_BASE: u64 = 100;
    pub const INIT_CRITIC_BASE: u64 = 1_000;
    pub const EVAL_BASE: u64 = 1 << 32;

    pub fn eval(step: usize, k: u64) -> u64 {
        EVAL_BASE + (step as u64) * 16 + k
    }
}

/// Everything a finished run leaves on disk.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub run_dir: PathBuf,
    pub config_path: PathBuf,
    pub metrics_path: PathBuf,
    pub bounds_path: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub final_checkpoint: PathBuf,
}

/// The trained networks, available to callers that keep working in-process.
pub struct TrainedModels {
    pub flow: JointFlowPolicy,
    pub policies: OneStepPolicySet,
    pub critics: CriticEnsemble,
    pub dataset: OfflineDataset,
    pub env: DidacticEnv,
}

struct CsvLog {
    w: BufWriter<File>,
}

impl CsvLog {
    fn new(path: &Path, header: &str) -> Result<Self> {
        let mut w = BufWriter::new(File::create(path)?);
        writeln!(w, "{}", header)?;
        Ok(CsvLog { w })
    }

    fn row(&mut self, fields: &[String]) -> Result<()> {
        writeln!(self.w, "{}", fields.join(","))?;
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        self.w.flush()?;
        Ok(())
    }
}

fn fmt(v: f64) -> String {
    format!("{}", v)
}

/// Build the evaluation environment matching a config.
pub fn build_env(config: &ExperimentConfig) -> Result<DidacticEnv> {
    match config.env.as_str() {
        "landmark" => Ok(DidacticEnv::Landmark(LandmarkEnv::new(
            config.agents,
            config.seed,
        )?)),
        "pure_coordination" => Ok(DidacticEnv::Matrix(MatrixGameSpec {
            tag: GameTag::PureCoordination,
            zeta: None,
        })),
        "payoff" => Ok(DidacticEnv::Matrix(MatrixGameSpec {
            tag: GameTag::PayoffZeta,
            zeta: Some(config.zeta),
        })),
        "xor" => Ok(DidacticEnv::Matrix(MatrixGameSpec {
            tag: GameTag::Xor,
            zeta: None,
        })),
        other => Err(Error::InvalidArgument(format!("unknown env tag {:?}", other))),
    }
}

/// Load the configured dataset or generate it from the env settings.
pub fn obtain_dataset(config: &ExperimentConfig) -> Result<OfflineDataset> {
    if let Some(path) = &config.dataset_path {
        return load_dataset(path);
    }
    match config.env.as_str() {
        "landmark" => crate::env::gen_landmark_dataset(config.agents, config.episodes, config.seed),
        "pure_coordination" => {
            crate::env::gen_pure_coordination_dataset(config.episodes, config.epsilon_rare, config.seed)
        }
        "payoff" => crate::env::gen_payoff_dataset(config.zeta, config.episodes, config.seed),
        "xor" => crate::env::gen_xor_dataset(config.episodes, config.mode_std, config.seed),
        other => Err(Error::InvalidArgument(format!("unknown env tag {:?}", other))),
    }
}

/// Fresh networks for a dataset's shapes.
pub fn build_models(
    config: &ExperimentConfig,
    dataset: &OfflineDataset,
) -> Result<(JointFlowPolicy, OneStepPolicySet, CriticEnsemble)> {
    let streams = SeedStreams::new(config.seed);
    let descriptor = &dataset.descriptor;
    let space = descriptor.space.clone();
    let obs_dims = descriptor.obs_dims.clone();
    let obs_total: usize = obs_dims.iter().sum();
    let act_total = space.total_dim();

    let flow_net = MlpParams::init(
        MlpSpec::new(1 + obs_total + act_total, &config.hidden, act_total, true),
        &mut streams.stream(stream_ids::INIT_FLOW),
    );
    let flow = JointFlowPolicy::new(flow_net, config.flow_steps, space.clone(), obs_dims.clone())?;

    let nets = (0..space.agent_count())
        .map(|i| {
            MlpParams::init(
                MlpSpec::new(
                    obs_dims[i] + space.agent_dim(i),
                    &config.hidden,
                    space.agent_dim(i),
                    true,
                ),
                &mut streams.stream(stream_ids::INIT_POLICY_BASE + i as u64),
            )
        })
        .collect();
    let policies = OneStepPolicySet::new(nets, config.alpha, space.clone(), obs_dims.clone())?;

    let critics = CriticEnsemble::init(
        &obs_dims,
        &space,
        &config.hidden,
        config.gamma,
        config.tau,
        config.q_reduction,
        &mut streams.stream(stream_ids::INIT_CRITIC_BASE),
    );
    Ok((flow, policies, critics))
}

struct StepScalars {
    flow_loss: f64,
    critic_loss: f64,
    mean_q: f64,
    distill_loss: f64,
    q_term: f64,
    total_actor_loss: f64,
}

pub struct Trainer {
    pub config: ExperimentConfig,
    pub dataset: OfflineDataset,
    pub env: DidacticEnv,
    pub flow: JointFlowPolicy,
    pub policies: OneStepPolicySet,
    pub critics: CriticEnsemble,
    flow_opt: AdamState,
    policy_opts: Vec<AdamState>,
    critic_opt: CriticOptimizer,
    streams: SeedStreams,
    index: Vec<(usize, usize)>,
    bound_obs: Vec<f64>,
}

impl Trainer {
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        exec::set_sequential(config.single_thread);
        let dataset = obtain_dataset(&config)?;
        let env = build_env(&config)?;
        if env.descriptor() != dataset.descriptor {
            return Err(Error::Dataset(format!(
                "dataset shapes {:?} do not match env {:?}",
                dataset.descriptor, config.env
            )));
        }
        let (flow, policies, critics) = build_models(&config, &dataset)?;
        let flow_opt = AdamState::new(&flow.net, config.policy_lr, config.adam_eps);
        let policy_opts = policies
            .nets
            .iter()
            .map(|n| AdamState::new(n, config.policy_lr, config.adam_eps))
            .collect();
        let critic_opt = CriticOptimizer::new(&critics, config.value_lr, config.adam_eps);
        let streams = SeedStreams::new(config.seed);
        let index = dataset.transition_index();
        // Fixed observation for the bound series: the first recorded one,
        // so the diagnostics sit on the data manifold the flow was fit to.
        let bound_obs: Vec<f64> = dataset.episodes()[0].obs[0]
            .iter()
            .flatten()
            .copied()
            .collect();
        Ok(Trainer {
            config,
            dataset,
            env,
            flow,
            policies,
            critics,
            flow_opt,
            policy_opts,
            critic_opt,
            streams,
            index,
            bound_obs,
        })
    }

    fn obs_dims(&self) -> &[usize] {
        &self.dataset.descriptor.obs_dims
    }

    fn train_step(
        &mut self,
        batch: &TransitionBatch,
        rng_flow: &mut ChaCha8Rng,
        rng_critic: &mut ChaCha8Rng,
        rng_actor: &mut ChaCha8Rng,
    ) -> Result<StepScalars> {
        // Flow behavior-cloning update.
        let inputs = sample_flow_inputs(batch.obs.rows(), &self.flow.space, rng_flow);
        let (flow_loss, grads) =
            crate::flow::flow_bc_loss_grad(&self.flow, &batch.obs, &batch.act, &inputs)?;
        let (net, opt) = adam_step(&self.flow.net, &grads, &self.flow_opt)?;
        self.flow.net = net;
        self.flow_opt = opt;

        if self.config.flow_only {
            return Ok(StepScalars {
                flow_loss,
                critic_loss: 0.0,
                mean_q: 0.0,
                distill_loss: 0.0,
                q_term: 0.0,
                total_actor_loss: 0.0,
            });
        }

        // Critic TD update; next joint action from the (just updated) flow.
        // When every transition in the batch is terminal the bootstrap is
        // fully masked, so the next-action integration can be skipped.
        let obs_slices = split_obs(&batch.obs, self.obs_dims())?;
        let act_slices = split_joint_action(&batch.act, &self.flow.space)?;
        let next_obs_slices = split_obs(&batch.next_obs, self.obs_dims())?;
        let next_actions = if batch.terminals.iter().all(|&t| t) {
            Tensor::zeros(vec![batch.obs.rows(), self.flow.space.total_dim()])
        } else {
            let noise = self.flow.noise_spec().sample(batch.obs.rows(), rng_critic);
            self.flow.euler_sample(&batch.next_obs, &noise, None)?
        };
        let next_act_slices = split_joint_action(&next_actions, &self.flow.space)?;

        let mut critic_loss_total = 0.0;
        let mut mean_q_total = 0.0;
        for agent in 0..self.critics.agent_count() {
            let targets = self.critics.td_targets(
                agent,
                &batch.rewards[agent],
                &batch.terminals,
                &next_obs_slices[agent],
                &next_act_slices[agent],
            )?;
            let (loss_i, g1, g2) = agent_critic_loss_grad(
                &self.critics.agents[agent],
                &obs_slices[agent],
                &act_slices[agent],
                &targets,
            )?;
            critic_loss_total += loss_i;
            let (st1, st2) = self.critic_opt.states[agent].clone();
            let (q1, st1) = adam_step(&self.critics.agents[agent].q1, &g1, &st1)?;
            let (q2, st2) = adam_step(&self.critics.agents[agent].q2, &g2, &st2)?;
            self.critics.agents[agent].q1 = q1;
            self.critics.agents[agent].q2 = q2;
            self.critic_opt.states[agent] = (st1, st2);
            let q = self
                .critics
                .q_value(agent, &obs_slices[agent], &act_slices[agent])?;
            mean_q_total += q.iter().sum::<f64>() / q.len() as f64;
        }
        self.critics.polyak_targets()?;
        let critic_loss = critic_loss_total / self.critics.agent_count() as f64;
        let mean_q = mean_q_total / self.critics.agent_count() as f64;

        // One-step policy extraction on the same batch.
        let actor_batch = sample_actor_batch(&self.flow, &batch.obs, self.obs_dims(), rng_actor)?;
        let (per_agent_grads, result) = actor_loss_grads(
            &self.policies,
            &self.critics,
            &actor_batch,
            crate::distill::ActorOptions {
                q_max: self.config.q_max,
                q_normalization: self.config.q_normalization,
            },
        )?;
        for (agent, grads) in per_agent_grads.into_iter().enumerate() {
            let (net, opt) = adam_step(&self.policies.nets[agent], &grads, &self.policy_opts[agent])?;
            self.policies.nets[agent] = net;
            self.policy_opts[agent] = opt;
        }

        Ok(StepScalars {
            flow_loss,
            critic_loss,
            mean_q,
            distill_loss: result.distill_loss,
            q_term: result.q_term,
            total_actor_loss: result.total_actor_loss,
        })
    }

    fn checkpoint_entries(&self) -> Vec<(String, &MlpParams)> {
        let mut entries = vec![("flow".to_string(), &self.flow.net)];
        if !self.config.flow_only {
            for (i, net) in self.policies.nets.iter().enumerate() {
                entries.push((format!("policy_{}", i), net));
            }
            for (i, agent) in self.critics.agents.iter().enumerate() {
                entries.push((format!("critic_{}_q1", i), &agent.q1));
                entries.push((format!("critic_{}_q2", i), &agent.q2));
                entries.push((format!("critic_{}_q1_target", i), &agent.q1_target));
                entries.push((format!("critic_{}_q2_target", i), &agent.q2_target));
            }
        }
        entries
    }

    fn write_checkpoint(&self, dir: &Path, step: usize) -> Result<PathBuf> {
        let path = dir.join(format!("step_{:06}.ckpt", step));
        let entries = self.checkpoint_entries();
        for (_, p) in &entries {
            if !p.all_finite() {
                return Err(Error::NonFinite("checkpoint parameters".into()));
            }
        }
        checkpoint::save(&path, &entries)?;
        Ok(path)
    }

    /// Average pairwise inter-agent mutual information of a policy's action
    /// samples at the fixed bound observation.
    fn policy_mi(&self, factored: bool, step: usize) -> Result<f64> {
        let samples = self.config.mi_samples;
        let mut obs = crate::tensor::Tensor::zeros(vec![samples, self.bound_obs.len()]);
        for r in 0..samples {
            obs.data_mut()[r * self.bound_obs.len()..(r + 1) * self.bound_obs.len()]
                .copy_from_slice(&self.bound_obs);
        }
        let k = if factored { 3 } else { 2 };
        let mut rng = self.streams.stream(stream_ids::eval(step, k));
        let actions = if factored {
            let obs_slices = split_obs(&obs, self.obs_dims())?;
            let noise = self.flow.noise_spec().sample(samples, &mut rng);
            self.policies.forward_joint(&obs_slices, &noise)?
        } else {
            let (a, _) = self.flow.sample_joint_action(&obs, &mut rng, None)?;
            a
        };
        let blocks = split_joint_action(&actions, &self.flow.space)?;
        let agents = self.flow.space.agent_count();
        let discrete = self.flow.space.is_discrete();
        let mut total = 0.0;
        let mut pairs = 0.0;
        for i in 0..agents {
            for j in (i + 1)..agents {
                let mi = if discrete {
                    let to_indices = |t: &crate::tensor::Tensor| -> Vec<usize> {
                        (0..t.rows())
                            .map(|r| {
                                let row = t.row(r);
                                let mut best = 0;
                                for (k, &v) in row.iter().enumerate() {
                                    if v > row[best] {
                                        best = k;
                                    }
                                }
                                best
                            })
                            .collect()
                    };
                    metrics::mi_discrete(&to_indices(&blocks[i]), &to_indices(&blocks[j]))?
                } else {
                    metrics::mi_continuous(&blocks[i], &blocks[j], self.config.mi_bins)?
                };
                total += mi;
                pairs += 1.0;
            }
        }
        Ok(if pairs > 0.0 { total / pairs } else { 0.0 })
    }

    fn evaluate(
        &self,
        step: usize,
        last: &StepScalars,
        metrics_log: &mut CsvLog,
        bounds_log: &mut CsvLog,
    ) -> Result<()> {
        let cfg = &self.config;
        if cfg.flow_only {
            return Ok(());
        }
        let mut rng_bounds = self.streams.stream(stream_ids::eval(step, 0));
        let report: BoundsReport = verify_bounds(
            &self.policies,
            &self.flow,
            &self.critics,
            &self.bound_obs,
            cfg.bound_samples,
            cfg.lipschitz_pairs,
            cfg.bound_tolerance,
            &mut rng_bounds,
        )?;
        bounds_log.row(&[
            step.to_string(),
            fmt(last.distill_loss),
            fmt(report.w2_exact),
            fmt(report.coupling_rms),
            fmt(report.l_hat),
            fmt(report.value_gap),
            fmt(report.bound),
            (report.w2_holds && report.gap_holds).to_string(),
        ])?;

        let mi_joint = self.policy_mi(false, step)?;
        let mi_factored = self.policy_mi(true, step)?;
        let aux = format!("bins={};n={}", cfg.mi_bins, cfg.mi_samples);
        metrics_log.row(&[
            step.to_string(),
            "mi_joint".into(),
            fmt(mi_joint),
            aux.clone(),
        ])?;
        metrics_log.row(&[step.to_string(), "mi_factored".into(), fmt(mi_factored), aux])?;

        let mut rng_ret = self.streams.stream(stream_ids::eval(step, 4));
        let ret_flow = metrics::evaluate_return(
            &PolicyActor::Flow(&self.flow),
            &self.env,
            cfg.eval_episodes,
            &mut rng_ret,
        )?;
        let mut rng_ret = self.streams.stream(stream_ids::eval(step, 5));
        let ret_onestep = metrics::evaluate_return(
            &PolicyActor::OneStep(&self.policies),
            &self.env,
            cfg.eval_episodes,
            &mut rng_ret,
        )?;
        let aux = format!("episodes={}", cfg.eval_episodes);
        metrics_log.row(&[step.to_string(), "return_flow".into(), fmt(ret_flow), aux.clone()])?;
        metrics_log.row(&[
            step.to_string(),
            "return_onestep".into(),
            fmt(ret_onestep),
            aux.clone(),
        ])?;
        metrics_log.row(&[
            step.to_string(),
            "value_gap_return".into(),
            fmt((ret_flow - ret_onestep).abs()),
            aux,
        ])?;

        // 2x2 joint-action mass for the binary matrix games.
        if let ActionSpace::Discrete { cardinalities } = &self.flow.space {
            if cardinalities == &vec![2, 2] {
                let mut rng = self.streams.stream(stream_ids::eval(step, 6));
                let mass_flow = metrics::joint_mass_flow(&self.flow, &self.bound_obs, 4096, &mut rng)?;
                let mut rng = self.streams.stream(stream_ids::eval(step, 7));
                let mass_onestep =
                    metrics::joint_mass_onestep(&self.policies, &self.bound_obs, 4096, &mut rng)?;
                for (tag, mass) in [("flow", mass_flow), ("onestep", mass_onestep)] {
                    for a1 in 0..2 {
                        for a2 in 0..2 {
                            metrics_log.row(&[
                                step.to_string(),
                                format!("p{}{}_{}", a1, a2, tag),
                                fmt(mass[a1][a2]),
                                "n=4096".into(),
                            ])?;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Run a full training job, writing all artifacts under the config's output
/// directory. On a non-finite loss the run aborts with the last checkpoint
/// retained on disk.
pub fn train(config: &ExperimentConfig) -> Result<(RunArtifacts, TrainedModels)> {
    let run_dir = config.resolved_out_dir();
    std::fs::create_dir_all(&run_dir)?;
    let checkpoint_dir = run_dir.join("checkpoints");
    std::fs::create_dir_all(&checkpoint_dir)?;
    let config_path = run_dir.join("config.json");
    config.save(&config_path)?;
    let metrics_path = run_dir.join("metrics.csv");
    let bounds_path = run_dir.join("bounds.csv");
    let mut metrics_log = CsvLog::new(&metrics_path, "step,metric,value,aux")?;
    let mut bounds_log = CsvLog::new(
        &bounds_path,
        "step,distill_loss,w2_exact,coupling_rms,l_hat,value_gap,bound,holds",
    )?;

    let mut trainer = Trainer::new(config.clone())?;
    // Shapes the networks were built for, next to the config copy.
    let descriptor = serde_json::json!({
        "obs_dims": trainer.dataset.descriptor.obs_dims,
        "action_space": trainer.flow.space,
        "agents": trainer.dataset.descriptor.agent_count(),
    });
    std::fs::write(
        run_dir.join("descriptor.json"),
        serde_json::to_string_pretty(&descriptor)?,
    )?;
    let eval_interval = config.resolved_eval_interval();
    let mut rng_batch = trainer.streams.stream(stream_ids::BATCH);
    let mut rng_flow = trainer.streams.stream(stream_ids::FLOW_NOISE);
    let mut rng_critic = trainer.streams.stream(stream_ids::CRITIC_NOISE);
    let mut rng_actor = trainer.streams.stream(stream_ids::ACTOR_NOISE);

    let index = trainer.index.clone();
    let mut last_checkpoint = trainer.write_checkpoint(&checkpoint_dir, 0)?;
    for step in 1..=config.gradient_steps {
        let batch = trainer
            .dataset
            .sample_batch(config.batch_size, &index, &mut rng_batch)?;
        let scalars = match trainer.train_step(&batch, &mut rng_flow, &mut rng_critic, &mut rng_actor)
        {
            Ok(s) => s,
            Err(e) => {
                metrics_log.flush()?;
                bounds_log.flush()?;
                return Err(Error::Training(format!(
                    "step {}: {} (last good checkpoint: {})",
                    step,
                    e,
                    last_checkpoint.display()
                )));
            }
        };
        let finite = [
            scalars.flow_loss,
            scalars.critic_loss,
            scalars.distill_loss,
            scalars.q_term,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            metrics_log.flush()?;
            bounds_log.flush()?;
            return Err(Error::Training(format!(
                "step {}: non-finite loss (last good checkpoint: {})",
                step,
                last_checkpoint.display()
            )));
        }
        metrics_log.row(&[step.to_string(), "flow_bc_loss".into(), fmt(scalars.flow_loss), String::new()])?;
        if !config.flow_only {
            metrics_log.row(&[step.to_string(), "critic_loss".into(), fmt(scalars.critic_loss), String::new()])?;
            metrics_log.row(&[step.to_string(), "mean_q".into(), fmt(scalars.mean_q), String::new()])?;
            metrics_log.row(&[step.to_string(), "distill_loss".into(), fmt(scalars.distill_loss), String::new()])?;
            metrics_log.row(&[step.to_string(), "q_term".into(), fmt(scalars.q_term), String::new()])?;
            metrics_log.row(&[
                step.to_string(),
                "total_actor_loss".into(),
                fmt(scalars.total_actor_loss),
                String::new(),
            ])?;
        }
        if step % eval_interval == 0 || step == config.gradient_steps {
            trainer.evaluate(step, &scalars, &mut metrics_log, &mut bounds_log)?;
            last_checkpoint = trainer.write_checkpoint(&checkpoint_dir, step)?;
        }
    }
    let final_checkpoint = run_dir.join("final.ckpt");
    checkpoint::save(&final_checkpoint, &trainer.checkpoint_entries())?;
    metrics_log.flush()?;
    bounds_log.flush()?;

    Ok((
        RunArtifacts {
            run_dir,
            config_path,
            metrics_path,
            bounds_path,
            checkpoint_dir,
            final_checkpoint,
        },
        TrainedModels {
            flow: trainer.flow,
            policies: trainer.policies,
            critics: trainer.critics,
            dataset: trainer.dataset,
            env: trainer.env,
        },
    ))
}

/// Rebuild trained models from a checkpoint plus its run config.
pub fn load_models(config: &ExperimentConfig, checkpoint_path: &Path) -> Result<TrainedModels> {
    let dataset = obtain_dataset(config)?;
    let env = build_env(config)?;
    let (mut flow, mut policies, mut critics) = build_models(config, &dataset)?;
    let loaded = checkpoint::load(checkpoint_path)?;
    for (name, params) in loaded {
        if name == "flow" {
            flow.net = params;
        } else if let Some(i) = name.strip_prefix("policy_") {
            let i: usize = i
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad net name {:?}", name)))?;
            policies.nets[i] = params;
        } else if let Some(rest) = name.strip_prefix("critic_") {
            let mut parts = rest.splitn(2, '_');
            let i: usize = parts
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| Error::Checkpoint(format!("bad net name {:?}", name)))?;
            match parts.next() {
                Some("q1") => critics.agents[i].q1 = params,
                Some("q2") => critics.agents[i].q2 = params,
                Some("q1_target") => critics.agents[i].q1_target = params,
                Some("q2_target") => critics.agents[i].q2_target = params,
                _ => return Err(Error::Checkpoint(format!("bad net name {:?}", name))),
            }
        } else {
            return Err(Error::Checkpoint(format!("unknown net {:?}", name)));
        }
    }
    Ok(TrainedModels {
        flow,
        policies,
        critics,
        dataset,
        env,
    })
}

/// One logged metric row.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub metric: String,
    pub value: f64,
    pub aux: String,
}

/// Parse a metrics.csv written by `train`.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.splitn(4, ',').collect();
        if parts.len() < 3 {
            return Err(Error::Dataset(format!("metrics.csv line {}: too few fields", i + 1)));
        }
        out.push(MetricRow {
            step: parts[0]
                .parse()
                .map_err(|_| Error::Dataset(format!("metrics.csv line {}: bad step", i + 1)))?,
            metric: parts[1].to_string(),
            value: parts[2]
                .parse()
                .map_err(|_| Error::Dataset(format!("metrics.csv line {}: bad value", i + 1)))?,
            aux: parts.get(3).unwrap_or(&"").to_string(),
        });
    }
    Ok(out)
}

/// One bound-check row.
#[derive(Clone, Copy, Debug)]
pub struct BoundsRow {
    pub step: usize,
    pub distill_loss: f64,
    pub w2_exact: f64,
    pub coupling_rms: f64,
    pub l_hat: f64,
    pub value_gap: f64,
    pub bound: f64,
    pub holds: bool,
}

/// Parse a bounds.csv written by `train`.
pub fn read_bounds(path: &Path) -> Result<Vec<BoundsRow>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 8 {
            return Err(Error::Dataset(format!("bounds.csv line {}: expected 8 fields", i + 1)));
        }
        let f = |s: &str| -> Result<f64> {
            s.parse()
                .map_err(|_| Error::Dataset(format!("bounds.csv line {}: bad float", i + 1)))
        };
        out.push(BoundsRow {
            step: parts[0]
                .parse()
                .map_err(|_| Error::Dataset(format!("bounds.csv line {}: bad step", i + 1)))?,
            distill_loss: f(parts[1])?,
            w2_exact: f(parts[2])?,
            coupling_rms: f(parts[3])?,
            l_hat: f(parts[4])?,
            value_gap: f(parts[5])?,
            bound: f(parts[6])?,
            holds: parts[7] == "true",
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_config(dir: &Path) -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.env = "payoff".into();
        cfg.zeta = 0.5;
        cfg.episodes = 64;
        cfg.gradient_steps = 4;
        cfg.batch_size = 8;
        cfg.hidden = vec![8];
        cfg.eval_interval = Some(2);
        cfg.bound_samples = 16;
        cfg.lipschitz_pairs = 32;
        cfg.mi_samples = 128;
        cfg.eval_episodes = 8;
        cfg.out_dir = dir.to_path_buf();
        cfg
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.gradient_steps = 1;
        cfg.eval_interval = Some(10);
        cfg.policy_lr = 1e-300;
        cfg.value_lr = 1e-300;
        let before = {
            let dataset = obtain_dataset(&cfg).unwrap();
            build_models(&cfg, &dataset).unwrap()
        };
        let (_, models) = train(&cfg).unwrap();
        // Adam with an effectively-zero learning rate leaves weights intact.
        for (a, b) in before
            .0
            .net
            .flat_tensors()
            .iter()
            .zip(models.flow.net.flat_tensors())
        {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert!((x - y).abs() < 1e-290);
            }
        }
    }

    #[test]
    fn run_writes_all_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let (artifacts, _) = train(&cfg).unwrap();
        assert!(artifacts.config_path.exists());
        assert!(artifacts.metrics_path.exists());
        assert!(artifacts.bounds_path.exists());
        assert!(artifacts.final_checkpoint.exists());
        let bounds = read_bounds(&artifacts.bounds_path).unwrap();
        assert_eq!(bounds.len(), 2); // steps 2 and 4
        let metrics = read_metrics(&artifacts.metrics_path).unwrap();
        assert!(metrics.iter().any(|m| m.metric == "flow_bc_loss"));
        assert!(metrics.iter().any(|m| m.metric == "p11_onestep"));
    }

    #[test]
    fn identical_seeds_give_bitwise_identical_csvs() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let mut cfg_a = tiny_config(dir_a.path());
        cfg_a.single_thread = true;
        let mut cfg_b = tiny_config(dir_b.path());
        cfg_b.single_thread = true;
        let (a, _) = train(&cfg_a).unwrap();
        let (b, _) = train(&cfg_b).unwrap();
        let m_a = std::fs::read(&a.metrics_path).unwrap();
        let m_b = std::fs::read(&b.metrics_path).unwrap();
        assert_eq!(m_a, m_b);
        let b_a = std::fs::read(&a.bounds_path).unwrap();
        let b_b = std::fs::read(&b.bounds_path).unwrap();
        assert_eq!(b_a, b_b);
    }

    #[test]
    fn checkpoint_reload_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let (artifacts, models) = train(&cfg).unwrap();
        let loaded = load_models(&cfg, &artifacts.final_checkpoint).unwrap();
        assert_eq!(loaded.flow.net, models.flow.net);
        assert_eq!(loaded.policies.nets[1], models.policies.nets[1]);
        assert_eq!(loaded.critics.agents[0].q2_target, models.critics.agents[0].q2_target);
    }
}
