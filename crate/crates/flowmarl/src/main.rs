//! Command-line entry point: dataset generation, training, the didactic
//! suite, inference benchmarking, standalone bound verification, and plot
//! rendering.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use flowmarl::config::ExperimentConfig;
use flowmarl::dataset::save_dataset;
use flowmarl::distill::verify_bounds;
use flowmarl::flow::ActionSpace;
use flowmarl::latency::{bench_inference, bench_models, write_bench_csv};
use flowmarl::plot::emit_plots;
use flowmarl::rng::SeedStreams;
use flowmarl::suite::run_didactic_suite;
use flowmarl::train::{load_models, train};

#[derive(Parser)]
#[command(
    name = "flowmarl",
    about = "Offline multi-agent RL via flow-matching behavior cloning and one-step policy distillation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// JSON config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override config fields, e.g. --set alpha=0.5 --set hidden=[32,32]
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let base = match &self.config {
            Some(path) => ExperimentConfig::load(path)
                .with_context(|| format!("loading config {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        Ok(base.apply_overrides(&self.set)?)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate an offline dataset for one of the didactic environments.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Output JSONL path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the joint flow, critics, and one-step policies.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Run the full didactic experiment suite.
    Suite {
        /// Output directory for all studies.
        #[arg(long, default_value = "runs/suite")]
        out: PathBuf,
        /// Seeds for the seed-replicated studies.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0u64, 1, 2])]
        seeds: Vec<u64>,
    },
    /// Measure single-decision latency and NFE for both policy forms.
    Bench {
        #[command(flatten)]
        config: ConfigArgs,
        /// Trained checkpoint; untrained networks are used when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        /// Output CSV path.
        #[arg(long, default_value = "bench.csv")]
        out: PathBuf,
    },
    /// Re-run the bound checks on a stored checkpoint.
    Verify {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Render SVG panels from a finished run directory.
    Plot {
        #[arg(long)]
        run_dir: PathBuf,
    },
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.command {
        Command::GenData { config, out } => {
            let cfg = config.resolve()?;
            let dataset = flowmarl::train::obtain_dataset(&cfg)?;
            save_dataset(&dataset, &out)?;
            println!(
                "wrote {} episodes ({} transitions) to {}",
                dataset.episodes().len(),
                dataset.transition_count(),
                out.display()
            );
        }
        Command::Train { config } => {
            let cfg = config.resolve()?;
            let (artifacts, _) = train(&cfg)?;
            println!("run complete: {}", artifacts.run_dir.display());
            println!("  metrics: {}", artifacts.metrics_path.display());
            println!("  bounds:  {}", artifacts.bounds_path.display());
            println!("  final:   {}", artifacts.final_checkpoint.display());
        }
        Command::Suite { out, seeds } => {
            let report = run_didactic_suite(&out, &seeds)?;
            for outcome in &report.outcomes {
                println!(
                    "[{}] {}: {}",
                    if outcome.ok { "ok" } else { "FAILED" },
                    outcome.name,
                    outcome.detail
                );
            }
            println!("summary: {}", report.summary_path.display());
            if !report.all_ok() {
                bail!("one or more suite studies failed");
            }
        }
        Command::Bench {
            config,
            checkpoint,
            trials,
            out,
        } => {
            let cfg = config.resolve()?;
            let rows = match checkpoint {
                Some(path) => {
                    let models = load_models(&cfg, &path)?;
                    let obs: Vec<f64> = models.dataset.episodes()[0].obs[0]
                        .iter()
                        .flatten()
                        .copied()
                        .collect();
                    let mut rng = SeedStreams::new(cfg.seed).stream(7777);
                    bench_inference(&models.flow, &models.policies, &obs, trials, &mut rng)?
                }
                None => {
                    // Default shapes mirror the three-agent landmark task.
                    let env = flowmarl::train::build_env(&cfg)?;
                    let obs_dims = env.obs_dims();
                    let space: ActionSpace = env.action_space();
                    let (flow, policies) =
                        bench_models(&obs_dims, &space, &cfg.hidden, cfg.flow_steps, cfg.seed)?;
                    let obs = vec![0.1; obs_dims.iter().sum()];
                    let mut rng = SeedStreams::new(cfg.seed).stream(7777);
                    bench_inference(&flow, &policies, &obs, trials, &mut rng)?
                }
            };
            for r in &rows {
                println!(
                    "{}: median {:.1} us, p95 {:.1} us, NFE {}",
                    r.policy, r.median_us, r.p95_us, r.nfe_per_decision
                );
            }
            write_bench_csv(&out, &rows)?;
            println!("wrote {}", out.display());
        }
        Command::Verify { config, checkpoint } => {
            let cfg = config.resolve()?;
            let models = load_models(&cfg, &checkpoint)?;
            let obs: Vec<f64> = models.dataset.episodes()[0].obs[0]
                .iter()
                .flatten()
                .copied()
                .collect();
            let mut rng = SeedStreams::new(cfg.seed).stream(8888);
            let report = verify_bounds(
                &models.policies,
                &models.flow,
                &models.critics,
                &obs,
                cfg.bound_samples,
                cfg.lipschitz_pairs,
                cfg.bound_tolerance,
                &mut rng,
            )?;
            println!(
                "w2 {:.6} vs coupling {:.6} (holds: {})",
                report.w2_exact, report.coupling_rms, report.w2_holds
            );
            println!(
                "gap {:.6} vs bound {:.6} = L {:.4} * coupling (holds: {})",
                report.value_gap, report.bound, report.l_hat, report.gap_holds
            );
            if !(report.w2_holds && report.gap_holds) {
                bail!("bound check failed");
            }
        }
        Command::Plot { run_dir } => {
            let written = emit_plots(&run_dir)?;
            for p in written {
                println!("wrote {}", p.display());
            }
        }
    }
    Ok(())
}
