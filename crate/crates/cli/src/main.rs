use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use caesar_core::caesar::{mc_baseline_with, run_caesar, CaesarConfig, Constants};
use caesar_core::harness::{
    calibrate, gen_combination_lock, gen_random_mdp, gen_random_policies, gen_two_layer_k_example,
    gen_unrealizable_example, run_experiment, CalibrationSuite, ExperimentConfig,
};
use caesar_core::ides::write_trace_csv;
use caesar_core::march::{build_cover, check_coverage, march_estimate_many, CoverKind, MarchConfig};
use caesar_core::policy_id::identify;
use caesar_core::sampler::{write_jsonl, StreamAllocator};
use caesar_core::{MixtureWeights, PolicyTable, Simulator, TabularMdp};
use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "caesar", version, about = "Evaluate many policies of a tabular MDP from shared samples")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Caesar,
    Mc,
}

#[derive(Clone, Copy, ValueEnum)]
enum Cover {
    Oracle,
    Uniform,
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    TwoLayer,
    Unrealizable,
    Random,
    Lock,
}

#[derive(Subcommand)]
enum Command {
    /// Estimate the value of every policy.
    Eval {
        #[arg(long)]
        mdp: PathBuf,
        #[arg(long)]
        policies: PathBuf,
        #[arg(long)]
        epsilon: f64,
        #[arg(long)]
        delta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "caesar")]
        mode: Mode,
        #[arg(long)]
        out: PathBuf,
        /// Constants file; replaces the calibrated defaults.
        #[arg(long)]
        theory_constants: Option<PathBuf>,
        #[arg(long)]
        budget_cap: Option<u64>,
        /// Also write a per-policy CSV summary.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Write the solved sampling distribution.
        #[arg(long)]
        solution: Option<PathBuf>,
        /// Write SGD trace rows every `trace_stride` iterations.
        #[arg(long, requires = "trace_stride")]
        trace: Option<PathBuf>,
        #[arg(long)]
        trace_stride: Option<u64>,
        #[arg(long)]
        mom_reps: Option<usize>,
    },
    /// Pick a near-optimal policy by successive elimination.
    Identify {
        #[arg(long)]
        mdp: PathBuf,
        #[arg(long)]
        policies: PathBuf,
        #[arg(long)]
        epsilon: f64,
        #[arg(long)]
        delta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        theory_constants: Option<PathBuf>,
        #[arg(long)]
        budget_cap: Option<u64>,
    },
    /// Run an experiment grid from a JSON config.
    Bench {
        #[arg(long)]
        config: PathBuf,
    },
    /// Search the smallest constants passing the reference checks.
    Calibrate {
        #[arg(long, default_value_t = 20)]
        reps: usize,
        #[arg(long, default_value_t = 1.5)]
        margin: f64,
        #[arg(long, default_value_t = 6)]
        steps: usize,
        /// Skip the coarse search and use this raw value.
        #[arg(long)]
        coarse_c: Option<f64>,
        /// Skip the IDES search and use this raw value.
        #[arg(long)]
        ides_c: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Coarse tables for many policies from one covering distribution.
    March {
        #[arg(long)]
        mdp: PathBuf,
        #[arg(long)]
        policies: PathBuf,
        #[arg(long)]
        epsilon: f64,
        #[arg(long)]
        delta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, value_enum, default_value = "oracle")]
        cover: Cover,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write an example instance.
    Generate {
        #[arg(value_enum)]
        family: Family,
        #[arg(long, short = 'S', default_value_t = 4)]
        states: usize,
        #[arg(long, short = 'A', default_value_t = 2)]
        actions: usize,
        #[arg(long, short = 'H', default_value_t = 3)]
        horizon: usize,
        #[arg(long, short = 'K', default_value_t = 5)]
        policies: usize,
        #[arg(long, default_value_t = 0.05)]
        p: f64,
        #[arg(long, default_value_t = 0.0)]
        sparsity: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out_mdp: PathBuf,
        #[arg(long)]
        out_policies: PathBuf,
    },
    /// Check an MDP file and optionally a policy file against it.
    Validate {
        #[arg(long)]
        mdp: PathBuf,
        #[arg(long)]
        policies: Option<PathBuf>,
    },
    /// Roll out a uniform mixture of the policies and write JSONL.
    Sample {
        #[arg(long)]
        mdp: PathBuf,
        #[arg(long)]
        policies: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    serde_json::to_writer_pretty(BufWriter::new(f), value)?;
    Ok(())
}

fn load(mdp: &Path, policies: &Path) -> Result<(TabularMdp, Vec<PolicyTable>)> {
    let m = TabularMdp::from_json_file(mdp).with_context(|| format!("loading {}", mdp.display()))?;
    let p = PolicyTable::load_many(policies).with_context(|| format!("loading {}", policies.display()))?;
    Ok((m, p))
}

fn caesar_config(epsilon: f64, delta: f64, constants: Option<&Path>, cap: Option<u64>) -> Result<CaesarConfig> {
    let mut cfg = CaesarConfig::new(epsilon, delta);
    if let Some(path) = constants {
        cfg.constants = Constants::from_json_file(path).with_context(|| format!("loading {}", path.display()))?;
    }
    if let Some(cap) = cap {
        cfg.budget_cap = cap;
    }
    Ok(cfg)
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Eval {
            mdp,
            policies,
            epsilon,
            delta,
            seed,
            mode,
            out,
            theory_constants,
            budget_cap,
            csv,
            solution,
            trace,
            trace_stride,
            mom_reps,
        } => {
            let (m, pols) = load(&mdp, &policies)?;
            let mut cfg = caesar_config(epsilon, delta, theory_constants.as_deref(), budget_cap)?;
            cfg.trace_stride = trace_stride;
            cfg.mom_reps = mom_reps;
            let sim = Simulator::new(&m);
            let streams = StreamAllocator::new(seed);
            let report = match mode {
                Mode::Caesar => {
                    let run = run_caesar(&sim, &pols, &cfg, &streams)?;
                    if let Some(path) = solution {
                        write_json(&path, &run.solution)?;
                    }
                    if let Some(path) = trace {
                        write_trace_csv(BufWriter::new(File::create(&path)?), &run.ides.trace)?;
                    }
                    run.report
                }
                Mode::Mc => mc_baseline_with(&sim, &pols, epsilon, delta, cfg.budget_cap, &streams)?,
            };
            write_json(&out, &report)?;
            if let Some(path) = csv {
                report.write_csv(BufWriter::new(File::create(&path)?))?;
            }
            for (k, v) in report.estimates.iter().enumerate() {
                println!("policy {k}: {v:.6}");
            }
            println!("trajectories: {}", report.phase_counts.total);
        }
        Command::Identify { mdp, policies, epsilon, delta, seed, out, theory_constants, budget_cap } => {
            let (m, pols) = load(&mdp, &policies)?;
            let cfg = caesar_config(epsilon, delta, theory_constants.as_deref(), budget_cap)?;
            let result = identify(&m, &pols, epsilon, delta, &cfg, seed)?;
            write_json(&out, &result)?;
            if !result.complete {
                eprintln!("budget cap reached; the choice is among the surviving candidates only");
            }
            println!(
                "chosen: {} after {} rounds, {} trajectories",
                result.chosen,
                result.rounds.len(),
                result.total_trajectories
            );
        }
        Command::Bench { config } => {
            let cfg =
                ExperimentConfig::from_json_file(&config).with_context(|| format!("loading {}", config.display()))?;
            let summary = run_experiment(&cfg)?;
            for (i, msg) in &summary.failures {
                eprintln!("row {i} failed: {msg}");
            }
            println!(
                "{} rows, success rate {:.3}, written to {}",
                summary.rows.len(),
                summary.success_rate(),
                summary.aggregate_csv.display()
            );
        }
        Command::Calibrate { reps, margin, steps, coarse_c, ides_c, out } => {
            let suite = CalibrationSuite {
                reps,
                margin,
                steps,
                coarse_c_univ: coarse_c,
                ides_c_h: ides_c,
                ..CalibrationSuite::default()
            };
            let result = calibrate(&suite)?;
            write_json(&out, &result.constants)?;
            let mut log_path = out.clone().into_os_string();
            log_path.push(".probes.json");
            write_json(Path::new(&log_path), &result)?;
            println!("{}", serde_json::to_string_pretty(&result.constants)?);
        }
        Command::March { mdp, policies, epsilon, delta, seed, cover, out } => {
            let (m, pols) = load(&mdp, &policies)?;
            let kind = match cover {
                Cover::Oracle => CoverKind::OracleCover,
                Cover::Uniform => CoverKind::UniformMixture,
            };
            let cover = build_cover(&m, kind)?;
            let coverage = check_coverage(&m, &cover, epsilon)?;
            if !coverage.holds() {
                eprintln!("cover misses the coverage bound at {} pairs", coverage.gaps.len());
            }
            let sim = Simulator::new(&m);
            let est = march_estimate_many(
                &sim,
                &cover,
                &pols,
                &MarchConfig::new(epsilon, delta),
                &StreamAllocator::new(seed),
            )?;
            let tables: Vec<_> = est.iter().map(|e| &e.table).collect();
            write_json(
                &out,
                &serde_json::json!({ "estimates": tables, "coverage": coverage, "trajectories": sim.rollouts() }),
            )?;
        }
        Command::Generate { family, states, actions, horizon, policies, p, sparsity, seed, out_mdp, out_policies } => {
            let (m, pols) = match family {
                Family::TwoLayer => gen_two_layer_k_example(policies, p, actions.max(policies))?,
                Family::Unrealizable => {
                    let (m, pols, report) = gen_unrealizable_example(policies)?;
                    println!("{}", serde_json::to_string_pretty(&report)?);
                    (m, pols)
                }
                Family::Random => {
                    let m = gen_random_mdp(states, actions, horizon, sparsity, seed)?;
                    let pols = gen_random_policies(horizon, states, actions, policies, true, seed.wrapping_add(1))?;
                    (m, pols)
                }
                Family::Lock => {
                    let m = gen_combination_lock(states, actions, horizon)?;
                    let pols = gen_random_policies(horizon, states, actions, policies, true, seed)?;
                    (m, pols)
                }
            };
            write_json(&out_mdp, &m)?;
            write_json(&out_policies, &pols)?;
        }
        Command::Validate { mdp, policies } => {
            let text = std::fs::read_to_string(&mdp)?;
            let m = match serde_json::from_str::<TabularMdp>(&text) {
                Ok(m) => m,
                Err(e) => bail!("{}: {e}", mdp.display()),
            };
            println!("{}: S={} A={} H={} ok", mdp.display(), m.num_states(), m.num_actions(), m.horizon());
            if let Some(path) = policies {
                let pols = PolicyTable::load_many(&path)?;
                for (k, p) in pols.iter().enumerate() {
                    m.check_policy(p).with_context(|| format!("policy {k}"))?;
                }
                println!("{}: {} policies ok", path.display(), pols.len());
            }
        }
        Command::Sample { mdp, policies, n, seed, out } => {
            let (m, pols) = load(&mdp, &policies)?;
            let sim = Simulator::new(&m);
            let traj = sim.rollout_mixture(
                &pols,
                &MixtureWeights::uniform(pols.len()),
                n,
                caesar_core::RngStream::new(seed, 0),
            )?;
            write_jsonl(BufWriter::new(File::create(&out)?), &traj)?;
        }
    }
    Ok(())
}
