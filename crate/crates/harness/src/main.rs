use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use swarm_core::safeguess::Mutation;
use swarm_harness::config::Scenario;
use swarm_harness::experiments::{RANDOM_BOUND, compare_abd, random_suite, sweep_buffers};
use swarm_harness::output::{read_histories, summary, write_histories, write_run};
use swarm_harness::runner::{Protocol, check_records, run_scenario};

#[derive(Parser)]
#[command(name = "swarm", version, about = "Deterministic workloads against the simulated replicated store")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run one scenario and check its histories.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Directory for metrics.json, metrics.csv, histories.jsonl and summary.txt.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run the two-roundtrip ABD comparator instead.
        #[arg(long)]
        abd: bool,
    },
    /// Rerun a scenario for each metadata slot count and seed.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = [1, 2, 4, 8, 16])]
        slots: Vec<usize>,
        /// Number of seeds, starting from the scenario seed.
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        /// CSV file with one row per slot count.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a journaled histories.jsonl file for linearizability.
    Check {
        #[arg(long)]
        histories: PathBuf,
        /// Largest per-key history handed to the brute-force checker.
        #[arg(long, default_value_t = swarm_core::checker::DEFAULT_BOUND)]
        bound: usize,
    },
    /// Compare update roundtrips with the ABD comparator on one scenario.
    Abd {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the randomized linearizability suite.
    Random {
        #[arg(long, default_value_t = 1000)]
        seeds: u64,
        #[arg(long, default_value_t = 0)]
        first: u64,
        #[arg(long, value_enum, default_value_t = MutationArg::None)]
        mutation: MutationArg,
        /// Also write the histories of the first dirty run here.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MutationArg {
    None,
    SkipReaderTrylock,
    WriterIgnoresTrylock,
    ReadLoopWeakRead,
    SkipWriteBack,
    NoWaitFreeExit,
}

impl From<MutationArg> for Mutation {
    fn from(m: MutationArg) -> Mutation {
        match m {
            MutationArg::None => Mutation::None,
            MutationArg::SkipReaderTrylock => Mutation::SkipReaderTrylock,
            MutationArg::WriterIgnoresTrylock => Mutation::WriterIgnoresTrylock,
            MutationArg::ReadLoopWeakRead => Mutation::ReadLoopWeakRead,
            MutationArg::SkipWriteBack => Mutation::SkipWriteBack,
            MutationArg::NoWaitFreeExit => Mutation::NoWaitFreeExit,
        }
    }
}

fn load(path: &Path) -> Result<Scenario> {
    Scenario::load(path).with_context(|| format!("loading {}", path.display()))
}

fn verdict(clean: bool) -> ExitCode {
    match clean {
        true => ExitCode::SUCCESS,
        false => ExitCode::from(1),
    }
}

fn main() -> Result<ExitCode> {
    let cli = Cli::parse();
    match cli.cmd {
        Cmd::Run { config, seed, out, abd } => {
            let mut sc = load(&config)?;
            if let Some(s) = seed {
                sc = sc.with_seed(s);
            }
            let protocol = if abd { Protocol::Abd } else { Protocol::Swarm };
            let run = run_scenario(&sc, protocol)?;
            print!("{}", summary(&run));
            if let Some(dir) = out {
                write_run(&run, &dir)?;
                println!("wrote {}", dir.display());
            }
            Ok(verdict(run.is_clean()))
        }
        Cmd::Sweep { config, slots, seeds, out } => {
            let sc = load(&config)?;
            let seeds: Vec<u64> = (sc.fabric.seed..sc.fabric.seed + seeds).collect();
            let points = sweep_buffers(&sc, &slots, &seeds)?;
            println!("slots  updates  1-rt fraction  clean runs");
            for p in &points {
                println!(
                    "{:>5}  {:>7}  {:>13.4}  {}/{}",
                    p.slots,
                    p.updates,
                    p.one_roundtrip_fraction(),
                    p.clean_runs,
                    p.seeds
                );
            }
            if let Some(path) = out {
                let mut w = csv::Writer::from_path(&path)?;
                w.write_record([
                    "slots",
                    "seeds",
                    "updates",
                    "one_roundtrip_updates",
                    "one_roundtrip_fraction",
                    "clean_runs",
                ])?;
                for p in &points {
                    w.write_record([
                        p.slots.to_string(),
                        p.seeds.to_string(),
                        p.updates.to_string(),
                        p.one_roundtrip_updates.to_string(),
                        format!("{:.6}", p.one_roundtrip_fraction()),
                        p.clean_runs.to_string(),
                    ])?;
                }
                w.flush()?;
            }
            Ok(verdict(points.iter().all(|p| p.clean_runs == p.seeds)))
        }
        Cmd::Check { histories, bound } => {
            let records = read_histories(&histories)?;
            let rep = check_records(&records, bound);
            println!("{}", serde_json::to_string_pretty(&rep)?);
            Ok(verdict(rep.is_clean()))
        }
        Cmd::Abd { config, out } => {
            let sc = load(&config)?;
            let cmp = compare_abd(&sc)?;
            print!("{}", cmp.report());
            if let Some(dir) = out {
                write_run(&cmp.swarm, &dir.join("swarm"))?;
                write_run(&cmp.abd, &dir.join("abd"))?;
            }
            Ok(verdict(cmp.swarm.is_clean() && cmp.abd.is_clean()))
        }
        Cmd::Random { seeds, first, mutation, dump } => {
            let m: Mutation = mutation.into();
            let rep = random_suite(first..first + seeds, m)?;
            println!("{}", serde_json::to_string_pretty(&rep)?);
            println!(
                "{} runs, {} histories (longest {}, brute-force bound {RANDOM_BOUND}), {} detected violations",
                rep.runs,
                rep.histories,
                rep.longest_history,
                rep.detected()
            );
            if let (Some(path), Some(&seed)) = (dump, rep.dirty_seeds.first()) {
                let mut sc = swarm_harness::experiments::random_scenario(seed);
                sc.store.mutation = m;
                let run = run_scenario(&sc, Protocol::Swarm)?;
                write_histories(&run.records, &path)?;
                println!("histories of seed {seed} written to {}", path.display());
            }
            Ok(verdict(rep.dirty_seeds.is_empty()))
        }
    }
}
