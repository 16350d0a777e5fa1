use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use starris_core::harness::{run_experiment_with, tail_len};
use starris_core::{
    compare, complexity_report, export, import, sweep, ExperimentConfig, Metric, MetricsLog, Profile, Scenario,
    SweepVariable,
};

#[derive(Parser)]
#[command(name = "starris", version, about = "Multi-active STAR-RIS NOMA experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scenario flags joined by `+`, e.g. `ddpg+passive+single_reflection`.
    #[arg(long)]
    scenario: Option<String>,
    /// Comma-separated seed list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Reduced topology and episode count (default).
    #[arg(long, conflicts_with = "paper")]
    desk: bool,
    /// Full-scale simulation parameters.
    #[arg(long)]
    paper: bool,
    /// Override the number of training episodes.
    #[arg(long)]
    episodes: Option<usize>,
    /// Suppress progress output on stderr.
    #[arg(long, short)]
    quiet: bool,
}

impl Common {
    fn profile(&self) -> Profile {
        if self.paper {
            Profile::Paper
        } else {
            Profile::Desk
        }
    }

    fn experiment(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path, self.profile())?,
            None => ExperimentConfig::for_profile(self.profile()),
        };
        if let Some(s) = &self.scenario {
            cfg.scenario = Scenario::parse(s)?;
            cfg.agent.kind = cfg.scenario.algorithm;
        }
        if let Some(seeds) = &self.seeds {
            cfg.seeds = seeds.clone();
        }
        if let Some(e) = self.episodes {
            cfg.episodes = e;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one agent per seed and report tail statistics.
    Train {
        #[command(flatten)]
        common: Common,
        /// Write the per-episode log as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Repeat training over increasing values of one variable.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// `p_max`, `elements` or `users`.
        #[arg(long)]
        variable: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        /// Directory receiving one CSV per value.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Tail-window comparison of two logs trained on the same seeds.
    Compare {
        a: PathBuf,
        b: PathBuf,
        /// `reward`, `total_rate` or `min_rate`.
        #[arg(long, default_value = "reward")]
        metric: String,
    },
    /// Operation counts of the actor, critic and meta-critic.
    Flops {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',')]
        actor: Option<Vec<usize>>,
        #[arg(long, value_delimiter = ',')]
        critic: Option<Vec<usize>>,
        /// Meta-critic layer sizes; pass `--meta ''` for none.
        #[arg(long, value_delimiter = ',')]
        meta: Option<Vec<String>>,
        #[arg(long, default_value_t = 1.0)]
        activation_cost: f64,
    },
    /// Rewrite a log in canonical form, or as a seed-averaged curve.
    Export {
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-episode mean and standard deviation across seeds.
        #[arg(long)]
        curve: bool,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { common, out } => {
            let cfg = common.experiment()?;
            let log = run(&cfg, common.quiet)?;
            print_summary(&cfg, &log)?;
            if let Some(path) = out {
                export(&log, &path)?;
                println!("wrote {}", path.display());
            }
        }
        Command::Sweep {
            common,
            variable,
            values,
            out,
        } => {
            let cfg = common.experiment()?;
            let var = SweepVariable::parse(&variable)?;
            if !common.quiet {
                eprintln!("sweeping {} over {values:?} with seeds {:?}", var.tag(), cfg.seeds);
            }
            let family = sweep(&cfg, var, &values)?;
            if let Some(dir) = &out {
                std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            println!("{:>12} {:>14} {:>10} {:>14} {:>10}", var.tag(), "tail_rate", "std", "tail_reward", "std");
            for (value, log) in &family {
                let (rm, rs) = log.tail_stats(Metric::TotalRate)?;
                let (wm, ws) = log.tail_stats(Metric::Reward)?;
                println!("{value:>12} {rm:>14.4} {rs:>10.4} {wm:>14.4} {ws:>10.4}");
                if let Some(dir) = &out {
                    let path = dir.join(format!("{}_{value}.csv", var.tag()));
                    export(log, &path)?;
                }
            }
        }
        Command::Compare { a, b, metric } => {
            let metric = Metric::parse(&metric)?;
            let (la, lb) = (import(&a)?, import(&b)?);
            let c = compare(&la, &lb, metric)?;
            println!("metric         {}", metric.tag());
            println!("tail episodes  {}", tail_len(la.episodes()?));
            println!("mean A         {:.6}", c.mean_a);
            println!("mean B         {:.6}", c.mean_b);
            println!("relative gain  {:+.4}%", 100.0 * c.relative_gain);
            println!("paired A>B     {} of {}", c.positive, c.paired.len());
            for (seed, d) in &c.paired {
                println!("  seed {seed:>6}  {d:+.6}");
            }
        }
        Command::Flops {
            common,
            actor,
            critic,
            meta,
            activation_cost,
        } => {
            let meta = match meta {
                Some(v) => Some(
                    v.iter()
                        .filter(|s| !s.trim().is_empty())
                        .map(|s| s.trim().parse::<usize>().with_context(|| format!("bad layer size `{s}`")))
                        .collect::<Result<Vec<_>>>()?,
                ),
                None => None,
            };
            let (da, dc, dm) = if actor.is_none() || critic.is_none() || meta.is_none() {
                common.experiment()?.architectures()?
            } else {
                Default::default()
            };
            let report = complexity_report(
                &actor.unwrap_or(da),
                &critic.unwrap_or(dc),
                &meta.unwrap_or(dm),
                activation_cost,
            );
            println!("{report}");
        }
        Command::Export { input, out, curve } => {
            let log = import(&input)?;
            if curve {
                write_curve(&log, &out)?;
            } else {
                export(&log, &out)?;
            }
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn run(cfg: &ExperimentConfig, quiet: bool) -> Result<MetricsLog> {
    if !quiet {
        eprintln!(
            "training {} on seeds {:?}: {} episodes x {} steps",
            cfg.scenario, cfg.seeds, cfg.episodes, cfg.t_max
        );
    }
    let every = (cfg.episodes / 10).max(1);
    let log = run_experiment_with(cfg, |seed, s| {
        if !quiet && (s.episode + 1) % every == 0 {
            eprintln!(
                "seed {seed} episode {:>5}  reward {:>9.4}  rate {:>8.4}  feasible {:>3}",
                s.episode + 1,
                s.reward,
                s.total_rate,
                s.feasible_steps
            );
        }
    })?;
    Ok(log)
}

fn print_summary(cfg: &ExperimentConfig, log: &MetricsLog) -> Result<()> {
    println!("scenario       {}", cfg.scenario);
    println!("seeds          {:?}", log.seeds());
    println!("tail episodes  {}", tail_len(log.episodes()?));
    for metric in [Metric::Reward, Metric::TotalRate, Metric::MinRate] {
        let (m, s) = log.tail_stats(metric)?;
        println!("{:<14} {m:.6} +/- {s:.6}", metric.tag());
    }
    Ok(())
}

fn write_curve(log: &MetricsLog, path: &Path) -> Result<()> {
    if log.records.is_empty() {
        bail!("log has no records");
    }
    let metrics = [Metric::Reward, Metric::TotalRate, Metric::MinRate];
    let stats = metrics
        .iter()
        .map(|&m| log.episode_stats(m))
        .collect::<starris_core::Result<Vec<_>>>()?;
    let mut out = Vec::new();
    write!(out, "episode")?;
    for m in metrics {
        write!(out, ",{0}_mean,{0}_std", m.tag())?;
    }
    writeln!(out)?;
    for e in 0..log.episodes()? {
        write!(out, "{e}")?;
        for s in &stats {
            write!(out, ",{:?},{:?}", s[e].0, s[e].1)?;
        }
        writeln!(out)?;
    }
    std::fs::write(path, out).with_context(|| format!("writing {}", path.display()))

}
