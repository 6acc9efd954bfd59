//! `dfl`: single runs, grid sweeps and seed statistics.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use dfl::experiment::{
    aggregate_seeds, collect_finals, combine_group_stats, format_pm, grid_search, run_single,
    GridSpec, RunConfig, DATA_DIR_ENV, METRICS_FILE, SUMMARY_FILE,
};

#[derive(Debug, Parser)]
#[command(
    name = "dfl",
    version,
    about = "Train with a teacher pool and student resets, sweep grids, aggregate seeds",
    after_help = format!("Dataset root: `data_dir` in the config, else ${DATA_DIR_ENV}, else ./data")
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train one configuration and write its run directory.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep teacher counts and cycle lengths over several seeds.
    Grid {
        #[arg(long)]
        config: PathBuf,
        /// Teacher counts, e.g. 1,2,4,8.
        #[arg(long, value_delimiter = ',', required = true)]
        k: Vec<usize>,
        /// Cycle lengths in epochs, e.g. 1,20,50,100.
        #[arg(long, value_delimiter = ',', required = true)]
        t: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        seeds: usize,
    },
    /// Mean ± population std of the final test accuracy of run directories.
    /// A directory without metrics is searched for `run-*` subdirectories.
    Aggregate {
        #[arg(required = true)]
        dirs: Vec<PathBuf>,
    },
    /// Combine two equal-size groups given as MEAN,STD.
    Combine {
        #[arg(long, value_parser = parse_pair, allow_hyphen_values = true)]
        a: (f64, f64),
        #[arg(long, value_parser = parse_pair, allow_hyphen_values = true)]
        b: (f64, f64),
    },
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let (m, sd) = s.split_once(',').ok_or_else(|| format!("expected MEAN,STD, got {s:?}"))?;
    let num = |v: &str| {
        v.trim()
            .parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .ok_or_else(|| format!("bad number {v:?}"))
    };
    let (m, sd) = (num(m)?, num(sd)?);
    if sd < 0.0 {
        return Err(format!("standard deviation {sd} is negative"));
    }
    Ok((m, sd))
}

fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    RunConfig::parse(&text).with_context(|| format!("in {}", path.display()))
}

fn run(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.out = o;
    }
    let k = cfg.dfl.teachers;
    let outcome = run_single(&cfg, |r| {
        let teachers: Vec<String> = r.train_acc[1..].iter().map(|a| format!("{a:.3}")).collect();
        let events: Vec<String> = r.events.iter().map(ToString::to_string).collect();
        let mut line = format!(
            "epoch {:>3}  lr {:.5}  loss {:.4}",
            r.epoch, r.lr, r.train_loss_main
        );
        if k > 0 {
            line += &format!("  distill {:.4}", r.train_loss_distill);
        }
        line += &format!("  train {:.4}", r.train_acc[0]);
        if k > 0 {
            line += &format!(" [{}]", teachers.join(" "));
        }
        line += &format!("  test {:.4}", r.test_acc);
        if !events.is_empty() {
            line += &format!("  {}", events.join(" "));
        }
        println!("{line}");
    })?;
    println!("{}", outcome.dir.display());
    Ok(())
}

fn grid(config: &Path, k: Vec<usize>, t: Vec<usize>, seeds: usize) -> Result<()> {
    let base = load_config(config)?;
    let spec = GridSpec {
        teachers: k,
        cycles: t,
        seeds,
    };
    let summary = grid_search(&base, &spec, |m| eprintln!("{m}"))?;
    println!("{}", summary.header().join(","));
    for row in summary.rows() {
        println!("{}", row.join(","));
    }
    let failures: usize = summary.cells.iter().map(|c| c.failures.len()).sum();
    eprintln!("summary written to {}", base.out.join(SUMMARY_FILE).display());
    if failures > 0 {
        bail!("{failures} run(s) failed");
    }
    Ok(())
}

fn run_dirs(dirs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for d in dirs {
        if d.join(METRICS_FILE).is_file() {
            out.push(d.clone());
            continue;
        }
        let mut found: Vec<PathBuf> = std::fs::read_dir(d)
            .with_context(|| format!("reading {}", d.display()))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.file_name().is_some_and(|n| n.to_string_lossy().starts_with("run-"))
                    && p.join(METRICS_FILE).is_file()
            })
            .collect();
        if found.is_empty() {
            bail!("{} holds no {METRICS_FILE} and no run directories", d.display());
        }
        found.sort();
        out.extend(found);
    }
    Ok(out)
}

fn aggregate(dirs: &[PathBuf]) -> Result<()> {
    let dirs = run_dirs(dirs)?;
    let finals = collect_finals(&dirs)?;
    for (d, acc) in dirs.iter().zip(&finals) {
        println!("{},{:.2}", d.display(), acc * 100.0);
    }
    let pct: Vec<f64> = finals.iter().map(|a| a * 100.0).collect();
    let (m, s) = aggregate_seeds(&pct)?;
    println!("{} (n={})", format_pm(m, s), pct.len());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, seed, out } => run(&config, seed, out),
        Command::Grid { config, k, t, seeds } => grid(&config, k, t, seeds),
        Command::Aggregate { dirs } => aggregate(&dirs),
        Command::Combine { a, b } => {
            let (m, s) = combine_group_stats(a.0, a.1, b.0, b.1);
            println!("{}", format_pm(m, s));
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
