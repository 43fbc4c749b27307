use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spatialcomm::error::Error;
use spatialcomm::experiment::{
    bandwidth_csv, gen_scenarios, noise_csv, rounds_csv, run_one, sweep_bandwidth, sweep_noise, sweep_rounds,
    write_text, Budget, ExperimentConfig, RoundVariant,
};
use spatialcomm::protocol::write_log;
use spatialcomm::scenarios::Template;

/// Bandwidth-limited collaborative perception experiments.
#[derive(Parser)]
#[command(name = "spatialcomm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// AP against feature budget, one row per (budget, seed).
    SweepBandwidth {
        #[command(flatten)]
        common: Common,
        /// Comma-separated ascending budgets, bytes or percentages.
        #[arg(long, value_delimiter = ',')]
        budgets: Option<Vec<String>>,
    },
    /// AP for several round counts at one total budget.
    SweepRounds {
        #[command(flatten)]
        common: Common,
        /// Round variant `K` or `K:f1,f2,...`; repeatable.
        #[arg(long = "variant")]
        variants: Vec<String>,
    },
    /// AP against pose-noise standard deviation, with the no-collaboration baseline.
    SweepNoise {
        #[command(flatten)]
        common: Common,
        /// Comma-separated sigmas in meters.
        #[arg(long, value_delimiter = ',')]
        sigmas: Option<Vec<f64>>,
    },
    /// Writes a deterministic family of scenario files.
    GenScenarios {
        #[arg(long)]
        template: String,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// One experiment with its per-round log.
    RunOne {
        #[command(flatten)]
        common: Common,
        /// Seed of the run; defaults to the first configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON); flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Scenario template used when no scenario file is given.
    #[arg(long)]
    template: Option<String>,
    /// Fixed scenario file; seeds then vary only its random streams.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Seeds as `a..b` or a comma-separated list.
    #[arg(long)]
    seeds: Option<String>,
    /// Communication rounds.
    #[arg(long)]
    rounds: Option<usize>,
    /// Total budget, bytes or a percentage of the dense total.
    #[arg(long)]
    budget: Option<String>,
    /// Pose-noise standard deviation in meters.
    #[arg(long)]
    noise_sigma: Option<f64>,
    /// Detection threshold on channel 0.
    #[arg(long)]
    threshold: Option<f64>,
    /// Output file; stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Per-run JSON-lines log (run-one).
    #[arg(long)]
    log: Option<PathBuf>,
}

fn parse_seeds(text: &str) -> Result<Vec<u64>, Error> {
    let bad = || Error::Config(format!("invalid seeds {text:?}; expected a..b or a,b,c"));
    if let Some((a, b)) = text.split_once("..") {
        let (a, b): (u64, u64) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        return Ok((a..b).collect());
    }
    text.split(',').map(|s| s.trim().parse().map_err(|_| bad())).collect()
}

fn parse_variant(text: &str) -> Result<RoundVariant, Error> {
    let bad = || Error::Config(format!("invalid round variant {text:?}; expected K or K:f1,f2"));
    let (k, alloc) = match text.split_once(':') {
        Some((k, a)) => (k, Some(a)),
        None => (text, None),
    };
    let rounds = k.trim().parse().map_err(|_| bad())?;
    let allocation = alloc
        .map(|a| a.split(',').map(|f| f.trim().parse::<f64>().map_err(|_| bad())).collect())
        .transpose()?;
    Ok(RoundVariant { rounds, allocation })
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(t) = &self.template {
            cfg.template = Template::parse(t)?;
        }
        if let Some(s) = &self.scenario {
            cfg.scenario = Some(s.clone());
        }
        if let Some(s) = &self.seeds {
            cfg.seeds = parse_seeds(s)?;
        }
        if let Some(k) = self.rounds {
            cfg.run.protocol.rounds = k;
            cfg.run.protocol.allocation = None;
        }
        if let Some(b) = &self.budget {
            cfg.budget = b.parse()?;
        }
        if let Some(s) = self.noise_sigma {
            cfg.run.protocol.noise_sigma = s;
        }
        if let Some(t) = self.threshold {
            cfg.run.detection_threshold = t;
        }
        if let Some(o) = &self.output {
            cfg.output = Some(o.clone());
        }
        if let Some(l) = &self.log {
            cfg.log = Some(l.clone());
        }
        cfg.run.validate()?;
        Ok(cfg)
    }
}

fn emit(output: Option<&Path>, text: &str) -> Result<(), Error> {
    match output {
        Some(path) => write_text(path, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::SweepBandwidth { common, budgets } => {
            let mut cfg = common.resolve()?;
            if let Some(b) = budgets {
                cfg.budgets = b.iter().map(|s| s.parse()).collect::<Result<Vec<Budget>, _>>()?;
            }
            let rows = sweep_bandwidth(&cfg)?;
            emit(cfg.output.as_deref(), &bandwidth_csv(&rows))
        }
        Command::SweepRounds { common, variants } => {
            let mut cfg = common.resolve()?;
            if !variants.is_empty() {
                cfg.round_variants = variants.iter().map(|v| parse_variant(v)).collect::<Result<_, _>>()?;
            }
            let rows = sweep_rounds(&cfg)?;
            emit(cfg.output.as_deref(), &rounds_csv(&rows))
        }
        Command::SweepNoise { common, sigmas } => {
            let mut cfg = common.resolve()?;
            if let Some(s) = sigmas {
                cfg.sigmas = s;
            }
            let rows = sweep_noise(&cfg)?;
            emit(cfg.output.as_deref(), &noise_csv(&rows))
        }
        Command::GenScenarios {
            template,
            count,
            seed,
            out,
        } => {
            let paths = gen_scenarios(Template::parse(&template)?, count, seed, &out)?;
            for p in paths {
                println!("{}", p.display());
            }
            Ok(())
        }
        Command::RunOne { common, seed } => {
            let cfg = common.resolve()?;
            let seed = seed
                .or_else(|| cfg.seeds.first().copied())
                .ok_or_else(|| Error::Config("no seed given".into()))?;
            let (point, events) = run_one(&cfg, seed)?;
            if let Some(path) = &cfg.log {
                let mut buf = Vec::new();
                write_log(&mut buf, &events)?;
                std::fs::write(path, buf).map_err(|e| Error::Io {
                    path: path.display().to_string(),
                    source: e,
                })?;
            }
            let mut text = serde_json::to_string_pretty(&point)?;
            text.push('\n');
            emit(cfg.output.as_deref(), &text)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Io { .. } => 3,
                Error::Config(_) | Error::Json(_) => 2,
                _ => 1,
            })
        }
    }
}
