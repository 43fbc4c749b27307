//! Sweep drivers emitting CSV tables and scenario files.
//!
//! Seeds run in parallel; rows are collected in input order (sweep value
//! major, seed minor), so identical inputs give byte-identical tables.

use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::protocol::{dense_budget, run_experiment, run_experiment_logged, RunConfig, RunEvent, TradeoffPoint};
use crate::rng::derive_seed;
use crate::scenarios::Template;
use crate::world::Scenario;

/// Byte budget, absolute or as a percentage of the scenario's dense total.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Budget {
    Bytes(u64),
    Percent(f64),
}

impl Budget {
    pub fn resolve(&self, scenario: &Scenario) -> u64 {
        match *self {
            Budget::Bytes(b) => b,
            Budget::Percent(p) => {
                let dense = dense_budget(&scenario.grid, scenario.agents.len());
                (dense as f64 * p / 100.0).floor() as u64
            }
        }
    }
}

impl FromStr for Budget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::config(format!("invalid budget {s:?}; expected bytes or a percentage like 5%"));
        if let Some(p) = s.strip_suffix('%') {
            let p: f64 = p.trim().parse().map_err(|_| bad())?;
            if !(0.0..=100.0).contains(&p) {
                return Err(bad());
            }
            Ok(Budget::Percent(p))
        } else {
            s.parse().map(Budget::Bytes).map_err(|_| bad())
        }
    }
}

impl fmt::Display for Budget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Budget::Bytes(b) => write!(f, "{b}"),
            Budget::Percent(p) => write!(f, "{p}%"),
        }
    }
}

impl Serialize for Budget {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Budget::Bytes(b) => s.serialize_u64(*b),
            Budget::Percent(_) => s.serialize_str(&self.to_string()),
        }
    }
}

impl<'de> Deserialize<'de> for Budget {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Bytes(u64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Bytes(b) => Ok(Budget::Bytes(b)),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoundVariant {
    pub rounds: usize,
    #[serde(default)]
    pub allocation: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Family used for seeds when no scenario file is given.
    pub template: Template,
    /// Fixed scenario; each seed then only replaces its `rng_seed`.
    pub scenario: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub run: RunConfig,
    /// Budget for `run-one`, `sweep-rounds` and `sweep-noise`.
    pub budget: Budget,
    /// Ascending budgets for `sweep-bandwidth`.
    pub budgets: Vec<Budget>,
    pub round_variants: Vec<RoundVariant>,
    /// Pose-noise standard deviations in meters.
    pub sigmas: Vec<f64>,
    pub output: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            template: Template::Random,
            scenario: None,
            seeds: (0..20).collect(),
            run: RunConfig::default(),
            budget: Budget::Percent(100.0),
            budgets: [1.0, 5.0, 20.0, 100.0].map(Budget::Percent).to_vec(),
            round_variants: (1..=3)
                .map(|rounds| RoundVariant {
                    rounds,
                    allocation: None,
                })
                .collect(),
            sigmas: vec![0.0, 1.0, 2.0, 4.0],
            output: None,
            log: None,
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.run.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::from_json(&text)
    }

    pub fn scenario_for(&self, seed: u64) -> Result<Scenario> {
        match &self.scenario {
            Some(path) => {
                let mut s = Scenario::load(path)?;
                s.rng_seed = seed;
                Ok(s)
            }
            None => self.template.generate(seed),
        }
    }

    fn with_budget(&self, scenario: &Scenario, budget: Budget) -> RunConfig {
        let mut run = self.run.clone();
        run.protocol.total_budget = budget.resolve(scenario);
        run
    }
}

fn parallel_rows<J: Sync, R: Send>(jobs: &[J], f: impl Fn(&J) -> Result<R> + Sync) -> Result<Vec<R>> {
    jobs.par_iter().map(&f).collect()
}

fn fixed(v: f64) -> String {
    format!("{v:.6}")
}

/// One run summarized for a CSV row.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRow {
    pub seed: u64,
    pub rounds: usize,
    pub budget_bytes: u64,
    pub volume_log2: f64,
    pub request_bytes: u64,
    pub ap50: f64,
    pub ap70: f64,
    pub ap50_round0: f64,
}

impl RunRow {
    fn from_point(seed: u64, p: &TradeoffPoint) -> Self {
        RunRow {
            seed,
            rounds: p.rounds,
            budget_bytes: p.budget_bytes,
            volume_log2: p.volume_log2,
            request_bytes: p.request_bytes,
            ap50: p.ap50,
            ap70: p.ap70,
            ap50_round0: p.round_ap50[0],
        }
    }

    fn cells(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.seed,
            self.rounds,
            self.budget_bytes,
            fixed(self.volume_log2),
            self.request_bytes,
            fixed(self.ap50),
            fixed(self.ap70),
            fixed(self.ap50_round0)
        )
    }
}

const RUN_COLUMNS: &str = "seed,K,budget_bytes,volume_log2,request_bytes,ap50,ap70,ap50_round0";

#[derive(Clone, Debug, PartialEq)]
pub struct BandwidthRow {
    pub run: RunRow,
    pub budget: Budget,
}

pub fn sweep_bandwidth(cfg: &ExperimentConfig) -> Result<Vec<BandwidthRow>> {
    cfg.run.validate()?;
    let jobs: Vec<(Budget, u64)> = cfg
        .budgets
        .iter()
        .flat_map(|&b| cfg.seeds.iter().map(move |&s| (b, s)))
        .collect();
    let rows = parallel_rows(&jobs, |&(budget, seed)| {
        let scenario = cfg.scenario_for(seed)?;
        let resolved: Vec<u64> = cfg.budgets.iter().map(|b| b.resolve(&scenario)).collect();
        if resolved.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::config("budgets must be sorted ascending"));
        }
        let point = run_experiment(&scenario, &cfg.with_budget(&scenario, budget))?;
        Ok(BandwidthRow {
            run: RunRow::from_point(seed, &point),
            budget,
        })
    })?;
    Ok(rows)
}

pub fn bandwidth_csv(rows: &[BandwidthRow]) -> String {
    let mut out = format!("{RUN_COLUMNS},budget\n");
    for r in rows {
        let _ = writeln!(out, "{},{}", r.run.cells(), r.budget);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoundsRow {
    pub run: RunRow,
    pub allocation: Vec<f64>,
}

pub fn sweep_rounds(cfg: &ExperimentConfig) -> Result<Vec<RoundsRow>> {
    cfg.run.validate()?;
    for v in &cfg.round_variants {
        let mut p = cfg.run.protocol.clone();
        p.rounds = v.rounds;
        p.allocation = v.allocation.clone();
        p.validate()?;
    }
    let jobs: Vec<(&RoundVariant, u64)> = cfg
        .round_variants
        .iter()
        .flat_map(|v| cfg.seeds.iter().map(move |&s| (v, s)))
        .collect();
    parallel_rows(&jobs, |&(variant, seed)| {
        let scenario = cfg.scenario_for(seed)?;
        let mut run = cfg.with_budget(&scenario, cfg.budget);
        run.protocol.rounds = variant.rounds;
        run.protocol.allocation = variant.allocation.clone();
        let allocation = run.protocol.allocation();
        let point = run_experiment(&scenario, &run)?;
        Ok(RoundsRow {
            run: RunRow::from_point(seed, &point),
            allocation,
        })
    })
}

pub fn rounds_csv(rows: &[RoundsRow]) -> String {
    let mut out = format!("{RUN_COLUMNS},allocation\n");
    for r in rows {
        let alloc: Vec<String> = r.allocation.iter().map(f64::to_string).collect();
        let _ = writeln!(out, "{},{}", r.run.cells(), alloc.join(";"));
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    /// Confidence-driven sparse collaboration.
    SpatialConfidence,
    /// Each agent alone.
    NoCollab,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::SpatialConfidence => "spatial-confidence",
            Method::NoCollab => "no-collab",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseRow {
    pub sigma: f64,
    pub method: Method,
    pub run: RunRow,
}

pub fn sweep_noise(cfg: &ExperimentConfig) -> Result<Vec<NoiseRow>> {
    cfg.run.validate()?;
    if cfg.sigmas.iter().any(|s| !(*s >= 0.0 && s.is_finite())) {
        return Err(Error::config("sigmas must be finite and >= 0"));
    }
    let jobs: Vec<(f64, u64, Method)> = cfg
        .sigmas
        .iter()
        .flat_map(|&sigma| {
            cfg.seeds.iter().flat_map(move |&seed| {
                [Method::SpatialConfidence, Method::NoCollab].map(|m| (sigma, seed, m))
            })
        })
        .collect();
    parallel_rows(&jobs, |&(sigma, seed, method)| {
        let scenario = cfg.scenario_for(seed)?;
        let mut run = cfg.with_budget(&scenario, cfg.budget);
        run.protocol.noise_sigma = sigma;
        if method == Method::NoCollab {
            run.protocol.rounds = 0;
            run.protocol.allocation = None;
        }
        let point = run_experiment(&scenario, &run)?;
        Ok(NoiseRow {
            sigma,
            method,
            run: RunRow::from_point(seed, &point),
        })
    })
}

pub fn noise_csv(rows: &[NoiseRow]) -> String {
    let mut out = format!("sigma,method,{RUN_COLUMNS}\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{}", fixed(r.sigma), r.method.name(), r.run.cells());
    }
    out
}

/// Mean of `ap50`; 0 for no rows.
pub fn mean_ap50<'a>(rows: impl IntoIterator<Item = &'a RunRow>) -> f64 {
    let (sum, n) = rows.into_iter().fold((0.0, 0usize), |(s, n), r| (s + r.ap50, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Runs one experiment and returns its summary and log events.
pub fn run_one(cfg: &ExperimentConfig, seed: u64) -> Result<(TradeoffPoint, Vec<RunEvent>)> {
    let scenario = cfg.scenario_for(seed)?;
    run_experiment_logged(&scenario, &cfg.with_budget(&scenario, cfg.budget))
}

/// Writes `count` scenarios named `<template>-<index>.json`; scenario `i`
/// uses seed `derive_seed(seed, [i])`.
pub fn gen_scenarios(template: Template, count: usize, seed: u64, dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    if count > 0 {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    (0..count)
        .map(|i| {
            let scenario = template.generate(derive_seed(seed, &[i as u64]))?;
            let path = dir.join(format!("{}-{i:04}.json", template.name()));
            scenario.save(&path)?;
            Ok(path)
        })
        .collect()
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}
