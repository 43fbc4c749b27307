//! Synthetic scenes and the synthetic BEV encoder.
//!
//! The encoder writes seven semantic channels per cell:
//!
//! | channel | content                                              |
//! |---------|------------------------------------------------------|
//! | 0       | objectness `s = clamp(visible * occupied + noise)`   |
//! | 1, 2    | `s * (object center - cell center)` in meters        |
//! | 3, 4    | `s * ln(length)`, `s * ln(width)`                    |
//! | 5, 6    | `s * cos(yaw)`, `s * sin(yaw)`                       |
//! | 7..D    | seeded uniform values in `[-1, 1]`                   |
//!
//! Regression channels are weighted by objectness, so any nonnegative mix of
//! vectors describing the same box decodes back to that box (see
//! [`crate::detect::decode`]).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FeatureMap, GridShape};
use crate::rng::Lcg64;

pub const SEMANTIC_CHANNELS: usize = 7;

const STREAM_ENCODER_NOISE: u64 = 0x454e_4f49;
const STREAM_ENCODER_EXTRA: u64 = 0x4558_5452;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentPose {
    pub x: f64,
    pub y: f64,
    #[serde(default)]
    pub yaw: f64,
    pub sensing_range: f64,
}

impl AgentPose {
    pub fn distance_to(&self, x: f64, y: f64) -> f64 {
        (x - self.x).hypot(y - self.y)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldObject {
    pub id: u32,
    pub x: f64,
    pub y: f64,
    pub length: f64,
    pub width: f64,
    #[serde(default)]
    pub yaw: f64,
}

impl WorldObject {
    /// Whether a point lies inside the rotated footprint (boundary inclusive).
    pub fn contains(&self, px: f64, py: f64) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let dx = px - self.x;
        let dy = py - self.y;
        let along = dx * c + dy * s;
        let across = -dx * s + dy * c;
        along.abs() <= self.length / 2.0 + 1e-9 && across.abs() <= self.width / 2.0 + 1e-9
    }
}

fn default_opaque() -> bool {
    true
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Occluder {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
    #[serde(default = "default_opaque")]
    pub opaque: bool,
}

impl Occluder {
    pub fn contains(&self, x: f64, y: f64) -> bool {
        (self.x_min..=self.x_max).contains(&x) && (self.y_min..=self.y_max).contains(&y)
    }

    /// Closed segment / closed rectangle intersection (Liang-Barsky clip).
    pub fn intersects_segment(&self, from: (f64, f64), to: (f64, f64)) -> bool {
        let dx = to.0 - from.0;
        let dy = to.1 - from.1;
        let mut t0 = 0.0f64;
        let mut t1 = 1.0f64;
        let edges = [
            (-dx, from.0 - self.x_min),
            (dx, self.x_max - from.0),
            (-dy, from.1 - self.y_min),
            (dy, self.y_max - from.1),
        ];
        for (p, q) in edges {
            if p == 0.0 {
                if q < 0.0 {
                    return false;
                }
            } else {
                let t = q / p;
                if p < 0.0 {
                    t0 = t0.max(t);
                } else {
                    t1 = t1.min(t);
                }
                if t0 > t1 {
                    return false;
                }
            }
        }
        true
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub grid: GridShape,
    pub agents: Vec<AgentPose>,
    pub objects: Vec<WorldObject>,
    #[serde(default)]
    pub occluders: Vec<Occluder>,
    pub rng_seed: u64,
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        if self.agents.is_empty() {
            return Err(Error::config("scenario needs at least one agent"));
        }
        for (i, a) in self.agents.iter().enumerate() {
            if !(a.sensing_range > 0.0) {
                return Err(Error::config(format!("agent {i}: sensing_range must be > 0")));
            }
            if !(-std::f64::consts::PI..std::f64::consts::PI).contains(&a.yaw) {
                return Err(Error::config(format!("agent {i}: yaw must lie in [-pi, pi)")));
            }
            if !self.grid.contains_point(a.x, a.y) {
                return Err(Error::config(format!("agent {i} lies outside the grid")));
            }
        }
        let mut ids: Vec<u32> = self.objects.iter().map(|o| o.id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("object ids must be unique"));
        }
        for o in &self.objects {
            if !(o.length > 0.0 && o.width > 0.0) {
                return Err(Error::config(format!("object {}: size must be > 0", o.id)));
            }
            if !self.grid.contains_point(o.x, o.y) {
                return Err(Error::config(format!("object {} lies outside the grid", o.id)));
            }
        }
        for (i, occ) in self.occluders.iter().enumerate() {
            if !(occ.x_min < occ.x_max && occ.y_min < occ.y_max) {
                return Err(Error::config(format!("occluder {i}: empty rectangle")));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut text = self.to_json()?;
        text.push('\n');
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Object index occupying each cell (first listed object wins overlaps).
    pub fn occupancy(&self) -> Vec<Option<usize>> {
        let g = &self.grid;
        (0..g.cells())
            .map(|flat| {
                let (r, c) = g.row_col(flat);
                let (x, y) = g.cell_center(r, c);
                self.objects.iter().position(|o| o.contains(x, y))
            })
            .collect()
    }
}

/// Binary line-of-sight visibility of a cell center from an agent.
pub fn visibility(agent: &AgentPose, cell: (usize, usize), scenario: &Scenario) -> Result<f64> {
    let g = &scenario.grid;
    if cell.0 >= g.height || cell.1 >= g.width {
        return Err(Error::dim(format!(
            "cell {:?} outside {}x{} grid",
            cell, g.height, g.width
        )));
    }
    let target = g.cell_center(cell.0, cell.1);
    if agent.distance_to(target.0, target.1) > agent.sensing_range {
        return Ok(0.0);
    }
    let blocked = scenario
        .occluders
        .iter()
        .any(|o| o.opaque && o.intersects_segment((agent.x, agent.y), target));
    Ok(if blocked { 0.0 } else { 1.0 })
}

/// Encoder noise knobs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Half-width of the uniform noise added to channel 0.
    pub noise_amplitude: f64,
    /// Relative amplitude growth at the edge of the sensing range:
    /// `amplitude * (1 + gain * distance / range)`.
    pub noise_distance_gain: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            noise_amplitude: 0.0,
            noise_distance_gain: 0.0,
        }
    }
}

/// Synthetic per-agent BEV features, deterministic in `scenario.rng_seed`.
pub fn encode(agent_index: usize, scenario: &Scenario, cfg: &EncoderConfig) -> Result<FeatureMap> {
    let g = scenario.grid;
    if g.channels < SEMANTIC_CHANNELS {
        return Err(Error::config(format!(
            "encoder needs at least {SEMANTIC_CHANNELS} channels, grid has {}",
            g.channels
        )));
    }
    let agent = scenario
        .agents
        .get(agent_index)
        .ok_or_else(|| Error::config(format!("no agent {agent_index} in scenario")))?;

    let occupancy = scenario.occupancy();
    let mut noise = Lcg64::stream(scenario.rng_seed, &[STREAM_ENCODER_NOISE, agent_index as u64]);
    let mut extra = Lcg64::stream(scenario.rng_seed, &[STREAM_ENCODER_EXTRA, agent_index as u64]);
    let mut out = FeatureMap::zeros(g);

    for flat in 0..g.cells() {
        let (r, c) = g.row_col(flat);
        let (cx, cy) = g.cell_center(r, c);
        let vis = visibility(agent, (r, c), scenario)?;
        let hit = occupancy[flat].filter(|_| vis > 0.0);
        let base = if hit.is_some() { 1.0 } else { 0.0 };

        let jitter = noise.uniform(-1.0, 1.0);
        let amplitude = cfg.noise_amplitude
            * (1.0 + cfg.noise_distance_gain * agent.distance_to(cx, cy) / agent.sensing_range);
        let objectness = (base + amplitude * jitter).clamp(0.0, 1.0);

        let cell = out.cell_mut(flat);
        cell[0] = objectness;
        if let Some(idx) = hit {
            let o = &scenario.objects[idx];
            cell[1] = objectness * (o.x - cx);
            cell[2] = objectness * (o.y - cy);
            cell[3] = objectness * o.length.ln();
            cell[4] = objectness * o.width.ln();
            cell[5] = objectness * o.yaw.cos();
            cell[6] = objectness * o.yaw.sin();
        }
        for slot in cell.iter_mut().skip(SEMANTIC_CHANNELS) {
            *slot = extra.uniform(-1.0, 1.0);
        }
    }
    Ok(out)
}

/// Ground truth shared by every agent: all objects inside the grid extent,
/// occluded or not.
pub fn ground_truth(scenario: &Scenario) -> Vec<WorldObject> {
    scenario
        .objects
        .iter()
        .filter(|o| scenario.grid.contains_point(o.x, o.y))
        .cloned()
        .collect()
}
