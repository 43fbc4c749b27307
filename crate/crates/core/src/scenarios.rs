//! Seeded scenario families.
//!
//! Every template lives on a 32 x 32 grid of 2 m cells with 8 channels.
//! Objects are placed so that cells of different objects are never 3x3
//! neighbours, which keeps one decoded peak per visible object.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::GridShape;
use crate::rng::Lcg64;
use crate::world::{AgentPose, Occluder, Scenario, WorldObject};

pub const GRID_CELLS: usize = 32;
pub const CELL_SIZE: f64 = 2.0;
pub const CHANNELS: usize = 8;
const EXTENT: f64 = GRID_CELLS as f64 * CELL_SIZE;
const PLACEMENT_TRIES: usize = 2000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Template {
    /// 2 to 5 agents, 6 to 12 objects and 2 to 4 walls at random.
    Random,
    /// Two agents either side of a wall; one object hidden from agent 0
    /// but visible to agent 1, one object both see.
    Occlusion,
    /// Agent 0 sees everything; agent 1 shares the low-row objects but a
    /// wall hides a group of later-row objects from it. Confidence alone
    /// ranks the shared objects first.
    RequestBenefit,
}

impl Template {
    pub const ALL: [Template; 3] = [Template::Random, Template::Occlusion, Template::RequestBenefit];

    pub fn name(self) -> &'static str {
        match self {
            Template::Random => "random",
            Template::Occlusion => "occlusion",
            Template::RequestBenefit => "request-benefit",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Template::ALL
            .into_iter()
            .find(|t| t.name() == name)
            .ok_or_else(|| Error::config(format!("unknown scenario template {name:?}")))
    }

    pub fn generate(self, seed: u64) -> Result<Scenario> {
        let s = match self {
            Template::Random => random(seed)?,
            Template::Occlusion => occlusion(seed),
            Template::RequestBenefit => request_benefit(seed)?,
        };
        s.validate()?;
        Ok(s)
    }
}

fn grid() -> GridShape {
    GridShape::new(GRID_CELLS, GRID_CELLS, CHANNELS, CELL_SIZE).expect("template grid is valid")
}

/// Cells whose centers fall inside the object.
fn footprint(g: &GridShape, o: &WorldObject) -> Vec<(usize, usize)> {
    let reach = o.length.max(o.width);
    let lo = |v: f64| (((v - reach) / g.cell_size).floor().max(0.0)) as usize;
    let hi = |v: f64, n: usize| ((((v + reach) / g.cell_size).ceil()) as usize).min(n);
    let mut cells = Vec::new();
    for r in lo(o.y)..hi(o.y, g.height) {
        for c in lo(o.x)..hi(o.x, g.width) {
            let (x, y) = g.cell_center(r, c);
            if o.contains(x, y) {
                cells.push((r, c));
            }
        }
    }
    cells
}

fn chebyshev(a: (usize, usize), b: (usize, usize)) -> usize {
    a.0.abs_diff(b.0).max(a.1.abs_diff(b.1))
}

struct Placer {
    grid: GridShape,
    taken: Vec<(usize, usize)>,
    blocked: Vec<(usize, usize)>,
    occluders: Vec<Occluder>,
    objects: Vec<WorldObject>,
}

impl Placer {
    fn new(agents: &[AgentPose], occluders: Vec<Occluder>) -> Self {
        let grid = grid();
        let blocked = agents
            .iter()
            .filter_map(|a| grid.cell_of(a.x, a.y))
            .collect();
        Placer {
            grid,
            taken: Vec::new(),
            blocked,
            occluders,
            objects: Vec::new(),
        }
    }

    /// Adds the object when its footprint is nonempty, clear of walls,
    /// agents and other objects' 3x3 neighbourhoods.
    fn try_place(&mut self, x: f64, y: f64, length: f64, width: f64, yaw: f64) -> bool {
        let o = WorldObject {
            id: self.objects.len() as u32,
            x,
            y,
            length,
            width,
            yaw,
        };
        let cells = footprint(&self.grid, &o);
        let clear = !cells.is_empty()
            && cells.iter().all(|&c| {
                let (cx, cy) = self.grid.cell_center(c.0, c.1);
                self.taken.iter().all(|&t| chebyshev(c, t) >= 2)
                    && self.blocked.iter().all(|&b| chebyshev(c, b) >= 1)
                    && self.occluders.iter().all(|w| !w.contains(cx, cy))
            })
            && self.occluders.iter().all(|w| {
                let (hx, hy) = if yaw == 0.0 { (length, width) } else { (width, length) };
                x + hx / 2.0 < w.x_min || x - hx / 2.0 > w.x_max || y + hy / 2.0 < w.y_min || y - hy / 2.0 > w.y_max
            });
        if clear {
            self.taken.extend(cells);
            self.objects.push(o);
        }
        clear
    }

    fn place_random(&mut self, g: &mut Lcg64, x_range: (f64, f64), y_range: (f64, f64)) -> bool {
        for _ in 0..PLACEMENT_TRIES {
            let length = g.uniform(2.1, 3.8);
            let width = g.uniform(2.1, 3.0);
            let yaw = if g.next_f64() < 0.5 { 0.0 } else { FRAC_PI_2 };
            let x = g.uniform(x_range.0, x_range.1);
            let y = g.uniform(y_range.0, y_range.1);
            if self.try_place(x, y, length, width, yaw) {
                return true;
            }
        }
        false
    }
}

fn random(seed: u64) -> Result<Scenario> {
    let mut g = Lcg64::new(seed);
    let n = g.range_inclusive(2, 5);
    let agents: Vec<AgentPose> = (0..n)
        .map(|_| AgentPose {
            x: g.uniform(4.0, EXTENT - 4.0),
            y: g.uniform(4.0, EXTENT - 4.0),
            yaw: 0.0,
            sensing_range: 30.0,
        })
        .collect();

    let walls = g.range_inclusive(2, 4);
    let mut occluders = Vec::with_capacity(walls);
    let mut tries = 0;
    while occluders.len() < walls && tries < PLACEMENT_TRIES {
        tries += 1;
        let thick = g.uniform(2.0, 4.0);
        let long = g.uniform(8.0, 16.0);
        let (w, h) = if g.next_f64() < 0.5 { (thick, long) } else { (long, thick) };
        let x = g.uniform(0.0, EXTENT - w);
        let y = g.uniform(0.0, EXTENT - h);
        let wall = Occluder {
            x_min: x,
            y_min: y,
            x_max: x + w,
            y_max: y + h,
            opaque: true,
        };
        let clear = agents.iter().all(|a| {
            a.x < wall.x_min - 2.0 || a.x > wall.x_max + 2.0 || a.y < wall.y_min - 2.0 || a.y > wall.y_max + 2.0
        });
        if clear {
            occluders.push(wall);
        }
    }

    let mut placer = Placer::new(&agents, occluders);
    let count = g.range_inclusive(6, 12);
    for _ in 0..count {
        if !placer.place_random(&mut g, (2.0, EXTENT - 2.0), (2.0, EXTENT - 2.0)) {
            break;
        }
    }
    Ok(Scenario {
        grid: placer.grid,
        agents,
        objects: placer.objects,
        occluders: placer.occluders,
        rng_seed: seed,
    })
}

fn occlusion(seed: u64) -> Scenario {
    let agents = vec![
        AgentPose { x: 8.0, y: 32.0, yaw: 0.0, sensing_range: 40.0 },
        AgentPose { x: 52.0, y: 32.0, yaw: 0.0, sensing_range: 40.0 },
    ];
    let wall = Occluder { x_min: 20.0, y_min: 24.0, x_max: 24.0, y_max: 40.0, opaque: true };
    let mut placer = Placer::new(&agents, vec![wall]);
    assert!(placer.try_place(36.0, 32.0, 3.0, 2.5, 0.0));
    assert!(placer.try_place(30.0, 52.0, 3.0, 2.5, 0.0));
    Scenario {
        grid: placer.grid,
        agents,
        objects: placer.objects,
        occluders: placer.occluders,
        rng_seed: seed,
    }
}

fn request_benefit(seed: u64) -> Result<Scenario> {
    let mut g = Lcg64::new(seed);
    let agents = vec![
        AgentPose { x: 8.0, y: 30.0, yaw: 0.0, sensing_range: 80.0 },
        AgentPose { x: 56.0, y: 30.0, yaw: 0.0, sensing_range: 80.0 },
    ];
    let wall = Occluder { x_min: 34.0, y_min: 31.0, x_max: 38.0, y_max: 64.0, opaque: true };
    let mut placer = Placer::new(&agents, vec![wall]);
    for _ in 0..10 {
        if !placer.place_random(&mut g, (4.0, EXTENT - 4.0), (5.0, 21.0)) {
            return Err(Error::config("request-benefit template could not place shared objects"));
        }
    }
    let hidden = g.range_inclusive(3, 4);
    for _ in 0..hidden {
        if !placer.place_random(&mut g, (8.0, 28.0), (42.0, 58.0)) {
            return Err(Error::config("request-benefit template could not place hidden objects"));
        }
    }
    Ok(Scenario {
        grid: placer.grid,
        agents,
        objects: placer.objects,
        occluders: placer.occluders,
        rng_seed: seed,
    })
}

/// Object cells visible to an agent.
pub fn visible_cells(scenario: &Scenario, agent: usize, object: usize) -> Result<usize> {
    let mut n = 0;
    for cell in footprint(&scenario.grid, &scenario.objects[object]) {
        n += crate::world::visibility(&scenario.agents[agent], cell, scenario)? as usize;
    }
    Ok(n)
}
