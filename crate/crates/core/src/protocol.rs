//! Multi-round orchestration: budgets, packing, transport, warping, fusion.
//!
//! Each round runs in barrier-separated phases. Every agent regenerates its
//! confidence from its current features, packs one message per active
//! directed link, and the messages cross as encoded bytes. Receivers decode,
//! warp into their own frame under the sender's pose error, fuse, and keep
//! the received request maps for the next round's packing.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::confidence::{confidence_from_request, generate_confidence, request_map, GeneratorConfig};
use crate::detect::{decode, evaluate, EvalResult};
use crate::error::{Error, Result};
use crate::fusion::{Contribution, FusionConfig, FusionModel};
use crate::graph::{build_graph, MaskTable};
use crate::grid::{FeatureMap, GridShape, ScalarMap, SelectionMask};
use crate::packing::{gaussian_filter, pack_message, pack_score, select_mask, PackingConfig};
use crate::rng::Lcg64;
use crate::wire::{comm_volume, decode_message, encode_message, Message, MessageHeader};
use crate::world::{encode, ground_truth, AgentPose, EncoderConfig, Scenario, WorldObject};

const STREAM_POSE_NOISE: u64 = 0x504f_5345;

/// Threshold used by experiment runs. A cell recovered from one helper in
/// a two-agent fusion carries roughly half its evidence, so the stand-alone
/// decoder default of 0.5 would discard it about half the time.
pub const EXPERIMENT_THRESHOLD: f64 = 0.3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinkPolicy {
    /// Round budget split evenly over the round's active directed links.
    #[default]
    EqualSplit,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub rounds: usize,
    /// Feature-payload byte budget over all rounds and links.
    pub total_budget: u64,
    /// Per-round fractions of `total_budget`; `None` uses
    /// [`default_allocation`].
    pub allocation: Option<Vec<f64>>,
    pub link_policy: LinkPolicy,
    /// Standard deviation of each agent's position error, meters.
    pub noise_sigma: f64,
    /// Standard deviation of each agent's heading error, radians.
    pub yaw_noise_sigma: f64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            rounds: 1,
            total_budget: 0,
            allocation: None,
            link_policy: LinkPolicy::EqualSplit,
            noise_sigma: 0.0,
            yaw_noise_sigma: 0.0,
        }
    }
}

/// `[1.0]`, `[0.2, 0.8]`, `[0.2, 0.6, 0.2]`; for more rounds 0.2 followed
/// by an even split of the remaining 0.8.
pub fn default_allocation(rounds: usize) -> Vec<f64> {
    match rounds {
        0 => Vec::new(),
        1 => vec![1.0],
        2 => vec![0.2, 0.8],
        3 => vec![0.2, 0.6, 0.2],
        k => std::iter::once(0.2)
            .chain(std::iter::repeat_n(0.8 / (k - 1) as f64, k - 1))
            .collect(),
    }
}

impl ProtocolConfig {
    pub fn allocation(&self) -> Vec<f64> {
        self.allocation
            .clone()
            .unwrap_or_else(|| default_allocation(self.rounds))
    }

    pub fn validate(&self) -> Result<()> {
        let alloc = self.allocation();
        if alloc.len() != self.rounds {
            return Err(Error::config(format!(
                "allocation has {} fractions for {} rounds",
                alloc.len(),
                self.rounds
            )));
        }
        if alloc.iter().any(|f| !(*f >= 0.0 && f.is_finite())) {
            return Err(Error::config("allocation fractions must be finite and >= 0"));
        }
        if alloc.iter().sum::<f64>() > 1.0 + 1e-9 {
            return Err(Error::config("allocation fractions sum above 1"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite())
            || !(self.yaw_noise_sigma >= 0.0 && self.yaw_noise_sigma.is_finite())
        {
            return Err(Error::config("noise sigmas must be finite and >= 0"));
        }
        Ok(())
    }

    /// Byte budget of each round. The sum never exceeds `total_budget`.
    pub fn round_budgets(&self) -> Result<Vec<u64>> {
        self.validate()?;
        let mut remaining = self.total_budget;
        Ok(self
            .allocation()
            .iter()
            .map(|f| {
                let b = ((self.total_budget as f64 * f).floor() as u64).min(remaining);
                remaining -= b;
                b
            })
            .collect())
    }
}

/// Dense single-round total `N (N - 1) H W D 4`: every link sending every cell.
pub fn dense_budget(grid: &GridShape, agents: usize) -> u64 {
    (agents * agents.saturating_sub(1) * grid.cells() * grid.channels * 4) as u64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub protocol: ProtocolConfig,
    pub packing: PackingConfig,
    pub fusion: FusionConfig,
    pub generator: GeneratorConfig,
    pub encoder: EncoderConfig,
    pub detection_threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            protocol: ProtocolConfig::default(),
            packing: PackingConfig::default(),
            fusion: FusionConfig::default(),
            generator: GeneratorConfig::default(),
            encoder: EncoderConfig::default(),
            detection_threshold: EXPERIMENT_THRESHOLD,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.protocol.validate()?;
        self.packing.validate()?;
        if !self.detection_threshold.is_finite() {
            return Err(Error::config("detection_threshold must be finite"));
        }
        Ok(())
    }
}

/// Rigid error applied to an agent's shared data: content at true position
/// `p` appears at `rot(dyaw) (p - c) + c + (dx, dy)`, `c` the grid center.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PoseError {
    pub dx: f64,
    pub dy: f64,
    pub dyaw: f64,
}

impl PoseError {
    pub fn is_zero(&self) -> bool {
        self.dx == 0.0 && self.dy == 0.0 && self.dyaw == 0.0
    }
}

/// Per-agent errors, drawn once per run. The unit normal draws depend only
/// on the scenario seed, so runs at different sigmas share them.
pub fn sample_pose_errors(scenario: &Scenario, sigma: f64, yaw_sigma: f64) -> Vec<PoseError> {
    (0..scenario.agents.len())
        .map(|i| {
            let mut g = Lcg64::stream(scenario.rng_seed, &[STREAM_POSE_NOISE, i as u64]);
            let (zx, zy, zt) = (g.normal(), g.normal(), g.normal());
            PoseError {
                dx: sigma * zx,
                dy: sigma * zy,
                dyaw: yaw_sigma * zt,
            }
        })
        .collect()
}

/// Received data resampled into the receiver's frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Warped {
    pub features: FeatureMap,
    pub present: SelectionMask,
    pub request: ScalarMap,
}

/// Inverse nearest-neighbour resampling under `error`. Destination cells
/// whose source falls outside the grid get zero features, are absent, and
/// request 1.
pub fn warp_received(
    features: &FeatureMap,
    present: &SelectionMask,
    request: &ScalarMap,
    error: PoseError,
) -> Result<Warped> {
    let shape = *features.shape();
    if !shape.same_plane(present.height(), present.width())
        || !shape.same_plane(request.height(), request.width())
    {
        return Err(Error::dim("warp inputs disagree on H x W"));
    }
    if error.is_zero() {
        return Ok(Warped {
            features: features.clone(),
            present: present.clone(),
            request: request.clone(),
        });
    }
    let d = shape.channels;
    let (ex, ey) = shape.extent();
    let (cx, cy) = (ex / 2.0, ey / 2.0);
    let (s, c) = error.dyaw.sin_cos();
    let mut values = vec![0.0; shape.cells() * d];
    let mut bits = vec![false; shape.cells()];
    let mut req = vec![1.0; shape.cells()];
    for flat in 0..shape.cells() {
        let (r, col) = shape.row_col(flat);
        let (qx, qy) = shape.cell_center(r, col);
        let (ux, uy) = (qx - cx - error.dx, qy - cy - error.dy);
        let px = c * ux + s * uy + cx;
        let py = -s * ux + c * uy + cy;
        let Some((sr, sc)) = shape.cell_of(px, py) else {
            continue;
        };
        let src = shape.flat(sr, sc);
        values[flat * d..(flat + 1) * d].copy_from_slice(features.cell(src));
        bits[flat] = present.is_set(src);
        req[flat] = request.values()[src];
    }
    Ok(Warped {
        features: FeatureMap::from_values(shape, values)?,
        present: SelectionMask::from_bits(shape.height, shape.width, bits)?,
        request: ScalarMap::new(shape.height, shape.width, req)?,
    })
}

#[derive(Clone, Debug)]
pub struct AgentState {
    pub index: usize,
    pub pose: AgentPose,
    /// How every other agent misplaces this agent's messages.
    pub pose_error: PoseError,
    pub features: FeatureMap,
    pub confidence: ScalarMap,
    /// Latest request map received from each sender, in this agent's frame.
    pub received_requests: Vec<Option<ScalarMap>>,
}

impl AgentState {
    pub fn initial(scenario: &Scenario, cfg: &RunConfig) -> Result<Vec<AgentState>> {
        let errors = sample_pose_errors(scenario, cfg.protocol.noise_sigma, cfg.protocol.yaw_noise_sigma);
        let n = scenario.agents.len();
        (0..n)
            .into_par_iter()
            .map(|i| {
                let features = encode(i, scenario, &cfg.encoder)?;
                let confidence = generate_confidence(&features, &cfg.generator)?;
                Ok(AgentState {
                    index: i,
                    pose: scenario.agents[i],
                    pose_error: errors[i],
                    features,
                    confidence,
                    received_requests: vec![None; n],
                })
            })
            .collect()
    }

    fn believed_position(&self) -> (f64, f64) {
        (self.pose.x + self.pose_error.dx, self.pose.y + self.pose_error.dy)
    }
}

/// Byte accounting of one directed message.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LinkRecord {
    pub sender: usize,
    pub receiver: usize,
    pub cells: usize,
    pub feature_bytes: u64,
    pub index_bytes: u64,
    pub request_bytes: u64,
    pub encoded_bytes: u64,
    /// Set when the receiver rejected the bytes; the link then contributes
    /// nothing to fusion.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RoundRecord {
    pub round: usize,
    pub budget_bytes: u64,
    pub active_links: usize,
    pub link_cells: usize,
    pub edges: Vec<(usize, usize)>,
    pub links: Vec<LinkRecord>,
}

impl RoundRecord {
    pub fn feature_bytes(&self) -> u64 {
        self.links.iter().map(|l| l.feature_bytes).sum()
    }

    pub fn request_bytes(&self) -> u64 {
        self.links.iter().map(|l| l.request_bytes).sum()
    }

    pub fn payload_cells(&self) -> usize {
        self.links.iter().map(|l| l.cells).sum()
    }
}

/// Everything `run_round` needs besides the agent states.
pub struct RoundContext<'a> {
    pub cfg: &'a RunConfig,
    pub model: &'a FusionModel,
    pub budget_bytes: u64,
}

/// Bytes in flight, possibly altered by the channel.
pub type Transport<'a> = &'a (dyn Fn(&MessageHeader, Vec<u8>) -> Vec<u8> + Sync);

fn lossless(_: &MessageHeader, bytes: Vec<u8>) -> Vec<u8> {
    bytes
}

pub fn run_round(states: &mut [AgentState], ctx: &RoundContext, round: usize) -> Result<RoundRecord> {
    run_round_with(states, ctx, round, &lossless)
}

pub fn run_round_with(
    states: &mut [AgentState],
    ctx: &RoundContext,
    round: usize,
    transport: Transport,
) -> Result<RoundRecord> {
    let n = states.len();
    let Some(first) = states.first() else {
        return Err(Error::config("no agents"));
    };
    let shape = *first.features.shape();
    let d = shape.channels;
    let cfg = ctx.cfg;

    // Confidence from the current features, then the sender's own request.
    states.par_iter_mut().try_for_each(|s| -> Result<()> {
        s.confidence = generate_confidence(&s.features, &cfg.generator)?;
        Ok(())
    })?;
    let requests: Vec<ScalarMap> = states.iter().map(|s| request_map(&s.confidence)).collect();

    // Filtered selection scores per directed link; `None` when the link
    // cannot carry anything this round.
    let scores: Vec<Vec<Option<ScalarMap>>> = states
        .par_iter()
        .map(|s| {
            (0..n)
                .map(|j| {
                    if j == s.index {
                        return Ok(None);
                    }
                    let req = if round == 0 {
                        None
                    } else {
                        match &s.received_requests[j] {
                            Some(r) => Some(r),
                            None => return Ok(None),
                        }
                    };
                    let raw = pack_score(&s.confidence, req, round)?;
                    let score = gaussian_filter(&raw, &cfg.packing)?;
                    let active = round == 0 || score.values().iter().any(|&v| v > 0.0);
                    Ok(active.then_some(score))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;

    let active_links = scores.iter().flatten().filter(|s| s.is_some()).count();
    let link_bytes = if active_links == 0 {
        0
    } else {
        ctx.budget_bytes / active_links as u64
    };
    let link_cells = ((link_bytes / (4 * d as u64)) as usize).min(shape.cells());

    let masks: MaskTable = scores
        .par_iter()
        .map(|row| {
            row.iter()
                .map(|score| {
                    score
                        .as_ref()
                        .map(|s| select_mask(s, link_cells as i64, &cfg.packing))
                        .transpose()
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let graph = build_graph(round, n, (round > 0).then_some(&masks))?;
    let edges = graph.edges();

    // Pack, encode, transport, decode.
    let empty = SelectionMask::empty(shape.height, shape.width);
    let deliveries: Vec<(LinkRecord, Option<Message>)> = edges
        .par_iter()
        .map(|&(i, j)| {
            let mask = masks[i][j].as_ref().unwrap_or(&empty);
            let header = MessageHeader {
                sender: i as u32,
                receiver: j as u32,
                round: round as u32,
            };
            let msg = pack_message(header, &states[i].features, mask, &requests[i])?;
            let bytes = transport(&header, encode_message(&msg)?);
            let report = msg.volume();
            let cells = report.payload_cells;
            let mut record = LinkRecord {
                sender: i,
                receiver: j,
                cells,
                feature_bytes: report.feature_bytes() as u64,
                index_bytes: 4 * cells as u64,
                request_bytes: 4 * shape.cells() as u64,
                encoded_bytes: bytes.len() as u64,
                error: None,
            };
            let received = match decode_message(&bytes) {
                Ok(m) if m.header == header && m.channels as usize == d && shape.same_plane(m.height as usize, m.width as usize) => {
                    Some(m)
                }
                Ok(_) => {
                    record.error = Some("header or shape does not match the link".into());
                    None
                }
                Err(e) => {
                    record.error = Some(e.to_string());
                    None
                }
            };
            Ok((record, received))
        })
        .collect::<Result<_>>()?;

    let spent: u64 = deliveries.iter().map(|(r, _)| r.feature_bytes).sum();
    if spent > ctx.budget_bytes {
        return Err(Error::protocol(format!(
            "round {round} spent {spent} feature bytes of a {} byte budget",
            ctx.budget_bytes
        )));
    }

    // Warp into the receiver frame.
    let mut inbox: Vec<Vec<(usize, Warped)>> = vec![Vec::new(); n];
    for (record, msg) in &deliveries {
        let Some(msg) = msg else { continue };
        let warped = warp_received(
            &msg.dense_features(shape.cell_size)?,
            &msg.mask()?,
            &msg.request_map()?,
            states[record.sender].pose_error,
        )?;
        inbox[record.receiver].push((record.sender, warped));
    }

    let senders: Vec<((f64, f64), usize)> = states.iter().map(|s| (s.believed_position(), s.index)).collect();
    states
        .par_iter_mut()
        .zip(inbox.into_par_iter())
        .try_for_each(|(state, inbox)| -> Result<()> {
            if inbox.is_empty() {
                return Ok(());
            }
            let confidences: Vec<ScalarMap> = inbox.iter().map(|(_, w)| confidence_from_request(&w.request)).collect();
            let mut list = Vec::with_capacity(inbox.len() + 1);
            list.push(Contribution {
                agent: state.index,
                features: &state.features,
                confidence: &state.confidence,
                present: None,
                sensor: (state.pose.x, state.pose.y),
            });
            for ((sender, w), conf) in inbox.iter().zip(&confidences) {
                list.push(Contribution {
                    agent: *sender,
                    features: &w.features,
                    confidence: conf,
                    present: Some(&w.present),
                    sensor: senders[*sender].0,
                });
            }
            let fused = ctx.model.fuse(0, &list)?;
            drop(list);
            for (sender, w) in inbox {
                state.received_requests[sender] = Some(w.request);
            }
            state.features = fused;
            Ok(())
        })?;

    Ok(RoundRecord {
        round,
        budget_bytes: ctx.budget_bytes,
        active_links,
        link_cells,
        edges,
        links: deliveries.into_iter().map(|(r, _)| r).collect(),
    })
}

/// Mean AP of all agents' current features against the ground truth.
pub fn evaluate_agents(states: &[AgentState], gt: &[WorldObject], threshold: f64) -> Result<Vec<EvalResult>> {
    states
        .par_iter()
        .map(|s| Ok(evaluate(&decode(&s.features, threshold)?, gt)))
        .collect()
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = values.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TradeoffPoint {
    pub rounds: usize,
    pub budget_bytes: u64,
    /// Feature-payload bytes actually sent.
    pub feature_bytes: u64,
    /// `log2(feature_bytes)`, 0 when nothing was sent.
    pub volume_log2: f64,
    /// Feature and index bytes of all sparse payloads.
    pub raw_bytes: u64,
    pub request_bytes: u64,
    pub ap50: f64,
    pub ap70: f64,
    /// Mean AP@0.5 after each round; entry 0 is single-agent.
    pub round_ap50: Vec<f64>,
    pub round_ap70: Vec<f64>,
    pub agent_ap50: Vec<f64>,
}

/// One line of the per-run log.
#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum RunEvent {
    SingleAgent { agent_ap50: Vec<f64>, agent_ap70: Vec<f64> },
    Round {
        #[serde(flatten)]
        record: RoundRecord,
        agent_ap50: Vec<f64>,
        agent_ap70: Vec<f64>,
    },
    Summary(TradeoffPoint),
}

pub fn write_log<W: Write>(mut out: W, events: &[RunEvent]) -> Result<()> {
    for e in events {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n").map_err(|e| Error::io("<run log>", e))?;
    }
    Ok(())
}

pub fn run_experiment(scenario: &Scenario, cfg: &RunConfig) -> Result<TradeoffPoint> {
    Ok(run_experiment_logged(scenario, cfg)?.0)
}

pub fn run_experiment_logged(scenario: &Scenario, cfg: &RunConfig) -> Result<(TradeoffPoint, Vec<RunEvent>)> {
    scenario.validate()?;
    cfg.validate()?;
    let budgets = cfg.protocol.round_budgets()?;
    let model = cfg.fusion.build(scenario.grid.channels)?;
    let gt = ground_truth(scenario);
    let threshold = cfg.detection_threshold;
    let mut states = AgentState::initial(scenario, cfg)?;

    let split = |evals: &[EvalResult]| -> (Vec<f64>, Vec<f64>) {
        (evals.iter().map(|e| e.ap50).collect(), evals.iter().map(|e| e.ap70).collect())
    };
    let (ap50, ap70) = split(&evaluate_agents(&states, &gt, threshold)?);
    let mut round_ap50 = vec![mean(ap50.iter().copied())];
    let mut round_ap70 = vec![mean(ap70.iter().copied())];
    let mut events = vec![RunEvent::SingleAgent {
        agent_ap50: ap50.clone(),
        agent_ap70: ap70,
    }];
    let mut agent_ap50 = ap50;
    let (mut feature_bytes, mut raw_bytes, mut request_bytes) = (0u64, 0u64, 0u64);

    for (round, &budget_bytes) in budgets.iter().enumerate() {
        let ctx = RoundContext {
            cfg,
            model: &model,
            budget_bytes,
        };
        let record = run_round(&mut states, &ctx, round)?;
        feature_bytes += record.feature_bytes();
        raw_bytes += record.links.iter().map(|l| l.feature_bytes + l.index_bytes).sum::<u64>();
        request_bytes += record.request_bytes();
        let (ap50, ap70) = split(&evaluate_agents(&states, &gt, threshold)?);
        round_ap50.push(mean(ap50.iter().copied()));
        round_ap70.push(mean(ap70.iter().copied()));
        agent_ap50 = ap50.clone();
        events.push(RunEvent::Round {
            record,
            agent_ap50: ap50,
            agent_ap70: ap70,
        });
    }

    let d = scenario.grid.channels as u64;
    let point = TradeoffPoint {
        rounds: cfg.protocol.rounds,
        budget_bytes: cfg.protocol.total_budget,
        feature_bytes,
        volume_log2: comm_volume((feature_bytes / (4 * d)) as usize, d as usize),
        raw_bytes,
        request_bytes,
        ap50: *round_ap50.last().unwrap(),
        ap70: *round_ap70.last().unwrap(),
        round_ap50,
        round_ap70,
        agent_ap50,
    };
    events.push(RunEvent::Summary(point.clone()));
    Ok((point, events))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{Occluder, WorldObject};

    fn shape(h: usize, w: usize, d: usize) -> GridShape {
        GridShape::new(h, w, d, 1.0).unwrap()
    }

    fn indexed_map(h: usize, w: usize) -> (FeatureMap, SelectionMask, ScalarMap) {
        let s = shape(h, w, 2);
        let f = FeatureMap::from_values(s, (0..h * w * 2).map(|v| v as f64 + 1.0).collect()).unwrap();
        let r = ScalarMap::new(h, w, (0..h * w).map(|v| v as f64 / (h * w) as f64).collect()).unwrap();
        (f, SelectionMask::full(h, w), r)
    }

    #[test]
    fn allocation_defaults() {
        assert_eq!(default_allocation(0), Vec::<f64>::new());
        assert_eq!(default_allocation(1), vec![1.0]);
        assert_eq!(default_allocation(2), vec![0.2, 0.8]);
        assert_eq!(default_allocation(3), vec![0.2, 0.6, 0.2]);
        assert!((default_allocation(5).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn round_budget_arithmetic() {
        let cfg = ProtocolConfig {
            rounds: 2,
            total_budget: 10_000,
            ..ProtocolConfig::default()
        };
        assert_eq!(cfg.round_budgets().unwrap(), vec![2000, 8000]);
        let three = ProtocolConfig {
            rounds: 3,
            total_budget: 7,
            ..ProtocolConfig::default()
        };
        assert!(three.round_budgets().unwrap().iter().sum::<u64>() <= 7);
    }

    #[test]
    fn allocation_validation() {
        let bad = |allocation: Vec<f64>, rounds| ProtocolConfig {
            rounds,
            allocation: Some(allocation),
            ..ProtocolConfig::default()
        };
        assert!(bad(vec![0.6, 0.6], 2).validate().is_err());
        assert!(bad(vec![-0.1, 0.5], 2).validate().is_err());
        assert!(bad(vec![0.5], 2).validate().is_err());
        assert!(bad(vec![1.0, 0.0], 2).validate().is_ok());
    }

    #[test]
    fn zero_error_warp_is_identity() {
        let (f, m, r) = indexed_map(4, 5);
        let w = warp_received(&f, &m, &r, PoseError::default()).unwrap();
        assert_eq!((w.features, w.present, w.request), (f, m, r));
    }

    #[test]
    fn one_cell_x_translation_shifts_columns() {
        let (f, m, r) = indexed_map(3, 4);
        let w = warp_received(&f, &m, &r, PoseError { dx: 1.0, dy: 0.0, dyaw: 0.0 }).unwrap();
        for row in 0..3 {
            assert_eq!(w.features.cell_at(row, 0), &[0.0, 0.0]);
            assert!(!w.present.is_set(row * 4));
            assert_eq!(w.request.get(row, 0), 1.0);
            for col in 1..4 {
                assert_eq!(w.features.cell_at(row, col), f.cell_at(row, col - 1));
                assert_eq!(w.request.get(row, col), r.get(row, col - 1));
            }
        }
    }

    #[test]
    fn half_turn_reflects_about_center() {
        let (f, m, r) = indexed_map(4, 6);
        let w = warp_received(&f, &m, &r, PoseError { dx: 0.0, dy: 0.0, dyaw: std::f64::consts::PI }).unwrap();
        for row in 0..4 {
            for col in 0..6 {
                assert_eq!(w.features.cell_at(row, col), f.cell_at(3 - row, 5 - col));
                assert_eq!(w.request.get(row, col), r.get(3 - row, 5 - col));
            }
        }
    }

    fn occlusion_scene() -> Scenario {
        Scenario {
            grid: GridShape::new(16, 16, 8, 4.0).unwrap(),
            agents: vec![
                AgentPose { x: 8.0, y: 32.0, yaw: 0.0, sensing_range: 60.0 },
                AgentPose { x: 52.0, y: 32.0, yaw: 0.0, sensing_range: 60.0 },
            ],
            objects: vec![WorldObject { id: 0, x: 34.0, y: 34.0, length: 3.0, width: 3.0, yaw: 0.0 }],
            occluders: vec![Occluder { x_min: 20.0, y_min: 24.0, x_max: 24.0, y_max: 44.0, opaque: true }],
            rng_seed: 1,
        }
    }

    #[test]
    fn zero_rounds_is_single_agent() {
        let s = occlusion_scene();
        let cfg = RunConfig {
            protocol: ProtocolConfig { rounds: 0, ..ProtocolConfig::default() },
            ..RunConfig::default()
        };
        let p = run_experiment(&s, &cfg).unwrap();
        assert_eq!(p.feature_bytes, 0);
        assert_eq!(p.volume_log2, 0.0);
        assert_eq!(p.round_ap50.len(), 1);
        assert_eq!(p.agent_ap50, vec![0.0, 1.0]);
    }

    #[test]
    fn round_zero_graph_is_complete_even_without_budget() {
        let s = occlusion_scene();
        let cfg = RunConfig::default();
        let (_, events) = run_experiment_logged(&s, &cfg).unwrap();
        let RunEvent::Round { record, .. } = &events[1] else { panic!("expected a round") };
        assert_eq!(record.edges, vec![(0, 1), (1, 0)]);
        assert_eq!(record.feature_bytes(), 0);
        assert_eq!(record.request_bytes(), 2 * 16 * 16 * 4);
    }

    #[test]
    fn zero_budget_matches_no_collaboration() {
        let s = occlusion_scene();
        let none = run_experiment(&s, &RunConfig { protocol: ProtocolConfig { rounds: 0, ..Default::default() }, ..Default::default() }).unwrap();
        let zero = run_experiment(&s, &RunConfig::default()).unwrap();
        assert_eq!(zero.ap50, none.ap50);
        assert_eq!(zero.agent_ap50, none.agent_ap50);
    }

    #[test]
    fn full_budget_recovers_hidden_object() {
        let s = occlusion_scene();
        let cfg = RunConfig {
            protocol: ProtocolConfig {
                total_budget: dense_budget(&s.grid, 2),
                ..ProtocolConfig::default()
            },
            ..RunConfig::default()
        };
        let p = run_experiment(&s, &cfg).unwrap();
        assert_eq!(p.agent_ap50, vec![1.0, 1.0]);
        // Only the object's cells carry confidence, so only they are sent.
        assert_eq!(p.feature_bytes, (s.grid.channels * 4) as u64);
    }

    #[test]
    fn two_round_ledger_respects_allocation() {
        let s = occlusion_scene();
        let cfg = RunConfig {
            protocol: ProtocolConfig {
                rounds: 2,
                total_budget: 10_000,
                ..ProtocolConfig::default()
            },
            ..RunConfig::default()
        };
        let (_, events) = run_experiment_logged(&s, &cfg).unwrap();
        let rounds: Vec<&RoundRecord> = events
            .iter()
            .filter_map(|e| match e {
                RunEvent::Round { record, .. } => Some(record),
                _ => None,
            })
            .collect();
        assert_eq!(rounds[0].budget_bytes, 2000);
        assert_eq!(rounds[1].budget_bytes, 8000);
        assert!(rounds[0].feature_bytes() <= 2000 && rounds[1].feature_bytes() <= 8000);
    }

    #[test]
    fn corrupted_link_is_logged_and_skipped() {
        let s = occlusion_scene();
        let cfg = RunConfig {
            protocol: ProtocolConfig { total_budget: dense_budget(&s.grid, 2), ..Default::default() },
            ..RunConfig::default()
        };
        let model = cfg.fusion.build(8).unwrap();
        let mut states = AgentState::initial(&s, &cfg).unwrap();
        let before = states[0].features.clone();
        let ctx = RoundContext { cfg: &cfg, model: &model, budget_bytes: cfg.protocol.total_budget };
        let corrupt = |h: &MessageHeader, mut b: Vec<u8>| {
            if h.sender == 1 {
                b[0] = b'X';
            }
            b
        };
        let record = run_round_with(&mut states, &ctx, 0, &corrupt).unwrap();
        let bad = record.links.iter().find(|l| l.sender == 1).unwrap();
        assert!(bad.error.as_deref().unwrap().contains("byte 0"));
        assert_eq!(states[0].features, before);
        assert!(states[0].received_requests[1].is_none());
        assert!(states[1].received_requests[0].is_some());
    }

    #[test]
    fn request_maps_are_stored_for_next_round() {
        let s = occlusion_scene();
        let cfg = RunConfig::default();
        let model = cfg.fusion.build(8).unwrap();
        let mut states = AgentState::initial(&s, &cfg).unwrap();
        let expected = request_map(&states[1].confidence);
        let ctx = RoundContext { cfg: &cfg, model: &model, budget_bytes: 0 };
        run_round(&mut states, &ctx, 0).unwrap();
        assert_eq!(states[0].received_requests[1].as_ref().unwrap(), &expected);
    }

    #[test]
    fn later_round_without_requests_sends_nothing() {
        let s = occlusion_scene();
        let cfg = RunConfig::default();
        let model = cfg.fusion.build(8).unwrap();
        let mut states = AgentState::initial(&s, &cfg).unwrap();
        let ctx = RoundContext { cfg: &cfg, model: &model, budget_bytes: 100_000 };
        let record = run_round(&mut states, &ctx, 1).unwrap();
        assert_eq!(record.active_links, 0);
        assert!(record.edges.is_empty());
    }

    #[test]
    fn pose_errors_scale_common_draws() {
        let s = occlusion_scene();
        let a = sample_pose_errors(&s, 1.0, 0.0);
        let b = sample_pose_errors(&s, 2.5, 0.0);
        for (x, y) in a.iter().zip(&b) {
            assert!((y.dx - 2.5 * x.dx).abs() < 1e-12 && (y.dy - 2.5 * x.dy).abs() < 1e-12);
            assert_eq!(x.dyaw, 0.0);
        }
        assert!(sample_pose_errors(&s, 0.0, 0.0).iter().all(PoseError::is_zero));
    }

    #[test]
    fn run_is_deterministic() {
        let s = occlusion_scene();
        let cfg = RunConfig {
            protocol: ProtocolConfig { rounds: 3, total_budget: 5000, noise_sigma: 2.0, ..Default::default() },
            ..RunConfig::default()
        };
        assert_eq!(run_experiment(&s, &cfg).unwrap(), run_experiment(&s, &cfg).unwrap());
    }
}
