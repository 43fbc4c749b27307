//! Confidence-aware per-location multi-head attention fusion.
//!
//! At every cell the ego feature vector queries the vectors of all
//! contributors that carry that cell (the ego itself is always present).
//! Scaled dot-product scores are normalized across contributors per head,
//! averaged over heads, and multiplied by each contributor's confidence at
//! the cell. The fused vector is the weighted sum of the raw contributor
//! vectors passed through a two-layer ReLU feed-forward network.
//!
//! A cell carried by a single contributor passes that vector through with
//! weight 1, so an agent that receives nothing keeps its features.
//! Sensor positional encodings, when enabled, are added to the attention
//! inputs only; the aggregated values stay in feature space so the decoder
//! can read them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{FeatureMap, ScalarMap, SelectionMask};
use crate::rng::Lcg64;

const PARAM_MAGIC: [u8; 4] = *b"SCFP";
const PARAM_VERSION: u32 = 1;

/// Sinusoidal encoding of the sensing distance for one channel slot.
pub fn sensor_positional_encoding(distance: f64, d_index: usize, channels: usize) -> f64 {
    let p = (d_index / 2) as f64;
    let angle = distance / 10000f64.powf(2.0 * p / channels as f64);
    if d_index.is_multiple_of(2) {
        angle.sin()
    } else {
        angle.cos()
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpeConfig {
    pub enabled: bool,
}

/// Adds the sensor positional encoding of each cell's distance to `sensor`.
pub fn apply_spe(features: &FeatureMap, sensor: (f64, f64), cfg: &SpeConfig) -> Result<FeatureMap> {
    if !cfg.enabled {
        return Ok(features.clone());
    }
    let shape = *features.shape();
    let d = shape.channels;
    if !d.is_multiple_of(2) {
        return Err(Error::config(format!(
            "sensor positional encoding needs an even channel count, got {d}"
        )));
    }
    let mut values = features.values().to_vec();
    for flat in 0..shape.cells() {
        let (r, c) = shape.row_col(flat);
        let (x, y) = shape.cell_center(r, c);
        let dist = (x - sensor.0).hypot(y - sensor.1);
        for (k, v) in values[flat * d..(flat + 1) * d].iter_mut().enumerate() {
            *v += sensor_positional_encoding(dist, k, d);
        }
    }
    FeatureMap::from_values(shape, values)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttentionNormalization {
    /// Softmax across all contributors present at a cell.
    #[default]
    Joint,
    /// Softmax over each (ego, contributor) pair alone, which is always 1;
    /// weights reduce to the contributor confidences.
    Pairwise,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FusionMode {
    #[default]
    Identity,
    Seeded,
}

/// Serializable description from which [`FusionParams`] are built once the
/// channel count is known.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionConfig {
    pub mode: FusionMode,
    pub heads: usize,
    pub rng_seed: u64,
    pub attention: AttentionNormalization,
    pub spe: SpeConfig,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            mode: FusionMode::Identity,
            heads: 4,
            rng_seed: 0,
            attention: AttentionNormalization::Joint,
            spe: SpeConfig::default(),
        }
    }
}

impl FusionConfig {
    pub fn build(&self, channels: usize) -> Result<FusionModel> {
        let params = match self.mode {
            FusionMode::Identity => FusionParams::identity(channels, self.heads)?,
            FusionMode::Seeded => FusionParams::seeded(channels, self.heads, self.rng_seed)?,
        };
        if self.spe.enabled && !channels.is_multiple_of(2) {
            return Err(Error::config("sensor positional encoding needs an even channel count"));
        }
        Ok(FusionModel {
            params: FusionParams {
                normalization: self.attention,
                ..params
            },
            spe: self.spe,
        })
    }
}

/// Projection and feed-forward weights. Matrices are row-major with the
/// input dimension first: `query[h]` is `D x d_h`, `ffn_in` is `D x 2D`,
/// `ffn_out` is `2D x D`.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionParams {
    pub channels: usize,
    pub heads: usize,
    pub identity_mode: bool,
    pub normalization: AttentionNormalization,
    pub query: Vec<Vec<f64>>,
    pub key: Vec<Vec<f64>>,
    pub ffn_in: Vec<f64>,
    pub ffn_in_bias: Vec<f64>,
    pub ffn_out: Vec<f64>,
    pub ffn_out_bias: Vec<f64>,
}

fn check_heads(channels: usize, heads: usize) -> Result<usize> {
    if heads == 0 || channels == 0 || !channels.is_multiple_of(heads) {
        return Err(Error::config(format!(
            "{channels} channels cannot be split into {heads} heads"
        )));
    }
    Ok(channels / heads)
}

impl FusionParams {
    pub fn head_dim(&self) -> usize {
        self.channels / self.heads
    }

    /// Projections select each head's channel slice; FFN is skipped.
    pub fn identity(channels: usize, heads: usize) -> Result<Self> {
        let dh = check_heads(channels, heads)?;
        let slice = |h: usize| {
            let mut m = vec![0.0; channels * dh];
            for k in 0..dh {
                m[(h * dh + k) * dh + k] = 1.0;
            }
            m
        };
        let proj: Vec<Vec<f64>> = (0..heads).map(slice).collect();
        Ok(FusionParams {
            channels,
            heads,
            identity_mode: true,
            normalization: AttentionNormalization::Joint,
            query: proj.clone(),
            key: proj,
            ffn_in: Vec::new(),
            ffn_in_bias: Vec::new(),
            ffn_out: Vec::new(),
            ffn_out_bias: Vec::new(),
        })
    }

    /// Uniform `[-1/sqrt(D), 1/sqrt(D)]` draws from [`Lcg64::new(seed)`] in
    /// this order: per head query then key, `ffn_in`, `ffn_in_bias`,
    /// `ffn_out`, `ffn_out_bias`.
    pub fn seeded(channels: usize, heads: usize, seed: u64) -> Result<Self> {
        let dh = check_heads(channels, heads)?;
        let bound = 1.0 / (channels as f64).sqrt();
        let mut g = Lcg64::new(seed);
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| g.uniform(-bound, bound)).collect() };
        let mut query = Vec::with_capacity(heads);
        let mut key = Vec::with_capacity(heads);
        for _ in 0..heads {
            query.push(draw(channels * dh));
            key.push(draw(channels * dh));
        }
        let hidden = 2 * channels;
        Ok(FusionParams {
            channels,
            heads,
            identity_mode: false,
            normalization: AttentionNormalization::Joint,
            query,
            key,
            ffn_in: draw(channels * hidden),
            ffn_in_bias: draw(hidden),
            ffn_out: draw(hidden * channels),
            ffn_out_bias: draw(channels),
        })
    }

    fn project(matrix: &[f64], x: &[f64], out_dim: usize, out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let row = &matrix[i * out_dim..(i + 1) * out_dim];
            for (o, w) in out.iter_mut().zip(row) {
                *o += xi * w;
            }
        }
    }

    fn feed_forward(&self, x: &[f64]) -> Vec<f64> {
        if self.identity_mode {
            return x.to_vec();
        }
        let hidden_dim = 2 * self.channels;
        let mut hidden = vec![0.0; hidden_dim];
        Self::project(&self.ffn_in, x, hidden_dim, &mut hidden);
        for (h, b) in hidden.iter_mut().zip(&self.ffn_in_bias) {
            *h = (*h + b).max(0.0);
        }
        let mut out = vec![0.0; self.channels];
        Self::project(&self.ffn_out, &hidden, self.channels, &mut out);
        for (o, b) in out.iter_mut().zip(&self.ffn_out_bias) {
            *o += b;
        }
        out
    }

    /// Little-endian dump: magic, version, D, heads, identity flag,
    /// normalization, then every matrix as `f64` in declaration order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&PARAM_MAGIC);
        let norm = match self.normalization {
            AttentionNormalization::Joint => 0u32,
            AttentionNormalization::Pairwise => 1,
        };
        for w in [
            PARAM_VERSION,
            self.channels as u32,
            self.heads as u32,
            self.identity_mode as u32,
            norm,
        ] {
            out.extend_from_slice(&w.to_le_bytes());
        }
        let blocks = self
            .query
            .iter()
            .chain(&self.key)
            .map(Vec::as_slice)
            .chain([
                self.ffn_in.as_slice(),
                &self.ffn_in_bias,
                &self.ffn_out,
                &self.ffn_out_bias,
            ]);
        for block in blocks {
            for v in block {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let fail = |offset: usize, reason: &str| Error::Decode {
            offset,
            reason: reason.to_string(),
        };
        if bytes.len() < 24 || bytes[..4] != PARAM_MAGIC {
            return Err(fail(0, "not a fusion parameter dump"));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        if word(0) != PARAM_VERSION {
            return Err(fail(4, "unsupported parameter dump version"));
        }
        let channels = word(1) as usize;
        let heads = word(2) as usize;
        let identity_mode = word(3) != 0;
        let normalization = match word(4) {
            0 => AttentionNormalization::Joint,
            1 => AttentionNormalization::Pairwise,
            _ => return Err(fail(20, "unknown normalization tag")),
        };
        let dh = check_heads(channels, heads).map_err(|_| fail(8, "inconsistent channel/head counts"))?;
        let hidden = 2 * channels;
        let ffn_len = if identity_mode { 0 } else { 1 };
        let sizes: Vec<usize> = std::iter::repeat_n(channels * dh, 2 * heads)
            .chain([
                ffn_len * channels * hidden,
                ffn_len * hidden,
                ffn_len * hidden * channels,
                ffn_len * channels,
            ])
            .collect();
        let total: usize = sizes.iter().sum();
        if bytes.len() != 24 + 8 * total {
            return Err(fail(24, "parameter dump length does not match its header"));
        }
        let mut pos = 24;
        let mut blocks: Vec<Vec<f64>> = sizes
            .iter()
            .map(|&n| {
                let block = (0..n)
                    .map(|k| {
                        let s = pos + 8 * k;
                        f64::from_le_bytes(bytes[s..s + 8].try_into().unwrap())
                    })
                    .collect();
                pos += 8 * n;
                block
            })
            .collect();
        let ffn_out_bias = blocks.pop().unwrap();
        let ffn_out = blocks.pop().unwrap();
        let ffn_in_bias = blocks.pop().unwrap();
        let ffn_in = blocks.pop().unwrap();
        let key = blocks.split_off(heads);
        Ok(FusionParams {
            channels,
            heads,
            identity_mode,
            normalization,
            query: blocks,
            key,
            ffn_in,
            ffn_in_bias,
            ffn_out,
            ffn_out_bias,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(&path, self.to_bytes()).map_err(|e| Error::io(&path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// One entry of the fusion set: the ego (dense) or a decoded message.
#[derive(Clone, Copy, Debug)]
pub struct Contribution<'a> {
    pub agent: usize,
    pub features: &'a FeatureMap,
    pub confidence: &'a ScalarMap,
    /// Cells carried by this contributor; `None` means every cell.
    pub present: Option<&'a SelectionMask>,
    /// Sensor position used for the positional encoding.
    pub sensor: (f64, f64),
}

impl Contribution<'_> {
    fn carries(&self, flat: usize) -> bool {
        self.present.is_none_or(|m| m.is_set(flat))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionModel {
    pub params: FusionParams,
    pub spe: SpeConfig,
}

impl FusionModel {
    pub fn identity(channels: usize, heads: usize) -> Result<Self> {
        Ok(FusionModel {
            params: FusionParams::identity(channels, heads)?,
            spe: SpeConfig::default(),
        })
    }

    fn check(&self, ego: usize, contributions: &[Contribution]) -> Result<()> {
        let Some(query) = contributions.get(ego) else {
            return Err(Error::protocol("fusion needs the ego among its contributions"));
        };
        if query.present.is_some() {
            return Err(Error::protocol("ego contribution must be dense"));
        }
        let shape = query.features.shape();
        if shape.channels != self.params.channels {
            return Err(Error::dim(format!(
                "fusion parameters expect {} channels, features have {}",
                self.params.channels, shape.channels
            )));
        }
        for c in contributions {
            let s = c.features.shape();
            let mask_ok = c.present.is_none_or(|m| s.same_plane(m.height(), m.width()));
            if s.height != shape.height
                || s.width != shape.width
                || s.channels != shape.channels
                || !s.same_plane(c.confidence.height(), c.confidence.width())
                || !mask_ok
            {
                return Err(Error::dim(format!(
                    "contribution from agent {} does not match the ego grid",
                    c.agent
                )));
            }
        }
        Ok(())
    }

    fn attention_input(&self, c: &Contribution, flat: usize, buf: &mut Vec<f64>) {
        buf.clear();
        buf.extend_from_slice(c.features.cell(flat));
        if self.spe.enabled {
            let shape = c.features.shape();
            let (r, col) = shape.row_col(flat);
            let (x, y) = shape.cell_center(r, col);
            let dist = (x - c.sensor.0).hypot(y - c.sensor.1);
            let d = buf.len();
            for (k, v) in buf.iter_mut().enumerate() {
                *v += sensor_positional_encoding(dist, k, d);
            }
        }
    }

    /// Head-averaged softmax weights at one cell for the listed contributors.
    fn cell_attention(&self, ego: usize, contributions: &[Contribution], present: &[usize], flat: usize) -> Vec<f64> {
        if present.len() == 1 || self.params.normalization == AttentionNormalization::Pairwise {
            return vec![1.0; present.len()];
        }
        let p = &self.params;
        let dh = p.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut x = Vec::with_capacity(p.channels);
        self.attention_input(&contributions[ego], flat, &mut x);
        let query_input = x.clone();
        let inputs: Vec<Vec<f64>> = present
            .iter()
            .map(|&j| {
                self.attention_input(&contributions[j], flat, &mut x);
                x.clone()
            })
            .collect();

        let mut averaged = vec![0.0; present.len()];
        let mut q = vec![0.0; dh];
        let mut k = vec![0.0; dh];
        let mut scores = vec![0.0; present.len()];
        for h in 0..p.heads {
            FusionParams::project(&p.query[h], &query_input, dh, &mut q);
            for (s, input) in scores.iter_mut().zip(&inputs) {
                FusionParams::project(&p.key[h], input, dh, &mut k);
                *s = q.iter().zip(&k).map(|(a, b)| a * b).sum::<f64>() * scale;
            }
            let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
            let total: f64 = exps.iter().sum();
            for (a, e) in averaged.iter_mut().zip(&exps) {
                *a += e / total;
            }
        }
        averaged.iter_mut().for_each(|a| *a /= p.heads as f64);
        averaged
    }

    /// Attention weight before confidence scaling, per contributor and cell.
    /// Contributors absent at a cell get 0 there.
    pub fn raw_attention(&self, ego: usize, contributions: &[Contribution]) -> Result<Vec<Vec<f64>>> {
        self.check(ego, contributions)?;
        let cells = contributions[ego].features.shape().cells();
        let mut out = vec![vec![0.0; cells]; contributions.len()];
        let mut present = Vec::with_capacity(contributions.len());
        for flat in 0..cells {
            present.clear();
            present.extend((0..contributions.len()).filter(|&j| contributions[j].carries(flat)));
            let a = self.cell_attention(ego, contributions, &present, flat);
            for (&j, w) in present.iter().zip(a) {
                out[j][flat] = w;
            }
        }
        Ok(out)
    }

    fn scaled_weight(present: usize, attention: f64, confidence: f64) -> f64 {
        if present == 1 {
            attention
        } else {
            attention * confidence
        }
    }

    /// Final weight maps `W_j = attention_j * C_j`.
    pub fn attention_weights(&self, ego: usize, contributions: &[Contribution]) -> Result<Vec<ScalarMap>> {
        let raw = self.raw_attention(ego, contributions)?;
        let shape = contributions[ego].features.shape();
        let cells = shape.cells();
        let counts: Vec<usize> = (0..cells)
            .map(|flat| contributions.iter().filter(|c| c.carries(flat)).count())
            .collect();
        raw.into_iter()
            .zip(contributions)
            .map(|(a, c)| {
                let w = (0..cells)
                    .map(|flat| Self::scaled_weight(counts[flat], a[flat], c.confidence.values()[flat]).clamp(0.0, 1.0))
                    .collect();
                ScalarMap::new(shape.height, shape.width, w)
            })
            .collect()
    }

    pub fn fuse(&self, ego: usize, contributions: &[Contribution]) -> Result<FeatureMap> {
        self.check(ego, contributions)?;
        let shape = *contributions[ego].features.shape();
        let d = shape.channels;
        let mut values = Vec::with_capacity(shape.cells() * d);
        let mut present = Vec::with_capacity(contributions.len());
        let mut acc = vec![0.0; d];
        for flat in 0..shape.cells() {
            present.clear();
            present.extend((0..contributions.len()).filter(|&j| contributions[j].carries(flat)));
            let attention = self.cell_attention(ego, contributions, &present, flat);
            acc.iter_mut().for_each(|v| *v = 0.0);
            for (&j, a) in present.iter().zip(attention) {
                let c = &contributions[j];
                let w = Self::scaled_weight(present.len(), a, c.confidence.values()[flat]);
                if w == 0.0 {
                    continue;
                }
                if w == 1.0 {
                    for (s, v) in acc.iter_mut().zip(c.features.cell(flat)) {
                        *s += v;
                    }
                } else {
                    for (s, v) in acc.iter_mut().zip(c.features.cell(flat)) {
                        *s += w * v;
                    }
                }
            }
            values.extend(self.params.feed_forward(&acc));
        }
        FeatureMap::from_values(shape, values)
    }
}
