//! Message packing: score maps, optional Gaussian smoothing, budgeted top-k
//! cell selection and sparse payload extraction.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{elementwise_mul, FeatureMap, ScalarMap, SelectionMask};
use crate::wire::{Message, MessageHeader};

/// Equal scores resolve to the smaller flat index `row * W + col`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TieBreak {
    #[default]
    RowMajor,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PackingConfig {
    pub gaussian_enabled: bool,
    pub kernel_size: usize,
    pub sigma: f64,
    pub tie_break: TieBreak,
}

impl Default for PackingConfig {
    fn default() -> Self {
        PackingConfig {
            gaussian_enabled: false,
            kernel_size: 3,
            sigma: 1.0,
            tie_break: TieBreak::RowMajor,
        }
    }
}

impl PackingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return Err(Error::config(format!(
                "kernel_size must be odd and >= 1, got {}",
                self.kernel_size
            )));
        }
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::config(format!("sigma must be > 0, got {}", self.sigma)));
        }
        Ok(())
    }
}

/// Normalized 1-D Gaussian taps for offsets `-r..=r`.
pub fn gaussian_kernel(kernel_size: usize, sigma: f64) -> Vec<f64> {
    let r = (kernel_size / 2) as i64;
    let raw: Vec<f64> = (-r..=r)
        .map(|t| (-((t * t) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|k| k / sum).collect()
}

/// Separable Gaussian smoothing with zero padding, clamped to `[0, 1]`.
pub fn gaussian_filter(score: &ScalarMap, cfg: &PackingConfig) -> Result<ScalarMap> {
    if !cfg.gaussian_enabled {
        return Ok(score.clone());
    }
    cfg.validate()?;
    let (h, w) = (score.height(), score.width());
    let kernel = gaussian_kernel(cfg.kernel_size, cfg.sigma);
    let r = (cfg.kernel_size / 2) as isize;
    let src = score.values();

    let mut horizontal = vec![0.0; h * w];
    for row in 0..h {
        for col in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                let c = col as isize + i as isize - r;
                if (0..w as isize).contains(&c) {
                    acc += k * src[row * w + c as usize];
                }
            }
            horizontal[row * w + col] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for row in 0..h {
        for col in 0..w {
            let mut acc = 0.0;
            for (i, k) in kernel.iter().enumerate() {
                let rr = row as isize + i as isize - r;
                if (0..h as isize).contains(&rr) {
                    acc += k * horizontal[rr as usize * w + col];
                }
            }
            out[row * w + col] = acc;
        }
    }
    ScalarMap::from_clamped(h, w, out)
}

/// Top-`budget_cells` cells by score. Zero-score cells are never selected,
/// and budgets above `H * W` behave as `H * W`.
pub fn select_mask(score: &ScalarMap, budget_cells: i64, cfg: &PackingConfig) -> Result<SelectionMask> {
    if budget_cells < 0 {
        return Err(Error::config(format!("negative cell budget {budget_cells}")));
    }
    let TieBreak::RowMajor = cfg.tie_break;
    let mut ranked: Vec<(usize, f64)> = score
        .values()
        .iter()
        .copied()
        .enumerate()
        .filter(|&(_, s)| s > 0.0)
        .collect();
    let take = (budget_cells as usize).min(ranked.len());
    let by_rank = |a: &(usize, f64), b: &(usize, f64)| -> Ordering {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then(a.0.cmp(&b.0))
    };
    if take < ranked.len() && take > 0 {
        ranked.select_nth_unstable_by(take - 1, by_rank);
    }
    ranked.truncate(take);
    let indices: Vec<usize> = ranked.into_iter().map(|(i, _)| i).collect();
    SelectionMask::from_indices(score.height(), score.width(), &indices)
}

/// Selection score for one directed link: the sender's confidence at round 0,
/// confidence times the receiver's previous request map afterwards.
pub fn pack_score(
    sender_confidence: &ScalarMap,
    receiver_request: Option<&ScalarMap>,
    round: usize,
) -> Result<ScalarMap> {
    match (round, receiver_request) {
        (0, None) => Ok(sender_confidence.clone()),
        (0, Some(_)) => Err(Error::protocol("round 0 packing must not consult request maps")),
        (_, None) => Err(Error::protocol(format!(
            "round {round} packing needs the receiver's request map"
        ))),
        (_, Some(r)) => elementwise_mul(sender_confidence, r),
    }
}

/// Builds the wire message `(R_sender, mask * F)`.
pub fn pack_message(
    header: MessageHeader,
    features: &FeatureMap,
    mask: &SelectionMask,
    sender_request: &ScalarMap,
) -> Result<Message> {
    let shape = features.shape();
    if !shape.same_plane(mask.height(), mask.width())
        || !shape.same_plane(sender_request.height(), sender_request.width())
    {
        return Err(Error::dim("mask, request map and features disagree on H x W"));
    }
    let mut indices = Vec::with_capacity(mask.count_ones());
    let mut values = Vec::with_capacity(mask.count_ones() * shape.channels);
    for flat in mask.ones() {
        indices.push(flat as u32);
        values.extend(features.cell(flat).iter().map(|&v| v as f32));
    }
    Ok(Message {
        header,
        height: shape.height as u32,
        width: shape.width as u32,
        channels: shape.channels as u32,
        request: sender_request.values().iter().map(|&v| v as f32).collect(),
        indices,
        values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{mask_apply, GridShape};
    use crate::rng::Lcg64;
    use proptest::prelude::*;

    fn cfg() -> PackingConfig {
        PackingConfig::default()
    }

    fn smoothing(kernel_size: usize, sigma: f64) -> PackingConfig {
        PackingConfig {
            gaussian_enabled: true,
            kernel_size,
            sigma,
            ..PackingConfig::default()
        }
    }

    /// Stable sort of all cells by descending score; reference for top-k.
    fn oracle_select(score: &ScalarMap, budget: usize) -> Vec<bool> {
        let mut order: Vec<usize> = (0..score.len()).collect();
        order.sort_by(|&a, &b| score.values()[b].partial_cmp(&score.values()[a]).unwrap());
        let mut bits = vec![false; score.len()];
        for &i in order.iter().filter(|&&i| score.values()[i] > 0.0).take(budget) {
            bits[i] = true;
        }
        bits
    }

    /// Direct 2-D convolution with an explicit outer-product kernel.
    fn dense_convolution(src: &ScalarMap, kernel_size: usize, sigma: f64) -> Vec<f64> {
        let r = (kernel_size / 2) as isize;
        let mut k2 = vec![0.0; kernel_size * kernel_size];
        let mut total = 0.0;
        for i in 0..kernel_size {
            for j in 0..kernel_size {
                let (di, dj) = (i as isize - r, j as isize - r);
                let v = (-((di * di + dj * dj) as f64) / (2.0 * sigma * sigma)).exp();
                k2[i * kernel_size + j] = v;
                total += v;
            }
        }
        let (h, w) = (src.height() as isize, src.width() as isize);
        let mut out = vec![0.0; src.len()];
        for row in 0..h {
            for col in 0..w {
                let mut acc = 0.0;
                for i in 0..kernel_size as isize {
                    for j in 0..kernel_size as isize {
                        let (rr, cc) = (row + i - r, col + j - r);
                        if rr >= 0 && rr < h && cc >= 0 && cc < w {
                            acc += k2[(i * kernel_size as isize + j) as usize] / total
                                * src.get(rr as usize, cc as usize);
                        }
                    }
                }
                out[(row * w + col) as usize] = acc;
            }
        }
        out
    }

    #[test]
    fn kernel_is_normalized_and_symmetric() {
        let k = gaussian_kernel(5, 1.3);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(k[0], k[4]);
        assert_eq!(k[1], k[3]);
    }

    #[test]
    fn constant_interior_is_preserved() {
        let s = ScalarMap::filled(7, 7, 0.6);
        let out = gaussian_filter(&s, &smoothing(3, 1.0)).unwrap();
        for r in 1..6 {
            for c in 1..6 {
                assert!((out.get(r, c) - 0.6).abs() < 1e-15);
            }
        }
        assert!(out.get(0, 0) < 0.6);
    }

    #[test]
    fn spike_matches_dense_convolution() {
        let mut v = vec![0.0; 25];
        v[12] = 1.0;
        let s = ScalarMap::new(5, 5, v).unwrap();
        let out = gaussian_filter(&s, &smoothing(3, 1.0)).unwrap();
        let dense = dense_convolution(&s, 3, 1.0);
        for (a, b) in out.values().iter().zip(&dense) {
            assert!((a - b).abs() < 1e-15);
        }
        let k = gaussian_kernel(3, 1.0);
        assert!((out.get(2, 2) - k[1] * k[1]).abs() < 1e-15);
        // 1 / (1 + 2 e^{-1/2})^2
        let center = 1.0 / (1.0 + 2.0 * (-0.5f64).exp()).powi(2);
        assert!((out.get(2, 2) - center).abs() < 1e-15);
    }

    #[test]
    fn random_maps_match_dense_convolution() {
        let mut g = Lcg64::new(5);
        for &(ks, sigma) in &[(3usize, 0.7), (5, 1.5), (7, 2.0), (1, 1.0)] {
            let s = ScalarMap::new(6, 9, (0..54).map(|_| g.next_f64()).collect()).unwrap();
            let out = gaussian_filter(&s, &smoothing(ks, sigma)).unwrap();
            for (a, b) in out.values().iter().zip(dense_convolution(&s, ks, sigma)) {
                assert!((a - b.clamp(0.0, 1.0)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn disabled_filter_is_bypass() {
        let s = ScalarMap::new(1, 3, vec![0.0, 1.0, 0.2]).unwrap();
        assert_eq!(gaussian_filter(&s, &cfg()).unwrap(), s);
    }

    #[test]
    fn invalid_kernels_rejected() {
        assert!(smoothing(4, 1.0).validate().is_err());
        assert!(smoothing(0, 1.0).validate().is_err());
        assert!(smoothing(3, 0.0).validate().is_err());
        let s = ScalarMap::filled(3, 3, 0.5);
        assert!(gaussian_filter(&s, &smoothing(2, 1.0)).is_err());
    }

    #[test]
    fn interior_mass_is_preserved() {
        let mut v = vec![0.0; 11 * 11];
        v[5 * 11 + 5] = 0.8;
        v[4 * 11 + 6] = 0.3;
        let s = ScalarMap::new(11, 11, v).unwrap();
        let out = gaussian_filter(&s, &smoothing(5, 1.2)).unwrap();
        let before: f64 = s.values().iter().sum();
        let after: f64 = out.values().iter().sum();
        assert!((before - after).abs() < 1e-12);
    }

    #[test]
    fn select_budget_edges() {
        let s = ScalarMap::new(2, 2, vec![0.9, 0.1, 0.4, 0.7]).unwrap();
        assert_eq!(select_mask(&s, 0, &cfg()).unwrap().count_ones(), 0);
        assert_eq!(select_mask(&s, 4, &cfg()).unwrap(), SelectionMask::full(2, 2));
        assert_eq!(select_mask(&s, 99, &cfg()).unwrap(), SelectionMask::full(2, 2));
        let two = select_mask(&s, 2, &cfg()).unwrap();
        assert_eq!(two.ones().collect::<Vec<_>>(), vec![0, 3]);
        assert!(matches!(select_mask(&s, -1, &cfg()), Err(Error::Config(_))));
    }

    #[test]
    fn zero_scores_never_selected() {
        let s = ScalarMap::new(1, 4, vec![0.0, 0.5, 0.0, 0.2]).unwrap();
        let m = select_mask(&s, 4, &cfg()).unwrap();
        assert_eq!(m.ones().collect::<Vec<_>>(), vec![1, 3]);
    }

    #[test]
    fn ties_go_to_smaller_index() {
        let s = ScalarMap::new(2, 3, vec![0.5, 0.9, 0.5, 0.5, 0.9, 0.5]).unwrap();
        let m = select_mask(&s, 3, &cfg()).unwrap();
        assert_eq!(m.ones().collect::<Vec<_>>(), vec![0, 1, 4]);
    }

    #[test]
    fn select_matches_stable_sort_oracle() {
        let mut g = Lcg64::new(2024);
        for _ in 0..300 {
            // quantized scores force many ties
            let vals: Vec<f64> = (0..64).map(|_| (g.range_inclusive(0, 5) as f64) / 5.0).collect();
            let s = ScalarMap::new(8, 8, vals).unwrap();
            let b = g.range_inclusive(0, 64);
            assert_eq!(select_mask(&s, b as i64, &cfg()).unwrap().bits(), oracle_select(&s, b).as_slice());
        }
    }

    #[test]
    fn score_branches() {
        let c = ScalarMap::new(1, 2, vec![0.8, 0.8]).unwrap();
        assert_eq!(pack_score(&c, None, 0).unwrap(), c);
        assert_eq!(pack_score(&c, Some(&ScalarMap::filled(1, 2, 1.0)), 1).unwrap(), c);
        let r = ScalarMap::new(1, 2, vec![0.1, 0.9]).unwrap();
        let s = pack_score(&c, Some(&r), 1).unwrap();
        assert!((s.get(0, 0) - 0.08).abs() < 1e-15);
        assert!((s.get(0, 1) - 0.72).abs() < 1e-15);
        assert!(matches!(pack_score(&c, None, 2), Err(Error::Protocol(_))));
        assert!(matches!(pack_score(&c, Some(&r), 0), Err(Error::Protocol(_))));
    }

    fn header() -> MessageHeader {
        MessageHeader {
            sender: 0,
            receiver: 1,
            round: 0,
        }
    }

    #[test]
    fn empty_mask_message() {
        let shape = GridShape::new(3, 3, 4, 1.0).unwrap();
        let f = FeatureMap::from_values(shape, vec![1.0; 36]).unwrap();
        let r = ScalarMap::filled(3, 3, 0.25);
        let m = pack_message(header(), &f, &SelectionMask::empty(3, 3), &r).unwrap();
        assert_eq!(m.payload_cells(), 0);
        assert_eq!(m.request.len(), 9);
        assert!(m.request.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn payload_carries_exactly_selected_cells() {
        let shape = GridShape::new(3, 3, 4, 1.0).unwrap();
        let f = FeatureMap::from_values(shape, (0..36).map(|v| v as f64).collect()).unwrap();
        let mask = SelectionMask::from_indices(3, 3, &[8, 1, 4]).unwrap();
        let m = pack_message(header(), &f, &mask, &ScalarMap::filled(3, 3, 1.0)).unwrap();
        assert_eq!(m.indices, vec![1, 4, 8]);
        assert_eq!(m.values.len(), 3 * 4);
        let dense = m.dense_features(shape.cell_size).unwrap();
        assert_eq!(dense, mask_apply(&mask, &f).unwrap());
    }

    proptest! {
        #[test]
        fn budget_bounds_and_nesting(
            vals in proptest::collection::vec(prop_oneof![Just(0.0f64), 0.0f64..=1.0, Just(0.5f64)], 36),
            b1 in 0i64..40,
            b2 in 0i64..40,
        ) {
            let s = ScalarMap::new(6, 6, vals.clone()).unwrap();
            let positive = vals.iter().filter(|&&v| v > 0.0).count() as i64;
            let (lo, hi) = (b1.min(b2), b1.max(b2));
            let small = select_mask(&s, lo, &cfg()).unwrap();
            let large = select_mask(&s, hi, &cfg()).unwrap();
            prop_assert_eq!(small.count_ones() as i64, lo.min(positive));
            prop_assert_eq!(large.count_ones() as i64, hi.min(positive));
            for i in small.ones() {
                prop_assert!(large.is_set(i));
            }
        }
    }
}
