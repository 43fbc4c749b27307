//! Dense and sparse BEV grid types.
//!
//! All maps are stored row-major. Feature maps interleave channels per cell,
//! so the value at `(row, col, channel)` lives at `(row * W + col) * D + channel`.
//! Any index that leaves this module (wire records, logs) is the flat cell
//! index `row * W + col`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    /// Meters per cell edge.
    pub cell_size: f64,
}

impl GridShape {
    pub fn new(height: usize, width: usize, channels: usize, cell_size: f64) -> Result<Self> {
        let shape = GridShape {
            height,
            width,
            channels,
            cell_size,
        };
        shape.validate()?;
        Ok(shape)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.channels == 0 {
            return Err(Error::config(format!(
                "grid dimensions must be positive, got {}x{}x{}",
                self.height, self.width, self.channels
            )));
        }
        if !(self.cell_size > 0.0 && self.cell_size.is_finite()) {
            return Err(Error::config(format!(
                "cell_size must be positive, got {}",
                self.cell_size
            )));
        }
        Ok(())
    }

    /// Number of spatial cells, `H * W`.
    pub fn cells(&self) -> usize {
        self.height * self.width
    }

    pub fn flat(&self, row: usize, col: usize) -> usize {
        row * self.width + col
    }

    pub fn row_col(&self, flat: usize) -> (usize, usize) {
        (flat / self.width, flat % self.width)
    }

    /// Metric center of a cell. Column maps to `x`, row maps to `y`.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        (
            (col as f64 + 0.5) * self.cell_size,
            (row as f64 + 0.5) * self.cell_size,
        )
    }

    /// Cell containing a metric point, if it lies inside the grid.
    pub fn cell_of(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let col = (x / self.cell_size).floor();
        let row = (y / self.cell_size).floor();
        if col < 0.0 || row < 0.0 || col >= self.width as f64 || row >= self.height as f64 {
            return None;
        }
        Some((row as usize, col as usize))
    }

    /// Metric extent `(x_max, y_max)`; the grid starts at the origin.
    pub fn extent(&self) -> (f64, f64) {
        (
            self.width as f64 * self.cell_size,
            self.height as f64 * self.cell_size,
        )
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        let (xm, ym) = self.extent();
        (0.0..=xm).contains(&x) && (0.0..=ym).contains(&y)
    }

    pub fn same_plane(&self, height: usize, width: usize) -> bool {
        self.height == height && self.width == width
    }
}

/// Dense `H x W x D` feature grid.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    shape: GridShape,
    values: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(shape: GridShape) -> Self {
        FeatureMap {
            values: vec![0.0; shape.cells() * shape.channels],
            shape,
        }
    }

    pub fn from_values(shape: GridShape, values: Vec<f64>) -> Result<Self> {
        let expected = shape.cells() * shape.channels;
        if values.len() != expected {
            return Err(Error::dim(format!(
                "feature map needs {expected} values, got {}",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::dim(format!("non-finite feature value at {pos}")));
        }
        Ok(FeatureMap { shape, values })
    }

    pub fn shape(&self) -> &GridShape {
        &self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.values[self.shape.flat(row, col) * self.shape.channels + channel]
    }

    /// Channel vector of a cell addressed by flat index.
    pub fn cell(&self, flat: usize) -> &[f64] {
        let d = self.shape.channels;
        &self.values[flat * d..(flat + 1) * d]
    }

    pub fn cell_at(&self, row: usize, col: usize) -> &[f64] {
        self.cell(self.shape.flat(row, col))
    }

    pub(crate) fn cell_mut(&mut self, flat: usize) -> &mut [f64] {
        let d = self.shape.channels;
        &mut self.values[flat * d..(flat + 1) * d]
    }

    /// One channel as a plain row-major plane.
    pub fn channel_plane(&self, channel: usize) -> Vec<f64> {
        self.values
            .iter()
            .skip(channel)
            .step_by(self.shape.channels)
            .copied()
            .collect()
    }
}

/// `H x W` grid of values in `[0, 1]`: confidence, request and weight maps.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarMap {
    height: usize,
    width: usize,
    values: Vec<f64>,
}

impl ScalarMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != height * width {
            return Err(Error::dim(format!(
                "scalar map {height}x{width} needs {} values, got {}",
                height * width,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::dim(format!(
                "scalar map value {} at {pos} outside [0, 1]",
                values[pos]
            )));
        }
        Ok(ScalarMap {
            height,
            width,
            values,
        })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!((0.0..=1.0).contains(&value), "fill value outside [0, 1]");
        ScalarMap {
            height,
            width,
            values: vec![value; height * width],
        }
    }

    /// Builds from arbitrary reals, clamping into `[0, 1]`. NaN maps to 0.
    pub fn from_clamped(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        let clamped = values
            .into_iter()
            .map(|v| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) })
            .collect();
        Self::new(height, width, clamped)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.width + col]
    }

    pub fn same_shape(&self, other: &ScalarMap) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<ScalarMap> {
        ScalarMap::new(
            self.height,
            self.width,
            self.values.iter().map(|&v| f(v)).collect(),
        )
    }
}

/// Binary per-cell selection.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelectionMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl SelectionMask {
    pub fn empty(height: usize, width: usize) -> Self {
        SelectionMask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        SelectionMask {
            height,
            width,
            bits: vec![true; height * width],
        }
    }

    pub fn from_bits(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::dim(format!(
                "mask {height}x{width} needs {} bits, got {}",
                height * width,
                bits.len()
            )));
        }
        Ok(SelectionMask {
            height,
            width,
            bits,
        })
    }

    pub fn from_indices(height: usize, width: usize, indices: &[usize]) -> Result<Self> {
        let mut mask = SelectionMask::empty(height, width);
        for &i in indices {
            if i >= height * width {
                return Err(Error::dim(format!(
                    "cell index {i} outside {height}x{width} mask"
                )));
            }
            mask.bits[i] = true;
        }
        Ok(mask)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn is_set(&self, flat: usize) -> bool {
        self.bits[flat]
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Selected flat indices in ascending order.
    pub fn ones(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
    }
}

pub fn elementwise_mul(a: &ScalarMap, b: &ScalarMap) -> Result<ScalarMap> {
    if !a.same_shape(b) {
        return Err(Error::dim(format!(
            "elementwise_mul of {}x{} and {}x{}",
            a.height, a.width, b.height, b.width
        )));
    }
    let values = a
        .values
        .iter()
        .zip(&b.values)
        .map(|(x, y)| x * y)
        .collect();
    ScalarMap::new(a.height, a.width, values)
}

/// Zeroes the channel vector of every unselected cell.
pub fn mask_apply(mask: &SelectionMask, features: &FeatureMap) -> Result<FeatureMap> {
    if !features.shape.same_plane(mask.height, mask.width) {
        return Err(Error::dim(format!(
            "mask {}x{} against feature map {}x{}",
            mask.height, mask.width, features.shape.height, features.shape.width
        )));
    }
    let mut out = FeatureMap::zeros(features.shape);
    for flat in mask.ones() {
        out.cell_mut(flat).copy_from_slice(features.cell(flat));
    }
    Ok(out)
}

/// True iff at least one cell is selected.
pub fn max_element(mask: &SelectionMask) -> bool {
    mask.bits.iter().any(|&b| b)
}
