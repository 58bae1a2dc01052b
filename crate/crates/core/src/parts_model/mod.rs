//! Deformable-parts scoring over dense feature maps.
//!
//! A hypothesis places the root filter at `p0` and part `i` at `p_i`:
//!
//! ```text
//! score(p0..pn) = Σ_{i=0..n} F_i · φ(H, p_i) − Σ_{i=1..n} d_i · φ_d(dx_i, dy_i) + b
//! φ_d(dx, dy)   = (dx, dy, dx², dy²)
//! (dx, dy)      = p_i − (p0 + anchor_i)
//! ```
//!
//! For a fixed root the parts are independent, so the best placement
//! maximises each part's response minus deformation separately. Positions
//! are cell coordinates of a filter's top-left corner.

mod features;
mod serial;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bbox::BBox;

pub use features::{cell_features, cell_features_from_image};
pub use serial::{MODEL_FORMAT_VERSION, ModelDocument};

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("{what}: expected {expected} values, got {actual}")]
    Shape {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("{0} contains a non-finite value")]
    NonFinite(&'static str),
    #[error("filter dimension {filter} does not match feature dimension {map}")]
    DimMismatch { filter: usize, map: usize },
    #[error("{w}x{h} filter at ({x}, {y}) leaves the {mw}x{mh} map")]
    OutOfBounds {
        x: i64,
        y: i64,
        w: usize,
        h: usize,
        mw: usize,
        mh: usize,
    },
    #[error("part {0} has no position that fits in the map")]
    NoValidPosition(usize),
    #[error("quadratic deformation weights must be >= 0 (part {part}: d3={d3}, d4={d4})")]
    NegativeQuadratic { part: usize, d3: f64, d4: f64 },
    #[error("placement lists {got} positions, model has {want}")]
    PlacementArity { got: usize, want: usize },
    #[error("{0}")]
    Format(String),
}

/// Dense `width x height x dim` features, row-major with the feature index
/// fastest: `data[(y * width + x) * dim + k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureMap {
    pub width: usize,
    pub height: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(width: usize, height: usize, dim: usize, data: Vec<f64>) -> Result<Self, ModelError> {
        let m = Self {
            width,
            height,
            dim,
            data,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn zeros(width: usize, height: usize, dim: usize) -> Self {
        Self {
            width,
            height,
            dim,
            data: vec![0.0; width * height * dim],
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let expected = self.width * self.height * self.dim;
        if self.data.len() != expected {
            return Err(ModelError::Shape {
                what: "feature map",
                expected,
                actual: self.data.len(),
            });
        }
        if !self.data.iter().all(|v| v.is_finite()) {
            return Err(ModelError::NonFinite("feature map"));
        }
        Ok(())
    }

    pub fn cell(&self, x: usize, y: usize) -> &[f64] {
        let i = (y * self.width + x) * self.dim;
        &self.data[i..i + self.dim]
    }

    pub fn cell_mut(&mut self, x: usize, y: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.dim;
        &mut self.data[i..i + self.dim]
    }
}

/// Linear filter over a `width x height` window, same layout as
/// [`FeatureMap`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Filter {
    pub width: usize,
    pub height: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
}

impl Filter {
    pub fn new(width: usize, height: usize, dim: usize, weights: Vec<f64>) -> Result<Self, ModelError> {
        let f = Self {
            width,
            height,
            dim,
            weights,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn filled(width: usize, height: usize, dim: usize, value: f64) -> Self {
        Self {
            width,
            height,
            dim,
            weights: vec![value; width * height * dim],
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let expected = self.width * self.height * self.dim;
        if self.weights.len() != expected || expected == 0 {
            return Err(ModelError::Shape {
                what: "filter",
                expected,
                actual: self.weights.len(),
            });
        }
        if !self.weights.iter().all(|v| v.is_finite()) {
            return Err(ModelError::NonFinite("filter"));
        }
        Ok(())
    }

    fn fits(&self, map: &FeatureMap, x: i64, y: i64) -> bool {
        x >= 0 && y >= 0 && x as usize + self.width <= map.width && y as usize + self.height <= map.height
    }

    /// All top-left positions at which the filter fits, in `(y, x)` order.
    fn positions(&self, map: &FeatureMap) -> impl Iterator<Item = (usize, usize)> + '_ {
        let ys = (map.height + 1).saturating_sub(self.height);
        let xs = (map.width + 1).saturating_sub(self.width);
        (0..ys).flat_map(move |y| (0..xs).map(move |x| (x, y)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartSpec {
    pub filter: Filter,
    /// Ideal offset from the root position, in cells.
    pub anchor: (i64, i64),
    /// Weights on `(dx, dy, dx², dy²)`.
    pub deform: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartsModel {
    pub root: Filter,
    pub parts: Vec<PartSpec>,
    pub bias: f64,
    pub threshold: f64,
    /// Pixels per feature cell, used to express detections in pixels.
    pub cell_size: u32,
}

impl PartsModel {
    pub fn validate(&self) -> Result<(), ModelError> {
        self.root.validate()?;
        for (i, p) in self.parts.iter().enumerate() {
            p.filter.validate()?;
            if p.filter.dim != self.root.dim {
                return Err(ModelError::DimMismatch {
                    filter: p.filter.dim,
                    map: self.root.dim,
                });
            }
            if !p.deform.iter().all(|v| v.is_finite()) {
                return Err(ModelError::NonFinite("deformation weights"));
            }
            if p.deform[2] < 0.0 || p.deform[3] < 0.0 {
                return Err(ModelError::NegativeQuadratic {
                    part: i + 1,
                    d3: p.deform[2],
                    d4: p.deform[3],
                });
            }
        }
        if !self.bias.is_finite() || self.threshold.is_nan() {
            return Err(ModelError::NonFinite("bias/threshold"));
        }
        if self.cell_size == 0 {
            return Err(ModelError::Format("cell_size must be positive".into()));
        }
        Ok(())
    }

    /// [`PartsModel::toy`] with the default cell size and threshold.
    pub fn toy_default() -> Self {
        Self::toy(TOY_CELL_SIZE, TOY_THRESHOLD)
    }

    /// Built-in weak detector for the synthetic scenes: a 2x2 root that
    /// sums cell brightness and one 1x1 part anchored on the top-left cell.
    pub fn toy(cell_size: u32, threshold: f64) -> Self {
        Self {
            root: Filter::filled(2, 2, 1, 1.0),
            parts: vec![PartSpec {
                filter: Filter::filled(1, 1, 1, 0.5),
                anchor: (0, 0),
                deform: [0.0, 0.0, 0.5, 0.5],
            }],
            bias: -2.0,
            threshold,
            cell_size,
        }
    }
}

pub const TOY_CELL_SIZE: u32 = 8;
/// Threshold of the toy model when none is configured.
pub const TOY_THRESHOLD: f64 = 1.3;

/// Positions `p0..pn` (root first) and their score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub positions: Vec<(usize, usize)>,
    pub score: f64,
}

/// `F · φ(H, p)`: dot product of the filter with the window at `at`.
pub fn filter_response(filter: &Filter, map: &FeatureMap, at: (i64, i64)) -> Result<f64, ModelError> {
    if filter.dim != map.dim {
        return Err(ModelError::DimMismatch {
            filter: filter.dim,
            map: map.dim,
        });
    }
    if !filter.fits(map, at.0, at.1) {
        return Err(ModelError::OutOfBounds {
            x: at.0,
            y: at.1,
            w: filter.width,
            h: filter.height,
            mw: map.width,
            mh: map.height,
        });
    }
    Ok(response_unchecked(filter, map, at.0 as usize, at.1 as usize))
}

fn response_unchecked(filter: &Filter, map: &FeatureMap, x: usize, y: usize) -> f64 {
    let row = filter.width * filter.dim;
    let mut acc = 0.0;
    for fy in 0..filter.height {
        let w = &filter.weights[fy * row..(fy + 1) * row];
        let start = ((y + fy) * map.width + x) * map.dim;
        let h = &map.data[start..start + row];
        for (a, b) in w.iter().zip(h) {
            acc += a * b;
        }
    }
    acc
}

/// `d · φ_d(dx, dy)` with `(dx, dy) = part_at − (root_at + anchor)`.
pub fn deformation_cost(part: &PartSpec, root_at: (i64, i64), part_at: (i64, i64)) -> f64 {
    let dx = (part_at.0 - (root_at.0 + part.anchor.0)) as f64;
    let dy = (part_at.1 - (root_at.1 + part.anchor.1)) as f64;
    let d = &part.deform;
    d[0] * dx + d[1] * dy + d[2] * dx * dx + d[3] * dy * dy
}

fn as_i64(p: (usize, usize)) -> (i64, i64) {
    (p.0 as i64, p.1 as i64)
}

/// Scores a full hypothesis. `placement.score` is ignored.
pub fn score_hypothesis(model: &PartsModel, map: &FeatureMap, placement: &Placement) -> Result<f64, ModelError> {
    if placement.positions.len() != model.parts.len() + 1 {
        return Err(ModelError::PlacementArity {
            got: placement.positions.len(),
            want: model.parts.len() + 1,
        });
    }
    let root_at = as_i64(placement.positions[0]);
    let mut responses = filter_response(&model.root, map, root_at)?;
    let mut deformation = 0.0;
    for (part, pos) in model.parts.iter().zip(&placement.positions[1..]) {
        responses += filter_response(&part.filter, map, as_i64(*pos))?;
        deformation += deformation_cost(part, root_at, as_i64(*pos));
    }
    Ok(responses - deformation + model.bias)
}

/// Best part positions for a fixed root. Ties go to the smallest `(dy, dx)`.
pub fn best_placement(model: &PartsModel, map: &FeatureMap, root_at: (usize, usize)) -> Result<Placement, ModelError> {
    filter_response(&model.root, map, as_i64(root_at))?;
    let mut positions = vec![root_at];
    for (i, part) in model.parts.iter().enumerate() {
        if part.filter.dim != map.dim {
            return Err(ModelError::DimMismatch {
                filter: part.filter.dim,
                map: map.dim,
            });
        }
        let mut best: Option<((usize, usize), f64)> = None;
        for pos in part.filter.positions(map) {
            let v = response_unchecked(&part.filter, map, pos.0, pos.1)
                - deformation_cost(part, as_i64(root_at), as_i64(pos));
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((pos, v));
            }
        }
        let (pos, _) = best.ok_or(ModelError::NoValidPosition(i + 1))?;
        positions.push(pos);
    }
    let mut placement = Placement { positions, score: 0.0 };
    placement.score = score_hypothesis(model, map, &placement)?;
    Ok(placement)
}

/// A root position whose best placement clears the model threshold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDetection {
    pub root: (usize, usize),
    pub placement: Placement,
    pub score: f64,
    /// Root window in pixels.
    pub bbox: BBox,
    /// Index of the feature map in a multi-level run; 0 otherwise.
    pub level: usize,
}

/// Evaluates every root position and keeps those scoring at least the model
/// threshold, best first (ties by root `(y, x)`). No suppression is applied.
pub fn detect(model: &PartsModel, map: &FeatureMap) -> Result<Vec<ModelDetection>, ModelError> {
    detect_level(model, map, 0, 1.0)
}

/// Runs [`detect`] over several maps. `levels[i].1` is the map's scale
/// relative to the image (0.5 for a half-resolution map); boxes are mapped
/// back to image pixels.
pub fn detect_levels(model: &PartsModel, levels: &[(FeatureMap, f64)]) -> Result<Vec<ModelDetection>, ModelError> {
    let mut all = Vec::new();
    for (i, (map, scale)) in levels.iter().enumerate() {
        all.extend(detect_level(model, map, i, *scale)?);
    }
    sort_detections(&mut all);
    Ok(all)
}

fn detect_level(model: &PartsModel, map: &FeatureMap, level: usize, scale: f64) -> Result<Vec<ModelDetection>, ModelError> {
    model.validate()?;
    map.validate()?;
    if model.root.dim != map.dim {
        return Err(ModelError::DimMismatch {
            filter: model.root.dim,
            map: map.dim,
        });
    }
    // part response maps are independent of the root, compute them once
    let part_maps: Vec<Vec<((usize, usize), f64)>> = model
        .parts
        .iter()
        .map(|p| {
            p.filter
                .positions(map)
                .map(|pos| (pos, response_unchecked(&p.filter, map, pos.0, pos.1)))
                .collect()
        })
        .collect();
    for (i, pm) in part_maps.iter().enumerate() {
        if pm.is_empty() {
            return Err(ModelError::NoValidPosition(i + 1));
        }
    }
    let cell = f64::from(model.cell_size) / scale;
    let mut out = Vec::new();
    for root in model.root.positions(map) {
        let root_resp = response_unchecked(&model.root, map, root.0, root.1);
        let mut positions = vec![root];
        let mut part_total = 0.0;
        for (part, pm) in model.parts.iter().zip(&part_maps) {
            let mut best: Option<((usize, usize), f64)> = None;
            for (pos, resp) in pm {
                let v = resp - deformation_cost(part, as_i64(root), as_i64(*pos));
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((*pos, v));
                }
            }
            let (pos, v) = best.expect("non-empty part map");
            positions.push(pos);
            part_total += v;
        }
        let quick = root_resp + part_total + model.bias;
        // cheap pre-filter with slack for summation-order differences
        if quick + 1e-9 * (1.0 + quick.abs()) < model.threshold {
            continue;
        }
        let mut placement = Placement { positions, score: 0.0 };
        placement.score = score_hypothesis(model, map, &placement)?;
        if placement.score >= model.threshold {
            out.push(ModelDetection {
                root,
                score: placement.score,
                bbox: BBox::new(
                    root.0 as f64 * cell,
                    root.1 as f64 * cell,
                    model.root.width as f64 * cell,
                    model.root.height as f64 * cell,
                ),
                placement,
                level,
            });
        }
    }
    sort_detections(&mut out);
    Ok(out)
}

fn sort_detections(v: &mut [ModelDetection]) {
    v.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.level.cmp(&b.level))
            .then((a.root.1, a.root.0).cmp(&(b.root.1, b.root.0)))
    });
}

#[cfg(test)]
mod tests;
