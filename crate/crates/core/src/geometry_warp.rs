//! Affine Moving-Least-Squares deformation and backward warping.
//!
//! The forward map sends reference-garment coordinates to the target
//! frame. Resampling needs the inverse, which is obtained by evaluating
//! MLS with the source/target roles swapped.

use rayon::prelude::*;

use crate::error::{Result, TryOnError};
use crate::tensor::{BinaryMask, ImageGrid, Tensor3};

/// Below this distance a query is treated as sitting on a control point.
pub const COINCIDENCE_EPS: f64 = 1e-9;
/// Diagonal regularization for near-singular weighted covariances.
pub const REGULARIZATION: f64 = 1e-8;
const REL_SINGULAR: f64 = 1e-12;
const COVERAGE_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    pub fn dist2(self, other: Point2) -> f64 {
        let dx = self.x - other.x;
        let dy = self.y - other.y;
        dx * dx + dy * dy
    }

    pub fn dist(self, other: Point2) -> f64 {
        self.dist2(other).sqrt()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

/// Paired control points: `sources` in the reference frame, `targets` in
/// the target frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlPointSet {
    sources: Vec<Point2>,
    targets: Vec<Point2>,
}

impl ControlPointSet {
    pub fn new(sources: Vec<Point2>, targets: Vec<Point2>) -> Result<Self> {
        if sources.len() != targets.len() {
            return Err(TryOnError::argument(format!(
                "control point count mismatch: {} sources, {} targets",
                sources.len(),
                targets.len()
            )));
        }
        if sources.len() < 3 {
            return Err(TryOnError::argument(format!(
                "need at least 3 control points, got {}",
                sources.len()
            )));
        }
        if !sources.iter().chain(&targets).all(|p| p.is_finite()) {
            return Err(TryOnError::argument("control points must be finite"));
        }
        for i in 0..sources.len() {
            for j in i + 1..sources.len() {
                if sources[i].dist(sources[j]) <= COINCIDENCE_EPS {
                    return Err(TryOnError::argument(format!(
                        "source control points {i} and {j} coincide"
                    )));
                }
            }
        }
        Ok(ControlPointSet { sources, targets })
    }

    pub fn sources(&self) -> &[Point2] {
        &self.sources
    }

    pub fn targets(&self) -> &[Point2] {
        &self.targets
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    /// Same pairs with the roles of source and target exchanged.
    pub fn swapped(&self) -> Result<Self> {
        ControlPointSet::new(self.targets.clone(), self.sources.clone())
    }
}

/// Normalized MLS weights `w_i ∝ 1/|p_i − v|^{2α}`.
///
/// A query within [`COINCIDENCE_EPS`] of a source returns the indicator of
/// the first such source.
pub fn mls_weights(query: Point2, sources: &[Point2], alpha: f64) -> Result<Vec<f64>> {
    if sources.is_empty() {
        return Err(TryOnError::argument("MLS weights need at least one source"));
    }
    if !query.is_finite() {
        return Err(TryOnError::argument("MLS query must be finite"));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(TryOnError::argument(format!("MLS alpha must be positive, got {alpha}")));
    }
    if let Some(hit) = sources.iter().position(|p| p.dist(query) < COINCIDENCE_EPS) {
        let mut w = vec![0.0; sources.len()];
        w[hit] = 1.0;
        return Ok(w);
    }
    let mut w: Vec<f64> = sources
        .iter()
        .map(|p| p.dist2(query).powf(-alpha))
        .collect();
    let total: f64 = w.iter().sum();
    if !total.is_finite() || total <= 0.0 {
        return Err(TryOnError::Degenerate { x: query.x, y: query.y });
    }
    for v in &mut w {
        *v /= total;
    }
    Ok(w)
}

/// Affine MLS image of `query` under `cps`.
pub fn mls_affine_eval(query: Point2, cps: &ControlPointSet, alpha: f64) -> Result<Point2> {
    let weights = mls_weights(query, &cps.sources, alpha)?;
    if let Some(hit) = weights.iter().position(|&w| w == 1.0) {
        if cps.sources[hit].dist(query) < COINCIDENCE_EPS {
            return Ok(cps.targets[hit]);
        }
    }

    let mut p_star = Point2::new(0.0, 0.0);
    let mut q_star = Point2::new(0.0, 0.0);
    for ((p, q), &w) in cps.sources.iter().zip(&cps.targets).zip(&weights) {
        p_star.x += w * p.x;
        p_star.y += w * p.y;
        q_star.x += w * q.x;
        q_star.y += w * q.y;
    }

    // Row-vector convention: f(v) = (v - p*) C^{-1} B + q*.
    let (mut c00, mut c01, mut c11) = (0.0, 0.0, 0.0);
    let (mut b00, mut b01, mut b10, mut b11) = (0.0, 0.0, 0.0, 0.0);
    for ((p, q), &w) in cps.sources.iter().zip(&cps.targets).zip(&weights) {
        let (px, py) = (p.x - p_star.x, p.y - p_star.y);
        let (qx, qy) = (q.x - q_star.x, q.y - q_star.y);
        c00 += w * px * px;
        c01 += w * px * py;
        c11 += w * py * py;
        b00 += w * px * qx;
        b01 += w * px * qy;
        b10 += w * py * qx;
        b11 += w * py * qy;
    }

    let trace = c00 + c11;
    let mut det = c00 * c11 - c01 * c01;
    if !(det > REL_SINGULAR * trace * trace) {
        c00 += REGULARIZATION;
        c11 += REGULARIZATION;
        det = c00 * c11 - c01 * c01;
    }
    if !(det.is_finite() && det > 0.0) {
        return Err(TryOnError::Degenerate { x: query.x, y: query.y });
    }

    let (i00, i01, i11) = (c11 / det, -c01 / det, c00 / det);
    let m00 = i00 * b00 + i01 * b10;
    let m01 = i00 * b01 + i01 * b11;
    let m10 = i01 * b00 + i11 * b10;
    let m11 = i01 * b01 + i11 * b11;

    let (dx, dy) = (query.x - p_star.x, query.y - p_star.y);
    let out = Point2::new(dx * m00 + dy * m10 + q_star.x, dx * m01 + dy * m11 + q_star.y);
    if !out.is_finite() {
        return Err(TryOnError::Degenerate { x: query.x, y: query.y });
    }
    Ok(out)
}

/// Per-pixel backward map from the target frame into the reference frame.
#[derive(Debug, Clone, PartialEq)]
pub struct DeformationField {
    width: usize,
    height: usize,
    displacement: Vec<(f64, f64)>,
}

impl DeformationField {
    pub fn identity(width: usize, height: usize) -> Self {
        DeformationField {
            width,
            height,
            displacement: vec![(0.0, 0.0); width * height],
        }
    }

    /// Field from an explicit map `(x, y) -> reference location`.
    pub fn from_map(width: usize, height: usize, f: impl Fn(f64, f64) -> Point2) -> Result<Self> {
        let mut displacement = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                let p = f(x as f64, y as f64);
                if !p.is_finite() {
                    return Err(TryOnError::argument("deformation field must be finite"));
                }
                displacement.push((p.x - x as f64, p.y - y as f64));
            }
        }
        Ok(DeformationField {
            width,
            height,
            displacement,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn displacement(&self, x: usize, y: usize) -> (f64, f64) {
        self.displacement[y * self.width + x]
    }

    /// Reference-frame location sampled for target pixel `(x, y)`.
    pub fn location(&self, x: usize, y: usize) -> Point2 {
        let (dx, dy) = self.displacement(x, y);
        Point2::new(x as f64 + dx, y as f64 + dy)
    }

    pub fn max_displacement(&self) -> f64 {
        self.displacement
            .iter()
            .map(|(dx, dy)| dx.hypot(*dy))
            .fold(0.0, f64::max)
    }
}

/// Dense inverse map: each target pixel is sent through MLS with the
/// control roles swapped.
pub fn build_deformation_field(
    cps: &ControlPointSet,
    width: usize,
    height: usize,
    alpha: f64,
) -> Result<DeformationField> {
    let inverse = cps.swapped()?;
    let rows: Vec<Vec<(f64, f64)>> = (0..height)
        .into_par_iter()
        .map(|y| {
            (0..width)
                .map(|x| {
                    let q = Point2::new(x as f64, y as f64);
                    let p = mls_affine_eval(q, &inverse, alpha)?;
                    Ok((p.x - q.x, p.y - q.y))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    Ok(DeformationField {
        width,
        height,
        displacement: rows.into_iter().flatten().collect(),
    })
}

/// Resamples `src` through `field`. Pixels whose sample location falls
/// outside the image or outside `src_mask` coverage are zero and unmasked.
pub fn apply_backward_warp(
    src: &ImageGrid,
    src_mask: &BinaryMask,
    field: &DeformationField,
) -> Result<(ImageGrid, BinaryMask)> {
    if src_mask.height() != src.height() || src_mask.width() != src.width() {
        return Err(TryOnError::argument("warp source mask does not match source image"));
    }
    let (w, h) = (field.width, field.height);
    let mask_t = src_mask.to_tensor();
    let max_x = (src.width() - 1) as f64;
    let max_y = (src.height() - 1) as f64;
    let mut out = Tensor3::zeros(h, w, src.channels());
    let mut covered = BinaryMask::new(h, w);
    let mut coverage = [0.0];
    let mut buf = vec![0.0; src.channels()];
    for y in 0..h {
        for x in 0..w {
            let loc = field.location(x, y);
            if !(loc.x >= -COINCIDENCE_EPS
                && loc.y >= -COINCIDENCE_EPS
                && loc.x <= max_x + COINCIDENCE_EPS
                && loc.y <= max_y + COINCIDENCE_EPS)
            {
                continue;
            }
            mask_t.sample_bilinear_clamped(loc.x, loc.y, &mut coverage);
            if coverage[0] <= COVERAGE_THRESHOLD {
                continue;
            }
            src.sample_bilinear_clamped(loc.x, loc.y, &mut buf);
            out.pixel_mut(y, x).copy_from_slice(&buf);
            covered.set(y, x, true);
        }
    }
    Ok((out, covered))
}
