#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tryon_core::correspondence::FeatureMap;
use tryon_core::geometry_warp::{ControlPointSet, Point2};
use tryon_core::{BinaryMask, ImageGrid, Tensor3};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Smooth colourful texture, distinct at every pixel.
pub fn texture(x: f64, y: f64) -> [f64; 3] {
    [
        0.5 + 0.4 * (0.31 * x + 0.17 * y).sin(),
        0.5 + 0.4 * (0.23 * y - 0.11 * x + 1.0).cos(),
        0.5 + 0.3 * (0.05 * x * y / 8.0 + 0.4).sin(),
    ]
}

pub fn rect_mask(size: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> BinaryMask {
    BinaryMask::from_fn(size, size, |y, x| x >= x0 && x < x1 && y >= y0 && y < y1)
}

/// A 64×64 person wearing a textured garment in the centre.
pub fn person_scene() -> (ImageGrid, BinaryMask) {
    let n = 64;
    let mask = rect_mask(n, 16, 12, 48, 52);
    let img = Tensor3::from_fn(n, n, 3, |y, x, c| {
        if mask.get(y, x) {
            texture(x as f64, y as f64)[c]
        } else {
            [0.8, 0.7, 0.6][c]
        }
    });
    (img, mask)
}

/// A 64×64 garment on a plain background.
pub fn garment_scene() -> (ImageGrid, BinaryMask) {
    let n = 64;
    let mask = rect_mask(n, 12, 10, 52, 54);
    let img = Tensor3::from_fn(n, n, 3, |y, x, c| {
        if mask.get(y, x) {
            let stripe = if (y / 5) % 2 == 0 { 0.9 } else { 0.2 };
            [stripe, 0.3, 1.0 - stripe][c]
        } else {
            0.97
        }
    });
    (img, mask)
}

pub fn random_feature_map(rng: &mut impl Rng, h: usize, w: usize, d: usize) -> FeatureMap {
    FeatureMap::new(
        Tensor3::from_fn(h, w, d, |_, _, _| rng.gen_range(-1.0..1.0)),
        4,
        "random",
        0,
    )
    .unwrap()
}

pub fn random_mask(rng: &mut impl Rng, h: usize, w: usize, density: f64) -> BinaryMask {
    BinaryMask::from_fn(h, w, |_, _| rng.gen_bool(density))
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - dot / (na * nb)
}

/// Exhaustive mutual nearest neighbours, as `(source cell, target cell)`
/// pairs with cells `(x, y)`, ordered by target row-major index.
pub fn brute_force_mutual_nn(
    src: &FeatureMap,
    src_mask: &BinaryMask,
    tgt: &FeatureMap,
    tgt_mask: &BinaryMask,
) -> Vec<((usize, usize), (usize, usize))> {
    let cells = |f: &FeatureMap, m: &BinaryMask| -> Vec<(usize, usize)> {
        let mut v = Vec::new();
        for y in 0..f.values.height() {
            for x in 0..f.values.width() {
                if m.get(y, x) {
                    v.push((x, y));
                }
            }
        }
        v
    };
    let sc = cells(src, src_mask);
    let tc = cells(tgt, tgt_mask);
    let argmin = |from: &[f64], pool: &[(usize, usize)], f: &FeatureMap| -> Option<(usize, usize)> {
        let mut best: Option<((usize, usize), f64)> = None;
        for &(x, y) in pool {
            let d = cosine_distance(from, f.values.pixel(y, x));
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some(((x, y), d));
            }
        }
        best.map(|(c, _)| c)
    };
    let mut out = Vec::new();
    for &(tx, ty) in &tc {
        let Some((sx, sy)) = argmin(tgt.values.pixel(ty, tx), &sc, src) else { continue };
        if argmin(src.values.pixel(sy, sx), &tc, tgt) == Some((tx, ty)) {
            out.push(((sx, sy), (tx, ty)));
        }
    }
    out
}

/// Independent affine-MLS evaluation: weighted least squares over
/// homogeneous coordinates, `min Σ w |[p 1]·M − q|²` with `M` 3×2, solved by
/// Gaussian elimination with partial pivoting.
pub fn mls_oracle(v: Point2, src: &[Point2], dst: &[Point2], alpha: f64) -> Point2 {
    for (p, q) in src.iter().zip(dst) {
        if ((p.x - v.x).powi(2) + (p.y - v.y).powi(2)).sqrt() < 1e-9 {
            return *q;
        }
    }
    let mut a = [[0.0f64; 5]; 3];
    for (p, q) in src.iter().zip(dst) {
        let w = 1.0 / ((p.x - v.x).powi(2) + (p.y - v.y).powi(2)).powf(alpha);
        let h = [p.x, p.y, 1.0];
        for r in 0..3 {
            for c in 0..3 {
                a[r][c] += w * h[r] * h[c];
            }
            a[r][3] += w * h[r] * q.x;
            a[r][4] += w * h[r] * q.y;
        }
    }
    for col in 0..3 {
        let piv = (col..3).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        for r in 0..3 {
            if r != col {
                let f = a[r][col] / a[col][col];
                for c in col..5 {
                    a[r][c] -= f * a[col][c];
                }
            }
        }
    }
    let m: Vec<[f64; 2]> = (0..3).map(|r| [a[r][3] / a[r][r], a[r][4] / a[r][r]]).collect();
    Point2::new(
        v.x * m[0][0] + v.y * m[1][0] + m[2][0],
        v.x * m[0][1] + v.y * m[1][1] + m[2][1],
    )
}

/// Similarity about `centre`: rotate by `deg` degrees, then scale.
pub fn similarity(centre: Point2, deg: f64, scale: f64) -> impl Fn(Point2) -> Point2 + Copy {
    let (s, c) = deg.to_radians().sin_cos();
    move |p: Point2| {
        let (dx, dy) = (p.x - centre.x, p.y - centre.y);
        Point2::new(
            centre.x + scale * (c * dx - s * dy),
            centre.y + scale * (s * dx + c * dy),
        )
    }
}

/// Inverse of [`similarity`].
pub fn similarity_inverse(centre: Point2, deg: f64, scale: f64) -> impl Fn(Point2) -> Point2 + Copy {
    let fwd = similarity(centre, -deg, 1.0 / scale);
    move |p| fwd(p)
}

/// The texture-sticking proxy scene.
///
/// The garment lives canonically in the person frame. The reference shows
/// it rotated and scaled. Landmarks are Gaussian blobs, one per
/// channel, so their centroids can be tracked through any warp. They sit
/// near the garment corners, where texture sticking is most visible.
pub struct RotationCase {
    pub size: usize,
    pub person: ImageGrid,
    pub person_mask: BinaryMask,
    pub reference: ImageGrid,
    pub reference_mask: BinaryMask,
    pub landmarks: Vec<Point2>,
    pub reference_landmarks: Tensor3,
    pub oracle_cps: ControlPointSet,
}

pub fn rotation_case(deg: f64, scale: f64) -> RotationCase {
    let n = 64;
    let centre = Point2::new(31.5, 31.5);
    let fwd = similarity(centre, deg, scale);
    let inv = similarity_inverse(centre, deg, scale);
    let person_mask = rect_mask(n, 14, 14, 50, 50);
    let inside = |p: Point2| p.x >= 13.5 && p.x < 49.5 && p.y >= 13.5 && p.y < 49.5;

    let person = Tensor3::from_fn(n, n, 3, |y, x, c| {
        if person_mask.get(y, x) {
            [0.1, 0.2, 0.7][c]
        } else {
            [0.8, 0.7, 0.6][c]
        }
    });
    let reference_mask = BinaryMask::from_fn(n, n, |y, x| inside(inv(Point2::new(x as f64, y as f64))));
    let reference = Tensor3::from_fn(n, n, 3, |y, x, c| {
        let q = inv(Point2::new(x as f64, y as f64));
        if inside(q) {
            texture(q.x, q.y)[c]
        } else {
            1.0
        }
    });

    let landmarks: Vec<Point2> = [(-15.0, -15.0), (15.0, -15.0), (-15.0, 15.0), (15.0, 15.0)]
        .iter()
        .map(|&(dx, dy)| Point2::new(centre.x + dx, centre.y + dy))
        .collect();
    let sigma = 1.5;
    let reference_landmarks = Tensor3::from_fn(n, n, landmarks.len(), |y, x, k| {
        let m = fwd(landmarks[k]);
        let d2 = (x as f64 - m.x).powi(2) + (y as f64 - m.y).powi(2);
        (-d2 / (2.0 * sigma * sigma)).exp()
    });

    let mut sources = Vec::new();
    let mut targets = Vec::new();
    for gy in 0..5 {
        for gx in 0..5 {
            let t = Point2::new(16.0 + 8.0 * gx as f64, 16.0 + 8.0 * gy as f64);
            targets.push(t);
            sources.push(fwd(t));
        }
    }
    RotationCase {
        size: n,
        person,
        person_mask,
        reference,
        reference_mask,
        landmarks,
        reference_landmarks,
        oracle_cps: ControlPointSet::new(sources, targets).unwrap(),
    }
}

/// Intensity-weighted centroid of channel `k`.
pub fn centroid(t: &Tensor3, k: usize) -> Point2 {
    let (mut sx, mut sy, mut s) = (0.0, 0.0, 0.0);
    for y in 0..t.height() {
        for x in 0..t.width() {
            let v = t.get(y, x, k);
            sx += v * x as f64;
            sy += v * y as f64;
            s += v;
        }
    }
    Point2::new(sx / s, sy / s)
}
