//! Deep-feature correspondences between the reference garment and the
//! garment currently worn in the person image.
//!
//! Features are compared by cosine distance; a match survives only when it
//! is a nearest neighbour in both directions.

use crate::attention::{downsample_mask, PoolRule};
use crate::backend::{Conditioning, DenoiserBackend, PredictRequest};
use crate::error::{Result, TryOnError};
use crate::geometry_warp::{ControlPointSet, Point2};
use crate::inpaint::{forward_noise, NoiseSchedule};
use crate::rng::gaussian_field;
use crate::tensor::{BinaryMask, ImageGrid, Tensor3};

pub const DEFAULT_OUTLIER_K: f64 = 3.0;
pub const DEFAULT_MAX_CONTROL_POINTS: usize = 128;

/// Activations of one image at the designated feature layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    /// `h_f×w_f×D`.
    pub values: Tensor3,
    /// Image pixels per feature cell.
    pub stride: usize,
    pub source: String,
    /// Inference step the image was noised to before extraction.
    pub t_feat: usize,
}

impl FeatureMap {
    pub fn new(values: Tensor3, stride: usize, source: impl Into<String>, t_feat: usize) -> Result<Self> {
        if stride == 0 || values.height() * values.width() == 0 || values.channels() == 0 {
            return Err(TryOnError::argument("feature map needs stride > 0 and a non-empty grid"));
        }
        if !values.is_finite() {
            return Err(TryOnError::argument("feature map contains non-finite values"));
        }
        Ok(FeatureMap {
            values,
            stride,
            source: source.into(),
            t_feat,
        })
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.values.height(), self.values.width())
    }

    fn unit_vectors(&self) -> Vec<Vec<f64>> {
        let (h, w) = self.grid();
        (0..h * w)
            .map(|i| {
                let v = self.values.pixel(i / w, i % w);
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                if norm > 0.0 {
                    v.iter().map(|x| x / norm).collect()
                } else {
                    vec![0.0; v.len()]
                }
            })
            .collect()
    }
}

/// Encodes `image`, forward-noises it to `t_feat` with the seeded noise,
/// runs one unconditional denoiser pass and returns the designated layer's
/// activations.
pub fn extract_features(
    image: &ImageGrid,
    t_feat: usize,
    schedule: &NoiseSchedule,
    backend: &dyn DenoiserBackend,
    noise_seed: u64,
    source: &str,
) -> Result<FeatureMap> {
    let desc = backend.describe()?;
    let layer = desc
        .capture_layers
        .first()
        .ok_or_else(|| TryOnError::capability("backend declares no feature capture layer"))?
        .clone();
    let z0 = backend.encode(image)?;
    let (h, w, c) = z0.shape();
    let noise = gaussian_field(noise_seed, h, w, c);
    let zt = forward_noise(&z0, t_feat, &noise, schedule)?;
    let ids = [layer.id.clone()];
    let cond = Conditioning::Unconditional;
    let pred = backend.predict_noise(
        &PredictRequest::new(&zt.z, schedule.model_timestep(t_feat), &cond).capture_features(&ids),
    )?;
    let captured = pred
        .features_for(&layer.id)
        .ok_or_else(|| TryOnError::capability(format!("backend did not capture layer {}", layer.id)))?;
    FeatureMap::new(captured.values.clone(), captured.stride, source, t_feat)
}

/// Pixel centre of feature cell `(x, y)`.
pub fn cell_center(cell: (usize, usize), stride: usize) -> Point2 {
    let half = stride as f64 / 2.0;
    Point2::new((stride * cell.0) as f64 + half, (stride * cell.1) as f64 + half)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Match {
    /// `(x, y)` cell in the source (reference) feature grid.
    pub source_cell: (usize, usize),
    pub target_cell: (usize, usize),
    pub source: Point2,
    pub target: Point2,
    /// Cosine distance in `[0, 2]`.
    pub score: f64,
    pub mutual: bool,
    pub inlier: bool,
}

impl Match {
    pub fn displacement(&self) -> (f64, f64) {
        (self.target.x - self.source.x, self.target.y - self.source.y)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorrespondenceSet {
    pub matches: Vec<Match>,
}

impl CorrespondenceSet {
    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }
}

fn mask_on_grid(mask: &BinaryMask, grid: (usize, usize), side: &'static str) -> Result<Vec<bool>> {
    let flags = if (mask.height(), mask.width()) == grid {
        mask.data().to_vec()
    } else {
        downsample_mask(mask, grid, PoolRule::Majority)?.flags().to_vec()
    };
    if !flags.iter().any(|&f| f) {
        return Err(TryOnError::EmptyRegion { side });
    }
    Ok(flags)
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (1.0 - d).clamp(0.0, 2.0)
}

/// Index in `candidates` minimizing the distance to `query`; ties go to the
/// lowest index.
fn nearest(query: &[f64], candidates: &[usize], units: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (candidates[0], f64::INFINITY);
    for &c in candidates {
        let d = cosine_distance(query, &units[c]);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Mutual nearest neighbours between masked cells of `src` and `tgt`,
/// ordered by target cell.
///
/// Masks may be given at feature resolution or at image resolution (pooled
/// with the majority rule).
pub fn match_nn(
    src: &FeatureMap,
    src_mask: &BinaryMask,
    tgt: &FeatureMap,
    tgt_mask: &BinaryMask,
) -> Result<CorrespondenceSet> {
    if src.values.channels() != tgt.values.channels() {
        return Err(TryOnError::argument("feature maps have different depths"));
    }
    let src_flags = mask_on_grid(src_mask, src.grid(), "source")?;
    let tgt_flags = mask_on_grid(tgt_mask, tgt.grid(), "target")?;
    let src_cells: Vec<usize> = (0..src_flags.len()).filter(|&i| src_flags[i]).collect();
    let tgt_cells: Vec<usize> = (0..tgt_flags.len()).filter(|&i| tgt_flags[i]).collect();
    let su = src.unit_vectors();
    let tu = tgt.unit_vectors();

    let best_target: Vec<(usize, usize)> = src_cells
        .iter()
        .map(|&i| (i, nearest(&su[i], &tgt_cells, &tu).0))
        .collect();
    let best_target_of = |i: usize| {
        best_target
            .binary_search_by_key(&i, |&(s, _)| s)
            .map(|k| best_target[k].1)
            .ok()
    };

    let sw = src.grid().1;
    let tw = tgt.grid().1;
    let mut matches = Vec::new();
    for &j in &tgt_cells {
        let (i, score) = nearest(&tu[j], &src_cells, &su);
        if best_target_of(i) != Some(j) {
            continue;
        }
        let source_cell = (i % sw, i / sw);
        let target_cell = (j % tw, j / tw);
        matches.push(Match {
            source_cell,
            target_cell,
            source: cell_center(source_cell, src.stride),
            target: cell_center(target_cell, tgt.stride),
            score,
            mutual: true,
            inlier: true,
        });
    }
    Ok(CorrespondenceSet { matches })
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

struct Spread {
    median: (f64, f64),
    mad: (f64, f64),
}

fn spread(cs: &CorrespondenceSet, keep: &[usize]) -> Spread {
    let mut dx: Vec<f64> = keep.iter().map(|&i| cs.matches[i].displacement().0).collect();
    let mut dy: Vec<f64> = keep.iter().map(|&i| cs.matches[i].displacement().1).collect();
    let mx = median(&mut dx);
    let my = median(&mut dy);
    let mut ax: Vec<f64> = dx.iter().map(|v| (v - mx).abs()).collect();
    let mut ay: Vec<f64> = dy.iter().map(|v| (v - my).abs()).collect();
    Spread {
        median: (mx, my),
        mad: (median(&mut ax).max(1.0), median(&mut ay).max(1.0)),
    }
}

/// Drops matches whose displacement is more than `k` median absolute
/// deviations (floored at 1 px) from the componentwise median, repeating
/// until nothing changes. If the rule would remove everything, the
/// `max(3, n/10)` matches closest to the median are kept instead.
pub fn reject_outliers(cs: &CorrespondenceSet, k: f64) -> CorrespondenceSet {
    let n = cs.len();
    if n == 0 {
        return cs.clone();
    }
    let mut keep: Vec<usize> = (0..n).collect();
    loop {
        let s = spread(cs, &keep);
        let deviation = |i: usize| {
            let (dx, dy) = cs.matches[i].displacement();
            ((dx - s.median.0).abs() / s.mad.0).max((dy - s.median.1).abs() / s.mad.1)
        };
        let next: Vec<usize> = keep.iter().copied().filter(|&i| deviation(i) <= k).collect();
        if next.is_empty() {
            let quota = (n / 10).max(3).min(keep.len());
            let mut ranked: Vec<(f64, usize)> = keep.iter().map(|&i| (deviation(i), i)).collect();
            ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            keep = ranked[..quota].iter().map(|&(_, i)| i).collect();
            keep.sort_unstable();
            break;
        }
        if next.len() == keep.len() {
            break;
        }
        keep = next;
    }
    CorrespondenceSet {
        matches: keep
            .into_iter()
            .map(|i| Match {
                inlier: true,
                ..cs.matches[i].clone()
            })
            .collect(),
    }
}

/// Farthest-point subset of `points`, seeded with index 0, returned in
/// ascending index order.
fn farthest_point_subset(points: &[Point2], count: usize) -> Vec<usize> {
    let mut chosen = vec![0];
    let mut min_d: Vec<f64> = points.iter().map(|p| p.dist2(points[0])).collect();
    while chosen.len() < count {
        let mut best = (0, f64::NEG_INFINITY);
        for (i, &d) in min_d.iter().enumerate() {
            if d > best.1 {
                best = (i, d);
            }
        }
        chosen.push(best.0);
        for (i, p) in points.iter().enumerate() {
            min_d[i] = min_d[i].min(p.dist2(points[best.0]));
        }
    }
    chosen.sort_unstable();
    chosen
}

/// Control points for the warp, thinned spatially (farthest-point sampling
/// over target locations) when there are more than `max_points`.
pub fn to_control_points(cs: &CorrespondenceSet, max_points: usize) -> Result<ControlPointSet> {
    if max_points < 3 {
        return Err(TryOnError::argument("max control points must be at least 3"));
    }
    if cs.len() < 3 {
        return Err(TryOnError::InsufficientCorrespondences { found: cs.len() });
    }
    let targets: Vec<Point2> = cs.matches.iter().map(|m| m.target).collect();
    let picked: Vec<usize> = if cs.len() > max_points {
        farthest_point_subset(&targets, max_points)
    } else {
        (0..cs.len()).collect()
    };
    ControlPointSet::new(
        picked.iter().map(|&i| cs.matches[i].source).collect(),
        picked.iter().map(|&i| cs.matches[i].target).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fmap(h: usize, w: usize, d: usize, f: impl FnMut(usize, usize, usize) -> f64) -> FeatureMap {
        FeatureMap::new(Tensor3::from_fn(h, w, d, f), 4, "test", 0).unwrap()
    }

    fn with_disp(dx: f64, dy: f64, i: usize) -> Match {
        let source = Point2::new(10.0 + i as f64, 20.0);
        Match {
            source_cell: (i, 0),
            target_cell: (i, 0),
            source,
            target: Point2::new(source.x + dx, source.y + dy),
            score: 0.0,
            mutual: true,
            inlier: true,
        }
    }

    #[test]
    fn identical_maps_match_identically() {
        let f = fmap(4, 5, 6, |y, x, c| ((5 * y + x + 1) as f64 * (c + 1) as f64 * 0.7).sin());
        let m = BinaryMask::full(4, 5);
        let cs = match_nn(&f, &m, &f, &m).unwrap();
        assert_eq!(cs.len(), 20);
        for mt in &cs.matches {
            assert_eq!(mt.source_cell, mt.target_cell);
            assert!(mt.mutual);
            assert!(mt.score < 1e-12);
        }
    }

    #[test]
    fn swapped_orthogonal_vectors_give_the_swap() {
        // 2x2 grid of the standard basis; the target swaps cells 0 and 3.
        let basis = |i: usize, c: usize| if i == c { 1.0 } else { 0.0 };
        let src = fmap(2, 2, 4, |y, x, c| basis(y * 2 + x, c));
        let perm = [3, 1, 2, 0];
        let tgt = fmap(2, 2, 4, |y, x, c| basis(perm[y * 2 + x], c));
        let m = BinaryMask::full(2, 2);
        let cs = match_nn(&src, &m, &tgt, &m).unwrap();
        let pairs: Vec<_> = cs.matches.iter().map(|m| (m.target_cell, m.source_cell)).collect();
        assert_eq!(
            pairs,
            vec![((0, 0), (1, 1)), ((1, 0), (1, 0)), ((0, 1), (0, 1)), ((1, 1), (0, 0))]
        );
    }

    #[test]
    fn empty_regions_name_their_side() {
        let f = fmap(2, 2, 3, |_, _, c| c as f64 + 1.0);
        let full = BinaryMask::full(2, 2);
        let empty = BinaryMask::new(2, 2);
        assert!(matches!(
            match_nn(&f, &empty, &f, &full),
            Err(TryOnError::EmptyRegion { side: "source" })
        ));
        assert!(matches!(
            match_nn(&f, &full, &f, &empty),
            Err(TryOnError::EmptyRegion { side: "target" })
        ));
    }

    #[test]
    fn image_resolution_masks_are_pooled() {
        let f = fmap(2, 2, 3, |y, x, c| ((y * 2 + x) == c) as u8 as f64 + 0.1);
        let mask = BinaryMask::from_fn(8, 8, |y, _| y < 4);
        let cs = match_nn(&f, &mask, &f, &mask).unwrap();
        assert_eq!(cs.len(), 2);
        assert!(cs.matches.iter().all(|m| m.target_cell.1 == 0));
    }

    #[test]
    fn uniform_displacements_are_all_kept() {
        let cs = CorrespondenceSet {
            matches: (0..7).map(|i| with_disp(3.0, -2.0, i)).collect(),
        };
        assert_eq!(reject_outliers(&cs, 3.0), cs);
    }

    #[test]
    fn single_far_outlier_is_removed() {
        let mut matches: Vec<Match> = (0..9).map(|i| with_disp(5.0, 0.0, i)).collect();
        matches.insert(4, with_disp(200.0, 0.0, 9));
        let cs = CorrespondenceSet { matches };
        let out = reject_outliers(&cs, 3.0);
        assert_eq!(out.len(), 9);
        assert!(out.matches.iter().all(|m| m.displacement() == (5.0, 0.0)));
    }

    #[test]
    fn rejection_never_empties_the_set() {
        // Displacements split into tight x-clusters and tight y-clusters
        // that disagree: the x rule removes the y group and vice versa.
        let mut matches = Vec::new();
        for i in 0..4 {
            matches.push(with_disp(100.0 * (i % 2) as f64, 0.0, i));
        }
        for i in 4..8 {
            matches.push(with_disp(0.0, 100.0 * (i % 2) as f64, i));
        }
        let cs = CorrespondenceSet { matches };
        let out = reject_outliers(&cs, 3.0);
        assert!(out.len() >= 3);
    }

    #[test]
    fn control_point_conversion() {
        assert_eq!(cell_center((2, 3), 4), Point2::new(10.0, 14.0));

        let cs = CorrespondenceSet {
            matches: (0..3).map(|i| with_disp(1.0, 1.0, i)).collect(),
        };
        assert_eq!(to_control_points(&cs, 128).unwrap().len(), 3);

        let two = CorrespondenceSet {
            matches: cs.matches[..2].to_vec(),
        };
        assert!(matches!(
            to_control_points(&two, 128),
            Err(TryOnError::InsufficientCorrespondences { found: 2 })
        ));
    }

    #[test]
    fn farthest_point_subset_is_deterministic_and_spread() {
        let matches: Vec<Match> = (0..500)
            .map(|i| {
                let s = Point2::new((i % 25) as f64 * 4.0, (i / 25) as f64 * 4.0);
                Match {
                    source_cell: (i % 25, i / 25),
                    target_cell: (i % 25, i / 25),
                    source: s,
                    target: Point2::new(s.x + 1.0, s.y),
                    score: 0.0,
                    mutual: true,
                    inlier: true,
                }
            })
            .collect();
        let cs = CorrespondenceSet { matches };
        let a = to_control_points(&cs, 128).unwrap();
        let b = to_control_points(&cs, 128).unwrap();
        assert_eq!(a.len(), 128);
        assert_eq!(a, b);
        // The four grid corners are the first farthest picks.
        for corner in [Point2::new(0.0, 0.0), Point2::new(96.0, 76.0)] {
            assert!(a.sources().contains(&corner));
        }
    }
}
