//! Self-attention, masked extended attention across a target and a
//! reference image, and attention-map contrast enhancement.
//!
//! Per-head tensors are stored flat as `[head][token][dim]`.

use serde::{Deserialize, Serialize};

use crate::error::{Result, TryOnError};
use crate::tensor::BinaryMask;

/// Query/key/value projections of one attention layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBundle {
    heads: usize,
    head_dim: usize,
    grid: (usize, usize),
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
}

impl AttentionBundle {
    pub fn new(
        heads: usize,
        head_dim: usize,
        grid: (usize, usize),
        q: Vec<f64>,
        k: Vec<f64>,
        v: Vec<f64>,
    ) -> Result<Self> {
        let n = grid.0 * grid.1;
        let len = heads * n * head_dim;
        if heads == 0 || head_dim == 0 || n == 0 {
            return Err(TryOnError::argument("attention bundle needs heads, d and tokens > 0"));
        }
        if q.len() != len || k.len() != len || v.len() != len {
            return Err(TryOnError::argument(format!(
                "attention bundle expects {len} values per projection (got q={}, k={}, v={})",
                q.len(),
                k.len(),
                v.len()
            )));
        }
        if !q.iter().chain(&k).chain(&v).all(|x| x.is_finite()) {
            return Err(TryOnError::argument("attention bundle must be finite"));
        }
        Ok(AttentionBundle {
            heads,
            head_dim,
            grid,
            q,
            k,
            v,
        })
    }

    pub fn heads(&self) -> usize {
        self.heads
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn tokens(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn q(&self) -> &[f64] {
        &self.q
    }

    pub fn k(&self) -> &[f64] {
        &self.k
    }

    pub fn v(&self) -> &[f64] {
        &self.v
    }

    fn head_slice<'a>(&self, t: &'a [f64], h: usize) -> &'a [f64] {
        let len = self.tokens() * self.head_dim;
        &t[h * len..(h + 1) * len]
    }

    /// Bundle with heads reordered so that new head `i` is old head `perm[i]`.
    pub fn permute_heads(&self, perm: &[usize]) -> Result<Self> {
        if perm.len() != self.heads {
            return Err(TryOnError::argument("head permutation has wrong length"));
        }
        let gather = |t: &[f64]| perm.iter().flat_map(|&h| self.head_slice(t, h).to_vec()).collect();
        AttentionBundle::new(
            self.heads,
            self.head_dim,
            self.grid,
            gather(&self.q),
            gather(&self.k),
            gather(&self.v),
        )
    }
}

/// Which image a token mask belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TokenOrigin {
    Target,
    Reference,
    Unspecified,
}

/// Per-token boolean flags on an attention grid.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenMask {
    grid: (usize, usize),
    origin: TokenOrigin,
    flags: Vec<bool>,
}

impl TokenMask {
    pub fn new(grid: (usize, usize), origin: TokenOrigin, flags: Vec<bool>) -> Result<Self> {
        if flags.len() != grid.0 * grid.1 {
            return Err(TryOnError::argument(format!(
                "token mask has {} flags for a {}x{} grid",
                flags.len(),
                grid.0,
                grid.1
            )));
        }
        Ok(TokenMask { grid, origin, flags })
    }

    pub fn empty(grid: (usize, usize), origin: TokenOrigin) -> Self {
        TokenMask {
            grid,
            origin,
            flags: vec![false; grid.0 * grid.1],
        }
    }

    pub fn full(grid: (usize, usize), origin: TokenOrigin) -> Self {
        TokenMask {
            grid,
            origin,
            flags: vec![true; grid.0 * grid.1],
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn origin(&self) -> TokenOrigin {
        self.origin
    }

    pub fn flags(&self) -> &[bool] {
        &self.flags
    }

    pub fn len(&self) -> usize {
        self.flags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flags.is_empty()
    }

    pub fn count(&self) -> usize {
        self.flags.iter().filter(|&&f| f).count()
    }

    pub fn with_origin(mut self, origin: TokenOrigin) -> Self {
        self.origin = origin;
        self
    }
}

/// Row-major `N_q × N_k` attention weights.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
    row_stochastic: bool,
}

impl AttentionMap {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>, row_stochastic: bool) -> Result<Self> {
        if data.len() != rows * cols || rows == 0 || cols == 0 {
            return Err(TryOnError::argument("attention map shape mismatch"));
        }
        if data.iter().any(|&a| !(a >= 0.0) || !a.is_finite()) {
            return Err(TryOnError::argument("attention map entries must be finite and nonnegative"));
        }
        Ok(AttentionMap {
            rows,
            cols,
            data,
            row_stochastic,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn is_row_stochastic(&self) -> bool {
        self.row_stochastic
    }

    /// Largest deviation of any row sum from 1.
    pub fn max_row_sum_error(&self) -> f64 {
        (0..self.rows)
            .map(|i| (self.row(i).iter().sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }
}

/// Per-head attention output, `[head][token][dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    pub heads: usize,
    pub tokens: usize,
    pub head_dim: usize,
    pub data: Vec<f64>,
}

impl AttentionOutput {
    pub fn head(&self, h: usize) -> &[f64] {
        let len = self.tokens * self.head_dim;
        &self.data[h * len..(h + 1) * len]
    }

    pub fn max_abs_diff(&self, other: &AttentionOutput) -> f64 {
        assert_eq!(self.data.len(), other.data.len());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Softmax over the admissible entries of `logits`; inadmissible entries
/// (the `-inf` logits) get exactly zero.
fn masked_softmax(logits: &[f64], admissible: &[bool], out: &mut [f64]) {
    let max = logits
        .iter()
        .zip(admissible)
        .filter(|(_, &ok)| ok)
        .map(|(&l, _)| l)
        .fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for ((o, &l), &ok) in out.iter_mut().zip(logits).zip(admissible) {
        if ok {
            *o = (l - max).exp();
            sum += *o;
        } else {
            *o = 0.0;
        }
    }
    for (o, &ok) in out.iter_mut().zip(admissible) {
        if ok {
            *o /= sum;
        }
    }
}

/// Contrast enhancement of one row restricted to the admissible entries,
/// followed by clamp-and-renormalize.
fn enhance_row(row: &mut [f64], admissible: &[bool], beta: f64) {
    if beta == 1.0 {
        return;
    }
    let n = admissible.iter().filter(|&&ok| ok).count();
    if n == 0 {
        return;
    }
    let mean = row
        .iter()
        .zip(admissible)
        .filter(|(_, &ok)| ok)
        .map(|(&a, _)| a)
        .sum::<f64>()
        / n as f64;
    let mut sum = 0.0;
    for (a, &ok) in row.iter_mut().zip(admissible) {
        if ok {
            *a = ((*a - mean) * beta + mean).max(0.0);
            sum += *a;
        }
    }
    if sum > 0.0 {
        for (a, &ok) in row.iter_mut().zip(admissible) {
            if ok {
                *a /= sum;
            }
        }
    } else {
        // Every entry clamped away; fall back to the row mean.
        for (a, &ok) in row.iter_mut().zip(admissible) {
            if ok {
                *a = 1.0 / n as f64;
            }
        }
    }
}

/// One head of (optionally masked, optionally extended) attention.
///
/// Columns `0..n_self` come from `k_self`/`v_self`; columns after that come
/// from `k_ext`/`v_ext` and are admissible for query `i` only when
/// `ext_rows[i]` and `ext_cols[j]` hold.
#[allow(clippy::too_many_arguments)]
fn attend_head(
    q: &[f64],
    k_self: &[f64],
    v_self: &[f64],
    k_ext: &[f64],
    v_ext: &[f64],
    d: usize,
    ext_rows: &[bool],
    ext_cols: &[bool],
    beta: f64,
    out: &mut [f64],
) -> AttentionMap {
    let nq = q.len() / d;
    let n_self = k_self.len() / d;
    let n_ext = k_ext.len() / d;
    let cols = n_self + n_ext;
    let scale = (d as f64).sqrt();
    let mut map = vec![0.0; nq * cols];
    let mut logits = vec![0.0; cols];
    let mut admissible = vec![true; cols];

    for i in 0..nq {
        let qi = &q[i * d..(i + 1) * d];
        for j in 0..n_self {
            logits[j] = dot(qi, &k_self[j * d..(j + 1) * d]) / scale;
        }
        let mut crosses = false;
        for j in 0..n_ext {
            let ok = ext_rows[i] && ext_cols[j];
            admissible[n_self + j] = ok;
            crosses |= ok;
            logits[n_self + j] = if ok {
                dot(qi, &k_ext[j * d..(j + 1) * d]) / scale
            } else {
                f64::NEG_INFINITY
            };
        }
        let row = &mut map[i * cols..(i + 1) * cols];
        masked_softmax(&logits, &admissible, row);
        if crosses {
            enhance_row(row, &admissible, beta);
        }

        let oi = &mut out[i * d..(i + 1) * d];
        oi.iter_mut().for_each(|o| *o = 0.0);
        for (j, &a) in row.iter().enumerate() {
            if !admissible[j] {
                continue;
            }
            let vj = if j < n_self {
                &v_self[j * d..(j + 1) * d]
            } else {
                &v_ext[(j - n_self) * d..(j - n_self + 1) * d]
            };
            for (o, &v) in oi.iter_mut().zip(vj) {
                *o += a * v;
            }
        }
    }
    AttentionMap {
        rows: nq,
        cols,
        data: map,
        row_stochastic: true,
    }
}

/// Standard self-attention `softmax(QKᵀ/√d)·V`, per head.
pub fn self_attention(b: &AttentionBundle) -> (AttentionOutput, Vec<AttentionMap>) {
    let n = b.tokens();
    let d = b.head_dim;
    let mut out = vec![0.0; b.heads * n * d];
    let mut maps = Vec::with_capacity(b.heads);
    for h in 0..b.heads {
        let o = &mut out[h * n * d..(h + 1) * n * d];
        maps.push(attend_head(
            b.head_slice(&b.q, h),
            b.head_slice(&b.k, h),
            b.head_slice(&b.v, h),
            &[],
            &[],
            d,
            &[],
            &[],
            1.0,
            o,
        ));
    }
    (
        AttentionOutput {
            heads: b.heads,
            tokens: n,
            head_dim: d,
            data: out,
        },
        maps,
    )
}

/// Masked extended attention.
///
/// Target queries always see every target key. A target query inside
/// `m_p` additionally sees the reference keys inside `m_g`; every other
/// reference column carries a `-inf` logit and receives exactly zero
/// weight. Rows that attend across images are contrast-enhanced with
/// `beta` over their admissible entries.
pub fn masked_extended_attention(
    target: &AttentionBundle,
    reference: &AttentionBundle,
    m_p: &TokenMask,
    m_g: &TokenMask,
    beta: f64,
) -> Result<(AttentionOutput, Vec<AttentionMap>)> {
    if target.heads != reference.heads || target.head_dim != reference.head_dim {
        return Err(TryOnError::argument(format!(
            "MEA needs matching heads/d: target {}x{}, reference {}x{}",
            target.heads, target.head_dim, reference.heads, reference.head_dim
        )));
    }
    if m_p.len() != target.tokens() || m_g.len() != reference.tokens() {
        return Err(TryOnError::argument(format!(
            "MEA masks ({} / {}) do not match token counts ({} / {})",
            m_p.len(),
            m_g.len(),
            target.tokens(),
            reference.tokens()
        )));
    }
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(TryOnError::argument(format!("contrast factor must be >= 0, got {beta}")));
    }
    let n = target.tokens();
    let d = target.head_dim;
    let mut out = vec![0.0; target.heads * n * d];
    let mut maps = Vec::with_capacity(target.heads);
    for h in 0..target.heads {
        let o = &mut out[h * n * d..(h + 1) * n * d];
        maps.push(attend_head(
            target.head_slice(&target.q, h),
            target.head_slice(&target.k, h),
            target.head_slice(&target.v, h),
            reference.head_slice(&reference.k, h),
            reference.head_slice(&reference.v, h),
            d,
            &m_p.flags,
            &m_g.flags,
            beta,
            o,
        ));
    }
    Ok((
        AttentionOutput {
            heads: target.heads,
            tokens: n,
            head_dim: d,
            data: out,
        },
        maps,
    ))
}

/// Row-wise `(A − μ)·β + μ`, then clamp negatives and renormalize.
pub fn enhance_contrast(a: &AttentionMap, beta: f64) -> Result<AttentionMap> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(TryOnError::argument(format!("contrast factor must be >= 0, got {beta}")));
    }
    let mut out = a.clone();
    if beta == 1.0 {
        return Ok(out);
    }
    let admissible = vec![true; a.cols];
    for i in 0..a.rows {
        enhance_row(&mut out.data[i * a.cols..(i + 1) * a.cols], &admissible, beta);
    }
    out.row_stochastic = true;
    Ok(out)
}

/// Thresholding rule used when pooling a pixel mask onto a token grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolRule {
    /// Token set when more than half of its pixels are set.
    Majority,
    /// Token set when any of its pixels is set.
    Any,
}

/// Area-pools `m` onto an `(h, w)` grid and thresholds with `rule`.
pub fn downsample_mask(m: &BinaryMask, grid: (usize, usize), rule: PoolRule) -> Result<TokenMask> {
    let (gh, gw) = grid;
    if gh == 0 || gw == 0 || !m.height().is_multiple_of(gh) || !m.width().is_multiple_of(gw) {
        return Err(TryOnError::argument(format!(
            "cannot pool a {}x{} mask onto a {}x{} grid",
            m.height(),
            m.width(),
            gh,
            gw
        )));
    }
    let (sy, sx) = (m.height() / gh, m.width() / gw);
    if sy != sx {
        return Err(TryOnError::argument(format!(
            "non-uniform pooling scale {sy}x{sx}"
        )));
    }
    let area = sy * sx;
    let mut flags = Vec::with_capacity(gh * gw);
    for ty in 0..gh {
        for tx in 0..gw {
            let mut hits = 0;
            for y in ty * sy..(ty + 1) * sy {
                for x in tx * sx..(tx + 1) * sx {
                    hits += m.get(y, x) as usize;
                }
            }
            flags.push(match rule {
                PoolRule::Majority => 2 * hits > area,
                PoolRule::Any => hits > 0,
            });
        }
    }
    TokenMask::new(grid, TokenOrigin::Unspecified, flags)
}

/// Where the attention of an MEA layer went.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MeaStats {
    /// Mean mass on reference columns over foreground query rows.
    pub foreground_reference_mass: f64,
    /// Largest mass any foreground query places on reference columns outside `m_g`.
    pub leaked_mass: f64,
    /// Largest mass any background query places on reference columns.
    pub background_reference_mass: f64,
}

impl MeaStats {
    pub fn from_maps(maps: &[AttentionMap], m_p: &TokenMask, m_g: &TokenMask) -> Self {
        let n_self = m_p.len();
        let mut stats = MeaStats::default();
        let mut fg_rows = 0usize;
        for map in maps {
            for i in 0..map.rows {
                let row = map.row(i);
                let (mut inside, mut outside) = (0.0, 0.0);
                for (j, &a) in row[n_self..].iter().enumerate() {
                    if m_g.flags[j] {
                        inside += a;
                    } else {
                        outside += a;
                    }
                }
                if m_p.flags[i] {
                    fg_rows += 1;
                    stats.foreground_reference_mass += inside + outside;
                    stats.leaked_mass = stats.leaked_mass.max(outside);
                } else {
                    stats.background_reference_mass =
                        stats.background_reference_mass.max(inside + outside);
                }
            }
        }
        if fg_rows > 0 {
            stats.foreground_reference_mass /= fg_rows as f64;
        }
        stats
    }
}
