//! From predicted coordinate embeddings back to a dense warp.
//!
//! Channel decoding correlates each predicted embedding with the embedded
//! support grid, keeps the strongest separated local maxima and refines the
//! top one by a windowed soft-argmax. The remaining passes are local: a
//! bilateral coherence filter on the flow, a logistic confidence estimate,
//! quadratic-fit sub-cell refinement against the support features,
//! forward-backward consistency and top-k sparsification.

use std::io::{BufRead, Write};
use std::path::Path;

use rayon::prelude::*;

use crate::embedding::EmbeddingBasis;
use crate::error::{format_err, invalid, Result};
use crate::features::FeatureMap;
use crate::geometry::{from_cell, to_cell, NormalizedGrid, WarpField};
use crate::linalg::Mat;
use crate::regress::RegressorOutput;
use crate::scalar::{dot, logistic, norm2, sub2, Scalar};

/// Correlation of one predicted embedding against every embedded grid cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrelationProfile<T> {
    pub values: Vec<T>,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mode<T> {
    pub coord: [T; 2],
    /// Raw correlation at the mode.
    pub score: T,
}

/// Separated local maxima of a correlation profile, strongest first.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModeSet<T> {
    pub modes: Vec<Mode<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeParams<T> {
    /// Minimum separation between modes, in grid cells of the support grid.
    pub nms_radius_cells: T,
    pub max_modes: usize,
    /// Soft-argmax half window in cells.
    pub window: usize,
    /// Soft-argmax temperature on max-normalized correlation.
    pub temperature: T,
    /// Modes weaker than this fraction of the top score are dropped.
    pub min_relative_score: T,
    /// Soft-argmax re-centring passes.
    pub refine_iterations: usize,
}

impl<T: Scalar> Default for DecodeParams<T> {
    fn default() -> Self {
        Self {
            nms_radius_cells: T::lit(3.0),
            max_modes: 4,
            window: 2,
            temperature: T::lit(0.05),
            min_relative_score: T::lit(0.2),
            refine_iterations: 3,
        }
    }
}

impl<T: Scalar> DecodeParams<T> {
    /// Non-max-suppression radius in normalized units for `grid`.
    pub fn nms_radius(&self, grid: &NormalizedGrid<T>) -> T {
        let s = grid.spacing();
        self.nms_radius_cells * s[0].max(s[1])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeOutput<T> {
    /// Refined top mode per query; confidence is the cosine similarity of
    /// the prediction with the embedding at the top mode, clamped to [0, 1].
    pub warp: WarpField<T>,
    pub modes: Vec<ModeSet<T>>,
    /// Raw top correlation per query.
    pub scores: Vec<T>,
    /// Queries whose prediction carried no usable signal.
    pub degenerate: Vec<bool>,
}

/// Correlation of one prediction with the pre-embedded grid rows.
pub fn correlation_profile<T: Scalar>(pred: &[T], embedded_grid: &Mat<T>, grid: &NormalizedGrid<T>) -> CorrelationProfile<T> {
    CorrelationProfile {
        values: (0..embedded_grid.rows()).map(|g| dot(pred, embedded_grid.row(g))).collect(),
        height: grid.height(),
        width: grid.width(),
    }
}

/// Local maxima (8-neighbourhood, plateaus resolved to the lowest index),
/// greedy non-max suppression, strongest first.
pub fn extract_modes<T: Scalar>(profile: &CorrelationProfile<T>, grid: &NormalizedGrid<T>, nms_radius: T, max_modes: usize, min_relative_score: T) -> ModeSet<T> {
    let (h, w) = (profile.height, profile.width);
    let v = &profile.values;
    let mut cands: Vec<usize> = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let i = r * w + c;
            let mut is_max = true;
            'nb: for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (rr, cc) = (r as isize + dr, c as isize + dc);
                    if rr < 0 || cc < 0 || rr >= h as isize || cc >= w as isize {
                        continue;
                    }
                    let j = rr as usize * w + cc as usize;
                    if v[j] > v[i] || (v[j] == v[i] && j < i) {
                        is_max = false;
                        break 'nb;
                    }
                }
            }
            if is_max {
                cands.push(i);
            }
        }
    }
    cands.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let mut modes: Vec<Mode<T>> = Vec::new();
    let top = cands.first().map(|&i| v[i]);
    for i in cands {
        if modes.len() >= max_modes {
            break;
        }
        if let Some(t) = top {
            if t > T::zero() && v[i] < min_relative_score * t {
                break;
            }
        }
        let p = grid.coords()[i];
        if modes.iter().all(|m| norm2(sub2(m.coord, p)) >= nms_radius) {
            modes.push(Mode { coord: p, score: v[i] });
        }
    }
    ModeSet { modes }
}

/// Windowed soft-argmax around cell `(r, c)`, re-centred until it settles.
/// The window is shrunk per axis to stay symmetric at the grid border.
pub fn soft_argmax<T: Scalar>(profile: &CorrelationProfile<T>, grid: &NormalizedGrid<T>, start: (usize, usize), params: &DecodeParams<T>) -> [T; 2] {
    let (h, w) = (profile.height, profile.width);
    let v = &profile.values;
    let peak = v.iter().copied().fold(T::neg_infinity(), T::max);
    let (mut r, mut c) = start;
    let mut est = grid.coord(r, c);
    if !(peak > T::zero()) {
        return est;
    }
    for _ in 0..params.refine_iterations.max(1) {
        let wr = params.window.min(r).min(h - 1 - r);
        let wc = params.window.min(c).min(w - 1 - c);
        let mut acc = [T::zero(); 2];
        let mut total = T::zero();
        for rr in (r - wr)..=(r + wr) {
            for cc in (c - wc)..=(c + wc) {
                let s = v[rr * w + cc] / peak;
                let wt = ((s - T::one()) / params.temperature).exp();
                let p = grid.coord(rr, cc);
                acc[0] += wt * p[0];
                acc[1] += wt * p[1];
                total += wt;
            }
        }
        if !(total > T::zero()) {
            break;
        }
        est = [acc[0] / total, acc[1] / total];
        match grid.pixel_of(est) {
            Some(next) if next != (r, c) => (r, c) = next,
            _ => break,
        }
    }
    est
}

/// Decodes predicted embeddings against `basis` evaluated on `grid`.
pub fn channel_decode<T: Scalar>(pred: &RegressorOutput<T>, basis: &EmbeddingBasis<T>, grid: &NormalizedGrid<T>, params: &DecodeParams<T>) -> Result<DecodeOutput<T>> {
    if pred.dim() != basis.dim() {
        return Err(invalid(format!(
            "prediction dimension {} does not match basis dimension {}",
            pred.dim(),
            basis.dim()
        )));
    }
    if grid.is_empty() {
        return Err(invalid("decode grid is empty"));
    }
    // Unit rows: the profile is then maximal at the query's own cell even
    // where the basis covers the plane unevenly.
    let mut embedded = basis.embed(grid.coords())?.into_values();
    let norms: Vec<T> = (0..embedded.rows()).map(|g| dot(embedded.row(g), embedded.row(g)).sqrt()).collect();
    for (g, &n) in norms.iter().enumerate() {
        if n > T::zero() {
            embedded.row_mut(g).iter_mut().for_each(|v| *v /= n);
        }
    }
    let nms = params.nms_radius(grid);
    let n = pred.len();
    let (qh, qw) = pred.grid.unwrap_or((1, n.max(1)));
    let query_grid = if qh * qw == n && n > 0 { Some(NormalizedGrid::<T>::new(qh, qw)?) } else { None };

    // flow, confidence, modes, raw score, degenerate
    type Decoded<T> = ([T; 2], T, ModeSet<T>, T, bool);
    let per_query: Vec<Decoded<T>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let p = pred.embedding.row(i);
            let identity = query_grid.as_ref().map_or([T::zero(); 2], |g| g.coords()[i]);
            let pn = dot(p, p).sqrt();
            if !(pn > T::zero()) || p.iter().any(|v| !v.is_finite()) {
                return (identity, T::zero(), ModeSet::default(), T::zero(), true);
            }
            let profile = correlation_profile(p, &embedded, grid);
            let modes = extract_modes(&profile, grid, nms, params.max_modes, params.min_relative_score);
            let Some(top) = modes.modes.first().copied() else {
                return (identity, T::zero(), modes, T::zero(), true);
            };
            if !(top.score > T::zero()) {
                return (identity, T::zero(), modes, top.score, true);
            }
            let cell = grid.pixel_of(top.coord).expect("mode lies on the grid");
            // sub-cell refinement only: the decoded point stays in the top mode's cell
            let soft = soft_argmax(&profile, grid, cell, params);
            let sp = grid.spacing();
            let flow = [0, 1].map(|k| {
                let h = sp[k] * T::lit(0.5);
                soft[k].max(top.coord[k] - h).min(top.coord[k] + h)
            });
            let g = cell.0 * grid.width() + cell.1;
            let conf = (top.score / pn).max(T::zero()).min(T::one());
            (flow, conf, modes, top.score * norms[g], false)
        })
        .collect();

    let mut flow = Vec::with_capacity(n);
    let mut conf = Vec::with_capacity(n);
    let mut modes = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    let mut degenerate = Vec::with_capacity(n);
    for (f, c, m, s, d) in per_query {
        flow.push(f);
        conf.push(c);
        modes.push(m);
        scores.push(s);
        degenerate.push(d);
    }
    let (h, w) = if query_grid.is_some() { (qh, qw) } else { (1, n) };
    Ok(DecodeOutput {
        warp: WarpField::new(h, w, flow, conf)?,
        modes,
        scores,
        degenerate,
    })
}

/// Confidence- and proximity-weighted bilateral average over a
/// `(2·radius+1)²` neighbourhood. The average is taken over displacements
/// (flow minus the cell's own position), so translations pass through
/// unchanged up to the grid border. Confidence is left unchanged.
pub fn coherence_filter<T: Scalar>(w: &WarpField<T>, radius: usize, spatial_length: T, flow_length: T) -> WarpField<T> {
    let (h, wd) = (w.height(), w.width());
    let grid = w.grid();
    let inv_s = T::one() / (spatial_length * spatial_length);
    let inv_f = T::one() / (flow_length * flow_length);
    let r = radius as isize;
    let disp: Vec<[T; 2]> = w.flow.iter().zip(grid.coords()).map(|(&f, &p)| sub2(f, p)).collect();
    let flow: Vec<[T; 2]> = (0..h * wd)
        .into_par_iter()
        .map(|i| {
            let (y, x) = ((i / wd) as isize, (i % wd) as isize);
            let p = grid.coords()[i];
            let d = disp[i];
            let mut acc = [T::zero(); 2];
            let mut total = T::zero();
            for dy in -r..=r {
                let yy = y + dy;
                if yy < 0 || yy >= h as isize {
                    continue;
                }
                for dx in -r..=r {
                    let xx = x + dx;
                    if xx < 0 || xx >= wd as isize {
                        continue;
                    }
                    let j = yy as usize * wd + xx as usize;
                    let dp = sub2(grid.coords()[j], p);
                    let dd = sub2(disp[j], d);
                    let wt = w.confidence[j]
                        * (-(dp[0] * dp[0] + dp[1] * dp[1]) * inv_s).exp()
                        * (-(dd[0] * dd[0] + dd[1] * dd[1]) * inv_f).exp();
                    acc[0] += wt * disp[j][0];
                    acc[1] += wt * disp[j][1];
                    total += wt;
                }
            }
            if total > T::zero() {
                [p[0] + acc[0] / total, p[1] + acc[1] / total]
            } else {
                w.flow[i]
            }
        })
        .collect();
    WarpField::new(h, wd, flow, w.confidence.clone()).expect("shape preserved")
}

/// `logistic(a · score/max(score) − b · variance/max(variance))`, clamped to [0, 1].
pub fn confidence_estimate<T: Scalar>(variance: &[T], scores: &[T], calib: (T, T)) -> Result<Vec<T>> {
    if variance.len() != scores.len() {
        return Err(invalid(format!(
            "variance field has {} entries, score field {}",
            variance.len(),
            scores.len()
        )));
    }
    let vmax = variance.iter().copied().fold(T::zero(), T::max);
    let smax = scores.iter().copied().fold(T::zero(), T::max);
    Ok(variance
        .iter()
        .zip(scores)
        .map(|(&v, &s)| {
            let nv = if vmax > T::zero() { v.max(T::zero()) / vmax } else { T::zero() };
            let ns = if smax > T::zero() { s.max(T::zero()) / smax } else { T::zero() };
            logistic(calib.0 * ns - calib.1 * nv).max(T::zero()).min(T::one())
        })
        .collect())
}

fn cosine<T: Scalar>(a: &[T], b: &[T]) -> T {
    let den = (dot(a, a) * dot(b, b)).sqrt();
    if den > T::zero() {
        dot(a, b) / den
    } else {
        T::zero()
    }
}

/// Peak offset of the quadratic through a 3x3 patch (`f[dy+1][dx+1]`), if
/// the patch is concave and the peak lies within one step.
fn quadratic_peak<T: Scalar>(f: &[[T; 3]; 3]) -> Option<[T; 2]> {
    let half = T::lit(0.5);
    let gx = (f[1][2] - f[1][0]) * half;
    let gy = (f[2][1] - f[0][1]) * half;
    let gxx = f[1][2] - T::lit(2.0) * f[1][1] + f[1][0];
    let gyy = f[2][1] - T::lit(2.0) * f[1][1] + f[0][1];
    let gxy = (f[2][2] - f[2][0] - f[0][2] + f[0][0]) * T::lit(0.25);
    let det = gxx * gyy - gxy * gxy;
    if !(gxx < T::zero() && det > T::zero()) {
        return None;
    }
    let ox = -(gyy * gx - gxy * gy) / det;
    let oy = -(gxx * gy - gxy * gx) / det;
    (ox.abs() <= T::one() && oy.abs() <= T::one()).then_some([ox, oy])
}

/// Local search of each query cell's match against bilinearly sampled
/// support features on a `(2·window+1)²` cell lattice, with a quadratic fit
/// around the best lattice point.
pub fn refine_subpixel<T: Scalar>(w: &WarpField<T>, query_features: &FeatureMap<T>, support_features: &FeatureMap<T>, window: usize) -> Result<WarpField<T>> {
    if query_features.stride() != support_features.stride() {
        return Err(invalid(format!(
            "feature maps have different strides: {} vs {}",
            query_features.stride(),
            support_features.stride()
        )));
    }
    if query_features.channels() != support_features.channels() {
        return Err(invalid("feature maps have different channel counts"));
    }
    if w.height() != query_features.height_cells() || w.width() != query_features.width_cells() {
        return Err(invalid(format!(
            "warp {}x{} does not match query feature grid {}x{}",
            w.height(),
            w.width(),
            query_features.height_cells(),
            query_features.width_cells()
        )));
    }
    let (sh, sw) = (support_features.height_cells(), support_features.width_cells());
    let win = window as isize;
    let side = 2 * window + 1;
    let channels = support_features.channels();
    let half = T::lit(0.5);
    let flat_tol = T::lit(1e-9);

    let out: Vec<([T; 2], T)> = (0..w.len())
        .into_par_iter()
        .map(|i| {
            let f = w.flow[i];
            let conf = w.confidence[i];
            let q = query_features.values().row(i);
            if q.iter().all(|&v| v == T::zero()) {
                return (f, conf * half);
            }
            let col = to_cell(f[0], sw);
            let row = to_cell(f[1], sh);
            let mut buf = vec![T::zero(); channels];
            let mut scores = vec![T::zero(); side * side];
            let mut clamped = vec![false; side * side];
            for (k, (dy, dx)) in (-win..=win).flat_map(|dy| (-win..=win).map(move |dx| (dy, dx))).enumerate() {
                clamped[k] = support_features.sample_into(col + T::lit(dx as f64), row + T::lit(dy as f64), &mut buf);
                scores[k] = cosine(q, &buf);
            }
            let (mut best, mut lo, mut hi) = (0usize, scores[0], scores[0]);
            for (k, &s) in scores.iter().enumerate() {
                if s > scores[best] {
                    best = k;
                }
                lo = lo.min(s);
                hi = hi.max(s);
            }
            if hi - lo < flat_tol {
                return (f, conf * half);
            }
            let (by, bx) = ((best / side) as isize - win, (best % side) as isize - win);
            let mut off = [T::lit(bx as f64), T::lit(by as f64)];
            if bx.abs() < win && by.abs() < win {
                let mut patch = [[T::zero(); 3]; 3];
                for (py, prow) in patch.iter_mut().enumerate() {
                    for (px, v) in prow.iter_mut().enumerate() {
                        let yy = (by + win + py as isize - 1) as usize;
                        let xx = (bx + win + px as isize - 1) as usize;
                        *v = scores[yy * side + xx];
                    }
                }
                if let Some(o) = quadratic_peak(&patch) {
                    off[0] += o[0];
                    off[1] += o[1];
                }
            }
            let lim = T::lit(window as f64);
            off[0] = off[0].max(-lim).min(lim);
            off[1] = off[1].max(-lim).min(lim);
            let nf = [from_cell(col + off[0], sw), from_cell(row + off[1], sh)];
            let nc = if clamped[best] { conf * half } else { conf };
            (nf, nc)
        })
        .collect();
    let (flow, confidence) = out.into_iter().unzip();
    WarpField::new(w.height(), w.width(), flow, confidence)
}

/// `1` where warping query → support → query lands within `threshold` of
/// the start; matches leaving `[-1, 1]²` fail.
pub fn mutual_consistency_filter<T: Scalar>(w_qs: &WarpField<T>, w_sq: &WarpField<T>, threshold: T) -> Vec<bool> {
    let grid = w_qs.grid();
    let one = T::one();
    grid.coords()
        .par_iter()
        .zip(w_qs.flow.par_iter())
        .map(|(&x, &y)| {
            if !(y[0].abs() <= one && y[1].abs() <= one) {
                return false;
            }
            let (back, _) = w_sq.sample(y);
            norm2(sub2(back, x)) < threshold
        })
        .collect()
}

/// One sparse correspondence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match<T> {
    pub query: [T; 2],
    pub support: [T; 2],
    pub confidence: T,
}

/// The `k` most confident matches; ties go to the lower row-major index.
pub fn sparsify_topk<T: Scalar>(w: &WarpField<T>, k: usize) -> Result<Vec<Match<T>>> {
    if k == 0 {
        return Err(invalid("k must be at least 1"));
    }
    let grid = w.grid();
    let mut idx: Vec<usize> = (0..w.len()).collect();
    idx.sort_by(|&a, &b| {
        w.confidence[b]
            .partial_cmp(&w.confidence[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    Ok(idx
        .into_iter()
        .take(k)
        .map(|i| Match {
            query: grid.coords()[i],
            support: w.flow[i],
            confidence: w.confidence[i],
        })
        .collect())
}

/// `%.9g`-style formatting: 9 significant digits, trailing zeros trimmed.
pub fn format_sig9(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let sci = format!("{v:.8e}");
    let (mant, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    let trim = |s: &str| -> String {
        if s.contains('.') {
            s.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            s.to_string()
        }
    };
    if (-5..9).contains(&exp) {
        trim(&format!("{:.*}", (8 - exp) as usize, v))
    } else {
        format!("{}e{}{:02}", trim(mant), if exp < 0 { '-' } else { '+' }, exp.abs())
    }
}

/// Writes `qx qy sx sy conf` per line in normalized coordinates.
pub fn write_matches<T: Scalar>(matches: &[Match<T>], mut w: impl Write) -> Result<()> {
    let mut out = String::new();
    for m in matches {
        let vals = [m.query[0], m.query[1], m.support[0], m.support[1], m.confidence];
        let line: Vec<String> = vals.iter().map(|v| format_sig9(v.as_f64())).collect();
        out.push_str(&line.join(" "));
        out.push('\n');
    }
    w.write_all(out.as_bytes())?;
    Ok(())
}

pub fn save_matches<T: Scalar>(matches: &[Match<T>], path: impl AsRef<Path>) -> Result<()> {
    write_matches(matches, std::io::BufWriter::new(std::fs::File::create(path)?))
}

pub fn read_matches<T: Scalar>(r: impl BufRead) -> Result<Vec<Match<T>>> {
    let mut out = Vec::new();
    let mut offset = 0u64;
    for line in r.lines() {
        let line = line?;
        let len = line.len() as u64 + 1;
        let t = line.trim();
        if !t.is_empty() && !t.starts_with('#') {
            let vals: Vec<f64> = t
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| format_err(offset, format!("bad number: {e}")))?;
            if vals.len() != 5 {
                return Err(format_err(offset, format!("expected 5 fields, found {}", vals.len())));
            }
            let v = |k: usize| T::lit(vals[k]);
            out.push(Match {
                query: [v(0), v(1)],
                support: [v(2), v(3)],
                confidence: v(4),
            });
        }
        offset += len;
    }
    Ok(out)
}
