//! Synthetic evaluation: the 1-D toy regression problem, procedural
//! textures, homography pairs with photometric distortion, RANSAC
//! homography fitting and the end-to-end benchmark runner.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::decode::{format_sig9, sparsify_topk, Match};
use crate::error::{invalid, Error, Result};
use crate::features::Image;
use crate::geometry::{homography_to_warp, to_cell, Homography, NormalizedGrid, WarpField};
use crate::kernel::KernelSpec;
use crate::linalg::Mat;
use crate::metrics::{aepe, pck};
use crate::pipeline::{match_images, substream, PipelineConfig};
use crate::regress::{gp_posterior, kernel_smoother, nearest_neighbour, NnMetric, SupportSet};
use crate::scalar::{norm2, sub2, Scalar};

/// Two-branch mixture: with probability `weights.0`, `x ~ U[0, 0.5]` and
/// `y = x + noise`; otherwise `x ~ U[0.4, 1]` and `y = -x + noise`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyConfig {
    pub n: usize,
    pub length: f64,
    pub weights: (f64, f64),
    pub noise_variance: f64,
    pub jitter: f64,
    pub queries: usize,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n: 100,
            length: 0.1,
            weights: (0.8, 0.2),
            noise_variance: 0.1,
            jitter: 1e-2,
            queries: 512,
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.queries < 2 {
            return Err(invalid("toy needs at least one sample and two query points"));
        }
        let (a, b) = self.weights;
        if !(a >= 0.0 && b >= 0.0 && ((a + b) - 1.0).abs() < 1e-9) {
            return Err(invalid("mixture weights must be non-negative and sum to 1"));
        }
        if !(self.length > 0.0 && self.noise_variance >= 0.0 && self.jitter >= 0.0) {
            return Err(invalid("length must be positive, noise and jitter non-negative"));
        }
        Ok(())
    }
}

pub const TOY_BRANCH_1: (f64, f64) = (0.0, 0.5);
pub const TOY_BRANCH_2: (f64, f64) = (0.4, 1.0);

#[derive(Debug, Clone, PartialEq)]
pub struct ToySamples {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// 1 or 2.
    pub branch: Vec<u8>,
}

pub fn toy_sample(cfg: &ToyConfig) -> Result<ToySamples> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_variance.sqrt()).map_err(|e| invalid(e.to_string()))?;
    let mut out = ToySamples {
        x: Vec::with_capacity(cfg.n),
        y: Vec::with_capacity(cfg.n),
        branch: Vec::with_capacity(cfg.n),
    };
    for _ in 0..cfg.n {
        let first = rng.random::<f64>() < cfg.weights.0;
        let (lo, hi) = if first { TOY_BRANCH_1 } else { TOY_BRANCH_2 };
        let x = lo + (hi - lo) * rng.random::<f64>();
        let e = noise.sample(&mut rng);
        out.x.push(x);
        out.y.push(if first { x } else { -x } + e);
        out.branch.push(if first { 1 } else { 2 });
    }
    Ok(out)
}

/// Predictions of the three regressors on a dense grid over `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyCurves {
    pub x: Vec<f64>,
    pub gp_mean: Vec<f64>,
    pub gp_var: Vec<f64>,
    pub attn: Vec<f64>,
    pub nn: Vec<f64>,
    pub support_x: Vec<f64>,
    pub support_y: Vec<f64>,
}

pub fn toy_run(samples: &ToySamples, cfg: &ToyConfig) -> Result<ToyCurves> {
    cfg.validate()?;
    if samples.x.is_empty() || samples.x.len() != samples.y.len() {
        return Err(invalid("toy run needs a nonempty sample set"));
    }
    let n = samples.x.len();
    let support = SupportSet::new(Mat::from_vec(n, 1, samples.x.clone())?, Mat::from_vec(n, 1, samples.y.clone())?)?;
    let q = cfg.queries;
    let xs: Vec<f64> = (0..q).map(|i| i as f64 / (q - 1) as f64).collect();
    let query = Mat::from_vec(q, 1, xs.clone())?;
    let spec = KernelSpec::squared_exponential(cfg.length)?;
    let gp = gp_posterior(&support, &query, &spec, cfg.jitter)?;
    let attn = kernel_smoother(&support, &query, &spec)?;
    let nn = nearest_neighbour(&support, &query, NnMetric::Euclidean)?;
    Ok(ToyCurves {
        x: xs,
        gp_mean: gp.mean.into_vec(),
        gp_var: gp.variance,
        attn: attn.embedding.into_vec(),
        nn: nn.embedding.into_vec(),
        support_x: samples.x.clone(),
        support_y: samples.y.clone(),
    })
}

impl ToyCurves {
    /// `x,gp_mean,gp_var,attn,nn,support_x,support_y`; the support columns
    /// are filled on the first `n` rows and empty afterwards.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,gp_mean,gp_var,attn,nn,support_x,support_y\n");
        let rows = self.x.len().max(self.support_x.len());
        let cell = |v: Option<&f64>| v.map(|&v| format_sig9(v)).unwrap_or_default();
        for i in 0..rows {
            let cols = [
                cell(self.x.get(i)),
                cell(self.gp_mean.get(i)),
                cell(self.gp_var.get(i)),
                cell(self.attn.get(i)),
                cell(self.nn.get(i)),
                cell(self.support_x.get(i)),
                cell(self.support_y.get(i)),
            ];
            s.push_str(&cols.join(","));
            s.push('\n');
        }
        s
    }
}

/// Root-mean-square deviation from `y = x` over `x ∈ [lo, hi]`.
pub fn branch_rmse(x: &[f64], pred: &[f64], lo: f64, hi: f64) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for (&xi, &p) in x.iter().zip(pred) {
        if xi >= lo && xi <= hi {
            s += (p - xi) * (p - xi);
            n += 1;
        }
    }
    if n == 0 {
        f64::NAN
    } else {
        (s / n as f64).sqrt()
    }
}

/// Width of the switch from the `+x` branch to the `-x` branch around the
/// zero crossing nearest `near`: from the last point still at or above the
/// upper midline `x/2` to the first point at or below the lower midline
/// `-x/2`. Infinite when no crossing exists.
pub fn transition_width(x: &[f64], pred: &[f64], near: f64) -> f64 {
    let crossing = (1..pred.len())
        .filter(|&i| pred[i - 1] > 0.0 && pred[i] <= 0.0)
        .min_by(|&a, &b| (x[a] - near).abs().total_cmp(&(x[b] - near).abs()));
    let Some(c) = crossing else { return f64::INFINITY };
    let lo = (0..c).rev().find(|&i| pred[i] >= x[i] / 2.0);
    let hi = (c..pred.len()).find(|&i| pred[i] <= -x[i] / 2.0);
    match (lo, hi) {
        (Some(a), Some(b)) => x[b] - x[a],
        _ => f64::INFINITY,
    }
}

fn lattice_noise(h: usize, w: usize, cells: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let side = cells + 1;
    let lattice: Vec<f64> = (0..side * side).map(|_| rng.random::<f64>()).collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        let fy = (r as f64 + 0.5) / h as f64 * cells as f64;
        let y0 = (fy.floor() as usize).min(cells - 1);
        let ty = smooth(fy - y0 as f64);
        for c in 0..w {
            let fx = (c as f64 + 0.5) / w as f64 * cells as f64;
            let x0 = (fx.floor() as usize).min(cells - 1);
            let tx = smooth(fx - x0 as f64);
            let at = |yy: usize, xx: usize| lattice[yy * side + xx];
            let top = at(y0, x0) * (1.0 - tx) + at(y0, x0 + 1) * tx;
            let bot = at(y0 + 1, x0) * (1.0 - tx) + at(y0 + 1, x0 + 1) * tx;
            out[r * w + c] = top * (1.0 - ty) + bot * ty;
        }
    }
    out
}

/// Multi-octave value noise rescaled to `[0, 1]`.
pub fn value_noise_texture(height: usize, width: usize, seed: u64) -> Result<Image<f64>> {
    if height < 2 || width < 2 {
        return Err(invalid("texture must be at least 2x2"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let octaves = [(4usize, 1.0), (8, 0.6), (16, 0.4), (32, 0.3), (64, 0.2)];
    let mut acc = vec![0.0; height * width];
    for (cells, amp) in octaves {
        for (a, v) in acc.iter_mut().zip(lattice_noise(height, width, cells, &mut rng)) {
            *a += amp * v;
        }
    }
    let lo = acc.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = acc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    Image::new(height, width, 1, acc.into_iter().map(|v| (v - lo) / span).collect())
}

/// `count` textures with independent seeds.
pub fn procedural_textures(count: usize, size: usize, seed: u64) -> Result<Vec<Image<f64>>> {
    (0..count)
        .map(|i| value_noise_texture(size, size, substream(seed, &format!("texture{i}"))))
        .collect()
}

/// Sampling ranges for synthetic homography pairs; every range is `(lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthPairConfig {
    pub rotation_deg: (f64, f64),
    pub scale: (f64, f64),
    /// Per-axis translation in normalized units.
    pub translation: (f64, f64),
    /// Per-axis projective coefficient.
    pub perspective: (f64, f64),
    pub gain: (f64, f64),
    pub bias: (f64, f64),
    pub gamma: (f64, f64),
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthPairConfig {
    fn default() -> Self {
        Self {
            rotation_deg: (-15.0, 15.0),
            scale: (0.85, 1.2),
            translation: (-0.15, 0.15),
            perspective: (-0.05, 0.05),
            gain: (0.8, 1.2),
            bias: (-0.1, 0.1),
            gamma: (0.8, 1.25),
            noise_std: 0.01,
            seed: 0,
        }
    }
}

impl SynthPairConfig {
    /// No geometric or photometric change.
    pub fn identity() -> Self {
        Self {
            rotation_deg: (0.0, 0.0),
            scale: (1.0, 1.0),
            translation: (0.0, 0.0),
            perspective: (0.0, 0.0),
            gain: (1.0, 1.0),
            bias: (0.0, 0.0),
            gamma: (1.0, 1.0),
            noise_std: 0.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("rotation", self.rotation_deg),
            ("scale", self.scale),
            ("translation", self.translation),
            ("perspective", self.perspective),
            ("gain", self.gain),
            ("bias", self.bias),
            ("gamma", self.gamma),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo <= hi) {
                return Err(invalid(format!("{name} range ({lo}, {hi}) is not ordered")));
            }
        }
        if !(self.scale.0 > 0.0 && self.gamma.0 > 0.0 && self.noise_std >= 0.0) {
            return Err(invalid("scale and gamma must be positive, noise non-negative"));
        }
        Ok(())
    }
}

fn draw(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthPair {
    /// The input image warped by the homography and photometrically distorted.
    pub support: Image<f64>,
    /// Maps query to support coordinates.
    pub homography: Homography<f64>,
    /// Reference warp on the query pixel grid.
    pub reference: WarpField<f64>,
}

const SYNTH_RETRIES: usize = 16;

pub fn synth_pair(img: &Image<f64>, cfg: &SynthPairConfig) -> Result<SynthPair> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(substream(cfg.seed, "homography"));
    let mut found = None;
    for _ in 0..SYNTH_RETRIES {
        let angle = draw(&mut rng, cfg.rotation_deg).to_radians();
        let scale = draw(&mut rng, cfg.scale);
        let (tx, ty) = (draw(&mut rng, cfg.translation), draw(&mut rng, cfg.translation));
        let (px, py) = (draw(&mut rng, cfg.perspective), draw(&mut rng, cfg.perspective));
        if let Ok(h) = Homography::from_params(angle, scale, tx, ty, px, py) {
            if let Ok(inv) = h.inverse() {
                found = Some((h, inv));
                break;
            }
        }
    }
    let (h, inv) = found.ok_or_else(|| Error::Generation(format!("no invertible homography after {SYNTH_RETRIES} draws")))?;

    let (rows, cols, ch) = (img.height(), img.width(), img.channels());
    let grid = NormalizedGrid::<f64>::new(rows, cols)?;
    let mut data: Vec<f64> = grid
        .coords()
        .par_iter()
        .flat_map_iter(|&y| {
            let src = inv.apply(y);
            (0..ch).map(move |k| {
                src.and_then(|x| img.sample(to_cell(x[0], cols), to_cell(x[1], rows), k))
                    .unwrap_or(0.0)
            })
        })
        .collect();

    let mut prng = ChaCha8Rng::seed_from_u64(substream(cfg.seed, "photometric"));
    let gain = draw(&mut prng, cfg.gain);
    let bias = draw(&mut prng, cfg.bias);
    let gamma = draw(&mut prng, cfg.gamma);
    let mut nrng = ChaCha8Rng::seed_from_u64(substream(cfg.seed, "noise"));
    let noise = Normal::new(0.0, cfg.noise_std).map_err(|e| invalid(e.to_string()))?;
    for v in &mut data {
        let t = (gain * v.powf(gamma) + bias).clamp(0.0, 1.0);
        let e = if cfg.noise_std > 0.0 { noise.sample(&mut nrng) } else { 0.0 };
        *v = (t + e).clamp(0.0, 1.0);
    }
    Ok(SynthPair {
        support: Image::new(rows, cols, ch, data)?,
        homography: h,
        reference: homography_to_warp(&h, &grid),
    })
}

/// Symmetric transfer error `sqrt((‖Hq − s‖² + ‖H⁻¹s − q‖²) / 2)`;
/// infinite when either projection degenerates.
pub fn symmetric_transfer_error<T: Scalar>(h: &Homography<T>, inv: &Homography<T>, q: [T; 2], s: [T; 2]) -> T {
    match (h.apply(q), inv.apply(s)) {
        (Some(a), Some(b)) => {
            let (ea, eb) = (norm2(sub2(a, s)), norm2(sub2(b, q)));
            ((ea * ea + eb * eb) / T::lit(2.0)).sqrt()
        }
        _ => T::infinity(),
    }
}

/// Similarity moving the centroid to the origin with mean distance √2.
fn hartley<T: Scalar>(pts: &[[T; 2]]) -> Option<[[T; 3]; 3]> {
    let n = T::from_usize_lossy(pts.len());
    let cx = pts.iter().map(|p| p[0]).sum::<T>() / n;
    let cy = pts.iter().map(|p| p[1]).sum::<T>() / n;
    let md = pts.iter().map(|p| norm2([p[0] - cx, p[1] - cy])).sum::<T>() / n;
    if !(md > T::lit(1e-12)) {
        return None;
    }
    let s = T::SQRT_2() / md;
    let (o, z) = (T::one(), T::zero());
    Some([[s, z, -s * cx], [z, s, -s * cy], [z, z, o]])
}

/// Direct linear transform on `n ≥ 4` correspondences.
pub fn fit_homography_dlt<T: Scalar>(q: &[[T; 2]], s: &[[T; 2]]) -> Result<Homography<T>> {
    if q.len() != s.len() || q.len() < 4 {
        return Err(Error::EstimationFailure("need at least 4 correspondences".into()));
    }
    let degenerate = || Error::EstimationFailure("degenerate correspondence set".into());
    let tq = hartley(q).ok_or_else(degenerate)?;
    let ts = hartley(s).ok_or_else(degenerate)?;
    let norm = |t: &[[T; 3]; 3], p: [T; 2]| [t[0][0] * p[0] + t[0][2], t[1][1] * p[1] + t[1][2]];
    let mut ata = Mat::<T>::zeros(9, 9);
    let (o, z) = (T::one(), T::zero());
    for (&a, &b) in q.iter().zip(s) {
        let [x, y] = norm(&tq, a);
        let [u, v] = norm(&ts, b);
        let r1 = [-x, -y, -o, z, z, z, u * x, u * y, u];
        let r2 = [z, z, z, -x, -y, -o, v * x, v * y, v];
        for r in [r1, r2] {
            for i in 0..9 {
                for j in 0..9 {
                    ata[(i, j)] += r[i] * r[j];
                }
            }
        }
    }
    let (_, vecs) = crate::linalg::symmetric_eigen(&ata)?;
    let hn = [
        [vecs[(0, 0)], vecs[(1, 0)], vecs[(2, 0)]],
        [vecs[(3, 0)], vecs[(4, 0)], vecs[(5, 0)]],
        [vecs[(6, 0)], vecs[(7, 0)], vecs[(8, 0)]],
    ];
    let s_inv = Homography::new(ts).map_err(|_| degenerate())?.inverse()?;
    let m = crate::geometry::mat3_mul(s_inv.matrix(), &crate::geometry::mat3_mul(&hn, &tq));
    Homography::new(m).map_err(|_| degenerate())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RansacResult<T> {
    pub homography: Homography<T>,
    pub inliers: Vec<bool>,
}

impl<T> RansacResult<T> {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

fn inlier_mask<T: Scalar>(h: &Homography<T>, matches: &[Match<T>], thresh: T) -> Option<Vec<bool>> {
    let inv = h.inverse().ok()?;
    Some(
        matches
            .iter()
            .map(|m| symmetric_transfer_error(h, &inv, m.query, m.support) < thresh)
            .collect(),
    )
}

/// Best-of-`iterations` 4-point hypotheses by inlier count, refit on the
/// winning inlier set. `thresh` is in normalized units.
pub fn ransac_homography<T: Scalar>(matches: &[Match<T>], iterations: usize, thresh: T, seed: u64) -> Result<RansacResult<T>> {
    let n = matches.len();
    if n < 4 {
        return Err(Error::EstimationFailure(format!("need at least 4 matches, got {n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let count = |m: &[bool]| m.iter().filter(|&&b| b).count();
    let mut best: Option<(Homography<T>, Vec<bool>)> = None;
    for _ in 0..iterations.max(1) {
        let idx = rand::seq::index::sample(&mut rng, n, 4);
        let q: Vec<[T; 2]> = idx.iter().map(|i| matches[i].query).collect();
        let s: Vec<[T; 2]> = idx.iter().map(|i| matches[i].support).collect();
        let Ok(h) = fit_homography_dlt(&q, &s) else { continue };
        let Some(mask) = inlier_mask(&h, matches, thresh) else { continue };
        if best.as_ref().is_none_or(|(_, b)| count(&mask) > count(b)) {
            best = Some((h, mask));
        }
    }
    let (h, mask) = best.ok_or_else(|| Error::EstimationFailure("no valid hypothesis".into()))?;
    if count(&mask) < 4 {
        return Err(Error::EstimationFailure(format!("best hypothesis has only {} inliers", count(&mask))));
    }
    let q: Vec<[T; 2]> = matches.iter().zip(&mask).filter(|(_, &b)| b).map(|(m, _)| m.query).collect();
    let s: Vec<[T; 2]> = matches.iter().zip(&mask).filter(|(_, &b)| b).map(|(m, _)| m.support).collect();
    if let Ok(refit) = fit_homography_dlt(&q, &s) {
        if let Some(rmask) = inlier_mask(&refit, matches, thresh) {
            if count(&rmask) >= count(&mask) {
                return Ok(RansacResult { homography: refit, inliers: rmask });
            }
        }
    }
    Ok(RansacResult { homography: h, inliers: mask })
}

/// Mean pixel distance between the images of the four frame corners.
pub fn corner_error(estimate: &Homography<f64>, truth: &Homography<f64>, dims: (usize, usize)) -> f64 {
    let (sx, sy) = (dims.1 as f64 / 2.0, dims.0 as f64 / 2.0);
    let corners = [[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]];
    corners
        .iter()
        .map(|&c| match (estimate.apply(c), truth.apply(c)) {
            (Some(a), Some(b)) => {
                let d = sub2(a, b);
                norm2([d[0] * sx, d[1] * sy])
            }
            _ => f64::INFINITY,
        })
        .sum::<f64>()
        / 4.0
}

// built once per run, so the size gap is irrelevant
#[allow(clippy::large_enum_variant)]
#[derive(Debug, Clone, PartialEq)]
pub enum BenchPipeline {
    /// The reference warp itself.
    Oracle,
    /// Every pixel maps to itself.
    Identity,
    Matcher(PipelineConfig),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchConfig {
    pub pairs: usize,
    pub synth: SynthPairConfig,
    /// Matches handed to RANSAC.
    pub top_k: usize,
    pub ransac_iterations: usize,
    /// Inlier threshold in normalized units.
    pub ransac_threshold: f64,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            pairs: 20,
            synth: SynthPairConfig::default(),
            top_k: 1000,
            ransac_iterations: 500,
            ransac_threshold: 0.02,
            seed: 0,
        }
    }
}

pub const PCK_THRESHOLDS: [f64; 3] = [1.0, 3.0, 5.0];

#[derive(Debug, Clone, PartialEq)]
pub struct PairResult {
    pub index: usize,
    pub seed: u64,
    /// At [`PCK_THRESHOLDS`] pixels.
    pub pck: [f64; 3],
    pub aepe: f64,
    /// Mean corner error of the RANSAC homography, in pixels.
    pub homography_error: Option<f64>,
    pub mean_confidence: f64,
    pub failure: Option<String>,
}

impl PairResult {
    fn failed(index: usize, seed: u64, e: Error) -> Self {
        Self {
            index,
            seed,
            pck: [f64::NAN; 3],
            aepe: f64::NAN,
            homography_error: None,
            mean_confidence: f64::NAN,
            failure: Some(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub median: f64,
    pub mean: f64,
}

fn aggregate(v: impl Iterator<Item = f64>) -> Aggregate {
    let mut v: Vec<f64> = v.filter(|x| x.is_finite()).collect();
    if v.is_empty() {
        return Aggregate { median: f64::NAN, mean: f64::NAN };
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let median = if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 };
    Aggregate { median, mean: v.iter().sum::<f64>() / n as f64 }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub pairs: Vec<PairResult>,
}

impl BenchReport {
    fn ok(&self) -> impl Iterator<Item = &PairResult> {
        self.pairs.iter().filter(|p| p.failure.is_none())
    }

    pub fn pck(&self, k: usize) -> Aggregate {
        aggregate(self.ok().map(|p| p.pck[k]))
    }

    pub fn aepe(&self) -> Aggregate {
        aggregate(self.ok().map(|p| p.aepe))
    }

    pub fn homography_error(&self) -> Aggregate {
        aggregate(self.ok().filter_map(|p| p.homography_error))
    }

    pub fn failures(&self) -> usize {
        self.pairs.len() - self.ok().count()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("pair,seed,pck1,pck3,pck5,aepe,homography_error,mean_confidence,failure\n");
        for p in &self.pairs {
            let h = p.homography_error.map(format_sig9).unwrap_or_default();
            let fail = p.failure.as_deref().unwrap_or("").replace([',', '\n'], ";");
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                p.index,
                p.seed,
                format_sig9(p.pck[0]),
                format_sig9(p.pck[1]),
                format_sig9(p.pck[2]),
                format_sig9(p.aepe),
                h,
                format_sig9(p.mean_confidence),
                fail
            ));
        }
        s
    }

    /// Aggregate block of `key = value` lines.
    pub fn summary(&self) -> String {
        let line = |name: &str, a: Aggregate| format!("{name}_median = {}\n{name}_mean = {}\n", format_sig9(a.median), format_sig9(a.mean));
        let mut s = format!("pairs = {}\nfailures = {}\n", self.pairs.len(), self.failures());
        for (k, t) in PCK_THRESHOLDS.iter().enumerate() {
            s.push_str(&line(&format!("pck{t}"), self.pck(k)));
        }
        s.push_str(&line("aepe", self.aepe()));
        s.push_str(&line("homography_error", self.homography_error()));
        s
    }
}

fn run_pair(img: &Image<f64>, index: usize, cfg: &BenchConfig, pipeline: &BenchPipeline) -> Result<PairResult> {
    let seed = substream(cfg.seed, &format!("pair{index}"));
    let pair = synth_pair(img, &SynthPairConfig { seed, ..cfg.synth })?;
    let dims = (img.height(), img.width());
    let pred = match pipeline {
        BenchPipeline::Oracle => pair.reference.clone(),
        BenchPipeline::Identity => WarpField::identity(&NormalizedGrid::new(dims.0, dims.1)?),
        BenchPipeline::Matcher(pc) => match_images(img, &pair.support, pc)?.warp,
    };
    let mask: Vec<bool> = pair.reference.confidence.iter().map(|&c| c > 0.5).collect();
    let mut p = [0.0; 3];
    for (k, &t) in PCK_THRESHOLDS.iter().enumerate() {
        p[k] = pck(&pred, &pair.reference, &mask, t, dims)?;
    }
    let e = aepe(&pred, &pair.reference, &mask, dims)?;
    let homography_error = sparsify_topk(&pred, cfg.top_k)
        .and_then(|m| ransac_homography(&m, cfg.ransac_iterations, cfg.ransac_threshold, substream(seed, "ransac")))
        .ok()
        .map(|r| corner_error(&r.homography, &pair.homography, dims));
    Ok(PairResult {
        index,
        seed,
        pck: p,
        aepe: e,
        homography_error,
        mean_confidence: pred.confidence.iter().sum::<f64>() / pred.len() as f64,
        failure: None,
    })
}

/// Evaluates `pipeline` on `cfg.pairs` synthetic pairs; pair `i` uses image
/// `i mod images.len()`. Per-pair errors are recorded, not propagated.
pub fn run_benchmark(images: &[Image<f64>], cfg: &BenchConfig, pipeline: &BenchPipeline) -> Result<BenchReport> {
    if images.is_empty() {
        return Err(invalid("benchmark needs at least one image"));
    }
    cfg.synth.validate()?;
    if let BenchPipeline::Matcher(pc) = pipeline {
        pc.validate()?;
    }
    let pairs = (0..cfg.pairs)
        .into_par_iter()
        .map(|i| {
            run_pair(&images[i % images.len()], i, cfg, pipeline)
                .unwrap_or_else(|e| PairResult::failed(i, substream(cfg.seed, &format!("pair{i}")), e))
        })
        .collect();
    Ok(BenchReport { pairs })
}
