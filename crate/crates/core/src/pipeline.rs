//! End-to-end dense matching: descriptors, regression onto the embedded
//! support grid, decoding, coherence filtering and coarse-to-fine
//! refinement.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;

use crate::decode::{channel_decode, coherence_filter, confidence_estimate, refine_subpixel, DecodeParams};
use crate::embedding::{sample_basis, BasisKind, EmbeddingBasis};
use crate::error::{invalid, Error, Result};
use crate::features::{extract_dense_descriptors, DescriptorParams, FeatureMap, Image};
use crate::geometry::{NormalizedGrid, WarpField};
use crate::kernel::KernelSpec;
use crate::linalg::Mat;
use crate::regress::{attach_variance_neighbourhood, gp_posterior, kernel_smoother, nearest_neighbour, NnMetric, RegressorOutput, SupportSet};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegressorKind {
    Gp,
    Attention,
    Nn,
}

impl FromStr for RegressorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gp" => Ok(Self::Gp),
            "attention" => Ok(Self::Attention),
            "nn" => Ok(Self::Nn),
            _ => Err(invalid(format!("unknown regressor '{s}' (expected gp, attention or nn)"))),
        }
    }
}

impl fmt::Display for RegressorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Gp => "gp",
            Self::Attention => "attention",
            Self::Nn => "nn",
        })
    }
}

/// Coordinate embedding used as regression target; `Identity` regresses
/// raw coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbeddingKind {
    Basis(BasisKind),
    Identity,
}

impl FromStr for EmbeddingKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "identity" {
            Ok(Self::Identity)
        } else {
            s.parse().map(Self::Basis)
        }
    }
}

impl fmt::Display for EmbeddingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Basis(b) => b.fmt(f),
            Self::Identity => f.write_str("identity"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PipelineConfig {
    pub regressor: RegressorKind,
    pub embedding: EmbeddingKind,
    pub dim: usize,
    pub inverse_length: f64,
    pub tau: f64,
    pub epsilon: f64,
    pub jitter: f64,
    /// Strides at which the regressor runs, coarse first.
    pub gp_strides: Vec<usize>,
    /// Strides of the local refinement passes, coarse first.
    pub refine_strides: Vec<usize>,
    pub refine_window: usize,
    pub coherence: bool,
    pub coherence_radius: usize,
    /// Spatial and flow bandwidths of the coherence filter, in cells.
    pub coherence_spatial: f64,
    pub coherence_flow: f64,
    pub decode: DecodeParams<f64>,
    /// Side of the variance neighbourhood feeding the confidence estimate.
    pub variance_window: usize,
    pub confidence_calibration: (f64, f64),
    pub descriptor: DescriptorParams,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            regressor: RegressorKind::Gp,
            embedding: EmbeddingKind::Basis(BasisKind::Fourier),
            dim: 256,
            inverse_length: 10.0,
            tau: 0.2,
            epsilon: 1e-6,
            jitter: 1e-4,
            gp_strides: vec![32, 16],
            refine_strides: vec![16, 8, 4, 2],
            refine_window: 2,
            coherence: true,
            coherence_radius: 2,
            coherence_spatial: 2.0,
            coherence_flow: 2.0,
            decode: DecodeParams::default(),
            variance_window: 5,
            confidence_calibration: (6.0, 3.0),
            descriptor: DescriptorParams::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gp_strides.is_empty() || self.gp_strides.contains(&0) || self.refine_strides.contains(&0) {
            return Err(invalid("strides must be positive and at least one regression stride is needed"));
        }
        if self.dim == 0 {
            return Err(invalid("embedding dimension must be positive"));
        }
        if !(self.inverse_length > 0.0) {
            return Err(invalid("inverse length must be positive"));
        }
        if !(self.jitter >= 0.0) {
            return Err(invalid("jitter must be non-negative"));
        }
        if self.variance_window.is_multiple_of(2) {
            return Err(invalid("variance window must be odd"));
        }
        if !(self.coherence_spatial > 0.0 && self.coherence_flow > 0.0) {
            return Err(invalid("coherence bandwidths must be positive"));
        }
        KernelSpec::<f64>::exp_cos_sim(self.tau, self.epsilon)?;
        Ok(())
    }

    fn kernel<T: Scalar>(&self) -> Result<KernelSpec<T>> {
        KernelSpec::exp_cos_sim(T::lit(self.tau), T::lit(self.epsilon))
    }

    fn decode_params<T: Scalar>(&self) -> DecodeParams<T> {
        let d = &self.decode;
        DecodeParams {
            nms_radius_cells: T::lit(d.nms_radius_cells),
            max_modes: d.max_modes,
            window: d.window,
            temperature: T::lit(d.temperature),
            min_relative_score: T::lit(d.min_relative_score),
            refine_iterations: d.refine_iterations,
        }
    }

    /// All strides that need feature maps, without duplicates, coarse first.
    pub fn all_strides(&self) -> Vec<usize> {
        let mut s: Vec<usize> = self.gp_strides.iter().chain(&self.refine_strides).copied().collect();
        s.sort_unstable_by(|a, b| b.cmp(a));
        s.dedup();
        s
    }
}

/// Independent seed for the named component.
pub fn substream(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, then a splitmix64 finalizer
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-regression-level summary.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelStats {
    pub stride: usize,
    pub queries: usize,
    pub support: usize,
    pub mean_confidence: f64,
    pub mean_modes: f64,
    pub degenerate: usize,
    pub jitter: f64,
    pub least_squares: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchOutput<T> {
    pub warp: WarpField<T>,
    pub levels: Vec<LevelStats>,
}

impl<T: Scalar> MatchOutput<T> {
    pub fn mean_confidence(&self) -> f64 {
        let c = &self.warp.confidence;
        c.iter().map(|v| v.as_f64()).sum::<f64>() / c.len().max(1) as f64
    }
}

/// Regression targets for the support cells, and the basis to decode with.
fn support_targets<T: Scalar>(cfg: &PipelineConfig, grid: &NormalizedGrid<T>) -> Result<(Mat<T>, Option<EmbeddingBasis<T>>)> {
    match cfg.embedding {
        EmbeddingKind::Identity => {
            let c = grid.coords();
            Ok((Mat::from_fn(c.len(), 2, |i, j| c[i][j]), None))
        }
        EmbeddingKind::Basis(kind) => {
            let basis = sample_basis(kind, cfg.dim, T::lit(cfg.inverse_length), substream(cfg.seed, "basis"))?;
            let targets = basis.embed(grid.coords())?.into_values();
            Ok((targets, Some(basis)))
        }
    }
}

fn mean_rows<T: Scalar>(m: &Mat<T>) -> Vec<T> {
    (0..m.rows())
        .map(|i| m.row(i).iter().copied().sum::<T>() / T::from_usize_lossy(m.cols()))
        .collect()
}

/// One regression level: query cells of `qf` matched into the cell grid of `sf`.
pub fn regress_level<T: Scalar>(qf: &FeatureMap<T>, sf: &FeatureMap<T>, cfg: &PipelineConfig) -> Result<(WarpField<T>, LevelStats)> {
    if qf.channels() != sf.channels() {
        return Err(invalid(format!(
            "feature channel counts differ: query {}, support {}",
            qf.channels(),
            sf.channels()
        )));
    }
    let (qh, qw) = (qf.height_cells(), qf.width_cells());
    let sgrid = NormalizedGrid::<T>::new(sf.height_cells(), sf.width_cells())?;
    let (targets, basis) = support_targets(cfg, &sgrid)?;
    let support = SupportSet::new(sf.values().clone(), targets)?.with_grid(sgrid.height(), sgrid.width())?;
    let spec = cfg.kernel::<T>()?;
    let query = qf.values();

    let mut jitter = 0.0;
    let mut least_squares = false;
    let (pred, variance): (RegressorOutput<T>, Option<Vec<T>>) = match cfg.regressor {
        RegressorKind::Gp => {
            let post = gp_posterior(&support, query, &spec, T::lit(cfg.jitter))?.with_grid(qh, qw)?;
            jitter = post.jitter.as_f64();
            least_squares = post.least_squares;
            let out = attach_variance_neighbourhood(&post, cfg.variance_window)?;
            let v = out.neighbourhood.as_ref().map(mean_rows);
            (out, v)
        }
        RegressorKind::Attention => {
            let mut out = kernel_smoother(&support, query, &spec)?;
            out.grid = Some((qh, qw));
            (out, None)
        }
        RegressorKind::Nn => {
            let mut out = nearest_neighbour(&support, query, NnMetric::Cosine)?;
            out.grid = Some((qh, qw));
            (out, None)
        }
    };

    let (mut warp, mean_modes, degenerate) = match &basis {
        Some(basis) => {
            let dec = channel_decode(&pred, basis, &sgrid, &cfg.decode_params())?;
            let modes = dec.modes.iter().map(|m| m.modes.len()).sum::<usize>() as f64 / dec.modes.len().max(1) as f64;
            let degenerate = dec.degenerate.iter().filter(|&&d| d).count();
            let mut warp = dec.warp;
            if let Some(v) = &variance {
                let cal = cfg.confidence_calibration;
                let mut c = confidence_estimate(v, &warp.confidence, (T::lit(cal.0), T::lit(cal.1)))?;
                for (ci, &d) in c.iter_mut().zip(&dec.degenerate) {
                    if d {
                        *ci = T::zero();
                    }
                }
                warp.confidence = c;
            }
            (warp, modes, degenerate)
        }
        None => {
            let one = T::one();
            let flow: Vec<[T; 2]> = (0..pred.len())
                .map(|i| {
                    let r = pred.embedding.row(i);
                    [r[0].max(-one).min(one), r[1].max(-one).min(one)]
                })
                .collect();
            let conf = match &variance {
                Some(v) => {
                    let cal = cfg.confidence_calibration;
                    confidence_estimate(v, &vec![one; v.len()], (T::lit(cal.0), T::lit(cal.1)))?
                }
                None => vec![one; pred.len()],
            };
            (WarpField::new(qh, qw, flow, conf)?, 1.0, 0)
        }
    };

    if cfg.coherence {
        warp = coherence_pass(&warp, (sgrid.height(), sgrid.width()), cfg)?;
    }

    let stats = LevelStats {
        stride: qf.stride(),
        queries: qh * qw,
        support: support.len(),
        mean_confidence: warp.confidence.iter().map(|c| c.as_f64()).sum::<f64>() / warp.len().max(1) as f64,
        mean_modes,
        degenerate,
        jitter,
        least_squares,
    };
    Ok((warp, stats))
}

/// Coherence filter with bandwidths given in cells of the query and
/// support grids.
fn coherence_pass<T: Scalar>(w: &WarpField<T>, support_cells: (usize, usize), cfg: &PipelineConfig) -> Result<WarpField<T>> {
    let sp = NormalizedGrid::<T>::new(support_cells.0, support_cells.1)?.spacing();
    let qsp = w.grid().spacing();
    let spatial = T::lit(cfg.coherence_spatial) * qsp[0].max(qsp[1]);
    let flow = T::lit(cfg.coherence_flow) * sp[0].max(sp[1]);
    Ok(coherence_filter(w, cfg.coherence_radius, spatial, flow))
}

/// Keeps the finer estimate except where the upsampled coarse one is more
/// confident.
fn fuse<T: Scalar>(coarse: &WarpField<T>, fine: WarpField<T>) -> Result<WarpField<T>> {
    let up = coarse.resample(fine.height(), fine.width())?;
    let mut out = fine;
    for i in 0..out.len() {
        if up.confidence[i] > out.confidence[i] {
            out.flow[i] = up.flow[i];
            out.confidence[i] = up.confidence[i];
        }
    }
    Ok(out)
}

/// Feature maps for one image at several strides, coarse first.
#[derive(Debug, Clone)]
pub struct FeaturePyramid<T> {
    pub levels: Vec<FeatureMap<T>>,
}

impl<T: Scalar> FeaturePyramid<T> {
    pub fn extract(img: &Image<T>, strides: &[usize], params: &DescriptorParams) -> Result<Self> {
        let levels = strides
            .par_iter()
            .map(|&s| extract_dense_descriptors(img, s, params))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { levels })
    }

    pub fn single(map: FeatureMap<T>) -> Self {
        Self { levels: vec![map] }
    }

    pub fn at(&self, stride: usize) -> Option<&FeatureMap<T>> {
        self.levels.iter().find(|m| m.stride() == stride)
    }
}

/// Regression at every configured regression stride, then refinement at
/// every refinement stride both pyramids carry; the warp is returned on
/// `out_dims` (query pixels).
pub fn match_pyramids<T: Scalar>(q: &FeaturePyramid<T>, s: &FeaturePyramid<T>, cfg: &PipelineConfig, out_dims: (usize, usize)) -> Result<MatchOutput<T>> {
    cfg.validate()?;
    let mut gp_strides: Vec<usize> = cfg.gp_strides.iter().copied().filter(|&st| q.at(st).is_some() && s.at(st).is_some()).collect();
    gp_strides.sort_unstable_by(|a, b| b.cmp(a));
    gp_strides.dedup();
    if gp_strides.is_empty() {
        return Err(invalid("no regression stride available in both feature sets"));
    }
    let mut warp: Option<WarpField<T>> = None;
    let mut levels = Vec::new();
    for &st in &gp_strides {
        let (w, stats) = regress_level(q.at(st).expect("checked"), s.at(st).expect("checked"), cfg)?;
        levels.push(stats);
        warp = Some(match warp {
            None => w,
            Some(prev) => fuse(&prev, w)?,
        });
    }
    let mut warp = warp.expect("at least one level");
    let finest = *gp_strides.last().expect("nonempty");
    let mut refine: Vec<usize> = cfg.refine_strides.iter().copied().filter(|&st| st <= finest).collect();
    refine.sort_unstable_by(|a, b| b.cmp(a));
    refine.dedup();
    for st in refine {
        let (Some(qf), Some(sf)) = (q.at(st), s.at(st)) else { continue };
        let w = warp.resample(qf.height_cells(), qf.width_cells())?;
        warp = refine_subpixel(&w, qf, sf, cfg.refine_window)?;
        if cfg.coherence {
            warp = coherence_pass(&warp, (sf.height_cells(), sf.width_cells()), cfg)?;
        }
    }
    let warp = warp.resample(out_dims.0, out_dims.1)?;
    Ok(MatchOutput { warp, levels })
}

pub fn match_images<T: Scalar>(query: &Image<T>, support: &Image<T>, cfg: &PipelineConfig) -> Result<MatchOutput<T>> {
    cfg.validate()?;
    let strides = cfg.all_strides();
    let (q, s) = rayon::join(
        || FeaturePyramid::extract(query, &strides, &cfg.descriptor),
        || FeaturePyramid::extract(support, &strides, &cfg.descriptor),
    );
    match_pyramids(&q?, &s?, cfg, (query.height(), query.width()))
}

/// Matches two precomputed feature maps; regression and refinement both
/// run at their common stride and the warp is returned at pixel resolution.
pub fn match_feature_maps<T: Scalar>(qf: FeatureMap<T>, sf: FeatureMap<T>, cfg: &PipelineConfig) -> Result<MatchOutput<T>> {
    if qf.stride() != sf.stride() {
        return Err(invalid(format!("feature strides differ: {} vs {}", qf.stride(), sf.stride())));
    }
    let stride = qf.stride();
    let dims = (qf.height_cells() * stride, qf.width_cells() * stride);
    let mut c = cfg.clone();
    c.gp_strides = vec![stride];
    c.refine_strides = if cfg.refine_strides.is_empty() { vec![] } else { vec![stride] };
    match_pyramids(&FeaturePyramid::single(qf), &FeaturePyramid::single(sf), &c, dims)
}
