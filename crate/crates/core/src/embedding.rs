//! Coordinate embeddings `R^2 -> R^D`.
//!
//! Three interchangeable bases are provided: random Fourier features, a
//! uniform field of squared-exponential bumps and a compact `cos^2` basis.
//! All three are parameterized by the same inverse length scale `ℓ`: the
//! normalized inner product of two embeddings approaches
//! `exp(-ℓ² |x - y|² / 2)` as `D` grows. Each basis derives its own internal
//! width from `ℓ`.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{format_err, invalid, Result};
use crate::linalg::Mat;
use crate::scalar::{dot, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BasisKind {
    Fourier,
    SquaredExponential,
    CosSq,
}

impl BasisKind {
    pub fn tag(self) -> u8 {
        match self {
            BasisKind::Fourier => 0,
            BasisKind::SquaredExponential => 1,
            BasisKind::CosSq => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(BasisKind::Fourier),
            1 => Some(BasisKind::SquaredExponential),
            2 => Some(BasisKind::CosSq),
            _ => None,
        }
    }
}

impl std::str::FromStr for BasisKind {
    type Err = crate::error::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fourier" => Ok(BasisKind::Fourier),
            "se" => Ok(BasisKind::SquaredExponential),
            "cossq" => Ok(BasisKind::CosSq),
            other => Err(invalid(format!("unknown basis kind {other:?} (fourier|se|cossq)"))),
        }
    }
}

impl std::fmt::Display for BasisKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BasisKind::Fourier => "fourier",
            BasisKind::SquaredExponential => "se",
            BasisKind::CosSq => "cossq",
        })
    }
}

/// `cos(W x + b)` with `W_ij ~ N(0, ℓ²)` and `b_i ~ U[0, 2π)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FourierBasis<T> {
    pub projection: Vec<[T; 2]>,
    pub phase: Vec<T>,
}

/// `exp(-|x - θ|² / w²)` with `w = 1/ℓ`, centres uniform on `[-1-w, 1+w]²`.
#[derive(Debug, Clone, PartialEq)]
pub struct SeBasis<T> {
    pub centers: Vec<[T; 2]>,
    pub width: T,
}

/// `cos²(π |x - θ| / L)` inside radius `L/2`, zero outside.
#[derive(Debug, Clone, PartialEq)]
pub struct CosSqBasis<T> {
    pub centers: Vec<[T; 2]>,
    pub support: T,
}

#[derive(Debug, Clone, PartialEq)]
enum Params<T> {
    Fourier(FourierBasis<T>),
    SquaredExponential(SeBasis<T>),
    CosSq(CosSqBasis<T>),
}

/// Identity of a sampled basis: everything needed to resample it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BasisId {
    pub kind: BasisKind,
    pub dim: usize,
    pub inverse_length: f64,
    pub seed: u64,
}

/// A sampled coordinate-embedding basis.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBasis<T> {
    id: BasisId,
    inverse_length: T,
    params: Params<T>,
    kernel_factor: T,
}

/// Ratio `∫u cos²(πu) du / ∫u³ cos²(πu) du` over `[0, 1/2]`; fixes the cos²
/// support so its autocorrelation has the variance of the Gaussian limit.
fn cossq_support_factor() -> f64 {
    let pi2 = std::f64::consts::PI.powi(2);
    let i1 = 1.0 / 16.0 - 1.0 / (4.0 * pi2);
    let i3 = 1.0 / 128.0 - 3.0 / (32.0 * pi2) + 3.0 / (8.0 * pi2 * pi2);
    (i1 / i3).sqrt()
}

/// Number of calibration points per axis for the cos² normalization.
const COSSQ_CALIBRATION_SIDE: usize = 16;

/// Samples a basis; deterministic in `(kind, dim, inverse_length, seed)`.
pub fn sample_basis<T: Scalar>(kind: BasisKind, dim: usize, inverse_length: T, seed: u64) -> Result<EmbeddingBasis<T>> {
    if dim == 0 {
        return Err(invalid("embedding dimension must be at least 1"));
    }
    if !(inverse_length > T::zero()) || !inverse_length.is_finite() {
        return Err(invalid(format!("inverse length scale must be positive, got {inverse_length}")));
    }
    let ell = inverse_length.as_f64();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = match kind {
        BasisKind::Fourier => {
            let normal = Normal::new(0.0, ell).map_err(|e| invalid(e.to_string()))?;
            let projection = (0..dim)
                .map(|_| [T::lit(normal.sample(&mut rng)), T::lit(normal.sample(&mut rng))])
                .collect();
            let phase = (0..dim)
                .map(|_| T::lit(rng.random_range(0.0..std::f64::consts::TAU)))
                .collect();
            Params::Fourier(FourierBasis { projection, phase })
        }
        BasisKind::SquaredExponential => {
            let w = 1.0 / ell;
            let centers = uniform_centers(&mut rng, dim, 1.0 + w);
            Params::SquaredExponential(SeBasis { centers, width: T::lit(w) })
        }
        BasisKind::CosSq => {
            let support = cossq_support_factor() / ell;
            let centers = uniform_centers(&mut rng, dim, 1.0 + support / 2.0);
            Params::CosSq(CosSqBasis { centers, support: T::lit(support) })
        }
    };
    build(kind, dim, inverse_length, seed, params)
}

fn uniform_centers<T: Scalar>(rng: &mut ChaCha8Rng, dim: usize, half: f64) -> Vec<[T; 2]> {
    (0..dim)
        .map(|_| [T::lit(rng.random_range(-half..half)), T::lit(rng.random_range(-half..half))])
        .collect()
}

fn build<T: Scalar>(kind: BasisKind, dim: usize, inverse_length: T, seed: u64, params: Params<T>) -> Result<EmbeddingBasis<T>> {
    let mut basis = EmbeddingBasis {
        id: BasisId {
            kind,
            dim,
            inverse_length: inverse_length.as_f64(),
            seed,
        },
        inverse_length,
        params,
        kernel_factor: T::one(),
    };
    let d = T::from_usize_lossy(dim);
    basis.kernel_factor = match &basis.params {
        Params::Fourier(_) => T::lit(2.0) / d,
        Params::SquaredExponential(se) => {
            // E[B(x)B(y)] = (π w² / 2) / area * exp(-|x-y|²/(2w²)) for interior points
            let side = T::lit(2.0) + T::lit(2.0) * se.width;
            let area = side * side;
            let expected = T::PI() * se.width * se.width / (T::lit(2.0) * area);
            T::one() / (expected * d)
        }
        Params::CosSq(_) => {
            let n = COSSQ_CALIBRATION_SIDE;
            let mut buf = vec![T::zero(); dim];
            let mut total = T::zero();
            for r in 0..n {
                for c in 0..n {
                    let p = [
                        crate::geometry::from_cell(T::from_usize_lossy(c), n),
                        crate::geometry::from_cell(T::from_usize_lossy(r), n),
                    ];
                    basis.embed_into(p, &mut buf);
                    total += dot(&buf, &buf);
                }
            }
            let mean = total / T::from_usize_lossy(n * n);
            if mean > T::zero() {
                T::one() / mean
            } else {
                T::one()
            }
        }
    };
    Ok(basis)
}

impl<T: Scalar> EmbeddingBasis<T> {
    pub fn id(&self) -> BasisId {
        self.id
    }

    pub fn kind(&self) -> BasisKind {
        self.id.kind
    }

    pub fn dim(&self) -> usize {
        self.id.dim
    }

    pub fn inverse_length(&self) -> T {
        self.inverse_length
    }

    pub fn seed(&self) -> u64 {
        self.id.seed
    }

    /// Scale applied to the raw inner product by [`empirical_kernel`].
    pub fn kernel_factor(&self) -> T {
        self.kernel_factor
    }

    pub fn fourier(&self) -> Option<&FourierBasis<T>> {
        match &self.params {
            Params::Fourier(f) => Some(f),
            _ => None,
        }
    }

    pub fn se(&self) -> Option<&SeBasis<T>> {
        match &self.params {
            Params::SquaredExponential(s) => Some(s),
            _ => None,
        }
    }

    pub fn cossq(&self) -> Option<&CosSqBasis<T>> {
        match &self.params {
            Params::CosSq(c) => Some(c),
            _ => None,
        }
    }

    /// Embeds one point into `out` (length `D`). No finiteness check.
    pub fn embed_into(&self, p: [T; 2], out: &mut [T]) {
        debug_assert_eq!(out.len(), self.dim());
        match &self.params {
            Params::Fourier(f) => {
                for ((o, w), &b) in out.iter_mut().zip(&f.projection).zip(&f.phase) {
                    *o = (w[0] * p[0] + w[1] * p[1] + b).cos();
                }
            }
            Params::SquaredExponential(se) => {
                let inv_w2 = T::one() / (se.width * se.width);
                for (o, c) in out.iter_mut().zip(&se.centers) {
                    let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
                    *o = (-(dx * dx + dy * dy) * inv_w2).exp();
                }
            }
            Params::CosSq(cs) => {
                let half = cs.support * T::lit(0.5);
                for (o, c) in out.iter_mut().zip(&cs.centers) {
                    let (dx, dy) = (p[0] - c[0], p[1] - c[1]);
                    let r = (dx * dx + dy * dy).sqrt();
                    *o = if r < half {
                        let v = (T::PI() * r / cs.support).cos();
                        v * v
                    } else {
                        T::zero()
                    };
                }
            }
        }
    }

    pub fn embed_point(&self, p: [T; 2]) -> Vec<T> {
        let mut out = vec![T::zero(); self.dim()];
        self.embed_into(p, &mut out);
        out
    }

    /// Embeds every coordinate; rows of the result follow `coords`.
    pub fn embed(&self, coords: &[[T; 2]]) -> Result<EmbeddedCoords<T>> {
        if let Some(i) = coords.iter().position(|p| !p[0].is_finite() || !p[1].is_finite()) {
            return Err(invalid(format!("non-finite coordinate at index {i}")));
        }
        let d = self.dim();
        let mut values = Mat::zeros(coords.len(), d);
        if d > 0 {
            let rows: Vec<Vec<T>> = coords.par_iter().map(|&p| self.embed_point(p)).collect();
            for (i, r) in rows.into_iter().enumerate() {
                values.row_mut(i).copy_from_slice(&r);
            }
        }
        Ok(EmbeddedCoords { values, basis: self.id })
    }

    /// Writes the `DKEB` binary format.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(BASIS_MAGIC);
        buf.extend_from_slice(&BASIS_VERSION.to_le_bytes());
        buf.push(self.kind().tag());
        buf.extend_from_slice(&(self.dim() as u32).to_le_bytes());
        buf.extend_from_slice(&self.inverse_length.as_f64().to_le_bytes());
        buf.extend_from_slice(&self.seed().to_le_bytes());
        let mut push = |v: T| buf.extend_from_slice(&v.as_f64().to_le_bytes());
        match &self.params {
            Params::Fourier(f) => {
                for w in &f.projection {
                    push(w[0]);
                    push(w[1]);
                }
                for &b in &f.phase {
                    push(b);
                }
            }
            Params::SquaredExponential(SeBasis { centers, .. }) | Params::CosSq(CosSqBasis { centers, .. }) => {
                for c in centers {
                    push(c[0]);
                    push(c[1]);
                }
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Parses the `DKEB` binary format.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const HEADER: usize = 4 + 4 + 1 + 4 + 8 + 8;
        if bytes.len() < 4 || &bytes[..4] != BASIS_MAGIC {
            return Err(format_err(0, "bad magic, expected \"DKEB\""));
        }
        if bytes.len() < HEADER {
            return Err(format_err(bytes.len() as u64, "truncated header"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != BASIS_VERSION {
            return Err(format_err(4, format!("unsupported version {version}")));
        }
        let kind = BasisKind::from_tag(bytes[8]).ok_or_else(|| format_err(8, format!("unknown kind tag {}", bytes[8])))?;
        let dim = u32::from_le_bytes(bytes[9..13].try_into().unwrap()) as usize;
        let ell = f64::from_le_bytes(bytes[13..21].try_into().unwrap());
        let seed = u64::from_le_bytes(bytes[21..29].try_into().unwrap());
        if dim == 0 {
            return Err(format_err(9, "zero dimension"));
        }
        if !(ell > 0.0) || !ell.is_finite() {
            return Err(format_err(13, format!("invalid inverse length {ell}")));
        }
        let count = match kind {
            BasisKind::Fourier => 3 * dim,
            _ => 2 * dim,
        };
        let expected = count as u64 * 8;
        let actual = (bytes.len() - HEADER) as u64;
        if expected != actual {
            return Err(format_err(
                HEADER as u64,
                format!("payload size mismatch: expected {expected} bytes, found {actual}"),
            ));
        }
        let vals: Vec<T> = bytes[HEADER..]
            .chunks_exact(8)
            .map(|c| T::lit(f64::from_le_bytes(c.try_into().unwrap())))
            .collect();
        let pairs = |v: &[T]| -> Vec<[T; 2]> { v.chunks_exact(2).map(|c| [c[0], c[1]]).collect() };
        let params = match kind {
            BasisKind::Fourier => Params::Fourier(FourierBasis {
                projection: pairs(&vals[..2 * dim]),
                phase: vals[2 * dim..].to_vec(),
            }),
            BasisKind::SquaredExponential => Params::SquaredExponential(SeBasis {
                centers: pairs(&vals),
                width: T::lit(1.0 / ell),
            }),
            BasisKind::CosSq => Params::CosSq(CosSqBasis {
                centers: pairs(&vals),
                support: T::lit(cossq_support_factor() / ell),
            }),
        };
        build(kind, dim, T::lit(ell), seed, params)
    }
}

const BASIS_MAGIC: &[u8; 4] = b"DKEB";
const BASIS_VERSION: u32 = 1;

/// Embedded coordinates, one row per point.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddedCoords<T> {
    values: Mat<T>,
    basis: BasisId,
}

impl<T: Scalar> EmbeddedCoords<T> {
    pub fn values(&self) -> &Mat<T> {
        &self.values
    }

    pub fn into_values(self) -> Mat<T> {
        self.values
    }

    pub fn basis(&self) -> BasisId {
        self.basis
    }

    pub fn len(&self) -> usize {
        self.values.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.values.rows() == 0
    }
}

/// Normalized inner product of two embeddings; approaches the Gaussian
/// `exp(-ℓ² |x - y|² / 2)` as the dimension grows.
pub fn empirical_kernel<T: Scalar>(basis: &EmbeddingBasis<T>, x: [T; 2], y: [T; 2]) -> T {
    let bx = basis.embed_point(x);
    let by = basis.embed_point(y);
    basis.kernel_factor() * dot(&bx, &by)
}

/// The Gaussian limit shared by all bases.
pub fn gaussian_limit<T: Scalar>(inverse_length: T, x: [T; 2], y: [T; 2]) -> T {
    let (dx, dy) = (x[0] - y[0], x[1] - y[1]);
    (-(inverse_length * inverse_length) * (dx * dx + dy * dy) * T::lit(0.5)).exp()
}

/// Large-dimension limit of [`empirical_kernel`] for interior points.
/// Fourier and SE bases reach the Gaussian exactly; the compact cos² bump
/// reaches its own normalized overlap, which shares the Gaussian's second
/// moment but not its shape.
pub fn limit_kernel<T: Scalar>(kind: BasisKind, inverse_length: T, x: [T; 2], y: [T; 2]) -> T {
    match kind {
        BasisKind::Fourier | BasisKind::SquaredExponential => gaussian_limit(inverse_length, x, y),
        BasisKind::CosSq => {
            let support = cossq_support_factor() / inverse_length.as_f64();
            let d = crate::scalar::norm2(crate::scalar::sub2(x, y)).as_f64();
            T::lit(cossq_overlap(d / support))
        }
    }
}

const OVERLAP_TABLE: usize = 256;
const OVERLAP_QUADRATURE: usize = 256;

/// Normalized self-overlap of the unit-support cos² bump at offset `s`
/// (in units of the support), tabulated once by midpoint quadrature.
fn cossq_overlap(s: f64) -> f64 {
    static TABLE: std::sync::OnceLock<Vec<f64>> = std::sync::OnceLock::new();
    let table = TABLE.get_or_init(|| {
        let n = OVERLAP_QUADRATURE;
        let h = 1.0 / n as f64;
        let bump = |u: f64, v: f64| {
            let r = (u * u + v * v).sqrt();
            if r < 0.5 {
                (std::f64::consts::PI * r).cos().powi(2)
            } else {
                0.0
            }
        };
        let overlap = |off: f64| -> f64 {
            let mut acc = 0.0;
            for i in 0..n {
                let u = -0.5 + (i as f64 + 0.5) * h;
                for j in 0..n {
                    let v = -0.5 + (j as f64 + 0.5) * h;
                    acc += bump(u, v) * bump(u + off, v);
                }
            }
            acc
        };
        let zero = overlap(0.0);
        (0..=OVERLAP_TABLE).map(|k| overlap(k as f64 / OVERLAP_TABLE as f64) / zero).collect()
    });
    if !(s < 1.0) {
        return 0.0;
    }
    let t = s * OVERLAP_TABLE as f64;
    let k = (t.floor() as usize).min(OVERLAP_TABLE - 1);
    let f = t - k as f64;
    table[k] * (1.0 - f) + table[k + 1] * f
}

/// Cosine similarities of the mean embedding `½(B(x) + B(y))` against
/// `B((x+y)/2)`, `B(x)` and `B(y)`, returned in that order.
pub fn metamer_separation<T: Scalar>(basis: &EmbeddingBasis<T>, x: [T; 2], y: [T; 2]) -> Result<(T, T, T)> {
    if x == y {
        return Err(invalid("metamer separation needs two distinct points"));
    }
    let half = T::lit(0.5);
    let bx = basis.embed_point(x);
    let by = basis.embed_point(y);
    let bm = basis.embed_point([(x[0] + y[0]) * half, (x[1] + y[1]) * half]);
    let mean: Vec<T> = bx.iter().zip(&by).map(|(&a, &b)| (a + b) * half).collect();
    let cos = |a: &[T], b: &[T]| {
        let den = (dot(a, a) * dot(b, b)).sqrt();
        if den > T::zero() {
            dot(a, b) / den
        } else {
            T::zero()
        }
    };
    Ok((cos(&mean, &bm), cos(&mean, &bx), cos(&mean, &by)))
}

/// Fraction of embedding entries with magnitude below `threshold` over a set of points.
pub fn sparsity<T: Scalar>(basis: &EmbeddingBasis<T>, coords: &[[T; 2]], threshold: T) -> T {
    let mut buf = vec![T::zero(); basis.dim()];
    let mut small = 0usize;
    for &p in coords {
        basis.embed_into(p, &mut buf);
        small += buf.iter().filter(|v| v.abs() < threshold).count();
    }
    T::from_usize_lossy(small) / T::from_usize_lossy((coords.len() * basis.dim()).max(1))
}
