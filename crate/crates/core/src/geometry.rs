//! Normalized image coordinates, dense warps, planar homographies and
//! relative camera poses.
//!
//! Images live on `[-1, 1] x [-1, 1]`. Pixel `(r, c)` of an `h x w` grid sits
//! at `(2 (c + 0.5) / w - 1, 2 (r + 0.5) / h - 1)`, so pixel centres are
//! strictly interior and a 1x1 grid is the origin.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{format_err, invalid, Error, Result};
use crate::scalar::Scalar;

/// Fractional column index of a normalized x coordinate on a grid of `width` cells.
#[inline]
pub fn to_cell<T: Scalar>(x: T, width: usize) -> T {
    (x + T::one()) * T::lit(0.5) * T::from_usize_lossy(width) - T::lit(0.5)
}

/// Normalized coordinate of a (possibly fractional) cell index.
#[inline]
pub fn from_cell<T: Scalar>(c: T, width: usize) -> T {
    T::lit(2.0) * (c + T::lit(0.5)) / T::from_usize_lossy(width) - T::one()
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedGrid<T> {
    height: usize,
    width: usize,
    coords: Vec<[T; 2]>,
}

/// Builds the pixel-centre grid for an `height x width` image.
pub fn make_grid<T: Scalar>(height: usize, width: usize) -> Result<NormalizedGrid<T>> {
    NormalizedGrid::new(height, width)
}

impl<T: Scalar> NormalizedGrid<T> {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid(format!("grid dimensions must be positive, got {height}x{width}")));
        }
        let xs: Vec<T> = (0..width).map(|c| from_cell(T::from_usize_lossy(c), width)).collect();
        let ys: Vec<T> = (0..height).map(|r| from_cell(T::from_usize_lossy(r), height)).collect();
        let mut coords = Vec::with_capacity(height * width);
        for &y in &ys {
            for &x in &xs {
                coords.push([x, y]);
            }
        }
        Ok(Self { height, width, coords })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    pub fn coords(&self) -> &[[T; 2]] {
        &self.coords
    }

    #[inline]
    pub fn coord(&self, r: usize, c: usize) -> [T; 2] {
        self.coords[r * self.width + c]
    }

    /// Cell size in normalized units, `[dx, dy]`.
    pub fn spacing(&self) -> [T; 2] {
        [
            T::lit(2.0) / T::from_usize_lossy(self.width),
            T::lit(2.0) / T::from_usize_lossy(self.height),
        ]
    }

    /// Nearest pixel `(row, col)` of a normalized coordinate, if inside the grid.
    pub fn pixel_of(&self, p: [T; 2]) -> Option<(usize, usize)> {
        let c = to_cell(p[0], self.width).round();
        let r = to_cell(p[1], self.height).round();
        let (c, r) = (c.to_i64()?, r.to_i64()?);
        if c < 0 || r < 0 || c as usize >= self.width || r as usize >= self.height {
            return None;
        }
        Some((r as usize, c as usize))
    }
}

/// Dense query-to-support warp with per-pixel confidence.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpField<T> {
    height: usize,
    width: usize,
    pub flow: Vec<[T; 2]>,
    pub confidence: Vec<T>,
}

impl<T: Scalar> WarpField<T> {
    pub fn new(height: usize, width: usize, flow: Vec<[T; 2]>, confidence: Vec<T>) -> Result<Self> {
        let n = height * width;
        if height == 0 || width == 0 {
            return Err(invalid("warp field must be non-empty"));
        }
        if flow.len() != n || confidence.len() != n {
            return Err(invalid(format!(
                "warp field {height}x{width} needs {n} entries, got flow {} and confidence {}",
                flow.len(),
                confidence.len()
            )));
        }
        if confidence.iter().any(|&c| !(c >= T::zero() && c <= T::one())) {
            return Err(invalid("warp confidence must lie in [0, 1]"));
        }
        Ok(Self { height, width, flow, confidence })
    }

    /// Identity warp over `grid` with full confidence.
    pub fn identity(grid: &NormalizedGrid<T>) -> Self {
        Self {
            height: grid.height(),
            width: grid.width(),
            flow: grid.coords().to_vec(),
            confidence: vec![T::one(); grid.len()],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.flow.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flow.is_empty()
    }

    pub fn grid(&self) -> NormalizedGrid<T> {
        NormalizedGrid::new(self.height, self.width).expect("non-empty warp")
    }

    /// Bilinear lookup of flow and confidence at a normalized position of
    /// this warp's own grid. Positions outside are clamped to the border.
    pub fn sample(&self, p: [T; 2]) -> ([T; 2], T) {
        let cx = clamp(to_cell(p[0], self.width), T::zero(), T::from_usize_lossy(self.width - 1));
        let cy = clamp(to_cell(p[1], self.height), T::zero(), T::from_usize_lossy(self.height - 1));
        let x0 = cx.floor().to_usize().unwrap_or(0).min(self.width - 1);
        let y0 = cy.floor().to_usize().unwrap_or(0).min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = cx - T::from_usize_lossy(x0);
        let fy = cy - T::from_usize_lossy(y0);
        let idx = |r: usize, c: usize| r * self.width + c;
        let w = [
            (idx(y0, x0), (T::one() - fx) * (T::one() - fy)),
            (idx(y0, x1), fx * (T::one() - fy)),
            (idx(y1, x0), (T::one() - fx) * fy),
            (idx(y1, x1), fx * fy),
        ];
        let mut f = [T::zero(); 2];
        let mut c = T::zero();
        for (i, wi) in w {
            f[0] += wi * self.flow[i][0];
            f[1] += wi * self.flow[i][1];
            c += wi * self.confidence[i];
        }
        (f, c)
    }

    /// Bilinear resampling onto an `height x width` grid covering the same image.
    pub fn resample(&self, height: usize, width: usize) -> Result<Self> {
        let grid = NormalizedGrid::new(height, width)?;
        let (flow, confidence) = grid.coords().iter().map(|&p| self.sample(p)).unzip();
        Ok(Self { height, width, flow, confidence })
    }

    /// Writes the `DKWF` binary format.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + self.len() * 12);
        buf.extend_from_slice(WARP_MAGIC);
        buf.extend_from_slice(&WARP_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.height as u32).to_le_bytes());
        buf.extend_from_slice(&(self.width as u32).to_le_bytes());
        for (f, c) in self.flow.iter().zip(&self.confidence) {
            for v in [f[0], f[1], *c] {
                buf.extend_from_slice(&(v.to_f32().unwrap_or(f32::NAN)).to_le_bytes());
            }
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_to(std::io::BufWriter::new(f))
    }

    /// Parses the `DKWF` binary format.
    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != WARP_MAGIC {
            return Err(format_err(0, "bad magic, expected \"DKWF\""));
        }
        if bytes.len() < 16 {
            return Err(format_err(bytes.len() as u64, "truncated header"));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != WARP_VERSION {
            return Err(format_err(4, format!("unsupported version {version}")));
        }
        let (h, w) = (u32_at(8) as usize, u32_at(12) as usize);
        if h == 0 || w == 0 {
            return Err(format_err(8, "zero dimension"));
        }
        let expected = (h as u64) * (w as u64) * 12;
        let actual = (bytes.len() - 16) as u64;
        if expected != actual {
            return Err(format_err(
                16,
                format!("payload size mismatch: expected {expected} bytes, found {actual}"),
            ));
        }
        let mut flow = Vec::with_capacity(h * w);
        let mut conf = Vec::with_capacity(h * w);
        for (i, px) in bytes[16..].chunks_exact(12).enumerate() {
            let f = |k: usize| f32::from_le_bytes(px[4 * k..4 * k + 4].try_into().unwrap());
            let c = f(2);
            if !(0.0..=1.0).contains(&c) {
                return Err(format_err(
                    16 + 12 * i as u64 + 8,
                    format!("confidence {c} outside [0, 1]"),
                ));
            }
            flow.push([T::lit(f(0) as f64), T::lit(f(1) as f64)]);
            conf.push(T::lit(c as f64));
        }
        Self::new(h, w, flow, conf)
    }
}

const WARP_MAGIC: &[u8; 4] = b"DKWF";
const WARP_VERSION: u32 = 1;

#[inline]
pub(crate) fn clamp<T: Scalar>(v: T, lo: T, hi: T) -> T {
    v.max(lo).min(hi)
}

/// Clamps every flow vector to `[-1, 1]^2`; confidence is left unchanged.
pub fn clip_to_grid<T: Scalar>(w: &WarpField<T>) -> WarpField<T> {
    let one = T::one();
    let mut out = w.clone();
    for f in &mut out.flow {
        f[0] = clamp(f[0], -one, one);
        f[1] = clamp(f[1], -one, one);
    }
    out
}

/// Planar projective transform in normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography<T> {
    m: [[T; 3]; 3],
}

const DEGENERATE_W: f64 = 1e-12;

impl<T: Scalar> Homography<T> {
    /// Scale-normalizes so that `m[2][2] = 1` when it is nonzero; rejects
    /// singular matrices.
    pub fn new(m: [[T; 3]; 3]) -> Result<Self> {
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(invalid("homography has non-finite entries"));
        }
        let mut m = m;
        let s = m[2][2];
        if s.abs() > T::lit(DEGENERATE_W) {
            for row in &mut m {
                for v in row.iter_mut() {
                    *v /= s;
                }
            }
        }
        let h = Self { m };
        if !(h.det().abs() > T::lit(1e-12)) {
            return Err(invalid("homography is not invertible"));
        }
        Ok(h)
    }

    pub fn identity() -> Self {
        let (o, z) = (T::one(), T::zero());
        Self { m: [[o, z, z], [z, o, z], [z, z, o]] }
    }

    pub fn translation(tx: T, ty: T) -> Self {
        let (o, z) = (T::one(), T::zero());
        Self { m: [[o, z, tx], [z, o, ty], [z, z, o]] }
    }

    /// Similarity about the image centre followed by a perspective term:
    /// `T(t) · R(angle) · S(scale)` then `[1 0 0; 0 1 0; px py 1]` applied first.
    pub fn from_params(angle: T, scale: T, tx: T, ty: T, px: T, py: T) -> Result<Self> {
        let (c, s) = (angle.cos() * scale, angle.sin() * scale);
        let (o, z) = (T::one(), T::zero());
        let sim = [[c, -s, tx], [s, c, ty], [z, z, o]];
        let persp = [[o, z, z], [z, o, z], [px, py, o]];
        Self::new(mat3_mul(&sim, &persp))
    }

    pub fn matrix(&self) -> &[[T; 3]; 3] {
        &self.m
    }

    pub fn det(&self) -> T {
        det3(&self.m)
    }

    pub fn inverse(&self) -> Result<Self> {
        let m = &self.m;
        let d = self.det();
        if !(d.abs() > T::lit(1e-12)) {
            return Err(invalid("homography is not invertible"));
        }
        let cof = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
        let adj = [
            [cof(1, 2, 1, 2), -cof(0, 2, 1, 2), cof(0, 1, 1, 2)],
            [-cof(1, 2, 0, 2), cof(0, 2, 0, 2), -cof(0, 1, 0, 2)],
            [cof(1, 2, 0, 1), -cof(0, 2, 0, 1), cof(0, 1, 0, 1)],
        ];
        let mut inv = adj;
        for row in &mut inv {
            for v in row.iter_mut() {
                *v /= d;
            }
        }
        Self::new(inv)
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &Self) -> Result<Self> {
        Self::new(mat3_mul(&self.m, &other.m))
    }

    /// Projects one point; `None` when the homogeneous coordinate vanishes.
    #[inline]
    pub fn apply(&self, p: [T; 2]) -> Option<[T; 2]> {
        let m = &self.m;
        let x = m[0][0] * p[0] + m[0][1] * p[1] + m[0][2];
        let y = m[1][0] * p[0] + m[1][1] * p[1] + m[1][2];
        let w = m[2][0] * p[0] + m[2][1] * p[1] + m[2][2];
        if !(w.abs() >= T::lit(DEGENERATE_W)) {
            return None;
        }
        Some([x / w, y / w])
    }
}

/// Projects a coordinate set. Points whose homogeneous coordinate is below
/// `1e-12` in magnitude come back as NaN with their mask bit cleared.
pub fn apply_homography<T: Scalar>(h: &Homography<T>, coords: &[[T; 2]]) -> (Vec<[T; 2]>, Vec<bool>) {
    coords
        .iter()
        .map(|&p| match h.apply(p) {
            Some(q) => (q, true),
            None => ([T::nan(); 2], false),
        })
        .unzip()
}

/// Reference warp of a homography over a grid: confidence is 1 where the
/// image falls inside `[-1, 1]^2` and 0 elsewhere (including degenerate points).
pub fn homography_to_warp<T: Scalar>(h: &Homography<T>, grid: &NormalizedGrid<T>) -> WarpField<T> {
    let (pts, valid) = apply_homography(h, grid.coords());
    let one = T::one();
    let mut flow = Vec::with_capacity(pts.len());
    let mut conf = Vec::with_capacity(pts.len());
    for (p, ok) in pts.into_iter().zip(valid) {
        if ok {
            let inside = p[0].abs() <= one && p[1].abs() <= one;
            flow.push(p);
            conf.push(if inside { one } else { T::zero() });
        } else {
            flow.push([T::zero(); 2]);
            conf.push(T::zero());
        }
    }
    WarpField {
        height: grid.height(),
        width: grid.width(),
        flow,
        confidence: conf,
    }
}

pub fn mat3_mul<T: Scalar>(a: &[[T; 3]; 3], b: &[[T; 3]; 3]) -> [[T; 3]; 3] {
    let mut out = [[T::zero(); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                out[i][j] += a[i][k] * b[k][j];
            }
        }
    }
    out
}

pub fn det3<T: Scalar>(m: &[[T; 3]; 3]) -> T {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1]) - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Relative camera pose.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose<T> {
    rotation: [[T; 3]; 3],
    translation: [T; 3],
}

impl<T: Scalar> CameraPose<T> {
    pub fn new(rotation: [[T; 3]; 3], translation: [T; 3]) -> Result<Self> {
        check_rotation(&rotation, T::lit(1e-9))?;
        if translation.iter().all(|&v| v == T::zero()) {
            return Err(invalid("pose translation must be nonzero"));
        }
        Ok(Self { rotation, translation })
    }

    pub fn rotation(&self) -> &[[T; 3]; 3] {
        &self.rotation
    }

    pub fn translation(&self) -> &[T; 3] {
        &self.translation
    }
}

/// Checks `RᵀR = I` and `det R = +1` within `tol`.
pub fn check_rotation<T: Scalar>(r: &[[T; 3]; 3], tol: T) -> Result<()> {
    for i in 0..3 {
        for j in 0..3 {
            let mut s = T::zero();
            for k in 0..3 {
                s += r[k][i] * r[k][j];
            }
            let target = if i == j { T::one() } else { T::zero() };
            if !((s - target).abs() <= tol) {
                return Err(invalid("rotation is not orthonormal"));
            }
        }
    }
    if !((det3(r) - T::one()).abs() <= tol) {
        return Err(invalid("rotation determinant is not +1"));
    }
    Ok(())
}

/// Rodrigues rotation about a (not necessarily unit) axis.
pub fn rotation_from_axis_angle<T: Scalar>(axis: [T; 3], angle: T) -> Result<[[T; 3]; 3]> {
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    if !(n > T::zero()) {
        return Err(Error::InvalidArgument("rotation axis must be nonzero".into()));
    }
    let [x, y, z] = [axis[0] / n, axis[1] / n, axis[2] / n];
    let (s, c) = angle.sin_cos();
    let t = T::one() - c;
    Ok([
        [t * x * x + c, t * x * y - s * z, t * x * z + s * y],
        [t * x * y + s * z, t * y * y + c, t * y * z - s * x],
        [t * x * z - s * y, t * y * z + s * x, t * z * z + c],
    ])
}

pub fn mat3_transpose<T: Scalar>(m: &[[T; 3]; 3]) -> [[T; 3]; 3] {
    let mut out = *m;
    for i in 0..3 {
        for j in 0..3 {
            out[i][j] = m[j][i];
        }
    }
    out
}
