//! Images, dense hand-crafted descriptors and the `DKFM` feature-map format.
//!
//! The descriptor of a cell concatenates 8-bin unsigned gradient-orientation
//! histograms over a 4x4 grid of sub-blocks (128 values) with a 3-level
//! mean-intensity pyramid (1 + 4 + 16 = 21 values) over a window of
//! `4·stride` pixels, and is L2-normalized.

use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{format_err, invalid, Error, Result};
use crate::linalg::Mat;
use crate::scalar::{dot, Scalar};

/// Image with values in `[0, 1]`, channel-interleaved, 1 or 3 channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Scalar> Image<T> {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(invalid(format!("images have 1 or 3 channels, got {channels}")));
        }
        if height == 0 || width == 0 {
            return Err(invalid("image must be non-empty"));
        }
        if data.len() != height * width * channels {
            return Err(invalid(format!(
                "image {height}x{width}x{channels} needs {} values, got {}",
                height * width * channels,
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|&v| !(v >= T::zero() && v <= T::one())) {
            return Err(invalid(format!("image value at index {i} outside [0, 1]")));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> T) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                data.push(f(r, c));
            }
        }
        Self::new(height, width, 1, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize, ch: usize) -> T {
        self.data[(r * self.width + c) * self.channels + ch]
    }

    /// Single-channel luminance (channel mean for colour images).
    pub fn gray(&self) -> Vec<T> {
        if self.channels == 1 {
            return self.data.clone();
        }
        let third = T::one() / T::lit(3.0);
        self.data
            .chunks_exact(3)
            .map(|p| (p[0] + p[1] + p[2]) * third)
            .collect()
    }

    pub fn to_gray(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            channels: 1,
            data: self.gray(),
        }
    }

    /// Bilinear sample of channel `ch` at fractional pixel `(x, y)`;
    /// `None` outside the pixel-centre hull.
    pub fn sample(&self, x: T, y: T, ch: usize) -> Option<T> {
        let maxx = T::from_usize_lossy(self.width - 1);
        let maxy = T::from_usize_lossy(self.height - 1);
        let tol = T::lit(1e-9);
        if !(x >= -tol && y >= -tol && x <= maxx + tol && y <= maxy + tol) {
            return None;
        }
        let x = x.max(T::zero()).min(maxx);
        let y = y.max(T::zero()).min(maxy);
        let x0 = x.floor().to_usize()?.min(self.width - 1);
        let y0 = y.floor().to_usize()?.min(self.height - 1);
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - T::from_usize_lossy(x0);
        let fy = y - T::from_usize_lossy(y0);
        let top = self.get(y0, x0, ch) * (T::one() - fx) + self.get(y0, x1, ch) * fx;
        let bot = self.get(y1, x0, ch) * (T::one() - fx) + self.get(y1, x1, ch) * fx;
        Some(top * (T::one() - fy) + bot * fy)
    }

    /// Binary PGM (1 channel) or PPM (3 channels), 8-bit.
    pub fn write_pnm(&self, mut w: impl Write) -> Result<()> {
        let magic = if self.channels == 1 { "P5" } else { "P6" };
        let mut buf = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        buf.extend(self.data.iter().map(|&v| (v.as_f64() * 255.0).round().clamp(0.0, 255.0) as u8));
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn save_pnm(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_pnm(std::io::BufWriter::new(std::fs::File::create(path)?))
    }
}

/// Reads a binary PGM (`P5`) or PPM (`P6`) file.
pub fn load_image<T: Scalar>(path: impl AsRef<Path>) -> Result<Image<T>> {
    parse_pnm(&std::fs::read(path)?)
}

pub fn parse_pnm<T: Scalar>(bytes: &[u8]) -> Result<Image<T>> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => {
            let shown: String = bytes.iter().take(4).map(|b| format!("{b:02x}")).collect::<Vec<_>>().join(" ");
            return Err(Error::UnsupportedFormat(format!(
                "expected binary PGM (P5) or PPM (P6), detected magic bytes [{shown}]"
            )));
        }
    };
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for f in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(format_err(pos as u64, "expected a header number"));
        }
        *f = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| format_err(start as u64, "header number out of range"))?;
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(format_err(2, "zero image dimension"));
    }
    if maxval == 0 || maxval > 65535 {
        return Err(format_err(pos as u64, format!("invalid maxval {maxval}")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(format_err(pos as u64, "missing whitespace after maxval"));
    }
    pos += 1;
    let bps = if maxval < 256 { 1 } else { 2 };
    let count = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| format_err(2, "image dimensions overflow"))?;
    let need = count * bps;
    let have = bytes.len() - pos;
    if have < need {
        return Err(format_err(
            pos as u64,
            format!("truncated pixel data: expected {need} bytes, found {have}"),
        ));
    }
    let scale = T::one() / T::from_usize_lossy(maxval);
    let px = &bytes[pos..pos + need];
    let data: Vec<T> = if bps == 1 {
        px.iter().map(|&b| (T::from_usize_lossy(b as usize) * scale).min(T::one())).collect()
    } else {
        px.chunks_exact(2)
            .map(|c| (T::from_usize_lossy(u16::from_be_bytes([c[0], c[1]]) as usize) * scale).min(T::one()))
            .collect()
    };
    Image::new(height, width, channels, data)
}

/// Dense per-cell descriptors at a fixed stride.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T> {
    height_cells: usize,
    width_cells: usize,
    stride: usize,
    normalized: bool,
    values: Mat<T>,
}

impl<T: Scalar> FeatureMap<T> {
    /// `values` has one row per cell (row-major) and one column per channel.
    pub fn new(height_cells: usize, width_cells: usize, stride: usize, normalized: bool, values: Mat<T>) -> Result<Self> {
        if height_cells == 0 || width_cells == 0 || stride == 0 {
            return Err(invalid("feature map dimensions and stride must be positive"));
        }
        if values.rows() != height_cells * width_cells {
            return Err(invalid(format!(
                "feature map {height_cells}x{width_cells} needs {} rows, got {}",
                height_cells * width_cells,
                values.rows()
            )));
        }
        Ok(Self {
            height_cells,
            width_cells,
            stride,
            normalized,
            values,
        })
    }

    pub fn height_cells(&self) -> usize {
        self.height_cells
    }

    pub fn width_cells(&self) -> usize {
        self.width_cells
    }

    pub fn channels(&self) -> usize {
        self.values.cols()
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn values(&self) -> &Mat<T> {
        &self.values
    }

    #[inline]
    pub fn cell(&self, r: usize, c: usize) -> &[T] {
        self.values.row(r * self.width_cells + c)
    }

    /// Cells whose vector is all zero.
    pub fn zero_cells(&self) -> Vec<bool> {
        (0..self.values.rows())
            .map(|i| self.values.row(i).iter().all(|&v| v == T::zero()))
            .collect()
    }

    /// Rescales every non-zero cell to unit L2 norm.
    pub fn normalize(&mut self) {
        for i in 0..self.values.rows() {
            l2_normalize(self.values.row_mut(i));
        }
        self.normalized = true;
    }

    /// Bilinear sample at fractional cell coordinates, clamped to the map;
    /// returns whether clamping happened.
    pub fn sample_into(&self, col: T, row: T, out: &mut [T]) -> bool {
        let maxc = T::from_usize_lossy(self.width_cells - 1);
        let maxr = T::from_usize_lossy(self.height_cells - 1);
        let clamped = col < T::zero() || row < T::zero() || col > maxc || row > maxr;
        let x = col.max(T::zero()).min(maxc);
        let y = row.max(T::zero()).min(maxr);
        let x0 = x.floor().to_usize().unwrap_or(0).min(self.width_cells - 1);
        let y0 = y.floor().to_usize().unwrap_or(0).min(self.height_cells - 1);
        let x1 = (x0 + 1).min(self.width_cells - 1);
        let y1 = (y0 + 1).min(self.height_cells - 1);
        let fx = x - T::from_usize_lossy(x0);
        let fy = y - T::from_usize_lossy(y0);
        let w00 = (T::one() - fx) * (T::one() - fy);
        let w01 = fx * (T::one() - fy);
        let w10 = (T::one() - fx) * fy;
        let w11 = fx * fy;
        let (a, b, c, d) = (self.cell(y0, x0), self.cell(y0, x1), self.cell(y1, x0), self.cell(y1, x1));
        for (k, o) in out.iter_mut().enumerate() {
            *o = w00 * a[k] + w01 * b[k] + w10 * c[k] + w11 * d[k];
        }
        clamped
    }

    /// Writes the `DKFM` binary format.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut buf = Vec::with_capacity(FEATURE_HEADER + self.values.as_slice().len() * 4);
        buf.extend_from_slice(FEATURE_MAGIC);
        for v in [
            FEATURE_VERSION,
            self.height_cells as u32,
            self.width_cells as u32,
            self.channels() as u32,
            self.stride as u32,
        ] {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf.push(u8::from(self.normalized));
        buf.extend_from_slice(&[0, 0, 0]);
        for &v in self.values.as_slice() {
            buf.extend_from_slice(&v.to_f32().unwrap_or(f32::NAN).to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 4 || &bytes[..4] != FEATURE_MAGIC {
            return Err(format_err(0, "bad magic, expected \"DKFM\""));
        }
        if bytes.len() < FEATURE_HEADER {
            return Err(format_err(
                bytes.len() as u64,
                format!("truncated header: expected {FEATURE_HEADER} bytes, found {}", bytes.len()),
            ));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != FEATURE_VERSION {
            return Err(format_err(4, format!("unsupported version {version}")));
        }
        let (h, w, c, stride) = (u32_at(8) as u64, u32_at(12) as u64, u32_at(16) as u64, u32_at(20));
        if h == 0 || w == 0 || c == 0 {
            return Err(format_err(8, "zero dimension in header"));
        }
        if stride == 0 {
            return Err(format_err(20, "zero stride"));
        }
        let flag = bytes[24];
        if flag > 1 {
            return Err(format_err(24, format!("invalid normalization flag {flag}")));
        }
        let expected = h
            .checked_mul(w)
            .and_then(|n| n.checked_mul(c))
            .and_then(|n| n.checked_mul(4))
            .filter(|&n| usize::try_from(n).is_ok())
            .ok_or_else(|| format_err(8, format!("header dimensions {h}x{w}x{c} overflow")))?;
        let actual = (bytes.len() - FEATURE_HEADER) as u64;
        if expected != actual {
            return Err(format_err(
                FEATURE_HEADER as u64,
                format!("payload size mismatch: expected {expected} bytes, found {actual}"),
            ));
        }
        let data: Vec<T> = bytes[FEATURE_HEADER..]
            .chunks_exact(4)
            .map(|b| T::lit(f32::from_le_bytes(b.try_into().unwrap()) as f64))
            .collect();
        let values = Mat::from_vec((h * w) as usize, c as usize, data)?;
        Self::new(h as usize, w as usize, stride as usize, flag == 1, values)
    }
}

/// Reads a `DKFM` file.
pub fn load_feature_file<T: Scalar>(path: impl AsRef<Path>) -> Result<FeatureMap<T>> {
    FeatureMap::from_bytes(&std::fs::read(path)?)
}

/// Writes a `DKFM` file.
pub fn save_feature_file<T: Scalar>(fm: &FeatureMap<T>, path: impl AsRef<Path>) -> Result<()> {
    fm.write_to(std::io::BufWriter::new(std::fs::File::create(path)?))
}

const FEATURE_MAGIC: &[u8; 4] = b"DKFM";
const FEATURE_VERSION: u32 = 1;
const FEATURE_HEADER: usize = 28;

pub(crate) fn l2_normalize<T: Scalar>(v: &mut [T]) {
    let n = dot(v, v).sqrt();
    if n > T::zero() {
        for x in v {
            *x /= n;
        }
    }
}

/// Descriptor layout parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DescriptorParams {
    pub orientation_bins: usize,
    /// Sub-blocks per window side; each sub-block is `stride` pixels wide.
    pub blocks_per_side: usize,
    pub pyramid_levels: usize,
    /// Per-bin cap on the normalized histogram before renormalization.
    pub histogram_clip: f64,
    /// Weight of the intensity pyramid relative to the gradient histogram.
    pub pyramid_weight: f64,
}

impl Default for DescriptorParams {
    fn default() -> Self {
        Self {
            orientation_bins: 8,
            blocks_per_side: 4,
            pyramid_levels: 3,
            histogram_clip: 0.2,
            pyramid_weight: 0.5,
        }
    }
}

impl DescriptorParams {
    pub fn histogram_len(&self) -> usize {
        self.orientation_bins * self.blocks_per_side * self.blocks_per_side
    }

    pub fn pyramid_len(&self) -> usize {
        (0..self.pyramid_levels).map(|l| 1usize << (2 * l)).sum()
    }

    pub fn len(&self) -> usize {
        self.histogram_len() + self.pyramid_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-pixel soft orientation vote: two bins and their weights.
#[derive(Clone, Copy)]
struct Vote<T> {
    b0: usize,
    w0: T,
    b1: usize,
    w1: T,
}

fn orientation_votes<T: Scalar>(gray: &[T], h: usize, w: usize, bins: usize) -> Vec<Vote<T>> {
    let half = T::lit(0.5);
    let pi = T::PI();
    let bin_width = pi / T::from_usize_lossy(bins);
    (0..h * w)
        .into_par_iter()
        .map(|i| {
            let (r, c) = (i / w, i % w);
            let at = |rr: usize, cc: usize| gray[rr * w + cc];
            let gx = (at(r, (c + 1).min(w - 1)) - at(r, c.saturating_sub(1))) * half;
            let gy = (at((r + 1).min(h - 1), c) - at(r.saturating_sub(1), c)) * half;
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == T::zero() {
                return Vote { b0: 0, w0: T::zero(), b1: 0, w1: T::zero() };
            }
            let mut theta = gy.atan2(gx);
            if theta < T::zero() {
                theta += pi;
            }
            if theta >= pi {
                theta -= pi;
            }
            // bin centres at (k + 0.5) * bin_width, votes interpolated circularly
            let u = theta / bin_width - half;
            let fl = u.floor();
            let frac = u - fl;
            let k = fl.to_i64().unwrap_or(0).rem_euclid(bins as i64) as usize;
            Vote {
                b0: k,
                w0: mag * (T::one() - frac),
                b1: (k + 1) % bins,
                w1: mag * frac,
            }
        })
        .collect()
}

/// Dense descriptors on the `(H/stride) x (W/stride)` cell grid.
pub fn extract_dense_descriptors<T: Scalar>(img: &Image<T>, stride: usize, params: &DescriptorParams) -> Result<FeatureMap<T>> {
    if stride == 0 {
        return Err(invalid("stride must be positive"));
    }
    let (h, w) = (img.height(), img.width());
    if h < 2 * stride || w < 2 * stride {
        return Err(invalid(format!(
            "image {h}x{w} too small for stride {stride} (needs at least {}x{})",
            2 * stride,
            2 * stride
        )));
    }
    if params.orientation_bins == 0 || params.blocks_per_side == 0 {
        return Err(invalid("descriptor needs at least one bin and one block"));
    }
    let gray = img.gray();
    let votes = orientation_votes(&gray, h, w, params.orientation_bins);
    let (hc, wc) = (h / stride, w / stride);
    let nb = params.blocks_per_side;
    let win = nb * stride;
    let hist_len = params.histogram_len();
    let dim = params.len();
    let clip = T::lit(params.histogram_clip);
    let pyr_w = T::lit(params.pyramid_weight);

    let centre = |cell: usize, cells: usize, pixels: usize| -> isize {
        let x: T = crate::geometry::from_cell(T::from_usize_lossy(cell), cells);
        let px = (x + T::one()) * T::lit(0.5) * T::from_usize_lossy(pixels) - T::lit(0.5);
        (px + T::lit(0.5)).floor().to_isize().unwrap_or(0)
    };

    let rows: Vec<Vec<T>> = (0..hc * wc)
        .into_par_iter()
        .map(|cell| {
            let (cr, cc) = (cell / wc, cell % wc);
            let r0 = centre(cr, hc, h) - (win / 2) as isize;
            let c0 = centre(cc, wc, w) - (win / 2) as isize;
            let mut desc = vec![T::zero(); dim];
            // gradient histograms; pixels outside the image contribute nothing
            for by in 0..nb {
                for bx in 0..nb {
                    let base = (by * nb + bx) * params.orientation_bins;
                    for dy in 0..stride {
                        let r = r0 + (by * stride + dy) as isize;
                        if r < 0 || r >= h as isize {
                            continue;
                        }
                        for dx in 0..stride {
                            let c = c0 + (bx * stride + dx) as isize;
                            if c < 0 || c >= w as isize {
                                continue;
                            }
                            let v = votes[r as usize * w + c as usize];
                            desc[base + v.b0] += v.w0;
                            desc[base + v.b1] += v.w1;
                        }
                    }
                }
            }
            // intensity pyramid over the same window, edge-replicated
            let pix = |r: isize, c: isize| gray[r.clamp(0, h as isize - 1) as usize * w + c.clamp(0, w as isize - 1) as usize];
            let mut off = hist_len;
            let mut window_mean = T::zero();
            for level in 0..params.pyramid_levels {
                let parts = 1usize << level;
                let side = win / parts;
                for py in 0..parts {
                    for px in 0..parts {
                        let mut s = T::zero();
                        for dy in 0..side.max(1) {
                            for dx in 0..side.max(1) {
                                s += pix(r0 + (py * side + dy) as isize, c0 + (px * side + dx) as isize);
                            }
                        }
                        let m = s / T::from_usize_lossy(side.max(1) * side.max(1));
                        if level == 0 {
                            window_mean = m;
                        }
                        desc[off] = m - window_mean;
                        off += 1;
                    }
                }
            }
            let (hist, pyr) = desc.split_at_mut(hist_len);
            l2_normalize(hist);
            let mut clipped = false;
            for v in hist.iter_mut() {
                if *v > clip {
                    *v = clip;
                    clipped = true;
                }
            }
            if clipped {
                l2_normalize(hist);
            }
            l2_normalize(pyr);
            for v in pyr.iter_mut() {
                *v *= pyr_w;
            }
            l2_normalize(&mut desc);
            desc
        })
        .collect();
    let mut values = Mat::zeros(hc * wc, dim);
    for (i, r) in rows.into_iter().enumerate() {
        values.row_mut(i).copy_from_slice(&r);
    }
    FeatureMap::new(hc, wc, stride, true, values)
}
