//! Single-level separable 2-D orthonormal wavelet transform.
//!
//! Each channel is treated as a matrix `X` and decomposed as
//! `ll = L X Lᵀ`, `lh = L X Hᵀ`, `hl = H X Lᵀ`, `hh = H X Hᵀ`, where `L` and
//! `H` are the subsampled analysis operators built from the filter taps with
//! periodic extension. For an orthonormal pair the synthesis operators are the
//! transposes, so band-limited reconstructions are orthogonal projections.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaveletFilters {
    pub lowpass: Vec<f64>,
    pub highpass: Vec<f64>,
}

impl WaveletFilters {
    /// Orthonormal Haar pair `(1/√2, 1/√2)`, `(1/√2, −1/√2)`.
    pub fn haar() -> Self {
        Self::from_lowpass(vec![std::f64::consts::FRAC_1_SQRT_2; 2])
    }

    /// Daubechies wavelet with two vanishing moments (four taps).
    pub fn daubechies2() -> Self {
        let s3 = 3f64.sqrt();
        let d = 4.0 * 2f64.sqrt();
        Self::from_lowpass(vec![
            (1.0 + s3) / d,
            (3.0 + s3) / d,
            (3.0 - s3) / d,
            (1.0 - s3) / d,
        ])
    }

    /// Builds the quadrature-mirror highpass `h[m] = (−1)^m · l[len−1−m]`.
    pub fn from_lowpass(lowpass: Vec<f64>) -> Self {
        let n = lowpass.len();
        let highpass = (0..n)
            .map(|m| {
                let sign = if m % 2 == 0 { 1.0 } else { -1.0 };
                sign * lowpass[n - 1 - m]
            })
            .collect();
        Self { lowpass, highpass }
    }
}

impl Default for WaveletFilters {
    fn default() -> Self {
        Self::haar()
    }
}

/// The four sub-bands of one decomposition level.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyDecomposition {
    pub ll: Tensor,
    pub lh: Tensor,
    pub hl: Tensor,
    pub hh: Tensor,
    pub original_size: (usize, usize),
}

impl FrequencyDecomposition {
    pub fn energy(&self) -> f64 {
        self.ll.sum_sq() + self.lh.sum_sq() + self.hl.sum_sq() + self.hh.sum_sq()
    }

    pub fn bands(&self) -> [(&'static str, &Tensor); 4] {
        [
            ("ll", &self.ll),
            ("lh", &self.lh),
            ("hl", &self.hl),
            ("hh", &self.hh),
        ]
    }

    fn zeroed_like(&self) -> Tensor {
        let (c, h, w) = self.ll.shape();
        Tensor::zeros(c, h, w)
    }

    fn keep(&self, band: Band) -> FrequencyDecomposition {
        let pick = |b: Band, t: &Tensor| if b == band { t.clone() } else { self.zeroed_like() };
        FrequencyDecomposition {
            ll: pick(Band::Ll, &self.ll),
            lh: pick(Band::Lh, &self.lh),
            hl: pick(Band::Hl, &self.hl),
            hh: pick(Band::Hh, &self.hh),
            original_size: self.original_size,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Band {
    Ll,
    Lh,
    Hl,
    Hh,
}

/// Records how much [`pad_even`] grew each side so [`crop`] can undo it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CropRecord {
    pub pad_rows: usize,
    pub pad_cols: usize,
}

impl CropRecord {
    pub fn is_empty(&self) -> bool {
        self.pad_rows == 0 && self.pad_cols == 0
    }
}

// out[k] = Σ_m f[m] · x[(2k + m) mod n]
fn analyze_1d(x: &[f64], f: &[f64], out: &mut [f64]) {
    let n = x.len();
    for (k, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for (m, &fm) in f.iter().enumerate() {
            acc += fm * x[(2 * k + m) % n];
        }
        *o = acc;
    }
}

// Transpose of `analyze_1d`, accumulated into `x`.
fn synthesize_1d(c: &[f64], f: &[f64], x: &mut [f64]) {
    let n = x.len();
    for (k, &ck) in c.iter().enumerate() {
        for (m, &fm) in f.iter().enumerate() {
            x[(2 * k + m) % n] += fm * ck;
        }
    }
}

fn check_even(h: usize, w: usize) -> Result<()> {
    if !h.is_multiple_of(2) || !w.is_multiple_of(2) || h == 0 || w == 0 {
        return Err(Error::Shape(format!(
            "wavelet transform needs even, non-zero sides; got {h}x{w} (pad with pad_even first)"
        )));
    }
    Ok(())
}

// Filters along x (each row) then subsamples.
fn rows_pass(plane: &[f64], h: usize, w: usize, f: &[f64]) -> Vec<f64> {
    let hw = w / 2;
    let mut out = vec![0.0; h * hw];
    for y in 0..h {
        analyze_1d(&plane[y * w..(y + 1) * w], f, &mut out[y * hw..(y + 1) * hw]);
    }
    out
}

// Filters along y (each column) then subsamples.
fn cols_pass(plane: &[f64], h: usize, w: usize, f: &[f64]) -> Vec<f64> {
    let hh = h / 2;
    let mut out = vec![0.0; hh * w];
    let mut col = vec![0.0; h];
    let mut res = vec![0.0; hh];
    for x in 0..w {
        for y in 0..h {
            col[y] = plane[y * w + x];
        }
        analyze_1d(&col, f, &mut res);
        for y in 0..hh {
            out[y * w + x] = res[y];
        }
    }
    out
}

fn rows_synth(coeffs: &[f64], h: usize, w: usize, f: &[f64], out: &mut [f64]) {
    let hw = w / 2;
    for y in 0..h {
        synthesize_1d(&coeffs[y * hw..(y + 1) * hw], f, &mut out[y * w..(y + 1) * w]);
    }
}

fn cols_synth(coeffs: &[f64], h: usize, w: usize, f: &[f64], out: &mut [f64]) {
    let hh = h / 2;
    let mut col = vec![0.0; h];
    let mut c = vec![0.0; hh];
    for x in 0..w {
        for y in 0..hh {
            c[y] = coeffs[y * w + x];
        }
        col.iter_mut().for_each(|v| *v = 0.0);
        synthesize_1d(&c, f, &mut col);
        for y in 0..h {
            out[y * w + x] += col[y];
        }
    }
}

pub fn dwt2(image: &Tensor, filters: &WaveletFilters) -> Result<FrequencyDecomposition> {
    let (ch, h, w) = image.shape();
    check_even(h, w)?;
    let (bh, bw) = (h / 2, w / 2);
    let mut ll = Tensor::zeros(ch, bh, bw);
    let mut lh = Tensor::zeros(ch, bh, bw);
    let mut hl = Tensor::zeros(ch, bh, bw);
    let mut hh = Tensor::zeros(ch, bh, bw);
    for c in 0..ch {
        let plane = image.plane(c);
        let row_low = rows_pass(plane, h, w, &filters.lowpass);
        let row_high = rows_pass(plane, h, w, &filters.highpass);
        ll.plane_mut(c)
            .copy_from_slice(&cols_pass(&row_low, h, bw, &filters.lowpass));
        lh.plane_mut(c)
            .copy_from_slice(&cols_pass(&row_high, h, bw, &filters.lowpass));
        hl.plane_mut(c)
            .copy_from_slice(&cols_pass(&row_low, h, bw, &filters.highpass));
        hh.plane_mut(c)
            .copy_from_slice(&cols_pass(&row_high, h, bw, &filters.highpass));
    }
    Ok(FrequencyDecomposition {
        ll,
        lh,
        hl,
        hh,
        original_size: (h, w),
    })
}

pub fn idwt2(decomp: &FrequencyDecomposition, filters: &WaveletFilters) -> Result<Tensor> {
    let shape = decomp.ll.shape();
    for (name, band) in decomp.bands() {
        if band.shape() != shape {
            return Err(Error::Shape(format!(
                "band {name} has shape {:?}, expected {shape:?}",
                band.shape()
            )));
        }
    }
    let (ch, bh, bw) = shape;
    let (h, w) = (bh * 2, bw * 2);
    if decomp.original_size != (h, w) {
        return Err(Error::Shape(format!(
            "bands of {bh}x{bw} cannot reconstruct {:?}",
            decomp.original_size
        )));
    }
    let mut out = Tensor::zeros(ch, h, w);
    for c in 0..ch {
        let mut row_low = vec![0.0; h * bw];
        let mut row_high = vec![0.0; h * bw];
        cols_synth(decomp.ll.plane(c), h, bw, &filters.lowpass, &mut row_low);
        cols_synth(decomp.hl.plane(c), h, bw, &filters.highpass, &mut row_low);
        cols_synth(decomp.lh.plane(c), h, bw, &filters.lowpass, &mut row_high);
        cols_synth(decomp.hh.plane(c), h, bw, &filters.highpass, &mut row_high);
        let plane = out.plane_mut(c);
        rows_synth(&row_low, h, w, &filters.lowpass, plane);
        rows_synth(&row_high, h, w, &filters.highpass, plane);
    }
    Ok(out)
}

/// Grows odd sides by one by repeating the last row and/or column.
pub fn pad_even(image: &Tensor) -> (Tensor, CropRecord) {
    let (c, h, w) = image.shape();
    let record = CropRecord {
        pad_rows: h % 2,
        pad_cols: w % 2,
    };
    if record.is_empty() {
        return (image.clone(), record);
    }
    let (ph, pw) = (h + record.pad_rows, w + record.pad_cols);
    let padded = Tensor::from_fn(c, ph, pw, |ci, y, x| {
        image.get(ci, y.min(h - 1), x.min(w - 1))
    });
    (padded, record)
}

pub fn crop(array: &Tensor, record: CropRecord) -> Tensor {
    if record.is_empty() {
        return array.clone();
    }
    let (c, h, w) = array.shape();
    let (oh, ow) = (h - record.pad_rows, w - record.pad_cols);
    Tensor::from_fn(c, oh, ow, |ci, y, x| array.get(ci, y, x))
}

/// Adjoint of [`pad_even`]: folds gradients of replicated rows/columns back.
pub fn pad_even_vjp(grad_padded: &Tensor, record: CropRecord) -> Tensor {
    if record.is_empty() {
        return grad_padded.clone();
    }
    let (c, h, w) = grad_padded.shape();
    let (oh, ow) = (h - record.pad_rows, w - record.pad_cols);
    let mut out = Tensor::zeros(c, oh, ow);
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                let i = out.index(ci, y.min(oh - 1), x.min(ow - 1));
                out.data[i] += grad_padded.get(ci, y, x);
            }
        }
    }
    out
}

/// Adjoint of [`crop`]: embeds into a zero array of the padded size.
pub fn crop_vjp(grad: &Tensor, record: CropRecord) -> Tensor {
    if record.is_empty() {
        return grad.clone();
    }
    let (c, h, w) = grad.shape();
    let mut out = Tensor::zeros(c, h + record.pad_rows, w + record.pad_cols);
    for ci in 0..c {
        for y in 0..h {
            for x in 0..w {
                out.set(ci, y, x, grad.get(ci, y, x));
            }
        }
    }
    out
}

/// Reconstruction from a single band; other bands are dropped. Odd sizes are
/// padded internally and cropped back.
pub fn reconstruct_band(image: &Tensor, filters: &WaveletFilters, band: Band) -> Result<Tensor> {
    let (padded, record) = pad_even(image);
    let decomp = dwt2(&padded, filters)?;
    let full = idwt2(&decomp.keep(band), filters)?;
    Ok(crop(&full, record))
}

/// Low-frequency reconstruction `Lᵀ (L x Lᵀ) L`.
pub fn reconstruct_lfc(image: &Tensor, filters: &WaveletFilters) -> Result<Tensor> {
    reconstruct_band(image, filters, Band::Ll)
}

/// High-frequency reconstruction `Hᵀ (H x Hᵀ) H`.
pub fn reconstruct_hfc(image: &Tensor, filters: &WaveletFilters) -> Result<Tensor> {
    reconstruct_band(image, filters, Band::Hh)
}

/// Vector-Jacobian product of [`reconstruct_band`].
///
/// On even sizes the band reconstruction is `SᵀS` for an orthonormal analysis
/// operator `S`, hence self-adjoint; padding contributes its own adjoint.
pub fn reconstruct_band_vjp(
    grad_out: &Tensor,
    filters: &WaveletFilters,
    band: Band,
) -> Result<Tensor> {
    let record = CropRecord {
        pad_rows: grad_out.height % 2,
        pad_cols: grad_out.width % 2,
    };
    let g = crop_vjp(grad_out, record);
    let decomp = dwt2(&g, filters)?;
    let projected = idwt2(&decomp.keep(band), filters)?;
    Ok(pad_even_vjp(&projected, record))
}
