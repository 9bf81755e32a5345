//! Masked-Fourier SENSE forward model and the desk-scale nonuniform DFT.
//!
//! Both operators act on interleaved complex vectors and use the unitary
//! DFT convention with the frequency origin at grid index (0, 0), so the
//! adjoint of a fully sampled transform is its inverse.

use super::{LinearOperator, OperatorKind};
use crate::error::{Error, Result};
use crate::grid::{ImageGrid, MeasurementVector, ScalarKind, SubproblemPartition};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::f64::consts::TAU;
use std::sync::Arc;

/// Default cap on `width * height` for the direct nonuniform DFT.
pub const NUDFT_PIXEL_CAP: usize = 96 * 96;

/// Coil sensitivities plus per-time-bin frequency masks.
#[derive(Clone)]
pub struct SenseSetup {
    coil_maps: Vec<ImageGrid>,
    /// Per bin: sorted flat frequency indices into the `height x width` grid.
    masks: Vec<Vec<usize>>,
    width: usize,
    height: usize,
}

impl SenseSetup {
    pub fn new(coil_maps: Vec<ImageGrid>, masks: Vec<Vec<usize>>) -> Result<Self> {
        let first = coil_maps
            .first()
            .ok_or_else(|| Error::invalid("at least one coil map required"))?;
        let (width, height) = (first.width, first.height);
        for (c, m) in coil_maps.iter().enumerate() {
            if m.kind != ScalarKind::Complex {
                return Err(Error::invalid(format!("coil map {c} must be complex")));
            }
            if m.width != width || m.height != height {
                return Err(Error::invalid(format!(
                    "coil map {c} shape differs from coil map 0"
                )));
            }
        }
        if masks.is_empty() {
            return Err(Error::invalid("at least one sampling mask required"));
        }
        for (b, mask) in masks.iter().enumerate() {
            if mask.is_empty() {
                return Err(Error::invalid(format!("sampling mask {b} is empty")));
            }
            if mask.iter().any(|&i| i >= width * height) {
                return Err(Error::invalid(format!(
                    "sampling mask {b} indexes outside the frequency grid"
                )));
            }
        }
        Ok(SenseSetup {
            coil_maps,
            masks,
            width,
            height,
        })
    }

    pub fn n_coils(&self) -> usize {
        self.coil_maps.len()
    }

    pub fn n_bins(&self) -> usize {
        self.masks.len()
    }

    pub fn mask(&self, bin: usize) -> &[usize] {
        &self.masks[bin]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    /// Flat real length of one bin's measurement block.
    pub fn bin_len(&self, bin: usize) -> usize {
        2 * self.n_coils() * self.masks[bin].len()
    }

    /// Partition of the stacked all-bin measurement by time bin.
    pub fn bin_partition(&self) -> SubproblemPartition {
        let lens: Vec<usize> = (0..self.n_bins()).map(|b| self.bin_len(b)).collect();
        SubproblemPartition::from_lengths(&lens).expect("bins are non-empty")
    }
}

struct Fft2 {
    row: Arc<dyn Fft<f64>>,
    col: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
    width: usize,
    height: usize,
}

impl Fft2 {
    fn new(width: usize, height: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fft2 {
            row: planner.plan_fft_forward(width),
            col: planner.plan_fft_forward(height),
            row_inv: planner.plan_fft_inverse(width),
            col_inv: planner.plan_fft_inverse(height),
            width,
            height,
        }
    }

    /// In-place unitary 2-D DFT (forward or inverse).
    fn transform(&self, data: &mut [Complex64], inverse: bool) {
        let (w, h) = (self.width, self.height);
        let (rf, cf) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row, &self.col)
        };
        for r in 0..h {
            rf.process(&mut data[r * w..(r + 1) * w]);
        }
        let mut col = vec![Complex64::default(); h];
        for c in 0..w {
            for r in 0..h {
                col[r] = data[r * w + c];
            }
            cf.process(&mut col);
            for r in 0..h {
                data[r * w + c] = col[r];
            }
        }
        let scale = 1.0 / ((w * h) as f64).sqrt();
        for v in data {
            *v *= scale;
        }
    }
}

fn to_complex(flat: &[f64]) -> Vec<Complex64> {
    flat.chunks_exact(2)
        .map(|p| Complex64::new(p[0], p[1]))
        .collect()
}

/// Forward SENSE model for one time bin: coil-wise pointwise multiply,
/// unitary FFT, restriction to the bin's sampled frequencies.
pub struct SenseBinOperator {
    setup: Arc<SenseSetup>,
    bin: usize,
    fft: Fft2,
}

impl SenseBinOperator {
    pub fn new(setup: Arc<SenseSetup>, bin: usize) -> Result<Self> {
        if bin >= setup.n_bins() {
            return Err(Error::invalid(format!(
                "bin {bin} out of range (n_bins = {})",
                setup.n_bins()
            )));
        }
        let (w, h) = setup.shape();
        Ok(SenseBinOperator {
            setup,
            bin,
            fft: Fft2::new(w, h),
        })
    }
}

impl LinearOperator for SenseBinOperator {
    fn domain_len(&self) -> usize {
        let (w, h) = self.setup.shape();
        2 * w * h
    }

    fn range_len(&self) -> usize {
        self.setup.bin_len(self.bin)
    }

    fn kind(&self) -> OperatorKind {
        OperatorKind::MaskedFourierSense
    }

    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        let (w, h) = self.setup.shape();
        let img = to_complex(x);
        let mask = self.setup.mask(self.bin);
        let per_coil = mask.len();
        let mut buf = vec![Complex64::default(); w * h];
        for (c, map) in self.setup.coil_maps.iter().enumerate() {
            for (i, (z, m)) in img.iter().zip(map.data.chunks_exact(2)).enumerate() {
                buf[i] = z * Complex64::new(m[0], m[1]);
            }
            self.fft.transform(&mut buf, false);
            for (j, &idx) in mask.iter().enumerate() {
                let o = 2 * (c * per_coil + j);
                out[o] = buf[idx].re;
                out[o + 1] = buf[idx].im;
            }
        }
    }

    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        let (w, h) = self.setup.shape();
        let mask = self.setup.mask(self.bin);
        let per_coil = mask.len();
        out.fill(0.0);
        let mut buf = vec![Complex64::default(); w * h];
        for (c, map) in self.setup.coil_maps.iter().enumerate() {
            buf.fill(Complex64::default());
            for (j, &idx) in mask.iter().enumerate() {
                let o = 2 * (c * per_coil + j);
                buf[idx] = Complex64::new(y[o], y[o + 1]);
            }
            self.fft.transform(&mut buf, true);
            for (i, m) in map.data.chunks_exact(2).enumerate() {
                let v = buf[i] * Complex64::new(m[0], -m[1]);
                out[2 * i] += v.re;
                out[2 * i + 1] += v.im;
            }
        }
    }
}

/// Applies the bin's SENSE forward model to a complex image.
pub fn sense_apply(image: &ImageGrid, setup: &Arc<SenseSetup>, bin: usize) -> Result<MeasurementVector> {
    if image.kind != ScalarKind::Complex {
        return Err(Error::invalid("sense model expects a complex image"));
    }
    let (w, h) = setup.shape();
    if (image.width, image.height) != (w, h) {
        return Err(Error::ShapeMismatch {
            expected: w * h,
            got: image.pixel_count(),
            context: "image vs coil map shape",
        });
    }
    let op = SenseBinOperator::new(setup.clone(), bin)?;
    let mut out = vec![0.0; op.range_len()];
    op.apply_into(&image.data, &mut out);
    Ok(MeasurementVector::single_block(out))
}

/// Adjoint of [`sense_apply`], back to a complex image.
pub fn sense_adjoint(
    data: &MeasurementVector,
    setup: &Arc<SenseSetup>,
    bin: usize,
) -> Result<ImageGrid> {
    let op = SenseBinOperator::new(setup.clone(), bin)?;
    if data.len() != op.range_len() {
        return Err(Error::ShapeMismatch {
            expected: op.range_len(),
            got: data.len(),
            context: "sense adjoint data length",
        });
    }
    let mut out = vec![0.0; op.domain_len()];
    op.adjoint_into(&data.values, &mut out);
    let (w, h) = setup.shape();
    ImageGrid::complex(w, h, out)
}

/// Direct nonuniform DFT at arbitrary frequency coordinates.
///
/// Frequencies are in index units: an integer pair `(kx, ky)` matches the
/// uniform-grid coefficient at flat index `ky * width + kx`. The direct sum
/// costs `O(points * pixels)`, so construction refuses grids beyond the cap.
pub struct NudftOperator {
    points: Vec<(f64, f64)>,
    width: usize,
    height: usize,
}

impl NudftOperator {
    pub fn new(points: Vec<(f64, f64)>, width: usize, height: usize, cap: usize) -> Result<Self> {
        if width * height > cap {
            return Err(Error::CapExceeded {
                needed: (width * height) as u128,
                cap: cap as u128,
                hint: "the direct nonuniform DFT is desk-scale only; shrink the grid or raise the cap"
                    .into(),
            });
        }
        if points.is_empty() {
            return Err(Error::invalid("nonuniform DFT needs at least one sample point"));
        }
        Ok(NudftOperator {
            points,
            width,
            height,
        })
    }

    fn phase(&self, pt: (f64, f64), col: usize, row: usize) -> Complex64 {
        let arg = -TAU * (pt.0 * col as f64 / self.width as f64 + pt.1 * row as f64 / self.height as f64);
        Complex64::new(arg.cos(), arg.sin())
    }
}

impl LinearOperator for NudftOperator {
    fn domain_len(&self) -> usize {
        2 * self.width * self.height
    }

    fn range_len(&self) -> usize {
        2 * self.points.len()
    }

    fn kind(&self) -> OperatorKind {
        OperatorKind::NonuniformDft
    }

    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        let scale = 1.0 / ((self.width * self.height) as f64).sqrt();
        for (p, pt) in self.points.iter().enumerate() {
            let mut acc = Complex64::default();
            let mut i = 0;
            for row in 0..self.height {
                for col in 0..self.width {
                    let z = Complex64::new(x[2 * i], x[2 * i + 1]);
                    acc += z * self.phase(*pt, col, row);
                    i += 1;
                }
            }
            out[2 * p] = acc.re * scale;
            out[2 * p + 1] = acc.im * scale;
        }
    }

    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        let scale = 1.0 / ((self.width * self.height) as f64).sqrt();
        out.fill(0.0);
        for (p, pt) in self.points.iter().enumerate() {
            let z = Complex64::new(y[2 * p], y[2 * p + 1]) * scale;
            let mut i = 0;
            for row in 0..self.height {
                for col in 0..self.width {
                    let v = z * self.phase(*pt, col, row).conj();
                    out[2 * i] += v.re;
                    out[2 * i + 1] += v.im;
                    i += 1;
                }
            }
        }
    }
}

/// Evaluates the Fourier sum of a complex image at the given sample points.
pub fn nudft_apply(image: &ImageGrid, points: &[(f64, f64)]) -> Result<MeasurementVector> {
    if image.kind != ScalarKind::Complex {
        return Err(Error::invalid("nonuniform DFT expects a complex image"));
    }
    let op = NudftOperator::new(points.to_vec(), image.width, image.height, NUDFT_PIXEL_CAP)?;
    let mut out = vec![0.0; op.range_len()];
    op.apply_into(&image.data, &mut out);
    Ok(MeasurementVector::single_block(out))
}
