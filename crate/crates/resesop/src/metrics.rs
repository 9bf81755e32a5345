//! Image-quality metrics: MSE, PSNR, and Gaussian-windowed SSIM.
//!
//! Complex images are compared through their per-pixel magnitudes.

use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use serde::Serialize;

pub const SSIM_DEFAULT_WINDOW: usize = 11;
pub const SSIM_DEFAULT_K1: f64 = 0.01;
pub const SSIM_DEFAULT_K2: f64 = 0.03;
const SSIM_SIGMA: f64 = 1.5;

#[derive(Debug, Clone, Serialize)]
pub struct MetricsRecord {
    pub ssim: f64,
    /// Peak signal-to-noise ratio in dB; infinite for identical images.
    pub psnr: f64,
    pub mse: f64,
    pub data_range: f64,
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
}

fn check_shapes(a: &ImageGrid, b: &ImageGrid) -> Result<()> {
    if a.width != b.width || a.height != b.height {
        return Err(Error::ShapeMismatch {
            expected: a.pixel_count(),
            got: b.pixel_count(),
            context: "metric image shapes",
        });
    }
    Ok(())
}

/// Mean of squared magnitude differences.
pub fn mse(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    check_shapes(a, b)?;
    let ma = a.magnitude();
    let mb = b.magnitude();
    let sum: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(sum / ma.len() as f64)
}

/// Intensity span `max - min` of the reference magnitudes.
pub fn data_range_of(reference: &ImageGrid) -> f64 {
    let m = reference.magnitude();
    let (lo, hi) = m
        .iter()
        .fold((f64::MAX, f64::MIN), |(lo, hi), v| (lo.min(*v), hi.max(*v)));
    hi - lo
}

/// `10 log10(data_range^2 / mse)`; the range defaults to the span of `a`.
pub fn psnr(a: &ImageGrid, b: &ImageGrid, data_range: Option<f64>) -> Result<f64> {
    let err = mse(a, b)?;
    let range = data_range.unwrap_or_else(|| data_range_of(a));
    if err == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (range * range / err).log10())
}

fn gaussian_kernel(window: usize) -> Vec<f64> {
    let half = (window as isize - 1) / 2;
    let raw: Vec<f64> = (-half..=half)
        .map(|i| (-0.5 * (i as f64 / SSIM_SIGMA).powi(2)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.iter().map(|v| v / sum).collect()
}

/// Separable Gaussian filtering, evaluated where the window fully fits.
/// Returns a `(h - window + 1) x (w - window + 1)` field.
fn window_filter(data: &[f64], w: usize, h: usize, kernel: &[f64]) -> Vec<f64> {
    let k = kernel.len();
    let wo = w - k + 1;
    let ho = h - k + 1;
    let mut rows = vec![0.0; wo * h];
    for r in 0..h {
        for c in 0..wo {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                acc += kv * data[r * w + c + i];
            }
            rows[r * wo + c] = acc;
        }
    }
    let mut out = vec![0.0; wo * ho];
    for r in 0..ho {
        for c in 0..wo {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                acc += kv * rows[(r + i) * wo + c];
            }
            out[r * wo + c] = acc;
        }
    }
    out
}

/// Mean local SSIM with a Gaussian window over all fully contained windows.
pub fn ssim(
    a: &ImageGrid,
    b: &ImageGrid,
    window: usize,
    k1: f64,
    k2: f64,
    data_range: Option<f64>,
) -> Result<f64> {
    check_shapes(a, b)?;
    if window < 3 || window % 2 == 0 {
        return Err(Error::invalid("SSIM window must be odd and >= 3"));
    }
    if a.width < window || a.height < window {
        return Err(Error::invalid(format!(
            "a {}x{} image cannot fit a {window}x{window} SSIM window",
            a.width, a.height
        )));
    }
    let range = data_range.unwrap_or_else(|| data_range_of(a));
    let ma = a.magnitude();
    let mb = b.magnitude();
    let (w, h) = (a.width, a.height);
    let kernel = gaussian_kernel(window);
    let aa: Vec<f64> = ma.iter().map(|x| x * x).collect();
    let bb: Vec<f64> = mb.iter().map(|x| x * x).collect();
    let ab: Vec<f64> = ma.iter().zip(&mb).map(|(x, y)| x * y).collect();
    let mu_a = window_filter(&ma, w, h, &kernel);
    let mu_b = window_filter(&mb, w, h, &kernel);
    let mu_aa = window_filter(&aa, w, h, &kernel);
    let mu_bb = window_filter(&bb, w, h, &kernel);
    let mu_ab = window_filter(&ab, w, h, &kernel);

    let c1 = (k1 * range) * (k1 * range);
    let c2 = (k2 * range) * (k2 * range);
    let mut sum = 0.0;
    for i in 0..mu_a.len() {
        let va = mu_aa[i] - mu_a[i] * mu_a[i];
        let vb = mu_bb[i] - mu_b[i] * mu_b[i];
        let cov = mu_ab[i] - mu_a[i] * mu_b[i];
        let numerator = (2.0 * mu_a[i] * mu_b[i] + c1) * (2.0 * cov + c2);
        let denominator = (mu_a[i] * mu_a[i] + mu_b[i] * mu_b[i] + c1) * (va + vb + c2);
        sum += numerator / denominator;
    }
    Ok(sum / mu_a.len() as f64)
}

/// SSIM with the standard 11x11 Gaussian window and k1/k2 constants.
pub fn ssim_default(a: &ImageGrid, b: &ImageGrid) -> Result<f64> {
    ssim(
        a,
        b,
        SSIM_DEFAULT_WINDOW,
        SSIM_DEFAULT_K1,
        SSIM_DEFAULT_K2,
        None,
    )
}

/// All three metrics against a reference (`a` is the reference for ranges).
pub fn compute_metrics(reference: &ImageGrid, recon: &ImageGrid) -> Result<MetricsRecord> {
    let range = data_range_of(reference);
    let err = mse(reference, recon)?;
    let psnr_v = psnr(reference, recon, Some(range))?;
    let ssim_v = ssim(
        reference,
        recon,
        SSIM_DEFAULT_WINDOW,
        SSIM_DEFAULT_K1,
        SSIM_DEFAULT_K2,
        Some(range),
    )?;
    Ok(MetricsRecord {
        ssim: ssim_v,
        psnr: psnr_v,
        mse: err,
        data_range: range,
        window: SSIM_DEFAULT_WINDOW,
        k1: SSIM_DEFAULT_K1,
        k2: SSIM_DEFAULT_K2,
    })
}
