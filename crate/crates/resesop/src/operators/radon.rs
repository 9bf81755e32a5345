//! Discrete Radon transform by ray marching with bilinear interpolation.
//!
//! Rays are parametrized by an angle and a signed detector offset. Sample
//! positions along each ray form a lattice that is symmetric about the foot
//! of the perpendicular from the grid center, and angles at `theta >= pi`
//! reuse the negated direction vectors of `theta - pi`. Together with the
//! symmetric detector offsets this makes a ray and its reversed counterpart
//! produce identical matrix rows, so oversampled geometries carry their
//! redundancy exactly rather than approximately.

use super::{LinearOperator, OperatorKind};
use crate::error::{Error, Result};
use crate::grid::{ImageGrid, MeasurementVector, ScalarKind};
use ndarray::Array2;
use std::f64::consts::PI;
use std::ops::Range;

/// Parallel-beam acquisition geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct RadonGeometry {
    pub n_angles: usize,
    pub n_detectors: usize,
    /// Angular range in radians; angles are `i * angle_max / n_angles`.
    pub angle_max: f64,
    /// Physical span of the detector line; `None` uses the grid diagonal.
    pub detector_extent: Option<f64>,
    /// Integration step as a fraction of the pixel size.
    pub ray_step: f64,
}

impl RadonGeometry {
    pub fn new(n_angles: usize, n_detectors: usize, angle_max: f64) -> Result<Self> {
        let g = RadonGeometry {
            n_angles,
            n_detectors,
            angle_max,
            detector_extent: None,
            ray_step: 0.5,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn with_detector_extent(mut self, extent: f64) -> Self {
        self.detector_extent = Some(extent);
        self
    }

    pub fn with_ray_step(mut self, step: f64) -> Self {
        self.ray_step = step;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_angles < 1 {
            return Err(Error::invalid("n_angles must be >= 1"));
        }
        if self.n_detectors < 2 {
            return Err(Error::invalid("n_detectors must be >= 2"));
        }
        if !(self.angle_max > 0.0 && self.angle_max <= 2.0 * PI) {
            return Err(Error::invalid("angle_max must lie in (0, 2*pi]"));
        }
        if !(self.ray_step > 0.0 && self.ray_step.is_finite()) {
            return Err(Error::invalid("ray_step must be positive"));
        }
        Ok(())
    }

    pub fn n_rays(&self) -> usize {
        self.n_angles * self.n_detectors
    }
}

/// Radon transform bound to a concrete image grid shape.
pub struct RadonOperator {
    geom: RadonGeometry,
    width: usize,
    height: usize,
    pixel_size: f64,
    /// Per-angle unit vectors: (detector axis, ray direction).
    dirs: Vec<([f64; 2], [f64; 2])>,
    /// Detector offsets in pixel units.
    offsets_px: Vec<f64>,
    /// Sample positions along the ray, pixel units, symmetric about 0.
    samples_px: Vec<f64>,
}

impl RadonOperator {
    pub fn new(geom: RadonGeometry, width: usize, height: usize, field_of_view: f64) -> Result<Self> {
        geom.validate()?;
        if width == 0 || height == 0 {
            return Err(Error::invalid("empty image grid"));
        }
        let pixel_size = field_of_view / width as f64;
        let fov_h = pixel_size * height as f64;
        let extent = geom
            .detector_extent
            .unwrap_or_else(|| (field_of_view * field_of_view + fov_h * fov_h).sqrt());
        let dt = extent / geom.n_detectors as f64;
        let offsets_px: Vec<f64> = (0..geom.n_detectors)
            .map(|k| (k as f64 - (geom.n_detectors as f64 - 1.0) / 2.0) * dt / pixel_size)
            .collect();

        let dirs = (0..geom.n_angles)
            .map(|i| {
                let theta = i as f64 * geom.angle_max / geom.n_angles as f64;
                angle_vectors(theta)
            })
            .collect();

        let half_diag = ((width * width + height * height) as f64).sqrt() / 2.0;
        let ds = geom.ray_step;
        let half_span = half_diag + 1.0 + ds;
        let mut n_s = (2.0 * half_span / ds).ceil() as usize;
        if n_s % 2 == 1 {
            n_s += 1;
        }
        let samples_px: Vec<f64> = (0..n_s)
            .map(|m| (m as f64 - (n_s as f64 - 1.0) / 2.0) * ds)
            .collect();

        Ok(RadonOperator {
            geom,
            width,
            height,
            pixel_size,
            dirs,
            offsets_px,
            samples_px,
        })
    }

    pub fn geometry(&self) -> &RadonGeometry {
        &self.geom
    }

    /// Weight applied to every interpolation sample (step length).
    fn sample_weight(&self) -> f64 {
        self.geom.ray_step * self.pixel_size
    }

    fn ray_gather(&self, angle: usize, det: usize, x: &[f64]) -> f64 {
        let (w_vec, d_vec) = self.dirs[angle];
        let t = self.offsets_px[det];
        let cx = (self.width as f64 - 1.0) / 2.0;
        let cy = (self.height as f64 - 1.0) / 2.0;
        let bx = cx + t * w_vec[0];
        let by = cy + t * w_vec[1];
        let (w, h) = (self.width as isize, self.height as isize);
        let mut acc = 0.0;
        for &s in &self.samples_px {
            let px = bx + s * d_vec[0];
            let py = by + s * d_vec[1];
            let x0 = px.floor();
            let y0 = py.floor();
            let fx = px - x0;
            let fy = py - y0;
            let (ix, iy) = (x0 as isize, y0 as isize);
            let mut v = 0.0;
            if ix >= 0 && ix < w && iy >= 0 && iy < h {
                v += (1.0 - fx) * (1.0 - fy) * x[(iy * w + ix) as usize];
            }
            if ix + 1 >= 0 && ix + 1 < w && iy >= 0 && iy < h {
                v += fx * (1.0 - fy) * x[(iy * w + ix + 1) as usize];
            }
            if ix >= 0 && ix < w && iy + 1 >= 0 && iy + 1 < h {
                v += (1.0 - fx) * fy * x[((iy + 1) * w + ix) as usize];
            }
            if ix + 1 >= 0 && ix + 1 < w && iy + 1 >= 0 && iy + 1 < h {
                v += fx * fy * x[((iy + 1) * w + ix + 1) as usize];
            }
            acc += v;
        }
        acc * self.sample_weight()
    }

    fn ray_scatter(&self, angle: usize, det: usize, value: f64, out: &mut [f64]) {
        if value == 0.0 {
            return;
        }
        let (w_vec, d_vec) = self.dirs[angle];
        let t = self.offsets_px[det];
        let cx = (self.width as f64 - 1.0) / 2.0;
        let cy = (self.height as f64 - 1.0) / 2.0;
        let bx = cx + t * w_vec[0];
        let by = cy + t * w_vec[1];
        let (w, h) = (self.width as isize, self.height as isize);
        let scaled = value * self.sample_weight();
        for &s in &self.samples_px {
            let px = bx + s * d_vec[0];
            let py = by + s * d_vec[1];
            let x0 = px.floor();
            let y0 = py.floor();
            let fx = px - x0;
            let fy = py - y0;
            let (ix, iy) = (x0 as isize, y0 as isize);
            if ix >= 0 && ix < w && iy >= 0 && iy < h {
                out[(iy * w + ix) as usize] += (1.0 - fx) * (1.0 - fy) * scaled;
            }
            if ix + 1 >= 0 && ix + 1 < w && iy >= 0 && iy < h {
                out[(iy * w + ix + 1) as usize] += fx * (1.0 - fy) * scaled;
            }
            if ix >= 0 && ix < w && iy + 1 >= 0 && iy + 1 < h {
                out[((iy + 1) * w + ix) as usize] += (1.0 - fx) * fy * scaled;
            }
            if ix + 1 >= 0 && ix + 1 < w && iy + 1 >= 0 && iy + 1 < h {
                out[((iy + 1) * w + ix + 1) as usize] += fx * fy * scaled;
            }
        }
    }
}

/// Unit vectors for one projection angle.
///
/// Axis-aligned angles are snapped to exact unit vectors and angles past pi
/// mirror the vectors of `theta - pi`, so repeated lines are bit-identical.
fn angle_vectors(theta: f64) -> ([f64; 2], [f64; 2]) {
    const SNAP: f64 = 1e-12;
    if theta >= PI {
        let (w, d) = angle_vectors(theta - PI);
        return ([-w[0], -w[1]], [-d[0], -d[1]]);
    }
    let quarter = theta / (PI / 2.0);
    let rounded = quarter.round();
    if (quarter - rounded).abs() < SNAP {
        return match rounded as i64 {
            0 => ([1.0, 0.0], [0.0, 1.0]),
            1 => ([0.0, 1.0], [-1.0, 0.0]),
            _ => {
                let (c, s) = (theta.cos(), theta.sin());
                ([c, s], [-s, c])
            }
        };
    }
    let (c, s) = (theta.cos(), theta.sin());
    ([c, s], [-s, c])
}

impl LinearOperator for RadonOperator {
    fn domain_len(&self) -> usize {
        self.width * self.height
    }

    fn range_len(&self) -> usize {
        self.geom.n_rays()
    }

    fn kind(&self) -> OperatorKind {
        OperatorKind::Radon
    }

    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        self.apply_block_into(x, 0..self.range_len(), out);
    }

    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        self.adjoint_block_into(y, 0..self.range_len(), out);
    }

    fn apply_block_into(&self, x: &[f64], rows: Range<usize>, out: &mut [f64]) {
        let nd = self.geom.n_detectors;
        for (o, ray) in out.iter_mut().zip(rows) {
            *o = self.ray_gather(ray / nd, ray % nd, x);
        }
    }

    fn adjoint_block_into(&self, y_block: &[f64], rows: Range<usize>, out: &mut [f64]) {
        let nd = self.geom.n_detectors;
        for (v, ray) in y_block.iter().zip(rows) {
            self.ray_scatter(ray / nd, ray % nd, *v, out);
        }
    }

    fn materialize_rows(&self) -> Option<Array2<f64>> {
        let mut a = Array2::zeros((self.range_len(), self.domain_len()));
        let nd = self.geom.n_detectors;
        for ray in 0..self.range_len() {
            let row = a.row_mut(ray);
            let slice = row.into_slice().unwrap();
            self.ray_scatter(ray / nd, ray % nd, 1.0, slice);
        }
        Some(a)
    }
}

/// Line integrals of a real image over the full ray set.
pub fn radon_apply(image: &ImageGrid, geom: &RadonGeometry) -> Result<MeasurementVector> {
    if image.kind != ScalarKind::Real {
        return Err(Error::invalid("radon transform expects a real-valued image"));
    }
    if !image.is_finite() {
        return Err(Error::invalid(
            "radon transform rejects non-finite image values",
        ));
    }
    let op = RadonOperator::new(geom.clone(), image.width, image.height, image.field_of_view)?;
    let mut out = vec![0.0; op.range_len()];
    op.apply_into(&image.data, &mut out);
    Ok(MeasurementVector::single_block(out))
}

/// Exact transpose of [`radon_apply`] for a given grid shape.
pub fn radon_adjoint(
    sino: &MeasurementVector,
    geom: &RadonGeometry,
    width: usize,
    height: usize,
    field_of_view: f64,
) -> Result<ImageGrid> {
    if sino.len() != geom.n_rays() {
        return Err(Error::ShapeMismatch {
            expected: geom.n_rays(),
            got: sino.len(),
            context: "sinogram length",
        });
    }
    let op = RadonOperator::new(geom.clone(), width, height, field_of_view)?;
    let mut out = vec![0.0; op.domain_len()];
    op.adjoint_into(&sino.values, &mut out);
    let mut img = ImageGrid::real(width, height, out)?;
    img.field_of_view = field_of_view;
    Ok(img)
}
