//! Hyperplanes, stripes, and their metric projections.

use crate::error::{Error, Result};
use crate::operators::OperatorHandle;
use crate::vec_ops::{axpy, dot, norm};

/// The set `{ x : |<u, x> - alpha| <= xi }` between two parallel hyperplanes.
#[derive(Debug, Clone, PartialEq)]
pub struct Stripe {
    pub direction: Vec<f64>,
    pub offset: f64,
    pub half_width: f64,
}

impl Stripe {
    pub fn new(direction: Vec<f64>, offset: f64, half_width: f64) -> Result<Self> {
        if norm(&direction) == 0.0 {
            return Err(Error::invalid("stripe direction must be nonzero"));
        }
        if half_width < 0.0 {
            return Err(Error::invalid("stripe half-width must be >= 0"));
        }
        Ok(Stripe {
            direction,
            offset,
            half_width,
        })
    }

    /// Signed violation `<u, x> - alpha`.
    pub fn deviation(&self, x: &[f64]) -> f64 {
        dot(&self.direction, x) - self.offset
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        self.deviation(x).abs() <= self.half_width
    }
}

/// Orthogonal projection onto the hyperplane `<u, x> = alpha`.
pub fn project_hyperplane(x: &[f64], u: &[f64], alpha: f64) -> Result<Vec<f64>> {
    let nu2 = dot(u, u);
    if nu2 == 0.0 {
        return Err(Error::invalid("cannot project onto a zero-normal hyperplane"));
    }
    if x.len() != u.len() {
        return Err(Error::ShapeMismatch {
            expected: u.len(),
            got: x.len(),
            context: "hyperplane projection",
        });
    }
    let mut out = x.to_vec();
    let step = (dot(u, x) - alpha) / nu2;
    axpy(-step, u, &mut out);
    Ok(out)
}

/// Metric projection onto a stripe: the identity inside, otherwise the
/// projection onto the nearer bounding hyperplane.
pub fn project_stripe(x: &[f64], s: &Stripe) -> Result<Vec<f64>> {
    if x.len() != s.direction.len() {
        return Err(Error::ShapeMismatch {
            expected: s.direction.len(),
            got: x.len(),
            context: "stripe projection",
        });
    }
    let dev = s.deviation(x);
    if dev.abs() <= s.half_width {
        return Ok(x.to_vec());
    }
    let target = s.offset + dev.signum() * s.half_width;
    project_hyperplane(x, &s.direction, target)
}

/// Stripe generated by a residual block: direction `A_i^* w`, offset
/// `<w, y_i>`, half-width `width * ||w||`.
pub fn stripe_from_subproblem(
    w: &[f64],
    op: &OperatorHandle,
    y_block: &[f64],
    width: f64,
) -> Result<Stripe> {
    let nw = norm(w);
    if nw == 0.0 {
        return Err(Error::invalid(
            "subproblem already consistent: residual is zero",
        ));
    }
    if width < 0.0 {
        return Err(Error::invalid("stripe width must be >= 0"));
    }
    let direction = op.adjoint(w)?;
    let offset = dot(w, y_block);
    Stripe::new(direction, offset, width * nw)
}
