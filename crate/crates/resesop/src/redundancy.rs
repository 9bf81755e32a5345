//! Redundancy diagnostics for suboperator decompositions.
//!
//! A full SVD `A = U S V^*` splits measurement space into the range of `A`
//! and its complement. The part of each suboperator's search direction that
//! cannot be recovered from the aggregate gradient `u_sigma = A^*(A s - y)`
//! is bounded by `B_i = ||A_i^* U_{i,tail}||`, where `U_tail` spans the left
//! null space. Matrix norms here are Frobenius norms, which is what the
//! reference redundancy tables report; `B_i <= ||A_i||_F` always holds since
//! the tail projector is a contraction.

use crate::error::{Error, Result};
use crate::grid::SubproblemPartition;
use crate::operators::OperatorHandle;
use crate::vec_ops::{norm, scale};
use ndarray::{s, Array1, Array2};
use ndarray_linalg::{JobSvd, SVDDC};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Default relative rank tolerance: singular values below
/// `rank_tol * sigma_max` count as zero.
pub const DEFAULT_RANK_TOL: f64 = 1e-10;

/// Default cap on `rows * cols` for dense SVD analysis.
pub const DEFAULT_ANALYSIS_CAP: usize = 200_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Negligible,
    Moderate,
    Severe,
}

impl std::fmt::Display for Severity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Severity::Negligible => "negligible",
            Severity::Moderate => "moderate",
            Severity::Severe => "severe",
        };
        f.write_str(s)
    }
}

/// Severity classes interpolating the observed ratio clusters: up to 0.10
/// negligible, up to 0.60 moderate, above that severe. Heuristic thresholds.
pub fn classify_redundancy(ratio: f64) -> Severity {
    if ratio <= 0.10 {
        Severity::Negligible
    } else if ratio <= 0.60 {
        Severity::Moderate
    } else {
        Severity::Severe
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SubReport {
    pub b: f64,
    /// Frobenius norm of the suboperator rows.
    pub norm: f64,
    pub ratio: f64,
    pub severity: Severity,
}

#[derive(Debug, Clone)]
pub struct RedundancyReport {
    pub per_sub: Vec<SubReport>,
    pub rank: usize,
    pub rows: usize,
    pub cols: usize,
    pub rank_tol: f64,
    pub singular_values: Vec<f64>,
}

impl RedundancyReport {
    /// Largest spread between per-block ratios; symmetric splits should be
    /// near zero, so a large value flags asymmetric redundancy.
    pub fn ratio_spread(&self) -> f64 {
        let max = self.per_sub.iter().map(|s| s.ratio).fold(f64::MIN, f64::max);
        let min = self.per_sub.iter().map(|s| s.ratio).fold(f64::MAX, f64::min);
        max - min
    }
}

fn frobenius(a: &ndarray::ArrayView2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Full SVD with a complete left basis (all `M` columns of `U`).
fn svd_full_left(a: &Array2<f64>) -> Result<(Array2<f64>, Array1<f64>, Array2<f64>)> {
    let (m, n) = a.dim();
    let job = if m > n { JobSvd::All } else { JobSvd::Some };
    let (u, s, vt) = a
        .svddc(job)
        .map_err(|e| Error::Numerical(format!("SVD failed: {e}; matrix is {m}x{n}")))?;
    let u = u.ok_or_else(|| Error::Numerical("SVD returned no left factor".into()))?;
    let vt = vt.ok_or_else(|| Error::Numerical("SVD returned no right factor".into()))?;
    Ok((u, s, vt))
}

fn numerical_rank(s: &Array1<f64>, rank_tol: f64) -> usize {
    let smax = s.iter().cloned().fold(0.0f64, f64::max);
    if smax == 0.0 {
        return 0;
    }
    s.iter().filter(|&&v| v > rank_tol * smax).count()
}

/// SVD-based dependency norms `B_i` with severity classification.
pub fn compute_b(
    a: &Array2<f64>,
    partition: &SubproblemPartition,
    rank_tol: f64,
    cap: usize,
) -> Result<RedundancyReport> {
    let (m, n) = a.dim();
    let needed = m as u128 * n as u128;
    if needed > cap as u128 {
        return Err(Error::CapExceeded {
            needed,
            cap: cap as u128,
            hint: format!(
                "SVD analysis of a {m}x{n} matrix needs {:.1} GB; analyze a scaled-down geometry",
                needed as f64 * 8.0 * 3.0 / 1e9
            ),
        });
    }
    if partition.total_len() != m {
        return Err(Error::ShapeMismatch {
            expected: m,
            got: partition.total_len(),
            context: "partition vs matrix rows",
        });
    }
    let (u, sv, _vt) = svd_full_left(a)?;
    let rank = numerical_rank(&sv, rank_tol);
    let tail = u.slice(s![.., rank..]);
    let mut per_sub = Vec::with_capacity(partition.count());
    for block in partition.blocks() {
        let a_i = a.slice(s![block.clone(), ..]);
        let norm_i = frobenius(&a_i);
        let b_i = if tail.ncols() == 0 {
            0.0
        } else {
            let u_i_tail = tail.slice(s![block.clone(), ..]);
            let prod = a_i.t().dot(&u_i_tail);
            frobenius(&prod.view())
        };
        let ratio = if norm_i > 0.0 { b_i / norm_i } else { 0.0 };
        per_sub.push(SubReport {
            b: b_i,
            norm: norm_i,
            ratio,
            severity: classify_redundancy(ratio),
        });
    }
    Ok(RedundancyReport {
        per_sub,
        rank,
        rows: m,
        cols: n,
        rank_tol,
        singular_values: sv.to_vec(),
    })
}

/// Search directions recovered from the aggregate gradient.
#[derive(Debug, Clone)]
pub struct Extraction {
    /// Recovered `u_i` (exact for full row rank, approximations otherwise).
    pub directions: Vec<Vec<f64>>,
    /// True when the matrix has full numerical row rank.
    pub exact: bool,
    /// Per-block certificates: `||u_i - u_i_recovered|| <= b[i] * ||A s - y||`.
    pub b: Vec<f64>,
}

/// Recovers each subproblem's search direction from
/// `u_sigma = A^*(A s - y)` via the pseudoinverse of `A A^*`.
pub fn extract_search_directions(
    u_sigma: &[f64],
    a: &Array2<f64>,
    partition: &SubproblemPartition,
    rank_tol: f64,
) -> Result<Extraction> {
    let (m, n) = a.dim();
    if u_sigma.len() != n {
        return Err(Error::ShapeMismatch {
            expected: n,
            got: u_sigma.len(),
            context: "aggregate gradient length",
        });
    }
    if partition.total_len() != m {
        return Err(Error::ShapeMismatch {
            expected: m,
            got: partition.total_len(),
            context: "partition vs matrix rows",
        });
    }
    let (u, sv, vt) = svd_full_left(a)?;
    let rank = numerical_rank(&sv, rank_tol);
    let exact = rank == m;

    // w_bar = U pinv(S)^T V^* u_sigma: the range-space part of the residual
    let coeffs = vt.dot(&Array1::from(u_sigma.to_vec()));
    let mut weights = Array1::zeros(u.ncols());
    for j in 0..rank {
        weights[j] = coeffs[j] / sv[j];
    }
    let w_bar = u.dot(&weights);

    let mut directions = Vec::with_capacity(partition.count());
    let mut b = Vec::with_capacity(partition.count());
    for block in partition.blocks() {
        let a_i = a.slice(s![block.clone(), ..]);
        let w_i = w_bar.slice(s![block.clone()]);
        directions.push(a_i.t().dot(&w_i).to_vec());
        if exact {
            b.push(0.0);
        } else {
            let u_i_tail = u.slice(s![block.clone(), rank..]);
            let prod = a_i.t().dot(&u_i_tail);
            b.push(frobenius(&prod.view()));
        }
    }
    Ok(Extraction {
        directions,
        exact,
        b,
    })
}

/// Matrix of power-iteration estimates of the spectral norms
/// `||A_i A_j^*||`; entry `(i, j)` near zero flags the pair as orthogonal.
pub fn orthogonality_matrix(
    ops: &[OperatorHandle],
    iters: usize,
    seed: u64,
) -> Result<Array2<f64>> {
    let n = ops.len();
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            out[[i, j]] = composed_norm(&ops[i], &ops[j], iters, seed ^ ((i * n + j) as u64))?;
        }
    }
    Ok(out)
}

/// Power iteration for the spectral norm of `A_i A_j^*`.
fn composed_norm(
    op_i: &OperatorHandle,
    op_j: &OperatorHandle,
    iters: usize,
    seed: u64,
) -> Result<f64> {
    if op_i.domain_len() != op_j.domain_len() {
        return Err(Error::ShapeMismatch {
            expected: op_i.domain_len(),
            got: op_j.domain_len(),
            context: "suboperator domains",
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<f64> = (0..op_j.range_len()).map(|_| rng.gen::<f64>() - 0.5).collect();
    let nv = norm(&v);
    if nv == 0.0 {
        return Ok(0.0);
    }
    scale(1.0 / nv, &mut v);
    let mut sigma = 0.0;
    for _ in 0..iters {
        let w = op_i.apply(&op_j.adjoint(&v)?)?; // M v
        let nw = norm(&w);
        if nw == 0.0 {
            return Ok(0.0);
        }
        let z = op_j.apply(&op_i.adjoint(&w)?)?; // M^T M v
        let nz = norm(&z);
        if nz == 0.0 {
            return Ok(nw);
        }
        sigma = nz.sqrt();
        v = z;
        scale(1.0 / nz, &mut v);
    }
    Ok(sigma)
}
