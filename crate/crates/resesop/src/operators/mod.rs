//! Linear-operator abstraction, forward models, subproblem decomposition and
//! regularizer augmentation.
//!
//! Operators act on flat `f64` slices (interleaved complex where applicable,
//! see [`crate::grid`]). The adjoint is always the transpose with respect to
//! the real inner product of that flat layout, which for complex-linear maps
//! coincides with the conjugate transpose.

mod dense;
mod fourier;
mod radon;

pub use dense::{DenseOperator, GradientOperator, IdentityOperator, ZeroOperator};
pub use fourier::{nudft_apply, sense_adjoint, sense_apply, NudftOperator, SenseBinOperator, SenseSetup};
pub use radon::{radon_adjoint, radon_apply, RadonGeometry, RadonOperator};

use crate::error::{Error, Result};
use crate::grid::SubproblemPartition;
use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::ops::Range;
use std::sync::Arc;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OperatorKind {
    Radon,
    MaskedFourierSense,
    NonuniformDft,
    DenseMatrix,
    Augmented,
    RowBlockView,
}

/// A linear map between flat vectors, with an exact adjoint.
///
/// `apply_block`/`adjoint_block` address a contiguous range of output rows;
/// implementations override them when a row subset can be evaluated cheaper
/// than the full map. Inputs are trusted to have the advertised lengths
/// (checked by the `OperatorHandle` wrappers).
pub trait LinearOperator: Send + Sync {
    fn domain_len(&self) -> usize;
    fn range_len(&self) -> usize;
    fn kind(&self) -> OperatorKind;

    fn apply_into(&self, x: &[f64], out: &mut [f64]);
    fn adjoint_into(&self, y: &[f64], out: &mut [f64]);

    /// Writes rows `rows` of `A x` into `out` (length `rows.len()`).
    fn apply_block_into(&self, x: &[f64], rows: Range<usize>, out: &mut [f64]) {
        let mut full = vec![0.0; self.range_len()];
        self.apply_into(x, &mut full);
        out.copy_from_slice(&full[rows]);
    }

    /// Adds `A_rows^* y_block` into `out` (length `domain_len`), where
    /// `y_block` holds only the rows in `rows`.
    fn adjoint_block_into(&self, y_block: &[f64], rows: Range<usize>, out: &mut [f64]) {
        let mut full = vec![0.0; self.range_len()];
        full[rows].copy_from_slice(y_block);
        let mut tmp = vec![0.0; self.domain_len()];
        self.adjoint_into(&full, &mut tmp);
        for (o, t) in out.iter_mut().zip(&tmp) {
            *o += t;
        }
    }

    /// Row-wise materialization when the operator can enumerate its rows
    /// cheaper than column probing; must equal the column-by-column result.
    fn materialize_rows(&self) -> Option<Array2<f64>> {
        None
    }
}

/// Shared, thread-safe handle to an operator.
#[derive(Clone)]
pub struct OperatorHandle(Arc<dyn LinearOperator>);

impl OperatorHandle {
    pub fn new(op: impl LinearOperator + 'static) -> Self {
        OperatorHandle(Arc::new(op))
    }

    pub fn domain_len(&self) -> usize {
        self.0.domain_len()
    }

    pub fn range_len(&self) -> usize {
        self.0.range_len()
    }

    pub fn kind(&self) -> OperatorKind {
        self.0.kind()
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.domain_len() {
            return Err(Error::ShapeMismatch {
                expected: self.domain_len(),
                got: x.len(),
                context: "operator apply",
            });
        }
        let mut out = vec![0.0; self.range_len()];
        self.0.apply_into(x, &mut out);
        Ok(out)
    }

    pub fn adjoint(&self, y: &[f64]) -> Result<Vec<f64>> {
        if y.len() != self.range_len() {
            return Err(Error::ShapeMismatch {
                expected: self.range_len(),
                got: y.len(),
                context: "operator adjoint",
            });
        }
        let mut out = vec![0.0; self.domain_len()];
        self.0.adjoint_into(y, &mut out);
        Ok(out)
    }

    pub(crate) fn inner(&self) -> &dyn LinearOperator {
        self.0.as_ref()
    }
}

/// Restriction of a parent operator to a contiguous row block.
///
/// The view holds no row data of its own; applications delegate to the
/// parent's block paths.
pub struct RowBlockView {
    parent: OperatorHandle,
    rows: Range<usize>,
}

impl LinearOperator for RowBlockView {
    fn domain_len(&self) -> usize {
        self.parent.domain_len()
    }

    fn range_len(&self) -> usize {
        self.rows.len()
    }

    fn kind(&self) -> OperatorKind {
        OperatorKind::RowBlockView
    }

    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        self.parent.inner().apply_block_into(x, self.rows.clone(), out);
    }

    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        out.fill(0.0);
        self.parent
            .inner()
            .adjoint_block_into(y, self.rows.clone(), out);
    }

    fn apply_block_into(&self, x: &[f64], rows: Range<usize>, out: &mut [f64]) {
        let shifted = self.rows.start + rows.start..self.rows.start + rows.end;
        self.parent.inner().apply_block_into(x, shifted, out);
    }

    fn adjoint_block_into(&self, y_block: &[f64], rows: Range<usize>, out: &mut [f64]) {
        let shifted = self.rows.start + rows.start..self.rows.start + rows.end;
        self.parent.inner().adjoint_block_into(y_block, shifted, out);
    }
}

/// Splits an operator into per-block suboperator views.
pub fn split(op: &OperatorHandle, partition: &SubproblemPartition) -> Result<Vec<OperatorHandle>> {
    if partition.total_len() != op.range_len() {
        return Err(Error::ShapeMismatch {
            expected: op.range_len(),
            got: partition.total_len(),
            context: "partition vs operator range",
        });
    }
    Ok(partition
        .blocks()
        .iter()
        .map(|b| {
            OperatorHandle::new(RowBlockView {
                parent: op.clone(),
                rows: b.clone(),
            })
        })
        .collect())
}

/// Vertical stack `[A; R]` used for regularizer augmentation.
pub struct AugmentedOperator {
    top: OperatorHandle,
    bottom: OperatorHandle,
}

impl LinearOperator for AugmentedOperator {
    fn domain_len(&self) -> usize {
        self.top.domain_len()
    }

    fn range_len(&self) -> usize {
        self.top.range_len() + self.bottom.range_len()
    }

    fn kind(&self) -> OperatorKind {
        OperatorKind::Augmented
    }

    fn apply_into(&self, x: &[f64], out: &mut [f64]) {
        let split = self.top.range_len();
        self.top.inner().apply_into(x, &mut out[..split]);
        self.bottom.inner().apply_into(x, &mut out[split..]);
    }

    fn adjoint_into(&self, y: &[f64], out: &mut [f64]) {
        let split = self.top.range_len();
        self.top.inner().adjoint_into(&y[..split], out);
        let mut tmp = vec![0.0; self.domain_len()];
        self.bottom.inner().adjoint_into(&y[split..], &mut tmp);
        for (o, t) in out.iter_mut().zip(&tmp) {
            *o += t;
        }
    }

    fn apply_block_into(&self, x: &[f64], rows: Range<usize>, out: &mut [f64]) {
        let split = self.top.range_len();
        if rows.end <= split {
            self.top.inner().apply_block_into(x, rows, out);
        } else if rows.start >= split {
            self.bottom
                .inner()
                .apply_block_into(x, rows.start - split..rows.end - split, out);
        } else {
            let cut = split - rows.start;
            self.top
                .inner()
                .apply_block_into(x, rows.start..split, &mut out[..cut]);
            self.bottom
                .inner()
                .apply_block_into(x, 0..rows.end - split, &mut out[cut..]);
        }
    }

    fn adjoint_block_into(&self, y_block: &[f64], rows: Range<usize>, out: &mut [f64]) {
        let split = self.top.range_len();
        if rows.end <= split {
            self.top.inner().adjoint_block_into(y_block, rows, out);
        } else if rows.start >= split {
            self.bottom.inner().adjoint_block_into(
                y_block,
                rows.start - split..rows.end - split,
                out,
            );
        } else {
            let cut = split - rows.start;
            self.top
                .inner()
                .adjoint_block_into(&y_block[..cut], rows.start..split, out);
            self.bottom
                .inner()
                .adjoint_block_into(&y_block[cut..], 0..rows.end - split, out);
        }
    }
}

/// Result of stacking a regularizer under a forward operator.
pub struct Augmented {
    pub op: OperatorHandle,
    /// Input partition with one extra block covering the regularizer rows.
    pub partition: SubproblemPartition,
    /// Inexactness level assigned to the extra block.
    pub e_reg: f64,
}

/// Stacks `reg` below `op` and appends one subproblem for the regularizer
/// rows with inexactness level `e_reg`. The augmented data vector is
/// `[y; 0]`; see [`Augmented::extend_data`].
pub fn augment_with_regularizer(
    op: &OperatorHandle,
    reg: &OperatorHandle,
    e_reg: f64,
    partition: &SubproblemPartition,
) -> Result<Augmented> {
    if reg.domain_len() != op.domain_len() {
        return Err(Error::ShapeMismatch {
            expected: op.domain_len(),
            got: reg.domain_len(),
            context: "regularizer domain",
        });
    }
    if e_reg < 0.0 {
        return Err(Error::invalid("regularizer inexactness must be >= 0"));
    }
    if partition.total_len() != op.range_len() {
        return Err(Error::ShapeMismatch {
            expected: op.range_len(),
            got: partition.total_len(),
            context: "partition vs operator range",
        });
    }
    Ok(Augmented {
        op: OperatorHandle::new(AugmentedOperator {
            top: op.clone(),
            bottom: reg.clone(),
        }),
        partition: partition.extended_by(reg.range_len()),
        e_reg,
    })
}

impl Augmented {
    /// `[y; 0]` matching the augmented operator's range.
    pub fn extend_data(&self, y: &[f64]) -> Vec<f64> {
        let mut out = y.to_vec();
        out.resize(self.partition.total_len(), 0.0);
        out
    }
}

/// Materializes the operator as a dense matrix, column by column.
///
/// Column `j` is the image of the `j`-th standard basis vector. Refuses when
/// `range * domain` exceeds `cap` and reports the memory that would be
/// needed.
pub fn materialize_dense(op: &OperatorHandle, cap: usize) -> Result<Array2<f64>> {
    let (m, n) = (op.range_len(), op.domain_len());
    let needed = m as u128 * n as u128;
    if needed > cap as u128 {
        let bytes = needed * 8;
        return Err(Error::CapExceeded {
            needed,
            cap: cap as u128,
            hint: format!(
                "dense matrix would take {:.1} GB; raise the cap or shrink the geometry",
                bytes as f64 / 1e9
            ),
        });
    }
    if let Some(rows) = op.inner().materialize_rows() {
        return Ok(rows);
    }
    let mut a = Array2::zeros((m, n));
    let mut basis = vec![0.0; n];
    let mut col = vec![0.0; m];
    for j in 0..n {
        basis[j] = 1.0;
        op.inner().apply_into(&basis, &mut col);
        basis[j] = 0.0;
        for i in 0..m {
            a[[i, j]] = col[i];
        }
    }
    Ok(a)
}

/// Power-iteration estimate of the largest singular value.
///
/// Deterministic for a fixed seed; a zero operator yields 0.
pub fn operator_norm(op: &OperatorHandle, iters: usize, seed: u64) -> Result<f64> {
    if iters == 0 {
        return Err(Error::invalid("operator_norm needs at least one iteration"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = op.domain_len();
    let mut v: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() - 0.5).collect();
    let nv = crate::vec_ops::norm(&v);
    if nv == 0.0 {
        v[0] = 1.0;
    } else {
        crate::vec_ops::scale(1.0 / nv, &mut v);
    }
    let mut sigma = 0.0;
    for _ in 0..iters {
        let u = op.apply(&v)?;
        let nu = crate::vec_ops::norm(&u);
        if nu == 0.0 {
            return Ok(0.0);
        }
        let w = op.adjoint(&u)?;
        let nw = crate::vec_ops::norm(&w);
        if nw == 0.0 {
            return Ok(nu);
        }
        // v is unit length, so ||A^T A v|| converges to sigma^2
        sigma = nw.sqrt();
        v = w;
        crate::vec_ops::scale(1.0 / nw, &mut v);
    }
    Ok(sigma)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::test_util::{adjoint_test, seeded_vec};

    #[test]
    fn identity_norm_is_one() {
        let id = OperatorHandle::new(IdentityOperator::new(40));
        let s = operator_norm(&id, 5, 1).unwrap();
        assert!((s - 1.0).abs() < 1e-6, "{s}");
    }

    #[test]
    fn diagonal_norm_is_max_entry() {
        let a = Array2::from_diag(&ndarray::arr1(&[3.0, 1.0, 0.5]));
        let op = OperatorHandle::new(DenseOperator::new(a));
        let s = operator_norm(&op, 200, 3).unwrap();
        assert!((s - 3.0).abs() < 1e-6, "{s}");
    }

    #[test]
    fn zero_operator_norm_is_zero() {
        let op = OperatorHandle::new(ZeroOperator::new(7, 5));
        assert_eq!(operator_norm(&op, 10, 0).unwrap(), 0.0);
    }

    #[test]
    fn split_single_block_equals_parent() {
        let a = Array2::from_shape_fn((6, 4), |(i, j)| (i * 7 + j) as f64 - 10.0);
        let op = OperatorHandle::new(DenseOperator::new(a));
        let subs = split(&op, &SubproblemPartition::trivial(6)).unwrap();
        assert_eq!(subs.len(), 1);
        let x = seeded_vec(4, 11);
        assert_eq!(subs[0].apply(&x).unwrap(), op.apply(&x).unwrap());
        let y = seeded_vec(6, 12);
        assert_eq!(subs[0].adjoint(&y).unwrap(), op.adjoint(&y).unwrap());
    }

    #[test]
    fn split_outputs_stack_to_parent_output() {
        let a = Array2::from_shape_fn((9, 5), |(i, j)| ((i * j) as f64).sin());
        let op = OperatorHandle::new(DenseOperator::new(a));
        let part = SubproblemPartition::uniform(9, 3).unwrap();
        let subs = split(&op, &part).unwrap();
        let x = seeded_vec(5, 4);
        let full = op.apply(&x).unwrap();
        let mut stacked = Vec::new();
        for s in &subs {
            stacked.extend(s.apply(&x).unwrap());
        }
        assert_eq!(stacked, full);
    }

    #[test]
    fn split_adjoints_decompose_parent_adjoint() {
        let a = Array2::from_shape_fn((8, 6), |(i, j)| ((i + 2 * j) as f64).cos());
        let op = OperatorHandle::new(DenseOperator::new(a));
        let part = SubproblemPartition::uniform(8, 3).unwrap();
        let subs = split(&op, &part).unwrap();
        let w = seeded_vec(8, 21);
        let direct = op.adjoint(&w).unwrap();
        let mut sum = vec![0.0; 6];
        for (i, s) in subs.iter().enumerate() {
            let wi = &w[part.block(i)];
            let ui = s.adjoint(wi).unwrap();
            for (a, b) in sum.iter_mut().zip(&ui) {
                *a += b;
            }
        }
        for (a, b) in sum.iter().zip(&direct) {
            assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn split_rejects_wrong_partition() {
        let op = OperatorHandle::new(IdentityOperator::new(5));
        assert!(split(&op, &SubproblemPartition::trivial(4)).is_err());
    }

    #[test]
    fn row_block_view_adjoint_identity() {
        let a = Array2::from_shape_fn((10, 7), |(i, j)| ((3 * i + j) as f64).sin());
        let op = OperatorHandle::new(DenseOperator::new(a));
        let part = SubproblemPartition::uniform(10, 4).unwrap();
        for s in split(&op, &part).unwrap() {
            adjoint_test(&s, 20, 99);
        }
    }

    #[test]
    fn augment_zero_regularizer_has_zero_block() {
        let a = Array2::from_shape_fn((4, 3), |(i, j)| (i + j) as f64);
        let op = OperatorHandle::new(DenseOperator::new(a));
        let reg = OperatorHandle::new(ZeroOperator::new(3, 3));
        let part = SubproblemPartition::trivial(4);
        let aug = augment_with_regularizer(&op, &reg, 0.0, &part).unwrap();
        assert_eq!(aug.partition.count(), 2);
        let x = seeded_vec(3, 5);
        let y = aug.op.apply(&x).unwrap();
        assert!(y[4..].iter().all(|v| *v == 0.0));
        adjoint_test(&aug.op, 20, 7);
    }

    #[test]
    fn augment_identity_regularizer_measures_norm() {
        let a = Array2::from_shape_fn((4, 3), |(i, j)| (i as f64 - j as f64) / 3.0);
        let op = OperatorHandle::new(DenseOperator::new(a));
        let reg = OperatorHandle::new(IdentityOperator::new(3));
        let part = SubproblemPartition::trivial(4);
        let aug = augment_with_regularizer(&op, &reg, 0.0, &part).unwrap();
        let x = seeded_vec(3, 5);
        let y = aug.op.apply(&x).unwrap();
        let tail = &y[4..];
        assert_eq!(tail, &x[..]);
        let data = aug.extend_data(&[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(data, vec![1.0, 2.0, 3.0, 4.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn augment_rejects_domain_mismatch() {
        let op = OperatorHandle::new(IdentityOperator::new(5));
        let reg = OperatorHandle::new(IdentityOperator::new(4));
        let part = SubproblemPartition::trivial(5);
        assert!(augment_with_regularizer(&op, &reg, 0.0, &part).is_err());
    }

    #[test]
    fn materialize_identity() {
        let op = OperatorHandle::new(IdentityOperator::new(4));
        let m = materialize_dense(&op, 1 << 20).unwrap();
        assert_eq!(m, Array2::eye(4));
    }

    #[test]
    fn materialize_respects_cap() {
        let op = OperatorHandle::new(IdentityOperator::new(100));
        let err = materialize_dense(&op, 99).unwrap_err();
        match err {
            Error::CapExceeded { needed, .. } => assert_eq!(needed, 10_000),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn materialized_matrix_matches_apply_and_adjoint() {
        let a = Array2::from_shape_fn((7, 9), |(i, j)| ((i * 31 + j * 17) as f64).sin());
        let op = OperatorHandle::new(DenseOperator::new(a.clone()));
        let m = materialize_dense(&op, 1 << 20).unwrap();
        let x = seeded_vec(9, 2);
        let ax = op.apply(&x).unwrap();
        let mx = m.dot(&ndarray::ArrayView1::from(&x[..]));
        for (u, v) in ax.iter().zip(mx.iter()) {
            assert!((u - v).abs() <= 1e-12 * (1.0 + v.abs()));
        }
        let y = seeded_vec(7, 3);
        let aty = op.adjoint(&y).unwrap();
        let mty = m.t().dot(&ndarray::ArrayView1::from(&y[..]));
        for (u, v) in aty.iter().zip(mty.iter()) {
            assert!((u - v).abs() <= 1e-12 * (1.0 + v.abs()));
        }
    }
}
