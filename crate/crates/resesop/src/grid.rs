//! Image-space and measurement-space containers.
//!
//! All flat vectors store interleaved `(re, im)` pairs when complex, so a
//! single `f64` layout serves both CT (real) and MRI (complex) data. Lengths
//! in operator contracts always count *real* scalars of that layout.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::ops::Range;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScalarKind {
    Real,
    Complex,
}

impl ScalarKind {
    /// Number of `f64` slots per scalar.
    pub fn stride(self) -> usize {
        match self {
            ScalarKind::Real => 1,
            ScalarKind::Complex => 2,
        }
    }
}

/// A rectangular image with row-major values and a physical extent.
///
/// `field_of_view` is the physical side length spanned by `width` pixels;
/// the default of 2.0 puts the grid on `[-1, 1]^2`. Pixel centers sit at
/// `(-fov/2 + (j + 0.5) * pixel_size)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageGrid {
    pub width: usize,
    pub height: usize,
    pub field_of_view: f64,
    pub kind: ScalarKind,
    pub data: Vec<f64>,
}

impl ImageGrid {
    pub fn zeros(width: usize, height: usize, kind: ScalarKind) -> Self {
        ImageGrid {
            width,
            height,
            field_of_view: 2.0,
            kind,
            data: vec![0.0; width * height * kind.stride()],
        }
    }

    pub fn real(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::ShapeMismatch {
                expected: width * height,
                got: data.len(),
                context: "real image data",
            });
        }
        Ok(ImageGrid {
            width,
            height,
            field_of_view: 2.0,
            kind: ScalarKind::Real,
            data,
        })
    }

    pub fn complex(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != 2 * width * height {
            return Err(Error::ShapeMismatch {
                expected: 2 * width * height,
                got: data.len(),
                context: "interleaved complex image data",
            });
        }
        Ok(ImageGrid {
            width,
            height,
            field_of_view: 2.0,
            kind: ScalarKind::Complex,
            data,
        })
    }

    pub fn with_field_of_view(mut self, fov: f64) -> Self {
        self.field_of_view = fov;
        self
    }

    /// Physical size of one pixel (square pixels assumed).
    pub fn pixel_size(&self) -> f64 {
        self.field_of_view / self.width as f64
    }

    /// Number of scalars (pixels), independent of real/complex layout.
    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Length of the flat `f64` representation.
    pub fn flat_len(&self) -> usize {
        self.data.len()
    }

    /// Real value at (row, col); panics for complex grids.
    pub fn at(&self, row: usize, col: usize) -> f64 {
        assert_eq!(self.kind, ScalarKind::Real);
        self.data[row * self.width + col]
    }

    /// Per-pixel magnitudes: identity for real grids, |z| for complex ones.
    pub fn magnitude(&self) -> Vec<f64> {
        match self.kind {
            ScalarKind::Real => self.data.clone(),
            ScalarKind::Complex => self
                .data
                .chunks_exact(2)
                .map(|z| (z[0] * z[0] + z[1] * z[1]).sqrt())
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Disjoint contiguous row ranges tiling a measurement vector.
///
/// Ranges are expressed in flat `f64` indices (so complex rows occupy two
/// slots each); they must be ascending and cover the vector exactly.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubproblemPartition {
    blocks: Vec<Range<usize>>,
}

impl SubproblemPartition {
    pub fn new(blocks: Vec<Range<usize>>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::invalid("partition needs at least one block"));
        }
        let mut cursor = 0;
        for (i, b) in blocks.iter().enumerate() {
            if b.start != cursor {
                return Err(Error::invalid(format!(
                    "partition block {i} starts at {} but previous block ends at {cursor}",
                    b.start
                )));
            }
            if b.end <= b.start {
                return Err(Error::invalid(format!("partition block {i} is empty")));
            }
            cursor = b.end;
        }
        Ok(SubproblemPartition { blocks })
    }

    /// Single block covering `len` rows.
    pub fn trivial(len: usize) -> Self {
        SubproblemPartition {
            blocks: vec![0..len],
        }
    }

    /// Split `len` rows into `count` near-equal contiguous blocks.
    pub fn uniform(len: usize, count: usize) -> Result<Self> {
        if count == 0 || count > len {
            return Err(Error::invalid(format!(
                "cannot split {len} rows into {count} blocks"
            )));
        }
        let base = len / count;
        let rem = len % count;
        let mut blocks = Vec::with_capacity(count);
        let mut start = 0;
        for i in 0..count {
            let sz = base + usize::from(i < rem);
            blocks.push(start..start + sz);
            start += sz;
        }
        Ok(SubproblemPartition { blocks })
    }

    /// Blocks given by their lengths, in order.
    pub fn from_lengths(lengths: &[usize]) -> Result<Self> {
        let mut blocks = Vec::with_capacity(lengths.len());
        let mut start = 0;
        for &l in lengths {
            blocks.push(start..start + l);
            start += l;
        }
        Self::new(blocks)
    }

    pub fn count(&self) -> usize {
        self.blocks.len()
    }

    pub fn block(&self, i: usize) -> Range<usize> {
        self.blocks[i].clone()
    }

    pub fn blocks(&self) -> &[Range<usize>] {
        &self.blocks
    }

    /// Total number of rows covered.
    pub fn total_len(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.end)
    }

    /// Append one block of `len` rows at the end.
    pub fn extended_by(&self, len: usize) -> Self {
        let mut blocks = self.blocks.clone();
        let start = self.total_len();
        blocks.push(start..start + len);
        SubproblemPartition { blocks }
    }
}

/// Flat measurement data together with its subproblem partition.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementVector {
    pub values: Vec<f64>,
    pub partition: SubproblemPartition,
}

impl MeasurementVector {
    pub fn new(values: Vec<f64>, partition: SubproblemPartition) -> Result<Self> {
        if partition.total_len() != values.len() {
            return Err(Error::ShapeMismatch {
                expected: partition.total_len(),
                got: values.len(),
                context: "measurement vector vs partition",
            });
        }
        Ok(MeasurementVector { values, partition })
    }

    pub fn single_block(values: Vec<f64>) -> Self {
        let partition = SubproblemPartition::trivial(values.len());
        MeasurementVector { values, partition }
    }

    pub fn block(&self, i: usize) -> &[f64] {
        &self.values[self.partition.block(i)]
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        crate::vec_ops::norm(&self.values)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_must_tile() {
        assert!(SubproblemPartition::new(vec![0..3, 3..7]).is_ok());
        assert!(SubproblemPartition::new(vec![0..3, 4..7]).is_err());
        assert!(SubproblemPartition::new(vec![1..3]).is_err());
        assert!(SubproblemPartition::new(vec![0..3, 3..3]).is_err());
        assert!(SubproblemPartition::new(vec![]).is_err());
    }

    #[test]
    fn uniform_partition_covers_everything() {
        let p = SubproblemPartition::uniform(10, 3).unwrap();
        assert_eq!(p.count(), 3);
        assert_eq!(p.total_len(), 10);
        assert_eq!(p.block(0), 0..4);
        assert_eq!(p.block(2), 7..10);
    }

    #[test]
    fn magnitude_of_complex_grid() {
        let g = ImageGrid::complex(1, 2, vec![3.0, 4.0, 0.0, -2.0]).unwrap();
        assert_eq!(g.magnitude(), vec![5.0, 2.0]);
    }

    #[test]
    fn measurement_checks_partition_length() {
        let p = SubproblemPartition::uniform(4, 2).unwrap();
        assert!(MeasurementVector::new(vec![0.0; 4], p.clone()).is_ok());
        assert!(MeasurementVector::new(vec![0.0; 5], p).is_err());
    }
}
