use ndarray::{Array2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::corpus::TokenSeq;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Vocabulary embedding table whose rows are kept at L2 norm `sqrt(d)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable<T> {
    matrix: Array2<T>,
}

impl<T: Scalar> EmbeddingTable<T> {
    /// Wraps `matrix` and normalizes its rows.
    pub fn new(matrix: Array2<T>) -> Result<Self> {
        let mut table = Self { matrix };
        table.normalize()?;
        Ok(table)
    }

    /// Rows drawn from a standard normal, then normalized.
    pub fn random(vocab_size: usize, dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let matrix = Array2::from_shape_simple_fn((vocab_size, dim), || {
            T::of(rng.sample::<f64, _>(StandardNormal))
        });
        Self::new(matrix)
    }

    pub fn vocab_size(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn matrix(&self) -> &Array2<T> {
        &self.matrix
    }

    pub(crate) fn matrix_mut(&mut self) -> &mut Array2<T> {
        &mut self.matrix
    }

    pub fn target_norm(&self) -> f64 {
        (self.dim() as f64).sqrt()
    }

    /// Rescales every row to norm `sqrt(d)`, preserving direction.
    ///
    /// The norm and scale factor are computed in `f64` so that `f32` tables
    /// still land within 1e-6 of the target. Rows already on target to within
    /// a few ulps are left bit-identical, which makes the operation exactly
    /// idempotent.
    pub fn normalize(&mut self) -> Result<()> {
        let target = self.target_norm();
        for (i, mut row) in self.matrix.axis_iter_mut(Axis(0)).enumerate() {
            let norm = row.iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt();
            if norm == 0.0 || !norm.is_finite() {
                return Err(Error::DegenerateEmbedding(i));
            }
            if (norm / target - 1.0).abs() <= 4.0 * T::epsilon().f64() {
                continue;
            }
            let scale = target / norm;
            row.mapv_inplace(|v| T::of(v.f64() * scale));
        }
        Ok(())
    }

    pub fn normalized(mut self) -> Result<Self> {
        self.normalize()?;
        Ok(self)
    }

    /// Row `i` of the output is the embedding of token `i` of `tokens`.
    pub fn embed(&self, tokens: &TokenSeq) -> Result<Array2<T>> {
        tokens.check(self.vocab_size())?;
        let mut out = Array2::zeros((tokens.len(), self.dim()));
        for (mut row, &id) in out.axis_iter_mut(Axis(0)).zip(tokens.ids()) {
            row.assign(&self.matrix.row(id as usize));
        }
        Ok(out)
    }
}

/// L2 norm of a row, accumulated in `f64`.
pub fn row_norm<'a, T: Scalar>(row: impl IntoIterator<Item = &'a T>) -> f64 {
    row.into_iter().map(|v| v.f64() * v.f64()).sum::<f64>().sqrt()
}
