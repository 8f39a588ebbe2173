use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{NarsError, Result};
use crate::matrix::Matrix;
use crate::scalar::Scalar;

/// Per-subgraph, per-hop, per-dimension weights. Stored as a `K × (L+1)·D`
/// matrix so it can share the optimizer with the dense blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct AggCoefficients<T> {
    levels: usize,
    dim: usize,
    pub data: Matrix<T>,
}

impl<T: Scalar> AggCoefficients<T> {
    pub fn zeros(k: usize, levels: usize, dim: usize) -> Self {
        AggCoefficients { levels, dim, data: Matrix::zeros(k, levels * dim) }
    }

    pub fn filled(k: usize, levels: usize, dim: usize, v: T) -> Self {
        AggCoefficients { levels, dim, data: Matrix::filled(k, levels * dim, v) }
    }

    pub fn from_matrix(levels: usize, dim: usize, data: Matrix<T>) -> Result<Self> {
        if data.cols() != levels * dim {
            return Err(NarsError::Dimension(format!(
                "coefficient matrix has {} columns, expected {levels}x{dim}",
                data.cols()
            )));
        }
        if !data.is_finite() {
            return Err(NarsError::NonFinite("aggregation coefficients".into()));
        }
        Ok(AggCoefficients { levels, dim, data })
    }

    /// Uniform in (0,1), scaled by 1/K so the initial aggregation is an
    /// average of the subgraphs.
    pub fn random(k: usize, levels: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let scale = 1.0 / k.max(1) as f64;
        let data = Matrix::from_fn(k, levels * dim, |_, _| T::of(rng.gen::<f64>() * scale));
        AggCoefficients { levels, dim, data }
    }

    pub fn k(&self) -> usize {
        self.data.rows()
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.as_slice().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize, l: usize) -> &[T] {
        &self.data.row(i)[l * self.dim..(l + 1) * self.dim]
    }

    pub fn get_mut(&mut self, i: usize, l: usize) -> &mut [T] {
        let d = self.dim;
        &mut self.data.row_mut(i)[l * d..(l + 1) * d]
    }

    pub fn cast<U: Scalar>(&self) -> AggCoefficients<U> {
        AggCoefficients { levels: self.levels, dim: self.dim, data: self.data.cast() }
    }
}

fn check_shapes<T: Scalar>(hops: &[Vec<Matrix<T>>], a: &AggCoefficients<T>) -> Result<(usize, usize)> {
    if hops.len() != a.k() {
        return Err(NarsError::Dimension(format!("{} hop tensors for {} coefficient rows", hops.len(), a.k())));
    }
    let Some(first) = hops.first().and_then(|h| h.first()) else {
        return Err(NarsError::Dimension("no hop tensors to aggregate".into()));
    };
    let (rows, dim) = first.shape();
    for (i, h) in hops.iter().enumerate() {
        if h.len() != a.levels() {
            return Err(NarsError::Dimension(format!("tensor {i} has {} hops, expected {}", h.len(), a.levels())));
        }
        if h.iter().any(|m| m.shape() != (rows, dim)) || dim != a.dim() {
            return Err(NarsError::Dimension(format!("tensor {i} does not match {rows}x{}", a.dim())));
        }
    }
    Ok((rows, dim))
}

/// `out[l] = Σ_i a[i][l] ⊙ hops[i][l]`. The K products for each entry are
/// summed in ascending order, so reordering the subgraphs together with the
/// rows of `a` leaves the result bitwise unchanged.
pub fn aggregate<T: Scalar>(hops: &[Vec<Matrix<T>>], a: &AggCoefficients<T>) -> Result<Vec<Matrix<T>>> {
    let (rows, dim) = check_shapes(hops, a)?;
    let k = a.k();
    let mut out = Vec::with_capacity(a.levels());
    for l in 0..a.levels() {
        let mut m = Matrix::zeros(rows, dim);
        if dim > 0 {
            m.as_mut_slice().par_chunks_mut(dim).enumerate().for_each_init(
                || vec![T::zero(); k],
                |terms, (r, row)| {
                    for (j, dst) in row.iter_mut().enumerate() {
                        let e = r * dim + j;
                        for i in 0..k {
                            terms[i] = a.get(i, l)[j] * hops[i][l].as_slice()[e];
                        }
                        // two-term sums already commute exactly
                        if k > 2 {
                            terms.sort_unstable_by(|x, y| x.cmp_total(y));
                        }
                        *dst = terms.iter().fold(T::zero(), |s, &t| s + t);
                    }
                },
            );
        }
        out.push(m);
    }
    Ok(out)
}

/// `acc += w ⊙ h` with `w` broadcast over rows.
pub fn accumulate_weighted<T: Scalar>(acc: &mut Matrix<T>, h: &Matrix<T>, w: &[T]) {
    let d = w.len();
    for (dst, src) in acc.as_mut_slice().chunks_exact_mut(d).zip(h.as_slice().chunks_exact(d)) {
        for j in 0..d {
            dst[j] += w[j] * src[j];
        }
    }
}

/// `Σ_v h[v] ⊙ dx[v]` per column.
pub fn weighted_grad<T: Scalar>(h: &Matrix<T>, dx: &Matrix<T>, out: &mut [T]) {
    let d = out.len();
    for (a, b) in h.as_slice().chunks_exact(d).zip(dx.as_slice().chunks_exact(d)) {
        for j in 0..d {
            out[j] += a[j] * b[j];
        }
    }
}

/// Gradient of a loss with respect to `a`, given its gradient `dx` with
/// respect to the aggregated features.
pub fn aggregate_backward<T: Scalar>(hops: &[Vec<Matrix<T>>], dx: &[Matrix<T>], a: &AggCoefficients<T>) -> Result<AggCoefficients<T>> {
    check_shapes(hops, a)?;
    let mut g = AggCoefficients::zeros(a.k(), a.levels(), a.dim());
    for (i, tensor) in hops.iter().enumerate() {
        for (l, h) in tensor.iter().enumerate() {
            weighted_grad(h, &dx[l], g.get_mut(i, l));
        }
    }
    Ok(g)
}
