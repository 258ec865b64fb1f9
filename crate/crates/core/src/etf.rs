//! Simplex equiangular tight frames.
//!
//! A simplex ETF on `C` classes in `q ≥ C` dimensions is
//! `V = √(C/(C−1)) · U · (I_C − 11ᵀ/C)` for any `U` with orthonormal columns.
//! Its columns are unit vectors whose pairwise inner products all equal
//! `−1/(C−1)`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::numerics::tensor::{dot, norm, Tensor};

/// Target Gram entry between classes `i` and `j` (0-based) of a `C`-class ETF.
pub fn rho(i: usize, j: usize, classes: usize) -> Result<f64> {
    if classes < 2 {
        return Err(Error::Domain(format!(
            "an ETF needs at least 2 classes, got {classes}"
        )));
    }
    if i >= classes || j >= classes {
        return Err(Error::Domain(format!(
            "class pair ({i}, {j}) out of range for {classes} classes"
        )));
    }
    let c = classes as f64;
    let delta = if i == j { 1.0 } else { 0.0 };
    Ok(c / (c - 1.0) * delta - 1.0 / (c - 1.0))
}

/// The `C×C` target Gram matrix.
pub fn rho_matrix(classes: usize) -> Result<Tensor> {
    let mut data = Vec::with_capacity(classes * classes);
    for i in 0..classes {
        for j in 0..classes {
            data.push(rho(i, j, classes)?);
        }
    }
    Tensor::matrix(classes, classes, data)
}

/// Optimal inter-class angle in degrees, `arccos(−1/(C−1))`.
pub fn optimal_angle_deg(classes: usize) -> Result<f64> {
    Ok(rho(0, 1, classes)?.acos().to_degrees())
}

#[derive(Debug, Clone)]
pub struct EtfFrame {
    /// `q×C`, one vertex per column.
    pub vertices: Tensor,
    /// `q×C` with orthonormal columns.
    pub rotation: Tensor,
    pub classes: usize,
    pub dim: usize,
}

impl EtfFrame {
    /// Vertex of class `c` as a plain vector.
    pub fn vertex(&self, c: usize) -> Vec<f64> {
        (0..self.dim).map(|r| self.vertices.get(r, c)).collect()
    }

    /// Vertices stacked class-by-row (`C×q`).
    pub fn vertex_rows(&self) -> Tensor {
        self.vertices.transpose()
    }

    pub fn gram(&self) -> Tensor {
        self.vertices
            .transpose()
            .matmul(&self.vertices)
            .expect("square by construction")
    }
}

/// Seeded `rows×cols` matrix with orthonormal columns (Gaussian draw, then
/// modified Gram–Schmidt with one re-orthogonalization pass).
pub fn random_orthonormal(rows: usize, cols: usize, seed: u64) -> Result<Tensor> {
    if cols > rows {
        return Err(Error::dim(
            "random_orthonormal",
            format!("cannot fit {cols} orthonormal columns in {rows} dimensions"),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut columns: Vec<Vec<f64>> = Vec::with_capacity(cols);
    while columns.len() < cols {
        let mut v: Vec<f64> = (0..rows).map(|_| StandardNormal.sample(&mut rng)).collect();
        for _ in 0..2 {
            for q in &columns {
                let p = dot(&v, q);
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= p * b);
            }
        }
        let n = norm(&v);
        // a draw that is numerically in the span of previous columns is redrawn
        if n < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|a| *a /= n);
        columns.push(v);
    }
    let mut data = vec![0.0; rows * cols];
    for (j, col) in columns.iter().enumerate() {
        for (i, &x) in col.iter().enumerate() {
            data[i * cols + j] = x;
        }
    }
    Tensor::matrix(rows, cols, data)
}

pub fn make_etf(dim: usize, classes: usize, rotation_seed: u64) -> Result<EtfFrame> {
    if classes < 2 {
        return Err(Error::Domain(format!(
            "an ETF needs at least 2 classes, got {classes}"
        )));
    }
    if dim < classes {
        return Err(Error::dim(
            "make_etf",
            format!("dimension {dim} is smaller than class count {classes}"),
        ));
    }
    let u = random_orthonormal(dim, classes, rotation_seed)?;
    let c = classes as f64;
    let centering = Tensor::identity(classes).sub(&Tensor::full(&[classes, classes], 1.0 / c))?;
    let vertices = u.matmul(&centering)?.scale((c / (c - 1.0)).sqrt());
    Ok(EtfFrame {
        vertices,
        rotation: u,
        classes,
        dim,
    })
}

/// Largest entrywise gap between the column-normalized Gram of `v` (`q×C`)
/// and the ETF target.
pub fn etf_deviation(v: &Tensor) -> Result<f64> {
    let cols = v.cols();
    let rows = v.rows();
    let unit: Vec<Vec<f64>> = (0..cols)
        .map(|c| {
            let col: Vec<f64> = (0..rows).map(|r| v.get(r, c)).collect();
            let n = norm(&col);
            if n == 0.0 {
                return Err(Error::Degenerate(format!("column {c} is zero")));
            }
            Ok(col.into_iter().map(|x| x / n).collect())
        })
        .collect::<Result<_>>()?;
    let mut worst = 0.0f64;
    for i in 0..cols {
        for j in 0..cols {
            let gap = (dot(&unit[i], &unit[j]) - rho(i, j, cols)?).abs();
            worst = worst.max(gap);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rho_values() {
        for c in 2..12 {
            assert_eq!(rho(3 % c, 3 % c, c).unwrap(), 1.0);
        }
        assert!((rho(0, 1, 10).unwrap() + 1.0 / 9.0).abs() < 1e-15);
        assert!((optimal_angle_deg(10).unwrap() - 96.379).abs() < 1e-3);
        assert_eq!(rho(0, 1, 2).unwrap(), -1.0);
        assert!(matches!(rho(0, 0, 1), Err(Error::Domain(_))));
    }

    #[test]
    fn two_class_frame_is_antipodal() {
        let f = make_etf(2, 2, 7).unwrap();
        let g = f.gram();
        assert!((g.get(0, 1) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn four_class_gram() {
        let f = make_etf(8, 4, 3).unwrap();
        let g = f.gram();
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 1.0 } else { -1.0 / 3.0 };
                assert!((g.get(i, j) - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn seeded_frames_are_bit_identical() {
        let a = make_etf(12, 5, 99).unwrap();
        let b = make_etf(12, 5, 99).unwrap();
        assert_eq!(a.vertices.data(), b.vertices.data());
    }

    #[test]
    fn low_dimension_rejected() {
        assert!(matches!(make_etf(3, 4, 0), Err(Error::Dimension { .. })));
    }

    #[test]
    fn deviation_of_orthonormal_basis() {
        let dev = etf_deviation(&Tensor::identity(4)).unwrap();
        assert!((dev - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn deviation_of_equal_columns() {
        let v = Tensor::ones(&[3, 5]);
        let dev = etf_deviation(&v).unwrap();
        assert!((dev - 5.0 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn zero_column_is_degenerate() {
        let v = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(matches!(etf_deviation(&v), Err(Error::Degenerate(_))));
    }
}
