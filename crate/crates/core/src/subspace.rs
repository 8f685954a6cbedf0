//! Sliding-window eigenimage decomposition.
//!
//! A window is the `N_pix x T` matrix `A` whose column `t` is the row-major
//! crop of frame `t`. Only the left singular vectors of `A` are needed, so the
//! basis comes from the symmetric eigendecomposition of the `N_pix x N_pix`
//! Gram matrix `A Aᵀ = U Λ Uᵀ`, with `σ_i = sqrt(λ_i)`.

use std::cmp::Ordering;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::psf::SteeringVector;
use crate::stack_io::ImageStack;

/// Relative cutoff below which eigenvalues are clamped to zero.
pub const EIGENVALUE_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct WindowStack {
    /// (row, col) of the centre pixel on the coarse grid.
    pub center: (usize, usize),
    pub side: usize,
    /// `N_pix x T`; column `t` is the vectorized crop of frame `t`.
    pub data: DMatrix<f64>,
}

pub fn extract_window(
    stack: &ImageStack,
    center: (usize, usize),
    side: usize,
) -> Result<WindowStack> {
    if side == 0 || side.is_multiple_of(2) {
        return Err(Error::InvalidParameter(format!(
            "window side must be odd, got {side}"
        )));
    }
    let (h, w) = (stack.height(), stack.width());
    let half = side / 2;
    let (row, col) = center;
    if row < half || col < half || row + half >= h || col + half >= w {
        return Err(Error::WindowOutOfBounds {
            center,
            side,
            height: h,
            width: w,
        });
    }
    let (r0, c0) = (row - half, col - half);
    let frames = stack.frames();
    let data = DMatrix::from_fn(side * side, stack.num_frames(), |k, t| {
        frames[[t, r0 + k / side, c0 + k % side]]
    });
    Ok(WindowStack { center, side, data })
}

/// Eigenimages (columns of `eigenimages`, sorted by descending eigenvalue)
/// with their eigenvalues and singular values. `M = min(N_pix, T)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SubspaceDecomposition {
    pub eigenimages: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
    pub singular_values: Vec<f64>,
}

impl SubspaceDecomposition {
    pub fn rank(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn pixel_count(&self) -> usize {
        self.eigenimages.nrows()
    }

    /// Squared projections `g_i²` of every column of `steering` (`N_pix x K`)
    /// onto every eigenimage, as an `M x K` matrix.
    pub fn squared_projections(&self, steering: &DMatrix<f64>) -> DMatrix<f64> {
        let mut p = self.eigenimages.tr_mul(steering);
        p.apply(|v| *v = *v * *v);
        p
    }
}

pub fn decompose(window: &WindowStack) -> SubspaceDecomposition {
    decompose_matrix(&window.data)
}

/// Decomposes an arbitrary `N_pix x T` matrix through its Gram matrix.
///
/// Eigenvalues are re-evaluated as `‖Aᵀ u_i‖²` after the eigensolve: the
/// Rayleigh quotient of `A Aᵀ` on the computed eigenvector has only
/// second-order error, which keeps the small singular values accurate to
/// near machine precision instead of `eps * σ_1² / σ_i`.
pub fn decompose_matrix(a: &DMatrix<f64>) -> SubspaceDecomposition {
    let n_pix = a.nrows();
    let m = n_pix.min(a.ncols());
    let gram = a * a.transpose();
    let eig = SymmetricEigen::new(gram);

    let mut order: Vec<usize> = (0..n_pix).collect();
    order.sort_by(|&i, &j| descending(eig.eigenvalues[i], eig.eigenvalues[j]).then(i.cmp(&j)));
    order.truncate(m);

    let mut basis = DMatrix::<f64>::zeros(n_pix, m);
    for (dst, &src) in order.iter().enumerate() {
        basis.set_column(dst, &eig.eigenvectors.column(src));
    }

    let scores = a.tr_mul(&basis);
    let refined: Vec<f64> = (0..m).map(|i| scores.column(i).norm_squared()).collect();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&i, &j| descending(refined[i], refined[j]).then(i.cmp(&j)));

    let lambda_max = order.first().map(|&i| refined[i]).unwrap_or(0.0);
    let mut eigenimages = DMatrix::<f64>::zeros(n_pix, m);
    let mut eigenvalues = Vec::with_capacity(m);
    for (dst, &src) in order.iter().enumerate() {
        let mut column = basis.column(src).into_owned();
        fix_sign(column.as_mut_slice());
        eigenimages.set_column(dst, &column);
        let lambda = refined[src];
        eigenvalues.push(if lambda < EIGENVALUE_CLAMP * lambda_max || lambda_max == 0.0 {
            0.0
        } else {
            lambda
        });
    }
    let singular_values = eigenvalues.iter().map(|l| l.sqrt()).collect();
    SubspaceDecomposition {
        eigenimages,
        eigenvalues,
        singular_values,
    }
}

fn descending(a: f64, b: f64) -> Ordering {
    b.total_cmp(&a)
}

/// Flips `v` so that its largest-magnitude entry (first one on ties) is
/// positive.
fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v.get(best).is_some_and(|&x| x < 0.0) {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Magnitudes `g_i = |g · u_i|` of one steering vector on every eigenimage.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    pub values: Vec<f64>,
}

impl ProjectionSet {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

pub fn project(g: &SteeringVector, dec: &SubspaceDecomposition) -> Result<ProjectionSet> {
    if g.values.len() != dec.pixel_count() {
        return Err(Error::DimensionMismatch {
            expected: dec.pixel_count(),
            found: g.values.len(),
        });
    }
    let values = dec
        .eigenimages
        .column_iter()
        .map(|u| u.iter().zip(&g.values).map(|(a, b)| a * b).sum::<f64>().abs())
        .collect();
    Ok(ProjectionSet { values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stack_io::Calibration;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cal() -> Calibration {
        Calibration::new(80.0, 665.0, 1.42).unwrap()
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn full_window_is_the_whole_frame() {
        let frames = Array3::from_shape_fn((4, 3, 3), |(t, r, c)| (t * 9 + r * 3 + c) as f64);
        let stack = ImageStack::new(frames, cal()).unwrap();
        let w = extract_window(&stack, (1, 1), 3).unwrap();
        for t in 0..4 {
            for k in 0..9 {
                assert_eq!(w.data[(k, t)], (t * 9 + k) as f64);
            }
        }
    }

    #[test]
    fn out_of_bounds_window_is_rejected() {
        let stack = ImageStack::new(Array3::zeros((2, 64, 64)), cal()).unwrap();
        let err = extract_window(&stack, (0, 0), 7).unwrap_err();
        assert!(err.to_string().contains("window exceeds image"));
        assert!(extract_window(&stack, (60, 61), 7).is_err());
        assert!(extract_window(&stack, (3, 60), 7).is_ok());
    }

    #[test]
    fn window_columns_match_index_arithmetic() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let frames = Array3::from_shape_fn((10, 5, 5), |_| rng.random_range(0.0..100.0));
        let stack = ImageStack::new(frames.clone(), cal()).unwrap();
        let w = extract_window(&stack, (2, 2), 3).unwrap();
        for t in 0..10 {
            let mut k = 0;
            for dr in -1i32..=1 {
                for dc in -1i32..=1 {
                    let r = (2 + dr) as usize;
                    let c = (2 + dc) as usize;
                    assert_eq!(w.data[(k, t)], frames[[t, r, c]]);
                    k += 1;
                }
            }
        }
    }

    #[test]
    fn rank_one_window() {
        let v: Vec<f64> = (1..=9).map(|x| x as f64).collect();
        let t = 6;
        let a = DMatrix::from_fn(9, t, |k, _| v[k]);
        let dec = decompose_matrix(&a);
        let norm2: f64 = v.iter().map(|x| x * x).sum();
        assert!((dec.eigenvalues[0] - t as f64 * norm2).abs() < 1e-9 * t as f64 * norm2);
        for (i, &x) in v.iter().enumerate() {
            assert!((dec.eigenimages[(i, 0)] - x / norm2.sqrt()).abs() < 1e-12);
        }
        assert!(dec.eigenvalues[1..].iter().all(|&l| l == 0.0));
        assert_eq!(dec.rank(), 6);
    }

    #[test]
    fn zero_window_has_zero_spectrum() {
        let dec = decompose_matrix(&DMatrix::zeros(9, 4));
        assert!(dec.eigenvalues.iter().all(|&l| l == 0.0));
        assert!(dec.singular_values.iter().all(|&s| s == 0.0));
    }

    #[test]
    fn singular_values_match_direct_svd() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let a = random_matrix(&mut rng, 9, 20);
        let dec = decompose_matrix(&a);
        let mut svd = a.clone().svd(false, false).singular_values.as_slice().to_vec();
        svd.sort_by(|x, y| y.total_cmp(x));
        for (s, r) in dec.singular_values.iter().zip(svd) {
            assert!((s - r).abs() <= 1e-9 * r);
        }
    }

    #[test]
    fn sigma_squared_is_lambda() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dec = decompose_matrix(&random_matrix(&mut rng, 16, 12));
        for (s, l) in dec.singular_values.iter().zip(&dec.eigenvalues) {
            assert_eq!(*s, l.sqrt());
        }
    }

    #[test]
    fn sign_convention_makes_largest_entry_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dec = decompose_matrix(&random_matrix(&mut rng, 9, 30));
        for u in dec.eigenimages.column_iter() {
            let best = u.iter().fold(0.0_f64, |b, &x| if x.abs() > b.abs() { x } else { b });
            assert!(best > 0.0);
        }
    }

    #[test]
    fn projection_onto_own_basis_vector() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let dec = decompose_matrix(&random_matrix(&mut rng, 9, 30));
        let g = SteeringVector {
            values: dec.eigenimages.column(0).iter().copied().collect(),
            source_position: (0.0, 0.0, 0.0),
        };
        let p = project(&g, &dec).unwrap();
        assert!((p.values[0] - 1.0).abs() < 1e-9);
        assert!(p.values[1..].iter().all(|&v| v < 1e-9));
        let total: f64 = p.values.iter().map(|v| v * v).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn projection_dimension_mismatch() {
        let dec = decompose_matrix(&DMatrix::from_element(9, 3, 1.0));
        let g = SteeringVector {
            values: vec![1.0; 4],
            source_position: (0.0, 0.0, 0.0),
        };
        assert!(matches!(
            project(&g, &dec),
            Err(Error::DimensionMismatch { expected: 9, found: 4 })
        ));
    }

    #[test]
    fn projections_match_dot_products_on_qr_basis() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let q = random_matrix(&mut rng, 9, 9).qr().q();
        let dec = SubspaceDecomposition {
            eigenimages: q.clone(),
            eigenvalues: vec![1.0; 9],
            singular_values: vec![1.0; 9],
        };
        let raw: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let g = SteeringVector {
            values: raw.clone(),
            source_position: (0.0, 0.0, 0.0),
        };
        let p = project(&g, &dec).unwrap();
        for i in 0..9 {
            let mut dot = 0.0;
            for k in 0..9 {
                dot += raw[k] * q[(k, i)];
            }
            assert!((p.values[i] - dot.abs()).abs() < 1e-14);
        }
        let batch = dec.squared_projections(&DMatrix::from_column_slice(9, 1, &raw));
        for i in 0..9 {
            assert!((batch[(i, 0)] - p.values[i].powi(2)).abs() < 1e-14);
        }
    }
}
