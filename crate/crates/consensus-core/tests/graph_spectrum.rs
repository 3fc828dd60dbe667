//! Spectrum oracles for the benchmark graph, frozen from an independent
//! dense-eigensolver computation, plus structural identities of the
//! factorizations.

use approx::assert_abs_diff_eq;
use consensus_core::benchmark::benchmark_graph;
use consensus_core::graph::{
    incidence_factorization, laplacian, mean_removal_projector, spectrum,
};
use nalgebra::DMatrix;

const EIGENVALUES: [f64; 6] = [
    0.0,
    0.83837298144963668,
    1.4892098750070204,
    2.5495020970518634,
    4.6475014687887644,
    5.4754135777027173,
];

#[test]
fn benchmark_laplacian_matches_hand_assembly() {
    let l = laplacian(&benchmark_graph());
    #[rustfmt::skip]
    let expected = DMatrix::from_row_slice(6, 6, &[
         3.5, -1.0, -2.0,  0.0, -0.5,  0.0,
        -1.0,  2.0,  0.0,  0.0,  0.0, -1.0,
        -2.0,  0.0,  3.0,  0.0, -1.0,  0.0,
         0.0,  0.0,  0.0,  1.0, -1.0,  0.0,
        -0.5,  0.0, -1.0, -1.0,  3.5, -1.0,
         0.0, -1.0,  0.0,  0.0, -1.0,  2.0,
    ]);
    assert_eq!(l, expected);
}

#[test]
fn benchmark_eigenvalues_match_frozen_oracle() {
    let spec = spectrum(&laplacian(&benchmark_graph())).unwrap();
    assert_eq!(spec.eigenvalues.len(), 6);
    for (got, want) in spec.eigenvalues.iter().zip(EIGENVALUES) {
        assert_abs_diff_eq!(*got, want, epsilon = 1e-10 * want.max(1.0));
    }
    assert_abs_diff_eq!(spec.lambda2, EIGENVALUES[1], epsilon = 1e-10);
    assert_abs_diff_eq!(spec.lambda_n, EIGENVALUES[5], epsilon = 1e-10);
}

#[test]
fn sampling_gains_match_reference_values() {
    let spec = spectrum(&laplacian(&benchmark_graph())).unwrap();
    let high = (2.0 * 0.02 * spec.lambda_n).sqrt();
    let low = (2.0 * 0.002 * spec.lambda_n).sqrt();
    assert_abs_diff_eq!(high, 0.4680, epsilon = 5e-4);
    assert_abs_diff_eq!(low, 0.1480, epsilon = 5e-4);
}

/// Independent lambda_2 oracle: bisection on the characteristic polynomial
/// evaluated through an LU determinant, no eigensolver involved.
#[test]
fn lambda2_agrees_with_charpoly_bisection() {
    let l = laplacian(&benchmark_graph());
    let det_at = |lam: f64| {
        let shifted = &l - DMatrix::<f64>::identity(6, 6) * lam;
        shifted.determinant()
    };
    // det(L - lambda I) has simple roots; between 0 and lambda_3 the only
    // sign change is at lambda_2.
    let (mut lo, mut hi) = (0.1, 1.2);
    let f_lo = det_at(lo);
    assert!(f_lo * det_at(hi) < 0.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if det_at(mid) * f_lo > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let spec = spectrum(&l).unwrap();
    assert_abs_diff_eq!(0.5 * (lo + hi), spec.lambda2, epsilon = 1e-9);
}

#[test]
fn modal_bases_satisfy_their_identities() {
    let graph = benchmark_graph();
    let l = laplacian(&graph);
    let spec = spectrum(&l).unwrap();
    let n = 6;

    // Full basis diagonalizes L.
    let u = &spec.modal_basis;
    let diag = u.transpose() * &l * u;
    for i in 0..n {
        for j in 0..n {
            let want = if i == j { spec.eigenvalues[i] } else { 0.0 };
            assert_abs_diff_eq!(diag[(i, j)], want, epsilon = 1e-8);
        }
    }
    let gram = u.transpose() * u;
    assert_abs_diff_eq!((gram - DMatrix::<f64>::identity(n, n)).norm(), 0.0, epsilon = 1e-9);

    // Reduced basis: orthonormal columns spanning the disagreement subspace,
    // with Y Y^T equal to the mean-removal projector.
    let y = &spec.reduced_basis;
    assert_eq!(y.ncols(), n - 1);
    let gram = y.transpose() * y;
    assert_abs_diff_eq!(
        (gram - DMatrix::<f64>::identity(n - 1, n - 1)).norm(),
        0.0,
        epsilon = 1e-9
    );
    let projector = y * y.transpose();
    assert_abs_diff_eq!((projector - mean_removal_projector(n)).norm(), 0.0, epsilon = 1e-8);
}

#[test]
fn incidence_factorization_reassembles_laplacian() {
    let graph = benchmark_graph();
    let (d, w) = incidence_factorization(&graph);
    let l = &d * &w * d.transpose();
    assert_abs_diff_eq!((l - laplacian(&graph)).norm(), 0.0, epsilon = 1e-12);
}
