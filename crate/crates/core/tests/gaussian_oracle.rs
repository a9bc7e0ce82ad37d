//! Gaussian log-density vs a dense inverse/determinant oracle.

mod common;

use common::{dense_gaussian_log_pdf, random_spd, random_values, rng_for};
use promptgate::routing::GaussianStats;

#[test]
fn log_pdf_matches_dense_oracle_across_dimensions() {
    let mut rng = rng_for("gaussian/oracle");
    let mut cases = 0;
    for &d in &[1usize, 4, 8, 16] {
        for _ in 0..25 {
            let mu = random_values(&mut rng, d, 2.0);
            let cov = random_spd(&mut rng, d, 1.0);
            let x = random_values(&mut rng, d, 3.0);
            let stats = GaussianStats::from_covariance(mu.clone(), cov.clone(), 0.0).unwrap();
            let got = stats.log_pdf(&x).unwrap();
            let want = dense_gaussian_log_pdf(&x, &mu, &cov);
            assert!(
                (got - want).abs() < 1e-8,
                "d={d}: {got} vs {want} (diff {})",
                (got - want).abs()
            );
            cases += 1;
        }
    }
    assert_eq!(cases, 100);
}

#[test]
fn regularizer_matches_oracle_on_ridged_matrix() {
    let mut rng = rng_for("gaussian/ridge");
    let d = 8;
    let mu = random_values(&mut rng, d, 1.0);
    let cov = random_spd(&mut rng, d, 0.7);
    let lambda = 1e-3;
    let x = random_values(&mut rng, d, 1.5);
    let stats = GaussianStats::from_covariance(mu.clone(), cov.clone(), lambda).unwrap();
    let mut ridged = cov.clone();
    for i in 0..d {
        ridged[i * d + i] += lambda;
    }
    let want = dense_gaussian_log_pdf(&x, &mu, &ridged);
    assert!((stats.log_pdf(&x).unwrap() - want).abs() < 1e-8);
}
