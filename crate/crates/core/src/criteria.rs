//! Whitening criteria and their stochastic update rules.
//!
//! Both criteria measure how far an output covariance `S = W Σ W^T` is from
//! the identity:
//!
//! * KL: `½ (tr S − ln det S − d)`, the KL divergence between zero-mean
//!   Gaussians with covariances `S` and `I`.
//! * Frobenius: `½ ||I − S||_F`.
//!
//! The KL update is the relative gradient `(S − I) W`; the Frobenius update is
//! the plain gradient `(S − I) W Σ / ||I − S||_F`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::fmt::g17;
use crate::matrix::{frobenius_norm, ln_det_spd, matmul, matmul_bt, symmetrize, Matrix, OpCounter};

/// Below this residual norm the Frobenius update is treated as converged and
/// returns zero instead of dividing by a vanishing norm.
pub const FRO_GUARD: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Criterion {
    Kl,
    Fro,
}

impl Criterion {
    pub const ALL: [Criterion; 2] = [Criterion::Kl, Criterion::Fro];

    pub fn as_str(self) -> &'static str {
        match self {
            Criterion::Kl => "kl",
            Criterion::Fro => "fro",
        }
    }

    /// Criterion value of an output covariance.
    pub fn eval(self, sigma_y: &Matrix) -> Result<f64> {
        match self {
            Criterion::Kl => eval_ckl(sigma_y),
            Criterion::Fro => eval_cfro(sigma_y),
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "kl" => Ok(Criterion::Kl),
            "fro" | "frobenius" => Ok(Criterion::Fro),
            other => Err(Error::invalid(format!("unknown criterion {other:?}"))),
        }
    }
}

fn check_square(op: &'static str, m: &Matrix) -> Result<()> {
    if m.is_square() {
        Ok(())
    } else {
        Err(Error::shape(op, m.shape(), m.shape()))
    }
}

pub fn eval_ckl(sigma_y: &Matrix) -> Result<f64> {
    check_square("eval_ckl", sigma_y)?;
    let d = sigma_y.rows();
    for i in 0..d {
        for j in (i + 1)..d {
            if (sigma_y[(i, j)] - sigma_y[(j, i)]).abs() > 1e-10 {
                return Err(Error::invalid(format!("eval_ckl: input not symmetric at ({i}, {j})")));
            }
        }
    }
    let trace: f64 = sigma_y.diag().iter().sum();
    let ln_det = ln_det_spd(sigma_y)?;
    Ok(0.5 * (trace - ln_det - d as f64))
}

pub fn eval_cfro(sigma_y: &Matrix) -> Result<f64> {
    check_square("eval_cfro", sigma_y)?;
    Ok(0.5 * frobenius_norm(&sigma_y.minus_identity()?))
}

/// Update direction `ΔW` for one step `W ← W − α ΔW`.
pub fn delta_w(criterion: Criterion, w: &Matrix, sigma: &Matrix) -> Result<Matrix> {
    delta_w_counted(criterion, w, sigma, None)
}

/// [`delta_w`] with the three `d x d` products recorded on `counter`.
pub fn delta_w_counted(
    criterion: Criterion,
    w: &Matrix,
    sigma: &Matrix,
    mut counter: Option<&mut OpCounter>,
) -> Result<Matrix> {
    check_square("delta_w", w)?;
    if w.shape() != sigma.shape() {
        return Err(Error::shape("delta_w", w.shape(), sigma.shape()));
    }
    let w_sigma = matmul(w, sigma, counter.as_deref_mut())?;
    let residual = matmul_bt(&w_sigma, w, counter.as_deref_mut())?.minus_identity()?;
    match criterion {
        Criterion::Kl => matmul(&residual, w, counter),
        Criterion::Fro => {
            let step = matmul(&residual, &w_sigma, counter)?;
            let norm = frobenius_norm(&residual);
            if norm < FRO_GUARD {
                Ok(Matrix::zeros(w.rows(), w.cols()))
            } else {
                Ok(step.scale(1.0 / norm))
            }
        }
    }
}

fn asymmetry(w: &Matrix) -> f64 {
    let d = w.rows();
    (0..d)
        .flat_map(|i| (0..i).map(move |j| (i, j)))
        .map(|(i, j)| (w[(i, j)] - w[(j, i)]).abs())
        .fold(0.0, f64::max)
}

/// `||W Σ W^T − I||_F`.
pub fn whitening_distance(w: &Matrix, sigma: &Matrix) -> Result<f64> {
    let sy = matmul_bt(&matmul(w, sigma, None)?, w, None)?;
    Ok(frobenius_norm(&sy.minus_identity()?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct WhitenIterReport {
    pub iterations: usize,
    pub final_distance: f64,
    pub converged: bool,
    /// `(iteration, ||W Σ W^T − I||_F)`, starting with iteration 0.
    pub trajectory: Vec<(usize, f64)>,
    /// Largest `max |W − W^T|` seen after any step.
    pub max_asymmetry: f64,
}

impl WhitenIterReport {
    /// CSV with header `iter,fro_distance`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "iter,fro_distance")?;
        for &(it, dist) in &self.trajectory {
            writeln!(w, "{it},{}", g17(dist))?;
        }
        Ok(())
    }
}

/// Iterates `W ← sym(W − α ΔW)` from `W = I` on a fixed unit-diagonal
/// covariance until `||W Σ W^T − I||_F < tol` or `max_iters` steps.
pub fn whiten_iterate(
    sigma: &Matrix,
    criterion: Criterion,
    alpha: f64,
    max_iters: usize,
    tol: f64,
) -> Result<(Matrix, WhitenIterReport)> {
    check_square("whiten_iterate", sigma)?;
    if !(alpha > 0.0) || !(tol > 0.0) {
        return Err(Error::invalid(format!("alpha and tol must be positive (alpha={alpha}, tol={tol})")));
    }
    let d = sigma.rows();
    for i in 0..d {
        if (sigma[(i, i)] - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!(
                "whiten_iterate expects a unit-diagonal covariance, entry ({i}, {i}) is {}",
                sigma[(i, i)]
            )));
        }
        for j in (i + 1)..d {
            if (sigma[(i, j)] - sigma[(j, i)]).abs() > 1e-12 {
                return Err(Error::invalid("whiten_iterate expects a symmetric covariance"));
            }
        }
    }

    let mut w = Matrix::identity(d);
    let mut distance = whitening_distance(&w, sigma)?;
    let mut trajectory = vec![(0, distance)];
    let mut iterations = 0;
    let mut max_asymmetry = 0.0f64;
    while distance >= tol && iterations < max_iters {
        iterations += 1;
        let delta = delta_w(criterion, &w, sigma)?;
        w.sub_scaled_assign(alpha, &delta)?;
        w = symmetrize(&w)?;
        max_asymmetry = max_asymmetry.max(asymmetry(&w));
        distance = whitening_distance(&w, sigma)?;
        if !distance.is_finite() || !w.is_finite() {
            return Err(Error::Divergence { iteration: iterations });
        }
        trajectory.push((iterations, distance));
    }
    let report = WhitenIterReport {
        iterations,
        final_distance: distance,
        converged: distance < tol,
        trajectory,
        max_asymmetry,
    };
    Ok((w, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_xoshiro::Xoshiro256PlusPlus;
    use swbn_oracle::{central_gradient, naive_matmul, relative_error, transpose, zca_matrix};

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn rho2(r: f64) -> Matrix {
        Matrix::from_rows(&[[1.0, r], [r, 1.0]])
    }

    #[test]
    fn ckl_values() {
        assert_eq!(eval_ckl(&Matrix::identity(2)).unwrap(), 0.0);
        assert!(close(eval_ckl(&Matrix::from_diag(&[2.0, 0.5])).unwrap(), 0.25, 1e-15));
        let e = std::f64::consts::E;
        assert!(close(eval_ckl(&Matrix::from_diag(&[e, e])).unwrap(), e - 2.0, 1e-14));
    }

    #[test]
    fn ckl_rejects_indefinite() {
        assert!(matches!(
            eval_ckl(&Matrix::from_diag(&[1.0, -1.0])),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn cfro_values() {
        assert_eq!(eval_cfro(&Matrix::identity(5)).unwrap(), 0.0);
        assert!(close(eval_cfro(&Matrix::from_diag(&[2.0, 0.5])).unwrap(), 0.5 * 1.25f64.sqrt(), 1e-15));
        assert!(close(eval_cfro(&rho2(0.5)).unwrap(), 0.5 * 0.5f64.sqrt(), 1e-15));
    }

    #[test]
    fn delta_w_cases() {
        for c in Criterion::ALL {
            let z = delta_w(c, &Matrix::identity(3), &Matrix::identity(3)).unwrap();
            assert_eq!(z, Matrix::zeros(3, 3));
        }
        let kl = delta_w(Criterion::Kl, &Matrix::identity(2), &rho2(0.5)).unwrap();
        assert_eq!(kl, Matrix::from_rows(&[[0.0, 0.5], [0.5, 0.0]]));

        let fro = delta_w(Criterion::Fro, &Matrix::identity(2), &rho2(0.5)).unwrap();
        let k = 0.5 * 2f64.sqrt();
        let want = [0.25 / k, 0.5 / k, 0.5 / k, 0.25 / k];
        for (a, b) in fro.as_slice().iter().zip(want) {
            assert!(close(*a, b, 1e-15));
        }
        assert!(close(fro[(0, 0)], 0.353553, 1e-6) && close(fro[(0, 1)], 0.707107, 1e-6));
    }

    #[test]
    fn delta_w_counts_three_products() {
        for c in Criterion::ALL {
            let mut counter = OpCounter::new();
            delta_w_counted(c, &Matrix::identity(5), &rho_n(5, 0.3), Some(&mut counter)).unwrap();
            assert_eq!(counter.matmul_mults(), 3 * 125);
        }
    }

    fn rho_n(d: usize, r: f64) -> Matrix {
        Matrix::from_fn(d, d, |i, j| if i == j { 1.0 } else { r })
    }

    #[test]
    fn identity_covariance_converges_immediately() {
        for c in Criterion::ALL {
            let (w, rep) = whiten_iterate(&Matrix::identity(3), c, 0.3, 100, 1e-6).unwrap();
            assert_eq!(w, Matrix::identity(3));
            assert!(rep.converged);
            assert_eq!(rep.iterations, 0);
            assert_eq!(rep.trajectory, vec![(0, 0.0)]);
        }
    }

    #[test]
    fn converges_to_zca_on_correlated_pair() {
        let sigma = rho2(0.9);
        let zca = zca_matrix(sigma.as_slice(), 2);
        for c in Criterion::ALL {
            let (w, rep) = whiten_iterate(&sigma, c, 0.01, 10_000, 1e-3).unwrap();
            assert!(rep.converged, "{c}: {rep:?}");
            assert!(rep.final_distance < 1e-3);
            assert_eq!(rep.trajectory.len(), rep.iterations + 1);
            for (a, b) in w.as_slice().iter().zip(&zca) {
                assert!(close(*a, *b, 1e-2), "{c}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn rejects_non_correlation_input() {
        let err = whiten_iterate(&Matrix::from_diag(&[2.0, 1.0]), Criterion::Kl, 0.1, 10, 1e-3);
        assert!(err.is_err());
        assert!(whiten_iterate(&rho2(0.2), Criterion::Kl, 0.0, 10, 1e-3).is_err());
    }

    #[test]
    fn reports_divergence_with_iteration() {
        let err = whiten_iterate(&rho2(0.9), Criterion::Kl, 50.0, 1000, 1e-3).unwrap_err();
        assert!(matches!(err, Error::Divergence { iteration } if iteration >= 1), "{err}");
    }

    #[test]
    fn fro_non_convex_scalar_case() {
        // With Σ = 1, both w = 1 and w = -1 are global minima of |1 - w²|.
        let one = Matrix::identity(1);
        for w in [1.0, -1.0] {
            let sy = Matrix::column(&[w * w]);
            assert_eq!(eval_cfro(&sy).unwrap(), 0.0);
            assert_eq!(delta_w(Criterion::Fro, &Matrix::column(&[w]), &one).unwrap()[(0, 0)], 0.0);
        }
        let mid = eval_cfro(&Matrix::column(&[0.0])).unwrap();
        assert!(mid > 0.0);
    }

    fn random_spd(d: usize, rng: &mut Xoshiro256PlusPlus) -> Vec<f64> {
        let a: Vec<f64> = (0..d * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut s = naive_matmul(&a, &transpose(&a, d, d), d, d, d);
        for i in 0..d {
            s[i * d + i] += 0.5;
        }
        s
    }

    fn random_near_identity_sym(d: usize, rng: &mut Xoshiro256PlusPlus) -> Vec<f64> {
        let mut w = vec![0.0; d * d];
        for i in 0..d {
            for j in i..d {
                let v = rng.random_range(-0.1..0.1);
                w[i * d + j] = v;
                w[j * d + i] = v;
            }
            w[i * d + i] += 1.0;
        }
        w
    }

    fn criterion_of_w(c: Criterion, w: &[f64], sigma: &[f64], d: usize) -> f64 {
        let ws = naive_matmul(w, sigma, d, d, d);
        let sy = naive_matmul(&ws, &transpose(w, d, d), d, d, d);
        c.eval(&Matrix::from_raw(d, d, symmetric_part(&sy, d))).unwrap()
    }

    fn symmetric_part(a: &[f64], d: usize) -> Vec<f64> {
        let mut out = a.to_vec();
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] = 0.5 * (a[i * d + j] + a[j * d + i]);
            }
        }
        out
    }

    #[test]
    fn kl_update_is_relative_gradient() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(7);
        for d in [2, 3, 5] {
            let sigma = random_spd(d, &mut rng);
            let w = random_near_identity_sym(d, &mut rng);
            let g = central_gradient(&w, 1e-6, |w| criterion_of_w(Criterion::Kl, w, &sigma, d));
            let want = naive_matmul(&g, &naive_matmul(&transpose(&w, d, d), &w, d, d, d), d, d, d);
            let got = delta_w(Criterion::Kl, &Matrix::from_raw(d, d, w.clone()), &Matrix::from_raw(d, d, sigma))
                .unwrap();
            assert!(relative_error(got.as_slice(), &want, 1e-12) < 1e-4);
        }
    }

    #[test]
    fn fro_update_is_gradient() {
        let mut rng = Xoshiro256PlusPlus::seed_from_u64(8);
        for d in [2, 4] {
            let sigma = random_spd(d, &mut rng);
            let w = random_near_identity_sym(d, &mut rng);
            let g = central_gradient(&w, 1e-6, |w| criterion_of_w(Criterion::Fro, w, &sigma, d));
            let got = delta_w(Criterion::Fro, &Matrix::from_raw(d, d, w.clone()), &Matrix::from_raw(d, d, sigma))
                .unwrap();
            assert!(relative_error(got.as_slice(), &g, 1e-12) < 1e-4);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn small_step_does_not_increase_criterion(seed in any::<u64>(), d in 2usize..7, kl in any::<bool>()) {
            let c = if kl { Criterion::Kl } else { Criterion::Fro };
            let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
            let sigma = Matrix::from_raw(d, d, random_spd(d, &mut rng));
            let w = Matrix::from_raw(d, d, random_near_identity_sym(d, &mut rng));
            let before = criterion_of_w(c, w.as_slice(), sigma.as_slice(), d);
            let mut next = w.clone();
            next.sub_scaled_assign(1e-4, &delta_w(c, &w, &sigma).unwrap()).unwrap();
            let next = symmetrize(&next).unwrap();
            let after = criterion_of_w(c, next.as_slice(), sigma.as_slice(), d);
            prop_assert!(after <= before + 1e-10, "{before} -> {after}");
        }

        #[test]
        fn whitened_point_is_fixed(seed in any::<u64>(), d in 2usize..6) {
            let mut rng = Xoshiro256PlusPlus::seed_from_u64(seed);
            let sigma = random_spd(d, &mut rng);
            let w = Matrix::from_raw(d, d, zca_matrix(&sigma, d));
            let sigma = Matrix::from_raw(d, d, sigma);
            let kl = delta_w(Criterion::Kl, &w, &sigma).unwrap();
            prop_assert!(frobenius_norm(&kl) <= 1e-9);
            prop_assert_eq!(delta_w(Criterion::Fro, &Matrix::identity(d), &Matrix::identity(d)).unwrap(),
                Matrix::zeros(d, d));
        }

        #[test]
        fn iterate_keeps_w_symmetric(r in -0.8f64..0.8, kl in any::<bool>()) {
            let c = if kl { Criterion::Kl } else { Criterion::Fro };
            let (w, _) = whiten_iterate(&rho_n(3, r / 2.0), c, 0.05, 200, 1e-9).unwrap();
            prop_assert_eq!(w.clone(), w.transpose());
        }
    }
}
