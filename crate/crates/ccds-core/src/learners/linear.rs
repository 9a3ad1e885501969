//! Weighted (optionally ridge-penalized) least squares on a resolved design.

use nalgebra::{Cholesky, DMatrix, DVector};

use super::{Design, FittedRegressor, RegressionSpec, RegressorModel};
use crate::data::TargetSample;
use crate::error::{CcdsError, Result};

pub(super) fn fit_weighted_ols(
    sample: &TargetSample,
    idx: &[usize],
    design: &Design,
    spec: &RegressionSpec,
) -> Result<FittedRegressor> {
    let p = design.ncols();
    if spec.ridge_penalty == 0.0 && p > idx.len() {
        return Err(CcdsError::RankDeficient(format!(
            "{p} design columns exceed {} rows",
            idx.len()
        )));
    }
    let x = design.matrix(sample, idx);
    let y = DVector::from_iterator(idx.len(), idx.iter().map(|&i| sample.unit(i).y));
    let w = DVector::from_iterator(idx.len(), idx.iter().map(|&i| sample.unit(i).weight));

    let coef = solve_normal_equations(&x, &y, &w, spec.ridge_penalty)?;
    let fitted = &x * &coef;
    let rss = idx
        .iter()
        .enumerate()
        .map(|(r, _)| w[r] * (y[r] - fitted[r]).powi(2))
        .sum();
    Ok(FittedRegressor {
        model: RegressorModel::Linear {
            design: design.clone(),
            coef,
        },
        rss,
        n_used: idx.len(),
        spec_fingerprint: spec.fingerprint(),
        warnings: vec![],
    })
}

/// Solves (X'WX + lambda D) b = X'Wy with D = diag(0, 1, .., 1): the
/// intercept column is not penalized.
pub(super) fn solve_normal_equations(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    w: &DVector<f64>,
    ridge: f64,
) -> Result<DVector<f64>> {
    let p = x.ncols();
    let mut xtwx = DMatrix::zeros(p, p);
    let mut xtwy = DVector::zeros(p);
    for r in 0..x.nrows() {
        let wr = w[r];
        if wr == 0.0 {
            continue;
        }
        for a in 0..p {
            let xa = x[(r, a)];
            if xa == 0.0 {
                continue;
            }
            xtwy[a] += wr * xa * y[r];
            for b in a..p {
                xtwx[(a, b)] += wr * xa * x[(r, b)];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            xtwx[(a, b)] = xtwx[(b, a)];
        }
    }
    if ridge > 0.0 {
        for j in 1..p {
            xtwx[(j, j)] += ridge;
        }
    }
    match Cholesky::new(xtwx) {
        Some(chol) => Ok(chol.solve(&xtwy)),
        None => Err(CcdsError::RankDeficient(
            "singular weighted normal equations".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use crate::data::TargetSample;
    use crate::learners::{fit_outcome_regression, RegressionSpec};
    use approx::assert_abs_diff_eq;

    fn two_point_sample() -> TargetSample {
        TargetSample::from_rows(
            vec![
                (1.0, "t".to_string(), 1, vec![0.0], 1.0),
                (3.0, "t".to_string(), 1, vec![1.0], 1.0),
            ],
            vec!["x1".into()],
        )
        .unwrap()
    }

    #[test]
    fn two_points_give_exact_line() {
        let sample = two_point_sample();
        let fit =
            fit_outcome_regression(&sample, &[0, 1], &RegressionSpec::main_terms()).unwrap();
        let coef = fit.coefficients().unwrap();
        assert_abs_diff_eq!(coef[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(coef[1], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(fit.predict(0, &[2.0]), 5.0, epsilon = 1e-12);
    }

    #[test]
    fn constant_outcome_predicts_constant() {
        let rows = (0..6)
            .map(|i| (4.25, "t".to_string(), 1u8, vec![i as f64], 1.0))
            .collect();
        let sample = TargetSample::from_rows(rows, vec!["x1".into()]).unwrap();
        let idx: Vec<usize> = (0..6).collect();
        let fit = fit_outcome_regression(&sample, &idx, &RegressionSpec::main_terms()).unwrap();
        for x in [-3.0, 0.0, 11.0] {
            assert_abs_diff_eq!(fit.predict(0, &[x]), 4.25, epsilon = 1e-10);
        }
    }

    #[test]
    fn singular_design_advises_ridge() {
        // duplicated covariate column via a custom design
        use crate::learners::{BasisTerm, Factor};
        let sample = two_point_sample();
        let spec = RegressionSpec::custom(vec![
            BasisTerm::new(vec![Factor::Cov(0)]),
            BasisTerm::new(vec![Factor::Cov(0)]),
        ]);
        let err = fit_outcome_regression(&sample, &[0, 1], &spec).unwrap_err();
        assert!(err.to_string().contains("ridge_penalty"));
        let fit = fit_outcome_regression(&sample, &[0, 1], &spec.with_ridge(1e-8)).unwrap();
        assert_abs_diff_eq!(fit.predict(0, &[2.0]), 5.0, epsilon = 1e-4);
    }

    #[test]
    fn residuals_orthogonal_to_design() {
        // unweighted main-terms fit: X'r = 0 within 1e-8 relative tolerance
        let rows: Vec<_> = (0..40)
            .map(|i| {
                let x = (i as f64) * 0.37 % 5.0 - 2.0;
                let arm = if i % 3 == 0 { "b" } else { "a" };
                let y = 1.0 + 2.0 * x + if arm == "b" { 0.7 } else { 0.0 }
                    + ((i * 37) % 11) as f64 * 0.05;
                (y, arm.to_string(), 1u8, vec![x, x * x * 0.1], 1.0)
            })
            .collect();
        let sample = TargetSample::from_rows(rows, vec!["x1".into(), "x2".into()]).unwrap();
        let idx: Vec<usize> = (0..sample.n()).collect();
        let fit = fit_outcome_regression(&sample, &idx, &RegressionSpec::main_terms()).unwrap();
        let scale: f64 = sample.units().iter().map(|u| u.y.abs()).sum::<f64>();
        // columns: intercept, arm-b, x1, x2
        let mut dots = [0.0f64; 4];
        for u in sample.units() {
            let r = u.y - fit.predict(u.arm, &u.x);
            dots[0] += r;
            dots[1] += r * (u.arm == 1) as u8 as f64;
            dots[2] += r * u.x[0];
            dots[3] += r * u.x[1];
        }
        for d in dots {
            assert!(d.abs() / scale < 1e-8, "dot {d} scale {scale}");
        }
    }
}
