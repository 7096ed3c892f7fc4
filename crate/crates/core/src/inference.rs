//! Observed-information assembly, asymptotic standard errors, and the
//! shrinkage diagnostics comparing hazard and logistic fits on discrete data.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{hazard, ph_penalty};
use crate::mstep::{
    fit_weighted_exp_ph, fit_weighted_logistic, weighted_loglik, AugmentedRow, Family,
};

/// Observed information over the stacked (fixed, random) coefficients and
/// the covariance of the fixed-effect block.
#[derive(Debug, Clone)]
pub struct InformationMatrix {
    /// (p+q)×(p+q) symmetric information matrix.
    pub matrix: DMatrix<f64>,
    /// p×p fixed-effect block of the inverse information.
    pub beta_block_inverse: DMatrix<f64>,
    /// Condition number exceeded 1e12.
    pub condition_warning: bool,
}

/// Assembles the observed information of a weighted exponential-hazard fit:
/// per augmented row, the curvature Δ·λ weighted by the posterior case
/// weight, accumulated over the stacked (x, z) covariates, plus the
/// σ⁻² prior block on the random intercepts.
pub fn observed_information(
    rows: &[AugmentedRow],
    p: usize,
    q: usize,
    beta: &DVector<f64>,
    b: &DVector<f64>,
    sigma2: Option<f64>,
) -> Result<InformationMatrix> {
    observed_information_family(Family::ExpPh, rows, p, q, beta, b, sigma2)
}

/// [`observed_information`] generalized over the likelihood family; the
/// logistic curvature is p(1−p) per row instead of Δ·λ.
pub fn observed_information_family(
    family: Family,
    rows: &[AugmentedRow],
    p: usize,
    q: usize,
    beta: &DVector<f64>,
    b: &DVector<f64>,
    sigma2: Option<f64>,
) -> Result<InformationMatrix> {
    let dim = p + q;
    let mut info: DMatrix<f64> = DMatrix::zeros(dim, dim);
    let mut stacked = vec![0.0; dim];
    for row in rows {
        let mut eta = 0.0;
        for (i, &x) in row.x.iter().enumerate() {
            eta += beta[i] * x;
        }
        if let Some(z) = row.z_index {
            if !b.is_empty() {
                eta += b[z];
            }
        }
        let curvature = match family {
            Family::ExpPh => row.delta * hazard(eta),
            Family::Logistic => {
                let pr = crate::model::expit(eta);
                pr * (1.0 - pr)
            }
        };
        let w = row.case_weight * curvature;
        stacked[..p].copy_from_slice(&row.x);
        for v in &mut stacked[p..] {
            *v = 0.0;
        }
        if let Some(z) = row.z_index {
            if q > 0 {
                stacked[p + z] = 1.0;
            }
        }
        for i in 0..dim {
            if stacked[i] == 0.0 {
                continue;
            }
            for j in 0..dim {
                info[(i, j)] += w * stacked[i] * stacked[j];
            }
        }
    }
    if q > 0 {
        let s2 = sigma2.ok_or_else(|| Error::Domain {
            op: "observed_information",
            msg: "sigma2 required when q > 0".into(),
        })?;
        for r in 0..q {
            info[(p + r, p + r)] += 1.0 / s2;
        }
    }

    // Symmetrize rounding drift before factorization.
    let info = (&info + info.transpose()) * 0.5;
    let eigen = info.clone().symmetric_eigen();
    let max_eig = eigen.eigenvalues.iter().cloned().fold(0.0_f64, f64::max);
    let min_eig = eigen
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if !(min_eig > 0.0) || !min_eig.is_finite() {
        // Report the (approximate) null-space direction.
        let mut direction = vec![0.0; dim];
        let mut min_idx = 0;
        for (i, &v) in eigen.eigenvalues.iter().enumerate() {
            if v <= eigen.eigenvalues[min_idx] {
                min_idx = i;
            }
        }
        for i in 0..dim {
            direction[i] = eigen.eigenvectors[(i, min_idx)];
        }
        return Err(Error::SingularInformation { direction });
    }
    let condition_warning = max_eig / min_eig > 1e12;

    let inverse = info
        .clone()
        .cholesky()
        .ok_or_else(|| Error::SingularInformation {
            direction: vec![f64::NAN; dim],
        })?
        .inverse();
    let beta_block_inverse = inverse.view((0, 0), (p, p)).into_owned();
    Ok(InformationMatrix {
        matrix: info,
        beta_block_inverse,
        condition_warning,
    })
}

/// Square roots of the fixed-effect block diagonal of the inverse
/// information.
pub fn asymptotic_se(info: &InformationMatrix) -> Result<Vec<f64>> {
    let p = info.beta_block_inverse.nrows();
    let mut se = Vec::with_capacity(p);
    for i in 0..p {
        let v = info.beta_block_inverse[(i, i)];
        if v < 0.0 {
            return Err(Error::NonOptimum { index: i, value: v });
        }
        se.push(v.sqrt());
    }
    Ok(se)
}

/// Paired logistic/hazard coefficients on shared discrete data, the penalty
/// value at the hazard solution, and the largest residual of the objective
/// identity J_PH = J_log + penalty over probe coefficients.
#[derive(Debug, Clone)]
pub struct ShrinkageReport {
    pub logistic_beta: DVector<f64>,
    pub ph_beta: DVector<f64>,
    pub penalty_at_ph: f64,
    pub identity_max_abs_residual: f64,
}

/// Fits both models on hard-labeled discrete rows (each observation present
/// as a single weight-one row) and verifies the objective identity at probe
/// points around both solutions.
pub fn shrinkage_report(rows: &[AugmentedRow], p: usize) -> Result<ShrinkageReport> {
    for row in rows {
        if (row.delta - 1.0).abs() > 1e-9 {
            return Err(Error::Domain {
                op: "shrinkage_report",
                msg: "shrinkage diagnostics require discrete (unit elapsed time) data".into(),
            });
        }
    }
    let ph = fit_weighted_exp_ph(rows, p, None)?;
    let logistic = fit_weighted_logistic(rows, p, None)?;

    let etas_at = |beta: &DVector<f64>| -> Vec<f64> {
        rows.iter()
            .map(|row| {
                row.x
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| beta[i] * x)
                    .sum::<f64>()
            })
            .collect()
    };
    let weighted_penalty = |beta: &DVector<f64>| -> f64 {
        etas_at(beta)
            .iter()
            .zip(rows)
            .map(|(&eta, row)| row.case_weight * ph_penalty(&[eta]))
            .sum()
    };

    let mut identity_max = 0.0_f64;
    let mut probes = vec![ph.beta.clone(), logistic.beta.clone()];
    for scale in [0.5, 1.5] {
        probes.push(&ph.beta * scale);
        probes.push(&logistic.beta * scale);
    }
    for beta in &probes {
        let j_ph = -weighted_loglik(Family::ExpPh, rows, beta);
        let j_log = -weighted_loglik(Family::Logistic, rows, beta);
        let residual = (j_ph - j_log - weighted_penalty(beta)).abs();
        identity_max = identity_max.max(residual);
    }

    Ok(ShrinkageReport {
        penalty_at_ph: weighted_penalty(&ph.beta),
        logistic_beta: logistic.beta,
        ph_beta: ph.beta,
        identity_max_abs_residual: identity_max,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::expit;
    use approx::assert_relative_eq;
    use nalgebra::dvector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn row(x: Vec<f64>, z: Option<usize>, delta: f64, event: bool, w: f64) -> AugmentedRow {
        AugmentedRow {
            x,
            z_index: z,
            delta,
            is_event: event,
            case_weight: w,
        }
    }

    #[test]
    fn scalar_assembly() {
        // Single record split into event/censor copies with weights summing
        // to one, Δ = 1, λ̂ = 1 at β = 0: information is 1, SE is 1.
        let rows = vec![
            row(vec![1.0], None, 1.0, true, 0.4),
            row(vec![1.0], None, 1.0, false, 0.6),
        ];
        let info =
            observed_information(&rows, 1, 0, &dvector![0.0], &DVector::zeros(0), None).unwrap();
        assert_relative_eq!(info.matrix[(0, 0)], 1.0, epsilon = 1e-14);
        let se = asymptotic_se(&info).unwrap();
        assert_relative_eq!(se[0], 1.0, epsilon = 1e-14);
    }

    #[test]
    fn huge_variance_reduces_to_fixed_effect_information() {
        let rows = vec![
            row(vec![1.0], Some(0), 2.0, true, 0.5),
            row(vec![1.0], Some(0), 2.0, false, 0.5),
        ];
        let beta = dvector![-0.3];
        let b = dvector![0.2];
        let info_fixed =
            observed_information(&rows, 1, 0, &beta, &DVector::zeros(0), None).unwrap();
        let info_huge = observed_information(&rows, 1, 1, &beta, &b, Some(1e12)).unwrap();
        // The prior block vanishes; the β-block covariance approaches the
        // q = 0 case computed at the same linear predictors.
        let rows_with_b = vec![
            row(vec![1.0], None, 2.0 * 0.2_f64.exp(), true, 0.5),
            row(vec![1.0], None, 2.0 * 0.2_f64.exp(), false, 0.5),
        ];
        let _ = rows_with_b;
        assert!(info_huge.matrix[(1, 1)] - info_huge.matrix[(0, 1)] < 1e-6);
        assert!(info_fixed.matrix[(0, 0)] > 0.0);
    }

    #[test]
    fn diagonal_information_examples() {
        let info = InformationMatrix {
            matrix: DMatrix::identity(2, 2),
            beta_block_inverse: DMatrix::identity(2, 2),
            condition_warning: false,
        };
        assert_eq!(asymptotic_se(&info).unwrap(), vec![1.0, 1.0]);

        let info = InformationMatrix {
            matrix: DMatrix::from_diagonal(&dvector![4.0, 25.0]),
            beta_block_inverse: DMatrix::from_diagonal(&dvector![0.25, 0.04]),
            condition_warning: false,
        };
        let se = asymptotic_se(&info).unwrap();
        assert_relative_eq!(se[0], 0.5, epsilon = 1e-14);
        assert_relative_eq!(se[1], 0.2, epsilon = 1e-14);
    }

    #[test]
    fn negative_diagonal_is_rejected() {
        let info = InformationMatrix {
            matrix: DMatrix::identity(1, 1),
            beta_block_inverse: DMatrix::from_diagonal(&dvector![-0.5]),
            condition_warning: false,
        };
        assert!(matches!(
            asymptotic_se(&info),
            Err(Error::NonOptimum { .. })
        ));
    }

    #[test]
    fn information_matches_numerical_hessian() {
        // ℐ equals the negative Hessian of the weighted penalized
        // log-likelihood in the stacked (β, b) coordinates.
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let (p, q) = (2usize, 2usize);
        let rows: Vec<AugmentedRow> = (0..60)
            .map(|i| {
                row(
                    vec![1.0, rng.random::<f64>() * 2.0 - 1.0],
                    Some(i % q),
                    rng.random::<f64>() * 2.0 + 0.1,
                    rng.random::<f64>() < 0.4,
                    0.1 + 0.9 * rng.random::<f64>(),
                )
            })
            .collect();
        let beta = dvector![-0.7, 0.4];
        let b = dvector![0.15, -0.1];
        let sigma2 = 0.6;

        let penalized = |theta: &DVector<f64>| -> f64 {
            let mut total = 0.0;
            for r in &rows {
                let mut eta = theta[0] * r.x[0] + theta[1] * r.x[1];
                if let Some(z) = r.z_index {
                    eta += theta[p + z];
                }
                let lam = hazard(eta);
                total += r.case_weight
                    * if r.is_event {
                        eta - r.delta * lam
                    } else {
                        -r.delta * lam
                    };
            }
            for z in 0..q {
                total -= theta[p + z] * theta[p + z] / (2.0 * sigma2);
            }
            total
        };

        let mut theta = DVector::zeros(p + q);
        theta.rows_mut(0, p).copy_from(&beta);
        theta.rows_mut(p, q).copy_from(&b);
        let h = 1e-5;
        let dim = p + q;
        let mut numeric = DMatrix::zeros(dim, dim);
        for i in 0..dim {
            for j in 0..dim {
                let mut tpp = theta.clone();
                tpp[i] += h;
                tpp[j] += h;
                let mut tpm = theta.clone();
                tpm[i] += h;
                tpm[j] -= h;
                let mut tmp = theta.clone();
                tmp[i] -= h;
                tmp[j] += h;
                let mut tmm = theta.clone();
                tmm[i] -= h;
                tmm[j] -= h;
                numeric[(i, j)] = -(penalized(&tpp) - penalized(&tpm) - penalized(&tmp)
                    + penalized(&tmm))
                    / (4.0 * h * h);
            }
        }

        let info = observed_information(&rows, p, q, &beta, &b, Some(sigma2)).unwrap();
        for i in 0..dim {
            for j in 0..dim {
                let denom = numeric[(i, j)].abs().max(1.0);
                assert!(
                    ((info.matrix[(i, j)] - numeric[(i, j)]) / denom).abs() < 1e-4,
                    "entry ({i},{j}): {} vs {}",
                    info.matrix[(i, j)],
                    numeric[(i, j)]
                );
            }
        }
    }

    #[test]
    fn doubling_data_shrinks_se_by_sqrt2() {
        let mut rng = ChaCha12Rng::seed_from_u64(8);
        let rows: Vec<AugmentedRow> = (0..50)
            .map(|_| {
                row(
                    vec![1.0, rng.random::<f64>() * 2.0 - 1.0],
                    None,
                    rng.random::<f64>() + 0.5,
                    rng.random::<f64>() < 0.5,
                    1.0,
                )
            })
            .collect();
        let beta = dvector![-0.5, 0.3];
        let single =
            observed_information(&rows, 2, 0, &beta, &DVector::zeros(0), None).unwrap();
        let mut doubled = rows.clone();
        doubled.extend(rows.iter().cloned());
        let double =
            observed_information(&doubled, 2, 0, &beta, &DVector::zeros(0), None).unwrap();
        let se1 = asymptotic_se(&single).unwrap();
        let se2 = asymptotic_se(&double).unwrap();
        for i in 0..2 {
            let ratio = se2[i] / se1[i];
            assert!(
                (0.68..=0.74).contains(&ratio),
                "ratio {ratio} out of the n^(-1/2) band"
            );
        }
    }

    #[test]
    fn singular_information_names_direction() {
        let rows = vec![
            row(vec![1.0, 1.0], None, 1.0, true, 1.0),
            row(vec![1.0, 1.0], None, 1.0, false, 1.0),
        ];
        let err = observed_information(&rows, 2, 0, &dvector![0.0, 0.0], &DVector::zeros(0), None)
            .unwrap_err();
        match err {
            Error::SingularInformation { direction } => {
                // The null direction is (1, -1)/√2 up to sign.
                assert!((direction[0] + direction[1]).abs() < 1e-8);
            }
            other => panic!("unexpected error {other}"),
        }
    }

    #[test]
    fn shrinkage_report_identity_and_ordering() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let beta_true = [-2.5, 1.2];
        let rows: Vec<AugmentedRow> = (0..400)
            .map(|_| {
                let xv = rng.random::<f64>() * 2.0 - 1.0;
                let event = rng.random::<f64>() < expit(beta_true[0] + beta_true[1] * xv);
                row(vec![1.0, xv], None, 1.0, event, 1.0)
            })
            .collect();
        let report = shrinkage_report(&rows, 2).unwrap();
        assert!(report.identity_max_abs_residual < 1e-10);
        assert!(report.penalty_at_ph > 0.0);
        assert!(
            report.ph_beta[1].abs() <= report.logistic_beta[1].abs() + 1e-8,
            "no shrinkage: {} vs {}",
            report.ph_beta[1],
            report.logistic_beta[1]
        );
        // Heterogeneous elapsed times are rejected.
        let mut bad = rows;
        bad[0].delta = 2.0;
        assert!(shrinkage_report(&bad, 2).is_err());
    }
}
