//! Least-squares FIR estimation from stacked Toeplitz regressors.

use nalgebra::{ColPivQR, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::design::{covariance, InputEnsemble, SINGULAR_CONDITION};
use crate::error::{invalid, Error, Result};
use crate::lti::{sup_norm, FirFilter, SupNormEstimate, ToeplitzOp};
use crate::plant::PlantOracle;

/// Full estimate `g_hat_{0:T-1}`, its length-`r` truncation and `(Z^T Z)^{-1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct OlsFit {
    pub g_hat: Vec<f64>,
    pub g_hat_r: FirFilter,
    pub error_cov_factor: DMatrix<f64>,
    pub r: usize,
    pub condition_number: f64,
}

#[derive(Serialize, Deserialize)]
pub struct FitReport {
    pub g_hat: Vec<f64>,
    pub r: usize,
    pub trace_inv_r: f64,
    pub condition_number: f64,
}

impl OlsFit {
    /// `Tr([(Z^T Z)^{-1}]_{[r]})`.
    pub fn trace_inv_r(&self) -> f64 {
        (0..self.r).map(|i| self.error_cov_factor[(i, i)]).sum()
    }

    pub fn report(&self) -> FitReport {
        FitReport {
            g_hat: self.g_hat.clone(),
            r: self.r,
            trace_inv_r: self.trace_inv_r(),
            condition_number: self.condition_number,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.report()).expect("fit serializes")
    }

    fn from_parts(g_hat: Vec<f64>, cov: DMatrix<f64>, r: usize, cond: f64) -> Result<Self> {
        let g_hat_r = FirFilter::new(g_hat[..r].to_vec())?;
        Ok(Self {
            g_hat,
            g_hat_r,
            error_cov_factor: cov,
            r,
            condition_number: cond,
        })
    }
}

fn check_shapes(e: &InputEnsemble, responses: &[Vec<f64>], r: usize) -> Result<usize> {
    let t = e.input_len();
    if responses.len() != e.len() {
        return Err(Error::DimensionMismatch {
            expected: e.len(),
            got: responses.len(),
        });
    }
    if let Some(y) = responses.iter().find(|y| y.len() != t) {
        return Err(Error::DimensionMismatch {
            expected: t,
            got: y.len(),
        });
    }
    if !(1..=t).contains(&r) {
        return Err(invalid(format!("need 1 <= r <= T = {t}, got {r}")));
    }
    Ok(t)
}

/// OLS `g_hat = argmin ||Z g - Y||` via column-pivoted QR of the stacked Toeplitz blocks.
pub fn ols_fit(e: &InputEnsemble, responses: &[Vec<f64>], r: usize) -> Result<OlsFit> {
    let t = check_shapes(e, responses, r)?;
    let m = e.len();
    let rows = m * t;
    if rows < t {
        return Err(Error::SingularDesign {
            condition: f64::INFINITY,
        });
    }
    let mut z = DMatrix::zeros(rows, t);
    let mut y = DVector::zeros(rows);
    for (k, (u, yk)) in e.inputs().iter().zip(responses).enumerate() {
        let op = ToeplitzOp::square(u);
        for i in 0..t {
            for j in 0..=i {
                z[(k * t + i, j)] = op.entry(i, j);
            }
            y[k * t + i] = yk[i];
        }
    }
    let qr = ColPivQR::new(z);
    let r_full = qr.r();
    let r_mat = r_full.view((0, 0), (t, t)).into_owned();
    let sv = r_mat.singular_values();
    let smax = sv.iter().copied().fold(0.0f64, f64::max);
    let smin = sv.iter().copied().fold(f64::INFINITY, f64::min);
    let cond = if smin > 0.0 {
        (smax / smin).powi(2)
    } else {
        f64::INFINITY
    };
    if !(cond <= SINGULAR_CONDITION) {
        return Err(Error::SingularDesign { condition: cond });
    }
    qr.q_tr_mul(&mut y);
    let mut x = y.rows(0, t).into_owned();
    if !r_mat.solve_upper_triangular_mut(&mut x) {
        return Err(Error::SingularDesign { condition: cond });
    }
    qr.p().inv_permute_rows(&mut x);

    // (Z^T Z)^{-1} = P R^{-1} R^{-T} P^T
    let mut r_inv = DMatrix::identity(t, t);
    if !r_mat.solve_upper_triangular_mut(&mut r_inv) {
        return Err(Error::SingularDesign { condition: cond });
    }
    let mut cov = &r_inv * r_inv.transpose();
    qr.p().inv_permute_rows(&mut cov);
    qr.p().inv_permute_columns(&mut cov);
    let cov = (&cov + cov.transpose()) * 0.5;
    OlsFit::from_parts(x.iter().copied().collect(), cov, r, cond)
}

/// Closed-form solve `g_hat = Sigma^{-1} Z^T Y` for ensembles with diagonal `Sigma(u)`.
/// Returns `None` when the design is not diagonal.
pub fn ols_fit_diagonal(e: &InputEnsemble, responses: &[Vec<f64>], r: usize) -> Result<Option<OlsFit>> {
    let t = check_shapes(e, responses, r)?;
    let summary = covariance(e, r)?;
    if !summary.is_diagonal {
        return Ok(None);
    }
    // Z^T Y = sum_k Toep(u_k)^T y_k, (Toep(u)^T y)_j = sum_{i>=j} u_{i-j} y_i
    let mut zty = vec![0.0; t];
    for (u, yk) in e.inputs().iter().zip(responses) {
        for (j, acc) in zty.iter_mut().enumerate() {
            *acc += (j..t).map(|i| u[i - j] * yk[i]).sum::<f64>();
        }
    }
    let d = summary.sigma_matrix.diagonal();
    let g_hat: Vec<f64> = zty.iter().zip(d.iter()).map(|(a, b)| a / b).collect();
    let cov = DMatrix::from_diagonal(&d.map(|v| 1.0 / v));
    OlsFit::from_parts(g_hat, cov, r, summary.condition_number).map(Some)
}

/// Diagonal closed form when available, otherwise the QR path.
pub fn fit(e: &InputEnsemble, responses: &[Vec<f64>], r: usize) -> Result<OlsFit> {
    match ols_fit_diagonal(e, responses, r)? {
        Some(f) => Ok(f),
        None => ols_fit(e, responses, r),
    }
}

/// Number of queries summed sequentially per parallel work item.
const STREAM_CHUNK: usize = 1024;

/// Impulse-ensemble fit without materializing the ensemble: `g_hat` is the mean of `m`
/// impulse responses drawn at query indices `start .. start + m`.
pub fn fit_impulse_stream(
    oracle: &PlantOracle,
    m: usize,
    t: usize,
    r: usize,
    start: u64,
    process_noise: bool,
) -> Result<OlsFit> {
    if m == 0 || !(1..=t).contains(&r) {
        return Err(invalid(format!(
            "need m >= 1 and 1 <= r <= T, got m = {m}, r = {r}, T = {t}"
        )));
    }
    let mut e1 = vec![0.0; t];
    e1[0] = 1.0;
    let chunks = m.div_ceil(STREAM_CHUNK);
    let partial = crate::par::map_range(chunks, |c| -> Result<Vec<f64>> {
        let mut acc = vec![0.0; t];
        for q in c * STREAM_CHUNK..((c + 1) * STREAM_CHUNK).min(m) {
            let idx = start + q as u64;
            let rec = if process_noise {
                oracle.query_process_noise_at(&e1, idx)?
            } else {
                oracle.query_at(&e1, idx)?
            };
            for (a, y) in acc.iter_mut().zip(&rec.output) {
                *a += y;
            }
        }
        Ok(acc)
    });
    let mut total = vec![0.0; t];
    for p in partial {
        for (a, v) in total.iter_mut().zip(p?) {
            *a += v;
        }
    }
    let mf = m as f64;
    let g_hat = total.into_iter().map(|v| v / mf).collect();
    OlsFit::from_parts(g_hat, DMatrix::identity(t, t) / mf, r, 1.0)
}

/// Certified sup-norm of `G_hat_r - G_r`, where `G_r` is the truth truncated to `r` taps.
pub fn estimation_error(fit: &OlsFit, truth: &FirFilter, n: usize) -> Result<SupNormEstimate> {
    sup_norm(&fit.g_hat_r.sub(&truth.truncate(fit.r)), n)
}
