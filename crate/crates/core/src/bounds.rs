//! Analytic error bounds: concentration of the estimation-error polynomial,
//! truncation length, sample complexity, impulse-response tail decay and the
//! minimax lower-bound reference.

use std::f64::consts::{LN_2, PI, SQRT_2};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::lti::{min_certified_grid, scaled_hinf};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BoundKind {
    Expected,
    Probabilistic,
    Deterministic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Analytic,
    MonteCarlo,
}

/// A scalar bound with the probability `1 - delta` at which it holds
/// (1 for expected-value and deterministic bounds).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorBound {
    pub value: f64,
    pub confidence: f64,
    pub kind: BoundKind,
    pub provenance: Provenance,
}

impl ErrorBound {
    pub fn deterministic(value: f64) -> Self {
        Self {
            value,
            confidence: 1.0,
            kind: BoundKind::Deterministic,
            provenance: Provenance::Analytic,
        }
    }

    pub fn probabilistic(value: f64, delta: f64, provenance: Provenance) -> Self {
        Self {
            value,
            confidence: 1.0 - delta,
            kind: BoundKind::Probabilistic,
            provenance,
        }
    }
}

/// Envelope `|g_k| <= C rho^k` for `k >= 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayProfile {
    #[serde(rename = "C")]
    pub c: f64,
    pub rho: f64,
}

impl DecayProfile {
    pub fn new(c: f64, rho: f64) -> Result<Self> {
        if !(c > 0.0 && c.is_finite()) {
            return Err(invalid(format!("decay constant must be positive, got {c}")));
        }
        check_unit_open("rho", rho)?;
        Ok(Self { c, rho })
    }
}

fn check_unit_open(name: &str, x: f64) -> Result<()> {
    if !(x > 0.0 && x < 1.0) {
        return Err(invalid(format!("{name} must lie in (0, 1), got {x}")));
    }
    Ok(())
}

fn check_delta(delta: f64) -> Result<()> {
    check_unit_open("delta", delta)
}

/// `sqrt(log(8 pi r)) + sqrt(log(2 / delta))`.
fn log_factor(r: usize, delta: f64) -> f64 {
    (8.0 * PI * r as f64).ln().sqrt() + (2.0 / delta).ln().sqrt()
}

/// Expected and high-probability bounds on `||Q||_inf` for `Q(z) = sum_k eps_k z^{-k}`,
/// `eps ~ N(0, V)`, together with the effective deviation `eta` they scale with.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Concentration {
    pub expected: ErrorBound,
    pub probabilistic: ErrorBound,
    pub eta: f64,
}

/// Concentration of a Gaussian error polynomial with covariance `v`.
///
/// `eta^2` is the maximum of `phi_l(z)^T V phi_l(z)`, `l = 1, 2` (real and imaginary parts of
/// `(1, z, .., z^{r-1})`) over a grid: with `n = None`, the points `exp(j k / 2r)` for
/// `k < ceil(4 pi r)`; otherwise `n >= ceil(4 pi r)` uniform points.
pub fn concentration_bound(v: &DMatrix<f64>, delta: f64, n: Option<usize>) -> Result<Concentration> {
    let r = v.nrows();
    if r == 0 || v.ncols() != r {
        return Err(invalid("covariance must be a nonempty square matrix"));
    }
    check_delta(delta)?;
    let asym = (v - v.transpose()).abs().max();
    let scale = v.abs().max().max(f64::MIN_POSITIVE);
    if asym > 1e-10 * scale {
        return Err(invalid("covariance is not symmetric"));
    }
    let min_eig = SymmetricEigen::new(v.clone()).eigenvalues.min();
    if min_eig < -1e-10 * scale {
        return Err(invalid(format!(
            "covariance is not positive semidefinite (eigenvalue {min_eig:e})"
        )));
    }
    let required = min_certified_grid(r);
    let angles: Vec<f64> = match n {
        None => (0..required).map(|k| k as f64 / (2.0 * r as f64)).collect(),
        Some(n) if n < required => return Err(Error::GridTooSmall { n, required }),
        Some(n) => (0..n).map(|k| 2.0 * PI * k as f64 / n as f64).collect(),
    };
    let mut eta2 = 0.0f64;
    let mut re = vec![0.0; r];
    let mut im = vec![0.0; r];
    for theta in angles {
        for (i, (a, b)) in re.iter_mut().zip(im.iter_mut()).enumerate() {
            let (s, c) = (theta * i as f64).sin_cos();
            *a = c;
            *b = s;
        }
        for x in [&re, &im] {
            let mut q = 0.0;
            for i in 0..r {
                let row: f64 = (0..r).map(|j| v[(i, j)] * x[j]).sum();
                q += x[i] * row;
            }
            eta2 = eta2.max(q);
        }
    }
    let eta = eta2.max(0.0).sqrt();
    let c = 4.0 * SQRT_2 * eta;
    Ok(Concentration {
        expected: ErrorBound {
            value: c * (8.0 * PI * r as f64).ln().sqrt(),
            confidence: 1.0,
            kind: BoundKind::Expected,
            provenance: Provenance::Analytic,
        },
        probabilistic: ErrorBound::probabilistic(c * log_factor(r, delta), delta, Provenance::Analytic),
        eta,
    })
}

/// Number of points in the `gamma` grid of [`truncation_length`].
pub const GAMMA_GRID: usize = 512;

/// Points `gamma = 1 - x` with `x` log-spaced over `[1e-6, 1 - rho - 1e-6]`.
pub fn gamma_grid(rho: f64) -> Vec<f64> {
    let lo = 1e-6f64;
    let hi = (1.0 - rho - 1e-6).max(lo);
    (0..GAMMA_GRID)
        .map(|i| {
            let t = i as f64 / (GAMMA_GRID - 1) as f64;
            1.0 - (lo.ln() + t * (hi.ln() - lo.ln())).exp()
        })
        .collect()
}

/// Smallest `r` with `r >= min_gamma log(||G(gamma z)|| / (eps (1 - gamma))) / (1 - gamma)`
/// over the grid of [`gamma_grid`], clamped below at 1.
pub fn truncation_length<F>(hinf_of_scaled: F, rho: f64, eps: f64) -> Result<usize>
where
    F: Fn(f64) -> Result<f64>,
{
    check_unit_open("rho", rho)?;
    if !(eps > 0.0) {
        return Err(invalid(format!("epsilon must be positive, got {eps}")));
    }
    let mut best = f64::INFINITY;
    for gamma in gamma_grid(rho) {
        let h = match hinf_of_scaled(gamma) {
            Ok(h) if h.is_finite() => h,
            _ => continue,
        };
        let x = 1.0 - gamma;
        best = best.min((h / (eps * x)).ln() / x);
    }
    if !best.is_finite() {
        return Err(invalid(
            "scaled H-infinity norm could not be evaluated on the gamma grid",
        ));
    }
    Ok((best.ceil().max(1.0)) as usize)
}

/// [`truncation_length`] for a (long) FIR impulse response, using certified scaled norms
/// on a grid of four times the minimum certified size.
pub fn truncation_length_fir(coeffs: &[f64], rho: f64, eps: f64) -> Result<usize> {
    let n = 4 * min_certified_grid(coeffs.len());
    truncation_length(|g| Ok(scaled_hinf(coeffs, g, n)?.certified_upper), rho, eps)
}

/// `C rho^{r-1} / (1 - rho)`: the geometric tail bound with the envelope indexed from lag 1.
pub fn decay_truncation_bound(profile: &DecayProfile, r: usize) -> Result<ErrorBound> {
    if r < 1 {
        return Err(invalid("r must be at least 1"));
    }
    Ok(ErrorBound::deterministic(
        profile.c * profile.rho.powi(r as i32 - 1) / (1.0 - profile.rho),
    ))
}

/// Envelope `|g_k| <= ||G(gamma z)||_inf gamma^k` from a certified scaled norm.
pub fn tail_decay_envelope(g: &[f64], gamma: f64, n: usize) -> Result<DecayProfile> {
    check_unit_open("gamma", gamma)?;
    let est = scaled_hinf(g, gamma, n)?;
    Ok(DecayProfile {
        c: est.certified_upper.max(f64::MIN_POSITIVE),
        rho: gamma,
    })
}

/// Which input budget a sample-complexity or rate formula refers to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BudgetCase {
    L2,
    Linf,
}

/// Number of queries sufficient for `||G_r - G_hat_r||_inf <= eps / 2` with probability `1 - delta`.
pub fn sample_complexity(case: BudgetCase, sigma: f64, eps: f64, delta: f64, r: usize) -> Result<u64> {
    if !(sigma >= 0.0 && eps > 0.0 && r >= 1) {
        return Err(invalid(format!(
            "need sigma >= 0, eps > 0, r >= 1; got sigma = {sigma}, eps = {eps}, r = {r}"
        )));
    }
    check_delta(delta)?;
    let logs = (8.0 * PI * r as f64).ln() + (2.0 / delta).ln();
    let s2 = sigma * sigma / (eps * eps);
    Ok(match case {
        BudgetCase::L2 => ((256.0 * s2 * r as f64 * logs).ceil() as u64).max(1),
        BudgetCase::Linf => ((1024.0 * LN_2 * s2 * logs).ceil() as u64).max(4 * r as u64),
    })
}

fn check_p(p: f64) -> Result<()> {
    if !(p >= 1.0) {
        return Err(invalid(format!("p must lie in [1, inf], got {p}")));
    }
    Ok(())
}

/// High-probability bound on `||G_hat_r - G_r||_inf` for impulse (`p <= 2`) or weighted
/// sinusoid (`p > 2`) designs with `T = 2r`.
pub fn fir_error_upper(p: f64, sigma: f64, r: usize, m: usize, delta: f64) -> Result<ErrorBound> {
    check_p(p)?;
    check_delta(delta)?;
    if r < 1 || m < 1 || !(sigma >= 0.0) {
        return Err(invalid("need r >= 1, m >= 1, sigma >= 0"));
    }
    let (r_f, m_f) = (r as f64, m as f64);
    let value = if p <= 2.0 {
        4.0 * SQRT_2 * sigma * (r_f / m_f).sqrt()
    } else {
        8.0 * (2.0 * LN_2).sqrt() * sigma * (r_f.powf(2.0 / p) / m_f).sqrt()
    } * log_factor(r, delta);
    Ok(ErrorBound::probabilistic(value, delta, Provenance::Analytic))
}

/// Lower bound on the minimax expected H-infinity risk of any estimator from `m` queries.
pub fn minimax_lower(p: f64, sigma: f64, r: usize, m: usize) -> Result<f64> {
    check_p(p)?;
    if r < 16 {
        return Err(invalid(format!("minimax lower bound needs r >= 16, got {r}")));
    }
    if m < 1 || !(sigma >= 0.0) {
        return Err(invalid("need m >= 1 and sigma >= 0"));
    }
    let (r_f, m_f) = (r as f64, m as f64);
    Ok(if p <= 2.0 {
        sigma / (8.0 * SQRT_2) * (r_f * r_f.ln() / m_f).sqrt()
    } else {
        sigma / (16.0 * SQRT_2) * (r_f.powf(2.0 / p) * r_f.ln() / m_f).sqrt()
    })
}

/// Effective output-noise level when the input is also corrupted:
/// `sqrt(sigma_n^2 ||G||^2 + sigma^2)`.
pub fn process_noise_substitute(sigma: f64, sigma_n: f64, hinf_g: f64) -> f64 {
    (sigma_n * sigma_n * hinf_g * hinf_g + sigma * sigma).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lti::FirFilter;
    use crate::plant::random_plant_coeffs;

    #[test]
    fn concentration_identity_and_diagonal() {
        for r in [1usize, 3, 8, 20] {
            let c = concentration_bound(&DMatrix::identity(r, r), 0.1, None).unwrap();
            assert!((c.eta * c.eta - r as f64).abs() < 1e-9);
            let d = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(r, |i, _| 0.5 + i as f64));
            let c = concentration_bound(&d, 0.1, None).unwrap();
            assert!((c.eta * c.eta - d.trace()).abs() < 1e-9);
            let u = concentration_bound(&d, 0.1, Some(2 * min_certified_grid(r))).unwrap();
            assert!((u.eta - c.eta).abs() < 1e-9);
        }
    }

    #[test]
    fn concentration_scalar_case() {
        let sigma = 0.7f64;
        let delta = 0.05;
        let c = concentration_bound(&DMatrix::from_element(1, 1, sigma * sigma), delta, None).unwrap();
        let expect = 4.0 * SQRT_2 * sigma * ((8.0 * PI).ln().sqrt() + (2.0 / delta).ln().sqrt());
        assert!((c.probabilistic.value - expect).abs() < 1e-12);
        assert!((c.probabilistic.confidence - 0.95).abs() < 1e-15);
        assert!((c.expected.value - 4.0 * SQRT_2 * sigma * (8.0 * PI).ln().sqrt()).abs() < 1e-12);
    }

    #[test]
    fn concentration_rejects_bad_input() {
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(concentration_bound(&bad, 0.1, None).is_err());
        assert!(concentration_bound(&DMatrix::identity(2, 2), 1.5, None).is_err());
        assert!(matches!(
            concentration_bound(&DMatrix::identity(2, 2), 0.1, Some(10)),
            Err(Error::GridTooSmall { .. })
        ));
    }

    #[test]
    fn truncation_length_geometric_system() {
        let rho = 0.5;
        let eps = 0.1;
        let h = |g: f64| -> Result<f64> { Ok(1.0 / (1.0 - rho / g)) };
        let r = truncation_length(h, rho, eps).unwrap();
        // dense grid oracle over gamma in (0.5, 1)
        let oracle = (1..10_000)
            .map(|i| 0.5 + 0.5 * i as f64 / 10_000.0)
            .map(|g| (h(g).unwrap() / (eps * (1.0 - g))).ln() / (1.0 - g))
            .fold(f64::INFINITY, f64::min);
        assert!(
            r as f64 >= oracle.ceil() && r as f64 <= oracle.ceil() + 1.0,
            "{r} vs {oracle}"
        );
        // the truncation error of the geometric tail is within epsilon
        let tail = rho.powi(r as i32) / (1.0 - rho);
        assert!(tail <= eps);
    }

    #[test]
    fn truncation_length_monotone_in_eps() {
        let rho = 0.8;
        let h = |g: f64| -> Result<f64> { Ok(1.0 / (1.0 - rho / g)) };
        let mut prev = usize::MAX;
        for eps in [0.01, 0.05, 0.1, 0.5, 1.0, 2.0, 4.0, 4.9] {
            let r = truncation_length(h, rho, eps).unwrap();
            assert!(r <= prev);
            prev = r;
        }
        // nearly memoryless system: eps just above its norm needs only a couple of taps
        let near = |g: f64| -> Result<f64> { Ok(1.0 + 0.1 / g) };
        assert!(truncation_length(near, 0.01, 1.05).unwrap() <= 3);
        assert!(truncation_length(h, rho, 0.0).is_err());
        assert!(truncation_length(h, 1.2, 0.1).is_err());
    }

    #[test]
    fn truncation_length_certifies_fir_plants() {
        for seed in 0..5 {
            let g = random_plant_coeffs(seed, crate::plant::RandomPlantParams { rho: 0.8, taps: 120 });
            let eps = 0.5;
            let r = truncation_length_fir(&g, 0.8, eps).unwrap();
            if r < g.len() {
                let tail = FirFilter::new(g[r..].to_vec()).unwrap();
                let fine = crate::lti::sup_norm(&tail, 8192).unwrap().certified_upper;
                assert!(fine <= eps, "seed {seed}: r = {r}, tail {fine}");
            }
        }
    }

    #[test]
    fn decay_bound_examples() {
        let b = decay_truncation_bound(&DecayProfile::new(3.9703, 0.95).unwrap(), 75).unwrap();
        assert!((b.value - 1.7840).abs() < 5e-4, "{}", b.value);
        assert_eq!(b.kind, BoundKind::Deterministic);
        let p = DecayProfile::new(2.0, 0.3).unwrap();
        let one = decay_truncation_bound(&p, 1).unwrap().value;
        assert!((one - 2.0 / 0.7).abs() < 1e-15);
        let tiny = DecayProfile::new(2.0, 1e-12).unwrap();
        assert!((decay_truncation_bound(&tiny, 1).unwrap().value - 2.0).abs() < 1e-9);
        for k in 0..10 {
            let a = decay_truncation_bound(&p, 5 + k).unwrap().value;
            let b = decay_truncation_bound(&p, 5).unwrap().value * 0.3f64.powi(k as i32);
            assert!((a - b).abs() <= 1e-14 * b.max(1e-300));
        }
    }

    #[test]
    fn envelope_examples() {
        let e1 = [1.0, 0.0, 0.0];
        let p = tail_decay_envelope(&e1, 0.7, 64).unwrap();
        assert!((p.c - (1.0 + 4.0 * PI * 3.0 / 64.0)).abs() < 1e-12);
        let rho = 0.6f64;
        let g: Vec<f64> = (0..200).map(|k| rho.powi(k)).collect();
        let gamma = (1.0 + rho) / 2.0;
        let p = tail_decay_envelope(&g, gamma, 4 * min_certified_grid(200)).unwrap();
        for (k, gk) in g.iter().enumerate().skip(1) {
            assert!(gk.abs() <= p.c * gamma.powi(k as i32));
        }
        for seed in 0..5 {
            let g = random_plant_coeffs(seed, Default::default());
            let p = tail_decay_envelope(&g, 0.97, 4 * min_certified_grid(g.len())).unwrap();
            for (k, gk) in g.iter().enumerate().skip(1) {
                assert!(gk.abs() <= p.c * 0.97f64.powi(k as i32));
            }
        }
        assert!(tail_decay_envelope(&g, 1.0, 4096).is_err());
    }

    #[test]
    fn sample_complexity_examples() {
        let delta = 2.0 / std::f64::consts::E;
        assert_eq!(sample_complexity(BudgetCase::L2, 1.0, 1.0, delta, 1).unwrap(), 1082);
        assert_eq!(sample_complexity(BudgetCase::Linf, 1.0, 1.0, delta, 1).unwrap(), 2999);
        assert_eq!(sample_complexity(BudgetCase::Linf, 0.0, 1.0, 0.1, 7).unwrap(), 28);
        assert_eq!(sample_complexity(BudgetCase::L2, 0.0, 1.0, 0.1, 7).unwrap(), 1);
        assert!(sample_complexity(BudgetCase::L2, 1.0, 0.0, 0.1, 7).is_err());
    }

    #[test]
    fn fir_error_upper_examples() {
        let delta = 2.0 / std::f64::consts::E;
        let b = fir_error_upper(2.0, 1.0, 4, 16, delta).unwrap();
        let expect = 4.0 * SQRT_2 * 0.5 * ((32.0 * PI).ln().sqrt() + 1.0);
        assert!((b.value - expect).abs() < 1e-12);
        let a = fir_error_upper(f64::INFINITY, 1.0, 4, 16, 0.1).unwrap().value;
        let c = fir_error_upper(f64::INFINITY, 1.0, 64, 16, 0.1).unwrap().value;
        let ratio = log_factor(64, 0.1) / log_factor(4, 0.1);
        assert!((c / a - ratio).abs() < 1e-12);
        for p in [1.0, 2.0, 3.0, f64::INFINITY] {
            let x = fir_error_upper(p, 1.3, 8, 10, 0.2).unwrap().value;
            let y = fir_error_upper(p, 1.3, 8, 40, 0.2).unwrap().value;
            assert!((y - x / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn minimax_examples() {
        let a = minimax_lower(2.0, 1.0, 16, 16).unwrap();
        assert!((a - 16f64.ln().sqrt() / (8.0 * SQRT_2)).abs() < 1e-12);
        assert!((a - 0.1472).abs() < 1e-4);
        // r^{2/p} = 1 at p = inf, so the value is sqrt(log r / m) / (16 sqrt 2)
        let b = minimax_lower(f64::INFINITY, 1.0, 16, 1).unwrap();
        assert!((b - 0.0736).abs() < 1e-4, "{b}");
        let b16 = minimax_lower(f64::INFINITY, 1.0, 16, 16).unwrap();
        assert!((b16 - b / 4.0).abs() < 1e-15);
        assert!(minimax_lower(2.0, 1.0, 15, 16).is_err());
        for p in [1.0, 2.0, 4.0, f64::INFINITY] {
            for r in [16, 32] {
                for m in [64, 256] {
                    let lo = minimax_lower(p, 1.0, r, m).unwrap();
                    let hi = fir_error_upper(p, 1.0, r, m, 0.5).unwrap().value;
                    assert!(lo <= hi);
                }
            }
        }
    }

    #[test]
    fn process_noise_examples() {
        assert_eq!(process_noise_substitute(0.3, 0.0, 7.0), 0.3);
        assert_eq!(process_noise_substitute(0.0, 0.4, 1.0), 0.4);
        assert_eq!(process_noise_substitute(3.0, 4.0, 1.0), 5.0);
    }

    #[test]
    fn gamma_grid_shape() {
        let g = gamma_grid(0.95);
        assert_eq!(g.len(), GAMMA_GRID);
        assert!(g.iter().all(|&x| x > 0.95 && x < 1.0));
        assert!((1.0 - g[0] - 1e-6).abs() < 1e-15);
    }
}
