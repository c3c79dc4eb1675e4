//! Robust certification of a controller against an FIR model plus an
//! H-infinity uncertainty ball, and time-domain simulation of the unity
//! feedback loop `e = ref - (y + noise)`, `u = K e`, `y = G u`.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::lti::{horner, min_certified_grid, sup_norm, FirFilter, FrequencyGrid};
use crate::par::map_range;
use crate::rng::{derive_seed, GaussianStream, PERTURB};

pub const DEFAULT_CERT_GRID: usize = 8192;
/// Tolerance on `|1 + K G|` below which the loop is treated as ill-posed.
const POSED_TOL: f64 = 1e-12;

/// `num(z^{-1}) / den(z^{-1})` with coefficients in ascending powers of `z^{-1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RationalFilter {
    pub num: Vec<f64>,
    pub den: Vec<f64>,
    #[serde(rename = "Ts", default = "unit_sample_time")]
    pub ts: f64,
}

fn unit_sample_time() -> f64 {
    1.0
}

impl RationalFilter {
    pub fn new(num: Vec<f64>, den: Vec<f64>, ts: f64) -> Result<Self> {
        let f = Self { num, den, ts };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        if self.num.is_empty() || self.den.is_empty() {
            return Err(invalid("rational filter needs nonempty numerator and denominator"));
        }
        if self.den[0] == 0.0 {
            return Err(invalid("leading denominator coefficient must be nonzero"));
        }
        if self.num.iter().chain(&self.den).any(|x| !x.is_finite()) {
            return Err(invalid("rational filter coefficients must be finite"));
        }
        if !(self.ts > 0.0 && self.ts.is_finite()) {
            return Err(invalid(format!("sample time must be positive, got {}", self.ts)));
        }
        Ok(())
    }

    pub fn constant(k: f64) -> Self {
        Self {
            num: vec![k],
            den: vec![1.0],
            ts: 1.0,
        }
    }

    pub fn from_fir(f: &FirFilter) -> Self {
        Self {
            num: f.coeffs().to_vec(),
            den: vec![1.0],
            ts: 1.0,
        }
    }

    /// Discrete PI controller `k_p + k_i / (1 - z^{-1})`.
    pub fn pi(kp: f64, ki: f64) -> Self {
        Self {
            num: vec![kp + ki, -kp],
            den: vec![1.0, -1.0],
            ts: 1.0,
        }
    }

    pub fn eval_unit(&self, z: Complex64) -> Complex64 {
        let w = z.conj();
        horner(&self.num, w) / horner(&self.den, w)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("rational filter serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: Self = serde_json::from_str(text)?;
        f.validate()?;
        Ok(f)
    }
}

/// First-order weight with DC gain `dc`, high-frequency gain `hf` and unit gain at
/// `wc`, mapped to discrete time by the bilinear transform with sample time `ts`.
///
/// Continuous prototype `(hf s + dc wb) / (s + wb)` with
/// `wb = wc sqrt((1 - hf^2) / (dc^2 - 1))`.
pub fn make_weight(dc: f64, wc: f64, hf: f64, ts: f64) -> Result<RationalFilter> {
    if !(dc > 0.0 && hf > 0.0 && dc.is_finite() && hf.is_finite()) {
        return Err(invalid("weight gains must be positive and finite"));
    }
    if !(dc.min(hf) < 1.0 && 1.0 < dc.max(hf)) {
        return Err(invalid(format!(
            "unit crossover needs min(dc, hf) < 1 < max(dc, hf); got dc = {dc}, hf = {hf}"
        )));
    }
    if !(ts > 0.0 && wc > 0.0 && wc < PI / ts) {
        return Err(invalid(format!("crossover {wc} must lie in (0, pi / Ts)")));
    }
    let wb = wc * ((1.0 - hf * hf) / (dc * dc - 1.0)).sqrt();
    let c = 2.0 / ts;
    RationalFilter::new(vec![hf * c + dc * wb, dc * wb - hf * c], vec![c + wb, wb - c], ts)
}

/// Pointwise `num / den` on the grid.
pub fn rational_response(f: &RationalFilter, grid: &FrequencyGrid) -> Result<Vec<Complex64>> {
    let scale = f.den.iter().map(|x| x.abs()).sum::<f64>();
    grid.points()
        .iter()
        .enumerate()
        .map(|(index, &z)| {
            let w = z.conj();
            let d = horner(&f.den, w);
            let v = horner(&f.num, w) / d;
            if d.norm() <= 1e-12 * scale || !v.is_finite() {
                Err(Error::PoleOnGrid { index })
            } else {
                Ok(v)
            }
        })
        .collect()
}

/// Grid evaluation of `||(|W1 S| + gamma |K S|)||_inf < 1` with `S = 1 / (1 + K G)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificationReport {
    /// `1 - max_k (|W1 S| + gamma |K S|)`.
    pub perf_margin: f64,
    /// `max_k gamma |K S| < 1`.
    pub stable_smallgain: bool,
    /// All closed-loop poles of the nominal loop lie strictly inside the unit circle.
    pub nominal_stable: bool,
    #[serde(rename = "grid_N")]
    pub grid_n: usize,
    pub gamma: f64,
    /// Angle in `[0, pi]` where the performance sum peaks.
    pub peak_frequency: f64,
    pub max_w1_s: f64,
    pub max_gamma_ks: f64,
}

impl CertificationReport {
    /// Nominal stability plus a positive margin: robustly stable with the performance guarantee.
    pub fn certified(&self) -> bool {
        self.nominal_stable && self.perf_margin > 0.0
    }
}

/// Closed-loop characteristic polynomial `den_K + num_K * g` in `z^{-1}`.
fn characteristic(k: &RationalFilter, g: &[f64]) -> Vec<f64> {
    let n = k.den.len().max(k.num.len() + g.len() - 1);
    let mut p = vec![0.0; n];
    for (i, &d) in k.den.iter().enumerate() {
        p[i] += d;
    }
    for (i, &a) in k.num.iter().enumerate() {
        for (j, &b) in g.iter().enumerate() {
            p[i + j] += a * b;
        }
    }
    p
}

/// True when every root `z` of `sum_i a_i z^{-i}` has `|z| < 1`.
pub fn poly_stable(a: &[f64]) -> bool {
    let mut a = a.to_vec();
    while a.len() > 1 && a[a.len() - 1] == 0.0 {
        a.pop();
    }
    if a.is_empty() || a[0] == 0.0 {
        return false;
    }
    let n = a.len() - 1;
    if n == 0 {
        return true;
    }
    // companion matrix of z^n + (a_1/a_0) z^{n-1} + .. + a_n/a_0
    let mut c = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        c[(0, j)] = -a[j + 1] / a[0];
    }
    for i in 1..n {
        c[(i, i - 1)] = 1.0;
    }
    c.complex_eigenvalues().iter().all(|z| z.norm() < 1.0 - 1e-9)
}

/// Nominal closed-loop stability of `K` in unity feedback with the FIR `g`.
pub fn nominal_stable(k: &RationalFilter, g: &FirFilter) -> bool {
    poly_stable(&characteristic(k, g.coeffs()))
}

/// `S` and `K S` on the grid, evaluated as `den_K / chi` and `num_K / chi`
/// so integrating controllers have no pole on the grid.
fn loop_responses(k: &RationalFilter, g: &FirFilter, grid: &FrequencyGrid) -> Result<Vec<(Complex64, Complex64)>> {
    let chi = characteristic(k, g.coeffs());
    let scale = chi.iter().map(|x| x.abs()).sum::<f64>().max(f64::MIN_POSITIVE);
    grid.points()
        .iter()
        .map(|&z| {
            let w = z.conj();
            let c = horner(&chi, w);
            if c.norm() <= POSED_TOL * scale {
                return Err(Error::IllPosedLoop(format!("1 + K G vanishes at angle {}", z.arg())));
            }
            Ok((horner(&k.den, w) / c, horner(&k.num, w) / c))
        })
        .collect()
}

pub fn certify(
    w1: &RationalFilter,
    k: &RationalFilter,
    g_fir: &FirFilter,
    gamma: f64,
    n: usize,
) -> Result<CertificationReport> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return Err(invalid(format!("gamma must be nonnegative, got {gamma}")));
    }
    let grid = FrequencyGrid::uniform(n)?;
    let w1r = rational_response(w1, &grid)?;
    let loops = loop_responses(k, g_fir, &grid)?;
    let mut worst = f64::NEG_INFINITY;
    let mut peak = 0.0;
    let mut max_w1_s: f64 = 0.0;
    let mut max_ks: f64 = 0.0;
    for (i, ((s, ks), w)) in loops.iter().zip(&w1r).enumerate() {
        let a = (w * s).norm();
        let b = gamma * ks.norm();
        max_w1_s = max_w1_s.max(a);
        max_ks = max_ks.max(b);
        if a + b > worst {
            worst = a + b;
            let ang = 2.0 * PI * i as f64 / n as f64;
            peak = if ang > PI { 2.0 * PI - ang } else { ang };
        }
    }
    Ok(CertificationReport {
        perf_margin: 1.0 - worst,
        stable_smallgain: max_ks < 1.0,
        nominal_stable: nominal_stable(k, g_fir),
        grid_n: n,
        gamma,
        peak_frequency: peak,
        max_w1_s,
        max_gamma_ks: max_ks,
    })
}

/// Signals of one closed-loop run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoop {
    pub y: Vec<f64>,
    pub e: Vec<f64>,
    pub u: Vec<f64>,
}

/// Steps the loop `e_t = ref_t - (y_t + noise_t)`, `u = K e`, `y = G u`, solving the
/// direct-feedthrough equation for `e_t` at every step.
pub fn simulate_closed_loop(
    g: &FirFilter,
    k: &RationalFilter,
    reference: &[f64],
    noise: &[f64],
    steps: usize,
) -> Result<ClosedLoop> {
    k.validate()?;
    if reference.len() < steps || noise.len() < steps {
        return Err(invalid(format!(
            "reference ({}) and noise ({}) must cover {steps} steps",
            reference.len(),
            noise.len()
        )));
    }
    let gc = g.coeffs();
    let d0 = k.den[0];
    let a = k.num[0] / d0;
    let g0 = gc[0];
    let lead = 1.0 + g0 * a;
    if lead.abs() <= POSED_TOL {
        return Err(Error::IllPosedLoop(format!(
            "feedthrough K_0 g_0 = {} makes the algebraic loop singular",
            g0 * a
        )));
    }
    let mut y = Vec::with_capacity(steps);
    let mut e: Vec<f64> = Vec::with_capacity(steps);
    let mut u: Vec<f64> = Vec::with_capacity(steps);
    for t in 0..steps {
        // controller terms not involving e_t
        let mut b = 0.0;
        for (i, &ni) in k.num.iter().enumerate().skip(1).take(t) {
            b += ni * e[t - i];
        }
        for (j, &dj) in k.den.iter().enumerate().skip(1).take(t) {
            b -= dj * u[t - j];
        }
        b /= d0;
        // plant terms not involving u_t
        let mut c = 0.0;
        for (i, &gi) in gc.iter().enumerate().skip(1).take(t) {
            c += gi * u[t - i];
        }
        let et = (reference[t] - noise[t] - g0 * b - c) / lead;
        let ut = a * et + b;
        e.push(et);
        u.push(ut);
        y.push(g0 * ut + c);
    }
    Ok(ClosedLoop { y, e, u })
}

/// Step-response metrics on the final constant segment of the reference.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackingMetrics {
    pub overshoot: f64,
    pub settle_time: usize,
    pub steady_error: f64,
}

/// Overshoot relative to the step size, first index (from the start of the final
/// segment) after which `|y - ref|` stays within 2% of the step, and the mean
/// `|y - ref|` over the last 10% of the signal.
pub fn tracking_metrics(y: &[f64], reference: &[f64]) -> Result<TrackingMetrics> {
    let n = y.len().min(reference.len());
    if n == 0 {
        return Err(invalid("tracking metrics need nonempty signals"));
    }
    let start = (1..n).rev().find(|&i| reference[i] != reference[i - 1]).unwrap_or(0);
    let target = reference[n - 1];
    let before = if start > 0 { reference[start - 1] } else { 0.0 };
    let mut step = (target - before).abs();
    if step == 0.0 {
        step = 1.0;
    }
    let dir = if target >= before { 1.0 } else { -1.0 };
    let overshoot = (start..n).map(|t| dir * (y[t] - target)).fold(0.0, f64::max) / step;
    let band = 0.02 * step;
    let settle_time = (start..n)
        .rev()
        .find(|&t| (y[t] - reference[t]).abs() > band)
        .map_or(0, |t| t + 1 - start);
    let tail = (n / 10).max(1);
    let steady_error = (n - tail..n).map(|t| (y[t] - reference[t]).abs()).sum::<f64>() / tail as f64;
    Ok(TrackingMetrics {
        overshoot,
        settle_time,
        steady_error,
    })
}

/// Places the heuristic PI zero (`k_i / k_p`) at this fraction of the crossover.
pub const PI_ZERO_RATIO: f64 = 0.25;

/// `(k_p + k_i / (1 - z^{-1})) (1 - p) / (1 - p z^{-1})`: PI with a unit-DC-gain
/// first-order roll-off at pole `p`; `p = 0` is the plain PI.
pub fn pi_rolloff(kp: f64, ki: f64, p: f64) -> RationalFilter {
    if p == 0.0 {
        return RationalFilter::pi(kp, ki);
    }
    let s = 1.0 - p;
    RationalFilter {
        num: vec![s * (kp + ki), -s * kp],
        den: vec![1.0, -1.0 - p, p],
        ts: 1.0,
    }
}

/// Gain `kp` of `shape(kp)` for which `|K G|` crosses 1 at `wc`. The loop gain is
/// linear in `kp`; bisection on a doubling bracket keeps this robust to scaling.
fn crossover_gain<F: Fn(f64) -> RationalFilter>(g: &FirFilter, wc: f64, shape: F) -> Result<f64> {
    if !(wc > 0.0 && wc < PI) {
        return Err(invalid(format!("crossover must lie in (0, pi), got {wc}")));
    }
    let z = Complex64::from_polar(1.0, wc);
    let gz = g.eval_unit(z).norm();
    if !(gz > 0.0) {
        return Err(invalid("plant has no gain at the requested crossover"));
    }
    let gain = |kp: f64| shape(kp).eval_unit(z).norm() * gz;
    let (mut lo, mut hi) = (0.0, 1.0);
    while gain(hi) < 1.0 {
        hi *= 2.0;
        if !hi.is_finite() {
            return Err(invalid("could not bracket the crossover gain"));
        }
    }
    loop {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if gain(mid) < 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Discrete PI `k_p + k_i / (1 - z^{-1})` with `k_i = PI_ZERO_RATIO * wc * k_p` and
/// `k_p` found by bisection so that `|K G|` crosses 1 at `wc`.
pub fn pi_heuristic(g: &FirFilter, wc: f64) -> Result<RationalFilter> {
    let ratio = PI_ZERO_RATIO * wc;
    let kp = crossover_gain(g, wc, |kp| RationalFilter::pi(kp, ratio * kp))?;
    Ok(RationalFilter::pi(kp, ratio * kp))
}

/// Best controller found by [`tune_controller`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TunedController {
    pub controller: RationalFilter,
    pub crossover: f64,
    /// `k_i / k_p`.
    pub zero: f64,
    pub rolloff: f64,
    pub report: CertificationReport,
}

const TUNE_CROSSOVERS: usize = 24;
const TUNE_ZEROS: [f64; 9] = [0.01, 0.02, 0.04, 0.07, 0.1, 0.15, 0.2, 0.3, 0.5];
const TUNE_ROLLOFFS: [f64; 7] = [0.0, 0.3, 0.5, 0.7, 0.8, 0.9, 0.95];

/// Grid search over [`pi_rolloff`] controllers (crossover in `[0.02, 0.4]`, zero
/// and roll-off from fixed lists) for the largest margin of [`certify`] on an
/// `n`-point grid among nominally stabilizing candidates.
pub fn tune_controller(w1: &RationalFilter, g: &FirFilter, gamma: f64, n: usize) -> Result<TunedController> {
    let grid = FrequencyGrid::uniform(n)?;
    let w1r = rational_response(w1, &grid)?;
    let mut candidates: Vec<(f64, f64, f64, f64, f64)> = map_range(TUNE_CROSSOVERS, |i| {
        let wc = 0.02 * 20f64.powf(i as f64 / (TUNE_CROSSOVERS - 1) as f64);
        let mut out = Vec::new();
        for &zero in &TUNE_ZEROS {
            for &p in &TUNE_ROLLOFFS {
                let Ok(kp) = crossover_gain(g, wc, |kp| pi_rolloff(kp, zero * kp, p)) else {
                    continue;
                };
                let k = pi_rolloff(kp, zero * kp, p);
                let Ok(loops) = loop_responses(&k, g, &grid) else {
                    continue;
                };
                let worst = loops
                    .iter()
                    .zip(&w1r)
                    .map(|((s, ks), w)| (w * s).norm() + gamma * ks.norm())
                    .fold(0.0, f64::max);
                out.push((1.0 - worst, wc, zero, p, kp));
            }
        }
        out
    })
    .into_iter()
    .flatten()
    .collect();
    candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.total_cmp(&b.1)));
    for (_, wc, zero, p, kp) in candidates {
        let k = pi_rolloff(kp, zero * kp, p);
        if nominal_stable(&k, g) {
            let report = certify(w1, &k, g, gamma, n)?;
            return Ok(TunedController {
                controller: k,
                crossover: wc,
                zero,
                rolloff: p,
                report,
            });
        }
    }
    Err(invalid("no candidate controller stabilizes the nominal model"))
}

/// Outcome of simulating and evaluating one perturbed plant `G_fir + Delta`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationOutcome {
    pub index: usize,
    pub delta_hinf: f64,
    pub stable: bool,
    pub bounded: bool,
    pub peak_output: f64,
    /// `max_k |T_{r->e}| |W1|` on the grid; at most 1.05 counts as meeting the performance goal.
    pub perf_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSweep {
    pub gamma: f64,
    pub perf_margin: f64,
    pub boundedness_violations: usize,
    pub performance_violations: usize,
    pub outcomes: Vec<PerturbationOutcome>,
}

/// Random FIR perturbation `i` with certified `||Delta||_inf <= gamma`.
pub fn random_perturbation(seed: u64, i: usize, taps: usize, gamma: f64) -> Result<FirFilter> {
    let mut s = GaussianStream::new(derive_seed(seed, PERTURB), i as u64);
    let raw = FirFilter::new(s.normals(taps))?;
    let cert = sup_norm(&raw, min_certified_grid(taps).max(1024))?.certified_upper;
    Ok(raw.scale(gamma / cert))
}

/// Simulates `count` perturbed loops `G_fir + Delta_i` for `steps` steps of a unit
/// step reference and checks boundedness and the performance goal
/// `|T_{r->e}| <= 1.05 / |W1|` on an `n`-point grid.
#[allow(clippy::too_many_arguments)]
pub fn perturbation_sweep(
    w1: &RationalFilter,
    k: &RationalFilter,
    g_fir: &FirFilter,
    gamma: f64,
    count: usize,
    steps: usize,
    n: usize,
    seed: u64,
) -> Result<PerturbationSweep> {
    let report = certify(w1, k, g_fir, gamma, n)?;
    let grid = FrequencyGrid::uniform(n)?;
    let w1r = rational_response(w1, &grid)?;
    let reference = vec![1.0; steps];
    let noise = vec![0.0; steps];
    let taps = g_fir.len();
    let outcomes = map_range(count, |i| -> Result<PerturbationOutcome> {
        let delta = random_perturbation(seed, i, taps, gamma)?;
        let g = g_fir.add(&delta);
        let stable = nominal_stable(k, &g);
        let sim = simulate_closed_loop(&g, k, &reference, &noise, steps)?;
        let peak_output = sim.y.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let bounded = peak_output.is_finite() && peak_output <= 1e6;
        let perf_ratio = loop_responses(k, &g, &grid)?
            .iter()
            .zip(&w1r)
            .map(|((s, _), w)| (s * w).norm())
            .fold(0.0, f64::max);
        Ok(PerturbationOutcome {
            index: i,
            delta_hinf: gamma,
            stable,
            bounded,
            peak_output,
            perf_ratio,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let boundedness_violations = outcomes.iter().filter(|o| !(o.bounded && o.stable)).count();
    let performance_violations = if report.perf_margin > 0.0 {
        outcomes.iter().filter(|o| o.perf_ratio > 1.05).count()
    } else {
        0
    };
    Ok(PerturbationSweep {
        gamma,
        perf_margin: report.perf_margin,
        boundedness_violations,
        performance_violations,
        outcomes,
    })
}
