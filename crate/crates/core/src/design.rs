//! Input ensembles for identification under an lp amplitude budget, the
//! A-optimal objective `Tr([Sigma(u)^{-1}]_{[r]})`, and its convex lower bound `D_p(T, r)`.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{invalid, Error, Result};

/// Condition number beyond which a design is declared singular.
pub const SINGULAR_CONDITION: f64 = 1e12;

/// Serde helper for an extended-real exponent: finite values are numbers, `inf` is a string.
pub mod pnorm {
    use super::*;

    pub fn serialize<S: Serializer>(p: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if p.is_finite() {
            s.serialize_f64(*p)
        } else {
            s.serialize_str("inf")
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Str(s) => parse(&s).map_err(serde::de::Error::custom),
        }
    }

    /// Parses a number or `inf` / `infinity`.
    pub fn parse(s: &str) -> std::result::Result<f64, String> {
        match s.trim().to_ascii_lowercase().as_str() {
            "inf" | "infinity" | "+inf" => Ok(f64::INFINITY),
            t => t.parse().map_err(|_| format!("not a norm exponent: {s:?}")),
        }
    }
}

fn fmt_p(p: f64) -> String {
    if p.is_finite() {
        format!("{p:?}")
    } else {
        "inf".to_string()
    }
}

/// lp norm for `p` in `[1, inf]`.
pub fn lp_norm(x: &[f64], p: f64) -> f64 {
    if p.is_infinite() {
        x.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    } else if p == 2.0 {
        x.iter().map(|v| v * v).sum::<f64>().sqrt()
    } else if p == 1.0 {
        x.iter().map(|v| v.abs()).sum()
    } else {
        let scale = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if scale == 0.0 {
            return 0.0;
        }
        scale * x.iter().map(|v| (v.abs() / scale).powf(p)).sum::<f64>().powf(1.0 / p)
    }
}

/// Shape of a design problem: `m` inputs of length `T`, each in the unit lp ball, target length `r`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignSpec {
    #[serde(with = "pnorm")]
    pub p: f64,
    pub m: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub r: usize,
}

impl DesignSpec {
    pub fn new(p: f64, m: usize, t: usize, r: usize) -> Result<Self> {
        let s = Self { p, m, t, r };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p >= 1.0) {
            return Err(invalid(format!("p must lie in [1, inf], got {}", self.p)));
        }
        if self.m < 1 {
            return Err(invalid("m must be at least 1"));
        }
        if !(1 <= self.r && self.r <= self.t) {
            return Err(invalid(format!("need 1 <= r <= T, got r = {}, T = {}", self.r, self.t)));
        }
        Ok(())
    }
}

/// `m` equal-length inputs, each certified to satisfy `||u_i||_p <= 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct InputEnsemble {
    inputs: Vec<Vec<f64>>,
    p_certificate: f64,
}

#[derive(Serialize, Deserialize)]
struct EnsembleFile {
    #[serde(with = "pnorm")]
    p: f64,
    #[serde(rename = "T")]
    t: usize,
    m: usize,
    inputs: Vec<Vec<f64>>,
}

impl InputEnsemble {
    pub fn new(inputs: Vec<Vec<f64>>, p_certificate: f64) -> Result<Self> {
        if inputs.is_empty() {
            return Err(invalid("ensemble needs at least one input"));
        }
        if !(p_certificate >= 1.0) {
            return Err(invalid(format!("p must lie in [1, inf], got {p_certificate}")));
        }
        let t = inputs[0].len();
        if t == 0 {
            return Err(invalid("inputs must be nonempty"));
        }
        for (i, u) in inputs.iter().enumerate() {
            if u.len() != t {
                return Err(Error::DimensionMismatch {
                    expected: t,
                    got: u.len(),
                });
            }
            if u.iter().any(|v| !v.is_finite()) {
                return Err(invalid(format!("input {i} has non-finite entries")));
            }
            let norm = lp_norm(u, p_certificate);
            if norm > 1.0 + 1e-12 {
                return Err(invalid(format!(
                    "input {i} has l{} norm {norm} > 1",
                    fmt_p(p_certificate)
                )));
            }
        }
        Ok(Self { inputs, p_certificate })
    }

    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.inputs
    }

    pub fn p_certificate(&self) -> f64 {
        self.p_certificate
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn input_len(&self) -> usize {
        self.inputs[0].len()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&EnsembleFile {
            p: self.p_certificate,
            t: self.input_len(),
            m: self.len(),
            inputs: self.inputs.clone(),
        })
        .expect("ensemble serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: EnsembleFile = serde_json::from_str(text)?;
        let e = Self::new(f.inputs, f.p)?;
        if e.len() != f.m || e.input_len() != f.t {
            return Err(Error::Parse(format!(
                "header says m = {}, T = {} but inputs are {} x {}",
                f.m,
                f.t,
                e.len(),
                e.input_len()
            )));
        }
        Ok(e)
    }

    /// One input per row, preceded by a `# p=..` line.
    pub fn to_csv(&self) -> String {
        let mut s = format!("# p={}\n", fmt_p(self.p_certificate));
        for u in &self.inputs {
            let row: Vec<String> = u.iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(s, "{}", row.join(","));
        }
        s
    }

    /// Reads the CSV form; without a `# p=` line the inputs are certified in l-infinity.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut p = f64::INFINITY;
        let mut inputs = Vec::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if let Some(meta) = line.strip_prefix('#') {
                if let Some(v) = meta.trim().strip_prefix("p=") {
                    p = pnorm::parse(v).map_err(Error::Parse)?;
                }
                continue;
            }
            let row = line
                .split(',')
                .map(|f| {
                    f.trim()
                        .parse::<f64>()
                        .map_err(|_| Error::Parse(format!("bad value {f:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            inputs.push(row);
        }
        Self::new(inputs, p)
    }
}

/// Amplitude profile `w` with `||w||_p <= 1` and its objective value `D_p(T, r)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DesignWeight {
    pub w: Vec<f64>,
    pub dp_value: f64,
    #[serde(with = "pnorm")]
    pub p: f64,
    /// Frank-Wolfe duality gap of the final iterate; `dp_value - gap` lower-bounds the optimum.
    pub gap: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl DesignWeight {
    /// Certified lower bound on the true `D_p(T, r)`.
    pub fn dp_lower(&self) -> f64 {
        (self.dp_value - self.gap).max(0.0)
    }
}

/// `Sigma(u)` with the A-optimal objective for a target length `r`.
#[derive(Clone, Debug, PartialEq)]
pub struct CovarianceSummary {
    pub sigma_matrix: DMatrix<f64>,
    pub trace_inv_r: f64,
    pub is_diagonal: bool,
    pub condition_number: f64,
    /// `[Sigma^{-1}]_{[r]}`, the leading `r x r` block of the inverse.
    pub inv_r_block: DMatrix<f64>,
}

/// `H_n = sum_{k=1}^n 1/k`.
pub fn harmonic(n: usize) -> f64 {
    (1..=n).rev().map(|k| 1.0 / k as f64).sum()
}

/// `sum_{i=1}^r [sum_{l=1}^{T-r+i} w_l^2]^{-1}`.
pub fn dp_objective(w: &[f64], r: usize) -> f64 {
    let t = w.len();
    let mut prefix = 0.0;
    let mut total = 0.0;
    for (l, v) in w.iter().enumerate() {
        prefix += v * v;
        if l + 1 > t - r {
            total += 1.0 / prefix;
        }
    }
    total
}

/// All `m` inputs equal to the unit impulse `e_1`.
pub fn impulse_ensemble(spec: &DesignSpec) -> Result<InputEnsemble> {
    spec.validate()?;
    let mut e1 = vec![0.0; spec.t];
    e1[0] = 1.0;
    InputEnsemble::new(vec![e1; spec.m], spec.p.max(1.0))
}

/// Real and imaginary parts of `w .* phi(z_i)` at the `n = m/2` roots of unity;
/// `w = None` uses the all-ones profile.
pub fn sinusoid_ensemble(spec: &DesignSpec, w: Option<&DesignWeight>) -> Result<InputEnsemble> {
    spec.validate()?;
    if !spec.m.is_multiple_of(2) {
        return Err(Error::InfeasibleSpec(format!(
            "sinusoid ensemble needs even m, got {}",
            spec.m
        )));
    }
    let n = spec.m / 2;
    if n < spec.t {
        return Err(Error::InfeasibleSpec(format!(
            "sinusoid ensemble needs m/2 >= T, got m = {}, T = {}",
            spec.m, spec.t
        )));
    }
    let (profile, p) = match w {
        Some(dw) => {
            if dw.w.len() != spec.t {
                return Err(Error::DimensionMismatch {
                    expected: spec.t,
                    got: dw.w.len(),
                });
            }
            (dw.w.clone(), dw.p)
        }
        None => (vec![1.0; spec.t], f64::INFINITY),
    };
    let mut re = Vec::with_capacity(n);
    let mut im = Vec::with_capacity(n);
    for i in 0..n {
        let mut a = Vec::with_capacity(spec.t);
        let mut b = Vec::with_capacity(spec.t);
        for (t, wt) in profile.iter().enumerate() {
            // Reduce the phase index mod n before scaling to keep the angle exact-ish.
            let theta = 2.0 * PI * ((i * t) % n) as f64 / n as f64;
            a.push(wt * theta.cos());
            b.push(wt * theta.sin());
        }
        re.push(a);
        im.push(b);
    }
    re.extend(im);
    InputEnsemble::new(re, p)
}

/// `2^n` mutually orthogonal `+-1` vectors of length `2^n` built by `u -> (u, u), (u, -u)`.
pub fn hadamard_ensemble(n: u32) -> Result<InputEnsemble> {
    if n > 20 {
        return Err(invalid(format!("Hadamard order 2^{n} is too large")));
    }
    let mut rows = vec![vec![1.0]];
    for _ in 0..n {
        let mut next = Vec::with_capacity(rows.len() * 2);
        for u in &rows {
            let plus: Vec<f64> = u.iter().chain(u.iter()).copied().collect();
            let minus: Vec<f64> = u.iter().copied().chain(u.iter().map(|v| -v)).collect();
            next.push(plus);
            next.push(minus);
        }
        rows = next;
    }
    InputEnsemble::new(rows, f64::INFINITY)
}

/// Adds `Toep(u)^T Toep(u)` (square `T x T` sections) scaled by `weight` into `acc`.
fn accumulate_gram(u: &[f64], weight: f64, acc: &mut DMatrix<f64>) {
    let t = u.len();
    // lag[d][k] = sum_{s<k} u[s] u[s+d]
    for d in 0..t {
        let mut prefix = vec![0.0; t - d + 1];
        for s in 0..t - d {
            prefix[s + 1] = prefix[s] + u[s] * u[s + d];
        }
        for j in d..t {
            let i = j - d;
            // max(i, j) = j
            let v = weight * prefix[t - j];
            acc[(i, j)] += v;
            if d > 0 {
                acc[(j, i)] += v;
            }
        }
    }
}

/// `Sigma(u) = sum_k Toep(u_k)^T Toep(u_k)`; repeated inputs are accumulated once with multiplicity.
pub fn gram_matrix(e: &InputEnsemble) -> DMatrix<f64> {
    let t = e.input_len();
    let mut groups: BTreeMap<Vec<u64>, (usize, usize)> = BTreeMap::new();
    for (idx, u) in e.inputs().iter().enumerate() {
        let key: Vec<u64> = u.iter().map(|v| v.to_bits()).collect();
        groups.entry(key).or_insert((idx, 0)).1 += 1;
    }
    let mut order: Vec<(usize, usize)> = groups.into_values().collect();
    order.sort_unstable();
    let mut acc = DMatrix::zeros(t, t);
    for (idx, count) in order {
        accumulate_gram(&e.inputs()[idx], count as f64, &mut acc);
    }
    acc
}

/// Condition number via symmetric eigenvalues; infinite when not positive definite.
pub fn condition_number(m: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new(m.clone());
    let max = eig.eigenvalues.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let min = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    if !(min > 0.0) {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Inverse of a symmetric positive definite matrix, rejecting ill-conditioned input.
pub fn spd_inverse(m: &DMatrix<f64>) -> Result<(DMatrix<f64>, f64)> {
    let cond = condition_number(m);
    if !(cond <= SINGULAR_CONDITION) {
        return Err(Error::SingularDesign { condition: cond });
    }
    let chol = m.clone().cholesky().ok_or(Error::SingularDesign { condition: cond })?;
    Ok((chol.inverse(), cond))
}

/// Exact `Sigma(u)` and `Tr([Sigma^{-1}]_{[r]})`.
pub fn covariance(e: &InputEnsemble, r: usize) -> Result<CovarianceSummary> {
    let t = e.input_len();
    if !(1..=t).contains(&r) {
        return Err(invalid(format!("need 1 <= r <= T = {t}, got {r}")));
    }
    let sigma = gram_matrix(e);
    let (inv, cond) = spd_inverse(&sigma)?;
    let trace: f64 = sigma.diagonal().iter().sum();
    let off: f64 = (0..t)
        .flat_map(|i| (0..t).map(move |j| (i, j)))
        .filter(|(i, j)| i != j)
        .map(|(i, j)| sigma[(i, j)].abs())
        .sum();
    let inv_r_block = inv.view((0, 0), (r, r)).into_owned();
    Ok(CovarianceSummary {
        trace_inv_r: inv_r_block.trace(),
        is_diagonal: off < 1e-10 * trace,
        condition_number: cond,
        sigma_matrix: sigma,
        inv_r_block,
    })
}

/// Sandwich `(T-r+1)^{2/p} (H_T - H_{T-r}) <= D_p(T, r) <= T^{2/p} (H_T - H_{T-r})`.
pub fn dp_bounds(p: f64, t: usize, r: usize) -> Result<(f64, f64)> {
    if !(p > 2.0) {
        return Err(invalid(format!("D_p sandwich needs p > 2, got {p}")));
    }
    if !(1..=t).contains(&r) {
        return Err(invalid(format!("need 1 <= r <= T, got r = {r}, T = {t}")));
    }
    let h = harmonic_diff(t, r);
    let e = 2.0 / p;
    Ok((((t - r + 1) as f64).powf(e) * h, (t as f64).powf(e) * h))
}

/// `H_T - H_{T-r}` summed directly over the `r` terms.
pub fn harmonic_diff(t: usize, r: usize) -> f64 {
    (t - r + 1..=t).rev().map(|k| 1.0 / k as f64).sum()
}

/// Maximal value of the restricted quadratic form over the lp ball, or its upper bound.
/// Returns `(value, is_exact)`.
pub fn a_p_value(p: f64, r: usize) -> Result<(f64, bool)> {
    if r < 1 || !(p >= 1.0) {
        return Err(invalid(format!("need r >= 1 and p >= 1, got r = {r}, p = {p}")));
    }
    let r_f = r as f64;
    Ok(if p <= 2.0 {
        (r_f, true)
    } else if p.is_infinite() {
        ((1..=2 * r).map(|k| k.min(r) as f64).sum(), true)
    } else {
        (4.0 * r_f.powf(2.0 * (p - 1.0) / p), false)
    })
}

/// `max_{k, l} phi_l(z_k)^T [Sigma^{-1}]_{[r]} phi_l(z_k)` over an `s`-point grid,
/// where `phi_1, phi_2` are the real and imaginary parts of `(1, z, .., z^{r-1})`.
pub fn grid_objective(e: &InputEnsemble, r: usize, s: usize) -> Result<f64> {
    let required = crate::lti::min_certified_grid(r);
    if s < required {
        return Err(Error::GridTooSmall { n: s, required });
    }
    let cov = covariance(e, r)?;
    Ok(grid_objective_block(&cov.inv_r_block, s))
}

pub(crate) fn grid_objective_block(v: &DMatrix<f64>, s: usize) -> f64 {
    let r = v.nrows();
    let mut best = 0.0f64;
    let mut re = vec![0.0; r];
    let mut im = vec![0.0; r];
    for k in 0..s {
        for (i, (a, b)) in re.iter_mut().zip(im.iter_mut()).enumerate() {
            let theta = 2.0 * PI * ((k * i) % s) as f64 / s as f64;
            *a = theta.cos();
            *b = theta.sin();
        }
        for x in [&re, &im] {
            let mut q = 0.0;
            for i in 0..r {
                let mut row = 0.0;
                for j in 0..r {
                    row += v[(i, j)] * x[j];
                }
                q += x[i] * row;
            }
            best = best.max(q);
        }
    }
    best
}

/// Euclidean projection onto `{s : s_l >= floor, sum s_l = 1}`.
fn project_simplex(v: &[f64], floor: f64) -> Vec<f64> {
    let radius = 1.0 - floor * v.len() as f64;
    let mut u: Vec<f64> = v.iter().map(|x| x - floor).collect();
    u.sort_unstable_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (j, x) in u.iter().enumerate() {
        cum += x;
        let t = (cum - radius) / (j + 1) as f64;
        if x - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|x| (x - floor - theta).max(0.0) + floor).collect()
}

struct DpProblem {
    t: usize,
    r: usize,
    a: f64,
}

impl DpProblem {
    fn value(&self, s: &[f64]) -> f64 {
        let mut prefix = 0.0;
        let mut total = 0.0;
        for (l, v) in s.iter().enumerate() {
            prefix += v.powf(self.a);
            if l + 1 > self.t - self.r {
                total += 1.0 / prefix;
            }
        }
        total
    }

    fn value_grad(&self, s: &[f64]) -> (f64, Vec<f64>) {
        let t = self.t;
        let mut partial = vec![0.0; t];
        let mut prefix = 0.0;
        for (l, v) in s.iter().enumerate() {
            prefix += v.powf(self.a);
            partial[l] = prefix;
        }
        // coefficient of s_l: sum over i with k_i >= l of S_i^{-2}; S_i = partial[T-r+i-1]
        let mut value = 0.0;
        let mut suffix = 0.0;
        let mut grad = vec![0.0; t];
        for l in (0..t).rev() {
            if l + 1 > t - self.r {
                value += 1.0 / partial[l];
                suffix += 1.0 / (partial[l] * partial[l]);
            }
            grad[l] = -self.a * s[l].powf(self.a - 1.0) * suffix;
        }
        (value, grad)
    }

    /// Damped move toward the stationarity fixed point; `None` if no decrease is found.
    fn fixed_point_step(&self, s: &[f64], g: &[f64], f: f64, floor: f64) -> Option<(Vec<f64>, f64)> {
        let q = 1.0 / (1.0 - self.a);
        // |g_l| = a s_l^{a-1} c_l, so c_l^{q} up to a common factor is (|g_l| s_l^{1-a})^{q}
        let logs: Vec<f64> = s
            .iter()
            .zip(g)
            .map(|(x, d)| q * (d.abs().ln() + (1.0 - self.a) * x.ln()))
            .collect();
        let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let raw: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
        let total: f64 = raw.iter().sum();
        let floored: Vec<f64> = raw.iter().map(|v| (v / total).max(floor)).collect();
        let norm: f64 = floored.iter().sum();
        let target: Vec<f64> = floored.iter().map(|v| v / norm).collect();
        let mut theta = 1.0;
        while theta > 1e-6 {
            let cand: Vec<f64> = s.iter().zip(&target).map(|(x, y)| x + theta * (y - x)).collect();
            let fc = self.value(&cand);
            if fc < f {
                return Some((cand, fc));
            }
            theta *= 0.5;
        }
        None
    }
}

/// Minimizes `sum_i [sum_{l <= T-r+i} w_l^2]^{-1}` over `||w||_p <= 1` for `p > 2`.
///
/// Works in `s_l = w_l^{p/2}` on the simplex, where the objective is convex, with projected
/// gradient steps (Barzilai-Borwein step, Armijo backtracking) stopped by the Frank-Wolfe gap.
/// Returns the best iterate; `converged` is false when the iteration cap is hit.
pub fn solve_dp_weight(p: f64, t: usize, r: usize, tol: f64) -> Result<DesignWeight> {
    solve_dp_weight_with(p, t, r, tol, 100_000)
}

pub fn solve_dp_weight_with(p: f64, t: usize, r: usize, tol: f64, max_iter: usize) -> Result<DesignWeight> {
    if !(p > 2.0) {
        return Err(invalid(format!("weight solver needs p > 2, got {p}")));
    }
    if !(1..=t).contains(&r) {
        return Err(invalid(format!("need 1 <= r <= T, got r = {r}, T = {t}")));
    }
    if !(tol > 0.0) {
        return Err(invalid("tolerance must be positive"));
    }
    if p.is_infinite() {
        let w = vec![1.0; t];
        return Ok(DesignWeight {
            dp_value: dp_objective(&w, r),
            w,
            p,
            gap: 0.0,
            converged: true,
            iterations: 0,
        });
    }
    let prob = DpProblem { t, r, a: 2.0 / p };
    // Iterates stay strictly inside the simplex, where the gradient is finite and the
    // Frank-Wolfe gap remains a valid certificate for the whole simplex.
    let floor = 1e-12 / t as f64;
    let mut s = vec![1.0 / t as f64; t];
    let (mut f, mut g) = prob.value_grad(&s);
    let mut step = 1.0 / g.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    let mut best = (f, s.clone(), f64::INFINITY);
    let mut converged = false;
    let mut iterations = 0;
    for it in 0..max_iter {
        iterations = it + 1;
        let gmin = g.iter().copied().fold(f64::INFINITY, f64::min);
        let gap = s.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>() - gmin;
        if f < best.0 || (f == best.0 && gap < best.2) {
            best = (f, s.clone(), gap);
        }
        if gap <= tol * (1.0 + f.abs()) {
            best = (f, s.clone(), gap);
            converged = true;
            break;
        }
        // Stationarity forces s_l proportional to |g_l / s_l^{a-1}|^{1/(1-a)}; try a damped
        // step toward that point first, and fall back to a projected-gradient step.
        let (s_new, f_new) = match prob.fixed_point_step(&s, &g, f, floor) {
            Some(v) => v,
            None => {
                let mut alpha = step;
                loop {
                    let trial: Vec<f64> = s.iter().zip(&g).map(|(x, d)| x - alpha * d).collect();
                    let cand = project_simplex(&trial, floor);
                    let fc = prob.value(&cand);
                    let decrease: f64 = cand.iter().zip(&s).zip(&g).map(|((c, x), d)| d * (c - x)).sum();
                    if fc <= f + 1e-4 * decrease || alpha < 1e-30 {
                        break (cand, fc);
                    }
                    alpha *= 0.5;
                }
            }
        };
        let (_, g_new) = prob.value_grad(&s_new);
        let ds: Vec<f64> = s_new.iter().zip(&s).map(|(a, b)| a - b).collect();
        let dg: Vec<f64> = g_new.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy: f64 = ds.iter().zip(&dg).map(|(a, b)| a * b).sum();
        let ss: f64 = ds.iter().map(|a| a * a).sum();
        step = if sy > 0.0 && ss > 0.0 {
            (ss / sy).clamp(1e-20, 1e20)
        } else {
            step * 2.0
        };
        if ss == 0.0 {
            // Stalled at numerical precision; keep the certificate we have.
            break;
        }
        s = s_new;
        f = f_new;
        g = g_new;
    }
    let (_, s_best, gap) = best;
    let w: Vec<f64> = s_best.iter().map(|v| v.powf(1.0 / p)).collect();
    let dp_value = dp_objective(&w, r);
    Ok(DesignWeight {
        w,
        dp_value,
        p,
        gap,
        converged,
        iterations,
    })
}

/// Ensemble construction strategies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnsembleKind {
    Impulse,
    Sinusoid,
    Hadamard,
    Auto,
}

impl std::str::FromStr for EnsembleKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "impulse" => Ok(Self::Impulse),
            "sinusoid" => Ok(Self::Sinusoid),
            "hadamard" => Ok(Self::Hadamard),
            "auto" => Ok(Self::Auto),
            _ => Err(Error::Parse(format!("unknown ensemble {s:?}"))),
        }
    }
}

/// Exponent `n` with `x = 2^n`, if any.
fn log2_exact(x: usize) -> Option<u32> {
    x.is_power_of_two().then(|| x.trailing_zeros())
}

/// Resolves `Auto`: impulse for `p <= 2`, Hadamard for `p = inf` with `r = T = m = 2^n`,
/// weighted sinusoids otherwise.
pub fn resolve_kind(spec: &DesignSpec, kind: EnsembleKind) -> EnsembleKind {
    match kind {
        EnsembleKind::Auto => {
            if spec.p <= 2.0 {
                EnsembleKind::Impulse
            } else if spec.p.is_infinite() && spec.r == spec.t && spec.m == spec.t && log2_exact(spec.t).is_some() {
                EnsembleKind::Hadamard
            } else {
                EnsembleKind::Sinusoid
            }
        }
        k => k,
    }
}

/// Ensemble plus the weight profile used to build it (sinusoid designs only).
#[derive(Clone, Debug)]
pub struct BuiltDesign {
    pub kind: EnsembleKind,
    pub ensemble: InputEnsemble,
    pub weight: Option<DesignWeight>,
}

pub fn build_ensemble(spec: &DesignSpec, kind: EnsembleKind) -> Result<BuiltDesign> {
    spec.validate()?;
    let kind = resolve_kind(spec, kind);
    match kind {
        EnsembleKind::Impulse => Ok(BuiltDesign {
            kind,
            ensemble: impulse_ensemble(spec)?,
            weight: None,
        }),
        EnsembleKind::Hadamard => {
            let n = log2_exact(spec.t).filter(|_| spec.m == spec.t).ok_or_else(|| {
                Error::InfeasibleSpec(format!(
                    "Hadamard ensemble needs m = T = 2^n, got m = {}, T = {}",
                    spec.m, spec.t
                ))
            })?;
            Ok(BuiltDesign {
                kind,
                ensemble: hadamard_ensemble(n)?,
                weight: None,
            })
        }
        EnsembleKind::Sinusoid => {
            if !spec.m.is_multiple_of(2) || spec.m / 2 < spec.t {
                return Err(Error::InfeasibleSpec(format!(
                    "sinusoid ensemble needs even m with m/2 >= T, got m = {}, T = {}",
                    spec.m, spec.t
                )));
            }
            let weight = if spec.p > 2.0 {
                Some(solve_dp_weight(spec.p, spec.t, spec.r, 1e-8)?)
            } else {
                None
            };
            let mut ensemble = sinusoid_ensemble(spec, weight.as_ref())?;
            if spec.p <= 2.0 {
                // all-ones inputs only satisfy the l-infinity budget; rescale into the lp ball
                let scale = (spec.t as f64).powf(-1.0 / spec.p);
                ensemble = InputEnsemble::new(
                    ensemble
                        .inputs()
                        .iter()
                        .map(|u| u.iter().map(|v| v * scale).collect())
                        .collect(),
                    spec.p,
                )?;
            }
            Ok(BuiltDesign { kind, ensemble, weight })
        }
        EnsembleKind::Auto => unreachable!("resolved above"),
    }
}

/// Lower bound `(1/m) D_p(T, r)` on the A-optimal objective over the lp ball,
/// together with whether it is exact (`p <= 2` or `p = inf`) or certified via a solver gap.
pub fn objective_lower_bound(spec: &DesignSpec) -> Result<f64> {
    spec.validate()?;
    let m = spec.m as f64;
    Ok(if spec.p <= 2.0 {
        spec.r as f64 / m
    } else if spec.p.is_infinite() {
        harmonic_diff(spec.t, spec.r) / m
    } else {
        solve_dp_weight(spec.p, spec.t, spec.r, 1e-8)?.dp_lower() / m
    })
}
