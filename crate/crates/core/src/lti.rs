//! Impulse-response filters, Toeplitz operators, frequency grids and
//! certified sup-norm estimates for finite polynomials on the unit circle.

use std::f64::consts::PI;
use std::fmt::Write as _;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Finite impulse response `g_0 .. g_{L-1}`, transfer function
/// `G(z) = sum_k g_k z^{-k}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "FirRepr")]
pub struct FirFilter {
    coeffs: Vec<f64>,
}

#[derive(Deserialize)]
struct FirRepr {
    coeffs: Vec<f64>,
}

impl TryFrom<FirRepr> for FirFilter {
    type Error = Error;
    fn try_from(r: FirRepr) -> Result<Self> {
        FirFilter::new(r.coeffs)
    }
}

impl FirFilter {
    pub fn new(coeffs: Vec<f64>) -> Result<Self> {
        if coeffs.is_empty() {
            return Err(invalid("FIR filter needs at least one coefficient"));
        }
        if let Some(i) = coeffs.iter().position(|c| !c.is_finite()) {
            return Err(invalid(format!("coefficient {i} is not finite")));
        }
        Ok(Self { coeffs })
    }

    /// Unit impulse `e_1` padded to `len` taps.
    pub fn impulse(len: usize) -> Self {
        let mut coeffs = vec![0.0; len.max(1)];
        coeffs[0] = 1.0;
        Self { coeffs }
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.coeffs
    }

    pub fn into_coeffs(self) -> Vec<f64> {
        self.coeffs
    }

    pub fn len(&self) -> usize {
        self.coeffs.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// First `r` taps, zero padded when the filter is shorter.
    pub fn truncate(&self, r: usize) -> FirFilter {
        let r = r.max(1);
        let mut c = vec![0.0; r];
        let k = r.min(self.coeffs.len());
        c[..k].copy_from_slice(&self.coeffs[..k]);
        FirFilter { coeffs: c }
    }

    /// Coefficient-wise difference, padding the shorter filter with zeros.
    pub fn sub(&self, other: &FirFilter) -> FirFilter {
        self.combine(other, 1.0, -1.0)
    }

    pub fn add(&self, other: &FirFilter) -> FirFilter {
        self.combine(other, 1.0, 1.0)
    }

    /// `a * self + b * other`.
    pub fn combine(&self, other: &FirFilter, a: f64, b: f64) -> FirFilter {
        let n = self.len().max(other.len());
        let coeffs = (0..n)
            .map(|i| a * self.coeffs.get(i).copied().unwrap_or(0.0) + b * other.coeffs.get(i).copied().unwrap_or(0.0))
            .collect();
        FirFilter { coeffs }
    }

    pub fn scale(&self, a: f64) -> FirFilter {
        FirFilter {
            coeffs: self.coeffs.iter().map(|c| a * c).collect(),
        }
    }

    /// Response at z = 1.
    pub fn dc_gain(&self) -> f64 {
        self.coeffs.iter().sum()
    }

    /// `sum_k g_k z^{-k}` at an arbitrary nonzero `z`.
    pub fn eval(&self, z: Complex64) -> Complex64 {
        horner(&self.coeffs, z.inv())
    }

    /// `sum_k g_k z^{-k}` for `z` on the unit circle, where `z^{-1} = conj(z)`.
    pub fn eval_unit(&self, z: Complex64) -> Complex64 {
        horner(&self.coeffs, z.conj())
    }

    /// One coefficient per line, lag ascending.
    pub fn to_csv(&self) -> String {
        let mut s = String::with_capacity(self.coeffs.len() * 24);
        for c in &self.coeffs {
            let _ = writeln!(s, "{c:?}");
        }
        s
    }

    /// Parses one coefficient per line. Blank lines and `#` comments are skipped.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut coeffs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let field = line.split(',').next().unwrap_or("").trim();
            let v: f64 = field
                .parse()
                .map_err(|_| Error::Parse(format!("line {}: {field:?} is not a number", lineno + 1)))?;
            coeffs.push(v);
        }
        Self::new(coeffs)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("FIR filter serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }
}

/// Evaluates `sum_k c_k w^k`.
pub(crate) fn horner(c: &[f64], w: Complex64) -> Complex64 {
    c.iter().rev().fold(Complex64::new(0.0, 0.0), |acc, &ck| acc * w + ck)
}

/// Upper-left `rows x cols` section of the lower-triangular Toeplitz operator
/// generated by the zero-padded sequence `generator`.
#[derive(Clone, Debug, PartialEq)]
pub struct ToeplitzOp {
    pub generator: Vec<f64>,
    pub rows: usize,
    pub cols: usize,
}

impl ToeplitzOp {
    pub fn new(generator: Vec<f64>, rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(invalid("Toeplitz section needs positive dimensions"));
        }
        Ok(Self { generator, rows, cols })
    }

    /// Square `T x T` section with `T = len(u)`, the `Toep(u)` of the regression model.
    pub fn square(u: &[f64]) -> Self {
        Self {
            generator: u.to_vec(),
            rows: u.len(),
            cols: u.len(),
        }
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        if i >= j {
            self.generator.get(i - j).copied().unwrap_or(0.0)
        } else {
            0.0
        }
    }

    pub fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::DimensionMismatch {
                expected: self.cols,
                got: x.len(),
            });
        }
        Ok((0..self.rows)
            .map(|i| {
                let hi = i.min(self.cols - 1);
                (0..=hi).map(|j| self.entry(i, j) * x[j]).sum()
            })
            .collect())
    }

    pub fn to_matrix(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_fn(self.rows, self.cols, |i, j| self.entry(i, j))
    }
}

/// First `t` samples of `g * u`, indices past either sequence end count as zero.
pub fn convolve(g: &[f64], u: &[f64], t: usize) -> Result<Vec<f64>> {
    if t < 1 {
        return Err(invalid("convolution length must be at least 1"));
    }
    let mut out = vec![0.0; t];
    // Scatter over nonzero inputs so sparse excitations (impulses) stay cheap.
    for (j, &uj) in u.iter().enumerate().take(t) {
        if uj == 0.0 {
            continue;
        }
        for (o, &gi) in out[j..].iter_mut().zip(g) {
            *o += gi * uj;
        }
    }
    Ok(out)
}

/// `N` uniformly spaced points `exp(j 2 pi k / N)` on the unit circle.
#[derive(Clone, Debug, PartialEq)]
pub struct FrequencyGrid {
    points: Vec<Complex64>,
}

impl FrequencyGrid {
    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(invalid("frequency grid needs at least one point"));
        }
        let points = (0..n)
            .map(|k| Complex64::from_polar(1.0, 2.0 * PI * k as f64 / n as f64))
            .collect();
        Ok(Self { points })
    }

    /// Arbitrary points on the unit circle given by their angles.
    pub fn from_angles(angles: &[f64]) -> Self {
        Self {
            points: angles.iter().map(|&w| Complex64::from_polar(1.0, w)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[Complex64] {
        &self.points
    }
}

pub fn freq_response(f: &FirFilter, grid: &FrequencyGrid) -> Vec<Complex64> {
    grid.points().iter().map(|&z| f.eval_unit(z)).collect()
}

/// Grid maximum of a polynomial's modulus with its discretization certificate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupNormEstimate {
    pub grid_max: f64,
    pub certified_upper: f64,
    pub n: usize,
}

/// Smallest grid size `ceil(4 pi L)` for which the discretization certificate applies.
pub fn min_certified_grid(len: usize) -> usize {
    (4.0 * PI * len as f64).ceil() as usize
}

/// Certified H-infinity estimate of a length-`L` FIR filter:
/// `||F||_inf <= (1 + 4 pi L / N) * max_k |F(z_k)|`.
pub fn sup_norm(f: &FirFilter, n: usize) -> Result<SupNormEstimate> {
    let required = min_certified_grid(f.len());
    if n < required {
        return Err(Error::GridTooSmall { n, required });
    }
    let grid = FrequencyGrid::uniform(n)?;
    let grid_max = grid.points().iter().map(|&z| f.eval_unit(z).norm()).fold(0.0, f64::max);
    Ok(certify_grid_max(grid_max, f.len(), n))
}

pub(crate) fn certify_grid_max(grid_max: f64, len: usize, n: usize) -> SupNormEstimate {
    SupNormEstimate {
        grid_max,
        certified_upper: (1.0 + 4.0 * PI * len as f64 / n as f64) * grid_max,
        n,
    }
}

/// Coefficients of `G(gamma z)`, i.e. `g_k * gamma^{-k}`.
pub fn scaled_coeffs(coeffs: &[f64], gamma: f64) -> Result<Vec<f64>> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(invalid(format!("gamma must lie in (0, 1), got {gamma}")));
    }
    let inv = 1.0 / gamma;
    let mut scale = 1.0;
    let mut out = Vec::with_capacity(coeffs.len());
    for &c in coeffs {
        let v = c * scale;
        if !v.is_finite() {
            return Err(invalid(format!(
                "G(gamma z) overflows at gamma = {gamma}; impulse response decays too slowly"
            )));
        }
        out.push(v);
        scale *= inv;
    }
    Ok(out)
}

/// Certified sup-norm of the scaled system `G(gamma z)`.
pub fn scaled_hinf(coeffs: &[f64], gamma: f64, n: usize) -> Result<SupNormEstimate> {
    let scaled = FirFilter::new(scaled_coeffs(coeffs, gamma)?)?;
    sup_norm(&scaled, n)
}

/// `max_k |(F g)_k|` over the length-`r` un-normalized DFT; never exceeds the H-infinity norm.
pub fn dft_lower_bound(f: &FirFilter) -> f64 {
    let r = f.len();
    (0..r)
        .map(|k| {
            let z = Complex64::from_polar(1.0, 2.0 * PI * k as f64 / r as f64);
            f.eval_unit(z).norm()
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn direct_convolution(g: &[f64], u: &[f64], t: usize) -> Vec<f64> {
        (0..t)
            .map(|k| {
                let mut s = 0.0;
                for i in 0..=k {
                    let gi = g.get(i).copied().unwrap_or(0.0);
                    let uk = u.get(k - i).copied().unwrap_or(0.0);
                    s += gi * uk;
                }
                s
            })
            .collect()
    }

    #[test]
    fn toeplitz_identity_and_two_tap() {
        let id = ToeplitzOp::new(vec![1.0], 3, 3).unwrap();
        assert_eq!(id.apply(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
        let two = ToeplitzOp::new(vec![1.0, 1.0], 2, 2).unwrap();
        assert_eq!(two.apply(&[1.0, -1.0]).unwrap(), vec![1.0, 0.0]);
        assert!(matches!(
            two.apply(&[1.0]),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn rectangular_section() {
        let op = ToeplitzOp::new(vec![1.0, 2.0, 3.0], 4, 2).unwrap();
        let m = op.to_matrix();
        assert_eq!(m[(0, 0)], 1.0);
        assert_eq!(m[(3, 1)], 3.0);
        assert_eq!(m[(3, 0)], 0.0);
        assert_eq!(m[(0, 1)], 0.0);
        assert_eq!(op.apply(&[1.0, 1.0]).unwrap(), vec![1.0, 3.0, 5.0, 3.0]);
    }

    #[test]
    fn convolution_examples() {
        assert_eq!(convolve(&[1.0], &[5.0, 6.0, 7.0], 3).unwrap(), vec![5.0, 6.0, 7.0]);
        assert_eq!(convolve(&[1.0, 1.0], &[1.0, 0.0, 0.0], 3).unwrap(), vec![1.0, 1.0, 0.0]);
        assert!(convolve(&[1.0], &[1.0], 0).is_err());
    }

    #[test]
    fn freq_response_examples() {
        let grid = FrequencyGrid::uniform(7).unwrap();
        let one = FirFilter::new(vec![1.0, 0.0, 0.0]).unwrap();
        for v in freq_response(&one, &grid) {
            assert_abs_diff_eq!(v.re, 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(v.im, 0.0, epsilon = 1e-12);
        }
        let delay = FirFilter::new(vec![0.0, 1.0]).unwrap();
        let nyq = FrequencyGrid::from_angles(&[PI]);
        let v = freq_response(&delay, &nyq)[0];
        assert_abs_diff_eq!(v.re, -1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v.im, 0.0, epsilon = 1e-12);
        let ones = FirFilter::new(vec![1.0; 9]).unwrap();
        assert_abs_diff_eq!(freq_response(&ones, &grid)[0].re, 9.0, epsilon = 1e-12);
        assert_abs_diff_eq!(ones.dc_gain(), 9.0);
    }

    #[test]
    fn grid_points_on_circle() {
        let grid = FrequencyGrid::uniform(64).unwrap();
        assert_eq!(grid.points()[0], Complex64::new(1.0, 0.0));
        for z in grid.points() {
            assert_abs_diff_eq!(z.norm(), 1.0, epsilon = 1e-15);
        }
        for i in 0..64 {
            for j in (i + 1)..64 {
                assert!((grid.points()[i] - grid.points()[j]).norm() > 1e-3);
            }
        }
    }

    #[test]
    fn sup_norm_examples() {
        let one = FirFilter::new(vec![1.0]).unwrap();
        let est = sup_norm(&one, 16).unwrap();
        assert_abs_diff_eq!(est.grid_max, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(est.certified_upper, 1.0 + 4.0 * PI / 16.0, epsilon = 1e-12);

        let two = FirFilter::new(vec![1.0, 1.0]).unwrap();
        let n = (8.0 * PI).ceil() as usize;
        let est = sup_norm(&two, n).unwrap();
        assert!(est.grid_max <= 2.0 + 1e-12);
        assert!(est.certified_upper >= 2.0);

        assert!(matches!(
            sup_norm(&two, 10),
            Err(Error::GridTooSmall { required: 26, .. })
        ));
    }

    #[test]
    fn certified_upper_dominates_fine_grid() {
        let g = FirFilter::new(vec![0.3, -1.2, 0.7, 2.1, -0.4, 0.9, -1.5, 0.2]).unwrap();
        let coarse = sup_norm(&g, min_certified_grid(8)).unwrap();
        let fine = sup_norm(&g, 4096).unwrap();
        assert!(coarse.certified_upper >= fine.grid_max);
    }

    #[test]
    fn scaled_hinf_examples() {
        let one = [1.0];
        assert_abs_diff_eq!(scaled_hinf(&one, 0.3, 16).unwrap().grid_max, 1.0, epsilon = 1e-12);
        // G(gamma z) for a pure delay is z^{-1} / gamma.
        let est = scaled_hinf(&[0.0, 1.0], 0.5, 32).unwrap();
        assert_abs_diff_eq!(est.grid_max, 2.0, epsilon = 1e-12);
        assert!(scaled_hinf(&one, 1.0, 16).is_err());
        assert!(scaled_hinf(&one, 0.0, 16).is_err());
    }

    #[test]
    fn scaled_hinf_geometric_matches_closed_form() {
        // g_k = rho^k, G(gamma z) has coefficients (rho/gamma)^k, peak at z = 1.
        let rho: f64 = 0.5;
        let gamma: f64 = 0.8;
        let len = 200;
        let g: Vec<f64> = (0..len).map(|k| rho.powi(k as i32)).collect();
        let est = scaled_hinf(&g, gamma, min_certified_grid(len)).unwrap();
        let ratio = rho / gamma;
        let closed = (1.0 - ratio.powi(len as i32)) / (1.0 - ratio);
        assert_abs_diff_eq!(est.grid_max, closed, epsilon = 1e-10);
        assert!(est.certified_upper >= closed);
    }

    #[test]
    fn dft_lower_bound_examples() {
        assert_abs_diff_eq!(dft_lower_bound(&FirFilter::impulse(5)), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(
            dft_lower_bound(&FirFilter::new(vec![1.0, 1.0]).unwrap()),
            2.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn csv_and_json_round_trip_exactly() {
        let f = FirFilter::new(vec![0.1, -1e-300, 3.0e8, 1.0 / 3.0, -0.0]).unwrap();
        let back = FirFilter::from_csv(&f.to_csv()).unwrap();
        for (a, b) in f.coeffs().iter().zip(back.coeffs()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(FirFilter::from_json(&f.to_json()).unwrap(), f);
        assert!(FirFilter::from_json(r#"{"coeffs": []}"#).is_err());
        assert!(FirFilter::from_csv("1.0\nabc\n").is_err());
    }

    proptest! {
        #[test]
        fn toeplitz_equals_convolution(
            g in proptest::collection::vec(-5.0f64..5.0, 1..64),
            u in proptest::collection::vec(-5.0f64..5.0, 1..64),
        ) {
            let t = u.len();
            let op = ToeplitzOp::square(&u);
            let mut gp = g.clone();
            gp.resize(t, 0.0);
            let via_toep = op.apply(&gp).unwrap();
            let via_conv = convolve(&g, &u, t).unwrap();
            let oracle = direct_convolution(&g, &u, t);
            for k in 0..t {
                prop_assert!((via_toep[k] - oracle[k]).abs() < 1e-10);
                prop_assert!((via_conv[k] - oracle[k]).abs() < 1e-10);
            }
        }

        #[test]
        fn sandwich_holds(g in proptest::collection::vec(-3.0f64..3.0, 1..24), extra in 0usize..3) {
            let f = FirFilter::new(g).unwrap();
            let n = min_certified_grid(f.len()) << extra;
            let est = sup_norm(&f, n).unwrap();
            let lower = dft_lower_bound(&f);
            let fine_est = sup_norm(&f, 8192.max(n)).unwrap();
            let fine = fine_est.grid_max;
            // the DFT points need not lie on either grid, so compare with certified values
            prop_assert!(lower <= est.certified_upper + 1e-9);
            prop_assert!(lower <= fine_est.certified_upper + 1e-9);
            prop_assert!(est.grid_max <= est.certified_upper + 1e-12);
            prop_assert!(fine <= est.certified_upper + 1e-9);
        }

        #[test]
        fn response_is_linear(
            g in proptest::collection::vec(-3.0f64..3.0, 1..16),
            h in proptest::collection::vec(-3.0f64..3.0, 1..16),
            a in -2.0f64..2.0, b in -2.0f64..2.0,
        ) {
            let f1 = FirFilter::new(g).unwrap();
            let f2 = FirFilter::new(h).unwrap();
            let grid = FrequencyGrid::uniform(33).unwrap();
            let lhs = freq_response(&f1.combine(&f2, a, b), &grid);
            let r1 = freq_response(&f1, &grid);
            let r2 = freq_response(&f2, &grid);
            for k in 0..grid.len() {
                prop_assert!((lhs[k] - (r1[k] * a + r2[k] * b)).norm() < 1e-10);
            }
        }
    }

    #[test]
    fn certified_upper_refines_with_grid_doubling() {
        let f = FirFilter::new(vec![1.0, -0.5, 0.25, 2.0, -1.0, 0.75]).unwrap();
        let base = min_certified_grid(f.len());
        let mut prev = f64::INFINITY;
        for e in 0..6 {
            let est = sup_norm(&f, base << e).unwrap();
            assert!(est.certified_upper <= prev + 1e-12);
            prev = est.certified_upper;
        }
    }
}
