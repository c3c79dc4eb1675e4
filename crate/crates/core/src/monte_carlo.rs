//! Simulation-sharpened tail bounds.
//!
//! From `N` i.i.d. draws of `X`, the empirical exceedance frequency `p_hat` is
//! turned into a certified upper bound `Q` on the true tail probability by
//! solving `N * D(p_hat, Q) = log(1 / delta)` for `Q >= p_hat`, where `D` is the
//! Bernoulli KL divergence. With probability at least `1 - delta` over the
//! draws the tail probability is at most `Q`.
//!
//! Sample `i` of every statistic is drawn from the Monte-Carlo stream `i`
//! (see [`crate::rng`]), so counts do not depend on how the samples are split
//! across workers.

use std::collections::BinaryHeap;
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::lti::{certify_grid_max, horner, min_certified_grid};
use crate::par::{count_range_with, map_range_with, Exec};
use crate::plant::{random_plant_from_stream, RandomPlantParams};
use crate::rng::{derive_seed, GaussianStream, MC};

pub const DEFAULT_DELTA: f64 = 1e-4;
/// Tail mass left above a certified quantile: `Pr(X > t) <= 0.01`.
pub const DEFAULT_TAIL: f64 = 0.01;
pub const QUANTILE_GRID: usize = 200;

/// Certified upper bound `Q` on a tail probability from `n` samples.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailBoundResult {
    /// Threshold the exceedances were counted against, when known.
    pub t: Option<f64>,
    pub count: usize,
    pub empirical_freq: f64,
    pub certified_upper: f64,
    #[serde(rename = "N")]
    pub n: usize,
    pub delta: f64,
}

/// Bernoulli KL divergence `p log(p/q) + (1-p) log((1-p)/(1-q))` with `0 log 0 = 0`.
pub fn kl_bernoulli(p: f64, q: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid(format!("p must lie in [0, 1], got {p}")));
    }
    if !(q > 0.0 && q < 1.0) {
        return Err(invalid(format!("q must lie in (0, 1), got {q}")));
    }
    Ok(kl_unchecked(p, q))
}

fn kl_unchecked(p: f64, q: f64) -> f64 {
    let head = if p > 0.0 { p * (p / q).ln() } else { 0.0 };
    let tail = if p < 1.0 {
        (1.0 - p) * ((-p).ln_1p() - (-q).ln_1p())
    } else {
        0.0
    };
    (head + tail).max(0.0)
}

/// Solves `n * D(count / n, Q) = log(1 / delta)` for `Q` in `[count / n, 1)` by bisection.
/// The returned `Q` is the upper end of the final bracket, so it never undershoots the root.
pub fn chernoff_upper(count: usize, n: usize, delta: f64) -> Result<TailBoundResult> {
    if n == 0 {
        return Err(invalid("need at least one sample"));
    }
    if count > n {
        return Err(invalid(format!("count {count} exceeds sample size {n}")));
    }
    if !(delta > 0.0 && delta < 1.0) {
        return Err(invalid(format!("delta must lie in (0, 1), got {delta}")));
    }
    let p = count as f64 / n as f64;
    let mut out = TailBoundResult {
        t: None,
        count,
        empirical_freq: p,
        certified_upper: 1.0,
        n,
        delta,
    };
    if count == n {
        return Ok(out);
    }
    let target = -delta.ln();
    let nf = n as f64;
    let (mut lo, mut hi) = (p, 1.0);
    loop {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if nf * kl_unchecked(p, mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    out.certified_upper = hi;
    Ok(out)
}

/// Counts `X_i >= t` over `n` samples `sampler(0), .., sampler(n-1)` and certifies
/// `Pr(X >= t) <= Q`.
pub fn estimate_tail<F>(sampler: F, t: f64, n: usize, delta: f64) -> Result<TailBoundResult>
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    estimate_tail_with(Exec::default(), sampler, t, n, delta)
}

pub fn estimate_tail_with<F>(exec: Exec, sampler: F, t: f64, n: usize, delta: f64) -> Result<TailBoundResult>
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    let count = count_range_with(exec, n, |i| sampler(i) >= t);
    let mut res = chernoff_upper(count, n, delta)?;
    res.t = Some(t);
    Ok(res)
}

/// Smallest grid threshold `t` whose certified bound gives `Pr(X > t) <= tail`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct McQuantile {
    pub quantile: f64,
    pub tail: f64,
    pub bound: TailBoundResult,
    #[serde(skip)]
    pub samples: Vec<f64>,
}

/// Geometric grid of [`QUANTILE_GRID`] points from the smallest positive sample to
/// the largest; `[0]` when no sample is positive.
pub fn quantile_grid(samples: &[f64]) -> Vec<f64> {
    let hi = samples.iter().copied().fold(0.0, f64::max);
    let lo = samples
        .iter()
        .copied()
        .filter(|&x| x > 0.0)
        .fold(f64::INFINITY, f64::min);
    if hi <= 0.0 {
        return vec![0.0];
    }
    if lo >= hi {
        return vec![hi];
    }
    let ratio = (hi / lo).ln();
    let last = QUANTILE_GRID - 1;
    let mut grid: Vec<f64> = (0..QUANTILE_GRID)
        .map(|i| lo * (ratio * i as f64 / last as f64).exp())
        .collect();
    grid[last] = hi;
    grid
}

/// Certified `1 - tail` quantile of `samples` on [`quantile_grid`].
pub fn certified_quantile(samples: Vec<f64>, tail: f64, delta: f64) -> Result<McQuantile> {
    let grid = quantile_grid(&samples);
    certified_quantile_on(samples, &grid, tail, delta)
}

/// Certified quantile on a caller-supplied ascending grid, counting strict exceedances.
pub fn certified_quantile_on(samples: Vec<f64>, grid: &[f64], tail: f64, delta: f64) -> Result<McQuantile> {
    if samples.is_empty() {
        return Err(invalid("need at least one sample"));
    }
    if let Some(x) = samples.iter().find(|x| !x.is_finite()) {
        return Err(invalid(format!("non-finite sample {x}")));
    }
    if !(tail > 0.0 && tail < 1.0) {
        return Err(invalid(format!("tail level must lie in (0, 1), got {tail}")));
    }
    let mut sorted = samples.clone();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    for &t in grid {
        let count = n - sorted.partition_point(|&x| x <= t);
        let mut bound = chernoff_upper(count, n, delta)?;
        bound.t = Some(t);
        if bound.certified_upper <= tail {
            return Ok(McQuantile {
                quantile: t,
                tail,
                bound,
                samples,
            });
        }
    }
    Err(invalid(format!(
        "{n} samples cannot certify a tail of {tail} at delta {delta} on this grid"
    )))
}

/// Decay statistic `max_{k>=1} |g_k| / rho^k` of one impulse response.
pub fn decay_statistic(g: &[f64], rho: f64) -> f64 {
    let mut best: f64 = 0.0;
    let mut scale = 1.0;
    for &gk in g.iter().skip(1) {
        scale *= rho;
        best = best.max(gk.abs() / scale);
    }
    best
}

/// Tail sum `sum_{k>=r} g_k`, the H-infinity norm of `G - G_r` for nonnegative taps.
pub fn approx_statistic(g: &[f64], r: usize) -> Result<f64> {
    if let Some(k) = g.iter().position(|&x| x < 0.0) {
        return Err(invalid(format!(
            "coefficient {k} is negative; the tail sum is not the tail H-infinity norm"
        )));
    }
    Ok(g.iter().skip(r).sum())
}

/// Sampler over the random plant family: plant `i` is drawn from Monte-Carlo stream `i`.
pub fn plant_family_sampler(seed: u64, params: RandomPlantParams) -> impl Fn(usize) -> Vec<f64> + Sync + Send {
    let key = derive_seed(seed, MC);
    move |i| random_plant_from_stream(&mut GaussianStream::new(key, i as u64), params)
}

/// Certified decay constant `C` with `Pr(max_k |g_k| / rho^k > C) <= tail`.
pub fn estimate_decay_c<S>(sampler: S, rho: f64, n: usize, delta: f64) -> Result<McQuantile>
where
    S: Fn(usize) -> Vec<f64> + Sync + Send,
{
    estimate_decay_c_with(Exec::default(), sampler, rho, n, delta)
}

pub fn estimate_decay_c_with<S>(exec: Exec, sampler: S, rho: f64, n: usize, delta: f64) -> Result<McQuantile>
where
    S: Fn(usize) -> Vec<f64> + Sync + Send,
{
    if !(rho > 0.0 && rho < 1.0) {
        return Err(invalid(format!("rho must lie in (0, 1), got {rho}")));
    }
    let samples = map_range_with(exec, n, |i| decay_statistic(&sampler(i), rho));
    certified_quantile(samples, DEFAULT_TAIL, delta)
}

/// Certified quantile of the truncation error `||G - G_r||_inf` over a
/// nonnegative plant family.
pub fn estimate_e_approx<S>(sampler: S, r: usize, n: usize, delta: f64) -> Result<McQuantile>
where
    S: Fn(usize) -> Vec<f64> + Sync + Send,
{
    estimate_e_approx_with(Exec::default(), sampler, r, n, delta)
}

pub fn estimate_e_approx_with<S>(exec: Exec, sampler: S, r: usize, n: usize, delta: f64) -> Result<McQuantile>
where
    S: Fn(usize) -> Vec<f64> + Sync + Send,
{
    let samples = map_range_with(exec, n, |i| approx_statistic(&sampler(i), r))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    certified_quantile(samples, DEFAULT_TAIL, delta)
}

/// Default grid for the noise statistic: a power of two keeping the
/// certificate's inflation `4 pi r / N` below 1/128.
pub fn default_noise_grid(r: usize) -> usize {
    ((4.0 * PI * r as f64 * 128.0).ceil() as usize).next_power_of_two()
}

/// Exact maximum of `|F|` over the `N`-point uniform grid for real taps.
///
/// A coarse FFT plus Bernstein's inequality bounds every cell of the fine
/// grid; only cells whose bound beats the running maximum are subdivided
/// and evaluated point by point. When `N` is not a multiple
/// of the coarse size the full `N`-point FFT is used.
#[derive(Clone)]
pub struct GridMax {
    len: usize,
    n: usize,
    coarse: usize,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for GridMax {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("GridMax")
            .field("len", &self.len)
            .field("n", &self.n)
            .field("coarse", &self.coarse)
            .finish()
    }
}

impl GridMax {
    pub fn new(len: usize, n: usize) -> Result<Self> {
        if len == 0 || n == 0 {
            return Err(invalid("grid maximum needs a nonempty filter and grid"));
        }
        let coarse = (32 * len).next_power_of_two().max(64);
        let coarse = if n > coarse && n.is_multiple_of(coarse) {
            coarse
        } else {
            n
        };
        let fft = FftPlanner::new().plan_fft_forward(coarse);
        Ok(Self { len, n, coarse, fft })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn eval(&self, c: &[f64]) -> f64 {
        debug_assert!(c.len() <= self.len);
        let nc = self.coarse;
        let mut buf = vec![Complex64::new(0.0, 0.0); nc.max(c.len())];
        for (b, &x) in buf.iter_mut().zip(c) {
            b.re = x;
        }
        if buf.len() > nc {
            // taps beyond the FFT length alias; fold them back
            let extra: Vec<Complex64> = buf.drain(nc..).collect();
            for (i, v) in extra.into_iter().enumerate() {
                buf[i % nc] += v;
            }
        }
        self.fft.process(&mut buf);
        let half = nc / 2;
        let mags: Vec<f64> = buf[..=half].iter().map(|v| v.norm()).collect();
        let mut best = mags.iter().copied().fold(0.0, f64::max);
        if nc == self.n {
            return best;
        }
        // Branch and bound over fine-index intervals with evaluated endpoints.
        // |F| is the max over theta of the real trig polynomials Re(e^{-i theta} F),
        // whose second derivatives are bounded by deg^2 ||F||_inf, so on an
        // interval of width h the maximum exceeds the larger endpoint by at most
        // deg^2 ||F||_inf h^2 / 8.
        let deg = (self.len - 1) as f64;
        let upper = best / (1.0 - PI * deg / nc as f64);
        let step = 2.0 * PI / self.n as f64;
        let curv = deg * deg * upper * step * step / 8.0;
        let bound = |a: usize, b: usize, va: f64, vb: f64| {
            let w = (b - a) as f64;
            va.max(vb) + curv * w * w
        };
        let ratio = self.n / nc;
        let mut heap: BinaryHeap<Interval> = (0..half)
            .map(|k| {
                let (a, b) = (k * ratio, (k + 1) * ratio);
                Interval {
                    bound: bound(a, b, mags[k], mags[k + 1]),
                    a,
                    b,
                    va: mags[k],
                    vb: mags[k + 1],
                }
            })
            .filter(|iv| iv.bound > best)
            .collect();
        while let Some(iv) = heap.pop() {
            if iv.bound <= best {
                break;
            }
            if iv.b - iv.a < 2 {
                continue;
            }
            let m = (iv.a + iv.b) / 2;
            let vm = horner(c, Complex64::from_polar(1.0, -step * m as f64)).norm();
            best = best.max(vm);
            for (a, b, va, vb) in [(iv.a, m, iv.va, vm), (m, iv.b, vm, iv.vb)] {
                let bd = bound(a, b, va, vb);
                if bd > best {
                    heap.push(Interval {
                        bound: bd,
                        a,
                        b,
                        va,
                        vb,
                    });
                }
            }
        }
        best
    }
}

struct Interval {
    bound: f64,
    a: usize,
    b: usize,
    va: f64,
    vb: f64,
}

impl PartialEq for Interval {
    fn eq(&self, other: &Self) -> bool {
        self.bound.total_cmp(&other.bound).is_eq()
    }
}

impl Eq for Interval {}

impl PartialOrd for Interval {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Interval {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.bound.total_cmp(&other.bound)
    }
}

/// Certified quantile of `||sum_{k<r} xi_k z^{-k}||_inf`, `xi ~ N(0, sigma^2 I)`,
/// each sample being the certified upper value on an `n_grid`-point grid.
pub fn estimate_e_noise(sigma: f64, r: usize, n: usize, delta: f64, n_grid: usize, seed: u64) -> Result<McQuantile> {
    estimate_e_noise_with(Exec::default(), sigma, r, n, delta, n_grid, seed)
}

pub fn estimate_e_noise_with(
    exec: Exec,
    sigma: f64,
    r: usize,
    n: usize,
    delta: f64,
    n_grid: usize,
    seed: u64,
) -> Result<McQuantile> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(invalid(format!("sigma must be positive, got {sigma}")));
    }
    let required = min_certified_grid(r);
    if n_grid < required {
        return Err(Error::GridTooSmall { n: n_grid, required });
    }
    let grid = GridMax::new(r, n_grid)?;
    let samples = map_range_with(exec, n, |i| noise_sample(&grid, sigma, r, seed, i));
    certified_quantile(samples, DEFAULT_TAIL, delta)
}

/// Certified sup-norm of noise polynomial `i`.
pub fn noise_sample(grid: &GridMax, sigma: f64, r: usize, seed: u64, i: usize) -> f64 {
    let mut stream = GaussianStream::new(derive_seed(seed, MC), i as u64);
    let xi: Vec<f64> = (0..r).map(|_| sigma * stream.normal()).collect();
    certify_grid_max(grid.eval(&xi), r, grid.n()).certified_upper
}

/// Equal-width histogram as `lo,hi,count` rows.
pub fn histogram_csv(samples: &[f64], bins: usize) -> String {
    let bins = bins.max(1);
    let lo = samples.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = String::from("lo,hi,count\n");
    if samples.is_empty() {
        return out;
    }
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for &x in samples {
        let b = (((x - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    for (b, c) in counts.iter().enumerate() {
        let a = lo + width * b as f64;
        let _ = writeln!(out, "{:?},{:?},{}", a, a + width, c);
    }
    out
}
