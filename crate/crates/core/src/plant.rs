//! Simulated query oracle for an unknown stable plant.
//!
//! A query with input `u` of length `T` returns the first `T` samples of
//! `g * u` plus white Gaussian output noise. The process-noise variant adds
//! white noise to the input before it enters the plant. Noise realizations
//! are addressed by `(seed, query index, element)`; see [`crate::rng`] for
//! the stream layout.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::design::InputEnsemble;
use crate::error::{invalid, Error, Result};
use crate::lti::{convolve, min_certified_grid, sup_norm, FirFilter};
use crate::rng::{derive_seed, GaussianStream, NOISE, PLANT};

/// Decay factor and tap count of the random test-plant family.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomPlantParams {
    pub rho: f64,
    pub taps: usize,
}

impl Default for RandomPlantParams {
    fn default() -> Self {
        Self { rho: 0.95, taps: 150 }
    }
}

/// Taps of one member of the random family
/// `|w_0| + sum_{k>=1} |w_k| rho^{k-1} z^{-k}` with `w_k` standard normal.
pub fn random_plant_coeffs(seed: u64, params: RandomPlantParams) -> Vec<f64> {
    let mut stream = GaussianStream::new(derive_seed(seed, PLANT), 0);
    random_plant_from_stream(&mut stream, params)
}

/// Same family, drawing the `w_k` from an arbitrary positioned stream.
pub fn random_plant_from_stream(stream: &mut GaussianStream, params: RandomPlantParams) -> Vec<f64> {
    let mut decay = 1.0;
    (0..params.taps)
        .map(|k| {
            let w = stream.normal().abs();
            if k == 0 {
                w
            } else {
                let g = w * decay;
                decay *= params.rho;
                g
            }
        })
        .collect()
}

/// Hidden plant plus noise model answering input/output queries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantOracle {
    true_coeffs: FirFilter,
    pub sigma: f64,
    pub sigma_n: f64,
    pub seed: u64,
    #[serde(skip)]
    query_counter: u64,
}

/// One experiment: the input applied and the noisy output observed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryRecord {
    pub input: Vec<f64>,
    pub output: Vec<f64>,
    pub query_index: u64,
}

/// Result of cutting an infinite impulse response down to a finite plant.
#[derive(Clone, Debug, PartialEq)]
pub struct Truncation {
    pub filter: FirFilter,
    /// Sum of the magnitudes of the discarded taps, an upper bound on the
    /// H-infinity norm of the discarded tail.
    pub tail_hinf_bound: f64,
}

/// Relative threshold below which trailing taps of a supplied impulse response are dropped.
pub const TRUNCATION_TOL: f64 = 1e-12;

/// Drops the trailing taps with `|g_k| < 1e-12 * max |g|` and reports the induced error.
pub fn truncate_impulse_response(coeffs: &[f64]) -> Result<Truncation> {
    let max = coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    let cut = coeffs
        .iter()
        .rposition(|c| c.abs() >= TRUNCATION_TOL * max)
        .map(|i| i + 1)
        .unwrap_or(1);
    let tail_hinf_bound = coeffs[cut.min(coeffs.len())..].iter().map(|c| c.abs()).sum();
    Ok(Truncation {
        filter: FirFilter::new(coeffs[..cut.min(coeffs.len()).max(1)].to_vec())?,
        tail_hinf_bound,
    })
}

#[derive(Serialize, Deserialize)]
struct PlantFile {
    coeffs: Vec<f64>,
    sigma: f64,
    sigma_n: f64,
    seed: u64,
}

impl PlantOracle {
    pub fn new(true_coeffs: FirFilter, sigma: f64, sigma_n: f64, seed: u64) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(invalid(format!("sigma must be finite and nonnegative, got {sigma}")));
        }
        if !(sigma_n >= 0.0 && sigma_n.is_finite()) {
            return Err(invalid(format!(
                "sigma_n must be finite and nonnegative, got {sigma_n}"
            )));
        }
        Ok(Self {
            true_coeffs,
            sigma,
            sigma_n,
            seed,
            query_counter: 0,
        })
    }

    /// Random plant from the default family (rho = 0.95, 150 taps), noiseless.
    pub fn random_plant(seed: u64) -> Self {
        Self::random_plant_with(seed, RandomPlantParams::default())
    }

    pub fn random_plant_with(seed: u64, params: RandomPlantParams) -> Self {
        let coeffs = random_plant_coeffs(seed, params);
        Self {
            true_coeffs: FirFilter::new(coeffs).expect("random plant taps are finite"),
            sigma: 0.0,
            sigma_n: 0.0,
            seed,
            query_counter: 0,
        }
    }

    pub fn with_noise(mut self, sigma: f64, sigma_n: f64) -> Result<Self> {
        let o = Self::new(self.true_coeffs, sigma, sigma_n, self.seed)?;
        self = Self {
            query_counter: self.query_counter,
            ..o
        };
        Ok(self)
    }

    pub fn truth(&self) -> &FirFilter {
        &self.true_coeffs
    }

    pub fn query_counter(&self) -> u64 {
        self.query_counter
    }

    /// Certified H-infinity norm of the hidden plant.
    pub fn hinf_norm(&self) -> f64 {
        let n = 4 * min_certified_grid(self.true_coeffs.len());
        sup_norm(&self.true_coeffs, n)
            .map(|e| e.certified_upper)
            .unwrap_or(f64::INFINITY)
    }

    fn noise_key(&self) -> u64 {
        derive_seed(self.seed, NOISE)
    }

    /// Query with an explicit index; pure in `(self, u, index)`.
    pub fn query_at(&self, u: &[f64], index: u64) -> Result<QueryRecord> {
        self.query_impl(u, index, false)
    }

    /// Process-noise query with an explicit index.
    pub fn query_process_noise_at(&self, u: &[f64], index: u64) -> Result<QueryRecord> {
        self.query_impl(u, index, true)
    }

    /// Query using and advancing the internal counter.
    pub fn query(&mut self, u: &[f64], t: usize) -> Result<QueryRecord> {
        check_len(u, t)?;
        let rec = self.query_at(u, self.query_counter)?;
        self.query_counter += 1;
        Ok(rec)
    }

    pub fn query_process_noise(&mut self, u: &[f64], t: usize) -> Result<QueryRecord> {
        check_len(u, t)?;
        let rec = self.query_process_noise_at(u, self.query_counter)?;
        self.query_counter += 1;
        Ok(rec)
    }

    fn query_impl(&self, u: &[f64], index: u64, process_noise: bool) -> Result<QueryRecord> {
        let t = u.len();
        if t == 0 {
            return Err(invalid("query input must be nonempty"));
        }
        let key = self.noise_key();
        let mut excitation = u.to_vec();
        if process_noise {
            let mut zeta = GaussianStream::new(key, 2 * index + 1);
            for x in excitation.iter_mut() {
                *x += self.sigma_n * zeta.normal();
            }
        }
        let mut y = convolve(self.true_coeffs.coeffs(), &excitation, t)?;
        let mut xi = GaussianStream::new(key, 2 * index);
        for v in y.iter_mut() {
            *v += self.sigma * xi.normal();
        }
        Ok(QueryRecord {
            input: u.to_vec(),
            output: y,
            query_index: index,
        })
    }

    /// One query per ensemble input, indexed consecutively from the current counter.
    pub fn batch_query(&mut self, ensemble: &InputEnsemble) -> Result<Vec<QueryRecord>> {
        self.batch_impl(ensemble, false)
    }

    pub fn batch_query_process_noise(&mut self, ensemble: &InputEnsemble) -> Result<Vec<QueryRecord>> {
        self.batch_impl(ensemble, true)
    }

    fn batch_impl(&mut self, ensemble: &InputEnsemble, process_noise: bool) -> Result<Vec<QueryRecord>> {
        if ensemble.is_empty() {
            return Err(invalid("ensemble has no inputs"));
        }
        let start = self.query_counter;
        let this = &*self;
        let recs = crate::par::map_range(ensemble.len(), |i| {
            this.query_impl(&ensemble.inputs()[i], start + i as u64, process_noise)
        });
        let recs = recs.into_iter().collect::<Result<Vec<_>>>()?;
        self.query_counter += ensemble.len() as u64;
        Ok(recs)
    }

    /// JSON with the taps and the noise metadata.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&PlantFile {
            coeffs: self.true_coeffs.coeffs().to_vec(),
            sigma: self.sigma,
            sigma_n: self.sigma_n,
            seed: self.seed,
        })
        .expect("plant serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: PlantFile = serde_json::from_str(text)?;
        Self::new(FirFilter::new(f.coeffs)?, f.sigma, f.sigma_n, f.seed)
    }

    /// Coefficient CSV preceded by a `# sigma=..,sigma_n=..,seed=..` metadata line.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# sigma={:?},sigma_n={:?},seed={}",
            self.sigma, self.sigma_n, self.seed
        );
        s.push_str(&self.true_coeffs.to_csv());
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let (mut sigma, mut sigma_n, mut seed) = (0.0, 0.0, 0u64);
        if let Some(meta) = text.lines().find_map(|l| l.trim().strip_prefix('#')) {
            for kv in meta.split(',') {
                let mut it = kv.trim().splitn(2, '=');
                let (k, v) = (it.next().unwrap_or(""), it.next().unwrap_or("").trim());
                let bad = || Error::Parse(format!("bad metadata entry {kv:?}"));
                match k {
                    "sigma" => sigma = v.parse().map_err(|_| bad())?,
                    "sigma_n" => sigma_n = v.parse().map_err(|_| bad())?,
                    "seed" => seed = v.parse().map_err(|_| bad())?,
                    _ => {}
                }
            }
        }
        Self::new(FirFilter::from_csv(text)?, sigma, sigma_n, seed)
    }
}

fn check_len(u: &[f64], t: usize) -> Result<()> {
    if u.len() != t {
        return Err(Error::DimensionMismatch {
            expected: t,
            got: u.len(),
        });
    }
    Ok(())
}
