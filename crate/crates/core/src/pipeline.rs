//! End-to-end runs behind the command-line workbench.
//!
//! Every command is a pure function of its [`RunConfig`] and returns the files
//! it would write as an [`Artifacts`] map, so reruns can be compared byte for
//! byte before anything touches the disk.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::bounds::{
    concentration_bound, decay_truncation_bound, fir_error_upper, minimax_lower, process_noise_substitute,
    sample_complexity, truncation_length_fir, BudgetCase, DecayProfile, ErrorBound, Provenance,
};
use crate::design::{
    build_ensemble, covariance, dp_bounds, objective_lower_bound, pnorm, resolve_kind, DesignSpec, EnsembleKind,
};
use crate::error::{invalid, Error, Result};
use crate::estimator::{estimation_error, fit, fit_impulse_stream, OlsFit};
use crate::lti::{min_certified_grid, sup_norm, FirFilter};
use crate::monte_carlo::{
    certified_quantile, default_noise_grid, estimate_decay_c, estimate_e_approx, estimate_e_noise, histogram_csv,
    plant_family_sampler, McQuantile, TailBoundResult, DEFAULT_TAIL,
};
use crate::plant::{truncate_impulse_response, PlantOracle, RandomPlantParams};
use crate::rng::{derive_seed, GaussianStream, SIM};
use crate::robust::{
    certify, make_weight, perturbation_sweep, simulate_closed_loop, tracking_metrics, tune_controller, ClosedLoop,
    RationalFilter, TrackingMetrics,
};

/// `(dc, wc, hf)` of a first-order weight, see [`make_weight`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightParams {
    pub dc: f64,
    pub wc: f64,
    pub hf: f64,
}

impl WeightParams {
    pub fn build(&self) -> Result<RationalFilter> {
        make_weight(self.dc, self.wc, self.hf, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(with = "pnorm")]
    pub p: f64,
    pub m: usize,
    #[serde(rename = "T")]
    pub t: usize,
    pub r: usize,
    pub sigma: f64,
    pub sigma_n: f64,
    pub eps: f64,
    pub delta: f64,
    /// Plant taps (JSON or CSV); the random family when absent.
    pub plant_file: Option<PathBuf>,
    /// Not serialized, so recorded configs do not depend on where outputs land.
    #[serde(skip_serializing)]
    pub output_dir: PathBuf,
    pub ensemble: EnsembleKind,
    pub process_noise: bool,
    /// Attach the simulated noise quantile to identification reports (impulse designs).
    pub mc_bound: bool,
    pub mc_samples: usize,
    pub mc_delta: f64,
    pub rho: f64,
    /// Decay constant for the analytic truncation bound; estimated by simulation when absent.
    #[serde(rename = "C")]
    pub decay_c: Option<f64>,
    pub w1: WeightParams,
    pub w3: WeightParams,
    /// Uncertainty radius; `E_approx + E_noise` from simulation when absent.
    pub gamma: Option<f64>,
    pub controller_file: Option<PathBuf>,
    #[serde(rename = "grid_N")]
    pub grid_n: usize,
    pub steps: usize,
    /// Standard deviation of the sensor noise in closed-loop simulations.
    pub sim_noise: f64,
    pub perturbations: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            p: 2.0,
            m: 100,
            t: 150,
            r: 75,
            sigma: 1.0,
            sigma_n: 0.0,
            eps: 1.0,
            delta: 0.01,
            plant_file: None,
            output_dir: PathBuf::from("out"),
            ensemble: EnsembleKind::Auto,
            process_noise: false,
            mc_bound: false,
            mc_samples: 100_000,
            mc_delta: 1e-4,
            rho: 0.95,
            decay_c: None,
            w1: WeightParams {
                dc: 5000.0,
                wc: 0.07,
                hf: 0.5,
            },
            w3: WeightParams {
                dc: 0.5,
                wc: 0.21,
                hf: 5000.0,
            },
            gamma: None,
            controller_file: None,
            grid_n: crate::robust::DEFAULT_CERT_GRID,
            steps: 2000,
            sim_noise: 0.01,
            perturbations: 50,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn spec(&self) -> Result<DesignSpec> {
        DesignSpec::new(self.p, self.m, self.t, self.r)
    }

    /// Checks parameter ranges and that every referenced file exists.
    pub fn validate(&self) -> Result<()> {
        self.spec()?;
        for (name, x) in [
            ("sigma", self.sigma),
            ("sigma_n", self.sigma_n),
            ("sim_noise", self.sim_noise),
        ] {
            if !(x >= 0.0 && x.is_finite()) {
                return Err(invalid(format!("{name} must be finite and nonnegative, got {x}")));
            }
        }
        for (name, x) in [("delta", self.delta), ("mc_delta", self.mc_delta), ("rho", self.rho)] {
            if !(x > 0.0 && x < 1.0) {
                return Err(invalid(format!("{name} must lie in (0, 1), got {x}")));
            }
        }
        if !(self.eps > 0.0) {
            return Err(invalid(format!("eps must be positive, got {}", self.eps)));
        }
        for path in [&self.plant_file, &self.controller_file].into_iter().flatten() {
            if !path.is_file() {
                return Err(invalid(format!("file {} does not exist", path.display())));
            }
        }
        Ok(())
    }
}

/// Files produced by a command, keyed by path relative to the output directory.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Artifacts {
    pub files: BTreeMap<String, String>,
}

impl Artifacts {
    pub fn json<T: Serialize + ?Sized>(&mut self, name: &str, value: &T) {
        let mut s = serde_json::to_string_pretty(value).expect("artifact serializes");
        s.push('\n');
        self.files.insert(name.to_string(), s);
    }

    pub fn text(&mut self, name: &str, body: String) {
        self.files.insert(name.to_string(), body);
    }

    pub fn get(&self, name: &str) -> Option<&str> {
        self.files.get(name).map(String::as_str)
    }

    pub fn write_to(&self, dir: &Path) -> Result<()> {
        for (name, body) in &self.files {
            let path = dir.join(name);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(path, body)?;
        }
        Ok(())
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| invalid(format!("cannot read {}: {e}", path.display())))
}

/// Plant taps from a JSON plant file, a JSON filter or a CSV of taps.
pub fn load_taps(path: &Path) -> Result<FirFilter> {
    let text = read(path)?;
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        if let Ok(o) = PlantOracle::from_json(&text) {
            return Ok(o.truth().clone());
        }
        return FirFilter::from_json(&text);
    }
    if let Ok(o) = PlantOracle::from_csv(&text) {
        return Ok(o.truth().clone());
    }
    FirFilter::from_csv(&text)
}

pub fn load_controller(path: &Path) -> Result<RationalFilter> {
    RationalFilter::from_json(&read(path)?)
}

fn family(cfg: &RunConfig) -> RandomPlantParams {
    RandomPlantParams {
        rho: cfg.rho,
        taps: 150,
    }
}

/// The plant oracle named by the configuration, with its noise levels applied.
pub fn load_plant(cfg: &RunConfig) -> Result<PlantOracle> {
    let base = match &cfg.plant_file {
        Some(path) => {
            let taps = load_taps(path)?;
            let cut = truncate_impulse_response(taps.coeffs())?;
            PlantOracle::new(cut.filter, 0.0, 0.0, cfg.seed)?
        }
        None => PlantOracle::random_plant_with(cfg.seed, family(cfg)),
    };
    base.with_noise(cfg.sigma, cfg.sigma_n)
}

fn fir_csv(f: &FirFilter) -> String {
    f.to_csv()
}

// ---------------------------------------------------------------- design

pub fn cmd_design(cfg: &RunConfig) -> Result<Artifacts> {
    let spec = cfg.spec()?;
    let built = build_ensemble(&spec, cfg.ensemble)?;
    let cov = covariance(&built.ensemble, spec.r)?;
    let lower = objective_lower_bound(&spec)?;
    let mut report = json!({
        "kind": built.kind,
        "p": pnorm_value(spec.p),
        "m": spec.m,
        "T": spec.t,
        "r": spec.r,
        "trace_inv_r": cov.trace_inv_r,
        "condition_number": cov.condition_number,
        "lower_bound": lower,
        "gap": cov.trace_inv_r - lower,
        "gap_factor": cov.trace_inv_r / lower,
    });
    if let Some(w) = &built.weight {
        let (lo, hi) = dp_bounds(spec.p, spec.t, spec.r)?;
        report["dp"] = json!({
            "value": w.dp_value,
            "lower": w.dp_lower(),
            "sandwich": [lo, hi],
            "solver_gap": w.gap,
            "converged": w.converged,
            "iterations": w.iterations,
        });
    }
    let mut out = Artifacts::default();
    out.text("ensemble.json", built.ensemble.to_json() + "\n");
    out.json("design_report.json", &report);
    Ok(out)
}

fn pnorm_value(p: f64) -> Value {
    if p.is_infinite() {
        json!("inf")
    } else {
        json!(p)
    }
}

// ---------------------------------------------------------------- identify

/// Fit plus everything needed to report on it.
#[derive(Clone, Debug)]
pub struct Identification {
    pub oracle: PlantOracle,
    pub kind: EnsembleKind,
    pub fit: OlsFit,
    /// Output-noise level used in the bounds (after the process-noise substitution).
    pub sigma_eff: f64,
}

pub fn identify(cfg: &RunConfig) -> Result<Identification> {
    let spec = cfg.spec()?;
    let mut oracle = load_plant(cfg)?;
    let kind = resolve_kind(&spec, cfg.ensemble);
    let fit = if kind == EnsembleKind::Impulse {
        fit_impulse_stream(&oracle, spec.m, spec.t, spec.r, 0, cfg.process_noise)?
    } else {
        let built = build_ensemble(&spec, kind)?;
        let recs = if cfg.process_noise {
            oracle.batch_query_process_noise(&built.ensemble)?
        } else {
            oracle.batch_query(&built.ensemble)?
        };
        let ys: Vec<Vec<f64>> = recs.into_iter().map(|r| r.output).collect();
        fit(&built.ensemble, &ys, spec.r)?
    };
    let sigma_eff = if cfg.process_noise {
        process_noise_substitute(cfg.sigma, cfg.sigma_n, oracle.hinf_norm())
    } else {
        cfg.sigma
    };
    Ok(Identification {
        oracle,
        kind,
        fit,
        sigma_eff,
    })
}

/// Analytic (and optionally simulated) error bounds for an identification.
pub fn identification_report(cfg: &RunConfig, id: &Identification) -> Result<Value> {
    let r = id.fit.r;
    let v = id.fit.error_cov_factor.view((0, 0), (r, r)).into_owned() * (id.sigma_eff * id.sigma_eff);
    let conc = concentration_bound(&v, cfg.delta, None)?;
    let truth_err = estimation_error(&id.fit, id.oracle.truth(), 4 * min_certified_grid(r))?;
    let mut report = json!({
        "kind": id.kind,
        "m": cfg.m,
        "T": cfg.t,
        "r": r,
        "sigma": cfg.sigma,
        "sigma_n": cfg.sigma_n,
        "process_noise": cfg.process_noise,
        "sigma_eff": id.sigma_eff,
        "trace_inv_r": id.fit.trace_inv_r(),
        "condition_number": id.fit.condition_number,
        "concentration": conc,
        "true_error": truth_err,
    });
    if cfg.mc_bound {
        if id.kind != EnsembleKind::Impulse {
            return Err(invalid("the simulated noise bound applies to impulse designs only"));
        }
        let q = noise_quantile(cfg, r)?;
        let value = q.quantile * id.sigma_eff / (cfg.m as f64).sqrt();
        report["monte_carlo"] = json!({
            "bound": ErrorBound::probabilistic(value, DEFAULT_TAIL, Provenance::MonteCarlo),
            "unit_quantile": q,
        });
    }
    Ok(report)
}

fn noise_quantile(cfg: &RunConfig, r: usize) -> Result<McQuantile> {
    estimate_e_noise(1.0, r, cfg.mc_samples, cfg.mc_delta, default_noise_grid(r), cfg.seed)
}

pub fn cmd_identify(cfg: &RunConfig) -> Result<Artifacts> {
    let id = identify(cfg)?;
    let report = identification_report(cfg, &id)?;
    let mut out = Artifacts::default();
    out.text("ghat_r.csv", fir_csv(&id.fit.g_hat_r));
    out.text("ghat_full.csv", fir_csv(&FirFilter::new(id.fit.g_hat.clone())?));
    out.json("identify_report.json", &report);
    Ok(out)
}

// ---------------------------------------------------------------- bound

/// Truncation length needed for an approximation error of `eps / 2`, from the plant
/// file when given, else from the decay envelope `C rho^{r-1} / (1 - rho)` when `C` is set.
pub fn required_truncation(cfg: &RunConfig) -> Result<Option<usize>> {
    let half = cfg.eps / 2.0;
    if cfg.plant_file.is_some() {
        let plant = load_plant(cfg)?;
        return Ok(Some(truncation_length_fir(plant.truth().coeffs(), cfg.rho, half)?));
    }
    let Some(c) = cfg.decay_c else { return Ok(None) };
    let profile = DecayProfile::new(c, cfg.rho)?;
    let mut r = 1;
    while decay_truncation_bound(&profile, r)?.value > half {
        r += 1;
    }
    Ok(Some(r))
}

pub fn cmd_bound(cfg: &RunConfig) -> Result<Artifacts> {
    let r_required = required_truncation(cfg)?;
    let r = r_required.unwrap_or(cfg.r);
    let case = if cfg.p <= 2.0 { BudgetCase::L2 } else { BudgetCase::Linf };
    let mut analytic = json!({
        "sample_complexity": {
            "l2": sample_complexity(BudgetCase::L2, cfg.sigma, cfg.eps, cfg.delta, r)?,
            "linf": sample_complexity(BudgetCase::Linf, cfg.sigma, cfg.eps, cfg.delta, r)?,
        },
        "fir_error_upper": fir_error_upper(cfg.p, cfg.sigma, r, cfg.m, cfg.delta)?,
    });
    if r >= 16 {
        analytic["minimax_lower"] = json!(minimax_lower(cfg.p, cfg.sigma, r, cfg.m)?);
    }
    if let Some(c) = cfg.decay_c {
        let profile = DecayProfile::new(c, cfg.rho)?;
        analytic["decay_truncation_bound"] = json!(decay_truncation_bound(&profile, r)?);
    }
    let report = json!({
        "epsilon": cfg.eps,
        "delta": cfg.delta,
        "sigma": cfg.sigma,
        "p": pnorm_value(cfg.p),
        "m": cfg.m,
        "r": r,
        "r_required": r_required,
        "m_required": sample_complexity(case, cfg.sigma, cfg.eps, cfg.delta, r)?,
        "analytic_bounds": analytic,
    });
    let mut out = Artifacts::default();
    out.json("bound_report.json", &report);
    Ok(out)
}

// ---------------------------------------------------------------- mc-bound

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Statistic {
    DecayC,
    EApprox,
    ENoise,
    Custom,
}

impl std::str::FromStr for Statistic {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "decay_C" | "decay_c" => Ok(Self::DecayC),
            "e_approx" => Ok(Self::EApprox),
            "e_noise" => Ok(Self::ENoise),
            "custom" => Ok(Self::Custom),
            _ => Err(Error::Parse(format!("unknown statistic {s:?}"))),
        }
    }
}

/// Options of `mc-bound` beyond the run configuration.
#[derive(Clone, Debug, Default)]
pub struct McRequest {
    pub statistic: Option<Statistic>,
    /// Sample file for the custom statistic, one value per line.
    pub samples_file: Option<PathBuf>,
    /// Fixed threshold: certify `Pr(X >= t)` instead of searching for a quantile.
    pub threshold: Option<f64>,
    pub n_grid: Option<usize>,
}

pub fn cmd_mc_bound(cfg: &RunConfig, req: &McRequest) -> Result<Artifacts> {
    let stat = req.statistic.unwrap_or(Statistic::DecayC);
    let n = cfg.mc_samples;
    let samples: Vec<f64> = match stat {
        Statistic::DecayC => {
            estimate_decay_c(plant_family_sampler(cfg.seed, family(cfg)), cfg.rho, n, cfg.mc_delta)?.samples
        }
        Statistic::EApprox => {
            estimate_e_approx(plant_family_sampler(cfg.seed, family(cfg)), cfg.r, n, cfg.mc_delta)?.samples
        }
        Statistic::ENoise => {
            let grid = req.n_grid.unwrap_or_else(|| default_noise_grid(cfg.r));
            estimate_e_noise(cfg.sigma, cfg.r, n, cfg.mc_delta, grid, cfg.seed)?.samples
        }
        Statistic::Custom => {
            let path = req
                .samples_file
                .as_ref()
                .ok_or_else(|| invalid("the custom statistic needs a samples file"))?;
            parse_samples(&read(path)?)?
        }
    };
    let mut out = Artifacts::default();
    match req.threshold {
        Some(t) => {
            let count = samples.iter().filter(|&&x| x >= t).count();
            let mut res: TailBoundResult = crate::monte_carlo::chernoff_upper(count, samples.len(), cfg.mc_delta)?;
            res.t = Some(t);
            out.json("mc_bound.json", &json!({ "statistic": stat, "tail_bound": res }));
        }
        None => {
            let q = certified_quantile(samples.clone(), DEFAULT_TAIL, cfg.mc_delta)?;
            out.json("mc_bound.json", &json!({ "statistic": stat, "quantile": q }));
        }
    }
    out.text("mc_histogram.csv", histogram_csv(&samples, 100));
    Ok(out)
}

fn parse_samples(text: &str) -> Result<Vec<f64>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .enumerate()
        .map(|(i, l)| {
            l.split(',')
                .next()
                .unwrap_or("")
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::Parse(format!("sample {}: {l:?} is not a number", i + 1)))
        })
        .collect()
}

// ---------------------------------------------------------------- certify

/// Certification result plus the grid-refinement check.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertifyOutcome {
    pub report: crate::robust::CertificationReport,
    pub refined_margin: f64,
    /// `|margin(2N) - margin(N)| / |margin(N)|`.
    pub refinement_drift: f64,
    pub certified: bool,
    pub controller: RationalFilter,
    pub controller_source: String,
}

pub fn certify_model(
    w1: &RationalFilter,
    controller: Option<RationalFilter>,
    model: &FirFilter,
    gamma: f64,
    n: usize,
) -> Result<CertifyOutcome> {
    let (controller, source) = match controller {
        Some(k) => (k, "file".to_string()),
        None => (tune_controller(w1, model, gamma, 1024)?.controller, "tuned".to_string()),
    };
    let report = certify(w1, &controller, model, gamma, n)?;
    let refined = certify(w1, &controller, model, gamma, 2 * n)?;
    let drift = (refined.perf_margin - report.perf_margin).abs() / report.perf_margin.abs().max(f64::MIN_POSITIVE);
    Ok(CertifyOutcome {
        certified: report.certified(),
        report,
        refined_margin: refined.perf_margin,
        refinement_drift: drift,
        controller,
        controller_source: source,
    })
}

/// Certifies the controller from `controller_file` (or a tuned one) against the
/// model in `model` (or a fresh identification when absent).
pub fn cmd_certify(cfg: &RunConfig, model: Option<&Path>) -> Result<(Artifacts, CertifyOutcome)> {
    let w1 = cfg.w1.build()?;
    let g = match model {
        Some(path) => load_taps(path)?,
        None => identify(cfg)?.fit.g_hat_r,
    };
    let gamma = cfg
        .gamma
        .ok_or_else(|| invalid("certification needs an uncertainty radius gamma"))?;
    let k = cfg.controller_file.as_deref().map(load_controller).transpose()?;
    let outcome = certify_model(&w1, k, &g, gamma, cfg.grid_n)?;
    let mut out = Artifacts::default();
    out.json("certify_report.json", &outcome);
    Ok((out, outcome))
}

// ---------------------------------------------------------------- simulate

/// Unit-step reference and seeded sensor noise of standard deviation `sim_noise`.
pub fn step_and_noise(cfg: &RunConfig, steps: usize) -> (Vec<f64>, Vec<f64>) {
    let reference = vec![1.0; steps];
    let mut s = GaussianStream::new(derive_seed(cfg.seed, SIM), 0);
    let noise = (0..steps).map(|_| cfg.sim_noise * s.normal()).collect();
    (reference, noise)
}

pub fn closed_loop_csv(reference: &[f64], noise: &[f64], sim: &ClosedLoop) -> String {
    let mut s = String::from("t,ref,noise,e,u,y\n");
    for t in 0..sim.y.len() {
        let _ = writeln!(
            s,
            "{t},{:?},{:?},{:?},{:?},{:?}",
            reference[t], noise[t], sim.e[t], sim.u[t], sim.y[t]
        );
    }
    s
}

/// Simulates the configured plant in closed loop with the controller from
/// `controller_file`, or with the controller tuned on an identified model.
pub fn cmd_simulate(cfg: &RunConfig) -> Result<Artifacts> {
    let plant = load_plant(cfg)?;
    let k = match &cfg.controller_file {
        Some(path) => load_controller(path)?,
        None => {
            let gamma = cfg
                .gamma
                .ok_or_else(|| invalid("tuning a controller needs an uncertainty radius gamma"))?;
            tune_controller(&cfg.w1.build()?, &identify(cfg)?.fit.g_hat_r, gamma, 1024)?.controller
        }
    };
    let (reference, noise) = step_and_noise(cfg, cfg.steps);
    let sim = simulate_closed_loop(plant.truth(), &k, &reference, &noise, cfg.steps)?;
    let mut out = Artifacts::default();
    out.text("closed_loop.csv", closed_loop_csv(&reference, &noise, &sim));
    out.json("tracking_metrics.json", &tracking_metrics(&sim.y, &reference)?);
    Ok(out)
}

// ---------------------------------------------------------------- lower-bound

pub fn cmd_lower_bound(cfg: &RunConfig) -> Result<Artifacts> {
    let spec = cfg.spec()?;
    let mut report = json!({
        "p": pnorm_value(spec.p),
        "m": spec.m,
        "T": spec.t,
        "r": spec.r,
        "objective_lower_bound": objective_lower_bound(&spec)?,
    });
    if spec.r >= 16 {
        report["minimax_lower"] = json!(minimax_lower(spec.p, cfg.sigma, spec.r, spec.m)?);
        report["fir_error_upper"] = json!(fir_error_upper(spec.p, cfg.sigma, spec.r, spec.m, cfg.delta)?);
    }
    let mut out = Artifacts::default();
    out.json("lower_bound.json", &report);
    Ok(out)
}

// ---------------------------------------------------------------- truncation sweep

pub const SWEEP_LENGTHS: [usize; 4] = [10, 30, 50, 70];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub r: usize,
    pub perf_margin: f64,
    pub metrics: TrackingMetrics,
}

/// Controllers tuned on `g_hat` truncated to each of [`SWEEP_LENGTHS`], each run in
/// closed loop with the true plant on a unit step with sensor noise.
pub fn truncation_sweep(
    truth: &FirFilter,
    g_hat: &FirFilter,
    w1: &RationalFilter,
    gamma: f64,
    reference: &[f64],
    noise: &[f64],
) -> Result<Vec<SweepRow>> {
    SWEEP_LENGTHS
        .iter()
        .map(|&r| {
            let model = g_hat.truncate(r.min(g_hat.len()));
            let tuned = tune_controller(w1, &model, gamma, 512)?;
            let sim = simulate_closed_loop(truth, &tuned.controller, reference, noise, reference.len())?;
            Ok(SweepRow {
                r,
                perf_margin: tuned.report.perf_margin,
                metrics: tracking_metrics(&sim.y, reference)?,
            })
        })
        .collect()
}

/// Majority rule: at least two of the three consecutive length increases do not
/// worsen the metric, and the longest model is no worse than the shortest.
pub fn improves_in_majority(values: &[f64]) -> bool {
    let steps = values.windows(2).filter(|w| w[1] <= w[0]).count();
    match (values.first(), values.last()) {
        (Some(a), Some(b)) => 2 * steps > values.len() - 1 && b <= a,
        _ => false,
    }
}

pub fn sweep_improves(rows: &[SweepRow]) -> bool {
    let os: Vec<f64> = rows.iter().map(|r| r.metrics.overshoot).collect();
    let se: Vec<f64> = rows.iter().map(|r| r.metrics.steady_error).collect();
    improves_in_majority(&os) && improves_in_majority(&se)
}

fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("r,perf_margin,overshoot,settle_time,steady_error\n");
    for row in rows {
        let _ = writeln!(
            s,
            "{},{:?},{:?},{},{:?}",
            row.r, row.perf_margin, row.metrics.overshoot, row.metrics.settle_time, row.metrics.steady_error
        );
    }
    s
}

// ---------------------------------------------------------------- demo

/// Simulated constants of the random plant family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilyBounds {
    pub decay_c: McQuantile,
    pub e_approx: McQuantile,
    /// Quantile of the un-normalized noise sup-norm at unit variance.
    pub e_noise_unit: McQuantile,
    /// `sigma / sqrt(m)` times the unit quantile.
    pub e_noise: f64,
    pub gamma: f64,
}

pub fn family_bounds(cfg: &RunConfig) -> Result<FamilyBounds> {
    let sampler = plant_family_sampler(cfg.seed, family(cfg));
    let decay_c = estimate_decay_c(&sampler, cfg.rho, cfg.mc_samples, cfg.mc_delta)?;
    let e_approx = estimate_e_approx(&sampler, cfg.r, cfg.mc_samples, cfg.mc_delta)?;
    let e_noise_unit = noise_quantile(cfg, cfg.r)?;
    let e_noise = e_noise_unit.quantile * cfg.sigma / (cfg.m as f64).sqrt();
    Ok(FamilyBounds {
        gamma: e_approx.quantile + e_noise,
        decay_c,
        e_approx,
        e_noise_unit,
        e_noise,
    })
}

/// Identification, simulated bounds, certification, perturbation sweep, closed-loop
/// runs and truncation sweep for one seed of the random plant family.
pub fn cmd_demo(cfg: &RunConfig) -> Result<(Artifacts, CertifyOutcome)> {
    if cfg.plant_file.is_some() {
        return Err(invalid("the demo runs on the random plant family; drop plant_file"));
    }
    let mut cfg = cfg.clone();
    cfg.ensemble = EnsembleKind::Impulse;
    cfg.p = 2.0;
    let mut out = Artifacts::default();
    out.json("config.json", &cfg);

    // identification on the full experiment length; the model keeps r taps
    let id = identify(&RunConfig {
        r: cfg.t,
        ..cfg.clone()
    })?;
    let truth = id.oracle.truth().clone();
    let g_full = FirFilter::new(id.fit.g_hat.clone())?;
    let model = g_full.truncate(cfg.r);
    out.text("plant.json", id.oracle.to_json() + "\n");
    out.text("identify/ghat_full.csv", fir_csv(&g_full));
    out.text("identify/ghat_r.csv", fir_csv(&model));
    let model_err = sup_norm(&model.sub(&truth.truncate(cfg.r)), 4 * min_certified_grid(cfg.r))?;

    let fb = family_bounds(&cfg)?;
    for (name, q) in [
        ("decay_c", &fb.decay_c),
        ("e_approx", &fb.e_approx),
        ("e_noise", &fb.e_noise_unit),
    ] {
        out.json(&format!("mc/{name}.json"), q);
        out.text(&format!("mc/{name}_histogram.csv"), histogram_csv(&q.samples, 100));
    }
    let gamma = cfg.gamma.unwrap_or(fb.gamma);
    let estimated = DecayProfile::new(fb.decay_c.quantile, cfg.rho)?;
    let reference_c = DecayProfile::new(3.9703, cfg.rho)?;
    let tail = &truth.coeffs()[cfg.r.min(truth.len())..];
    let true_tail = if tail.is_empty() {
        None
    } else {
        Some(sup_norm(&FirFilter::new(tail.to_vec())?, 8192)?)
    };
    out.json(
        "bounds.json",
        &json!({
            "C": fb.decay_c.quantile,
            "rho": cfg.rho,
            "r": cfg.r,
            "decay_truncation_bound": decay_truncation_bound(&estimated, cfg.r)?,
            "decay_truncation_bound_at_C_3.9703": decay_truncation_bound(&reference_c, cfg.r)?,
            "e_approx": fb.e_approx.quantile,
            "e_noise_unit": fb.e_noise_unit.quantile,
            "e_noise": fb.e_noise,
            "gamma": gamma,
            "model_error": model_err,
            "true_tail_hinf": true_tail,
        }),
    );

    let w1 = cfg.w1.build()?;
    let w3 = cfg.w3.build()?;
    out.text("weights/w1.json", w1.to_json() + "\n");
    out.text("weights/w3.json", w3.to_json() + "\n");
    let k = cfg.controller_file.as_deref().map(load_controller).transpose()?;
    let outcome = certify_model(&w1, k, &model, gamma, cfg.grid_n)?;
    out.text("controller.json", outcome.controller.to_json() + "\n");
    out.json("certify_report.json", &outcome);

    let sweep = perturbation_sweep(
        &w1,
        &outcome.controller,
        &model,
        gamma,
        cfg.perturbations,
        cfg.steps,
        cfg.grid_n,
        cfg.seed,
    )?;
    out.json("perturbation_sweep.json", &sweep);

    let (reference, noise) = step_and_noise(&cfg, cfg.steps);
    for (name, plant) in [("model", &model), ("true", &truth)] {
        let sim = simulate_closed_loop(plant, &outcome.controller, &reference, &noise, cfg.steps)?;
        out.text(
            &format!("closed_loop_{name}.csv"),
            closed_loop_csv(&reference, &noise, &sim),
        );
    }

    let rows = truncation_sweep(&truth, &g_full, &w1, gamma, &reference, &noise)?;
    out.text("truncation_sweep.csv", sweep_csv(&rows));
    out.json(
        "summary.json",
        &json!({
            "seed": cfg.seed,
            "gamma": gamma,
            "C": fb.decay_c.quantile,
            "e_approx": fb.e_approx.quantile,
            "e_noise": fb.e_noise,
            "perf_margin": outcome.report.perf_margin,
            "certified": outcome.certified,
            "refinement_drift": outcome.refinement_drift,
            "boundedness_violations": sweep.boundedness_violations,
            "performance_violations": sweep.performance_violations,
            "truncation_sweep_improves": sweep_improves(&rows),
        }),
    );
    Ok((out, outcome))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        RunConfig {
            m: 32,
            t: 16,
            r: 8,
            mc_samples: 2000,
            ..RunConfig::default()
        }
    }

    #[test]
    fn config_round_trip_and_defaults() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
        let partial = RunConfig::from_json(r#"{"seed": 7, "p": "inf"}"#).unwrap();
        assert_eq!(partial.seed, 7);
        assert!(partial.p.is_infinite());
        assert_eq!(partial.m, 100);
    }

    #[test]
    fn missing_files_are_rejected() {
        let cfg = RunConfig {
            plant_file: Some(PathBuf::from("/nonexistent/plant.json")),
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn design_reports_zero_gap_for_impulse() {
        let out = cmd_design(&RunConfig { p: 2.0, ..small() }).unwrap();
        let v: Value = serde_json::from_str(out.get("design_report.json").unwrap()).unwrap();
        assert_eq!(v["kind"], "impulse");
        assert!(v["gap"].as_f64().unwrap().abs() < 1e-12);
    }

    #[test]
    fn noiseless_identification_is_exact() {
        let cfg = RunConfig { sigma: 0.0, ..small() };
        let id = identify(&cfg).unwrap();
        for (a, b) in id.fit.g_hat.iter().zip(id.oracle.truth().coeffs()) {
            assert!((a - b).abs() < 1e-12);
        }
        let rep = identification_report(&cfg, &id).unwrap();
        assert_eq!(rep["concentration"]["probabilistic"]["value"].as_f64().unwrap(), 0.0);
    }

    #[test]
    fn majority_rule() {
        assert!(improves_in_majority(&[3.0, 2.0, 2.5, 1.0]));
        assert!(!improves_in_majority(&[3.0, 4.0, 5.0, 1.0]));
        assert!(!improves_in_majority(&[1.0, 0.5, 0.4, 1.5]));
    }

    #[test]
    fn statistic_names() {
        assert_eq!("decay_C".parse::<Statistic>().unwrap(), Statistic::DecayC);
        assert_eq!("e_noise".parse::<Statistic>().unwrap(), Statistic::ENoise);
        assert!("bogus".parse::<Statistic>().is_err());
    }
}
