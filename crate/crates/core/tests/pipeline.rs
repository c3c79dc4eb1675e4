//! End-to-end runs of the command pipeline on reduced settings.

use coarse_id::design::EnsembleKind;
use coarse_id::lti::FirFilter;
use coarse_id::pipeline::{
    cmd_bound, cmd_certify, cmd_demo, cmd_identify, cmd_lower_bound, cmd_mc_bound, cmd_simulate, improves_in_majority,
    McRequest, RunConfig, Statistic,
};
use coarse_id::plant::PlantOracle;
use coarse_id::robust::{certify, make_weight, tune_controller, RationalFilter, DEFAULT_CERT_GRID};
use coarse_id::Error;
use serde_json::Value;

fn quick() -> RunConfig {
    RunConfig {
        mc_samples: 5000,
        perturbations: 5,
        steps: 400,
        ..RunConfig::default()
    }
}

fn json(text: &str) -> Value {
    serde_json::from_str(text).unwrap()
}

#[test]
fn demo_artifacts_round_trip_through_parsers() {
    let (out, outcome) = cmd_demo(&quick()).unwrap();
    let plant = PlantOracle::from_json(out.get("plant.json").unwrap()).unwrap();
    assert_eq!(plant.truth().len(), 150);
    let ghat = FirFilter::from_csv(out.get("identify/ghat_r.csv").unwrap()).unwrap();
    assert_eq!(ghat.len(), 75);
    assert_eq!(ghat.to_csv(), out.get("identify/ghat_r.csv").unwrap());
    let k = RationalFilter::from_json(out.get("controller.json").unwrap()).unwrap();
    assert_eq!(k, outcome.controller);
    let cfg = RunConfig::from_json(out.get("config.json").unwrap()).unwrap();
    assert_eq!(cfg.ensemble, EnsembleKind::Impulse);
    for name in ["closed_loop_model.csv", "closed_loop_true.csv"] {
        let body = out.get(name).unwrap();
        assert!(body.starts_with("t,ref,noise,e,u,y\n"));
        assert_eq!(body.lines().count(), 401);
        // every field parses back to a finite float
        for line in body.lines().skip(1) {
            assert!(line.split(',').all(|f| f.parse::<f64>().is_ok_and(f64::is_finite)));
        }
    }
    let sweep = out.get("truncation_sweep.csv").unwrap();
    assert_eq!(sweep.lines().count(), 5);
    let summary = json(out.get("summary.json").unwrap());
    assert_eq!(summary["certified"].as_bool().unwrap(), outcome.certified);
    let bounds = json(out.get("bounds.json").unwrap());
    let forced = bounds["decay_truncation_bound_at_C_3.9703"]["value"].as_f64().unwrap();
    assert!((forced - 1.7840).abs() < 5e-4);
}

#[test]
fn demo_is_a_pure_function_of_the_config() {
    let a = cmd_demo(&quick()).unwrap().0;
    let b = cmd_demo(&quick()).unwrap().0;
    assert_eq!(a, b);
    let c = cmd_demo(&RunConfig { seed: 43, ..quick() }).unwrap().0;
    assert_ne!(a.get("plant.json"), c.get("plant.json"));
}

#[test]
fn identify_applies_process_noise_substitution() {
    let base = RunConfig {
        sigma_n: 0.5,
        ..quick()
    };
    let plain = json(cmd_identify(&base).unwrap().get("identify_report.json").unwrap());
    let proc = json(
        cmd_identify(&RunConfig {
            process_noise: true,
            ..base
        })
        .unwrap()
        .get("identify_report.json")
        .unwrap(),
    );
    assert_eq!(plain["sigma_eff"].as_f64().unwrap(), 1.0);
    let s = proc["sigma_eff"].as_f64().unwrap();
    assert!(s > 1.0);
    let ratio = proc["concentration"]["probabilistic"]["value"].as_f64().unwrap()
        / plain["concentration"]["probabilistic"]["value"].as_f64().unwrap();
    assert!((ratio - s).abs() < 1e-9 * s);
}

#[test]
fn full_scale_identification_meets_its_bound() {
    // m from the l2 sample complexity at eps = 1, delta = 0.01
    let bound = json(
        cmd_bound(&RunConfig { r: 75, ..quick() })
            .unwrap()
            .get("bound_report.json")
            .unwrap(),
    );
    let m = bound["m_required"].as_u64().unwrap() as usize;
    let cfg = RunConfig {
        m,
        ensemble: EnsembleKind::Impulse,
        mc_bound: true,
        ..quick()
    };
    let rep = json(cmd_identify(&cfg).unwrap().get("identify_report.json").unwrap());
    let err = rep["true_error"]["certified_upper"].as_f64().unwrap();
    assert!(err <= 0.5, "error {err} exceeds eps / 2");
    assert!(err <= rep["concentration"]["probabilistic"]["value"].as_f64().unwrap());
    assert!(err <= rep["monte_carlo"]["bound"]["value"].as_f64().unwrap());
}

#[test]
fn mc_bound_threshold_and_custom_samples() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("samples.txt");
    let body: String = (0..1000).map(|i| format!("{}\n", i as f64 / 1000.0)).collect();
    std::fs::write(&path, body).unwrap();
    let req = McRequest {
        statistic: Some(Statistic::Custom),
        samples_file: Some(path),
        threshold: Some(0.9),
        n_grid: None,
    };
    let out = cmd_mc_bound(&quick(), &req).unwrap();
    let v = json(out.get("mc_bound.json").unwrap());
    assert_eq!(v["tail_bound"]["count"].as_u64().unwrap(), 100);
    assert!(v["tail_bound"]["certified_upper"].as_f64().unwrap() > 0.1);
    assert!(out.get("mc_histogram.csv").unwrap().starts_with("lo,hi,count\n"));
}

#[test]
fn certify_reports_refinement_and_rejects_missing_gamma() {
    assert!(matches!(cmd_certify(&quick(), None), Err(Error::InvalidParameter(_))));
    let (_, outcome) = cmd_certify(
        &RunConfig {
            gamma: Some(1.0),
            ..quick()
        },
        None,
    )
    .unwrap();
    assert!(outcome.refinement_drift < 0.01);
    assert_eq!(outcome.controller_source, "tuned");
}

#[test]
fn certification_margin_converges_under_refinement() {
    let g = PlantOracle::random_plant(2).truth().truncate(75);
    let w1 = make_weight(5000.0, 0.07, 0.5, 1.0).unwrap();
    let k = tune_controller(&w1, &g, 2.0, 1024).unwrap().controller;
    let margins: Vec<f64> = [DEFAULT_CERT_GRID / 2, DEFAULT_CERT_GRID, 2 * DEFAULT_CERT_GRID]
        .into_iter()
        .map(|n| certify(&w1, &k, &g, 2.0, n).unwrap().perf_margin)
        .collect();
    // refining the grid can only find a larger peak, so margins do not increase
    assert!(margins[2] <= margins[1] + 1e-12 && margins[1] <= margins[0] + 1e-12);
    assert!((margins[2] - margins[1]).abs() < 0.01 * margins[1].abs());
}

#[test]
fn simulate_and_lower_bound_commands() {
    let gamma = Some(2.0);
    let out = cmd_simulate(&RunConfig { gamma, ..quick() }).unwrap();
    let m = json(out.get("tracking_metrics.json").unwrap());
    assert!(m["steady_error"].as_f64().unwrap() < 0.05);
    let lb = json(
        cmd_lower_bound(&RunConfig {
            r: 16,
            t: 32,
            m: 64,
            ..quick()
        })
        .unwrap()
        .get("lower_bound.json")
        .unwrap(),
    );
    assert!(lb["minimax_lower"].as_f64().unwrap() <= lb["fir_error_upper"]["value"].as_f64().unwrap());
    assert!(!improves_in_majority(&[]));
}
