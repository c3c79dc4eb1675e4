use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coarse-id"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn stdout_json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).expect("stdout is JSON")
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                files.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    files.sort();
    files
}

const QUICK: [&str; 6] = ["--N", "5000", "--perturbations", "5", "--steps", "400"];

#[test]
fn demo_trees_are_identical_across_thread_counts() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let mut args = vec!["demo", "--seed", "42", "--threads", "1"];
    args.extend(QUICK);
    let oa = run(&args, &a);
    args[4] = "2";
    let ob = run(&args, &b);
    assert_eq!(oa.status.code(), ob.status.code());
    assert!(
        matches!(oa.status.code(), Some(0 | 4)),
        "{}",
        String::from_utf8_lossy(&oa.stderr)
    );
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.len() >= 20);
    assert_eq!(ta, tb);
    assert_eq!(oa.stdout, ob.stdout);
}

#[test]
fn bound_prints_report() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["bound", "--C", "3.9703", "--eps", "1", "--delta", "0.01"], tmp.path());
    assert!(o.status.success());
    let v = stdout_json(&o);
    for key in ["epsilon", "delta", "r_required", "m_required", "analytic_bounds"] {
        assert!(v.get(key).is_some(), "missing {key}");
    }
    assert!(tmp.path().join("bound_report.json").is_file());
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    // odd m cannot carry the sinusoid design
    let o = run(
        &["design", "--p", "4", "--m", "31", "--T", "16", "--r", "8"],
        tmp.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    // a huge uncertainty radius cannot be certified
    let o = run(&["certify", "--gamma", "1000", "--m", "100"], tmp.path());
    assert_eq!(o.status.code(), Some(4));
    assert!(stdout_json(&o)["certified"] == false);
    let o = run(&["identify", "--plant", "/nonexistent.json"], tmp.path());
    assert_eq!(o.status.code(), Some(1));
    let o = run(&["design", "--p", "2", "--m", "4", "--T", "4", "--r", "2"], tmp.path());
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn config_file_with_flag_overrides() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"p": "inf", "m": 8, "T": 8, "r": 8}"#).unwrap();
    let o = run(&["design", "--config", cfg.to_str().unwrap()], &tmp.path().join("o"));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v = stdout_json(&o);
    assert_eq!(v["kind"], "hadamard");
    assert!(v["gap"].as_f64().unwrap().abs() < 1e-10);
    let o = run(
        &["design", "--config", cfg.to_str().unwrap(), "--p", "4", "--m", "16"],
        &tmp.path().join("o"),
    );
    assert_eq!(stdout_json(&o)["kind"], "sinusoid");
}

#[test]
fn identify_then_certify_from_model_file() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["identify", "--m", "400", "--mc-bound", "--N", "3000"], tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout_json(&o)["monte_carlo"]["bound"]["value"].as_f64().unwrap() > 0.0);
    let model = tmp.path().join("ghat_r.csv");
    let o = run(
        &["certify", "--model", model.to_str().unwrap(), "--gamma", "1.0"],
        &tmp.path().join("c"),
    );
    assert!(matches!(o.status.code(), Some(0 | 4)));
    let v = stdout_json(&o);
    assert!(v["refinement_drift"].as_f64().unwrap() < 0.01);
    // a certified controller is reusable through --controller
    let k = tmp.path().join("k.json");
    std::fs::write(&k, serde_json::to_string(&v["controller"]).unwrap()).unwrap();
    let o = run(
        &["simulate", "--controller", k.to_str().unwrap(), "--steps", "300"],
        &tmp.path().join("s"),
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(tmp.path().join("s/closed_loop.csv")).unwrap();
    assert!(csv.starts_with("t,ref,noise,e,u,y\n"));
    assert_eq!(csv.lines().count(), 301);
}

#[test]
fn mc_bound_statistics() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(
        &["mc-bound", "--statistic", "e_approx", "--N", "5000", "--r", "75"],
        tmp.path(),
    );
    assert!(o.status.success());
    let q = stdout_json(&o)["quantile"]["quantile"].as_f64().unwrap();
    assert!(q > 0.3 && q < 0.7, "{q}");
    let o = run(&["mc-bound", "--statistic", "bogus"], tmp.path());
    assert!(!o.status.success());
}
