use std::path::{Path, PathBuf};
use std::process::Command;

use serde_json::{json, Value};
use swg_core::checkpoint::DenoiserCheckpoint;
use swg_core::denoiser::{ConditioningMode, Denoiser, DenoiserConfig, Normalizer};
use swg_core::nn::{Activation, Architecture, FinalInit};
use swg_core::schedule::ScheduleKind;
use swg_core::SeededRng;

fn swg(verb: &str, config: &Path, out: &Path, extra: &[&str]) -> i32 {
    let status = Command::new(env!("CARGO_BIN_EXE_swg"))
        .arg(verb)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .output()
        .expect("runs");
    if !status.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&status.stderr));
    }
    status.status.code().expect("exit code")
}

fn write_config(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn toy_config(extra: Value) -> Value {
    let mut v = json!({
        "seed": 5,
        "data": {"source": "toy", "distribution": "spiral", "n": 400, "energy": {"kind": "tilt"}, "beta": 2.0},
        "model": {"arch": {"kind": "mlp", "depth": 2, "width": 16, "activation": "gelu"}, "steps": 10},
        "train": {"steps": 30, "batch": 32, "log_every": 10}
    });
    for (k, x) in extra.as_object().unwrap() {
        v[k] = x.clone();
    }
    v
}

fn rows(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path).unwrap().lines().map(String::from).collect()
}

#[test]
fn toy_data_has_beta_column_only_when_conditioned() {
    let d = tempfile::tempdir().unwrap();
    let fixed = write_config(d.path(), "a.json", &toy_config(json!({})));
    assert_eq!(swg("generate-data", &fixed, &d.path().join("a"), &[]), 0);
    let a = rows(&d.path().join("a/dataset.csv"));
    assert_eq!(a[0], "a_1,a_2,w");
    assert_eq!(a.len(), 401);

    let mut cfg = toy_config(json!({}));
    cfg["data"] = json!({"source": "toy", "distribution": "moons", "n": 300, "energy": {"kind": "tilt"}, "beta_max": 10.0});
    let cond = write_config(d.path(), "b.json", &cfg);
    assert_eq!(swg("generate-data", &cond, &d.path().join("b"), &[]), 0);
    let b = rows(&d.path().join("b/dataset.csv"));
    assert_eq!(b[0], "a_1,a_2,w,beta");
    assert_eq!(b.len(), 301);
}

#[test]
fn bandit_data_and_run_provenance() {
    let d = tempfile::tempdir().unwrap();
    let c = write_config(d.path(), "c.json", &json!({"data": {"source": "bandit", "n": 250, "noise": 0.3}}));
    let out = d.path().join("o");
    assert_eq!(swg("generate-data", &c, &out, &["--seed", "42"]), 0);
    assert_eq!(rows(&out.join("transitions.csv")).len(), 251);
    let run: Value = serde_json::from_str(&std::fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert!(run["version"].as_str().unwrap().starts_with("swg "));
    assert_eq!(run["seed"], 42);
    assert_eq!(run["inputs"]["config"].as_str().unwrap().len(), 64);
    let resolved: Value = serde_json::from_str(&std::fs::read_to_string(out.join("config.resolved.json")).unwrap()).unwrap();
    assert_eq!(resolved["seed"], 42);
}

#[test]
fn same_seed_gives_identical_checkpoint_and_resume_is_exact() {
    let d = tempfile::tempdir().unwrap();
    let c = write_config(d.path(), "t.json", &toy_config(json!({})));
    assert_eq!(swg("train", &c, &d.path().join("r1"), &[]), 0);
    assert_eq!(swg("train", &c, &d.path().join("r2"), &[]), 0);
    let a = std::fs::read(d.path().join("r1/checkpoint.json")).unwrap();
    assert_eq!(a, std::fs::read(d.path().join("r2/checkpoint.json")).unwrap());
    assert_eq!(rows(&d.path().join("r1/loss_trace.csv"))[0], "step,loss,window_mean");

    let mut half = toy_config(json!({}));
    half["train"]["steps"] = json!(12);
    let h = write_config(d.path(), "h.json", &half);
    assert_eq!(swg("train", &h, &d.path().join("h"), &[]), 0);
    let ck = d.path().join("h/checkpoint.json");
    assert_eq!(swg("train", &c, &d.path().join("resumed"), &["--checkpoint", ck.to_str().unwrap()]), 0);
    assert_eq!(a, std::fs::read(d.path().join("resumed/checkpoint.json")).unwrap());
}

#[test]
fn sweep_writes_one_file_per_rho_and_is_seed_deterministic() {
    let d = tempfile::tempdir().unwrap();
    let c = write_config(d.path(), "t.json", &toy_config(json!({})));
    assert_eq!(swg("train", &c, &d.path().join("m"), &[]), 0);
    let ck = d.path().join("m/checkpoint.json");
    let ck = ck.to_str().unwrap();
    let rhos = [1.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0];
    let s = write_config(
        d.path(),
        "s.json",
        &toy_config(json!({"sample": {"n": 20, "rhos": rhos, "clamp_eps": 1e-6}})),
    );
    assert!([0, 4].contains(&swg("sample", &s, &d.path().join("s"), &["--checkpoint", ck])));
    for r in rhos {
        let f = d.path().join(format!("s/samples_rho{r}.csv"));
        assert_eq!(rows(&f)[0], "chain_id,a_1,a_2,w_hat,clamp_hits");
    }

    let one = write_config(d.path(), "z.json", &toy_config(json!({"sample": {"n": 50, "rho": 0.0}})));
    assert_eq!(swg("sample", &one, &d.path().join("z1"), &["--checkpoint", ck]), 0);
    assert_eq!(swg("sample", &one, &d.path().join("z2"), &["--checkpoint", ck]), 0);
    assert_eq!(swg("sample", &one, &d.path().join("z3"), &["--checkpoint", ck, "--seed", "6"]), 0);
    let z1 = std::fs::read(d.path().join("z1/samples.csv")).unwrap();
    assert_eq!(z1, std::fs::read(d.path().join("z2/samples.csv")).unwrap());
    assert_ne!(z1, std::fs::read(d.path().join("z3/samples.csv")).unwrap());
}

#[test]
fn eval_scores_a_sample_file() {
    let d = tempfile::tempdir().unwrap();
    let c = write_config(
        d.path(),
        "t.json",
        &toy_config(json!({"sample": {"n": 60, "reference": {"pool": 2000}}})),
    );
    assert_eq!(swg("train", &c, &d.path().join("m"), &[]), 0);
    let ck = d.path().join("m/checkpoint.json");
    assert_eq!(swg("sample", &c, &d.path().join("s"), &["--checkpoint", ck.to_str().unwrap()]), 0);
    let m: Value = serde_json::from_str(&std::fs::read_to_string(d.path().join("s/metrics.json")).unwrap()).unwrap();
    assert!(m["energy_distance"].as_f64().unwrap() >= 0.0);

    let samples = d.path().join("s/samples.csv");
    let e = write_config(
        d.path(),
        "e.json",
        &toy_config(json!({"eval": {"samples": samples, "pool": 2000, "permutations": 10}})),
    );
    assert_eq!(swg("eval", &e, &d.path().join("e"), &[]), 0);
    let r: Value = serde_json::from_str(&std::fs::read_to_string(d.path().join("e/metrics.json")).unwrap()).unwrap();
    assert_eq!(r["n_samples"], 60);
    assert!(r["permutation"]["p_value"].as_f64().unwrap() > 0.0);
}

#[test]
fn critic_policy_and_resampling_pipeline() {
    let d = tempfile::tempdir().unwrap();
    let cr = d.path().join("cr/checkpoint.json");
    let cfg = json!({
        "data": {"source": "bandit", "n": 500, "noise": 0.3},
        "critic": {"steps": 20, "width": 16, "batch": 32},
        "model": {"arch": {"kind": "mlp", "depth": 2, "width": 16, "activation": "gelu"}, "steps": 8},
        "train": {"target": "critic"},
        "eval": {"states": 5, "draws": 500, "held_out": 50},
        "sample": {"n": 3, "state": [0.1, 0.2],
                   "resample": {"m": 4, "critic_checkpoint": cr, "weight": {"kind": "smooth_expectile", "tau": 0.7}}}
    });
    let c = write_config(d.path(), "c.json", &cfg);
    assert_eq!(swg("train", &c, &d.path().join("cr"), &[]), 0);
    assert_eq!(swg("eval", &c, &d.path().join("ev"), &["--checkpoint", cr.to_str().unwrap()]), 0);
    let ev: Value = serde_json::from_str(&std::fs::read_to_string(d.path().join("ev/critic_eval.json")).unwrap()).unwrap();
    assert!(ev["value_mae"].as_f64().unwrap().is_finite());

    let mut p = cfg.clone();
    p["train"] = json!({"target": "policy", "steps": 10, "batch": 16, "critic_checkpoint": cr,
                        "weight": {"kind": "linex", "alpha": 1.0}});
    let pc = write_config(d.path(), "p.json", &p);
    assert_eq!(swg("train", &pc, &d.path().join("pol"), &[]), 0);
    let pol = d.path().join("pol/checkpoint.json");
    assert_eq!(swg("sample", &pc, &d.path().join("ps"), &["--checkpoint", pol.to_str().unwrap()]), 0);
    let out = rows(&d.path().join("ps/samples.csv"));
    assert_eq!(out[0], "chain_id,a_1,a_2,critic_weight,candidate");
    assert_eq!(out.len(), 4);

    // a denoiser target on transitions is a configuration error
    let mut bad = cfg.clone();
    bad["train"] = json!({"target": "denoiser"});
    let b = write_config(d.path(), "b.json", &bad);
    assert_eq!(swg("train", &b, &d.path().join("b"), &[]), 2);
}

#[test]
fn bench_emits_timings_and_parameter_counts() {
    let d = tempfile::tempdir().unwrap();
    let c = write_config(
        d.path(),
        "b.json",
        &json!({"bench": {"depths": [1, 2, 3], "widths": [8], "repetitions": 4, "batch": 2, "steps": 2}}),
    );
    assert_eq!(swg("bench", &c, &d.path().join("o"), &[]), 0);
    let b = rows(&d.path().join("o/bench.csv"));
    assert_eq!(b[0], "depth,width,params,mode,mean_s,std_s,samples");
    assert_eq!(b.len(), 7);
    let fits: Value = serde_json::from_str(&std::fs::read_to_string(d.path().join("o/depth_fits.json")).unwrap()).unwrap();
    assert_eq!(fits.as_array().unwrap().len(), 2);
}

#[test]
fn exit_codes() {
    let d = tempfile::tempdir().unwrap();
    let unknown = write_config(d.path(), "u.json", &json!({"sample": {"n": 5, "rhoo": 1}}));
    assert_eq!(swg("sample", &unknown, &d.path().join("u"), &[]), 2);
    let missing = write_config(d.path(), "m.json", &json!({"seed": 1}));
    assert_eq!(swg("train", &missing, &d.path().join("m"), &[]), 2);

    let mut nan = toy_config(json!({}));
    nan["train"]["lr"] = json!(1e300);
    let n = write_config(d.path(), "n.json", &nan);
    assert_eq!(swg("train", &n, &d.path().join("n"), &[]), 3);

    // a network whose outputs overflow makes every chain diverge
    let cfg = DenoiserConfig {
        arch: Architecture::Mlp {
            depth: 1,
            width: 4,
            activation: Activation::Gelu,
        },
        data_dim: 2,
        conditioning: ConditioningMode::None,
        schedule: ScheduleKind::Cosine,
        steps: 5,
    };
    let mut m = Denoiser::new(cfg, Normalizer::identity(2), FinalInit::He, &mut SeededRng::new(0, 0)).unwrap();
    for v in m.net.params.values.iter_mut() {
        *v = std::sync::Arc::new(v.scale(1e200));
    }
    let ck = d.path().join("bad.json");
    DenoiserCheckpoint::new(&m, None).save(&ck).unwrap();
    let s = write_config(d.path(), "s.json", &json!({"sample": {"n": 10, "rho": 1.0}}));
    assert_eq!(swg("sample", &s, &d.path().join("s"), &["--checkpoint", ck.to_str().unwrap()]), 4);
    assert!(d.path().join("s/run.json").exists());
}
