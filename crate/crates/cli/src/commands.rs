use std::path::Path;

use serde::Serialize;
use swg_core::bench::{depth_fit, run_bench, write_bench_csv, BenchMode, LinearFit};
use swg_core::checkpoint::{peek_kind, CheckpointKind, CriticCheckpoint, DenoiserCheckpoint};
use swg_core::critic::{continue_critic, sample_expectile, train_critic, weight_eval, CriticState};
use swg_core::denoiser::{
    augment_dataset, train, Cond, ConditioningMode, Denoiser, DenoiserConfig, LossRecord, Normalizer, TrainConfig,
};
use swg_core::guidance::{sample, sample_swg_r, SamplerOutput};
use swg_core::metrics::{permutation_test, HistGrid, MetricsReport};
use swg_core::nn::FinalInit;
use swg_core::oracle::importance_resample_target;
use swg_core::toy::{bandit_reward, eight_gaussian_means, make_bandit_dataset, read_actions, sample_toy, BanditConfig, ToyKind};
use swg_core::{SeededRng, Tensor};

use crate::config::{DataSection, ExperimentConfig, ReferenceSection, SampleSection, TrainSection, TrainTarget};
use crate::data::{self, Dataset};
use crate::fail::{input, output, CliError, CliResult};
use crate::run::RunDir;

/// Largest tolerated fraction of diverged chains.
const MAX_DIVERGED: f64 = 0.01;

pub fn generate_data(cfg: &ExperimentConfig, run: &mut RunDir) -> CliResult<()> {
    let section = ExperimentConfig::need(&cfg.data, "data")?;
    if matches!(section, DataSection::Dir { .. }) {
        return Err(CliError::config("generate-data needs a toy or bandit data section"));
    }
    let ds = data::generate(section, cfg.seed)?;
    data::write(&ds, section, cfg.seed, run)
}

pub fn train_cmd(cfg: &ExperimentConfig, checkpoint: Option<&Path>, run: &mut RunDir) -> CliResult<()> {
    let section = ExperimentConfig::need(&cfg.train, "train")?;
    let data_section = ExperimentConfig::need(&cfg.data, "data")?;
    if let Some(p) = checkpoint {
        run.record_file("resume_checkpoint", p)?;
    }
    let ds = data::obtain(data_section, cfg.seed, run)?;
    match (section.target, ds) {
        (TrainTarget::Denoiser, Dataset::Actions { table, normalizer }) => {
            let (rows, cond) = data::model_rows(&table, &normalizer)?;
            train_denoiser(cfg, section, rows, cond, normalizer, ConditioningMode::None, checkpoint, run)
        }
        (TrainTarget::Critic, Dataset::Transitions(ts)) => {
            let ccfg = ExperimentConfig::need(&cfg.critic, "critic")?;
            let (state, trace) = match checkpoint {
                Some(p) => {
                    let mut st = CriticCheckpoint::load(p).and_then(|c| c.into_state()).map_err(input)?;
                    let trace = continue_critic(&mut st, &ts, ccfg).map_err(CliError::train)?;
                    (st, trace)
                }
                None => train_critic(&ts, ccfg).map_err(CliError::train)?,
            };
            CriticCheckpoint::new(ccfg, &state).save(&run.file("checkpoint.json")).map_err(output)?;
            write_csv(&run.file("loss_trace.csv"), &trace)
        }
        (TrainTarget::Policy, Dataset::Transitions(ts)) => {
            let ck = section
                .critic_checkpoint
                .as_ref()
                .ok_or_else(|| CliError::config("policy training needs train.critic_checkpoint"))?;
            let spec = section.weight.ok_or_else(|| CliError::config("policy training needs train.weight"))?;
            run.record_file("critic_checkpoint", ck)?;
            let critic = CriticCheckpoint::load(ck).and_then(|c| c.into_state()).map_err(input)?;
            let s = Tensor::from_rows(&ts.iter().map(|t| t.s.clone()).collect::<Vec<_>>()).map_err(input)?;
            let a: Vec<Vec<f64>> = ts.iter().map(|t| t.a.clone()).collect();
            let q = critic.q_min(&s, &Tensor::from_rows(&a).map_err(input)?).map_err(input)?;
            let v = critic.value(&s).map_err(input)?;
            let i = std::cell::Cell::new(0);
            let samples = augment_dataset(
                &a,
                |_| {
                    let j = i.replace(i.get() + 1);
                    weight_eval(&spec, q[j], v[j])
                },
                1.0,
            )
            .map_err(CliError::config)?;
            let normalizer = Normalizer::fit(&samples).map_err(CliError::config)?;
            let rows: Vec<Vec<f64>> = samples.iter().map(|z| normalizer.normalize(&z.a, z.w, None)).collect();
            let rows = Tensor::from_rows(&rows).map_err(input)?;
            let mode = ConditioningMode::State { dim: s.cols() };
            train_denoiser(cfg, section, rows, Cond::State(s), normalizer, mode, checkpoint, run)
        }
        (t, _) => Err(CliError::config(format!(
            "train target {t:?} does not match the dataset (denoiser needs actions; critic and policy need transitions)"
        ))),
    }
}

#[allow(clippy::too_many_arguments)]
fn train_denoiser(
    cfg: &ExperimentConfig,
    section: &TrainSection,
    rows: Tensor,
    cond: Cond,
    normalizer: Normalizer,
    mode: ConditioningMode,
    checkpoint: Option<&Path>,
    run: &RunDir,
) -> CliResult<()> {
    let tc = TrainConfig {
        steps: section.steps,
        batch: section.batch,
        lr: section.lr,
        seed: cfg.seed,
        log_every: section.log_every,
        lr_schedule: section.lr_schedule,
    };
    tc.validate().map_err(CliError::config)?;
    let (mut model, resume) = match checkpoint {
        Some(p) => DenoiserCheckpoint::load(p).and_then(|c| c.into_model()).map_err(input)?,
        None => {
            let m = ExperimentConfig::need(&cfg.model, "model")?;
            let conditioning = match (&cond, mode) {
                (Cond::Beta(_), _) => ConditioningMode::Beta,
                (_, mode) => mode,
            };
            let dc = DenoiserConfig {
                arch: m.arch.clone(),
                data_dim: rows.cols() - 1,
                conditioning,
                schedule: m.schedule,
                steps: m.steps,
            };
            let mut rng = SeededRng::new(cfg.seed, 12);
            (Denoiser::new(dc, normalizer, FinalInit::Zero, &mut rng).map_err(CliError::config)?, None)
        }
    };
    let out = train(&mut model, &rows, &cond, &tc, resume).map_err(|e| match e {
        e @ (swg_core::Error::Shape { .. } | swg_core::Error::Conditioning(_) | swg_core::Error::Checkpoint(_)) => CliError::config(e),
        e => CliError::train(e),
    })?;
    DenoiserCheckpoint::new(&model, Some(out.state))
        .save(&run.file("checkpoint.json"))
        .map_err(output)?;
    write_csv::<LossRecord>(&run.file("loss_trace.csv"), &out.trace)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut w = csv::Writer::from_path(path).map_err(output)?;
    for r in rows {
        w.serialize(r).map_err(output)?;
    }
    w.flush().map_err(output)
}

fn load_denoiser(checkpoint: Option<&Path>, run: &mut RunDir) -> CliResult<Denoiser> {
    let p = checkpoint.ok_or_else(|| CliError::config("this command needs --checkpoint"))?;
    run.record_file("checkpoint", p)?;
    Ok(DenoiserCheckpoint::load(p).and_then(|c| c.into_model()).map_err(input)?.0)
}

fn load_critic(path: &Path, run: &mut RunDir) -> CliResult<(CriticState, f64)> {
    run.record_file("critic_checkpoint", path)?;
    let ck = CriticCheckpoint::load(path).map_err(input)?;
    let tau = ck.config.tau;
    Ok((ck.into_state().map_err(input)?, tau))
}

fn conditioning(model: &Denoiser, s: &SampleSection) -> CliResult<Cond> {
    match model.config.conditioning {
        ConditioningMode::None => Ok(Cond::None),
        ConditioningMode::Beta => s
            .beta
            .map(Cond::beta)
            .ok_or_else(|| CliError::config("the model is β-conditioned; set sample.beta")),
        ConditioningMode::State { dim } => match &s.state {
            Some(v) if v.len() == dim => Ok(Cond::State(Tensor::row(v))),
            _ => Err(CliError::config(format!("the model is state-conditioned; set sample.state with {dim} values"))),
        },
    }
}

#[derive(Serialize)]
struct SampleRecord {
    rho: f64,
    file: String,
    n: usize,
    diverged: usize,
    clamp_rate: f64,
    wall_time_s: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    metrics: Option<String>,
}

pub fn sample_cmd(cfg: &ExperimentConfig, checkpoint: Option<&Path>, run: &mut RunDir) -> CliResult<()> {
    let s = ExperimentConfig::need(&cfg.sample, "sample")?;
    let model = load_denoiser(checkpoint, run)?;
    let cond = conditioning(&model, s)?;
    let rhos = s.rho_values();
    let sweep = s.rhos.is_some();
    let mut records = Vec::new();
    let mut worst = 0.0f64;
    for &rho in &rhos {
        let g = s.guidance(rho);
        let tag = if sweep { format!("_rho{rho}") } else { String::new() };
        let file = format!("samples{tag}.csv");
        let rng = SeededRng::new(cfg.seed, 31);
        let (out, actions) = match &s.resample {
            Some(r) => {
                let (critic, _) = load_critic(&r.critic_checkpoint, run)?;
                let state = s
                    .state
                    .clone()
                    .ok_or_else(|| CliError::config("resampling scores actions with the critic; set sample.state"))?;
                let st = Tensor::row(&state);
                let wf = |a: &[f64]| -> f64 {
                    match (critic.q_min(&st, &Tensor::row(a)), critic.value(&st)) {
                        (Ok(q), Ok(v)) => weight_eval(&r.weight, q[0], v[0]),
                        _ => f64::NAN,
                    }
                };
                let mut rows = Vec::with_capacity(s.n);
                let mut text = String::from("chain_id");
                let d = model.config.data_dim;
                for j in 1..=d {
                    text.push_str(&format!(",a_{j}"));
                }
                text.push_str(",critic_weight,candidate\n");
                let mut diverged = 0;
                let mut hits = 0u64;
                let mut wall = 0.0;
                for i in 0..s.n {
                    let res = sample_swg_r(&model, &wf, r.m, &cond, &g, r.selection, &rng.derive(i as u64), Some(&model.normalizer))
                        .map_err(CliError::sample)?;
                    diverged += res.candidates.diverged.len();
                    hits += res.candidates.clamp_hits.iter().map(|&h| h as u64).sum::<u64>();
                    wall += res.candidates.wall_time_s;
                    let vals: Vec<String> = res.action.iter().map(|v| v.to_string()).collect();
                    text.push_str(&format!("{i},{},{},{}\n", vals.join(","), res.weights[res.index], res.index));
                    rows.push(res.action);
                }
                std::fs::write(run.file(&file), text).map_err(output)?;
                let total = (s.n * r.m) as f64;
                let summary = (diverged as f64 / total, hits as f64 / (total * model.config.steps as f64), wall);
                ((summary, diverged), rows)
            }
            None => {
                let out = sample(&model, s.n, &cond, &g, &rng, Some(&model.normalizer)).map_err(CliError::sample)?;
                out.write_csv(&run.file(&file)).map_err(output)?;
                let summary = (out.diverged.len() as f64 / s.n as f64, out.clamp_rate(), out.wall_time_s);
                let acts = strip_weight(&out);
                ((summary, out.diverged.len()), acts)
            }
        };
        let ((frac, clamp_rate, wall), diverged) = out;
        worst = worst.max(frac);
        let metrics = match &s.reference {
            Some(r) => {
                let name = format!("metrics{tag}.json");
                let beta = s.beta;
                let mut report = reference_report(cfg, &actions, beta, r, s.n)?;
                report.clamp_rate = Some(clamp_rate);
                report.write_json(&run.file(&name)).map_err(output)?;
                Some(name)
            }
            None => None,
        };
        records.push(SampleRecord {
            rho,
            file,
            n: s.n,
            diverged,
            clamp_rate,
            wall_time_s: wall,
            metrics,
        });
    }
    run.write_json("sample_summary.json", &records)?;
    if worst > MAX_DIVERGED {
        return Err(CliError::sample(format!(
            "{:.2}% of chains diverged (limit {:.0}%)",
            100.0 * worst,
            100.0 * MAX_DIVERGED
        )));
    }
    Ok(())
}

fn strip_weight(out: &SamplerOutput) -> Vec<Vec<f64>> {
    out.finite_rows()
        .into_iter()
        .map(|mut r| {
            r.pop();
            r
        })
        .collect()
}

/// Metrics of `actions` against the weighted toy target of the data section.
fn reference_report(
    cfg: &ExperimentConfig,
    actions: &[Vec<f64>],
    beta: Option<f64>,
    r: &ReferenceSection,
    n_target: usize,
) -> CliResult<MetricsReport> {
    let section = data::origin(ExperimentConfig::need(&cfg.data, "data")?)?;
    let toy = data::toy_source(&section).ok_or_else(|| CliError::config("reference metrics need toy data"))?;
    let beta = beta
        .or(toy.beta)
        .ok_or_else(|| CliError::config("reference metrics need a β (sample.beta or data.beta)"))?;
    let finite: Vec<Vec<f64>> = actions.iter().filter(|a| a.iter().all(|v| v.is_finite())).cloned().collect();
    if finite.is_empty() {
        return Err(CliError::sample("no finite samples to score"));
    }
    let mut rng = SeededRng::new(cfg.seed, 41);
    let pool = sample_toy(&toy.dist, r.pool, &mut rng).map_err(CliError::config)?;
    let w: Vec<f64> = toy.energy.eval_many(&pool).iter().map(|x| (-beta * x).exp()).collect();
    let target = importance_resample_target(&pool, &w, n_target, &mut rng).map_err(CliError::config)?;
    let modes: Option<Vec<Vec<f64>>> =
        (toy.dist.kind == ToyKind::EightGaussians).then(|| eight_gaussian_means().iter().map(|m| m.to_vec()).collect());
    let mut report = MetricsReport::compare(&finite, &target, &HistGrid::default(), modes.as_deref()).map_err(CliError::other)?;
    if r.permutations > 0 {
        report.permutation = Some(permutation_test(&finite, &target, r.permutations, &mut rng.derive(1)).map_err(CliError::other)?);
    }
    Ok(report)
}

#[derive(Serialize)]
struct CriticReport {
    states: usize,
    draws: usize,
    tau: f64,
    /// Mean |V(s) − expectile_τ(r | s)| over random states.
    value_mae: f64,
    held_out: usize,
    /// Mean |min(Q1, Q2)(s, a) − r| over fresh transitions.
    q_mae: f64,
}

pub fn eval_cmd(cfg: &ExperimentConfig, checkpoint: Option<&Path>, run: &mut RunDir) -> CliResult<()> {
    let e = ExperimentConfig::need(&cfg.eval, "eval")?;
    let critic_ck = match checkpoint {
        Some(p) => peek_kind(p).map_err(input)? == CheckpointKind::Critic,
        None => false,
    };
    if critic_ck {
        let p = checkpoint.expect("checked above");
        let (st, tau) = load_critic(p, run)?;
        let noise = match data::origin(ExperimentConfig::need(&cfg.data, "data")?)? {
            DataSection::Bandit { noise, .. } => noise,
            _ => return Err(CliError::config("critic evaluation needs bandit data")),
        };
        let mut rng = SeededRng::new(cfg.seed, 51);
        let states: Vec<Vec<f64>> = (0..e.states)
            .map(|_| vec![rng.uniform_range(-1.0, 1.0), rng.uniform_range(-1.0, 1.0)])
            .collect();
        let v = st.value(&Tensor::from_rows(&states).map_err(input)?).map_err(input)?;
        let mut value_mae = 0.0;
        for (s, v) in states.iter().zip(&v) {
            let rs: Vec<f64> = (0..e.draws)
                .map(|_| {
                    let (a, b) = rng.normal_pair();
                    bandit_reward(s, &[s[0] + noise * a, s[1] + noise * b])
                })
                .collect();
            value_mae += (v - sample_expectile(&rs, tau).map_err(CliError::other)?).abs() / e.states as f64;
        }
        let held = make_bandit_dataset(&BanditConfig {
            n: e.held_out,
            noise,
            seed: cfg.seed.wrapping_add(1),
        })
        .map_err(CliError::config)?;
        let s = Tensor::from_rows(&held.iter().map(|t| t.s.clone()).collect::<Vec<_>>()).map_err(input)?;
        let a = Tensor::from_rows(&held.iter().map(|t| t.a.clone()).collect::<Vec<_>>()).map_err(input)?;
        let q = st.q_min(&s, &a).map_err(input)?;
        let q_mae = q.iter().zip(&held).map(|(q, t)| (q - t.r).abs()).sum::<f64>() / held.len() as f64;
        return run.write_json(
            "critic_eval.json",
            &CriticReport {
                states: e.states,
                draws: e.draws,
                tau,
                value_mae,
                held_out: e.held_out,
                q_mae,
            },
        );
    }
    let path = e
        .samples
        .as_ref()
        .ok_or_else(|| CliError::config("eval needs eval.samples, or --checkpoint naming a critic"))?;
    run.record_file("samples", path)?;
    let table = read_actions(path).map_err(input)?;
    let r = ReferenceSection {
        pool: e.pool,
        permutations: e.permutations,
    };
    let n = table.actions.len();
    let report = reference_report(cfg, &table.actions, e.beta, &r, n)?;
    report.write_json(&run.file("metrics.json")).map_err(output)
}

#[derive(Serialize)]
struct DepthFit {
    width: usize,
    mode: BenchMode,
    #[serde(flatten)]
    fit: LinearFit,
}

pub fn bench_cmd(cfg: &ExperimentConfig, run: &mut RunDir) -> CliResult<()> {
    let b = ExperimentConfig::need(&cfg.bench, "bench")?;
    let cells = run_bench(b, |c| {
        eprintln!(
            "depth {} width {} {:?}: {:.3e} ± {:.1e} s/sample",
            c.depth, c.width, c.mode, c.mean_s, c.std_s
        )
    })
    .map_err(CliError::other)?;
    write_bench_csv(&run.file("bench.csv"), &cells).map_err(output)?;
    let mut fits = Vec::new();
    if b.depths.len() >= 2 {
        for &width in &b.widths {
            for mode in [BenchMode::Unguided, BenchMode::Guided] {
                let fit = depth_fit(&cells, width, mode).map_err(CliError::other)?;
                fits.push(DepthFit { width, mode, fit });
            }
        }
    }
    run.write_json("depth_fits.json", &fits)
}
