//! Datasets: generated from the data section, or read back from a
//! `generate-data` directory.

use std::path::Path;

use serde::{Deserialize, Serialize};
use swg_core::denoiser::{augment_dataset, Cond, Normalizer};
use swg_core::experiment::beta_dataset;
use swg_core::toy::{
    make_bandit_dataset, read_actions, read_transitions, sample_toy, write_actions, write_transitions, ActionTable,
    BanditConfig, Energy, ToyDistribution, ToyKind, Transition,
};
use swg_core::{SeededRng, Tensor};

use crate::config::DataSection;
use crate::fail::{input, output, CliError, CliResult};
use crate::run::RunDir;

pub const ACTIONS_FILE: &str = "dataset.csv";
pub const TRANSITIONS_FILE: &str = "transitions.csv";
pub const META_FILE: &str = "metadata.json";

/// How a dataset was made; stored next to it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataMeta {
    pub seed: u64,
    pub rows: usize,
    pub source: DataSection,
    /// Action datasets only: maps `[a, w]` into model space.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalizer: Option<Normalizer>,
}

pub enum Dataset {
    Actions { table: ActionTable, normalizer: Normalizer },
    Transitions(Vec<Transition>),
}

/// Toy generator settings, when the data came from one.
pub struct ToySource {
    pub dist: ToyDistribution,
    pub energy: Energy,
    pub beta: Option<f64>,
}

pub fn toy_source(section: &DataSection) -> Option<ToySource> {
    match section {
        DataSection::Toy {
            distribution,
            noise,
            energy,
            beta,
            ..
        } => Some(ToySource {
            dist: toy_dist(*distribution, *noise),
            energy: energy.clone(),
            beta: *beta,
        }),
        _ => None,
    }
}

fn toy_dist(kind: ToyKind, noise: Option<f64>) -> ToyDistribution {
    let mut d = ToyDistribution::new(kind);
    if let Some(s) = noise {
        d.noise = s;
    }
    d
}

/// Follows a `dir` section to the section that generated it.
pub fn origin(section: &DataSection) -> CliResult<DataSection> {
    match section {
        DataSection::Dir { path } => Ok(read_meta(path)?.source),
        s => Ok(s.clone()),
    }
}

fn read_meta(dir: &Path) -> CliResult<DataMeta> {
    let p = dir.join(META_FILE);
    let text = std::fs::read_to_string(&p).map_err(|e| CliError::config(format!("cannot read {}: {e}", p.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::config(format!("{}: {e}", p.display())))
}

pub fn generate(section: &DataSection, seed: u64) -> CliResult<Dataset> {
    let mut rng = SeededRng::new(seed, 11);
    match section {
        DataSection::Toy {
            distribution,
            noise,
            n,
            energy,
            beta,
            beta_max,
        } => {
            let actions = sample_toy(&toy_dist(*distribution, *noise), *n, &mut rng).map_err(CliError::config)?;
            if let Some(bmax) = beta_max {
                let ds = beta_dataset(actions, energy, *bmax, &mut rng).map_err(CliError::config)?;
                Ok(Dataset::Actions {
                    table: ActionTable {
                        actions: ds.actions,
                        weights: Some(ds.weights),
                        betas: Some(ds.betas),
                    },
                    normalizer: ds.normalizer,
                })
            } else {
                let b = beta.unwrap_or(0.0);
                let samples = augment_dataset(&actions, |a| (-b * energy.eval(a)).exp(), 1.0).map_err(CliError::config)?;
                let normalizer = Normalizer::fit(&samples).map_err(CliError::config)?;
                Ok(Dataset::Actions {
                    table: ActionTable {
                        weights: Some(samples.iter().map(|s| s.w).collect()),
                        actions,
                        betas: None,
                    },
                    normalizer,
                })
            }
        }
        DataSection::Bandit { n, noise } => Ok(Dataset::Transitions(
            make_bandit_dataset(&BanditConfig {
                n: *n,
                noise: *noise,
                seed,
            })
            .map_err(CliError::config)?,
        )),
        DataSection::Dir { path } => load_dir(path),
    }
}

/// Resolves the data section and records every file read.
pub fn obtain(section: &DataSection, seed: u64, run: &mut RunDir) -> CliResult<Dataset> {
    if let DataSection::Dir { path } = section {
        run.record_file("metadata", &path.join(META_FILE))?;
        for f in [ACTIONS_FILE, TRANSITIONS_FILE] {
            let p = path.join(f);
            if p.exists() {
                run.record_file(f, &p)?;
            }
        }
    }
    generate(section, seed)
}

fn load_dir(dir: &Path) -> CliResult<Dataset> {
    let meta = read_meta(dir)?;
    match meta.normalizer {
        Some(normalizer) => {
            let table = read_actions(&dir.join(ACTIONS_FILE)).map_err(input)?;
            if table.weights.is_none() {
                return Err(CliError::config(format!("{} has no weight column", dir.join(ACTIONS_FILE).display())));
            }
            Ok(Dataset::Actions { table, normalizer })
        }
        None => Ok(Dataset::Transitions(read_transitions(&dir.join(TRANSITIONS_FILE)).map_err(input)?)),
    }
}

pub fn write(ds: &Dataset, section: &DataSection, seed: u64, run: &RunDir) -> CliResult<()> {
    let (rows, normalizer) = match ds {
        Dataset::Actions { table, normalizer } => {
            write_actions(&run.file(ACTIONS_FILE), table).map_err(output)?;
            (table.actions.len(), Some(normalizer.clone()))
        }
        Dataset::Transitions(ts) => {
            write_transitions(&run.file(TRANSITIONS_FILE), ts).map_err(output)?;
            (ts.len(), None)
        }
    };
    run.write_json(
        META_FILE,
        &DataMeta {
            seed,
            rows,
            source: section.clone(),
            normalizer,
        },
    )
}

/// Model-space rows and the matching conditioning of an action table.
pub fn model_rows(table: &ActionTable, normalizer: &Normalizer) -> CliResult<(Tensor, Cond)> {
    let ws = table.weights.as_ref().ok_or_else(|| CliError::config("dataset has no weight column"))?;
    let rows: Vec<Vec<f64>> = table
        .actions
        .iter()
        .enumerate()
        .map(|(i, a)| normalizer.normalize(a, ws[i], table.betas.as_ref().map(|b| b[i])))
        .collect();
    let cond = match &table.betas {
        Some(b) => Cond::Beta(b.clone()),
        None => Cond::None,
    };
    Ok((Tensor::from_rows(&rows).map_err(CliError::config)?, cond))
}
