use std::fmt::Write as _;
use std::str::FromStr;

use super::{evaluate, train, TrainConfig};
use crate::config::{FusionOption, IntegrationMode};
use crate::error::{Error, Result};

/// Ablation tables. Each one varies a single architectural axis of a base
/// configuration and keeps every seed fixed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    /// Fusion search and temporal modules switched on and off.
    Modules,
    /// Fusion operator subsets, with and without learned weights.
    FusionOptions,
    /// Ways of combining the long-term and short-term modules.
    Integration,
    /// Tuple cardinality sets.
    Cardinality,
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tab3" => Ok(Suite::Modules),
            "tab4" => Ok(Suite::FusionOptions),
            "tab5" => Ok(Suite::Integration),
            "tab6" => Ok(Suite::Cardinality),
            other => Err(Error::Config(format!("unknown ablation suite `{other}` (expected tab3, tab4, tab5 or tab6)"))),
        }
    }
}

impl Suite {
    /// Named configurations, one per table row.
    pub fn variants(self, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
        let with = |f: &dyn Fn(&mut TrainConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            Suite::Modules => vec![
                ("none".into(), with(&|c| (c.model.ffas.enabled, c.model.temporal) = (false, IntegrationMode::None))),
                ("ffas".into(), with(&|c| (c.model.ffas.enabled, c.model.temporal) = (true, IntegrationMode::None))),
                ("ltmm+stmm".into(), with(&|c| (c.model.ffas.enabled, c.model.temporal) = (false, IntegrationMode::ParallelWeighted))),
                ("all".into(), with(&|c| (c.model.ffas.enabled, c.model.temporal) = (true, IntegrationMode::ParallelWeighted))),
            ],
            Suite::FusionOptions => {
                let opts = |options: Vec<FusionOption>, search: bool| {
                    with(&|c| {
                        c.model.ffas.enabled = true;
                        c.model.ffas.options = options.clone();
                        c.model.ffas.search = search;
                    })
                };
                vec![
                    ("no_fusion".into(), with(&|c| c.model.ffas.enabled = false)),
                    ("sum".into(), opts(vec![FusionOption::Sum], false)),
                    ("gp_low".into(), opts(vec![FusionOption::GpLow], false)),
                    ("gp_high".into(), opts(vec![FusionOption::GpHigh], false)),
                    ("all_equal".into(), opts(FusionOption::ALL.to_vec(), false)),
                    ("all_search".into(), opts(FusionOption::ALL.to_vec(), true)),
                ]
            }
            Suite::Integration => {
                IntegrationMode::ALL.iter().map(|&m| (m.name().to_string(), with(&|c| c.model.temporal = m))).collect()
            }
            Suite::Cardinality => [vec![1], vec![2], vec![3], vec![1, 2], vec![1, 3], vec![2, 3], vec![1, 2, 3]]
                .into_iter()
                .map(|omega| {
                    let name = format!("{{{}}}", omega.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(";"));
                    (name, with(&|c| c.model.omega = omega.clone()))
                })
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub accuracy: f64,
    pub stderr: f64,
}

impl AblationRow {
    pub fn csv(rows: &[AblationRow]) -> String {
        let mut out = String::from("variant,accuracy,stderr\n");
        for r in rows {
            writeln!(out, "{},{},{}", r.variant, r.accuracy, r.stderr).expect("write to String");
        }
        out
    }
}

/// Trains and evaluates every variant of `suite`. `progress` is told about
/// each finished row.
pub fn ablate(base: &TrainConfig, suite: Suite, mut progress: impl FnMut(&AblationRow)) -> Result<Vec<AblationRow>> {
    let variants = suite.variants(base);
    for (_, cfg) in &variants {
        cfg.validate()?;
    }
    let mut rows = Vec::with_capacity(variants.len());
    for (variant, cfg) in variants {
        let (model, _) = train(&cfg)?;
        let r = evaluate(&model, &cfg, &cfg.source(), cfg.eval_tasks, cfg.eval_seed)?;
        let row = AblationRow { variant, accuracy: r.mean, stderr: r.stderr };
        progress(&row);
        rows.push(row);
    }
    Ok(rows)
}
