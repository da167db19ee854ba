//! Ablation grids: each row is a set of overrides on a base config, trained
//! once per seed and evaluated on a held-out set.

use serde::{Deserialize, Serialize};

use super::{evaluate, train, EvalConfig, MetricsReport, TrainConfig, TrainState};
use crate::compose::{LossBreakdown, MixStrategy};
use crate::error::Result;
use crate::scenegen::Dataset;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct AblationRow {
    pub name: String,
    pub prior: Option<bool>,
    pub reg: Option<bool>,
    pub shared_init: Option<bool>,
    pub tweedie: Option<bool>,
}

impl AblationRow {
    /// `base` with this row's overrides; mixing follows the shared-init flag.
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        if let Some(v) = self.prior {
            cfg.prior = v;
        }
        if let Some(v) = self.reg {
            cfg.reg = v;
        }
        if let Some(v) = self.tweedie {
            cfg.tweedie = v;
        }
        if let Some(v) = self.shared_init {
            cfg.shared_init = v;
            cfg.mix = if v { MixStrategy::SharedInit } else { MixStrategy::Random };
        }
        cfg
    }
}

/// Baseline, then the prior, shared initialization and the regularizer
/// added one at a time.
pub fn default_ablation_rows() -> Vec<AblationRow> {
    let row = |name: &str, prior, shared_init, reg| AblationRow {
        name: name.into(),
        prior: Some(prior),
        reg: Some(reg),
        shared_init: Some(shared_init),
        tweedie: None,
    };
    vec![
        row("baseline", false, false, false),
        row("+prior", true, false, false),
        row("+prior +shared_init", true, true, false),
        row("+prior +shared_init +reg", true, true, true),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub row: String,
    pub seed: u64,
    pub config: TrainConfig,
    pub final_losses: Option<LossBreakdown>,
    pub report: MetricsReport,
}

/// Train every row under every seed and evaluate on `val`.
pub fn run_ablation(
    rows: &[AblationRow],
    base: &TrainConfig,
    seeds: &[u64],
    train_data: &Dataset,
    val: &Dataset,
    eval: &EvalConfig,
    mut on_step: impl FnMut(&str, u64, &TrainState, &LossBreakdown) -> Result<()>,
) -> Result<Vec<AblationResult>> {
    let mut out = Vec::with_capacity(rows.len() * seeds.len());
    for row in rows {
        for &seed in seeds {
            let config = TrainConfig { seed, ..row.apply(base) };
            let mut state = TrainState::new(&config)?;
            let mut last = None;
            train(&mut state, train_data, config.steps, |s, l| {
                last = Some(*l);
                on_step(&row.name, seed, s, l)
            })?;
            let report = evaluate(&state.model, &config, val, eval)?;
            out.push(AblationResult { row: row.name.clone(), seed, config, final_losses: last, report });
        }
    }
    Ok(out)
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (mean, var.sqrt())
}

/// Markdown table of per-row means (± sample std over seeds), in percent.
pub fn format_table(results: &[AblationResult]) -> String {
    let mut names: Vec<&str> = Vec::new();
    for r in results {
        if !names.contains(&r.row.as_str()) {
            names.push(&r.row);
        }
    }
    let mut s = String::from("| row | prior | shared S0 | reg | seeds | FG-ARI | mIoU | mBO |\n|---|---|---|---|---|---|---|---|\n");
    for name in names {
        let rs: Vec<&AblationResult> = results.iter().filter(|r| r.row == name).collect();
        let c = &rs[0].config;
        let mark = |b: bool| if b { "✓" } else { "" };
        let col = |f: fn(&MetricsReport) -> f64| {
            let (m, sd) = mean_std(&rs.iter().map(|r| 100.0 * f(&r.report)).collect::<Vec<_>>());
            format!("{m:.2} ± {sd:.2}")
        };
        s.push_str(&format!(
            "| {name} | {} | {} | {} | {} | {} | {} | {} |\n",
            mark(c.prior),
            mark(c.shared_init),
            mark(c.reg),
            rs.len(),
            col(|r| r.fg_ari),
            col(|r| r.miou),
            col(|r| r.mbo),
        ));
    }
    s
}
