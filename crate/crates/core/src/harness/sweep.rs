//! Learning-rate ratio, temperature and loss-weight sweeps. A failing cell is
//! recorded with `status = "failed"` and the sweep moves on.

use super::config::{AblationSetting, ConfigEcho, Mode, RunConfig};
use super::runner::{run, RunReport};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sweep: String,
    pub cell: String,
    pub lr_ratio: Option<f64>,
    pub tau_learner: Option<f64>,
    pub tau_guide: Option<f64>,
    pub lambda_sup: Option<f64>,
    pub lambda_gsl: Option<f64>,
    pub lambda_drl: Option<f64>,
    pub ago: Option<bool>,
    pub status: String,
    pub run_id: String,
    pub learner: Option<usize>,
    pub action_f1_a: Option<f64>,
    pub action_f1_b: Option<f64>,
    pub error: Option<String>,
}

impl SweepRow {
    fn blank(sweep: &str, cell: String) -> Self {
        Self {
            sweep: sweep.to_string(),
            cell,
            lr_ratio: None,
            tau_learner: None,
            tau_guide: None,
            lambda_sup: None,
            lambda_gsl: None,
            lambda_drl: None,
            ago: None,
            status: String::new(),
            run_id: String::new(),
            learner: None,
            action_f1_a: None,
            action_f1_b: None,
            error: None,
        }
    }

    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub reports: Vec<Option<RunReport>>,
    pub csv: Option<PathBuf>,
}

impl SweepOutcome {
    pub fn failures(&self) -> usize {
        self.rows.iter().filter(|r| !r.ok()).count()
    }
}

fn fill(row: &mut SweepRow, echo: &ConfigEcho, result: Result<RunReport>) -> Option<RunReport> {
    row.run_id = echo.run_id();
    match result {
        Ok(rep) => {
            row.learner = rep.roles.map(|r| r.learner);
            if let Ok([a, b]) = rep.final_scores() {
                row.action_f1_a = Some(a);
                row.action_f1_b = Some(b);
            }
            match &rep.aborted {
                Some(msg) => {
                    row.status = "failed".into();
                    row.error = Some(msg.clone());
                }
                None => row.status = "ok".into(),
            }
            Some(rep)
        }
        Err(e) => {
            row.status = "failed".into();
            row.error = Some(e.to_string());
            None
        }
    }
}

fn write_csv(dir: Option<&Path>, name: &str, rows: &[SweepRow]) -> Result<Option<PathBuf>> {
    let Some(dir) = dir else { return Ok(None) };
    std::fs::create_dir_all(dir)?;
    let path = dir.join(name);
    let to_io = |e: csv::Error| Error::Io(std::io::Error::new(std::io::ErrorKind::Other, e.to_string()));
    let mut w = csv::Writer::from_path(&path).map_err(to_io)?;
    for r in rows {
        w.serialize(r).map_err(to_io)?;
    }
    w.flush()?;
    Ok(Some(path))
}

fn sweep(
    name: &str,
    base: &RunConfig,
    echo: &ConfigEcho,
    cells: Vec<(SweepRow, RunConfig, ConfigEcho)>,
) -> Result<SweepOutcome> {
    let mut rows = Vec::with_capacity(cells.len());
    let mut reports = Vec::with_capacity(cells.len());
    for (mut row, cfg, cell_echo) in cells {
        let result = cfg.validate().and_then(|_| run(&cfg, &cell_echo));
        reports.push(fill(&mut row, &cell_echo, result));
        rows.push(row);
    }
    let csv = write_csv(base.out_dir.as_deref(), &format!("sweep-{name}-{}.csv", echo.run_id()), &rows)?;
    Ok(SweepOutcome { rows, reports, csv })
}

/// One competitive run per learner/guide learning-rate ratio.
pub fn sweep_lr_ratio(base: &RunConfig, echo: &ConfigEcho, ratios: &[f64]) -> Result<SweepOutcome> {
    let cells = ratios
        .iter()
        .map(|&r| {
            let mut cfg = base.clone();
            cfg.mode = Mode::Gcl;
            cfg.ago = true;
            cfg.roles.lr_ratio = r;
            let mut row = SweepRow::blank("lr", format!("ratio={r}"));
            row.lr_ratio = Some(r);
            (row, cfg, echo.with_override(format!("roles.lr_ratio={r}")))
        })
        .collect();
    sweep("lr", base, echo, cells)
}

/// One competitive run per `[τ_learner, τ_guide]` pair.
pub fn sweep_temperature(base: &RunConfig, echo: &ConfigEcho, grid: &[[f64; 2]]) -> Result<SweepOutcome> {
    let cells = grid
        .iter()
        .map(|&[tl, tg]| {
            let mut cfg = base.clone();
            cfg.mode = Mode::Gcl;
            cfg.ago = true;
            cfg.taus = Some([tl, tg]);
            let mut row = SweepRow::blank("temperature", format!("tau={tl}/{tg}"));
            row.tau_learner = Some(tl);
            row.tau_guide = Some(tg);
            (row, cfg, echo.with_override(format!("taus=[{tl}, {tg}]")))
        })
        .collect();
    sweep("temperature", base, echo, cells)
}

/// One competitive run per loss-weight setting.
pub fn ablate_weights(base: &RunConfig, echo: &ConfigEcho, settings: &[AblationSetting]) -> Result<SweepOutcome> {
    let cells = settings
        .iter()
        .map(|s| {
            let mut cfg = base.clone();
            cfg.mode = Mode::Gcl;
            cfg.weights = s.weights;
            cfg.ago = s.ago;
            let mut row = SweepRow::blank("ablation", s.name.clone());
            row.lambda_sup = Some(s.weights.lambda_sup);
            row.lambda_gsl = Some(s.weights.lambda_gsl);
            row.lambda_drl = Some(s.weights.lambda_drl);
            row.ago = Some(s.ago);
            let w = s.weights;
            let ov = format!(
                "weights=({}, {}, {}) ago={}",
                w.lambda_sup, w.lambda_gsl, w.lambda_drl, s.ago
            );
            (row, cfg, echo.with_override(ov))
        })
        .collect();
    sweep("ablation", base, echo, cells)
}
