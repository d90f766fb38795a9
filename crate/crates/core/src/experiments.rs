//! Ablation grids over backend, decay sharing, structural time step and
//! pyramid depth. Each cell trains on the synthetic train split and reports
//! test mAP, training time and inference latency.

use std::fmt::Write as _;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::liquid::{Backend, DecaySharingMode, DtPolicy};
use crate::pyramid::{Detector, PyramidConfig};
use crate::synthetic::{Dataset, Split};
use crate::train::{train, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    Backend,
    DecaySharing,
    Dt,
    PyramidDepth,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Backend, Ablation::DecaySharing, Ablation::Dt, Ablation::PyramidDepth];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Backend => "backend",
            Ablation::DecaySharing => "decay_sharing",
            Ablation::Dt => "dt",
            Ablation::PyramidDepth => "pyramid_depth",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Ablation::Backend => "Relaxation backend",
            Ablation::DecaySharing => "Decay-rate parameterization",
            Ablation::Dt => "Structural time step",
            Ablation::PyramidDepth => "Feature pyramid depth",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| format!("unknown ablation '{s}' (expected backend, decay_sharing, dt or pyramid_depth)"))
    }
}

/// One configured cell of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub label: String,
    pub model: PyramidConfig,
    pub train: TrainConfig,
}

/// Cells of `ablation`, each a copy of the base configs with one knob
/// changed.
pub fn grid(ablation: Ablation, model: &PyramidConfig, tc: &TrainConfig) -> Vec<Cell> {
    let cell = |label: &str, m: PyramidConfig, t: TrainConfig| Cell {
        label: label.to_string(),
        model: m,
        train: t,
    };
    match ablation {
        Ablation::Backend => [
            ("Parallel", Backend::Parallel),
            ("CfcSequential", Backend::CfcSequential),
            ("OdeEuler", Backend::ode_default()),
        ]
        .into_iter()
        .map(|(l, b)| {
            cell(
                l,
                model.clone(),
                TrainConfig {
                    backend: b,
                    ..tc.clone()
                },
            )
        })
        .collect(),
        Ablation::DecaySharing => [
            ("PerChannel", DecaySharingMode::PerChannel),
            ("BlockShared", DecaySharingMode::BlockShared),
        ]
        .into_iter()
        .map(|(l, s)| {
            cell(
                l,
                PyramidConfig {
                    decay_sharing: s,
                    ..model.clone()
                },
                tc.clone(),
            )
        })
        .collect(),
        Ablation::Dt => [
            ("2/30", 2.0 / 30.0, false),
            ("4/30", 4.0 / 30.0, false),
            ("4/30 + align_dt_pyramid", 4.0 / 30.0, true),
            ("8/30", 8.0 / 30.0, false),
            ("1.0", 1.0, false),
        ]
        .into_iter()
        .map(|(l, dt, align)| {
            cell(
                l,
                PyramidConfig {
                    dt_policy: DtPolicy {
                        base_dt: dt,
                        align_pyramid: align,
                    },
                    ..model.clone()
                },
                tc.clone(),
            )
        })
        .collect(),
        Ablation::PyramidDepth => (4..=8)
            .map(|levels| {
                cell(
                    &format!("{levels}-level"),
                    PyramidConfig {
                        levels,
                        ..model.clone()
                    },
                    tc.clone(),
                )
            })
            .collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub synthetic_avg_map: Option<f64>,
    pub train_s_per_epoch: Option<f64>,
    /// Median forward latency over the test videos, milliseconds.
    pub inference_ms: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub ablation: Ablation,
    pub title: String,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, setting: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.setting == setting)
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>, p: usize| v.map(|x| format!("{x:.p$}")).unwrap_or_default();
        let mut s = String::from("setting,synthetic_avg_map,train_s_per_epoch,inference_ms,error\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "\"{}\",{},{},{},\"{}\"",
                r.setting,
                opt(r.synthetic_avg_map, 4),
                opt(r.train_s_per_epoch, 3),
                opt(r.inference_ms, 3),
                r.error.as_deref().unwrap_or("").replace('"', "'")
            );
        }
        s
    }

    pub fn to_markdown(&self) -> String {
        let opt = |v: Option<f64>, p: usize| v.map(|x| format!("{x:.p$}")).unwrap_or_else(|| "-".into());
        let mut s = format!(
            "### {}\n\n| Setting | synthetic avg mAP | Train s/epoch | Inference ms |\n|---|---|---|---|\n",
            self.title
        );
        for r in &self.rows {
            let setting = match &r.error {
                Some(e) => format!("{} (failed: {e})", r.setting),
                None => r.setting.clone(),
            };
            let map = r.synthetic_avg_map.map(|m| m * 100.0);
            let _ = writeln!(
                s,
                "| {setting} | {} | {} | {} |",
                opt(map, 2),
                opt(r.train_s_per_epoch, 2),
                opt(r.inference_ms, 2)
            );
        }
        s
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn inference_ms(model: &Detector<f32>, dataset: &Dataset, backend: Backend) -> Result<f64> {
    let mut times = Vec::new();
    for v in dataset.split(Split::Test) {
        let x = v.features.clone();
        let start = Instant::now();
        model.predict(&x, backend)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    if times.is_empty() {
        return Err(Error::Config("no test videos to time".into()));
    }
    Ok(median(times))
}

pub fn run_cell(cell: &Cell, dataset: &Dataset) -> AblationRow {
    let result = (|| -> Result<(f64, f64, f64)> {
        let out = train::<f32>(dataset, &cell.model, &cell.train)?;
        let epochs = &out.report.epochs;
        let per_epoch = epochs.iter().map(|e| e.seconds).sum::<f64>() / epochs.len() as f64;
        let map = out
            .report
            .best_avg_map
            .ok_or_else(|| Error::Config("no evaluation ran (empty test split?)".into()))?;
        let ms = inference_ms(&out.best, dataset, cell.train.backend)?;
        Ok((map, per_epoch, ms))
    })();
    match result {
        Ok((map, s, ms)) => AblationRow {
            setting: cell.label.clone(),
            synthetic_avg_map: Some(map),
            train_s_per_epoch: Some(s),
            inference_ms: Some(ms),
            error: None,
        },
        Err(e) => AblationRow {
            setting: cell.label.clone(),
            synthetic_avg_map: None,
            train_s_per_epoch: None,
            inference_ms: None,
            error: Some(e.to_string()),
        },
    }
}

/// Runs every cell of `ablation`. A failing cell is recorded and the grid
/// continues. With `workers > 1`, up to that many cells train concurrently,
/// which makes the timing columns unreliable.
pub fn run_ablation(
    ablation: Ablation,
    dataset: &Dataset,
    model: &PyramidConfig,
    tc: &TrainConfig,
    workers: usize,
) -> AblationTable {
    let cells = grid(ablation, model, tc);
    let mut rows = Vec::with_capacity(cells.len());
    for chunk in cells.chunks(workers.max(1)) {
        if chunk.len() == 1 {
            rows.push(run_cell(&chunk[0], dataset));
            continue;
        }
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk.iter().map(|c| s.spawn(move || run_cell(c, dataset))).collect();
            for (h, c) in handles.into_iter().zip(chunk) {
                rows.push(h.join().unwrap_or_else(|_| AblationRow {
                    setting: c.label.clone(),
                    synthetic_avg_map: None,
                    train_s_per_epoch: None,
                    inference_ms: None,
                    error: Some("worker panicked".into()),
                }));
            }
        });
    }
    AblationTable {
        ablation,
        title: ablation.title().to_string(),
        rows,
    }
}
