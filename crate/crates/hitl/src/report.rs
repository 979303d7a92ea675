//! Labeling-time and accuracy summary, one column per model stage.

use serde::{Deserialize, Serialize};
use vbquant_core::quantify::summary_stats;

use crate::engine::{HitlSession, Provenance, SessionState};
use crate::HitlError;

/// Mean and population SD.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl MeanSd {
    pub fn of(values: &[f64]) -> Option<Self> {
        let s = summary_stats(values).ok()?;
        Some(Self {
            mean: s.mean,
            sd: s.sd,
            n: s.n,
        })
    }
}

fn cell(v: Option<MeanSd>, digits: usize) -> String {
    v.map_or_else(|| "-".into(), |v| format!("{:.*} ± {:.*}", digits, v.mean, digits, v.sd))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeColumn {
    /// `"Without DL"` or `"Iteration k"`.
    pub label: String,
    /// Seconds per volume spent annotating or correcting.
    pub manual_seconds: Option<MeanSd>,
    /// Voxels changed per volume.
    pub edit_cost: Option<MeanSd>,
    /// Voxels a perfect corrector would change on the holdout.
    pub holdout_edit_cost: Option<MeanSd>,
    pub accuracy: Option<MeanSd>,
    pub images: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeReport {
    pub columns: Vec<TimeColumn>,
}

impl TimeReport {
    /// Tab-separated table with one row per metric.
    pub fn to_table(&self) -> String {
        let mut out = String::from("Metric");
        for c in &self.columns {
            out.push('\t');
            out.push_str(&c.label);
        }
        out.push('\n');
        let rows: [(&str, Box<dyn Fn(&TimeColumn) -> String>); 5] = [
            ("Manual time (s)", Box::new(|c| cell(c.manual_seconds, 1))),
            ("Edit cost (voxels)", Box::new(|c| cell(c.edit_cost, 1))),
            ("Holdout edit cost (voxels)", Box::new(|c| cell(c.holdout_edit_cost, 1))),
            ("Accuracy (DSC)", Box::new(|c| cell(c.accuracy, 3))),
            ("# of Images", Box::new(|c| c.images.map_or_else(|| "-".into(), |n| n.to_string()))),
        ];
        for (name, f) in rows.iter() {
            out.push_str(name);
            for c in &self.columns {
                out.push('\t');
                out.push_str(&f(c));
            }
            out.push('\n');
        }
        out
    }
}

pub fn time_report(session: &HitlSession) -> Result<TimeReport, HitlError> {
    if session.state() == (SessionState::AwaitingAnnotation { batch: 0 }) {
        return Err(HitlError::NothingToReport);
    }
    let masks = session.masks();
    let stage = |pick: &dyn Fn(Provenance, usize) -> bool| {
        let picked: Vec<_> = masks.values().filter(|m| pick(m.provenance, m.proposal_iteration)).collect();
        let secs: Vec<f64> = picked.iter().map(|m| m.seconds).collect();
        let cost: Vec<f64> = picked.iter().map(|m| m.edit_cost as f64).collect();
        (MeanSd::of(&secs), MeanSd::of(&cost))
    };
    let (s0, e0) = stage(&|p, _| p == Provenance::Manual);
    let mut columns = vec![TimeColumn {
        label: "Without DL".into(),
        manual_seconds: s0,
        edit_cost: e0,
        holdout_edit_cost: None,
        accuracy: None,
        images: None,
    }];
    for r in session.iterations() {
        let (s, e) = stage(&|p, it| p == Provenance::Correction && it == r.iteration);
        let hec: Vec<f64> = r.holdout_edit_cost.iter().map(|&v| v as f64).collect();
        columns.push(TimeColumn {
            label: format!("Iteration {}", r.iteration),
            manual_seconds: s,
            edit_cost: e,
            holdout_edit_cost: MeanSd::of(&hec),
            accuracy: Some(MeanSd {
                mean: r.holdout_dice.mean,
                sd: r.holdout_dice.sd,
                n: r.holdout_dice.n,
            }),
            images: Some(r.training_size),
        });
    }
    Ok(TimeReport { columns })
}
