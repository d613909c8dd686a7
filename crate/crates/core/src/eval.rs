//! Rotation-sweep evaluation and the across-angle variance metric.

use alloc::string::String;
use alloc::vec::Vec;

use crate::dataset::{psnr, Pair, Psnr};
use crate::error::{invalid, Error, Result};
use crate::model::{ModelConfig, ParamVector};

/// Mean PSNR over one test set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SetScore {
    pub mean_psnr_db: f64,
    pub evaluated: usize,
    /// Images dropped because the evolution blew up or the result matched exactly.
    pub excluded: usize,
}

pub fn mean_psnr(outputs: &[(Psnr, bool)]) -> Result<SetScore> {
    let mut sum = 0.0;
    let mut evaluated = 0;
    for (p, ok) in outputs {
        if let (true, Psnr::Finite(db)) = (ok, p) {
            sum += db;
            evaluated += 1;
        }
    }
    if evaluated == 0 {
        return Err(invalid("no image could be evaluated"));
    }
    Ok(SetScore {
        mean_psnr_db: sum / evaluated as f64,
        evaluated,
        excluded: outputs.len() - evaluated,
    })
}

/// Runs the model on every noisy image and averages PSNR against the clean ones.
pub fn evaluate_set(model: &ModelConfig, params: &ParamVector, pairs: &[Pair]) -> Result<SetScore> {
    let mut outputs = Vec::with_capacity(pairs.len());
    for pair in pairs {
        match model.denoise(params, &pair.noisy) {
            Ok(out) => outputs.push((psnr(&out, &pair.clean)?, true)),
            Err(Error::Blowup { step, .. }) => {
                log::warn!("evaluation blew up at step {step}; image excluded");
                outputs.push((Psnr::Infinite, false));
            }
            Err(e) => return Err(e),
        }
    }
    mean_psnr(&outputs)
}

/// PSNR of the noisy inputs themselves.
pub fn evaluate_identity(pairs: &[Pair]) -> Result<SetScore> {
    let outputs = pairs
        .iter()
        .map(|p| psnr(&p.noisy, &p.clean).map(|v| (v, true)))
        .collect::<Result<Vec<_>>>()?;
    mean_psnr(&outputs)
}

/// Population variance (divides by the number of values). Zero for fewer than two values.
pub fn variance(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub model: String,
    pub angle_deg: f64,
    pub mean_psnr_db: f64,
}

/// Per-angle scores for any number of models.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

impl SweepReport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, model: &str, angle_deg: f64, mean_psnr_db: f64) {
        self.rows.push(SweepRow {
            model: String::from(model),
            angle_deg,
            mean_psnr_db,
        });
    }

    /// Sorts rows by model name (first appearance order) and then by angle.
    pub fn sort(&mut self) {
        let names = self.models();
        self.rows.sort_by(|a, b| {
            let ia = names.iter().position(|n| *n == a.model);
            let ib = names.iter().position(|n| *n == b.model);
            ia.cmp(&ib).then(a.angle_deg.total_cmp(&b.angle_deg))
        });
    }

    /// Model names in order of first appearance.
    pub fn models(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for row in &self.rows {
            if !names.contains(&row.model) {
                names.push(row.model.clone());
            }
        }
        names
    }

    /// `(angle, psnr)` in ascending angle order.
    pub fn profile(&self, model: &str) -> Vec<(f64, f64)> {
        let mut p: Vec<(f64, f64)> = self
            .rows
            .iter()
            .filter(|r| r.model == model)
            .map(|r| (r.angle_deg, r.mean_psnr_db))
            .collect();
        p.sort_by(|a, b| a.0.total_cmp(&b.0));
        p
    }

    pub fn psnr_at(&self, model: &str, angle_deg: f64) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.model == model && (r.angle_deg - angle_deg).abs() < 1e-9)
            .map(|r| r.mean_psnr_db)
    }

    pub fn mean(&self, model: &str) -> Option<f64> {
        let p = self.profile(model);
        if p.is_empty() {
            return None;
        }
        Some(p.iter().map(|v| v.1).sum::<f64>() / p.len() as f64)
    }

    /// Variance of the mean PSNR across angles, in dB as customarily reported.
    pub fn variance(&self, model: &str) -> Option<f64> {
        let p = self.profile(model);
        if p.is_empty() {
            return None;
        }
        let values: Vec<f64> = p.iter().map(|v| v.1).collect();
        Some(variance(&values))
    }

    /// Angle with the lowest PSNR.
    pub fn worst_angle(&self, model: &str) -> Option<f64> {
        self.profile(model)
            .into_iter()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .map(|v| v.0)
    }

    pub fn summary(&self) -> Vec<(String, f64)> {
        self.models()
            .into_iter()
            .map(|m| {
                let v = self.variance(&m).unwrap_or(0.0);
                (m, v)
            })
            .collect()
    }
}
