//! Balanced-test evaluation: overall and Many/Medium/Few top-1, confusion matrices.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{GlmcError, Result};
use crate::longtail::{ClassFrequencyTable, LabeledDataset};
use crate::model::{HeadMode, Network};
use crate::sampler::Batch;

/// Above this many training samples a class is Many-shot.
pub const MANY_THRESHOLD: usize = 100;
/// At or below this many training samples a class is Few-shot.
pub const FEW_THRESHOLD: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Many,
    Medium,
    Few,
}

impl Group {
    /// `> 100` Many, `≤ 20` Few, the rest Medium (so a count of exactly 20 is Few).
    pub fn of_count(count: usize) -> Group {
        if count > MANY_THRESHOLD {
            Group::Many
        } else if count <= FEW_THRESHOLD {
            Group::Few
        } else {
            Group::Medium
        }
    }
}

pub fn assign_groups(train_table: &ClassFrequencyTable) -> Vec<Group> {
    train_table.counts().iter().map(|&c| Group::of_count(c)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub num_samples: usize,
    pub top1_overall: f64,
    /// `None` when no test sample falls in the group.
    pub top1_many: Option<f64>,
    pub top1_medium: Option<f64>,
    pub top1_few: Option<f64>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<u64>>,
    pub group_assignment: Vec<Group>,
    pub per_class_accuracy: Vec<Option<f64>>,
}

impl EvalReport {
    pub fn group_accuracy(&self, group: Group) -> Option<f64> {
        match group {
            Group::Many => self.top1_many,
            Group::Medium => self.top1_medium,
            Group::Few => self.top1_few,
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text).map_err(|e| GlmcError::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| GlmcError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Tally a report from predicted and true labels.
pub fn report_from_predictions(predictions: &[usize], labels: &[usize], groups: &[Group]) -> Result<EvalReport> {
    if predictions.len() != labels.len() {
        return Err(GlmcError::ShapeMismatch(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(GlmcError::EmptyDataset);
    }
    let c = groups.len();
    if let Some(&bad) = labels.iter().chain(predictions).find(|&&y| y >= c) {
        return Err(GlmcError::InvalidArgument(format!("class {bad} out of range for {c} classes")));
    }
    let mut confusion = vec![vec![0u64; c]; c];
    for (&y, &p) in labels.iter().zip(predictions) {
        confusion[y][p] += 1;
    }
    let per_class_accuracy = confusion
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let n: u64 = row.iter().sum();
            (n > 0).then(|| row[k] as f64 / n as f64)
        })
        .collect();
    let group_acc = |g: Group| {
        let (mut hit, mut n) = (0u64, 0u64);
        for (k, row) in confusion.iter().enumerate().filter(|(k, _)| groups[*k] == g) {
            hit += row[k];
            n += row.iter().sum::<u64>();
        }
        (n > 0).then(|| hit as f64 / n as f64)
    };
    let correct: u64 = (0..c).map(|k| confusion[k][k]).sum();
    Ok(EvalReport {
        num_samples: labels.len(),
        top1_overall: correct as f64 / labels.len() as f64,
        top1_many: group_acc(Group::Many),
        top1_medium: group_acc(Group::Medium),
        top1_few: group_acc(Group::Few),
        group_assignment: groups.to_vec(),
        per_class_accuracy,
        confusion,
    })
}

/// Argmax predictions of the head selected by `mode`, in evaluation mode.
pub fn predict(network: &Network, dataset: &LabeledDataset, mode: HeadMode, batch_size: usize) -> Result<Vec<usize>> {
    let all: Vec<usize> = (0..dataset.len()).collect();
    let mut out = Vec::with_capacity(dataset.len());
    for idx in all.chunks(batch_size.max(1)) {
        let batch = Batch::gather(dataset, idx);
        let x = network.images_to_tensor(&batch.images)?;
        let pred = network.inference_logits(&x, mode)?.argmax(1)?.to_vec1::<u32>()?;
        out.extend(pred.into_iter().map(|p| p as usize));
    }
    Ok(out)
}

pub fn evaluate(
    network: &Network,
    test_set: &LabeledDataset,
    train_table: &ClassFrequencyTable,
    mode: HeadMode,
) -> Result<EvalReport> {
    if test_set.is_empty() {
        return Err(GlmcError::EmptyDataset);
    }
    if train_table.num_classes() != network.spec().num_classes {
        return Err(GlmcError::ShapeMismatch(format!(
            "train table has {} classes, network {}",
            train_table.num_classes(),
            network.spec().num_classes
        )));
    }
    let predictions = predict(network, test_set, mode, 256)?;
    report_from_predictions(&predictions, test_set.labels(), &assign_groups(train_table))
}

/// Row-normalised confusion heatmap, `cell` pixels per entry, white (0) to dark blue (1).
pub fn confusion_heatmap(confusion: &[Vec<u64>], cell: u32) -> RgbImage {
    let c = confusion.len() as u32;
    let cell = cell.max(1);
    let mut img = RgbImage::new(c * cell, c * cell);
    for (y, row) in confusion.iter().enumerate() {
        let n: u64 = row.iter().sum();
        for (x, &v) in row.iter().enumerate() {
            let f = if n == 0 { 0.0 } else { v as f64 / n as f64 };
            let shade = |lo: f64, hi: f64| (lo + (hi - lo) * f).round() as u8;
            let px = Rgb([shade(255.0, 8.0), shade(255.0, 48.0), shade(255.0, 107.0)]);
            for dy in 0..cell {
                for dx in 0..cell {
                    img.put_pixel(x as u32 * cell + dx, y as u32 * cell + dy, px);
                }
            }
        }
    }
    img
}

pub fn write_confusion_png(confusion: &[Vec<u64>], path: &Path) -> Result<()> {
    let cell = (400 / confusion.len().max(1) as u32).clamp(2, 40);
    confusion_heatmap(confusion, cell).save(path)?;
    Ok(())
}
