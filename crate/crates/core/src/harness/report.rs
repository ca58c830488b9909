//! Run reports and the ablation table.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::config::GatherSource;
use super::train::TrainOutcome;
use crate::association::TrackingReport;
use crate::error::{Error, Result};
use crate::trace::BiasMode;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TemplateScore {
    pub accuracy: f64,
    pub anls: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config_hash: String,
    pub gather_source: GatherSource,
    pub trace_bias: BiasMode,
    pub accuracy: f64,
    pub anls: f64,
    pub questions: usize,
    pub per_template: BTreeMap<String, TemplateScore>,
    /// Exact transcription rate on the test split's ground-truth instances.
    pub gather_exact_match: f64,
    pub tracking: TrackingReport,
    /// Mean instance tokens per test video, with and without fusing sightings.
    pub token_length_means: (f64, f64),
    pub token_length_ratio: Option<f64>,
    pub gather_training: Option<TrainOutcome>,
    pub trace_training: TrainOutcome,
    /// Seconds per phase; excluded from reproducibility comparisons.
    pub timings: BTreeMap<String, f64>,
}

impl RunReport {
    /// Accuracy over the spatial-relation questions.
    pub fn spatial_accuracy(&self) -> f64 {
        let (sum, count) = self
            .per_template
            .iter()
            .filter(|(k, _)| k.starts_with("spatial"))
            .fold((0.0, 0usize), |(s, c), (_, t)| (s + t.accuracy * t.count as f64, c + t.count));
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }

    /// The report with timing fields cleared.
    pub fn without_timings(&self) -> Self {
        Self {
            timings: BTreeMap::new(),
            ..self.clone()
        }
    }

    /// Metric differences `other - self`; refuses reports of different configs.
    pub fn compare(&self, other: &RunReport) -> Result<ReportDelta> {
        if self.config_hash != other.config_hash {
            return Err(Error::Contract(format!(
                "reports come from different configs ({} vs {})",
                &self.config_hash[..12.min(self.config_hash.len())],
                &other.config_hash[..12.min(other.config_hash.len())]
            )));
        }
        Ok(ReportDelta {
            accuracy: other.accuracy - self.accuracy,
            anls: other.anls - self.anls,
            gather_exact_match: other.gather_exact_match - self.gather_exact_match,
            identical: self.without_timings() == other.without_timings(),
        })
    }

    pub fn key_values(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "config_hash = {}", self.config_hash);
        let _ = writeln!(out, "gather_source = {}", self.gather_source.name());
        let _ = writeln!(out, "trace_bias = {}", self.trace_bias.name());
        let _ = writeln!(out, "accuracy = {:.4}", self.accuracy);
        let _ = writeln!(out, "anls = {:.4}", self.anls);
        let _ = writeln!(out, "questions = {}", self.questions);
        for (k, t) in &self.per_template {
            let _ = writeln!(out, "accuracy.{k} = {:.4}", t.accuracy);
        }
        let _ = writeln!(out, "gather_exact_match = {:.4}", self.gather_exact_match);
        let _ = writeln!(out, "mota = {:.4}", self.tracking.mota);
        let _ = writeln!(out, "idf1 = {:.4}", self.tracking.idf1);
        let _ = writeln!(out, "tokens_with_gather = {:.4}", self.token_length_means.0);
        let _ = writeln!(out, "tokens_without_gather = {:.4}", self.token_length_means.1);
        for (k, v) in &self.timings {
            let _ = writeln!(out, "seconds.{k} = {v:.4}");
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReportDelta {
    pub accuracy: f64,
    pub anls: f64,
    pub gather_exact_match: f64,
    /// Everything but timings matches.
    pub identical: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: char,
    pub report: RunReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, label: char) -> Option<&RunReport> {
        self.rows.iter().find(|r| r.label == label).map(|r| &r.report)
    }

    /// `(label, accuracy, anls)` per row.
    pub fn metrics(&self) -> Vec<(char, f64, f64)> {
        self.rows.iter().map(|r| (r.label, r.report.accuracy, r.report.anls)).collect()
    }

    pub fn format(&self) -> String {
        let mut out = format!("{:<4}{:<9}{:<14}{:>8}{:>8}\n", "row", "gather", "bias", "acc", "anls");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<4}{:<9}{:<14}{:>8.4}{:>8.4}",
                r.label,
                r.report.gather_source.name(),
                r.report.trace_bias.name(),
                r.report.accuracy,
                r.report.anls
            );
        }
        out
    }
}
