//! Provenance records attached to task results, and source weighting.
//!
//! On the wire a record nests `confidence` and `verification` objects;
//! in memory it is flat.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::payload::PayloadMode;
use crate::validation::ValidationReport;

/// Prior given to sources whose confidence is not backed by a credible
/// verification.
pub const UNVERIFIED_PRIOR: f64 = 0.5;

/// Confidence assigned by [`inject_noise`].
pub const NOISY_CONFIDENCE: f64 = 0.99;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConfidenceMethod {
    #[serde(rename = "self-report")]
    SelfReport,
    #[serde(rename = "calibrated")]
    Calibrated,
    #[serde(rename = "external")]
    External,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VerificationStatus {
    Passed,
    Failed,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "WireRecord", into = "WireRecord")]
pub struct ProvenanceRecord {
    pub produced_by: String,
    pub model_version: String,
    pub payload_mode_used: PayloadMode,
    pub confidence_score: f64,
    pub confidence_method: ConfidenceMethod,
    pub verification_performed: bool,
    pub verification_status: VerificationStatus,
}

#[derive(Serialize, Deserialize)]
struct WireConfidence {
    score: f64,
    method: ConfidenceMethod,
}

#[derive(Serialize, Deserialize)]
struct WireVerification {
    performed: bool,
    status: VerificationStatus,
}

#[derive(Serialize, Deserialize)]
struct WireRecord {
    produced_by: String,
    model_version: String,
    payload_mode_used: PayloadMode,
    confidence: WireConfidence,
    verification: WireVerification,
}

impl From<WireRecord> for ProvenanceRecord {
    fn from(w: WireRecord) -> Self {
        Self {
            produced_by: w.produced_by,
            model_version: w.model_version,
            payload_mode_used: w.payload_mode_used,
            confidence_score: w.confidence.score,
            confidence_method: w.confidence.method,
            verification_performed: w.verification.performed,
            verification_status: w.verification.status,
        }
    }
}

impl From<ProvenanceRecord> for WireRecord {
    fn from(r: ProvenanceRecord) -> Self {
        Self {
            produced_by: r.produced_by,
            model_version: r.model_version,
            payload_mode_used: r.payload_mode_used,
            confidence: WireConfidence {
                score: r.confidence_score,
                method: r.confidence_method,
            },
            verification: WireVerification {
                performed: r.verification_performed,
                status: r.verification_status,
            },
        }
    }
}

impl ProvenanceRecord {
    /// Self-reported, unverified.
    pub fn self_reported(
        produced_by: impl Into<String>,
        model_version: impl Into<String>,
        mode: PayloadMode,
        score: f64,
    ) -> Self {
        Self {
            produced_by: produced_by.into(),
            model_version: model_version.into(),
            payload_mode_used: mode,
            confidence_score: score,
            confidence_method: ConfidenceMethod::SelfReport,
            verification_performed: false,
            verification_status: VerificationStatus::None,
        }
    }

    /// Verification that a consumer can rely on: performed, passed, and not
    /// self-attested.
    pub fn has_credible_verification(&self) -> bool {
        self.verification_performed
            && self.verification_status == VerificationStatus::Passed
            && self.confidence_method != ConfidenceMethod::SelfReport
    }
}

pub fn validate_record(rec: &ProvenanceRecord) -> ValidationReport {
    let mut report = ValidationReport::new();
    if rec.produced_by.trim().is_empty() {
        report.push("produced_by", "must not be empty");
    }
    if !(0.0..=1.0).contains(&rec.confidence_score) {
        report.push(
            "confidence.score",
            format!("{} is outside [0, 1]", rec.confidence_score),
        );
    }
    let status_none = rec.verification_status == VerificationStatus::None;
    if status_none == rec.verification_performed {
        report.push(
            "verification.status",
            if rec.verification_performed {
                "status must be passed or failed when verification was performed"
            } else {
                "status must be none when no verification was performed"
            },
        );
    }
    report
}

#[derive(Debug, Error, PartialEq)]
pub enum ProvenanceError {
    #[error("cannot weight an empty set of sources")]
    Empty,
}

/// How a consumer turns provenance into source weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SourceWeighting {
    /// Confidence counts only with credible verification; everything else
    /// gets [`UNVERIFIED_PRIOR`].
    #[default]
    VerifiedOrPrior,
    /// Raw confidence scores, trusted as reported.
    ConfidenceOnly,
}

impl SourceWeighting {
    pub fn base(self, rec: &ProvenanceRecord) -> f64 {
        match self {
            SourceWeighting::ConfidenceOnly => rec.confidence_score,
            SourceWeighting::VerifiedOrPrior if rec.has_credible_verification() => {
                rec.confidence_score
            }
            SourceWeighting::VerifiedOrPrior => UNVERIFIED_PRIOR,
        }
    }
}

/// Normalized weights under [`SourceWeighting::VerifiedOrPrior`].
pub fn weight_sources(records: &[ProvenanceRecord]) -> Result<Vec<f64>, ProvenanceError> {
    weight_sources_with(records, SourceWeighting::VerifiedOrPrior)
}

pub fn weight_sources_with(
    records: &[ProvenanceRecord],
    rule: SourceWeighting,
) -> Result<Vec<f64>, ProvenanceError> {
    if records.is_empty() {
        return Err(ProvenanceError::Empty);
    }
    let bases: Vec<f64> = records.iter().map(|r| rule.base(r).max(0.0)).collect();
    let total: f64 = bases.iter().sum();
    if total <= 0.0 {
        let w = 1.0 / records.len() as f64;
        return Ok(vec![w; records.len()]);
    }
    Ok(bases.into_iter().map(|b| b / total).collect())
}

/// Inflate confidence to 0.99 and mark the record verified. Every other
/// field is untouched.
pub fn inject_noise(rec: &ProvenanceRecord) -> ProvenanceRecord {
    ProvenanceRecord {
        confidence_score: NOISY_CONFIDENCE,
        verification_performed: true,
        verification_status: VerificationStatus::Passed,
        ..rec.clone()
    }
}
