//! Delegate Identity Cards and their flat `ldp.*` label form.
//!
//! A card describes a delegate as a model rather than an opaque service: who
//! runs it, what family and version it is, which trust domain it belongs to,
//! and per-capability hints for quality, latency and cost. Routers and policy
//! checks read these fields directly.
//!
//! Registries that only store flat string labels can carry a card via
//! [`flatten_to_labels`] and [`parse_from_labels`]. Quality hints are written
//! with four decimals, so values with more precision are rounded on the way
//! through.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::validation::ValidationReport;

pub const LABEL_PREFIX: &str = "ldp.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CostLevel {
    Low,
    Medium,
    High,
}

impl CostLevel {
    /// 1, 2, 3 for low, medium, high.
    pub fn rank(self) -> u32 {
        match self {
            CostLevel::Low => 1,
            CostLevel::Medium => 2,
            CostLevel::High => 3,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CostLevel::Low => "low",
            CostLevel::Medium => "medium",
            CostLevel::High => "high",
        }
    }
}

impl fmt::Display for CostLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CostLevel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "low" => Ok(CostLevel::Low),
            "medium" => Ok(CostLevel::Medium),
            "high" => Ok(CostLevel::High),
            other => Err(format!("expected low, medium or high, got {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapabilityEntry {
    pub name: String,
    pub quality_hint: f64,
    pub latency_hint_ms_p50: u64,
    pub cost_hint: CostLevel,
}

impl CapabilityEntry {
    pub fn new(
        name: impl Into<String>,
        quality_hint: f64,
        latency_hint_ms_p50: u64,
        cost_hint: CostLevel,
    ) -> Self {
        Self {
            name: name.into(),
            quality_hint,
            latency_hint_ms_p50,
            cost_hint,
        }
    }
}

/// Field names and order follow the published card schema; optional fields
/// are omitted from JSON when unset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelegateIdentityCard {
    pub delegate_id: String,
    pub principal_id: String,
    pub model_family: String,
    pub model_name: String,
    pub model_version: String,
    pub runtime_version: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights_fingerprint: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub endpoint_address: Option<String>,
    pub trust_domain: String,
    /// Base64 Ed25519 verification key.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub public_key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jurisdiction: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data_handling_policy: Option<String>,
    pub capabilities: Vec<CapabilityEntry>,
    pub reasoning_profile: String,
    pub cost_profile: CostLevel,
    pub context_window: u64,
    pub modalities_supported: Vec<String>,
    pub languages_supported: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tokenizer_fingerprint: Option<String>,
}

impl DelegateIdentityCard {
    pub fn capability(&self, name: &str) -> Option<&CapabilityEntry> {
        self.capabilities.iter().find(|c| c.name == name)
    }

    pub fn capability_names(&self) -> impl Iterator<Item = &str> {
        self.capabilities.iter().map(|c| c.name.as_str())
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

fn check_nonempty(report: &mut ValidationReport, field: &str, value: &str) {
    if value.trim().is_empty() {
        report.push(field, "must not be empty");
    }
}

fn check_list(report: &mut ValidationReport, field: &str, items: &[String]) {
    for (i, item) in items.iter().enumerate() {
        if item.is_empty() {
            report.push(format!("{field}[{i}]"), "list entries must not be empty");
        } else if item.contains(',') {
            report.push(
                format!("{field}[{i}]"),
                "list entries must not contain commas",
            );
        }
    }
}

pub fn validate_card(card: &DelegateIdentityCard) -> ValidationReport {
    let mut report = ValidationReport::new();
    check_nonempty(&mut report, "delegate_id", &card.delegate_id);
    check_nonempty(&mut report, "model_family", &card.model_family);
    check_nonempty(&mut report, "trust_domain", &card.trust_domain);
    if card.context_window == 0 {
        report.push("context_window", "must be positive");
    }
    if card.capabilities.is_empty() {
        report.push("capabilities", "at least one capability is required");
    }
    let mut seen = BTreeSet::new();
    for (i, cap) in card.capabilities.iter().enumerate() {
        let prefix = format!("capabilities[{i}]");
        if cap.name.trim().is_empty() {
            report.push(format!("{prefix}.name"), "must not be empty");
        } else if !seen.insert(cap.name.as_str()) {
            report.push(
                format!("{prefix}.name"),
                format!("duplicate capability {:?}", cap.name),
            );
        }
        if !(0.0..=1.0).contains(&cap.quality_hint) {
            report.push(
                format!("{prefix}.quality_hint"),
                format!("{} is outside [0, 1]", cap.quality_hint),
            );
        }
        if cap.latency_hint_ms_p50 == 0 {
            report.push(format!("{prefix}.latency_hint_ms_p50"), "must be positive");
        }
    }
    check_list(
        &mut report,
        "modalities_supported",
        &card.modalities_supported,
    );
    check_list(
        &mut report,
        "languages_supported",
        &card.languages_supported,
    );
    report
}

pub type LabelMap = BTreeMap<String, String>;

#[derive(Debug, Error, PartialEq)]
pub enum LabelError {
    #[error("card is invalid: {0}")]
    InvalidCard(ValidationReport),
    #[error("missing required label `{0}`")]
    MissingKey(String),
    #[error("label `{key}` has malformed value {value:?}: {reason}")]
    Malformed {
        key: String,
        value: String,
        reason: String,
    },
}

fn key(field: &str) -> String {
    format!("{LABEL_PREFIX}{field}")
}

fn cap_key(i: usize, sub: &str) -> String {
    format!("{LABEL_PREFIX}capability.{i}.{sub}")
}

pub fn flatten_to_labels(card: &DelegateIdentityCard) -> Result<LabelMap, LabelError> {
    let report = validate_card(card);
    if !report.is_valid() {
        return Err(LabelError::InvalidCard(report));
    }
    let mut labels = LabelMap::new();
    let mut put = |field: &str, value: String| {
        labels.insert(key(field), value);
    };
    put("delegate_id", card.delegate_id.clone());
    put("principal_id", card.principal_id.clone());
    put("model_family", card.model_family.clone());
    put("model_name", card.model_name.clone());
    put("model_version", card.model_version.clone());
    put("runtime_version", card.runtime_version.clone());
    put("trust_domain", card.trust_domain.clone());
    put("reasoning_profile", card.reasoning_profile.clone());
    put("cost_profile", card.cost_profile.to_string());
    put("context_window", card.context_window.to_string());
    put("modalities_supported", card.modalities_supported.join(","));
    put("languages_supported", card.languages_supported.join(","));
    let optional = [
        ("weights_fingerprint", &card.weights_fingerprint),
        ("endpoint_address", &card.endpoint_address),
        ("public_key", &card.public_key),
        ("jurisdiction", &card.jurisdiction),
        ("data_handling_policy", &card.data_handling_policy),
        ("tokenizer_fingerprint", &card.tokenizer_fingerprint),
    ];
    for (field, value) in optional {
        if let Some(v) = value {
            put(field, v.clone());
        }
    }
    for (i, cap) in card.capabilities.iter().enumerate() {
        labels.insert(cap_key(i, "name"), cap.name.clone());
        labels.insert(
            cap_key(i, "quality_hint"),
            format!("{:.4}", cap.quality_hint),
        );
        labels.insert(
            cap_key(i, "latency_hint_ms_p50"),
            cap.latency_hint_ms_p50.to_string(),
        );
        labels.insert(cap_key(i, "cost_hint"), cap.cost_hint.to_string());
    }
    Ok(labels)
}

fn required<'a>(labels: &'a LabelMap, k: &str) -> Result<&'a str, LabelError> {
    labels
        .get(k)
        .map(String::as_str)
        .ok_or_else(|| LabelError::MissingKey(k.to_owned()))
}

fn parsed<T: FromStr>(labels: &LabelMap, k: &str) -> Result<T, LabelError>
where
    T::Err: fmt::Display,
{
    let raw = required(labels, k)?;
    raw.parse().map_err(|e: T::Err| LabelError::Malformed {
        key: k.to_owned(),
        value: raw.to_owned(),
        reason: e.to_string(),
    })
}

fn split_list(raw: &str) -> Vec<String> {
    if raw.is_empty() {
        Vec::new()
    } else {
        raw.split(',').map(str::to_owned).collect()
    }
}

pub fn parse_from_labels(labels: &LabelMap) -> Result<DelegateIdentityCard, LabelError> {
    let text = |field: &str| required(labels, &key(field)).map(str::to_owned);
    let optional = |field: &str| labels.get(&key(field)).cloned();

    let mut capabilities = Vec::new();
    let mut i = 0;
    while labels.contains_key(&cap_key(i, "name")) {
        capabilities.push(CapabilityEntry {
            name: required(labels, &cap_key(i, "name"))?.to_owned(),
            quality_hint: parsed(labels, &cap_key(i, "quality_hint"))?,
            latency_hint_ms_p50: parsed(labels, &cap_key(i, "latency_hint_ms_p50"))?,
            cost_hint: parsed(labels, &cap_key(i, "cost_hint"))?,
        });
        i += 1;
    }

    let card = DelegateIdentityCard {
        delegate_id: text("delegate_id")?,
        principal_id: text("principal_id")?,
        model_family: text("model_family")?,
        model_name: text("model_name")?,
        model_version: text("model_version")?,
        runtime_version: text("runtime_version")?,
        weights_fingerprint: optional("weights_fingerprint"),
        endpoint_address: optional("endpoint_address"),
        trust_domain: text("trust_domain")?,
        public_key: optional("public_key"),
        jurisdiction: optional("jurisdiction"),
        data_handling_policy: optional("data_handling_policy"),
        capabilities,
        reasoning_profile: text("reasoning_profile")?,
        cost_profile: parsed(labels, &key("cost_profile"))?,
        context_window: parsed(labels, &key("context_window"))?,
        modalities_supported: split_list(&text("modalities_supported")?),
        languages_supported: split_list(&text("languages_supported")?),
        tokenizer_fingerprint: optional("tokenizer_fingerprint"),
    };
    let report = validate_card(&card);
    if !report.is_valid() {
        return Err(LabelError::InvalidCard(report));
    }
    Ok(card)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;
    use proptest::prelude::*;

    #[test]
    fn reference_card_is_valid() {
        let card = fixtures::reference_card();
        assert!(validate_card(&card).is_valid());
        assert_eq!(card.capabilities[0].quality_hint, 0.85);
        assert_eq!(card.context_window, 32768);
    }

    #[test]
    fn quality_hint_out_of_range() {
        let mut card = fixtures::reference_card();
        card.capabilities[0].quality_hint = 1.2;
        let report = validate_card(&card);
        assert_eq!(
            report.fields().collect::<Vec<_>>(),
            ["capabilities[0].quality_hint"]
        );
    }

    #[test]
    fn empty_capabilities() {
        let mut card = fixtures::reference_card();
        card.capabilities.clear();
        let report = validate_card(&card);
        assert_eq!(report.fields().collect::<Vec<_>>(), ["capabilities"]);
    }

    /// Each mutation breaks exactly one invariant and yields exactly one entry.
    #[test]
    fn single_field_mutations() {
        type Mutation = (&'static str, fn(&mut DelegateIdentityCard));
        let mutations: &[Mutation] = &[
            ("delegate_id", |c| c.delegate_id.clear()),
            ("model_family", |c| c.model_family = " ".into()),
            ("trust_domain", |c| c.trust_domain.clear()),
            ("context_window", |c| c.context_window = 0),
            ("capabilities", |c| c.capabilities.clear()),
            ("capabilities[0].name", |c| c.capabilities[0].name.clear()),
            ("capabilities[1].name", |c| {
                c.capabilities[1].name = "reasoning".into()
            }),
            ("capabilities[0].quality_hint", |c| {
                c.capabilities[0].quality_hint = -0.01
            }),
            ("capabilities[1].quality_hint", |c| {
                c.capabilities[1].quality_hint = 1.0001
            }),
            ("capabilities[0].latency_hint_ms_p50", |c| {
                c.capabilities[0].latency_hint_ms_p50 = 0
            }),
            ("modalities_supported[0]", |c| {
                c.modalities_supported[0] = "text,image".into()
            }),
            ("languages_supported[1]", |c| {
                c.languages_supported[1].clear()
            }),
        ];
        for (field, mutate) in mutations {
            let mut card = fixtures::reference_card();
            mutate(&mut card);
            let report = validate_card(&card);
            assert_eq!(report.fields().collect::<Vec<_>>(), [*field], "{report}");
        }
    }

    #[test]
    fn boundary_hints_are_valid() {
        let mut card = fixtures::reference_card();
        card.capabilities[0].quality_hint = 0.0;
        card.capabilities[1].quality_hint = 1.0;
        assert!(validate_card(&card).is_valid());
    }

    #[test]
    fn flatten_reference_card() {
        let labels = flatten_to_labels(&fixtures::reference_card()).unwrap();
        assert_eq!(labels["ldp.model_family"], "qwen");
        assert_eq!(labels["ldp.capability.0.name"], "reasoning");
        assert_eq!(labels["ldp.capability.0.quality_hint"], "0.8500");
        assert_eq!(labels["ldp.languages_supported"], "en,zh");
        assert!(!labels.contains_key("ldp.jurisdiction"));
        assert!(labels.keys().all(|k| k.starts_with(LABEL_PREFIX)));
    }

    #[test]
    fn parse_reference_card_round_trip() {
        let card = fixtures::reference_card();
        let labels = flatten_to_labels(&card).unwrap();
        assert_eq!(parse_from_labels(&labels).unwrap(), card);
    }

    #[test]
    fn missing_trust_domain() {
        let mut labels = flatten_to_labels(&fixtures::reference_card()).unwrap();
        labels.remove("ldp.trust_domain");
        assert_eq!(
            parse_from_labels(&labels),
            Err(LabelError::MissingKey("ldp.trust_domain".into()))
        );
    }

    #[test]
    fn malformed_context_window() {
        let mut labels = flatten_to_labels(&fixtures::reference_card()).unwrap();
        labels.insert("ldp.context_window".into(), "abc".into());
        assert!(matches!(
            parse_from_labels(&labels),
            Err(LabelError::Malformed { ref key, .. }) if key == "ldp.context_window"
        ));
    }

    #[test]
    fn flatten_rejects_invalid_card() {
        let mut card = fixtures::reference_card();
        card.context_window = 0;
        assert!(matches!(
            flatten_to_labels(&card),
            Err(LabelError::InvalidCard(_))
        ));
    }

    #[test]
    fn optional_fields_survive() {
        let mut card = fixtures::reference_card();
        card.jurisdiction = Some("EU".into());
        card.public_key = Some("AAAA".into());
        card.tokenizer_fingerprint = Some("sha256:abc".into());
        let labels = flatten_to_labels(&card).unwrap();
        assert_eq!(labels["ldp.jurisdiction"], "EU");
        assert_eq!(parse_from_labels(&labels).unwrap(), card);
    }

    #[test]
    fn card_json_uses_schema_field_names() {
        let json = serde_json::to_value(fixtures::reference_card()).unwrap();
        let src: serde_json::Value = serde_json::from_str(fixtures::REFERENCE_CARD_JSON).unwrap();
        assert_eq!(json, src);
    }

    proptest! {
        #[test]
        fn label_round_trip(seed in any::<u64>()) {
            let card = crate::fixtures::random_card(seed);
            prop_assert!(validate_card(&card).is_valid());
            let labels = flatten_to_labels(&card).unwrap();
            prop_assert_eq!(parse_from_labels(&labels).unwrap(), card);
        }
    }
}
