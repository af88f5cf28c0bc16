//! Delegate pools, routing policies, and the judge-score combiner.
//!
//! Three policies are compared:
//!
//! * `ldp` reads identity-card metadata. Easy tasks go to the cheapest capable
//!   delegate (then fastest), hard tasks to the highest quality hint, and
//!   medium tasks to the best quality per unit of cost.
//! * `a2a` matches the skill name only and takes the first registered match.
//! * `random` picks uniformly under a seeded generator.
//!
//! All tie-breaks are total, so every decision is reproducible.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::identity::{validate_card, CapabilityEntry, DelegateIdentityCard};

/// Capability name that matches any skill.
pub const WILDCARD_SKILL: &str = "*";

#[derive(Debug, Error, PartialEq)]
pub enum RoutingError {
    #[error("delegate pool is empty")]
    EmptyPool,
    #[error("duplicate delegate id {0:?} in pool")]
    DuplicateDelegate(String),
    #[error("invalid card for {0:?}: {1}")]
    InvalidCard(String, String),
    #[error("no delegate advertises skill {0:?}")]
    NoCapableDelegate(String),
    #[error("judge score {name}={value} is outside [1, 10]")]
    ScoreOutOfRange { name: &'static str, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskDomain {
    Classification,
    Extraction,
    Reasoning,
    Analysis,
    Coding,
    Math,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Easy,
    Medium,
    Hard,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Easy, Difficulty::Medium, Difficulty::Hard];

    pub fn as_str(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Medium => "medium",
            Difficulty::Hard => "hard",
        }
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub domain: TaskDomain,
    pub difficulty: Difficulty,
    pub required_skill: String,
    pub prompt: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DelegatePool {
    entries: Vec<DelegateIdentityCard>,
}

impl DelegatePool {
    /// Rejects empty pools, duplicate ids and invalid cards.
    pub fn new(entries: Vec<DelegateIdentityCard>) -> Result<Self, RoutingError> {
        if entries.is_empty() {
            return Err(RoutingError::EmptyPool);
        }
        let mut ids = BTreeSet::new();
        for card in &entries {
            if !ids.insert(card.delegate_id.as_str()) {
                return Err(RoutingError::DuplicateDelegate(card.delegate_id.clone()));
            }
            let report = validate_card(card);
            if !report.is_valid() {
                return Err(RoutingError::InvalidCard(
                    card.delegate_id.clone(),
                    report.to_string(),
                ));
            }
        }
        Ok(Self { entries })
    }

    pub fn from_json(text: &str) -> Result<Self, String> {
        let cards: Vec<DelegateIdentityCard> =
            serde_json::from_str(text).map_err(|e| e.to_string())?;
        Self::new(cards).map_err(|e| e.to_string())
    }

    pub fn entries(&self) -> &[DelegateIdentityCard] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, delegate_id: &str) -> Option<&DelegateIdentityCard> {
        self.entries.iter().find(|c| c.delegate_id == delegate_id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoutingPolicy {
    Ldp,
    A2a,
    Random,
}

impl RoutingPolicy {
    pub const ALL: [RoutingPolicy; 3] = [
        RoutingPolicy::Ldp,
        RoutingPolicy::A2a,
        RoutingPolicy::Random,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RoutingPolicy::Ldp => "ldp",
            RoutingPolicy::A2a => "a2a",
            RoutingPolicy::Random => "random",
        }
    }
}

impl fmt::Display for RoutingPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RoutingPolicy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| format!("unknown routing policy {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub chosen: String,
    pub policy: RoutingPolicy,
    pub expected_latency_ms: u64,
    pub rationale: String,
}

fn skill_entry<'a>(card: &'a DelegateIdentityCard, skill: &str) -> Option<&'a CapabilityEntry> {
    card.capability(skill)
        .or_else(|| card.capability(WILDCARD_SKILL))
}

/// Latency hint for `skill`, falling back to the slowest advertised hint.
pub fn expected_latency(card: &DelegateIdentityCard, skill: &str) -> u64 {
    skill_entry(card, skill)
        .map(|c| c.latency_hint_ms_p50)
        .or_else(|| {
            card.capabilities
                .iter()
                .map(|c| c.latency_hint_ms_p50)
                .max()
        })
        .unwrap_or(0)
}

fn is_analytical(card: &DelegateIdentityCard) -> bool {
    card.reasoning_profile.contains("analytical")
}

/// Quality-first ordering shared by the medium and hard rules: larger score,
/// then analytical profile, then smallest delegate id.
fn quality_order(a: (&DelegateIdentityCard, f64), b: (&DelegateIdentityCard, f64)) -> Ordering {
    b.1.total_cmp(&a.1)
        .then_with(|| is_analytical(b.0).cmp(&is_analytical(a.0)))
        .then_with(|| a.0.delegate_id.cmp(&b.0.delegate_id))
}

pub fn route_ldp(pool: &DelegatePool, task: &TaskSpec) -> Result<RoutingDecision, RoutingError> {
    let skill = task.required_skill.as_str();
    let capable: Vec<(&DelegateIdentityCard, &CapabilityEntry)> = pool
        .entries
        .iter()
        .filter_map(|card| skill_entry(card, skill).map(|cap| (card, cap)))
        .collect();
    if capable.is_empty() {
        return Err(RoutingError::NoCapableDelegate(task.required_skill.clone()));
    }
    let (card, cap, rationale) = match task.difficulty {
        Difficulty::Easy => {
            let (card, cap) = capable
                .iter()
                .min_by(|a, b| {
                    a.0.cost_profile
                        .cmp(&b.0.cost_profile)
                        .then_with(|| a.1.latency_hint_ms_p50.cmp(&b.1.latency_hint_ms_p50))
                        .then_with(|| a.0.delegate_id.cmp(&b.0.delegate_id))
                })
                .copied()
                .expect("non-empty");
            let why = format!(
                "easy task: lowest cost_profile ({}) then latency_hint_ms_p50 ({} ms) for {skill}",
                card.cost_profile, cap.latency_hint_ms_p50
            );
            (card, cap, why)
        }
        Difficulty::Hard => {
            let (card, cap) = capable
                .iter()
                .min_by(|a, b| quality_order((a.0, a.1.quality_hint), (b.0, b.1.quality_hint)))
                .copied()
                .expect("non-empty");
            let why = format!(
                "hard task: highest quality_hint ({:.2}) for {skill}, reasoning_profile {}",
                cap.quality_hint, card.reasoning_profile
            );
            (card, cap, why)
        }
        Difficulty::Medium => {
            let score = |c: &DelegateIdentityCard, e: &CapabilityEntry| {
                e.quality_hint / c.cost_profile.rank() as f64
            };
            let (card, cap) = capable
                .iter()
                .min_by(|a, b| quality_order((a.0, score(a.0, a.1)), (b.0, score(b.0, b.1))))
                .copied()
                .expect("non-empty");
            let why = format!(
                "medium task: best quality_hint / cost rank ({:.2} / {}) for {skill}",
                cap.quality_hint, card.cost_profile
            );
            (card, cap, why)
        }
    };
    Ok(RoutingDecision {
        chosen: card.delegate_id.clone(),
        policy: RoutingPolicy::Ldp,
        expected_latency_ms: cap.latency_hint_ms_p50,
        rationale,
    })
}

pub fn route_a2a(pool: &DelegatePool, task: &TaskSpec) -> Result<RoutingDecision, RoutingError> {
    let skill = task.required_skill.as_str();
    let card = pool
        .entries
        .iter()
        .find(|c| c.capability_names().any(|n| n == skill))
        .ok_or_else(|| RoutingError::NoCapableDelegate(task.required_skill.clone()))?;
    Ok(RoutingDecision {
        chosen: card.delegate_id.clone(),
        policy: RoutingPolicy::A2a,
        expected_latency_ms: expected_latency(card, skill),
        rationale: format!("first registered delegate listing skill {skill}"),
    })
}

/// Uniform choice over the whole pool from a seeded stream. The n-th call
/// on a router built from the same seed always yields the same choice.
#[derive(Debug, Clone)]
pub struct RandomRouter {
    rng: ChaCha8Rng,
}

impl RandomRouter {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn route(
        &mut self,
        pool: &DelegatePool,
        task: &TaskSpec,
    ) -> Result<RoutingDecision, RoutingError> {
        if pool.is_empty() {
            return Err(RoutingError::EmptyPool);
        }
        let card = &pool.entries[self.rng.random_range(0..pool.len())];
        Ok(RoutingDecision {
            chosen: card.delegate_id.clone(),
            policy: RoutingPolicy::Random,
            expected_latency_ms: expected_latency(card, &task.required_skill),
            rationale: format!("uniform draw over {} delegates", pool.len()),
        })
    }
}

/// Single draw: the first decision of a [`RandomRouter`] seeded with `seed`.
pub fn route_random(
    pool: &DelegatePool,
    task: &TaskSpec,
    seed: u64,
) -> Result<RoutingDecision, RoutingError> {
    RandomRouter::new(seed).route(pool, task)
}

pub fn route(
    pool: &DelegatePool,
    task: &TaskSpec,
    policy: RoutingPolicy,
    seed: u64,
) -> Result<RoutingDecision, RoutingError> {
    match policy {
        RoutingPolicy::Ldp => route_ldp(pool, task),
        RoutingPolicy::A2a => route_a2a(pool, task),
        RoutingPolicy::Random => route_random(pool, task, seed),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JudgeScores {
    pub quality: f64,
    pub correctness: f64,
    pub completeness: f64,
}

/// `0.3 * quality + 0.4 * correctness + 0.3 * completeness`.
pub fn combine_judge_scores(scores: JudgeScores) -> Result<f64, RoutingError> {
    for (name, value) in [
        ("quality", scores.quality),
        ("correctness", scores.correctness),
        ("completeness", scores.completeness),
    ] {
        if !(1.0..=10.0).contains(&value) {
            return Err(RoutingError::ScoreOutOfRange { name, value });
        }
    }
    // Integer weights keep integer inputs exact: (6,8,7) -> 71/10.
    Ok((3.0 * scores.quality + 4.0 * scores.correctness + 3.0 * scores.completeness) / 10.0)
}
