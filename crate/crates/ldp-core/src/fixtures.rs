//! Bundled reference data: the sample identity card, the three-delegate
//! local pool, the routing task set, and the payload corpus.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::identity::{CapabilityEntry, CostLevel, DelegateIdentityCard};
use crate::payload::SemanticFrame;
use crate::routing::{DelegatePool, TaskSpec};

pub const REFERENCE_CARD_JSON: &str = include_str!("../data/reference_card.json");
pub const DEFAULT_POOL_JSON: &str = include_str!("../data/default_pool.json");
pub const RQ1_TASKS_JSON: &str = include_str!("../data/rq1_tasks.json");
pub const RQ2_CORPUS_JSON: &str = include_str!("../data/rq2_corpus.json");

pub const QWEN3_8B: &str = "qwen3:8b";
pub const QWEN_CODER_7B: &str = "qwen2.5-coder:7b";
pub const LLAMA_3B: &str = "llama3.2:3b";

pub fn reference_card() -> DelegateIdentityCard {
    serde_json::from_str(REFERENCE_CARD_JSON).expect("bundled card parses")
}

/// qwen3:8b, qwen2.5-coder:7b, llama3.2:3b in registration order.
pub fn default_pool() -> DelegatePool {
    let cards: Vec<DelegateIdentityCard> =
        serde_json::from_str(DEFAULT_POOL_JSON).expect("bundled pool parses");
    DelegatePool::new(cards).expect("bundled pool is valid")
}

/// 30 tasks, 10 per difficulty.
pub fn rq1_tasks() -> Vec<TaskSpec> {
    serde_json::from_str(RQ1_TASKS_JSON).expect("bundled tasks parse")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub name: String,
    pub text: String,
    pub frame: SemanticFrame,
}

/// The first entry is the sentiment-classification example.
pub fn rq2_corpus() -> Vec<CorpusEntry> {
    serde_json::from_str(RQ2_CORPUS_JSON).expect("bundled corpus parses")
}

pub fn sentiment_entry() -> CorpusEntry {
    rq2_corpus().remove(0)
}

/// The caller card used by the CLI when none is supplied.
pub fn default_caller_card() -> DelegateIdentityCard {
    DelegateIdentityCard {
        delegate_id: "orchestrator".into(),
        principal_id: "org:research-lab".into(),
        model_family: "router".into(),
        model_name: "ldp-router".into(),
        model_version: "1".into(),
        runtime_version: env!("CARGO_PKG_VERSION").into(),
        weights_fingerprint: None,
        endpoint_address: None,
        trust_domain: "research.internal".into(),
        public_key: None,
        jurisdiction: None,
        data_handling_policy: None,
        capabilities: vec![CapabilityEntry::new(
            "orchestration",
            0.7,
            100,
            CostLevel::Low,
        )],
        reasoning_profile: "fast-practical".into(),
        cost_profile: CostLevel::Low,
        context_window: 8192,
        modalities_supported: vec!["text".into()],
        languages_supported: vec!["en".into()],
        tokenizer_fingerprint: None,
    }
}

const WORDS: &[&str] = &[
    "qwen",
    "llama",
    "mistral",
    "gemma",
    "phi",
    "reasoning",
    "analysis",
    "code",
    "math",
    "vision",
    "summarize",
    "translate",
    "classify",
    "extract",
    "plan",
];

fn ident(rng: &mut impl Rng) -> String {
    let n = rng.random_range(1..=3);
    (0..n)
        .map(|_| WORDS[rng.random_range(0..WORDS.len())])
        .collect::<Vec<_>>()
        .join("-")
}

fn maybe<R: Rng>(rng: &mut R, value: impl FnOnce(&mut R) -> String) -> Option<String> {
    let v = value(rng);
    rng.random_bool(0.5).then_some(v)
}

fn cost(rng: &mut impl Rng) -> CostLevel {
    [CostLevel::Low, CostLevel::Medium, CostLevel::High][rng.random_range(0..3)]
}

/// A valid card drawn from `seed`. Quality hints have four decimals.
pub fn random_card(seed: u64) -> DelegateIdentityCard {
    let rng = &mut ChaCha8Rng::seed_from_u64(seed);
    let n_caps = rng.random_range(1..=5);
    let mut capabilities: Vec<CapabilityEntry> = Vec::new();
    while capabilities.len() < n_caps {
        let name = format!("{}.{}", ident(rng), capabilities.len());
        capabilities.push(CapabilityEntry {
            name,
            quality_hint: rng.random_range(0..=10_000u32) as f64 / 10_000.0,
            latency_hint_ms_p50: rng.random_range(1..=60_000),
            cost_hint: cost(rng),
        });
    }
    let list = |rng: &mut ChaCha8Rng, pool: &[&str]| -> Vec<String> {
        let n = rng.random_range(0..=pool.len());
        pool[..n].iter().map(|s| s.to_string()).collect()
    };
    DelegateIdentityCard {
        delegate_id: format!("{}-{}", ident(rng), rng.random_range(0..10_000)),
        principal_id: format!("org:{}", ident(rng)),
        model_family: ident(rng),
        model_name: ident(rng),
        model_version: format!(
            "{}b-{}",
            rng.random_range(1..100),
            rng.random_range(2020..2030)
        ),
        runtime_version: format!(
            "ollama-0.{}.{}",
            rng.random_range(0..10),
            rng.random_range(0..10)
        ),
        weights_fingerprint: maybe(rng, |rng| format!("sha256:{:016x}", rng.random::<u64>())),
        endpoint_address: maybe(rng, |rng| {
            format!(
                "10.0.0.{}:{}",
                rng.random_range(1..255),
                rng.random_range(1024..65535)
            )
        }),
        trust_domain: format!("{}.internal", ident(rng)),
        public_key: maybe(rng, |rng| format!("{:032x}", rng.random::<u128>())),
        jurisdiction: maybe(rng, |rng| {
            ["EU", "US", "APAC"][rng.random_range(0..3)].to_string()
        }),
        data_handling_policy: maybe(rng, |_| "no-retention".to_string()),
        capabilities,
        reasoning_profile: ["deep-analytical", "fast-practical", "precise-technical"]
            [rng.random_range(0..3)]
        .into(),
        cost_profile: cost(rng),
        context_window: rng.random_range(1..=1_000_000),
        modalities_supported: list(rng, &["text", "image", "audio"]),
        languages_supported: list(rng, &["en", "zh", "de", "fr"]),
        tokenizer_fingerprint: maybe(rng, |rng| format!("tok:{:08x}", rng.random::<u32>())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::identity::validate_card;

    #[test]
    fn bundled_data_loads() {
        assert_eq!(default_pool().len(), 3);
        assert_eq!(rq1_tasks().len(), 30);
        assert!(rq2_corpus().len() >= 4);
        assert!(validate_card(&default_caller_card()).is_valid());
    }

    #[test]
    fn random_cards_are_valid_and_seeded() {
        for seed in 0..200 {
            let card = random_card(seed);
            assert!(
                validate_card(&card).is_valid(),
                "{seed}: {}",
                validate_card(&card)
            );
            assert_eq!(random_card(seed), card);
        }
    }
}
