//! Trust domains, replay protection, the policy engine, and the attack
//! detectors compared against a bearer-token baseline.
//!
//! A [`TrustDomainPolicy`] names a security boundary: who is a member, which
//! other domains may call in, what each member may claim, and optional
//! jurisdiction and cost limits. Detectors are pure functions of a policy
//! except [`check_replay`], which consults a shared [`NonceStore`].

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::sync::{Arc, Mutex};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::fixtures;
use crate::identity::{CapabilityEntry, CostLevel, DelegateIdentityCard};
use crate::validation::ValidationReport;
use crate::wire::{
    sign_envelope, Clock, KeyMaterial, ManualClock, MessageEnvelope, MessageType, Nonce, SystemClock,
    TIMESTAMP_SKEW_MS,
};

pub const MECH_MEMBERSHIP: &str = "trust domain membership check";
pub const MECH_CAPABILITY: &str = "capability manifest validation";
pub const MECH_REPLAY: &str = "session nonce and timestamp verification";
pub const MECH_CROSS_DOMAIN: &str = "cross-domain policy enforcement";
pub const MECH_BEARER: &str = "bearer token revocation list";
/// Mechanism reported when every check passed.
pub const MECH_NONE: &str = "none";

/// Default replay window: twice the timestamp skew, so any envelope young
/// enough to pass the timestamp check is still remembered.
pub const DEFAULT_NONCE_WINDOW_SECS: u64 = 2 * TIMESTAMP_SKEW_MS / 1000;

#[derive(Debug, Error)]
pub enum TrustError {
    #[error("policy json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid policy: {0}")]
    InvalidPolicy(ValidationReport),
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrustDomainPolicy {
    pub domain: String,
    /// Membership is enforced only when this set is non-empty.
    #[serde(default)]
    pub members: BTreeSet<String>,
    #[serde(default)]
    pub allowed_peer_domains: BTreeSet<String>,
    #[serde(default)]
    pub capability_scopes: BTreeMap<String, BTreeSet<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jurisdiction_allowlist: Option<BTreeSet<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost_limit_tokens: Option<u64>,
}

impl TrustDomainPolicy {
    pub fn new(domain: impl Into<String>) -> Self {
        Self {
            domain: domain.into(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::new();
        if self.domain.trim().is_empty() {
            report.push("domain", "must be non-empty");
        }
        for (i, d) in self.allowed_peer_domains.iter().enumerate() {
            if d.trim().is_empty() {
                report.push(format!("allowed_peer_domains[{i}]"), "must be non-empty");
            }
        }
        if self.cost_limit_tokens == Some(0) {
            report.push("cost_limit_tokens", "must be positive when set");
        }
        report
    }

    pub fn from_json(text: &str) -> Result<Self, TrustError> {
        let policy: Self = serde_json::from_str(text)?;
        let report = policy.validate();
        if report.is_valid() {
            Ok(policy)
        } else {
            Err(TrustError::InvalidPolicy(report))
        }
    }

    pub fn enforces_membership(&self) -> bool {
        !self.members.is_empty()
    }

    fn admits_domain(&self, domain: &str) -> bool {
        domain == self.domain || self.allowed_peer_domains.contains(domain)
    }
}

pub type PolicySet = BTreeMap<String, TrustDomainPolicy>;

pub fn policy_set(policies: impl IntoIterator<Item = TrustDomainPolicy>) -> PolicySet {
    policies.into_iter().map(|p| (p.domain.clone(), p)).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionOutcome {
    pub detected: bool,
    pub mechanism: String,
    pub false_positive: bool,
    #[serde(default)]
    pub detail: String,
}

impl DetectionOutcome {
    pub fn pass(mechanism: &str, detail: impl Into<String>) -> Self {
        Self {
            detected: false,
            mechanism: mechanism.to_owned(),
            false_positive: false,
            detail: detail.into(),
        }
    }

    pub fn fire(mechanism: &str, detail: impl Into<String>) -> Self {
        Self {
            detected: true,
            mechanism: mechanism.to_owned(),
            false_positive: false,
            detail: detail.into(),
        }
    }

    /// Marks a detection of a benign action as a false positive.
    pub fn with_ground_truth(mut self, malicious: bool) -> Self {
        self.false_positive = self.detected && !malicious;
        self
    }
}

impl fmt::Display for DetectionOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.detected { "DETECTED" } else { "allowed" };
        write!(f, "{verdict} [{}]", self.mechanism)?;
        if !self.detail.is_empty() {
            write!(f, ": {}", self.detail)?;
        }
        Ok(())
    }
}

pub fn check_domain_join(policy: &TrustDomainPolicy, card: &DelegateIdentityCard) -> DetectionOutcome {
    if !policy.admits_domain(&card.trust_domain) {
        return DetectionOutcome::fire(
            MECH_MEMBERSHIP,
            format!("{:?} is outside {} and its peers", card.trust_domain, policy.domain),
        );
    }
    if policy.enforces_membership() && !policy.members.contains(&card.delegate_id) {
        return DetectionOutcome::fire(
            MECH_MEMBERSHIP,
            format!("{} is not a registered member of {}", card.delegate_id, policy.domain),
        );
    }
    DetectionOutcome::pass(MECH_MEMBERSHIP, format!("{} admitted to {}", card.delegate_id, policy.domain))
}

pub fn check_capability_claim(policy: &TrustDomainPolicy, delegate_id: &str, claimed: &[String]) -> DetectionOutcome {
    let Some(scope) = policy.capability_scopes.get(delegate_id) else {
        return DetectionOutcome::fire(MECH_CAPABILITY, format!("no manifest on file for {delegate_id}"));
    };
    let excess: Vec<&str> = claimed
        .iter()
        .filter(|c| !scope.contains(*c))
        .map(String::as_str)
        .collect();
    if excess.is_empty() {
        DetectionOutcome::pass(MECH_CAPABILITY, "all claims within manifest")
    } else {
        DetectionOutcome::fire(MECH_CAPABILITY, format!("claims beyond manifest: {}", excess.join(", ")))
    }
}

pub fn check_cross_domain(
    policy: &TrustDomainPolicy,
    caller_domain: &str,
    target_delegate: &str,
    target_domain: &str,
) -> DetectionOutcome {
    if caller_domain == target_domain || policy.allowed_peer_domains.contains(caller_domain) {
        DetectionOutcome::pass(MECH_CROSS_DOMAIN, format!("{caller_domain} may invoke {target_delegate}"))
    } else {
        DetectionOutcome::fire(
            MECH_CROSS_DOMAIN,
            format!("{target_delegate} in {target_domain} does not accept callers from {caller_domain}"),
        )
    }
}

/// Seen `(sender, nonce)` pairs inside a sliding window. Test-and-insert is
/// atomic, so concurrent presentations of one envelope pass exactly once.
pub struct NonceStore {
    window_ms: u64,
    clock: Arc<dyn Clock>,
    seen: Mutex<HashMap<(String, Nonce), u64>>,
}

impl NonceStore {
    /// `window_secs` is clamped to at least one second.
    pub fn new(window_secs: u64, clock: Arc<dyn Clock>) -> Self {
        Self {
            window_ms: window_secs.max(1) * 1000,
            clock,
            seen: Mutex::new(HashMap::new()),
        }
    }

    pub fn window_secs(&self) -> u64 {
        self.window_ms / 1000
    }

    pub fn now_ms(&self) -> u64 {
        self.clock.now_ms()
    }

    /// True on first sight within the window.
    pub fn record(&self, sender_id: &str, nonce: Nonce) -> bool {
        let now = self.clock.now_ms();
        let mut seen = self.seen.lock().expect("nonce store poisoned");
        let window = self.window_ms;
        seen.retain(|_, at| now.saturating_sub(*at) < window);
        match seen.entry((sender_id.to_owned(), nonce)) {
            std::collections::hash_map::Entry::Occupied(_) => false,
            std::collections::hash_map::Entry::Vacant(v) => {
                v.insert(now);
                true
            }
        }
    }

    pub fn len(&self) -> usize {
        self.seen.lock().expect("nonce store poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Default for NonceStore {
    fn default() -> Self {
        Self::new(DEFAULT_NONCE_WINDOW_SECS, Arc::new(SystemClock))
    }
}

impl fmt::Debug for NonceStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("NonceStore")
            .field("window_secs", &self.window_secs())
            .field("entries", &self.len())
            .finish()
    }
}

/// Stale or future timestamps are rejected without recording the nonce.
pub fn check_replay(store: &NonceStore, envelope: &MessageEnvelope) -> DetectionOutcome {
    let now = store.now_ms();
    let skew = now.abs_diff(envelope.timestamp_ms);
    if skew > TIMESTAMP_SKEW_MS {
        return DetectionOutcome::fire(
            MECH_REPLAY,
            format!("timestamp is {} s away from local clock", skew / 1000),
        );
    }
    if !store.record(&envelope.sender_id, envelope.nonce) {
        return DetectionOutcome::fire(MECH_REPLAY, format!("nonce {} already seen", envelope.nonce));
    }
    DetectionOutcome::pass(MECH_REPLAY, "fresh nonce")
}

pub fn a2a_bearer_check(token: &str, revocation_list: &BTreeSet<String>) -> DetectionOutcome {
    if revocation_list.contains(token) {
        DetectionOutcome::fire(MECH_BEARER, "token revoked")
    } else {
        DetectionOutcome::pass(MECH_BEARER, "token valid")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskDescriptor {
    pub delegate_id: String,
    pub capability: String,
    #[serde(default)]
    pub jurisdiction: Option<String>,
    pub token_estimate: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "reason", rename_all = "snake_case")]
pub enum DenyReason {
    CapabilityOutOfScope { delegate_id: String, capability: String },
    Jurisdiction { jurisdiction: Option<String> },
    CostLimit { estimate: u64, limit: u64 },
}

impl fmt::Display for DenyReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DenyReason::CapabilityOutOfScope { delegate_id, capability } => {
                write!(f, "capability {capability:?} is outside the scope of {delegate_id}")
            }
            DenyReason::Jurisdiction { jurisdiction: Some(j) } => write!(f, "jurisdiction {j:?} is not allowlisted"),
            DenyReason::Jurisdiction { jurisdiction: None } => f.write_str("task carries no jurisdiction"),
            DenyReason::CostLimit { estimate, limit } => {
                write!(f, "estimate of {estimate} tokens exceeds the {limit} token limit")
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "snake_case")]
pub enum PolicyDecision {
    Allow,
    Deny(DenyReason),
}

impl PolicyDecision {
    pub fn is_allow(&self) -> bool {
        matches!(self, PolicyDecision::Allow)
    }
}

/// Capability scoping applies once any scope is declared; after that a
/// delegate without an entry may do nothing.
pub fn evaluate_policy(policy: &TrustDomainPolicy, task: &TaskDescriptor) -> PolicyDecision {
    if !policy.capability_scopes.is_empty() {
        let in_scope = policy
            .capability_scopes
            .get(&task.delegate_id)
            .is_some_and(|s| s.contains(&task.capability));
        if !in_scope {
            return PolicyDecision::Deny(DenyReason::CapabilityOutOfScope {
                delegate_id: task.delegate_id.clone(),
                capability: task.capability.clone(),
            });
        }
    }
    if let Some(allow) = &policy.jurisdiction_allowlist {
        if !task.jurisdiction.as_ref().is_some_and(|j| allow.contains(j)) {
            return PolicyDecision::Deny(DenyReason::Jurisdiction {
                jurisdiction: task.jurisdiction.clone(),
            });
        }
    }
    if let Some(limit) = policy.cost_limit_tokens {
        if task.token_estimate > limit {
            return PolicyDecision::Deny(DenyReason::CostLimit {
                estimate: task.token_estimate,
                limit,
            });
        }
    }
    PolicyDecision::Allow
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AttackKind {
    UntrustedDomainJoin,
    CapabilityEscalation,
    ReplayAttack,
    CrossDomainAccess,
}

impl AttackKind {
    pub const ALL: [AttackKind; 4] = [
        AttackKind::UntrustedDomainJoin,
        AttackKind::CapabilityEscalation,
        AttackKind::ReplayAttack,
        AttackKind::CrossDomainAccess,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttackKind::UntrustedDomainJoin => "UntrustedDomainJoin",
            AttackKind::CapabilityEscalation => "CapabilityEscalation",
            AttackKind::ReplayAttack => "ReplayAttack",
            AttackKind::CrossDomainAccess => "CrossDomainAccess",
        }
    }

    /// The check expected to catch this kind.
    pub fn mechanism(self) -> &'static str {
        match self {
            AttackKind::UntrustedDomainJoin => MECH_MEMBERSHIP,
            AttackKind::CapabilityEscalation => MECH_CAPABILITY,
            AttackKind::ReplayAttack => MECH_REPLAY,
            AttackKind::CrossDomainAccess => MECH_CROSS_DOMAIN,
        }
    }
}

impl fmt::Display for AttackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// What the actor attempts: optionally join a domain, then invoke
/// `target_delegate` with an envelope claiming some capabilities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioAction {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub join_domain: Option<String>,
    pub target_delegate: String,
    pub target_domain: String,
    #[serde(default)]
    pub claimed_capabilities: Vec<String>,
    pub envelope: MessageEnvelope,
    /// Times the envelope was already delivered before this presentation.
    #[serde(default)]
    pub prior_presentations: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackScenario {
    pub id: String,
    pub kind: AttackKind,
    pub actor: DelegateIdentityCard,
    pub action: ScenarioAction,
    pub ground_truth_malicious: bool,
    pub bearer_token: String,
    /// Malicious but indistinguishable from legitimate traffic.
    #[serde(default)]
    pub insider: bool,
}

/// Runs membership, capability, replay and cross-domain checks in that order
/// and reports the first that fires.
///
/// Membership is judged against the joined domain, or the actor's own domain
/// when it has a policy in `policies`. A home domain without a loaded policy
/// is left to the cross-domain check.
pub fn evaluate_scenario(policies: &PolicySet, store: &NonceStore, scenario: &AttackScenario) -> DetectionOutcome {
    let malicious = scenario.ground_truth_malicious;
    let action = &scenario.action;
    let actor = &scenario.actor;
    let home_domain = action.join_domain.as_deref().unwrap_or(&actor.trust_domain);
    let home = policies.get(home_domain);

    match (home, &action.join_domain) {
        (Some(policy), _) => {
            let out = check_domain_join(policy, actor);
            if out.detected {
                return out.with_ground_truth(malicious);
            }
        }
        (None, Some(d)) => {
            return DetectionOutcome::fire(MECH_MEMBERSHIP, format!("no policy for domain {d}"))
                .with_ground_truth(malicious);
        }
        (None, None) => {}
    }

    if let (Some(policy), false) = (home, action.claimed_capabilities.is_empty()) {
        let out = check_capability_claim(policy, &actor.delegate_id, &action.claimed_capabilities);
        if out.detected {
            return out.with_ground_truth(malicious);
        }
    }

    for _ in 0..action.prior_presentations {
        store.record(&action.envelope.sender_id, action.envelope.nonce);
    }
    let out = check_replay(store, &action.envelope);
    if out.detected {
        return out.with_ground_truth(malicious);
    }

    let out = match policies.get(&action.target_domain) {
        Some(policy) => check_cross_domain(policy, &actor.trust_domain, &action.target_delegate, &action.target_domain),
        None => DetectionOutcome::fire(MECH_CROSS_DOMAIN, format!("no policy for target domain {}", action.target_domain)),
    };
    if out.detected {
        return out.with_ground_truth(malicious);
    }
    DetectionOutcome::pass(MECH_NONE, "all checks passed")
}

pub const RESEARCH_DOMAIN: &str = "research.internal";
pub const FINANCE_DOMAIN: &str = "finance.restricted";
pub const PARTNER_DOMAIN: &str = "partner.lab";

pub const MALICIOUS_PER_KIND: usize = 25;
pub const BENIGN_PER_KIND: usize = 5;
pub const REVOKED_TOKENS: usize = 6;
/// Clock reading shared by every generated envelope and the replay store.
pub const SCENARIO_EPOCH_MS: u64 = 1_750_000_000_000;

const FORBIDDEN_CAPABILITIES: &[&str] = &[
    "code-execution",
    "file-system-write",
    "network-admin",
    "payment-authorization",
    "credential-access",
];
const EXTERNAL_DOMAINS: &[&str] = &["external.unknown", "rogue.example", "shadow.net", "untrusted.io"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMix {
    pub policies: PolicySet,
    pub scenarios: Vec<AttackScenario>,
    pub revoked_tokens: BTreeSet<String>,
}

impl ScenarioMix {
    pub fn malicious(&self) -> usize {
        self.scenarios.iter().filter(|s| s.ground_truth_malicious).count()
    }

    pub fn benign(&self) -> usize {
        self.scenarios.len() - self.malicious()
    }
}

fn extra_card(id: &str, domain: &str, capability: &str) -> DelegateIdentityCard {
    let mut card = fixtures::default_caller_card();
    card.delegate_id = id.into();
    card.trust_domain = domain.into();
    card.capabilities = vec![CapabilityEntry::new(capability, 0.7, 800, CostLevel::Low)];
    card
}

/// Research members (the local pool plus two helpers), a closed finance
/// domain, and a partner lab that research may call and vice versa.
pub fn reference_policies() -> PolicySet {
    let mut research = TrustDomainPolicy::new(RESEARCH_DOMAIN);
    research.allowed_peer_domains.insert(PARTNER_DOMAIN.into());
    for card in research_members() {
        research.members.insert(card.delegate_id.clone());
        research
            .capability_scopes
            .insert(card.delegate_id.clone(), card.capability_names().map(str::to_owned).collect());
    }

    let mut finance = TrustDomainPolicy::new(FINANCE_DOMAIN);
    finance.members.insert("ledger-analyst".into());
    finance
        .capability_scopes
        .insert("ledger-analyst".into(), ["analysis".to_string()].into());

    let mut partner = TrustDomainPolicy::new(PARTNER_DOMAIN);
    partner.allowed_peer_domains.insert(RESEARCH_DOMAIN.into());
    partner.members.insert("partner-summarizer".into());
    partner
        .capability_scopes
        .insert("partner-summarizer".into(), ["summarization".to_string()].into());

    policy_set([research, finance, partner])
}

fn research_members() -> Vec<DelegateIdentityCard> {
    let mut cards = fixtures::default_pool().entries().to_vec();
    cards.push(fixtures::default_caller_card());
    cards.push(extra_card("intake-agent", RESEARCH_DOMAIN, "classification"));
    cards
}

struct Builder {
    rng: ChaCha8Rng,
    key: KeyMaterial,
    members: Vec<DelegateIdentityCard>,
    partner: DelegateIdentityCard,
    out: Vec<AttackScenario>,
}

impl Builder {
    fn member(&mut self) -> DelegateIdentityCard {
        self.members[self.rng.random_range(0..self.members.len())].clone()
    }

    fn envelope(&mut self, actor: &DelegateIdentityCard, message_type: MessageType, timestamp_ms: u64) -> MessageEnvelope {
        let mut nonce = [0u8; 16];
        self.rng.fill(&mut nonce);
        let env = MessageEnvelope::new(
            message_type,
            actor.delegate_id.clone(),
            None,
            Nonce(nonce),
            timestamp_ms,
            json!({"trust_domain": actor.trust_domain}),
        );
        sign_envelope(env, &self.key).expect("scenario key signs")
    }

    fn push(&mut self, kind: AttackKind, actor: DelegateIdentityCard, action: ScenarioAction, malicious: bool, insider: bool) {
        let id = format!(
            "{}-{}-{:03}",
            kind.as_str(),
            if malicious { "attack" } else { "benign" },
            self.out.iter().filter(|s| s.kind == kind && s.ground_truth_malicious == malicious).count()
        );
        let bearer_token = format!("bearer-{:016x}", self.rng.random::<u64>());
        self.out.push(AttackScenario {
            id,
            kind,
            actor,
            action,
            ground_truth_malicious: malicious,
            bearer_token,
            insider,
        });
    }

    fn in_scope(&mut self, actor: &DelegateIdentityCard) -> Vec<String> {
        let names: Vec<String> = actor.capability_names().map(str::to_owned).collect();
        vec![names[self.rng.random_range(0..names.len())].clone()]
    }

    fn same_domain_target(&mut self, actor: &DelegateIdentityCard) -> String {
        loop {
            let t = self.member();
            if t.delegate_id != actor.delegate_id {
                return t.delegate_id;
            }
        }
    }

    fn invoke(&mut self, actor: &DelegateIdentityCard, target: String, domain: &str, claimed: Vec<String>, ts: u64, prior: u32) -> ScenarioAction {
        ScenarioAction {
            join_domain: None,
            target_delegate: target,
            target_domain: domain.into(),
            claimed_capabilities: claimed,
            envelope: self.envelope(actor, MessageType::TaskSubmit, ts),
            prior_presentations: prior,
        }
    }

    fn join(&mut self, actor: &DelegateIdentityCard, domain: &str) -> ScenarioAction {
        let target = if domain == RESEARCH_DOMAIN { "orchestrator" } else { "partner-summarizer" };
        ScenarioAction {
            join_domain: Some(domain.into()),
            target_delegate: target.into(),
            target_domain: domain.into(),
            claimed_capabilities: Vec::new(),
            envelope: self.envelope(actor, MessageType::Hello, SCENARIO_EPOCH_MS),
            prior_presentations: 0,
        }
    }

    fn domain_join(&mut self, include_insiders: bool) {
        let kind = AttackKind::UntrustedDomainJoin;
        for i in 0..MALICIOUS_PER_KIND - 1 {
            let actor = if i % 2 == 0 {
                let d = EXTERNAL_DOMAINS[self.rng.random_range(0..EXTERNAL_DOMAINS.len())];
                extra_card(&format!("intruder-{i}"), d, "reasoning")
            } else {
                // Claims the right domain but was never registered.
                extra_card(&format!("impostor-{i}"), RESEARCH_DOMAIN, "reasoning")
            };
            let action = self.join(&actor, RESEARCH_DOMAIN);
            self.push(kind, actor, action, true, false);
        }
        if include_insiders {
            let actor = self.member();
            let action = self.join(&actor, RESEARCH_DOMAIN);
            self.push(kind, actor, action, true, true);
        }
        for i in 0..BENIGN_PER_KIND {
            let (actor, domain) = if i == 0 {
                (self.partner.clone(), PARTNER_DOMAIN)
            } else {
                (self.member(), RESEARCH_DOMAIN)
            };
            let action = self.join(&actor, domain);
            self.push(kind, actor, action, false, false);
        }
    }

    fn escalation(&mut self, include_insiders: bool) {
        let kind = AttackKind::CapabilityEscalation;
        for _ in 0..MALICIOUS_PER_KIND - 1 {
            let actor = self.member();
            let mut claimed = self.in_scope(&actor);
            claimed.push(FORBIDDEN_CAPABILITIES[self.rng.random_range(0..FORBIDDEN_CAPABILITIES.len())].into());
            let target = self.same_domain_target(&actor);
            let action = self.invoke(&actor, target, RESEARCH_DOMAIN, claimed, SCENARIO_EPOCH_MS, 0);
            self.push(kind, actor, action, true, false);
        }
        if include_insiders {
            let actor = self.member();
            let claimed = self.in_scope(&actor);
            let target = self.same_domain_target(&actor);
            let action = self.invoke(&actor, target, RESEARCH_DOMAIN, claimed, SCENARIO_EPOCH_MS, 0);
            self.push(kind, actor, action, true, true);
        }
        for _ in 0..BENIGN_PER_KIND {
            let actor = self.member();
            let claimed = self.in_scope(&actor);
            let target = self.same_domain_target(&actor);
            let action = self.invoke(&actor, target, RESEARCH_DOMAIN, claimed, SCENARIO_EPOCH_MS, 0);
            self.push(kind, actor, action, false, false);
        }
    }

    fn replay(&mut self, include_insiders: bool) {
        let kind = AttackKind::ReplayAttack;
        let ten_minutes = 600_000;
        for i in 0..MALICIOUS_PER_KIND - 1 {
            let actor = self.member();
            let claimed = self.in_scope(&actor);
            let target = self.same_domain_target(&actor);
            let (ts, prior) = match i % 3 {
                0 | 1 => (SCENARIO_EPOCH_MS, 1),
                _ => (SCENARIO_EPOCH_MS - ten_minutes, 0),
            };
            let action = self.invoke(&actor, target, RESEARCH_DOMAIN, claimed, ts, prior);
            self.push(kind, actor, action, true, false);
        }
        if include_insiders {
            let actor = self.member();
            let claimed = self.in_scope(&actor);
            let target = self.same_domain_target(&actor);
            let action = self.invoke(&actor, target, RESEARCH_DOMAIN, claimed, SCENARIO_EPOCH_MS, 0);
            self.push(kind, actor, action, true, true);
        }
        for i in 0..BENIGN_PER_KIND {
            let actor = self.member();
            let claimed = self.in_scope(&actor);
            let target = self.same_domain_target(&actor);
            // Benign clocks drift, but within tolerance.
            let ts = SCENARIO_EPOCH_MS - 60_000 * i as u64;
            let action = self.invoke(&actor, target, RESEARCH_DOMAIN, claimed, ts, 0);
            self.push(kind, actor, action, false, false);
        }
    }

    fn cross_domain(&mut self, include_insiders: bool) {
        let kind = AttackKind::CrossDomainAccess;
        for i in 0..MALICIOUS_PER_KIND - 1 {
            let actor = if i % 4 == 3 { self.partner.clone() } else { self.member() };
            let claimed = self.in_scope(&actor);
            let action = self.invoke(&actor, "ledger-analyst".into(), FINANCE_DOMAIN, claimed, SCENARIO_EPOCH_MS, 0);
            self.push(kind, actor, action, true, false);
        }
        if include_insiders {
            let actor = self.member();
            let claimed = self.in_scope(&actor);
            let target = self.same_domain_target(&actor);
            let action = self.invoke(&actor, target, RESEARCH_DOMAIN, claimed, SCENARIO_EPOCH_MS, 0);
            self.push(kind, actor, action, true, true);
        }
        for i in 0..BENIGN_PER_KIND {
            let (actor, target, domain) = if i % 2 == 0 {
                (self.member(), "partner-summarizer".to_string(), PARTNER_DOMAIN)
            } else {
                (self.partner.clone(), fixtures::QWEN3_8B.to_string(), RESEARCH_DOMAIN)
            };
            let claimed = self.in_scope(&actor);
            let action = self.invoke(&actor, target, domain, claimed, SCENARIO_EPOCH_MS, 0);
            self.push(kind, actor, action, false, false);
        }
    }
}

/// The seeded scenario mix: per attack kind, 24 detectable attacks, one
/// insider attack (when `include_insiders`), and 5 benign controls. Six
/// detectable attacks carry revoked bearer tokens.
pub fn generate_scenario_mix(seed: u64, include_insiders: bool) -> ScenarioMix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut key_seed = [0u8; 32];
    rng.fill(&mut key_seed);
    let mut b = Builder {
        rng,
        key: KeyMaterial::from_seed(key_seed),
        members: research_members(),
        partner: extra_card("partner-summarizer", PARTNER_DOMAIN, "summarization"),
        out: Vec::new(),
    };
    b.domain_join(include_insiders);
    b.escalation(include_insiders);
    b.replay(include_insiders);
    b.cross_domain(include_insiders);

    let Builder { mut rng, mut out, .. } = b;
    let mut candidates: Vec<usize> = (0..out.len())
        .filter(|&i| out[i].ground_truth_malicious && !out[i].insider)
        .collect();
    candidates.shuffle(&mut rng);
    let revoked_tokens = candidates[..REVOKED_TOKENS]
        .iter()
        .map(|&i| out[i].bearer_token.clone())
        .collect();
    out.shuffle(&mut rng);
    ScenarioMix {
        policies: reference_policies(),
        scenarios: out,
        revoked_tokens,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioResult {
    pub id: String,
    pub kind: AttackKind,
    pub malicious: bool,
    pub insider: bool,
    pub ldp: DetectionOutcome,
    pub bearer: DetectionOutcome,
}

/// Evaluates every scenario in order against one shared replay store.
pub fn evaluate_mix(mix: &ScenarioMix) -> Vec<ScenarioResult> {
    let store = NonceStore::new(DEFAULT_NONCE_WINDOW_SECS, Arc::new(ManualClock::new(SCENARIO_EPOCH_MS)));
    mix.scenarios
        .iter()
        .map(|s| ScenarioResult {
            id: s.id.clone(),
            kind: s.kind,
            malicious: s.ground_truth_malicious,
            insider: s.insider,
            ldp: evaluate_scenario(&mix.policies, &store, s),
            bearer: a2a_bearer_check(&s.bearer_token, &mix.revoked_tokens).with_ground_truth(s.ground_truth_malicious),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::wire::Signer;
    use crate::wire::NonceSource;

    fn research() -> TrustDomainPolicy {
        reference_policies().remove(RESEARCH_DOMAIN).unwrap()
    }

    fn strs(xs: &[&str]) -> Vec<String> {
        xs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn join_examples() {
        let mut open = TrustDomainPolicy::new(RESEARCH_DOMAIN);
        assert!(!check_domain_join(&open, &fixtures::reference_card()).detected);

        let mut outsider = fixtures::reference_card();
        outsider.trust_domain = "external.unknown".into();
        let out = check_domain_join(&open, &outsider);
        assert!(out.detected);
        assert_eq!(out.mechanism, MECH_MEMBERSHIP);

        open.allowed_peer_domains.insert("external.unknown".into());
        assert!(!check_domain_join(&open, &outsider).detected);

        let enforced = research();
        let mut stranger = fixtures::reference_card();
        stranger.delegate_id = "stranger".into();
        assert!(check_domain_join(&enforced, &stranger).detected);
    }

    #[test]
    fn capability_examples() {
        let mut p = TrustDomainPolicy::new("d");
        p.capability_scopes.insert("a".into(), ["reasoning".to_string(), "analysis".to_string()].into());
        p.capability_scopes.insert("b".into(), ["classification".to_string()].into());
        assert!(!check_capability_claim(&p, "a", &strs(&["reasoning"])).detected);
        let out = check_capability_claim(&p, "b", &strs(&["classification", "code-execution"]));
        assert!(out.detected);
        assert!(out.detail.contains("code-execution"));
        assert!(check_capability_claim(&p, "ghost", &strs(&["anything"])).detected);
    }

    fn signed(clock: Arc<dyn Clock>) -> Signer {
        Signer::new("caller", KeyMaterial::from_seed([3; 32]), NonceSource::seeded(9), clock)
    }

    #[test]
    fn replay_examples() {
        let clock = Arc::new(ManualClock::new(SCENARIO_EPOCH_MS));
        let store = NonceStore::new(DEFAULT_NONCE_WINDOW_SECS, clock.clone());
        let signer = signed(clock.clone());
        let env = signer.envelope(MessageType::TaskSubmit, Some("s".into()), json!({})).unwrap();
        assert!(!check_replay(&store, &env).detected);
        assert_eq!(store.len(), 1);
        let again = check_replay(&store, &env);
        assert!(again.detected);
        assert_eq!(again.mechanism, MECH_REPLAY);

        let mut stale = signer.envelope(MessageType::TaskSubmit, None, json!({})).unwrap();
        stale.timestamp_ms -= 600_000;
        let out = check_replay(&store, &stale);
        assert!(out.detected && out.detail.contains("timestamp"));
        assert_eq!(store.len(), 1, "stale envelopes are not recorded");
    }

    #[test]
    fn nonce_window_expires() {
        let clock = Arc::new(ManualClock::new(0));
        let store = NonceStore::new(10, clock.clone());
        assert!(store.record("a", Nonce([1; 16])));
        assert!(!store.record("a", Nonce([1; 16])));
        assert!(store.record("b", Nonce([1; 16])), "keyed by sender");
        clock.advance(10_000);
        assert!(store.record("a", Nonce([1; 16])));
    }

    #[test]
    fn concurrent_replay_passes_once() {
        let clock: Arc<dyn Clock> = Arc::new(ManualClock::new(SCENARIO_EPOCH_MS));
        let store = Arc::new(NonceStore::new(60, clock.clone()));
        let env = signed(clock).envelope(MessageType::TaskSubmit, None, json!({})).unwrap();
        let passes: usize = std::thread::scope(|s| {
            let handles: Vec<_> = (0..16)
                .map(|_| s.spawn(|| !check_replay(&store, &env).detected as usize))
                .collect();
            handles.into_iter().map(|h| h.join().unwrap()).sum()
        });
        assert_eq!(passes, 1);
    }

    #[test]
    fn cross_domain_examples() {
        let a = TrustDomainPolicy::new("A");
        assert!(!check_cross_domain(&a, "A", "x", "A").detected);
        let mut b = TrustDomainPolicy::new("B");
        let out = check_cross_domain(&b, "A", "y", "B");
        assert!(out.detected);
        assert_eq!(out.mechanism, MECH_CROSS_DOMAIN);
        b.allowed_peer_domains.insert("A".into());
        assert!(!check_cross_domain(&b, "A", "y", "B").detected);
    }

    #[test]
    fn policy_examples() {
        let task = |cap: &str, j: Option<&str>, est| TaskDescriptor {
            delegate_id: "d".into(),
            capability: cap.into(),
            jurisdiction: j.map(str::to_owned),
            token_estimate: est,
        };
        let mut p = TrustDomainPolicy::new("x");
        assert_eq!(evaluate_policy(&p, &task("reasoning", None, 10)), PolicyDecision::Allow);

        p.cost_limit_tokens = Some(1000);
        assert_eq!(
            evaluate_policy(&p, &task("reasoning", None, 5000)),
            PolicyDecision::Deny(DenyReason::CostLimit { estimate: 5000, limit: 1000 })
        );

        p.cost_limit_tokens = None;
        p.jurisdiction_allowlist = Some(["US".to_string()].into());
        assert!(matches!(
            evaluate_policy(&p, &task("reasoning", Some("EU"), 1)),
            PolicyDecision::Deny(DenyReason::Jurisdiction { .. })
        ));
        assert!(evaluate_policy(&p, &task("reasoning", Some("US"), 1)).is_allow());

        p.capability_scopes.insert("d".into(), ["reasoning".to_string()].into());
        assert!(evaluate_policy(&p, &task("reasoning", Some("US"), 1)).is_allow());
        assert!(matches!(
            evaluate_policy(&p, &task("code", Some("US"), 1)),
            PolicyDecision::Deny(DenyReason::CapabilityOutOfScope { .. })
        ));
    }

    #[test]
    fn policy_json_field_names() {
        let text = r#"{"domain":"research.internal","members":["a"],"allowed_peer_domains":["partner.lab"],
            "capability_scopes":{"a":["reasoning"]},"jurisdiction_allowlist":["EU"],"cost_limit_tokens":4000}"#;
        let p = TrustDomainPolicy::from_json(text).unwrap();
        assert_eq!(p.cost_limit_tokens, Some(4000));
        assert!(p.members.contains("a"));
        assert!(matches!(TrustDomainPolicy::from_json(r#"{"domain":""}"#), Err(TrustError::InvalidPolicy(_))));
        assert!(TrustDomainPolicy::from_json(r#"{"domain":"x","bogus":1}"#).is_err());
    }

    #[test]
    fn bearer_examples() {
        let revoked: BTreeSet<String> = ["t1".to_string()].into();
        assert!(a2a_bearer_check("t1", &revoked).detected);
        assert!(!a2a_bearer_check("t2", &revoked).detected);
    }

    #[test]
    fn full_mix_counts() {
        let mix = generate_scenario_mix(42, true);
        assert_eq!(mix.malicious(), 100);
        assert_eq!(mix.benign(), 20);
        let results = evaluate_mix(&mix);
        let ldp = results.iter().filter(|r| r.malicious && r.ldp.detected).count();
        let fp = results.iter().filter(|r| r.ldp.false_positive).count();
        let bearer = results.iter().filter(|r| r.malicious && r.bearer.detected).count();
        assert_eq!((ldp, fp, bearer), (96, 0, 6));
        assert!(results.iter().all(|r| !r.bearer.false_positive));
    }

    #[test]
    fn insiders_are_the_only_misses() {
        let results = evaluate_mix(&generate_scenario_mix(42, true));
        for r in &results {
            if r.malicious && !r.insider {
                assert!(r.ldp.detected, "{} missed", r.id);
            }
            if r.insider {
                assert!(!r.ldp.detected, "{} should be invisible", r.id);
            }
        }
        let mix = generate_scenario_mix(42, false);
        let results = evaluate_mix(&mix);
        assert_eq!(mix.malicious(), 96);
        assert_eq!(results.iter().filter(|r| r.ldp.detected).count(), 96);
    }

    #[test]
    fn each_kind_caught_by_its_own_mechanism() {
        for seed in [1, 42, 1234] {
            for r in evaluate_mix(&generate_scenario_mix(seed, true)) {
                if r.ldp.detected {
                    assert_eq!(r.ldp.mechanism, r.kind.mechanism(), "{}", r.id);
                }
            }
        }
    }

    #[test]
    fn valid_tokens_pass_every_kind() {
        let mix = generate_scenario_mix(42, true);
        for kind in AttackKind::ALL {
            assert!(mix
                .scenarios
                .iter()
                .any(|s| s.kind == kind && s.ground_truth_malicious && !a2a_bearer_check(&s.bearer_token, &mix.revoked_tokens).detected));
        }
    }

    #[test]
    fn mix_is_seeded() {
        assert_eq!(generate_scenario_mix(42, true), generate_scenario_mix(42, true));
        assert_ne!(generate_scenario_mix(42, true).revoked_tokens, generate_scenario_mix(43, true).revoked_tokens);
    }

    #[test]
    fn scenario_json_round_trip() {
        let mix = generate_scenario_mix(7, true);
        let text = serde_json::to_string(&mix.scenarios[0]).unwrap();
        let back: AttackScenario = serde_json::from_str(&text).unwrap();
        assert_eq!(back, mix.scenarios[0]);
    }
}
