//! Delegate side of the protocol: deterministic mock delegates, scripted
//! failures with fallback, an optional HTTP completion backend, and a server
//! that hosts one or more delegates behind a transport.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::identity::{validate_card, DelegateIdentityCard};
use crate::payload::{decode_frame, estimate_str, fallback_next, ModeSet, PayloadMode};
use crate::provenance::ProvenanceRecord;
use crate::routing::{TaskDomain, WILDCARD_SKILL};
use crate::session::{
    card_key, check_signature, parse_body, to_body, AcceptBody, ErrorBody, FallbackNoticeBody,
    HelloBody, ManifestBody, Round, SessionConfig, SessionContext, SessionError, SessionMachine,
    TaskResultBody, TaskSubmitBody,
};
use crate::trust::{
    check_cross_domain, check_domain_join, check_replay, evaluate_policy, NonceStore, PolicyDecision,
    TaskDescriptor, TrustDomainPolicy, DEFAULT_NONCE_WINDOW_SECS,
};
use crate::wire::{
    Clock, KeyMaterial, MessageEnvelope, MessageType, NonceSource, Signer, SystemClock, Transport,
    TransportError,
};

pub const BACKEND_URL_ENV: &str = "LDP_BACKEND_URL";

/// Quality lost per fallback step, fitted so the default failure mix
/// averages 0.16.
pub const STEP_DEGRADATION: f64 = 0.16 / 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FailureType {
    SchemaMismatch,
    CodecIncompatibility,
    VersionMismatch,
    TimeoutDegradation,
}

impl FailureType {
    pub const ALL: [FailureType; 4] = [
        FailureType::SchemaMismatch,
        FailureType::CodecIncompatibility,
        FailureType::VersionMismatch,
        FailureType::TimeoutDegradation,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FailureType::SchemaMismatch => "SchemaMismatch",
            FailureType::CodecIncompatibility => "CodecIncompatibility",
            FailureType::VersionMismatch => "VersionMismatch",
            FailureType::TimeoutDegradation => "TimeoutDegradation",
        }
    }

    /// Whether the failure still bites at `mode` for a task that started at
    /// `start`. Schema problems hit frames, codec problems hit embeddings,
    /// a version mismatch breaks every structured mode, and a timeout only
    /// affects the mode that timed out.
    pub fn affects(self, mode: PayloadMode, start: PayloadMode) -> bool {
        match self {
            FailureType::SchemaMismatch => mode == PayloadMode::SemanticFrame,
            FailureType::CodecIncompatibility => mode == PayloadMode::EmbeddingHints,
            FailureType::VersionMismatch => mode > PayloadMode::Text,
            FailureType::TimeoutDegradation => mode == start,
        }
    }

    /// Recovery cost of one fallback step.
    pub fn step_latency_ms(self) -> u64 {
        match self {
            FailureType::SchemaMismatch => 50,
            FailureType::CodecIncompatibility => 80,
            FailureType::VersionMismatch => 60,
            FailureType::TimeoutDegradation => 140,
        }
    }

    /// Mode a task of this failure class starts in for the default mix.
    pub fn default_start_mode(self) -> PayloadMode {
        match self {
            FailureType::SchemaMismatch => PayloadMode::SemanticFrame,
            FailureType::CodecIncompatibility => PayloadMode::EmbeddingHints,
            FailureType::VersionMismatch => PayloadMode::SemanticGraphs,
            FailureType::TimeoutDegradation => PayloadMode::EmbeddingHints,
        }
    }

    /// Chance a protocol without fallback still completes.
    pub fn a2a_success_probability(self) -> f64 {
        match self {
            FailureType::SchemaMismatch => 0.33,
            FailureType::VersionMismatch => 0.5,
            FailureType::CodecIncompatibility | FailureType::TimeoutDegradation => 0.0,
        }
    }
}

impl fmt::Display for FailureType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for FailureType {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|f| f.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown failure type {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FallbackStep {
    pub from: PayloadMode,
    pub to: PayloadMode,
    pub recovery_ms: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("{failure} is unrecoverable at mode {mode}")]
pub struct TerminalFailure {
    pub failure: FailureType,
    pub mode: PayloadMode,
}

/// Walks down the mode chain until `failure` no longer applies.
pub fn plan_fallback(failure: FailureType, start: PayloadMode) -> Result<Vec<FallbackStep>, TerminalFailure> {
    let mut steps = Vec::new();
    let mut mode = start;
    while failure.affects(mode, start) {
        let next = fallback_next(mode).ok_or(TerminalFailure { failure, mode })?;
        steps.push(FallbackStep {
            from: mode,
            to: next,
            recovery_ms: failure.step_latency_ms(),
        });
        mode = next;
    }
    Ok(steps)
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("backend timed out after {timeout_ms} ms")]
    Timeout { timeout_ms: u64 },
    #[error("backend returned status {0}")]
    Status(u16),
    #[error("backend transport: {0}")]
    Transport(String),
    #[error("backend response: {0}")]
    BadResponse(String),
}

impl BackendError {
    pub fn failure_type(&self) -> Option<FailureType> {
        matches!(self, BackendError::Timeout { .. }).then_some(FailureType::TimeoutDegradation)
    }
}

/// Generic completion endpoint: POST `{"model", "prompt"}`, read `response`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HttpBackend {
    pub url: String,
    pub model: String,
    pub timeout_ms: u64,
}

#[cfg(feature = "net")]
pub fn http_backend_invoke(endpoint: &str, model: &str, prompt: &str, timeout_ms: u64) -> Result<String, BackendError> {
    use std::time::Duration;

    let agent: ureq::Agent = ureq::Agent::config_builder()
        .timeout_global(Some(Duration::from_millis(timeout_ms)))
        .http_status_as_error(false)
        .build()
        .into();
    let body = serde_json::json!({ "model": model, "prompt": prompt, "stream": false }).to_string();
    let map_err = |e: ureq::Error| match e {
        ureq::Error::Timeout(_) => BackendError::Timeout { timeout_ms },
        ureq::Error::Io(io) if matches!(io.kind(), std::io::ErrorKind::TimedOut | std::io::ErrorKind::WouldBlock) => {
            BackendError::Timeout { timeout_ms }
        }
        other => BackendError::Transport(other.to_string()),
    };
    let mut resp = agent
        .post(endpoint)
        .header("content-type", "application/json")
        .send(body)
        .map_err(map_err)?;
    let status = resp.status().as_u16();
    if !(200..300).contains(&status) {
        return Err(BackendError::Status(status));
    }
    let text = resp.body_mut().read_to_string().map_err(map_err)?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| BackendError::BadResponse(e.to_string()))?;
    value
        .get("response")
        .and_then(|v| v.as_str())
        .map(str::to_owned)
        .ok_or_else(|| BackendError::BadResponse("missing string field `response`".into()))
}

#[cfg(feature = "net")]
impl HttpBackend {
    pub fn invoke(&self, prompt: &str) -> Result<String, BackendError> {
        http_backend_invoke(&self.url, &self.model, prompt, self.timeout_ms)
    }
}

#[cfg(not(feature = "net"))]
impl HttpBackend {
    pub fn invoke(&self, _prompt: &str) -> Result<String, BackendError> {
        Err(BackendError::Transport("built without network support".into()))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Backend {
    #[default]
    Mock,
    Http(HttpBackend),
}

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("expected TASK_SUBMIT, got {0}")]
    WrongType(MessageType),
    #[error("bad task body: {0}")]
    Body(String),
    #[error("payload mode {requested} is not usable in a {session} session")]
    Mode { requested: PayloadMode, session: PayloadMode },
    #[error("delegate does not offer skill {0:?}")]
    UnsupportedSkill(String),
    #[error(transparent)]
    Terminal(#[from] TerminalFailure),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("signing: {0}")]
    Signing(String),
}

impl TaskError {
    pub fn code(&self) -> &'static str {
        match self {
            TaskError::Terminal(_) => "task_failed",
            TaskError::Backend(BackendError::Timeout { .. }) => "timeout_degradation",
            TaskError::Backend(_) => "backend_error",
            TaskError::UnsupportedSkill(_) => "unsupported_skill",
            _ => "bad_request",
        }
    }
}

/// Output length used when a domain has no entry.
pub const DEFAULT_OUTPUT_TOKENS: u64 = 150;

fn default_lengths() -> BTreeMap<TaskDomain, u64> {
    BTreeMap::from([
        (TaskDomain::Classification, 40),
        (TaskDomain::Extraction, 60),
        (TaskDomain::Reasoning, 220),
        (TaskDomain::Analysis, 260),
        (TaskDomain::Coding, 300),
        (TaskDomain::Math, 180),
    ])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DelegateProfile {
    pub card: DelegateIdentityCard,
    pub modes: ModeSet,
    pub canned_output_length_tokens: BTreeMap<TaskDomain, u64>,
    #[serde(default)]
    pub failure_script: VecDeque<FailureType>,
    #[serde(default)]
    pub backend: Backend,
}

impl DelegateProfile {
    /// Mock profile speaking text and semantic frames.
    pub fn from_card(card: DelegateIdentityCard) -> Self {
        Self {
            card,
            modes: ModeSet::encodable(),
            canned_output_length_tokens: default_lengths(),
            failure_script: VecDeque::new(),
            backend: Backend::Mock,
        }
    }

    pub fn with_modes(mut self, modes: ModeSet) -> Self {
        self.modes = modes;
        self
    }

    pub fn with_failures(mut self, script: impl IntoIterator<Item = FailureType>) -> Self {
        self.failure_script = script.into_iter().collect();
        self
    }

    pub fn with_backend(mut self, backend: Backend) -> Self {
        self.backend = backend;
        self
    }

    pub fn delegate_id(&self) -> &str {
        &self.card.delegate_id
    }

    /// The card's latency hint for `skill`.
    pub fn simulated_latency_ms(&self, skill: &str) -> Option<u64> {
        self.skill_entry(skill).map(|c| c.latency_hint_ms_p50)
    }

    fn skill_entry(&self, skill: &str) -> Option<&crate::identity::CapabilityEntry> {
        self.card.capability(skill).or_else(|| self.card.capability(WILDCARD_SKILL))
    }

    pub fn output_tokens(&self, domain: Option<TaskDomain>) -> u64 {
        domain
            .and_then(|d| self.canned_output_length_tokens.get(&d).copied())
            .unwrap_or(DEFAULT_OUTPUT_TOKENS)
    }

    /// Answers one TASK_SUBMIT with any FALLBACK_NOTICEs followed by the
    /// TASK_RESULT. The next scripted failure, if any, is consumed here.
    pub fn handle_task(
        &mut self,
        request: &MessageEnvelope,
        session_mode: PayloadMode,
        signer: &Signer,
    ) -> Result<Vec<MessageEnvelope>, TaskError> {
        if request.message_type != MessageType::TaskSubmit {
            return Err(TaskError::WrongType(request.message_type));
        }
        let body: TaskSubmitBody = request.body_as().map_err(|e| TaskError::Body(e.to_string()))?;
        if body.mode > session_mode || !self.modes.contains(body.mode) {
            return Err(TaskError::Mode {
                requested: body.mode,
                session: session_mode,
            });
        }
        let quality = self
            .skill_entry(&body.skill)
            .map(|c| c.quality_hint)
            .ok_or_else(|| TaskError::UnsupportedSkill(body.skill.clone()))?;
        let latency = self.simulated_latency_ms(&body.skill).unwrap_or_default();

        let scripted = self.failure_script.pop_front();
        let frame = (body.mode == PayloadMode::SemanticFrame)
            .then(|| decode_frame(body.payload.as_bytes()))
            .flatten();
        // A frame that fails schema validation takes the same path as a
        // scripted schema mismatch.
        let failure = scripted.or_else(|| {
            (body.mode == PayloadMode::SemanticFrame && frame.is_none()).then_some(FailureType::SchemaMismatch)
        });
        let steps = match failure {
            Some(f) => plan_fallback(f, body.mode)?,
            None => Vec::new(),
        };
        let final_mode = steps.last().map_or(body.mode, |s| s.to);

        let session_id = request.session_id.clone();
        let sign = |t: MessageType, v: serde_json::Value| {
            signer
                .envelope(t, session_id.clone(), v)
                .map_err(|e| TaskError::Signing(e.to_string()))
        };
        let mut out = Vec::with_capacity(steps.len() + 1);
        for step in &steps {
            let notice = FallbackNoticeBody {
                task_id: body.task_id,
                failure: failure.expect("steps imply a failure"),
                from_mode: step.from,
                to_mode: step.to,
                recovery_ms: step.recovery_ms,
            };
            out.push(sign(MessageType::FallbackNotice, to_body(&notice))?);
        }

        let prompt = match (&frame, final_mode) {
            (Some(f), PayloadMode::Text) => f.to_text(),
            _ => body.payload.clone(),
        };
        let output = match &self.backend {
            Backend::Mock => filler_text(&self.card.delegate_id, &body.skill, prompt.as_bytes(), self.output_tokens(body.domain)),
            Backend::Http(http) => http.invoke(&prompt)?,
        };
        let result = TaskResultBody {
            task_id: body.task_id,
            token_estimate: estimate_str(&output) as u64,
            output,
            mode: final_mode,
            simulated_latency_ms: latency,
            provenance: ProvenanceRecord::self_reported(
                self.card.delegate_id.clone(),
                self.card.model_version.clone(),
                final_mode,
                quality,
            ),
        };
        out.push(sign(MessageType::TaskResult, to_body(&result))?);
        Ok(out)
    }
}

const FILLER: &[&str] = &[
    "the", "result", "follows", "from", "input", "given", "each", "step", "checks", "value", "against",
    "expected", "form", "so", "answer", "holds", "under", "stated", "constraints", "and", "summary",
    "notes", "key", "points", "with", "brief", "justification",
];

/// Meaningless but deterministic text whose estimate is close to `tokens`.
pub fn filler_text(delegate_id: &str, skill: &str, request: &[u8], tokens: u64) -> String {
    let mut h = Sha256::new();
    h.update(delegate_id.as_bytes());
    h.update([0]);
    h.update(skill.as_bytes());
    h.update([0]);
    h.update(request);
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    let mut rng = ChaCha8Rng::from_seed(seed);
    let words = (tokens * 10 / 13).max(1) as usize;
    let mut out = String::with_capacity(words * 7);
    for i in 0..words {
        if i > 0 {
            out.push(' ');
        }
        out.push_str(FILLER[rng.random_range(0..FILLER.len())]);
        if i % 12 == 11 || i + 1 == words {
            out.push('.');
        }
    }
    out
}

/// Construction options for [`DelegateServer`].
pub struct ServerOptions {
    pub policy: Option<TrustDomainPolicy>,
    pub clock: Arc<dyn Clock>,
    /// Seeds keys, nonces and session ids; `None` uses OS entropy.
    pub seed: Option<u64>,
}

impl Default for ServerOptions {
    fn default() -> Self {
        Self {
            policy: None,
            clock: Arc::new(SystemClock),
            seed: None,
        }
    }
}

struct Hosted {
    card: DelegateIdentityCard,
    modes: ModeSet,
    profile: Mutex<DelegateProfile>,
    signer: Signer,
}

/// Summary of one served session.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServedSession {
    pub session_id: String,
    pub delegate_id: String,
    pub caller_id: String,
    pub rounds: usize,
    pub cumulative_tokens: u64,
}

/// Hosts delegates behind any transport. Each connection carries one
/// session; HELLO's `target_delegate` picks the delegate (the first one
/// registered by default).
pub struct DelegateServer {
    hosted: Vec<Hosted>,
    policy: Option<TrustDomainPolicy>,
    nonces: NonceStore,
    ids: Mutex<NonceSource>,
}

impl fmt::Debug for DelegateServer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DelegateServer")
            .field("delegates", &self.delegate_ids().collect::<Vec<_>>())
            .field("policy", &self.policy.as_ref().map(|p| &p.domain))
            .finish()
    }
}

fn source(seed: Option<u64>, salt: u64) -> NonceSource {
    match seed {
        Some(s) => NonceSource::seeded(s ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15)),
        None => NonceSource::os(),
    }
}

impl DelegateServer {
    pub fn new(profiles: Vec<DelegateProfile>, options: ServerOptions) -> Result<Self, SessionError> {
        if profiles.is_empty() {
            return Err(SessionError::Protocol("server needs at least one delegate".into()));
        }
        let mut hosted = Vec::with_capacity(profiles.len());
        for (i, profile) in profiles.into_iter().enumerate() {
            let report = validate_card(&profile.card);
            if !report.is_valid() {
                return Err(SessionError::Invalid { what: "delegate card", report });
            }
            let mut nonces = source(options.seed, i as u64 + 1);
            let key = KeyMaterial::from_seed(nonces.next_seed());
            let mut card = profile.card.clone();
            card.public_key = Some(key.public_key_b64());
            let signer = Signer::new(card.delegate_id.clone(), key, nonces, options.clock.clone());
            hosted.push(Hosted {
                card,
                modes: profile.modes.clone(),
                profile: Mutex::new(profile),
                signer,
            });
        }
        Ok(Self {
            hosted,
            policy: options.policy,
            nonces: NonceStore::new(DEFAULT_NONCE_WINDOW_SECS, options.clock),
            ids: Mutex::new(source(options.seed, 0)),
        })
    }

    pub fn delegate_ids(&self) -> impl Iterator<Item = &str> {
        self.hosted.iter().map(|h| h.card.delegate_id.as_str())
    }

    /// The card as advertised, including the server-held public key.
    pub fn card(&self, delegate_id: &str) -> Option<&DelegateIdentityCard> {
        self.hosted.iter().find(|h| h.card.delegate_id == delegate_id).map(|h| &h.card)
    }

    /// Scripted failures not yet consumed by `delegate_id`.
    pub fn pending_failures(&self, delegate_id: &str) -> Option<Vec<FailureType>> {
        let h = self.hosted.iter().find(|h| h.card.delegate_id == delegate_id)?;
        Some(h.profile.lock().expect("profile poisoned").failure_script.iter().copied().collect())
    }

    fn reject<T: Transport>(transport: &mut T, signer: &Signer, session_id: Option<String>, body: ErrorBody) -> SessionError {
        if let Ok(env) = signer.envelope(MessageType::Error, session_id, to_body(&body)) {
            let _ = transport.send(&env);
        }
        transport.close();
        body.into_error()
    }

    /// Verifies signature and freshness of an inbound envelope.
    fn admit(&self, env: &MessageEnvelope, key: Option<&[u8]>) -> Result<(), Box<ErrorBody>> {
        if check_signature(env, key).is_err() {
            return Err(Box::new(ErrorBody::new("bad_signature", format!("signature from {} does not verify", env.sender_id))));
        }
        let replay = check_replay(&self.nonces, env);
        if replay.detected {
            let mut body = ErrorBody::new("replay", replay.detail.clone());
            body.detection = Some(replay);
            return Err(Box::new(body));
        }
        Ok(())
    }

    /// Runs one session to completion on `transport`.
    pub fn serve_connection<T: Transport>(&self, mut transport: T) -> Result<ServedSession, SessionError> {
        let fallback_signer = &self.hosted[0].signer;
        let mut machine = SessionMachine::new();

        let hello_env = transport.recv()?;
        if hello_env.message_type != MessageType::Hello {
            let body = ErrorBody::new("protocol", format!("expected HELLO, got {}", hello_env.message_type));
            return Err(Self::reject(&mut transport, fallback_signer, None, body));
        }
        let hello: HelloBody = match parse_body(&hello_env) {
            Ok(h) => h,
            Err(e) => return Err(Self::reject(&mut transport, fallback_signer, None, ErrorBody::new("protocol", e.to_string()))),
        };
        let caller = hello.card;
        let report = validate_card(&caller);
        if !report.is_valid() {
            let body = ErrorBody::new("invalid_card", report.to_string());
            return Err(Self::reject(&mut transport, fallback_signer, None, body));
        }
        let caller_key = match card_key(&caller) {
            Ok(k) => k,
            Err(e) => return Err(Self::reject(&mut transport, fallback_signer, None, ErrorBody::new("invalid_card", e.to_string()))),
        };
        if let Err(body) = self.admit(&hello_env, caller_key.as_deref()) {
            return Err(Self::reject(&mut transport, fallback_signer, None, *body));
        }
        let hosted = match &hello.target_delegate {
            None => &self.hosted[0],
            Some(id) => match self.hosted.iter().find(|h| &h.card.delegate_id == id) {
                Some(h) => h,
                None => {
                    let body = ErrorBody::new("unknown_delegate", format!("no delegate {id:?} here"));
                    return Err(Self::reject(&mut transport, fallback_signer, None, body));
                }
            },
        };
        let signer = &hosted.signer;
        if let Some(policy) = &self.policy {
            let mut outcome = check_cross_domain(policy, &caller.trust_domain, &hosted.card.delegate_id, &hosted.card.trust_domain);
            if !outcome.detected && caller.trust_domain == policy.domain {
                outcome = check_domain_join(policy, &caller);
            }
            if outcome.detected {
                let mut body = ErrorBody::new("trust_rejected", outcome.detail.clone());
                body.detection = Some(outcome);
                return Err(Self::reject(&mut transport, signer, None, body));
            }
        }
        machine.apply(MessageType::Hello)?;

        let manifest = ManifestBody {
            card: hosted.card.clone(),
            modes: hosted.modes.clone(),
        };
        machine.apply(MessageType::CapabilityManifest)?;
        transport.send(&signer.envelope(MessageType::CapabilityManifest, None, to_body(&manifest))?)?;

        let propose_env = transport.recv()?;
        if let Err(body) = self.admit(&propose_env, caller_key.as_deref()) {
            return Err(Self::reject(&mut transport, signer, None, *body));
        }
        if let Err(e) = machine.apply(propose_env.message_type) {
            return Err(Self::reject(&mut transport, signer, None, ErrorBody::new("protocol", e.to_string())));
        }
        if propose_env.message_type != MessageType::SessionPropose {
            // A legal but non-proposal message here is SESSION_CLOSE or ERROR.
            transport.close();
            return Err(SessionError::Protocol(format!("caller sent {} instead of a proposal", propose_env.message_type)));
        }
        let proposal: SessionConfig = match parse_body(&propose_env) {
            Ok(c) => c,
            Err(e) => return Err(Self::reject(&mut transport, signer, None, ErrorBody::new("protocol", e.to_string()))),
        };
        let report = proposal.validate();
        if !report.is_valid() {
            return Err(Self::reject(&mut transport, signer, None, ErrorBody::new("invalid_config", report.to_string())));
        }
        let mut accepted = proposal;
        accepted.payload_mode = hosted
            .modes
            .iter()
            .filter(|m| *m <= accepted.payload_mode)
            .max()
            .unwrap_or(PayloadMode::Text);
        let session_id = format!("sess-{}", self.ids.lock().expect("id source poisoned").next_nonce().to_hex());
        machine.apply(MessageType::SessionAccept)?;
        let accept = AcceptBody {
            session_id: session_id.clone(),
            config: accepted.clone(),
        };
        transport.send(&signer.envelope(MessageType::SessionAccept, Some(session_id.clone()), to_body(&accept))?)?;

        let mut context = SessionContext::new(session_id.clone(), accepted.cost_budget_tokens);
        let sid = Some(session_id.clone());
        let summary = |ctx: &SessionContext| ServedSession {
            session_id: ctx.session_id.clone(),
            delegate_id: hosted.card.delegate_id.clone(),
            caller_id: caller.delegate_id.clone(),
            rounds: ctx.rounds.len(),
            cumulative_tokens: ctx.cumulative_tokens,
        };
        loop {
            let env = match transport.recv() {
                Ok(env) => env,
                Err(TransportError::ConnectionClosed) => return Ok(summary(&context)),
                Err(e) => return Err(e.into()),
            };
            if let Err(body) = self.admit(&env, caller_key.as_deref()) {
                return Err(Self::reject(&mut transport, signer, sid.clone(), *body));
            }
            if env.session_id != sid {
                let body = ErrorBody::new("protocol", "unknown session id");
                return Err(Self::reject(&mut transport, signer, sid.clone(), body));
            }
            if let Err(e) = machine.apply(env.message_type) {
                return Err(Self::reject(&mut transport, signer, sid.clone(), ErrorBody::new("protocol", e.to_string())));
            }
            match env.message_type {
                MessageType::SessionClose | MessageType::Error => {
                    transport.close();
                    return Ok(summary(&context));
                }
                MessageType::TaskSubmit => {}
                other => {
                    let body = ErrorBody::new("protocol", format!("{other} is not a caller message"));
                    return Err(Self::reject(&mut transport, signer, sid.clone(), body));
                }
            }
            let task: TaskSubmitBody = match parse_body(&env) {
                Ok(t) => t,
                Err(e) => return Err(Self::reject(&mut transport, signer, sid.clone(), ErrorBody::new("bad_request", e.to_string()))),
            };
            let request_tokens = estimate_str(&task.payload) as u64;
            if let Some(policy) = &self.policy {
                let descriptor = TaskDescriptor {
                    delegate_id: hosted.card.delegate_id.clone(),
                    capability: task.skill.clone(),
                    jurisdiction: caller.jurisdiction.clone(),
                    token_estimate: request_tokens,
                };
                if let PolicyDecision::Deny(reason) = evaluate_policy(policy, &descriptor) {
                    let mut body = ErrorBody::new("policy_denied", reason.to_string());
                    body.denial = Some(reason);
                    return Err(Self::reject(&mut transport, signer, sid.clone(), body));
                }
            }
            if let Err(e) = context.check_budget(request_tokens) {
                return Err(Self::reject(&mut transport, signer, sid.clone(), ErrorBody::new("budget_exceeded", e.to_string())));
            }
            let handled = hosted
                .profile
                .lock()
                .expect("profile poisoned")
                .handle_task(&env, accepted.payload_mode, signer);
            let replies = match handled {
                Ok(r) => r,
                Err(e) => return Err(Self::reject(&mut transport, signer, sid.clone(), ErrorBody::new(e.code(), e.to_string()))),
            };
            for reply in &replies {
                machine.apply(reply.message_type)?;
                transport.send(reply)?;
            }
            let result: TaskResultBody = parse_body(replies.last().expect("result is last"))?;
            context.record(Round {
                task: task.payload.into_bytes(),
                result: result.output.into_bytes(),
                request_tokens,
                response_tokens: result.token_estimate,
            });
        }
    }
}

#[cfg(feature = "net")]
impl DelegateServer {
    /// Accepts connections forever, one thread per connection.
    pub fn serve(self: Arc<Self>, listener: std::net::TcpListener) -> std::io::Result<()> {
        let limit = crate::wire::max_message_bytes();
        for stream in listener.incoming() {
            let stream = match stream {
                Ok(s) => s,
                Err(_) => continue,
            };
            let server = self.clone();
            std::thread::spawn(move || {
                if let Ok(transport) = crate::wire::TcpTransport::with_limit(stream, limit) {
                    let _ = server.serve_connection(transport);
                }
            });
        }
        Ok(())
    }

    /// Binds `addr` and serves in a background thread.
    pub fn spawn(self: Arc<Self>, addr: &str) -> std::io::Result<(std::net::SocketAddr, std::thread::JoinHandle<()>)> {
        let listener = std::net::TcpListener::bind(addr)?;
        let local = listener.local_addr()?;
        let handle = std::thread::spawn(move || {
            let _ = self.serve(listener);
        });
        Ok((local, handle))
    }
}

/// Profiles for every card in a pool file, with the HTTP backend switched
/// on when `LDP_BACKEND_URL` is set.
pub fn profiles_from_env(cards: &[DelegateIdentityCard], modes: &ModeSet) -> Vec<DelegateProfile> {
    let url = std::env::var(BACKEND_URL_ENV).ok().filter(|u| !u.trim().is_empty());
    cards
        .iter()
        .map(|card| {
            let mut p = DelegateProfile::from_card(card.clone()).with_modes(modes.clone());
            if let Some(url) = &url {
                p = p.with_backend(Backend::Http(HttpBackend {
                    url: url.clone(),
                    model: card.model_name.clone(),
                    timeout_ms: 120_000,
                }));
            }
            p
        })
        .collect()
}
