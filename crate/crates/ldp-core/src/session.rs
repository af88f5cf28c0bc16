//! Governed sessions: the handshake state machine, per-session context and
//! budget, the client side of the lifecycle, and a session cache.
//!
//! A session opens with exactly four envelopes (HELLO, CAPABILITY_MANIFEST,
//! SESSION_PROPOSE, SESSION_ACCEPT). After that each task is one TASK_SUBMIT
//! answered by optional FALLBACK_NOTICEs and a TASK_RESULT; earlier rounds
//! are never re-sent because both ends keep the context.

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, TryLockError};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::delegates::FailureType;
use crate::identity::{validate_card, DelegateIdentityCard};
use crate::payload::{negotiate_mode, EncodedPayload, ModeSet, PayloadMode};
use crate::provenance::ProvenanceRecord;
use crate::routing::TaskDomain;
use crate::trust::{DenyReason, DetectionOutcome};
use crate::validation::ValidationReport;
use crate::wire::{
    verify_envelope, MessageEnvelope, MessageType, Signer, Transport, TransportError, WireError,
};

pub const SESSION_IDLE_ENV: &str = "LDP_SESSION_IDLE_SECS";
pub const DEFAULT_SESSION_IDLE_SECS: u64 = 300;

/// Idle timeout from `LDP_SESSION_IDLE_SECS`, falling back to 300 s.
pub fn session_idle_timeout() -> Duration {
    let secs = std::env::var(SESSION_IDLE_ENV)
        .ok()
        .and_then(|v| v.trim().parse().ok())
        .unwrap_or(DEFAULT_SESSION_IDLE_SECS);
    Duration::from_secs(secs)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuditLevel {
    None,
    #[default]
    Basic,
    Full,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionConfig {
    pub payload_mode: PayloadMode,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_target_ms: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cost_budget_tokens: Option<u64>,
    #[serde(default)]
    pub privacy_constraints: Vec<String>,
    #[serde(default)]
    pub audit_level: AuditLevel,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            payload_mode: PayloadMode::SemanticFrame,
            latency_target_ms: None,
            cost_budget_tokens: None,
            privacy_constraints: Vec::new(),
            audit_level: AuditLevel::Basic,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> ValidationReport {
        let mut report = ValidationReport::new();
        if self.latency_target_ms == Some(0) {
            report.push("latency_target_ms", "must be positive when set");
        }
        if self.cost_budget_tokens == Some(0) {
            report.push("cost_budget_tokens", "must be positive when set");
        }
        report
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SessionKey {
    pub endpoint: String,
    pub config_fingerprint: String,
}

impl SessionKey {
    pub fn new(endpoint: &str, config: &SessionConfig) -> Self {
        Self {
            endpoint: endpoint.to_owned(),
            config_fingerprint: config.fingerprint(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SessionState {
    #[default]
    Init,
    HelloSent,
    ManifestReceived,
    Proposed,
    Active,
    Closed,
    Failed,
}

impl fmt::Display for SessionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error("protocol violation: {message_type} in state {state}")]
    ProtocolViolation {
        state: SessionState,
        message_type: MessageType,
    },
    #[error("protocol violation: {0}")]
    Protocol(String),
    #[error("invalid {what}: {report}")]
    Invalid { what: &'static str, report: ValidationReport },
    #[error("signature from {0} does not verify")]
    BadSignature(String),
    #[error("rejected by {}: {}", .0.mechanism, .0.detail)]
    Rejected(DetectionOutcome),
    #[error("denied by policy: {0}")]
    Denied(DenyReason),
    #[error("remote error {code}: {message}")]
    Remote { code: String, message: String },
    #[error("budget exceeded: task needs {needed} tokens, {remaining} remain")]
    BudgetExceeded { needed: u64, remaining: u64 },
    #[error("payload mode {payload} is above the session mode {session}")]
    ModeViolation {
        payload: PayloadMode,
        session: PayloadMode,
    },
}

/// Lifecycle guard. Any message that is not legal in the current state is
/// a violation and fails the session (a closed session stays closed).
#[derive(Debug, Clone, Default)]
pub struct SessionMachine {
    state: SessionState,
}


impl SessionMachine {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn state(&self) -> SessionState {
        self.state
    }

    pub fn is_active(&self) -> bool {
        self.state == SessionState::Active
    }

    /// Whether `message_type` is legal now, without changing state.
    pub fn next(state: SessionState, message_type: MessageType) -> Option<SessionState> {
        use MessageType as M;
        use SessionState as S;
        match (state, message_type) {
            (_, M::SessionClose) => Some(S::Closed),
            (S::Closed, _) => None,
            (_, M::Error) => Some(S::Failed),
            (S::Init, M::Hello) => Some(S::HelloSent),
            (S::HelloSent, M::CapabilityManifest) => Some(S::ManifestReceived),
            (S::ManifestReceived, M::SessionPropose) => Some(S::Proposed),
            (S::Proposed, M::SessionAccept) => Some(S::Active),
            (S::Active, M::TaskSubmit | M::TaskUpdate | M::TaskResult | M::FallbackNotice) => Some(S::Active),
            _ => None,
        }
    }

    pub fn apply(&mut self, message_type: MessageType) -> Result<SessionState, SessionError> {
        match Self::next(self.state, message_type) {
            Some(next) => {
                self.state = next;
                Ok(next)
            }
            None => {
                let state = self.state;
                if state != SessionState::Closed {
                    self.state = SessionState::Failed;
                }
                Err(SessionError::ProtocolViolation { state, message_type })
            }
        }
    }

    pub fn fail(&mut self) {
        if self.state != SessionState::Closed {
            self.state = SessionState::Failed;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Round {
    pub task: Vec<u8>,
    pub result: Vec<u8>,
    pub request_tokens: u64,
    pub response_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionContext {
    pub session_id: String,
    pub rounds: Vec<Round>,
    pub cumulative_tokens: u64,
    pub budget: Option<u64>,
}

impl SessionContext {
    pub fn new(session_id: impl Into<String>, budget: Option<u64>) -> Self {
        Self {
            session_id: session_id.into(),
            rounds: Vec::new(),
            cumulative_tokens: 0,
            budget,
        }
    }

    /// Budget minus spend, floored at zero. `None` when unbudgeted.
    pub fn remaining_budget(&self) -> Option<u64> {
        self.budget.map(|b| b.saturating_sub(self.cumulative_tokens))
    }

    pub fn check_budget(&self, request_tokens: u64) -> Result<(), SessionError> {
        match self.remaining_budget() {
            Some(remaining) if request_tokens > remaining => Err(SessionError::BudgetExceeded {
                needed: request_tokens,
                remaining,
            }),
            _ => Ok(()),
        }
    }

    pub fn record(&mut self, round: Round) {
        self.cumulative_tokens += round.request_tokens + round.response_tokens;
        self.rounds.push(round);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HelloBody {
    pub card: DelegateIdentityCard,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_delegate: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_hint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestBody {
    pub card: DelegateIdentityCard,
    pub modes: ModeSet,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcceptBody {
    pub session_id: String,
    pub config: SessionConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSubmitBody {
    pub task_id: u64,
    pub mode: PayloadMode,
    pub payload: String,
    pub skill: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub domain: Option<TaskDomain>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResultBody {
    pub task_id: u64,
    pub output: String,
    pub mode: PayloadMode,
    pub token_estimate: u64,
    pub simulated_latency_ms: u64,
    pub provenance: ProvenanceRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FallbackNoticeBody {
    pub task_id: u64,
    pub failure: FailureType,
    pub from_mode: PayloadMode,
    pub to_mode: PayloadMode,
    pub recovery_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CloseBody {
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection: Option<DetectionOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub denial: Option<DenyReason>,
}

impl ErrorBody {
    pub fn new(code: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            code: code.into(),
            message: message.into(),
            detection: None,
            denial: None,
        }
    }

    pub fn into_error(self) -> SessionError {
        match (self.detection, self.denial) {
            (Some(d), _) => SessionError::Rejected(d),
            (None, Some(d)) => SessionError::Denied(d),
            (None, None) => SessionError::Remote {
                code: self.code,
                message: self.message,
            },
        }
    }
}

pub(crate) fn to_body<T: Serialize>(value: &T) -> Value {
    serde_json::to_value(value).expect("body serializes")
}

pub(crate) fn parse_body<T: for<'de> Deserialize<'de>>(env: &MessageEnvelope) -> Result<T, SessionError> {
    serde_json::from_value(env.body.clone())
        .map_err(|e| SessionError::Protocol(format!("{} body: {e}", env.message_type)))
}

/// Checks `env` against `key` (a raw public key) when one is known.
pub(crate) fn check_signature(env: &MessageEnvelope, key: Option<&[u8]>) -> Result<(), SessionError> {
    match key {
        Some(k) if !verify_envelope(env, k) => Err(SessionError::BadSignature(env.sender_id.clone())),
        _ => Ok(()),
    }
}

/// Decoded public key of a card, if it advertises one.
pub fn card_key(card: &DelegateIdentityCard) -> Result<Option<Vec<u8>>, SessionError> {
    use base64::Engine;
    card.public_key
        .as_deref()
        .map(|k| {
            base64::engine::general_purpose::STANDARD
                .decode(k)
                .map_err(|e| SessionError::Protocol(format!("public_key is not base64: {e}")))
        })
        .transpose()
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HelloOptions {
    pub target_delegate: Option<String>,
    pub task_hint: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskOutcome {
    pub result: TaskResultBody,
    pub fallbacks: Vec<FallbackNoticeBody>,
    pub envelope: MessageEnvelope,
}

/// Caller side of one session over one connection.
pub struct ClientSession<T: Transport> {
    transport: T,
    signer: Arc<Signer>,
    machine: SessionMachine,
    caller: DelegateIdentityCard,
    remote: DelegateIdentityCard,
    remote_key: Option<Vec<u8>>,
    remote_modes: ModeSet,
    config: SessionConfig,
    context: SessionContext,
    next_task: u64,
}

impl<T: Transport> fmt::Debug for ClientSession<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ClientSession")
            .field("session_id", &self.context.session_id)
            .field("state", &self.machine.state())
            .field("remote", &self.remote.delegate_id)
            .field("config", &self.config)
            .finish()
    }
}

/// Opens a session: HELLO, CAPABILITY_MANIFEST, SESSION_PROPOSE,
/// SESSION_ACCEPT. The proposal's mode is lowered to what both sides
/// support before it is sent; the callee may lower it further.
pub fn run_handshake<T: Transport>(
    mut transport: T,
    signer: Arc<Signer>,
    caller_card: &DelegateIdentityCard,
    caller_modes: &ModeSet,
    proposal: SessionConfig,
    hello: HelloOptions,
) -> Result<ClientSession<T>, SessionError> {
    let report = validate_card(caller_card);
    if !report.is_valid() {
        return Err(SessionError::Invalid { what: "caller card", report });
    }
    let report = proposal.validate();
    if !report.is_valid() {
        return Err(SessionError::Invalid { what: "session config", report });
    }
    let mut caller = caller_card.clone();
    if caller.public_key.is_none() {
        caller.public_key = Some(signer.key().public_key_b64());
    }

    let mut machine = SessionMachine::new();
    let hello_body = HelloBody {
        card: caller.clone(),
        target_delegate: hello.target_delegate,
        task_hint: hello.task_hint,
    };
    machine.apply(MessageType::Hello)?;
    transport.send(&signer.envelope(MessageType::Hello, None, to_body(&hello_body))?)?;

    let manifest_env = recv_expected(&mut transport, &mut machine, None)?;
    let manifest = parse_manifest(&manifest_env)?;
    let remote_key = card_key(&manifest.card)?;
    check_signature(&manifest_env, remote_key.as_deref())?;

    let mut proposed = proposal;
    let common = negotiate_mode(caller_modes, &manifest.modes);
    proposed.payload_mode = proposed.payload_mode.min(common);
    machine.apply(MessageType::SessionPropose)?;
    transport.send(&signer.envelope(MessageType::SessionPropose, None, to_body(&proposed))?)?;

    let accept_env = recv_expected(&mut transport, &mut machine, remote_key.as_deref())?;
    let accept: AcceptBody = parse_body(&accept_env)?;
    let accepted = accept.config;
    let mode = accepted.payload_mode;
    if mode > proposed.payload_mode || !caller_modes.contains(mode) || !manifest.modes.contains(mode) {
        machine.fail();
        return Err(SessionError::Protocol(format!(
            "accepted payload mode {mode} was not offered"
        )));
    }
    if accepted.audit_level < proposed.audit_level {
        machine.fail();
        return Err(SessionError::Protocol("callee lowered the audit level".into()));
    }
    if accept_env.session_id.as_deref() != Some(accept.session_id.as_str()) {
        machine.fail();
        return Err(SessionError::Protocol("session id mismatch in SESSION_ACCEPT".into()));
    }

    Ok(ClientSession {
        transport,
        signer,
        machine,
        caller,
        remote: manifest.card,
        remote_key,
        remote_modes: manifest.modes,
        context: SessionContext::new(accept.session_id, accepted.cost_budget_tokens),
        config: accepted,
        next_task: 1,
    })
}

fn parse_manifest(env: &MessageEnvelope) -> Result<ManifestBody, SessionError> {
    let modes: Vec<PayloadMode> = env
        .body
        .get("modes")
        .cloned()
        .map(serde_json::from_value)
        .transpose()
        .map_err(|e| SessionError::Protocol(format!("manifest modes: {e}")))?
        .unwrap_or_default();
    if !modes.contains(&PayloadMode::Text) {
        return Err(SessionError::Protocol("capability manifest lacks mode 0 (text)".into()));
    }
    parse_body(env)
}

/// Receives one envelope, applies it to the machine and turns ERROR into the
/// matching session error.
fn recv_expected<T: Transport>(
    transport: &mut T,
    machine: &mut SessionMachine,
    key: Option<&[u8]>,
) -> Result<MessageEnvelope, SessionError> {
    let env = match transport.recv() {
        Ok(env) => env,
        Err(e) => {
            machine.fail();
            return Err(e.into());
        }
    };
    if let Err(e) = check_signature(&env, key) {
        machine.fail();
        return Err(e);
    }
    machine.apply(env.message_type)?;
    if env.message_type == MessageType::Error {
        return Err(parse_body::<ErrorBody>(&env)?.into_error());
    }
    Ok(env)
}

impl<T: Transport> ClientSession<T> {
    pub fn state(&self) -> SessionState {
        self.machine.state()
    }

    pub fn is_active(&self) -> bool {
        self.machine.is_active()
    }

    pub fn session_id(&self) -> &str {
        &self.context.session_id
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn context(&self) -> &SessionContext {
        &self.context
    }

    pub fn remote_card(&self) -> &DelegateIdentityCard {
        &self.remote
    }

    pub fn remote_modes(&self) -> &ModeSet {
        &self.remote_modes
    }

    pub fn caller_card(&self) -> &DelegateIdentityCard {
        &self.caller
    }

    /// Sends one task and waits for its result. Budget and mode are checked
    /// before anything goes on the wire; those failures leave the session
    /// active.
    pub fn submit_task(
        &mut self,
        payload: &EncodedPayload,
        skill: &str,
        domain: Option<TaskDomain>,
    ) -> Result<TaskOutcome, SessionError> {
        let state = self.machine.state();
        if state != SessionState::Active {
            return Err(SessionError::ProtocolViolation {
                state,
                message_type: MessageType::TaskSubmit,
            });
        }
        if payload.mode() > self.config.payload_mode {
            return Err(SessionError::ModeViolation {
                payload: payload.mode(),
                session: self.config.payload_mode,
            });
        }
        let request_tokens = payload.token_estimate() as u64;
        self.context.check_budget(request_tokens)?;

        let task_id = self.next_task;
        self.next_task += 1;
        let body = TaskSubmitBody {
            task_id,
            mode: payload.mode(),
            payload: payload.as_str().to_owned(),
            skill: skill.to_owned(),
            domain,
        };
        self.machine.apply(MessageType::TaskSubmit)?;
        let env = self.signer.envelope(
            MessageType::TaskSubmit,
            Some(self.context.session_id.clone()),
            to_body(&body),
        )?;
        if let Err(e) = self.transport.send(&env) {
            self.machine.fail();
            return Err(e.into());
        }

        let mut fallbacks = Vec::new();
        loop {
            let reply = recv_expected(&mut self.transport, &mut self.machine, self.remote_key.as_deref())?;
            if reply.session_id.as_deref() != Some(self.context.session_id.as_str()) {
                self.machine.fail();
                return Err(SessionError::Protocol("reply carries a foreign session id".into()));
            }
            match reply.message_type {
                MessageType::FallbackNotice => fallbacks.push(parse_body(&reply)?),
                MessageType::TaskUpdate => {}
                MessageType::TaskResult => {
                    let result: TaskResultBody = parse_body(&reply)?;
                    self.context.record(Round {
                        task: payload.bytes().to_vec(),
                        result: result.output.as_bytes().to_vec(),
                        request_tokens,
                        response_tokens: result.token_estimate,
                    });
                    return Ok(TaskOutcome {
                        result,
                        fallbacks,
                        envelope: reply,
                    });
                }
                other => {
                    self.machine.fail();
                    return Err(SessionError::ProtocolViolation {
                        state: SessionState::Active,
                        message_type: other,
                    });
                }
            }
        }
    }

    /// Sends SESSION_CLOSE and releases the connection. Idempotent.
    pub fn close(&mut self) -> Result<(), SessionError> {
        if self.machine.state() == SessionState::Closed {
            return Ok(());
        }
        let was_live = !matches!(self.machine.state(), SessionState::Failed);
        self.machine.apply(MessageType::SessionClose)?;
        if was_live {
            let body = to_body(&CloseBody {
                reason: "client closed".into(),
            });
            // Best effort: the peer may already be gone.
            if let Ok(env) = self
                .signer
                .envelope(MessageType::SessionClose, Some(self.context.session_id.clone()), body)
            {
                let _ = self.transport.send(&env);
            }
        }
        self.transport.close();
        Ok(())
    }
}

impl<T: Transport> Drop for ClientSession<T> {
    fn drop(&mut self) {
        let _ = self.close();
    }
}

pub type DynSession = ClientSession<Box<dyn Transport>>;
pub type SharedSession = Arc<Mutex<DynSession>>;

/// Opens sessions for the cache.
pub trait Connector: Send + Sync {
    fn open(&self, endpoint: &str, config: &SessionConfig) -> Result<DynSession, SessionError>;
}

type Dialer = dyn Fn(&str) -> Result<Box<dyn Transport>, SessionError> + Send + Sync;

/// Dials a transport and runs the handshake with a fixed caller identity.
pub struct HandshakeConnector {
    dial: Box<Dialer>,
    signer: Arc<Signer>,
    caller: DelegateIdentityCard,
    modes: ModeSet,
    hello: HelloOptions,
}

impl HandshakeConnector {
    pub fn new(
        dial: impl Fn(&str) -> Result<Box<dyn Transport>, SessionError> + Send + Sync + 'static,
        signer: Arc<Signer>,
        caller: DelegateIdentityCard,
        modes: ModeSet,
    ) -> Self {
        Self {
            dial: Box::new(dial),
            signer,
            caller,
            modes,
            hello: HelloOptions::default(),
        }
    }

    pub fn with_hello(mut self, hello: HelloOptions) -> Self {
        self.hello = hello;
        self
    }
}

impl Connector for HandshakeConnector {
    fn open(&self, endpoint: &str, config: &SessionConfig) -> Result<DynSession, SessionError> {
        let transport = (self.dial)(endpoint)?;
        run_handshake(
            transport,
            self.signer.clone(),
            &self.caller,
            &self.modes,
            config.clone(),
            self.hello.clone(),
        )
    }
}

#[cfg(feature = "net")]
pub fn tcp_dial(endpoint: &str) -> Result<Box<dyn Transport>, SessionError> {
    Ok(Box::new(crate::wire::TcpTransport::connect(endpoint)?))
}

struct CacheEntry {
    session: SharedSession,
    last_used: Instant,
}

/// Reuses one live session per (endpoint, config). A session that is in use
/// by another thread counts as live.
pub struct SessionCache {
    connector: Arc<dyn Connector>,
    idle: Duration,
    entries: Mutex<HashMap<SessionKey, CacheEntry>>,
    handshakes: AtomicUsize,
}

impl fmt::Debug for SessionCache {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SessionCache")
            .field("idle", &self.idle)
            .field("entries", &self.len())
            .field("handshakes", &self.handshake_count())
            .finish()
    }
}

fn is_live(session: &SharedSession) -> bool {
    match session.try_lock() {
        Ok(s) => s.is_active(),
        Err(TryLockError::WouldBlock) => true,
        Err(TryLockError::Poisoned(_)) => false,
    }
}

fn close_quietly(session: &SharedSession) {
    if let Ok(mut s) = session.try_lock() {
        let _ = s.close();
    }
}

impl SessionCache {
    /// Idle timeout from the environment.
    pub fn new(connector: Arc<dyn Connector>) -> Self {
        Self::with_idle(connector, session_idle_timeout())
    }

    pub fn with_idle(connector: Arc<dyn Connector>, idle: Duration) -> Self {
        Self {
            connector,
            idle,
            entries: Mutex::new(HashMap::new()),
            handshakes: AtomicUsize::new(0),
        }
    }

    pub fn idle_timeout(&self) -> Duration {
        self.idle
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Handshakes started by this cache, including race losers.
    pub fn handshake_count(&self) -> usize {
        self.handshakes.load(Ordering::SeqCst)
    }

    /// Closes and drops sessions idle past the timeout or no longer active.
    pub fn evict_idle(&self) -> usize {
        let mut entries = self.entries.lock().expect("cache poisoned");
        let now = Instant::now();
        let stale: Vec<SessionKey> = entries
            .iter()
            .filter(|(_, e)| now.duration_since(e.last_used) >= self.idle || !is_live(&e.session))
            .map(|(k, _)| k.clone())
            .collect();
        for key in &stale {
            if let Some(e) = entries.remove(key) {
                close_quietly(&e.session);
            }
        }
        stale.len()
    }

    pub fn get_or_create_session(&self, endpoint: &str, config: &SessionConfig) -> Result<SharedSession, SessionError> {
        let key = SessionKey::new(endpoint, config);
        if let Some(s) = self.lookup(&key) {
            return Ok(s);
        }
        self.handshakes.fetch_add(1, Ordering::SeqCst);
        let fresh = Arc::new(Mutex::new(self.connector.open(endpoint, config)?));

        let mut entries = self.entries.lock().expect("cache poisoned");
        if let Some(existing) = entries.get_mut(&key) {
            if is_live(&existing.session) {
                // Lost the race: keep the first registered session.
                existing.last_used = Instant::now();
                let winner = existing.session.clone();
                drop(entries);
                close_quietly(&fresh);
                return Ok(winner);
            }
        }
        entries.insert(
            key,
            CacheEntry {
                session: fresh.clone(),
                last_used: Instant::now(),
            },
        );
        Ok(fresh)
    }

    fn lookup(&self, key: &SessionKey) -> Option<SharedSession> {
        let mut entries = self.entries.lock().expect("cache poisoned");
        let now = Instant::now();
        let entry = entries.get_mut(key)?;
        if now.duration_since(entry.last_used) < self.idle && is_live(&entry.session) {
            entry.last_used = now;
            return Some(entry.session.clone());
        }
        let stale = entries.remove(key).expect("present");
        drop(entries);
        close_quietly(&stale.session);
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn happy_path_reaches_active() {
        let mut m = SessionMachine::new();
        for t in [
            MessageType::Hello,
            MessageType::CapabilityManifest,
            MessageType::SessionPropose,
            MessageType::SessionAccept,
        ] {
            m.apply(t).unwrap();
        }
        assert!(m.is_active());
        m.apply(MessageType::TaskSubmit).unwrap();
        m.apply(MessageType::FallbackNotice).unwrap();
        m.apply(MessageType::TaskResult).unwrap();
        assert!(m.is_active());
        m.apply(MessageType::SessionClose).unwrap();
        assert_eq!(m.state(), SessionState::Closed);
    }

    #[test]
    fn submit_from_init_is_violation() {
        let mut m = SessionMachine::new();
        let err = m.apply(MessageType::TaskSubmit).unwrap_err();
        assert!(matches!(
            err,
            SessionError::ProtocolViolation {
                state: SessionState::Init,
                message_type: MessageType::TaskSubmit
            }
        ));
        assert_eq!(m.state(), SessionState::Failed);
    }

    #[test]
    fn closed_is_terminal() {
        let mut m = SessionMachine::new();
        m.apply(MessageType::SessionClose).unwrap();
        assert!(m.apply(MessageType::Hello).is_err());
        assert!(m.apply(MessageType::Error).is_err());
        assert_eq!(m.state(), SessionState::Closed);
        m.apply(MessageType::SessionClose).unwrap();
    }

    #[test]
    fn error_fails_any_open_state() {
        let mut m = SessionMachine::new();
        m.apply(MessageType::Hello).unwrap();
        m.apply(MessageType::Error).unwrap();
        assert_eq!(m.state(), SessionState::Failed);
        assert!(m.apply(MessageType::TaskSubmit).is_err());
    }

    #[test]
    fn budget_examples() {
        let mut ctx = SessionContext::new("s", Some(100));
        assert!(matches!(
            ctx.check_budget(150),
            Err(SessionError::BudgetExceeded { needed: 150, remaining: 100 })
        ));
        assert!(ctx.rounds.is_empty());
        ctx.check_budget(60).unwrap();
        ctx.record(Round {
            task: vec![],
            result: vec![],
            request_tokens: 60,
            response_tokens: 70,
        });
        assert_eq!(ctx.cumulative_tokens, 130);
        assert_eq!(ctx.remaining_budget(), Some(0));
        assert_eq!(SessionContext::new("u", None).remaining_budget(), None);
    }

    #[test]
    fn config_json_names_and_fingerprint() {
        let cfg: SessionConfig = serde_json::from_str(
            r#"{"payload_mode":"semantic_frame","latency_target_ms":2000,"cost_budget_tokens":5000,
                "privacy_constraints":["no-retention"],"audit_level":"full"}"#,
        )
        .unwrap();
        assert_eq!(cfg.audit_level, AuditLevel::Full);
        let mut other = cfg.clone();
        assert_eq!(cfg.fingerprint(), other.fingerprint());
        other.audit_level = AuditLevel::Basic;
        assert_ne!(cfg.fingerprint(), other.fingerprint());
        assert_eq!(cfg.fingerprint().len(), 64);
        assert!(SessionConfig { cost_budget_tokens: Some(0), ..cfg }.validate().fields().any(|f| f == "cost_budget_tokens"));
    }

    #[test]
    fn session_keys() {
        let c = SessionConfig::default();
        assert_eq!(SessionKey::new("a:1", &c), SessionKey::new("a:1", &c.clone()));
        assert_ne!(SessionKey::new("a:1", &c), SessionKey::new("a:2", &c));
    }

    #[test]
    fn error_body_mapping() {
        let mut b = ErrorBody::new("policy", "no");
        assert!(matches!(b.clone().into_error(), SessionError::Remote { .. }));
        b.denial = Some(DenyReason::CostLimit { estimate: 5, limit: 1 });
        assert!(matches!(b.clone().into_error(), SessionError::Denied(_)));
        b.detection = Some(DetectionOutcome::fire("x", "y"));
        assert!(matches!(b.into_error(), SessionError::Rejected(_)));
    }

    fn arb_type() -> impl Strategy<Value = MessageType> {
        (0usize..MessageType::ALL.len()).prop_map(|i| MessageType::ALL[i])
    }

    proptest! {
        #[test]
        fn submit_only_accepted_when_active(seq in prop::collection::vec(arb_type(), 0..24)) {
            let mut m = SessionMachine::new();
            let mut handshake = Vec::new();
            for t in seq {
                let before = m.state();
                let ok = m.apply(t).is_ok();
                if t == MessageType::TaskSubmit && ok {
                    prop_assert_eq!(before, SessionState::Active);
                }
                if ok && before != SessionState::Active && m.state() != SessionState::Closed && m.state() != SessionState::Failed {
                    handshake.push(t);
                }
                if m.state() == SessionState::Active && before != SessionState::Active {
                    prop_assert_eq!(
                        &handshake,
                        &vec![MessageType::Hello, MessageType::CapabilityManifest, MessageType::SessionPropose, MessageType::SessionAccept]
                    );
                }
            }
        }
    }
}
