//! Caller and delegate server talking over real transports.

use std::net::TcpListener;
use std::sync::mpsc;
use std::sync::{Arc, Barrier};
use std::thread;

use serde_json::json;

use ldp_core::delegates::{DelegateProfile, DelegateServer, ServedSession, ServerOptions};
use ldp_core::fixtures::{self, LLAMA_3B, QWEN3_8B};
use ldp_core::payload::{encode_mode0, encode_mode1};
use ldp_core::routing::TaskDomain;
use ldp_core::session::{
    run_handshake, tcp_dial, AuditLevel, HandshakeConnector, HelloOptions, SessionCache, SessionConfig,
    SessionError, SessionState,
};
use ldp_core::trust::{TrustDomainPolicy, MECH_CROSS_DOMAIN};
use ldp_core::wire::{decode_envelope, memory_pair, MessageType, NonceSource, RecordingTransport, Signer, TcpTransport, Transport};
use ldp_core::{ModeSet, PayloadMode};

fn server(policy: Option<TrustDomainPolicy>, modes: ModeSet) -> Arc<DelegateServer> {
    let profiles = fixtures::default_pool()
        .entries()
        .iter()
        .map(|c| DelegateProfile::from_card(c.clone()).with_modes(modes.clone()))
        .collect();
    let opts = ServerOptions {
        policy,
        seed: Some(11),
        ..ServerOptions::default()
    };
    Arc::new(DelegateServer::new(profiles, opts).unwrap())
}

fn caller_signer(seed: u64) -> Arc<Signer> {
    Arc::new(Signer::generate("orchestrator", NonceSource::seeded(seed)))
}

/// Serves one connection on a memory pair; the summary arrives on the
/// returned channel when the session ends.
fn serve_in_memory(srv: &Arc<DelegateServer>) -> (impl Transport, mpsc::Receiver<Result<ServedSession, SessionError>>) {
    let (client, server_end) = memory_pair();
    let (tx, rx) = mpsc::channel();
    let srv = srv.clone();
    thread::spawn(move || {
        let _ = tx.send(srv.serve_connection(server_end));
    });
    (client, rx)
}

fn hello_to(id: &str) -> HelloOptions {
    HelloOptions {
        target_delegate: Some(id.into()),
        task_hint: None,
    }
}

fn config(mode: PayloadMode) -> SessionConfig {
    SessionConfig {
        payload_mode: mode,
        ..SessionConfig::default()
    }
}

#[test]
fn handshake_keeps_mode_one_when_both_support_it() {
    let srv = server(None, ModeSet::encodable());
    let (t, _rx) = serve_in_memory(&srv);
    let (t, sent) = RecordingTransport::new(t);
    let s = run_handshake(t, caller_signer(1), &fixtures::default_caller_card(), &ModeSet::all(), config(PayloadMode::SemanticFrame), hello_to(QWEN3_8B)).unwrap();
    assert_eq!(s.state(), SessionState::Active);
    assert_eq!(s.config().payload_mode, PayloadMode::SemanticFrame);
    let types: Vec<MessageType> = sent.lock().unwrap().iter().map(|b| decode_envelope(b).unwrap().message_type).collect();
    assert_eq!(types, [MessageType::Hello, MessageType::SessionPropose]);
}

#[test]
fn handshake_lowers_mode_three_to_one() {
    let srv = server(None, ModeSet::encodable());
    let (t, _rx) = serve_in_memory(&srv);
    let s = run_handshake(t, caller_signer(2), &fixtures::default_caller_card(), &ModeSet::all(), config(PayloadMode::SemanticGraphs), HelloOptions::default()).unwrap();
    assert_eq!(s.config().payload_mode, PayloadMode::SemanticFrame);
}

#[test]
fn text_only_delegate_settles_on_text() {
    let srv = server(None, ModeSet::text_only());
    let (t, _rx) = serve_in_memory(&srv);
    let mut s = run_handshake(t, caller_signer(3), &fixtures::default_caller_card(), &ModeSet::encodable(), config(PayloadMode::SemanticFrame), HelloOptions::default()).unwrap();
    assert_eq!(s.config().payload_mode, PayloadMode::Text);
    let frame = encode_mode1(&fixtures::sentiment_entry().frame).unwrap();
    assert!(matches!(s.submit_task(&frame, "classification", None), Err(SessionError::ModeViolation { .. })));
    let out = s.submit_task(&encode_mode0("hello"), "classification", None).unwrap();
    assert_eq!(out.result.mode, PayloadMode::Text);
}

#[test]
fn rounds_accumulate_and_server_sees_them() {
    let srv = server(None, ModeSet::encodable());
    let (t, rx) = serve_in_memory(&srv);
    let mut s = run_handshake(t, caller_signer(4), &fixtures::default_caller_card(), &ModeSet::encodable(), config(PayloadMode::SemanticFrame), hello_to(QWEN3_8B)).unwrap();
    let mut expected = 0;
    for i in 0..3 {
        let p = encode_mode0(&format!("question number {i}"));
        let out = s.submit_task(&p, "reasoning", Some(TaskDomain::Reasoning)).unwrap();
        expected += p.token_estimate() as u64 + out.result.token_estimate;
        assert_eq!(out.result.provenance.confidence_score, 0.85);
        assert_eq!(out.result.provenance.produced_by, QWEN3_8B);
    }
    assert_eq!(s.context().rounds.len(), 3);
    assert_eq!(s.context().cumulative_tokens, expected);
    s.close().unwrap();
    let served = rx.recv().unwrap().unwrap();
    assert_eq!(served.rounds, 3);
    assert_eq!(served.cumulative_tokens, expected);
    assert_eq!(served.delegate_id, QWEN3_8B);
}

#[test]
fn budget_rejection_leaves_session_active() {
    let srv = server(None, ModeSet::encodable());
    let (t, _rx) = serve_in_memory(&srv);
    let cfg = SessionConfig {
        cost_budget_tokens: Some(100),
        ..config(PayloadMode::Text)
    };
    let mut s = run_handshake(t, caller_signer(5), &fixtures::default_caller_card(), &ModeSet::encodable(), cfg, HelloOptions::default()).unwrap();
    // 115 words -> ceil(1.3 * 115) = 150 tokens.
    let big = encode_mode0(&vec!["word"; 115].join(" "));
    assert_eq!(big.token_estimate(), 150);
    assert!(matches!(
        s.submit_task(&big, "reasoning", None),
        Err(SessionError::BudgetExceeded { needed: 150, remaining: 100 })
    ));
    assert!(s.is_active());
    assert!(s.context().rounds.is_empty());
}

#[test]
fn close_is_idempotent_and_final() {
    let srv = server(None, ModeSet::encodable());
    let (t, rx) = serve_in_memory(&srv);
    let mut s = run_handshake(t, caller_signer(6), &fixtures::default_caller_card(), &ModeSet::encodable(), config(PayloadMode::Text), HelloOptions::default()).unwrap();
    s.close().unwrap();
    assert_eq!(s.state(), SessionState::Closed);
    s.close().unwrap();
    assert!(matches!(
        s.submit_task(&encode_mode0("late"), "reasoning", None),
        Err(SessionError::ProtocolViolation { message_type: MessageType::TaskSubmit, .. })
    ));
    assert_eq!(rx.recv().unwrap().unwrap().rounds, 0);
}

#[test]
fn no_prior_round_content_on_the_wire() {
    let srv = server(None, ModeSet::encodable());
    let (t, _rx) = serve_in_memory(&srv);
    let (t, sent) = RecordingTransport::new(t);
    let mut s = run_handshake(t, caller_signer(7), &fixtures::default_caller_card(), &ModeSet::encodable(), config(PayloadMode::Text), hello_to(LLAMA_3B)).unwrap();
    let mut previous: Option<(String, String)> = None;
    for i in 0..4 {
        let task = format!("distinct-task-marker-{i} summarize the quarterly figures");
        let before = sent.lock().unwrap().len();
        let out = s.submit_task(&encode_mode0(&task), "classification", None).unwrap();
        let frames = sent.lock().unwrap()[before..].to_vec();
        assert_eq!(frames.len(), 1);
        let request = String::from_utf8(frames[0].clone()).unwrap();
        assert!(request.contains(&task));
        if let Some((prev_task, prev_out)) = &previous {
            assert!(!request.contains(prev_task.as_str()));
            assert!(!request.contains(prev_out.as_str()));
        }
        previous = Some((task, out.result.output));
    }
}

#[test]
fn cross_domain_caller_is_rejected() {
    let mut policy = TrustDomainPolicy::new("research.internal");
    policy.members.insert("orchestrator".into());
    let srv = server(Some(policy), ModeSet::encodable());
    let (t, rx) = serve_in_memory(&srv);
    let mut caller = fixtures::default_caller_card();
    caller.trust_domain = "unknown.external".into();
    let err = run_handshake(t, caller_signer(8), &caller, &ModeSet::encodable(), SessionConfig::default(), HelloOptions::default()).unwrap_err();
    match err {
        SessionError::Rejected(outcome) => assert_eq!(outcome.mechanism, MECH_CROSS_DOMAIN),
        other => panic!("expected rejection, got {other:?}"),
    }
    assert!(matches!(rx.recv().unwrap(), Err(SessionError::Rejected(_))));
}

#[test]
fn policy_cost_limit_denies_on_the_server() {
    let mut policy = TrustDomainPolicy::new("research.internal");
    policy.members.insert("orchestrator".into());
    policy.cost_limit_tokens = Some(20);
    let srv = server(Some(policy), ModeSet::encodable());
    let (t, _rx) = serve_in_memory(&srv);
    let mut s = run_handshake(t, caller_signer(9), &fixtures::default_caller_card(), &ModeSet::encodable(), config(PayloadMode::Text), HelloOptions::default()).unwrap();
    s.submit_task(&encode_mode0("short"), "reasoning", None).unwrap();
    let long = encode_mode0(&vec!["token"; 40].join(" "));
    assert!(matches!(s.submit_task(&long, "reasoning", None), Err(SessionError::Denied(_))));
    assert_eq!(s.state(), SessionState::Failed);
}

fn memory_cache(srv: &Arc<DelegateServer>, seed: u64) -> SessionCache {
    let srv = srv.clone();
    let dial = move |_: &str| -> Result<Box<dyn Transport>, SessionError> {
        let (client, server_end) = memory_pair();
        let srv = srv.clone();
        thread::spawn(move || {
            let _ = srv.serve_connection(server_end);
        });
        Ok(Box::new(client))
    };
    SessionCache::new(Arc::new(HandshakeConnector::new(dial, caller_signer(seed), fixtures::default_caller_card(), ModeSet::encodable())))
}

#[test]
fn cache_reuses_by_endpoint_and_config() {
    let srv = server(None, ModeSet::encodable());
    let cache = memory_cache(&srv, 20);
    let cfg = SessionConfig::default();
    let a = cache.get_or_create_session("mem://a", &cfg).unwrap();
    let b = cache.get_or_create_session("mem://a", &cfg).unwrap();
    assert!(Arc::ptr_eq(&a, &b));
    assert_eq!(cache.handshake_count(), 1);

    let full = SessionConfig {
        audit_level: AuditLevel::Full,
        ..cfg.clone()
    };
    cache.get_or_create_session("mem://a", &full).unwrap();
    cache.get_or_create_session("mem://b", &cfg).unwrap();
    assert_eq!(cache.handshake_count(), 3);
    assert_eq!(cache.len(), 3);
}

#[test]
fn cache_replaces_a_session_the_server_ended() {
    let mut policy = TrustDomainPolicy::new("research.internal");
    policy.members.insert("orchestrator".into());
    policy.cost_limit_tokens = Some(10);
    let srv = server(Some(policy), ModeSet::encodable());
    let cache = memory_cache(&srv, 21);
    let cfg = config(PayloadMode::Text);
    let first = cache.get_or_create_session("mem://a", &cfg).unwrap();
    let long = encode_mode0(&vec!["token"; 40].join(" "));
    assert!(first.lock().unwrap().submit_task(&long, "reasoning", None).is_err());
    let second = cache.get_or_create_session("mem://a", &cfg).unwrap();
    assert!(!Arc::ptr_eq(&first, &second));
    assert!(second.lock().unwrap().is_active());
    assert_eq!(cache.handshake_count(), 2);
}

#[test]
fn concurrent_callers_share_one_live_session() {
    let srv = server(None, ModeSet::encodable());
    let cache = Arc::new(memory_cache(&srv, 22));
    let barrier = Arc::new(Barrier::new(8));
    let handles: Vec<_> = (0..8)
        .map(|_| {
            let cache = cache.clone();
            let barrier = barrier.clone();
            thread::spawn(move || {
                barrier.wait();
                cache.get_or_create_session("mem://shared", &SessionConfig::default()).unwrap()
            })
        })
        .collect();
    let sessions: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    for s in &sessions[1..] {
        assert!(Arc::ptr_eq(&sessions[0], s));
    }
    assert_eq!(cache.len(), 1);
    assert!(sessions[0].lock().unwrap().is_active());
}

#[test]
fn full_session_over_tcp() {
    let srv = server(None, ModeSet::encodable());
    let (addr, _h) = srv.spawn("127.0.0.1:0").unwrap();
    let cache = SessionCache::new(Arc::new(
        HandshakeConnector::new(tcp_dial, caller_signer(30), fixtures::default_caller_card(), ModeSet::encodable())
            .with_hello(hello_to(LLAMA_3B)),
    ));
    let endpoint = addr.to_string();
    let session = cache.get_or_create_session(&endpoint, &SessionConfig::default()).unwrap();
    let frame = encode_mode1(&fixtures::sentiment_entry().frame).unwrap();
    let out = session.lock().unwrap().submit_task(&frame, "classification", Some(TaskDomain::Classification)).unwrap();
    assert_eq!(out.result.simulated_latency_ms, 1000);
    assert_eq!(out.result.mode, PayloadMode::SemanticFrame);
    assert_eq!(out.result.provenance.payload_mode_used, PayloadMode::SemanticFrame);
    let again = cache.get_or_create_session(&endpoint, &SessionConfig::default()).unwrap();
    again.lock().unwrap().submit_task(&encode_mode0("second"), "classification", None).unwrap();
    assert_eq!(again.lock().unwrap().context().rounds.len(), 2);
    assert_eq!(cache.handshake_count(), 1);
}

#[test]
fn thousand_envelopes_over_tcp_in_order() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let receiver = thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut t = TcpTransport::from_stream(stream).unwrap();
        (0..1000).map(|_| t.recv().unwrap()).collect::<Vec<_>>()
    });
    let signer = Signer::generate("bulk", NonceSource::seeded(99));
    let mut t = TcpTransport::connect(addr).unwrap();
    let mut sent = Vec::new();
    for i in 0..1000 {
        let env = signer.envelope(MessageType::TaskUpdate, Some("bulk".into()), json!({"seq": i})).unwrap();
        t.send(&env).unwrap();
        sent.push(env);
    }
    let got = receiver.join().unwrap();
    assert_eq!(got, sent);
}
