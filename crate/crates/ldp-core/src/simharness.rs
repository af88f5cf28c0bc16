//! Deterministic experiment runners for routing, payload size, session
//! overhead, security and fallback, plus report emission.
//!
//! Every runner is a pure function of its inputs and seed. Reports hold raw
//! per-run rows; aggregates are derived from them and never stored apart.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::delegates::{plan_fallback, FailureType, STEP_DEGRADATION};
use crate::fixtures::{self, CorpusEntry};
use crate::identity::DelegateIdentityCard;
use crate::payload::{encode_a2a, encode_mode0, encode_mode1, PayloadMode};
use crate::routing::{route_a2a, route_ldp, DelegatePool, RandomRouter, RoutingPolicy, TaskSpec};
use crate::trust::{evaluate_mix, generate_scenario_mix};

pub const DEFAULT_SEED: u64 = 42;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("config: {0}")]
    Config(String),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Experiment {
    Rq1,
    Rq2,
    Rq4,
    Rq5,
    Rq6,
}

impl Experiment {
    pub const ALL: [Experiment; 5] = [Experiment::Rq1, Experiment::Rq2, Experiment::Rq4, Experiment::Rq5, Experiment::Rq6];

    pub fn as_str(self) -> &'static str {
        match self {
            Experiment::Rq1 => "rq1",
            Experiment::Rq2 => "rq2",
            Experiment::Rq4 => "rq4",
            Experiment::Rq5 => "rq5",
            Experiment::Rq6 => "rq6",
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Experiment {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| format!("unknown experiment {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub condition: String,
    pub metric: String,
    pub value: f64,
}

/// Mean and population standard deviation of one (condition, metric) group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub condition: String,
    pub metric: String,
    pub n: usize,
    pub mean: f64,
    pub stddev: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub experiment: String,
    pub seed: u64,
    pub rows: Vec<ReportRow>,
    pub aggregates: Vec<Aggregate>,
}

impl ExperimentReport {
    pub fn new(experiment: Experiment, seed: u64) -> Self {
        Self {
            experiment: experiment.as_str().to_owned(),
            seed,
            rows: Vec::new(),
            aggregates: Vec::new(),
        }
    }

    pub fn push(&mut self, condition: impl Into<String>, metric: impl Into<String>, value: f64) {
        self.rows.push(ReportRow {
            condition: condition.into(),
            metric: metric.into(),
            value,
        });
    }

    /// Recomputes `aggregates` from `rows`, ordered by (condition, metric).
    pub fn finish(mut self) -> Self {
        self.aggregates = aggregate_rows(&self.rows);
        self
    }

    pub fn aggregate(&self, condition: &str, metric: &str) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.condition == condition && a.metric == metric)
    }

    pub fn mean(&self, condition: &str, metric: &str) -> Option<f64> {
        self.aggregate(condition, metric).map(|a| a.mean)
    }

    pub fn values<'a>(&'a self, condition: &'a str, metric: &'a str) -> impl Iterator<Item = f64> + 'a {
        self.rows
            .iter()
            .filter(move |r| r.condition == condition && r.metric == metric)
            .map(|r| r.value)
    }
}

pub fn aggregate_rows(rows: &[ReportRow]) -> Vec<Aggregate> {
    let mut groups: BTreeMap<(&str, &str), Vec<f64>> = BTreeMap::new();
    for r in rows {
        groups.entry((&r.condition, &r.metric)).or_default().push(r.value);
    }
    groups
        .into_iter()
        .map(|((condition, metric), xs)| {
            let n = xs.len();
            let mean = xs.iter().sum::<f64>() / n as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
            Aggregate {
                condition: condition.to_owned(),
                metric: metric.to_owned(),
                n,
                mean,
                stddev: var.sqrt(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(format!("unknown report format {other:?}")),
        }
    }
}

/// CSV carries per-run rows followed by `<metric>.mean`, `<metric>.stddev`
/// rows; JSON is the full report.
pub fn render_report(report: &ExperimentReport, format: ReportFormat) -> Result<Vec<u8>, SimError> {
    match format {
        ReportFormat::Json => {
            let mut out = serde_json::to_vec_pretty(report).map_err(|e| SimError::Config(e.to_string()))?;
            out.push(b'\n');
            Ok(out)
        }
        ReportFormat::Csv => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(["experiment", "condition", "metric", "value"])?;
            for r in &report.rows {
                w.write_record([&report.experiment, &r.condition, &r.metric, &r.value.to_string()])?;
            }
            for a in &report.aggregates {
                for (suffix, v) in [("mean", a.mean), ("stddev", a.stddev)] {
                    w.write_record([&report.experiment, &a.condition, &format!("{}.{suffix}", a.metric), &v.to_string()])?;
                }
            }
            w.into_inner().map_err(|e| SimError::Io(e.into_error()))
        }
    }
}

pub fn write_report(report: &ExperimentReport, format: ReportFormat, path: &Path) -> Result<(), SimError> {
    std::fs::write(path, render_report(report, format)?)?;
    Ok(())
}

/// Routes every task under each policy. The random policy draws one stream
/// from `seed` across the whole task list.
pub fn run_rq1(pool: &DelegatePool, tasks: &[TaskSpec], seed: u64) -> ExperimentReport {
    let mut report = ExperimentReport::new(Experiment::Rq1, seed);
    let mut random = RandomRouter::new(seed);
    for policy in RoutingPolicy::ALL {
        for task in tasks {
            let decision = match policy {
                RoutingPolicy::Ldp => route_ldp(pool, task),
                RoutingPolicy::A2a => route_a2a(pool, task),
                RoutingPolicy::Random => random.route(pool, task),
            };
            let condition = format!("{policy}/{}", task.difficulty);
            match decision {
                Ok(d) => {
                    report.push(&condition, "expected_latency_ms", d.expected_latency_ms as f64);
                    report.push(&condition, format!("selected.{}", d.chosen), 1.0);
                }
                Err(_) => report.push(&condition, "routing_error", 1.0),
            }
        }
    }
    report.finish()
}

/// Token estimates for the three encodings of each corpus entry.
pub fn run_rq2(corpus: &[CorpusEntry]) -> ExperimentReport {
    let mut report = ExperimentReport::new(Experiment::Rq2, 0);
    for entry in corpus {
        let text = encode_mode0(&entry.text).token_estimate() as f64;
        let a2a = encode_a2a(&entry.text).token_estimate() as f64;
        let frame = match encode_mode1(&entry.frame) {
            Ok(p) => p.token_estimate() as f64,
            Err(_) => {
                report.push(&entry.name, "invalid_frame", 1.0);
                continue;
            }
        };
        report.push(&entry.name, "text_tokens", text);
        report.push(&entry.name, "frame_tokens", frame);
        report.push(&entry.name, "a2a_tokens", a2a);
        for cond in [entry.name.as_str(), "all"] {
            report.push(cond, "frame_text_ratio", frame / text);
            report.push(cond, "frame_a2a_ratio", frame / a2a);
        }
    }
    report.finish()
}

/// Synthetic multi-round conversation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TranscriptModel {
    pub rounds: u32,
    pub per_round_request_tokens: u64,
    pub per_round_response_tokens: u64,
    pub handshake_tokens: u64,
    /// Context re-sent per prior round by a stateless caller. `None` means
    /// the full request and response of every prior round.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub resent_tokens_per_round: Option<u64>,
}

impl Default for TranscriptModel {
    /// The calibrated model.
    fn default() -> Self {
        Self {
            rounds: 10,
            per_round_request_tokens: 649,
            per_round_response_tokens: 649,
            handshake_tokens: 60,
            resent_tokens_per_round: Some(184),
        }
    }
}

/// Round counts always reported when the model reaches them.
pub const RQ4_CHECKPOINTS: [u32; 3] = [3, 5, 10];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OverheadPoint {
    pub rounds: u32,
    pub session_tokens: u64,
    pub session_overhead_tokens: u64,
    pub session_messages: u64,
    pub stateless_tokens: u64,
    pub stateless_overhead_tokens: u64,
    pub stateless_messages: u64,
}

impl OverheadPoint {
    pub fn stateless_overhead_fraction(&self) -> f64 {
        self.stateless_overhead_tokens as f64 / self.stateless_tokens as f64
    }

    pub fn session_overhead_fraction(&self) -> f64 {
        self.session_overhead_tokens as f64 / self.session_tokens as f64
    }
}

impl TranscriptModel {
    pub fn validate(&self) -> Result<(), SimError> {
        let positive = [
            ("rounds", self.rounds as u64),
            ("per_round_request_tokens", self.per_round_request_tokens),
            ("per_round_response_tokens", self.per_round_response_tokens),
            ("handshake_tokens", self.handshake_tokens),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(SimError::Config(format!("{name} must be positive")));
            }
        }
        if self.resent_tokens_per_round == Some(0) {
            return Err(SimError::Config("resent_tokens_per_round must be positive when set".into()));
        }
        Ok(())
    }

    fn resend_per_prior_round(&self) -> u64 {
        self.resent_tokens_per_round
            .unwrap_or(self.per_round_request_tokens + self.per_round_response_tokens)
    }

    /// Both conditions after `n` rounds. Overhead is re-sent context, which
    /// a session never pays.
    pub fn at(&self, n: u32) -> OverheadPoint {
        let n64 = n as u64;
        let per_round = self.per_round_request_tokens + self.per_round_response_tokens;
        let resent = self.resend_per_prior_round() * n64 * n64.saturating_sub(1) / 2;
        OverheadPoint {
            rounds: n,
            session_tokens: self.handshake_tokens + per_round * n64,
            session_overhead_tokens: 0,
            session_messages: 2 * n64 + 4,
            stateless_tokens: per_round * n64 + resent,
            stateless_overhead_tokens: resent,
            stateless_messages: 2 * n64,
        }
    }

    pub fn checkpoints(&self) -> Vec<u32> {
        let mut out: Vec<u32> = RQ4_CHECKPOINTS.into_iter().filter(|&n| n <= self.rounds).collect();
        if !out.contains(&self.rounds) {
            out.push(self.rounds);
        }
        out
    }
}

pub fn run_rq4(model: &TranscriptModel) -> Result<ExperimentReport, SimError> {
    model.validate()?;
    let mut report = ExperimentReport::new(Experiment::Rq4, 0);
    for n in model.checkpoints() {
        let p = model.at(n);
        let ldp = format!("ldp/{n}_rounds");
        report.push(&ldp, "tokens", p.session_tokens as f64);
        report.push(&ldp, "overhead_tokens", p.session_overhead_tokens as f64);
        report.push(&ldp, "overhead_pct", 100.0 * p.session_overhead_fraction());
        report.push(&ldp, "messages", p.session_messages as f64);
        let a2a = format!("a2a/{n}_rounds");
        report.push(&a2a, "tokens", p.stateless_tokens as f64);
        report.push(&a2a, "overhead_tokens", p.stateless_overhead_tokens as f64);
        report.push(&a2a, "overhead_pct", 100.0 * p.stateless_overhead_fraction());
        report.push(&a2a, "messages", p.stateless_messages as f64);
        report.push(&a2a, "extra_tokens_vs_session", p.stateless_tokens as f64 - p.session_tokens as f64);
    }
    Ok(report.finish())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Rq5Config {
    pub include_insiders: bool,
}

impl Default for Rq5Config {
    fn default() -> Self {
        Self { include_insiders: true }
    }
}

/// Detection per scenario: `detected` rows for attacks, `false_positive`
/// rows for benign controls, under `ldp`, `a2a_bearer`, and per attack kind.
pub fn run_rq5(config: &Rq5Config, seed: u64) -> ExperimentReport {
    let mix = generate_scenario_mix(seed, config.include_insiders);
    let mut report = ExperimentReport::new(Experiment::Rq5, seed);
    for r in evaluate_mix(&mix) {
        for (cond, outcome) in [("ldp", &r.ldp), ("a2a_bearer", &r.bearer)] {
            if r.malicious {
                let hit = if outcome.detected { 1.0 } else { 0.0 };
                report.push(cond, "detected", hit);
                report.push(format!("{cond}/{}", r.kind), "detected", hit);
            } else {
                report.push(cond, "false_positive", if outcome.false_positive { 1.0 } else { 0.0 });
            }
        }
    }
    report.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Protocol {
    Ldp,
    A2a,
}

impl Protocol {
    pub fn as_str(self) -> &'static str {
        match self {
            Protocol::Ldp => "ldp",
            Protocol::A2a => "a2a",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FallbackScenario {
    pub failure: FailureType,
    pub starting_mode: PayloadMode,
    pub protocol: Protocol,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FallbackRun {
    pub completed: bool,
    pub recovery_ms: u64,
    pub degradation: f64,
    pub final_mode: Option<PayloadMode>,
}

/// Ten failures of each type, each run under both protocols.
pub fn default_fallback_mix() -> Vec<FallbackScenario> {
    let mut out = Vec::with_capacity(80);
    for protocol in [Protocol::Ldp, Protocol::A2a] {
        for failure in FailureType::ALL {
            for i in 0..10 {
                out.push(FallbackScenario {
                    failure,
                    starting_mode: failure.default_start_mode(),
                    protocol,
                    seed: i,
                });
            }
        }
    }
    out
}

/// Outcome of one scenario. LDP walks the fallback chain; A2A has no chain
/// and completes by luck at the per-type success rate.
pub fn run_fallback(scenario: &FallbackScenario, seed: u64) -> FallbackRun {
    match scenario.protocol {
        Protocol::Ldp => match plan_fallback(scenario.failure, scenario.starting_mode) {
            Ok(steps) => FallbackRun {
                completed: true,
                recovery_ms: steps.iter().map(|s| s.recovery_ms).sum(),
                degradation: steps.len() as f64 * STEP_DEGRADATION,
                final_mode: Some(steps.last().map_or(scenario.starting_mode, |s| s.to)),
            },
            Err(_) => FallbackRun {
                completed: false,
                recovery_ms: 0,
                degradation: 1.0,
                final_mode: None,
            },
        },
        Protocol::A2a => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ scenario.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let ok = rng.random_bool(scenario.failure.a2a_success_probability());
            FallbackRun {
                completed: ok,
                recovery_ms: 0,
                degradation: if ok { 0.0 } else { 1.0 },
                final_mode: ok.then_some(scenario.starting_mode),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Rq6Config {
    pub scenarios: Vec<FallbackScenario>,
}

impl Default for Rq6Config {
    fn default() -> Self {
        Self {
            scenarios: default_fallback_mix(),
        }
    }
}

pub fn run_rq6(scenarios: &[FallbackScenario], seed: u64) -> ExperimentReport {
    let mut report = ExperimentReport::new(Experiment::Rq6, seed);
    for s in scenarios {
        let run = run_fallback(s, seed);
        for cond in [s.protocol.as_str().to_owned(), format!("{}/{}", s.protocol.as_str(), s.failure)] {
            report.push(&cond, "completed", if run.completed { 1.0 } else { 0.0 });
            report.push(&cond, "degradation", run.degradation);
            if s.protocol == Protocol::Ldp && run.completed {
                report.push(&cond, "recovery_ms", run.recovery_ms as f64);
            }
        }
    }
    report.finish()
}

/// Completion fraction of `trials` A2A scenarios of one failure type.
pub fn a2a_completion_frequency(failure: FailureType, trials: u64, seed: u64) -> f64 {
    let done = (0..trials)
        .filter(|&i| {
            let s = FallbackScenario {
                failure,
                starting_mode: failure.default_start_mode(),
                protocol: Protocol::A2a,
                seed: i,
            };
            run_fallback(&s, seed).completed
        })
        .count();
    done as f64 / trials as f64
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Rq1Config {
    pub pool: Option<Vec<DelegateIdentityCard>>,
    pub tasks: Option<Vec<TaskSpec>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Rq2Config {
    pub corpus: Option<Vec<CorpusEntry>>,
}

fn parse_config<T: for<'de> Deserialize<'de> + Default>(text: Option<&str>) -> Result<T, SimError> {
    match text {
        None => Ok(T::default()),
        Some(t) => serde_json::from_str(t).map_err(|e| SimError::Config(e.to_string())),
    }
}

/// Runs one experiment with bundled defaults, overridden by `config_json`.
pub fn run_experiment(experiment: Experiment, seed: u64, config_json: Option<&str>) -> Result<ExperimentReport, SimError> {
    match experiment {
        Experiment::Rq1 => {
            let cfg: Rq1Config = parse_config(config_json)?;
            let pool = match cfg.pool {
                Some(cards) => DelegatePool::new(cards).map_err(|e| SimError::Config(e.to_string()))?,
                None => fixtures::default_pool(),
            };
            let tasks = cfg.tasks.unwrap_or_else(fixtures::rq1_tasks);
            Ok(run_rq1(&pool, &tasks, seed))
        }
        Experiment::Rq2 => {
            let cfg: Rq2Config = parse_config(config_json)?;
            let mut report = run_rq2(&cfg.corpus.unwrap_or_else(fixtures::rq2_corpus));
            report.seed = seed;
            Ok(report)
        }
        Experiment::Rq4 => {
            let model: TranscriptModel = parse_config(config_json)?;
            let mut report = run_rq4(&model)?;
            report.seed = seed;
            Ok(report)
        }
        Experiment::Rq5 => Ok(run_rq5(&parse_config(config_json)?, seed)),
        Experiment::Rq6 => {
            let cfg: Rq6Config = parse_config(config_json)?;
            Ok(run_rq6(&cfg.scenarios, seed))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{LLAMA_3B, QWEN3_8B};
    use crate::routing::Difficulty;

    #[test]
    fn rq1_latency_separation() {
        let r = run_rq1(&fixtures::default_pool(), &fixtures::rq1_tasks(), DEFAULT_SEED);
        assert_eq!(r.mean("ldp/easy", "expected_latency_ms"), Some(1000.0));
        assert!(r.mean("a2a/easy", "expected_latency_ms").unwrap() >= 4000.0);
        assert_eq!(r.aggregate("ldp/hard", &format!("selected.{QWEN3_8B}")).unwrap().n, 10);
        assert_eq!(r.aggregate("ldp/easy", &format!("selected.{LLAMA_3B}")).unwrap().n, 10);
        assert!(r.rows.iter().all(|row| row.metric != "routing_error"));
    }

    #[test]
    fn rq1_random_reproducible() {
        let pool = fixtures::default_pool();
        let tasks = fixtures::rq1_tasks();
        assert_eq!(run_rq1(&pool, &tasks, 7), run_rq1(&pool, &tasks, 7));
        let by = |seed| {
            run_rq1(&pool, &tasks, seed)
                .rows
                .into_iter()
                .filter(|r| r.condition.starts_with("random") && r.metric.starts_with("selected"))
                .collect::<Vec<_>>()
        };
        assert_ne!(by(1), by(2));
    }

    #[test]
    fn rq1_errors_are_rows() {
        let mut tasks = fixtures::rq1_tasks();
        tasks[0].required_skill = "vision".into();
        tasks[0].difficulty = Difficulty::Easy;
        let r = run_rq1(&fixtures::default_pool(), &tasks[..1], 1);
        assert_eq!(r.values("ldp/easy", "routing_error").count(), 1);
    }

    #[test]
    fn rq2_ratios() {
        let r = run_rq2(&[fixtures::sentiment_entry()]);
        assert!(r.mean("all", "frame_text_ratio").unwrap() <= 0.62);
        assert!(r.mean("all", "frame_a2a_ratio").unwrap() <= 0.67);
        let empty = run_rq2(&[]);
        assert!(empty.rows.is_empty() && empty.aggregates.is_empty());
    }

    /// Independent closed form: Σ_{k=1..n} (k-1)·r = r·n(n-1)/2.
    fn oracle_resent(r: u64, n: u64) -> u64 {
        (1..=n).map(|k| (k - 1) * r).sum()
    }

    #[test]
    fn rq4_matches_oracle_and_trend() {
        let m = TranscriptModel::default();
        let mut prev = 0.0;
        for n in RQ4_CHECKPOINTS {
            let p = m.at(n);
            assert_eq!(p.stateless_overhead_tokens, oracle_resent(184, n as u64));
            assert_eq!(p.session_overhead_tokens, 0);
            assert_eq!(p.session_messages, 2 * n as u64 + 4);
            assert_eq!(p.stateless_messages, 2 * n as u64);
            assert!(p.stateless_overhead_fraction() > prev);
            prev = p.stateless_overhead_fraction();
        }
        let ten = m.at(10).stateless_overhead_fraction();
        assert!((0.35..=0.43).contains(&ten), "{ten}");
    }

    #[test]
    fn rq4_full_history_resend() {
        let m = TranscriptModel {
            resent_tokens_per_round: None,
            ..TranscriptModel::default()
        };
        let p = m.at(10);
        assert_eq!(p.stateless_overhead_tokens, oracle_resent(1298, 10));
        assert!(p.stateless_overhead_fraction() >= 0.35);
        let one = m.at(1);
        assert_eq!(one.session_tokens - one.stateless_tokens, m.handshake_tokens);
    }

    #[test]
    fn rq4_report_rows() {
        let r = run_rq4(&TranscriptModel::default()).unwrap();
        assert_eq!(r.mean("ldp/10_rounds", "overhead_pct"), Some(0.0));
        assert_eq!(r.mean("ldp/5_rounds", "overhead_pct"), Some(0.0));
        assert!(run_rq4(&TranscriptModel { rounds: 0, ..Default::default() }).is_err());
        let short = TranscriptModel { rounds: 4, ..Default::default() };
        assert_eq!(short.checkpoints(), vec![3, 4]);
    }

    #[test]
    fn rq5_rates() {
        let r = run_rq5(&Rq5Config::default(), DEFAULT_SEED);
        assert_eq!(r.mean("ldp", "detected"), Some(0.96));
        assert_eq!(r.mean("ldp", "false_positive"), Some(0.0));
        assert_eq!(r.mean("a2a_bearer", "detected"), Some(0.06));
        let clean = run_rq5(&Rq5Config { include_insiders: false }, DEFAULT_SEED);
        assert_eq!(clean.mean("ldp", "detected"), Some(1.0));
        for seed in 0..5 {
            assert_eq!(run_rq5(&Rq5Config::default(), seed).mean("ldp", "false_positive"), Some(0.0));
        }
    }

    #[test]
    fn rq6_defaults() {
        let r = run_rq6(&default_fallback_mix(), DEFAULT_SEED);
        assert_eq!(r.mean("ldp", "completed"), Some(1.0));
        let rec = r.mean("ldp", "recovery_ms").unwrap();
        assert!((rec - 112.5).abs() < 1e-9);
        let deg = r.aggregate("ldp", "degradation").unwrap();
        assert!((deg.mean - 0.16).abs() < 1e-9);
        assert!((deg.stddev - 0.0924).abs() < 1e-3, "{}", deg.stddev);
        assert_eq!(r.mean("a2a/CodecIncompatibility", "completed"), Some(0.0));
        assert_eq!(r.mean("a2a/TimeoutDegradation", "completed"), Some(0.0));
        assert_eq!(r.mean("ldp/SchemaMismatch", "recovery_ms"), Some(50.0));
    }

    #[test]
    fn a2a_frequencies() {
        let s = a2a_completion_frequency(FailureType::SchemaMismatch, 10_000, DEFAULT_SEED);
        let v = a2a_completion_frequency(FailureType::VersionMismatch, 10_000, DEFAULT_SEED);
        assert!((s - 0.33).abs() <= 0.02, "{s}");
        assert!((v - 0.50).abs() <= 0.02, "{v}");
    }

    #[test]
    fn timeout_at_text_fails_under_ldp() {
        let s = FallbackScenario {
            failure: FailureType::TimeoutDegradation,
            starting_mode: PayloadMode::Text,
            protocol: Protocol::Ldp,
            seed: 0,
        };
        assert!(!run_fallback(&s, 1).completed);
    }

    #[test]
    fn reports_are_byte_stable() {
        for e in Experiment::ALL {
            let a = run_experiment(e, 42, None).unwrap();
            let b = run_experiment(e, 42, None).unwrap();
            for f in [ReportFormat::Csv, ReportFormat::Json] {
                assert_eq!(render_report(&a, f).unwrap(), render_report(&b, f).unwrap(), "{e}");
            }
        }
    }

    #[test]
    fn csv_header_and_json_round_trip() {
        let r = run_experiment(Experiment::Rq4, 42, None).unwrap();
        let csv = String::from_utf8(render_report(&r, ReportFormat::Csv).unwrap()).unwrap();
        assert_eq!(csv.lines().next(), Some("experiment,condition,metric,value"));
        let json = render_report(&r, ReportFormat::Json).unwrap();
        let back: ExperimentReport = serde_json::from_slice(&json).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn aggregates_recompute_from_rows() {
        let r = run_experiment(Experiment::Rq6, 42, None).unwrap();
        assert_eq!(aggregate_rows(&r.rows), r.aggregates);
    }

    #[test]
    fn config_overrides() {
        let r = run_experiment(Experiment::Rq4, 1, Some(r#"{"rounds": 5}"#)).unwrap();
        assert!(r.aggregate("ldp/10_rounds", "tokens").is_none());
        assert!(run_experiment(Experiment::Rq4, 1, Some(r#"{"bogus": 5}"#)).is_err());
        let r = run_experiment(Experiment::Rq5, 42, Some(r#"{"include_insiders": false}"#)).unwrap();
        assert_eq!(r.mean("ldp", "detected"), Some(1.0));
    }
}
