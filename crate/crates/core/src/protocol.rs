//! Interactive expert-prediction protocols: prompt rendering, the note and
//! no-note turn state machines, scripted and remote predictors, and traces.
//!
//! Wire format of the remote client: one `POST` to `base_url` per turn with a
//! JSON body `{"model", "messages": [{"role", "content"}], "temperature",
//! "top_p"?}` and header `Authorization: Bearer $LATENT_LAB_API_KEY`. The reply
//! text is `choices[0].message.content`. No tool schema is sent.

use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::time::{Duration, Instant};

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::envs::ExpertStream;
use crate::error::{Error, Result};
use crate::harness::{regret, RegretTrace};
use crate::reference::{exp_weights_mw, weighted_majority};

pub const API_KEY_VAR: &str = "LATENT_LAB_API_KEY";
pub const NOTE_WORD_LIMIT: usize = 500;
/// The prompts are written for exactly this many experts.
pub const PROTOCOL_EXPERTS: usize = 4;

pub const ONLINE_NOTE: &str = include_str!("../prompts/online_note.txt");
pub const ONLINE_NO_NOTE: &str = include_str!("../prompts/online_no_note.txt");
pub const WEATHER_NOTE: &str = include_str!("../prompts/weather_note.txt");
pub const WEATHER_NO_NOTE: &str = include_str!("../prompts/weather_no_note.txt");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Framing {
    #[default]
    Online,
    Weather,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoteState {
    #[default]
    Note,
    NoNote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistoryMode {
    /// The full conversation is resent on every turn.
    #[default]
    Retained,
    /// Each call carries only the system prompt, the note and the current round.
    Free,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolSpec {
    #[serde(default)]
    pub framing: Framing,
    #[serde(default)]
    pub state: NoteState,
    #[serde(default)]
    pub history: HistoryMode,
}

impl ProtocolSpec {
    pub fn validate(&self) -> Result<()> {
        if self.history == HistoryMode::Free && self.state == NoteState::NoNote {
            return Err(Error::Config("history-free mode carries state only through the note".into()));
        }
        Ok(())
    }

    pub fn has_note(&self) -> bool {
        self.state == NoteState::Note
    }

    /// Wire value of a binary label.
    pub fn label(&self, y: u8) -> Value {
        match self.framing {
            Framing::Online => Value::from(y),
            Framing::Weather => Value::from(if y == 1 { "sunny" } else { "rainy" }),
        }
    }

    /// Inverse of [`label`](Self::label); `None` for anything else.
    pub fn parse_label(&self, v: &Value) -> Option<u8> {
        match (self.framing, v) {
            (Framing::Online, Value::Number(n)) => match n.as_u64() {
                Some(0) => Some(0),
                Some(1) => Some(1),
                _ => None,
            },
            (Framing::Online, Value::String(s)) => match s.trim() {
                "0" => Some(0),
                "1" => Some(1),
                _ => None,
            },
            (Framing::Weather, Value::String(s)) => match s.trim() {
                "sunny" => Some(1),
                "rainy" => Some(0),
                _ => None,
            },
            _ => None,
        }
    }

    fn prediction_turn_type(&self) -> &'static str {
        match self.framing {
            Framing::Online => "prediction",
            Framing::Weather => "forecast",
        }
    }

    fn truth_key(&self) -> &'static str {
        match self.framing {
            Framing::Online => "true_label",
            Framing::Weather => "actual_weather",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptSet {
    pub system: &'static str,
    /// Prediction-turn message with `<note>` and `<Expert_X>` placeholders.
    pub prediction_template: String,
    pub feedback_template: String,
}

pub fn render_prompt(spec: &ProtocolSpec) -> Result<PromptSet> {
    spec.validate()?;
    let system = match (spec.framing, spec.state) {
        (Framing::Online, NoteState::Note) => ONLINE_NOTE,
        (Framing::Online, NoteState::NoNote) => ONLINE_NO_NOTE,
        (Framing::Weather, NoteState::Note) => WEATHER_NOTE,
        (Framing::Weather, NoteState::NoNote) => WEATHER_NO_NOTE,
    };
    let placeholders: Vec<(String, String)> =
        (0..PROTOCOL_EXPERTS).map(|i| (expert_key(i), format!("<{}>", expert_key(i)))).collect();
    let note = spec.has_note().then_some("<note>");
    let raw = |k: &(String, String)| (k.0.clone(), k.1.clone());
    let prediction_template = object(
        [("turn_type".to_string(), quoted(spec.prediction_turn_type()))]
            .into_iter()
            .chain(note.map(|n| ("note".to_string(), quoted(n))))
            .chain(placeholders.iter().map(raw)),
    );
    let feedback_template = if spec.has_note() {
        object(
            [("turn_type".to_string(), quoted("feedback")), ("note".to_string(), quoted("<note>"))]
                .into_iter()
                .chain(placeholders.iter().map(raw))
                .chain([(spec.truth_key().to_string(), "<truth>".to_string())]),
        )
    } else {
        object([
            ("turn_type".to_string(), quoted("feedback")),
            (spec.truth_key().to_string(), "<truth>".to_string()),
        ])
    };
    Ok(PromptSet { system, prediction_template, feedback_template })
}

fn expert_key(i: usize) -> String {
    format!("Expert_{}", char::from(b'A' + i as u8))
}

fn quoted(s: &str) -> String {
    Value::from(s).to_string()
}

/// JSON object text with keys in the given order.
fn object(fields: impl IntoIterator<Item = (String, String)>) -> String {
    let body: Vec<String> = fields.into_iter().map(|(k, v)| format!("{}: {v}", quoted(&k))).collect();
    format!("{{{}}}", body.join(", "))
}

fn advice_fields(spec: &ProtocolSpec, advice: &[u8]) -> Vec<(String, String)> {
    advice.iter().enumerate().map(|(i, &a)| (expert_key(i), spec.label(a).to_string())).collect()
}

pub fn prediction_message(spec: &ProtocolSpec, note: Option<&str>, advice: &[u8]) -> String {
    object(
        [("turn_type".to_string(), quoted(spec.prediction_turn_type()))]
            .into_iter()
            .chain(note.map(|n| ("note".to_string(), quoted(n))))
            .chain(advice_fields(spec, advice)),
    )
}

pub fn feedback_message(spec: &ProtocolSpec, note: Option<&str>, advice: &[u8], truth: u8) -> String {
    let truth = (spec.truth_key().to_string(), spec.label(truth).to_string());
    match note {
        Some(n) => object(
            [("turn_type".to_string(), quoted("feedback")), ("note".to_string(), quoted(n))]
                .into_iter()
                .chain(advice_fields(spec, advice))
                .chain([truth]),
        ),
        None => object([("turn_type".to_string(), quoted("feedback")), truth]),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Message {
    pub role: Role,
    pub content: String,
}

impl Message {
    fn new(role: Role, content: impl Into<String>) -> Self {
        Self { role, content: content.into() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TurnKind {
    Prediction,
    Feedback,
}

/// Everything a predictor may look at for one turn.
#[derive(Debug, Clone, Copy)]
pub struct TurnRequest<'a> {
    pub spec: &'a ProtocolSpec,
    pub kind: TurnKind,
    /// 1-based.
    pub round: usize,
    pub messages: &'a [Message],
    pub advice: &'a [u8],
    /// Feedback turns only.
    pub truth: Option<u8>,
    pub note: Option<&'a str>,
    /// Earlier `(advice, truth)` pairs; empty in history-free mode.
    pub history: &'a [(Vec<u8>, u8)],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reply {
    pub text: String,
    pub attempts: u32,
    pub elapsed_ms: Option<u64>,
}

impl Reply {
    fn local(text: String) -> Self {
        Self { text, attempts: 1, elapsed_ms: None }
    }
}

pub trait Predictor {
    fn name(&self) -> &str;
    fn respond(&mut self, turn: &TurnRequest<'_>) -> Result<Reply>;
}

fn prediction_reply(spec: &ProtocolSpec, y: u8) -> String {
    object([("prediction".to_string(), spec.label(y).to_string())])
}

fn note_reply(note: &str) -> String {
    object([("note".to_string(), quoted(note))])
}

/// Always predicts 1 and writes an empty note.
#[derive(Debug, Clone, Copy, Default)]
pub struct ScriptedAlwaysOne;

impl Predictor for ScriptedAlwaysOne {
    fn name(&self) -> &str {
        "always_one"
    }

    fn respond(&mut self, turn: &TurnRequest<'_>) -> Result<Reply> {
        Ok(Reply::local(match turn.kind {
            TurnKind::Prediction => prediction_reply(turn.spec, 1),
            TurnKind::Feedback => note_reply(""),
        }))
    }
}

/// Multiplicative weights carried in the note as exact decimal weights, or
/// rebuilt from the retained history when there is no note.
#[derive(Debug, Clone)]
pub struct MwWrapper {
    pub eta: f64,
    rng: ChaCha8Rng,
}

impl MwWrapper {
    /// `rng` breaks exact ties, as in the reference baseline.
    pub fn new(eta: f64, rng: ChaCha8Rng) -> Self {
        Self { eta, rng }
    }

    fn weights(&self, turn: &TurnRequest<'_>) -> Result<Vec<f64>> {
        let n = turn.advice.len();
        let uniform = vec![1.0 / n as f64; n];
        match turn.note {
            Some(note) => Ok(parse_weight_note(note, n).unwrap_or(uniform)),
            None => turn.history.iter().try_fold(uniform, |w, (p, y)| {
                let losses: Vec<f64> = p.iter().map(|&x| f64::from(u8::from(x != *y))).collect();
                exp_weights_mw(&w, &losses, self.eta)
            }),
        }
    }
}

fn parse_weight_note(note: &str, n: usize) -> Option<Vec<f64>> {
    let w: Vec<f64> = note.strip_prefix("weights:")?.split_whitespace().map(str::parse).collect::<std::result::Result<_, _>>().ok()?;
    (w.len() == n).then_some(w)
}

impl Predictor for MwWrapper {
    fn name(&self) -> &str {
        "mw"
    }

    fn respond(&mut self, turn: &TurnRequest<'_>) -> Result<Reply> {
        let w = self.weights(turn)?;
        Ok(Reply::local(match (turn.kind, turn.truth) {
            (TurnKind::Prediction, _) => prediction_reply(turn.spec, weighted_majority(&w, turn.advice, &mut self.rng)),
            (TurnKind::Feedback, Some(y)) => {
                let losses: Vec<f64> = turn.advice.iter().map(|&x| f64::from(u8::from(x != y))).collect();
                let next = exp_weights_mw(&w, &losses, self.eta)?;
                let body: Vec<String> = next.iter().map(f64::to_string).collect();
                note_reply(&format!("weights: {}", body.join(" ")))
            }
            (TurnKind::Feedback, None) => return Err(Error::State("feedback turn without a label".into())),
        }))
    }
}

/// Keeps per-expert correct counts in the note, e.g. `A:3/4 B:1/4`, and
/// follows the expert with the most correct calls, lowest letter on ties.
#[derive(Debug, Clone, Copy, Default)]
pub struct CounterNote;

fn parse_counts(note: &str, n: usize) -> (Vec<u32>, u32) {
    let mut correct = vec![0; n];
    let mut total = 0;
    for (i, tok) in note.split_whitespace().take(n).enumerate() {
        if let Some((c, t)) = tok.split_once(':').and_then(|(_, r)| r.split_once('/')) {
            correct[i] = c.parse().unwrap_or(0);
            total = t.parse().unwrap_or(0);
        }
    }
    (correct, total)
}

impl Predictor for CounterNote {
    fn name(&self) -> &str {
        "counter_note"
    }

    fn respond(&mut self, turn: &TurnRequest<'_>) -> Result<Reply> {
        let n = turn.advice.len();
        let (mut correct, mut total) = parse_counts(turn.note.unwrap_or(""), n);
        Ok(Reply::local(match (turn.kind, turn.truth) {
            (TurnKind::Prediction, _) => {
                let best = (0..n).rev().max_by_key(|&i| correct[i]).unwrap_or(0);
                prediction_reply(turn.spec, turn.advice[best])
            }
            (TurnKind::Feedback, y) => {
                let y = y.ok_or_else(|| Error::State("feedback turn without a label".into()))?;
                total += 1;
                for (c, &a) in correct.iter_mut().zip(turn.advice) {
                    *c += u32::from(a == y);
                }
                let body: Vec<String> =
                    correct.iter().enumerate().map(|(i, c)| format!("{}:{c}/{total}", char::from(b'A' + i as u8))).collect();
                note_reply(&body.join(" "))
            }
        }))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteEndpointConfig {
    /// Full URL of the chat-completions endpoint.
    pub base_url: String,
    pub model: String,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default)]
    pub top_p: Option<f64>,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
}

fn default_retries() -> u32 {
    3
}
fn default_timeout() -> f64 {
    60.0
}
fn default_backoff() -> u64 {
    500
}

impl RemoteEndpointConfig {
    pub fn new(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            model: model.into(),
            temperature: 0.0,
            top_p: None,
            max_retries: default_retries(),
            timeout_secs: default_timeout(),
            backoff_ms: default_backoff(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.base_url.starts_with("http://") || self.base_url.starts_with("https://")) {
            return Err(Error::Config(format!("base_url must be an http(s) URL, got `{}`", self.base_url)));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config("temperature must be nonnegative".into()));
        }
        if let Some(p) = self.top_p {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::Config("top_p must lie in (0, 1]".into()));
            }
        }
        if !(self.timeout_secs > 0.0 && self.timeout_secs.is_finite()) {
            return Err(Error::Config("timeout_secs must be positive".into()));
        }
        Ok(())
    }
}

/// Chat-completions client. The credential is held in memory only.
pub struct RemotePredictor {
    pub config: RemoteEndpointConfig,
    key: String,
    client: reqwest::blocking::Client,
}

impl std::fmt::Debug for RemotePredictor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemotePredictor").field("config", &self.config).field("key", &"<redacted>").finish()
    }
}

impl RemotePredictor {
    pub fn from_env(config: RemoteEndpointConfig) -> Result<Self> {
        let key = std::env::var(API_KEY_VAR).map_err(|_| Error::Config(format!("{API_KEY_VAR} is not set")))?;
        Self::with_key(config, key)
    }

    pub fn with_key(config: RemoteEndpointConfig, key: String) -> Result<Self> {
        config.validate()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(config.timeout_secs))
            .build()
            .map_err(|e| Error::Transport(e.to_string()))?;
        Ok(Self { config, key, client })
    }

    fn body(&self, messages: &[Message]) -> String {
        let mut body = serde_json::json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": self.config.temperature,
        });
        if let Some(p) = self.config.top_p {
            body["top_p"] = Value::from(p);
        }
        body.to_string()
    }

    fn attempt(&self, body: &str) -> std::result::Result<String, (bool, String)> {
        let resp = self
            .client
            .post(&self.config.base_url)
            .bearer_auth(&self.key)
            .header("content-type", "application/json")
            .body(body.to_string())
            .send()
            .map_err(|e| (true, e.to_string()))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| (true, e.to_string()))?;
        if !status.is_success() {
            let retry = status.is_server_error() || status.as_u16() == 429;
            return Err((retry, format!("status {status}")));
        }
        let v: Value = serde_json::from_str(&text).map_err(|e| (false, format!("response body is not JSON: {e}")))?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| (false, "response lacks choices[0].message.content".to_string()))
    }

    /// One request with exponential backoff between retries.
    pub fn complete(&self, messages: &[Message]) -> Result<Reply> {
        let body = self.body(messages);
        let start = Instant::now();
        let mut last = String::new();
        for attempt in 0..=self.config.max_retries {
            if attempt > 0 {
                std::thread::sleep(Duration::from_millis(self.config.backoff_ms.saturating_mul(1 << (attempt - 1).min(16))));
            }
            match self.attempt(&body) {
                Ok(text) => {
                    return Ok(Reply {
                        text,
                        attempts: attempt + 1,
                        elapsed_ms: Some(start.elapsed().as_millis() as u64),
                    })
                }
                Err((retry, msg)) => {
                    last = msg;
                    if !retry {
                        break;
                    }
                }
            }
        }
        Err(Error::Transport(last))
    }
}

impl Predictor for RemotePredictor {
    fn name(&self) -> &str {
        "remote"
    }

    fn respond(&mut self, turn: &TurnRequest<'_>) -> Result<Reply> {
        self.complete(turn.messages)
    }
}

/// The single JSON object in `text`, tolerating surrounding prose or fences.
pub fn extract_json_object(text: &str) -> Option<serde_json::Map<String, Value>> {
    let start = text.find('{')?;
    let end = text.rfind('}')?;
    if end < start {
        return None;
    }
    match serde_json::from_str(&text[start..=end]).ok()? {
        Value::Object(m) => Some(m),
        _ => None,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnRecord {
    /// 1-based.
    pub round: usize,
    pub turn: TurnKind,
    pub advice: Vec<u8>,
    pub truth: u8,
    /// Prediction used for scoring; set on prediction turns.
    pub prediction: Option<u8>,
    /// Number of messages sent; zero when the model was not called.
    pub messages_sent: usize,
    pub raw: Option<String>,
    pub parsed: Option<Value>,
    pub parse_failure: bool,
    pub fallback: Option<String>,
    pub transport_error: Option<String>,
    pub note: Option<String>,
    pub note_words: Option<usize>,
    pub note_over_limit: bool,
    pub attempts: u32,
    pub elapsed_ms: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub spec: ProtocolSpec,
    pub predictor: String,
    pub predictions: Vec<u8>,
    pub turns: Vec<TurnRecord>,
    pub regret: RegretTrace,
    pub parse_failures: usize,
    pub transport_failures: usize,
}

/// Majority of the advice; an even split resolves to 1.
fn majority(advice: &[u8]) -> u8 {
    let ones = advice.iter().filter(|&&a| a == 1).count();
    u8::from(2 * ones >= advice.len())
}

fn word_count(s: &str) -> usize {
    s.split_whitespace().count()
}

struct Call {
    reply: Option<Reply>,
    parsed: Option<serde_json::Map<String, Value>>,
    transport_error: Option<String>,
}

fn call(predictor: &mut dyn Predictor, req: &TurnRequest<'_>) -> Result<Call> {
    match predictor.respond(req) {
        Ok(reply) => {
            let parsed = extract_json_object(&reply.text);
            Ok(Call { reply: Some(reply), parsed, transport_error: None })
        }
        Err(Error::Transport(msg)) => Ok(Call { reply: None, parsed: None, transport_error: Some(msg) }),
        Err(e) => Err(e),
    }
}

/// Run `T` rounds of the protocol. Unusable replies fall back to the previous
/// prediction (round 1: majority of the advice) or keep the previous note.
pub fn run_protocol_episode(spec: &ProtocolSpec, predictor: &mut dyn Predictor, stream: &ExpertStream) -> Result<Episode> {
    let prompts = render_prompt(spec)?;
    if stream.n != PROTOCOL_EXPERTS {
        return Err(Error::Argument(format!("the prompts describe {PROTOCOL_EXPERTS} experts, stream has {}", stream.n)));
    }
    let mut conversation = vec![Message::new(Role::System, prompts.system)];
    let mut note = spec.has_note().then(String::new);
    let mut history: Vec<(Vec<u8>, u8)> = Vec::new();
    let mut predictions = Vec::with_capacity(stream.horizon());
    let mut turns = Vec::new();
    let (mut parse_failures, mut transport_failures) = (0, 0);

    for (t, (advice, &y)) in stream.advice.iter().zip(&stream.labels).enumerate() {
        let round = t + 1;
        let user = prediction_message(spec, note.as_deref(), advice);
        let messages = match spec.history {
            HistoryMode::Retained => {
                conversation.push(Message::new(Role::User, user));
                conversation.clone()
            }
            HistoryMode::Free => vec![Message::new(Role::System, prompts.system), Message::new(Role::User, user)],
        };
        let shared: &[(Vec<u8>, u8)] = if spec.history == HistoryMode::Retained { &history } else { &[] };
        let req = TurnRequest {
            spec,
            kind: TurnKind::Prediction,
            round,
            messages: &messages,
            advice,
            truth: None,
            note: note.as_deref(),
            history: shared,
        };
        let c = call(predictor, &req)?;
        let label = c.parsed.as_ref().and_then(|m| m.get("prediction")).and_then(|v| spec.parse_label(v));
        let (prediction, fallback) = match label {
            Some(p) => (p, None),
            None => match predictions.last() {
                Some(&p) => (p, Some("previous_prediction".to_string())),
                None => (majority(advice), Some("majority_vote".to_string())),
            },
        };
        parse_failures += usize::from(c.reply.is_some() && label.is_none());
        transport_failures += usize::from(c.transport_error.is_some());
        if spec.history == HistoryMode::Retained {
            if let Some(r) = &c.reply {
                conversation.push(Message::new(Role::Assistant, r.text.clone()));
            }
        }
        turns.push(TurnRecord {
            round,
            turn: TurnKind::Prediction,
            advice: advice.clone(),
            truth: y,
            prediction: Some(prediction),
            messages_sent: messages.len(),
            raw: c.reply.as_ref().map(|r| r.text.clone()),
            parsed: c.parsed.clone().map(Value::Object),
            parse_failure: c.reply.is_some() && label.is_none(),
            fallback,
            transport_error: c.transport_error,
            note: None,
            note_words: None,
            note_over_limit: false,
            attempts: c.reply.as_ref().map_or(0, |r| r.attempts),
            elapsed_ms: c.reply.as_ref().and_then(|r| r.elapsed_ms),
        });
        predictions.push(prediction);

        let feedback = feedback_message(spec, note.as_deref(), advice, y);
        if let Some(prev) = note.clone() {
            let messages = match spec.history {
                HistoryMode::Retained => {
                    conversation.push(Message::new(Role::User, feedback));
                    conversation.clone()
                }
                HistoryMode::Free => {
                    vec![Message::new(Role::System, prompts.system), Message::new(Role::User, feedback)]
                }
            };
            let shared: &[(Vec<u8>, u8)] = if spec.history == HistoryMode::Retained { &history } else { &[] };
            let req = TurnRequest {
                spec,
                kind: TurnKind::Feedback,
                round,
                messages: &messages,
                advice,
                truth: Some(y),
                note: Some(&prev),
                history: shared,
            };
            let c = call(predictor, &req)?;
            let parsed_note = c.parsed.as_ref().and_then(|m| m.get("note")).and_then(Value::as_str).map(str::to_string);
            let failed = c.reply.is_some() && parsed_note.is_none();
            parse_failures += usize::from(failed);
            transport_failures += usize::from(c.transport_error.is_some());
            let next = parsed_note.clone().unwrap_or(prev);
            if spec.history == HistoryMode::Retained {
                if let Some(r) = &c.reply {
                    conversation.push(Message::new(Role::Assistant, r.text.clone()));
                }
            }
            turns.push(TurnRecord {
                round,
                turn: TurnKind::Feedback,
                advice: advice.clone(),
                truth: y,
                prediction: None,
                messages_sent: messages.len(),
                raw: c.reply.as_ref().map(|r| r.text.clone()),
                parsed: c.parsed.map(Value::Object),
                parse_failure: failed,
                fallback: parsed_note.is_none().then(|| "previous_note".to_string()),
                transport_error: c.transport_error,
                note_words: Some(word_count(&next)),
                note_over_limit: word_count(&next) > NOTE_WORD_LIMIT,
                note: Some(next.clone()),
                attempts: c.reply.as_ref().map_or(0, |r| r.attempts),
                elapsed_ms: c.reply.as_ref().and_then(|r| r.elapsed_ms),
            });
            note = Some(next);
        } else {
            conversation.push(Message::new(Role::User, feedback));
            turns.push(TurnRecord {
                round,
                turn: TurnKind::Feedback,
                advice: advice.clone(),
                truth: y,
                prediction: None,
                messages_sent: 0,
                raw: None,
                parsed: None,
                parse_failure: false,
                fallback: None,
                transport_error: None,
                note: None,
                note_words: None,
                note_over_limit: false,
                attempts: 0,
                elapsed_ms: None,
            });
        }
        history.push((advice.clone(), y));
    }
    let regret = regret(&predictions, stream)?;
    Ok(Episode {
        spec: *spec,
        predictor: predictor.name().to_string(),
        predictions,
        turns,
        regret,
        parse_failures,
        transport_failures,
    })
}

/// One JSON object per line.
pub fn write_traces(path: &Path, turns: &[TurnRecord]) -> Result<()> {
    let mut buf = Vec::new();
    for t in turns {
        serde_json::to_writer(&mut buf, t)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}
