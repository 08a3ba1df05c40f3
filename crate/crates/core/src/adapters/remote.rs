//! HTTP adapter speaking a minimal chat-completions/embeddings schema.
//!
//! Wire format, bit-exact:
//!
//! Completion request: `POST {endpoint}/v1/chat/completions` with JSON body
//! `{"model": <model>, "messages": [{"role": "user", "content": <prompt>}],
//! "temperature": 0}`. The prompt is the role's template file with every
//! `{{payload}}` replaced by the payload (a template without the placeholder
//! gets the payload appended on a new line; a role without a template sends
//! the payload verbatim). Expected response: `{"choices": [{"message":
//! {"content": <text>}}, ...]}`; the first choice's content is returned.
//!
//! Embedding request: `POST {endpoint}/v1/embeddings` with JSON body
//! `{"model": <model>, "input": [<text>, ...]}`. Expected response:
//! `{"data": [{"embedding": [<f64>, ...], "index": <n>}, ...]}`; entries are
//! reordered by `index` when present and must match the graph's dimension.
//!
//! Auth is `Authorization: Bearer <token>` with the token read from the
//! environment variable named in the config; the token itself never appears
//! in logs. Transport failures and 5xx responses retry with exponential
//! backoff (base 500 ms, factor 2). Setting `FLUXMEM_DEBUG_HTTP=1` writes
//! line-delimited JSON request/response records to stderr.
//!
//! Role adapters (`remote_suite`) exchange engine types as JSON: the
//! attributor must answer with an `EditDecision` document and the executor
//! with a `Feedback` document; the verifier answers `yes`/`no` (or
//! `true`/`false`, `1`/`0`); inductor, rewriter, and reshaper answer with
//! the bare rewritten text.

use std::collections::{BTreeMap, HashMap};
use std::path::PathBuf;
use std::sync::{Arc, Condvar, Mutex, OnceLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{AdapterError, AdapterSuite, Attributor, Embedder, Executor, Inductor, Reshaper, Verifier};
use crate::context::{ActivatedSubgraph, ContextString};
use crate::embedding::EmbeddingVector;
use crate::refinement::{EditDecision, Feedback, ReshapeDirection};

const CHAT_PATH: &str = "/v1/chat/completions";
const EMBED_PATH: &str = "/v1/embeddings";
const DEBUG_ENV: &str = "FLUXMEM_DEBUG_HTTP";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RemoteConfig {
    /// Base URL; the adapter appends the completion/embedding paths.
    pub endpoint: String,
    pub model: String,
    /// Name of the environment variable holding the bearer token.
    pub auth_env: String,
    pub timeout_ms: u64,
    pub max_retries: u32,
    /// First retry delay; doubles per retry.
    pub backoff_base_ms: u64,
    /// Concurrent request cap per endpoint.
    pub max_in_flight: usize,
    /// Role name -> prompt template file.
    pub prompt_templates: BTreeMap<String, PathBuf>,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        RemoteConfig {
            endpoint: String::new(),
            model: String::new(),
            auth_env: String::new(),
            timeout_ms: 30_000,
            max_retries: 3,
            backoff_base_ms: 500,
            max_in_flight: 4,
            prompt_templates: BTreeMap::new(),
        }
    }
}

fn debug_http() -> bool {
    std::env::var(DEBUG_ENV).is_ok_and(|v| v == "1")
}

fn debug_log(record: Value) {
    if debug_http() {
        eprintln!("{record}");
    }
}

/// Counting semaphore bounding in-flight requests per endpoint.
struct Gate {
    permits: Mutex<usize>,
    freed: Condvar,
}

struct GatePass<'a>(&'a Gate);

impl Gate {
    fn new(cap: usize) -> Self {
        Gate { permits: Mutex::new(cap.max(1)), freed: Condvar::new() }
    }

    fn acquire(&self) -> GatePass<'_> {
        let mut permits = self.permits.lock().expect("gate lock poisoned");
        while *permits == 0 {
            permits = self.freed.wait(permits).expect("gate lock poisoned");
        }
        *permits -= 1;
        GatePass(self)
    }
}

impl Drop for GatePass<'_> {
    fn drop(&mut self) {
        let mut permits = self.0.permits.lock().expect("gate lock poisoned");
        *permits += 1;
        self.0.freed.notify_one();
    }
}

fn gate_for(endpoint: &str, cap: usize) -> Arc<Gate> {
    static GATES: OnceLock<Mutex<HashMap<String, Arc<Gate>>>> = OnceLock::new();
    let gates = GATES.get_or_init(|| Mutex::new(HashMap::new()));
    let key = format!("{endpoint}#{cap}");
    let mut map = gates.lock().expect("gate registry poisoned");
    Arc::clone(map.entry(key).or_insert_with(|| Arc::new(Gate::new(cap))))
}

fn join_url(endpoint: &str, path: &str) -> String {
    format!("{}{path}", endpoint.trim_end_matches('/'))
}

fn backoff_delay(base_ms: u64, retry_index: u32) -> Duration {
    Duration::from_millis(base_ms.saturating_mul(1u64 << retry_index.min(16)))
}

fn instantiate(template: &str, payload: &str) -> String {
    if template.contains("{{payload}}") {
        template.replace("{{payload}}", payload)
    } else {
        format!("{template}\n{payload}")
    }
}

fn auth_token(config: &RemoteConfig) -> Result<String, AdapterError> {
    std::env::var(&config.auth_env)
        .map_err(|_| AdapterError::AuthMissing { var: config.auth_env.clone() })
}

fn load_prompt(config: &RemoteConfig, role: &str, payload: &str) -> Result<String, AdapterError> {
    match config.prompt_templates.get(role) {
        None => Ok(payload.to_string()),
        Some(path) => {
            let template = std::fs::read_to_string(path).map_err(|e| {
                AdapterError::Unavailable(format!(
                    "prompt template for role {role} at {}: {e}",
                    path.display()
                ))
            })?;
            Ok(instantiate(&template, payload))
        }
    }
}

enum Attempt {
    Done(Value),
    /// Transport error or 5xx; the flag marks a timeout.
    Retry { error: String, timed_out: bool },
}

fn attempt_post(
    client: &reqwest::blocking::Client,
    url: &str,
    token: &str,
    body: &Value,
) -> Result<Attempt, AdapterError> {
    let sent = client
        .post(url)
        .bearer_auth(token)
        .json(body)
        .send();
    let response = match sent {
        Err(e) => {
            return Ok(Attempt::Retry { error: e.to_string(), timed_out: e.is_timeout() });
        }
        Ok(r) => r,
    };
    let status = response.status();
    let text = match response.text() {
        Err(e) => return Ok(Attempt::Retry { error: e.to_string(), timed_out: e.is_timeout() }),
        Ok(t) => t,
    };
    if status.is_server_error() {
        return Ok(Attempt::Retry { error: format!("HTTP {status}: {text}"), timed_out: false });
    }
    if !status.is_success() {
        return Err(AdapterError::BadResponse(format!("HTTP {status}: {text}")));
    }
    serde_json::from_str::<Value>(&text)
        .map(Attempt::Done)
        .map_err(|e| AdapterError::BadResponse(format!("non-JSON body: {e}")))
}

/// POSTs with auth, timeout, in-flight gating, and retry-with-backoff on
/// transport errors and 5xx. Auth is checked before any network activity.
fn post_json(config: &RemoteConfig, path: &str, body: &Value) -> Result<Value, AdapterError> {
    if config.timeout_ms == 0 {
        return Err(AdapterError::Unavailable("timeout must be positive".into()));
    }
    let token = auth_token(config)?;
    let url = join_url(&config.endpoint, path);
    let client = reqwest::blocking::Client::builder()
        .timeout(Duration::from_millis(config.timeout_ms))
        .build()
        .map_err(|e| AdapterError::Unavailable(format!("http client: {e}")))?;
    let gate = gate_for(&config.endpoint, config.max_in_flight);
    let _pass = gate.acquire();

    let mut attempts = 0u32;
    loop {
        attempts += 1;
        debug_log(json!({
            "event": "http_request",
            "url": url,
            "attempt": attempts,
            "model": config.model,
            "auth_env": config.auth_env,
            "body": body,
        }));
        match attempt_post(&client, &url, &token, body)? {
            Attempt::Done(value) => {
                debug_log(json!({
                    "event": "http_response",
                    "url": url,
                    "attempt": attempts,
                    "ok": true,
                }));
                return Ok(value);
            }
            Attempt::Retry { error, timed_out } => {
                let retries_left = config.max_retries + 1 - attempts;
                debug_log(json!({
                    "event": "http_retry",
                    "url": url,
                    "attempt": attempts,
                    "error": error,
                    "retries_left": retries_left,
                }));
                if retries_left == 0 {
                    return Err(if timed_out {
                        AdapterError::Timeout { millis: config.timeout_ms }
                    } else {
                        AdapterError::RetriesExhausted { attempts, last: error }
                    });
                }
                std::thread::sleep(backoff_delay(config.backoff_base_ms, attempts - 1));
            }
        }
    }
}

fn parse_chat_text(value: &Value) -> Result<String, AdapterError> {
    value
        .get("choices")
        .and_then(Value::as_array)
        .filter(|choices| !choices.is_empty())
        .and_then(|choices| choices[0].pointer("/message/content"))
        .and_then(Value::as_str)
        .map(str::to_string)
        .ok_or_else(|| AdapterError::BadResponse("missing choices[0].message.content".into()))
}

/// One chat completion: the role's template instantiated with the payload,
/// as a single user message at temperature 0.
pub fn remote_complete(role: &str, payload: &str, config: &RemoteConfig) -> Result<String, AdapterError> {
    let token_check = auth_token(config)?;
    drop(token_check);
    let prompt = load_prompt(config, role, payload)?;
    let body = json!({
        "model": config.model,
        "messages": [{"role": "user", "content": prompt}],
        "temperature": 0,
    });
    let value = post_json(config, CHAT_PATH, &body)?;
    parse_chat_text(&value)
}

fn parse_embeddings(value: &Value, dimension: usize) -> Result<Vec<EmbeddingVector>, AdapterError> {
    let data = value
        .get("data")
        .and_then(Value::as_array)
        .ok_or_else(|| AdapterError::BadResponse("missing data array".into()))?;
    let mut rows: Vec<(usize, &Value)> = data
        .iter()
        .enumerate()
        .map(|(i, row)| {
            let index = row.get("index").and_then(Value::as_u64).map_or(i, |n| n as usize);
            (index, row)
        })
        .collect();
    rows.sort_by_key(|(index, _)| *index);
    rows.into_iter()
        .map(|(_, row)| {
            let raw: Vec<f64> = row
                .get("embedding")
                .and_then(Value::as_array)
                .ok_or_else(|| AdapterError::BadResponse("missing embedding array".into()))?
                .iter()
                .map(|x| x.as_f64().ok_or_else(|| AdapterError::BadResponse("non-numeric embedding".into())))
                .collect::<Result<_, _>>()?;
            if raw.len() != dimension {
                return Err(AdapterError::DimensionMismatch { expected: dimension, got: raw.len() });
            }
            Ok(EmbeddingVector::normalized(raw))
        })
        .collect()
}

/// Batch embedding; vectors come back in input order, re-normalized, and
/// checked against the graph's dimension. An empty batch never leaves the
/// process.
pub fn remote_embed(
    texts: &[String],
    config: &RemoteConfig,
    dimension: usize,
) -> Result<Vec<EmbeddingVector>, AdapterError> {
    if texts.is_empty() {
        return Ok(Vec::new());
    }
    let body = json!({"model": config.model, "input": texts});
    let value = post_json(config, EMBED_PATH, &body)?;
    let vectors = parse_embeddings(&value, dimension)?;
    if vectors.len() != texts.len() {
        return Err(AdapterError::BadResponse(format!(
            "asked for {} embeddings, got {}",
            texts.len(),
            vectors.len()
        )));
    }
    Ok(vectors)
}

pub struct RemoteEmbedder {
    config: RemoteConfig,
    dimension: usize,
}

impl RemoteEmbedder {
    pub fn new(config: RemoteConfig, dimension: usize) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        RemoteEmbedder { config, dimension }
    }
}

impl Embedder for RemoteEmbedder {
    fn dimension(&self) -> usize {
        self.dimension
    }

    fn embed(&self, text: &str) -> Result<EmbeddingVector, AdapterError> {
        let mut vectors = remote_embed(&[text.to_string()], &self.config, self.dimension)?;
        vectors
            .pop()
            .ok_or_else(|| AdapterError::BadResponse("empty embedding response".into()))
    }
}

pub struct RemoteVerifier {
    config: RemoteConfig,
}

impl Verifier for RemoteVerifier {
    fn verify(&self, query: &str, content: &str) -> Result<bool, AdapterError> {
        let payload = json!({"query": query, "content": content}).to_string();
        let answer = remote_complete("verify", &payload, &self.config)?;
        match answer.trim().to_lowercase().as_str() {
            "yes" | "true" | "1" => Ok(true),
            "no" | "false" | "0" => Ok(false),
            other => Err(AdapterError::BadResponse(format!("verifier said {other:?}"))),
        }
    }
}

pub struct RemoteInductor {
    config: RemoteConfig,
}

impl Inductor for RemoteInductor {
    fn induce(&self, members: &[String]) -> Result<String, AdapterError> {
        let payload = json!({"members": members}).to_string();
        Ok(remote_complete("induce", &payload, &self.config)?.trim().to_string())
    }

    fn rewrite(&self, skill: &str, successful_member_texts: &[String]) -> Result<String, AdapterError> {
        let payload = json!({"skill": skill, "successful": successful_member_texts}).to_string();
        Ok(remote_complete("rewrite", &payload, &self.config)?.trim().to_string())
    }
}

pub struct RemoteReshaper {
    config: RemoteConfig,
}

impl Reshaper for RemoteReshaper {
    fn reshape(&self, content: &str, direction: ReshapeDirection) -> Result<String, AdapterError> {
        let payload = json!({"content": content, "direction": direction}).to_string();
        Ok(remote_complete("reshape", &payload, &self.config)?.trim().to_string())
    }
}

pub struct RemoteAttributor {
    config: RemoteConfig,
}

impl Attributor for RemoteAttributor {
    fn attribute(&self, feedback: &Feedback, subgraph: &ActivatedSubgraph) -> Result<EditDecision, AdapterError> {
        let payload = json!({
            "feedback": feedback,
            "bypassed": subgraph.bypassed,
            "visibly_empty": subgraph.visibly_empty(),
            "semantic": subgraph.sem,
            "episodic": subgraph.epi,
            "procedural": subgraph.proc,
        })
        .to_string();
        let answer = remote_complete("attribute", &payload, &self.config)?;
        serde_json::from_str(&answer)
            .map_err(|e| AdapterError::BadResponse(format!("attributor answer: {e}")))
    }
}

pub struct RemoteExecutor {
    config: RemoteConfig,
}

impl Executor for RemoteExecutor {
    fn execute(&self, task_id: &str, context: &ContextString) -> Result<Feedback, AdapterError> {
        let payload = json!({"task_id": task_id, "context": context.text}).to_string();
        let answer = remote_complete("execute", &payload, &self.config)?;
        serde_json::from_str(&answer)
            .map_err(|e| AdapterError::BadResponse(format!("executor answer: {e}")))
    }
}

/// All six roles served remotely. The suite declares itself
/// nondeterministic, which exempts it from determinism-dependent tests.
pub fn remote_suite(config: &RemoteConfig, dimension: usize) -> AdapterSuite {
    AdapterSuite {
        embedder: Arc::new(RemoteEmbedder::new(config.clone(), dimension)),
        verifier: Arc::new(RemoteVerifier { config: config.clone() }),
        inductor: Arc::new(RemoteInductor { config: config.clone() }),
        reshaper: Arc::new(RemoteReshaper { config: config.clone() }),
        attributor: Arc::new(RemoteAttributor { config: config.clone() }),
        executor: Arc::new(RemoteExecutor { config: config.clone() }),
        deterministic: false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    fn offline_config() -> RemoteConfig {
        RemoteConfig {
            endpoint: "http://127.0.0.1:1".into(),
            model: "test-model".into(),
            auth_env: "FLUXMEM_TEST_TOKEN_THAT_IS_NEVER_SET".into(),
            ..RemoteConfig::default()
        }
    }

    #[test]
    fn missing_auth_fails_before_any_network_io() {
        // The endpoint is unroutable; reaching it would surface a transport
        // error, so getting AuthMissing proves the short-circuit.
        let config = offline_config();
        match remote_complete("verify", "payload", &config) {
            Err(AdapterError::AuthMissing { var }) => {
                assert_eq!(var, "FLUXMEM_TEST_TOKEN_THAT_IS_NEVER_SET");
            }
            other => panic!("expected AuthMissing, got {other:?}"),
        }
    }

    #[test]
    fn empty_embedding_batch_is_answered_locally() {
        let config = offline_config();
        let out = remote_embed(&[], &config, 16).unwrap();
        assert!(out.is_empty());
    }

    #[test]
    fn templates_substitute_or_append_the_payload() {
        assert_eq!(instantiate("judge this: {{payload}} now", "x y"), "judge this: x y now");
        assert_eq!(
            instantiate("{{payload}} and {{payload}}", "twice"),
            "twice and twice"
        );
        assert_eq!(instantiate("no placeholder", "tail"), "no placeholder\ntail");
    }

    #[test]
    fn endpoint_joining_tolerates_trailing_slash() {
        assert_eq!(join_url("http://h:1/", CHAT_PATH), "http://h:1/v1/chat/completions");
        assert_eq!(join_url("http://h:1", EMBED_PATH), "http://h:1/v1/embeddings");
    }

    #[test]
    fn backoff_doubles_from_its_base() {
        assert_eq!(backoff_delay(500, 0), Duration::from_millis(500));
        assert_eq!(backoff_delay(500, 1), Duration::from_millis(1000));
        assert_eq!(backoff_delay(500, 2), Duration::from_millis(2000));
        assert_eq!(backoff_delay(50, 3), Duration::from_millis(400));
    }

    #[test]
    fn chat_parsing_wants_a_first_choice_with_content() {
        let good = json!({"choices": [{"message": {"content": "hello"}}]});
        assert_eq!(parse_chat_text(&good).unwrap(), "hello");
        for bad in [
            json!({"choices": []}),
            json!({"choices": [{"message": {}}]}),
            json!({"other": 1}),
        ] {
            assert!(matches!(parse_chat_text(&bad), Err(AdapterError::BadResponse(_))));
        }
    }

    #[test]
    fn embedding_parsing_normalizes_and_orders_by_index() {
        let value = json!({"data": [
            {"index": 1, "embedding": [0.0, 2.0]},
            {"index": 0, "embedding": [3.0, 0.0]},
        ]});
        let vectors = parse_embeddings(&value, 2).unwrap();
        assert_eq!(vectors[0].as_slice(), &[1.0, 0.0]);
        assert_eq!(vectors[1].as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn embedding_parsing_rejects_the_wrong_width() {
        let value = json!({"data": [{"embedding": [1.0, 0.0, 0.0]}]});
        assert!(matches!(
            parse_embeddings(&value, 2),
            Err(AdapterError::DimensionMismatch { expected: 2, got: 3 })
        ));
    }

    #[test]
    fn gate_caps_concurrency() {
        let gate = Arc::new(Gate::new(2));
        let live = Arc::new(AtomicUsize::new(0));
        let peak = Arc::new(AtomicUsize::new(0));
        let handles: Vec<_> = (0..8)
            .map(|_| {
                let (gate, live, peak) = (Arc::clone(&gate), Arc::clone(&live), Arc::clone(&peak));
                std::thread::spawn(move || {
                    let _pass = gate.acquire();
                    let now = live.fetch_add(1, Ordering::SeqCst) + 1;
                    peak.fetch_max(now, Ordering::SeqCst);
                    std::thread::sleep(Duration::from_millis(10));
                    live.fetch_sub(1, Ordering::SeqCst);
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert!(peak.load(Ordering::SeqCst) <= 2, "peak {peak:?}");
    }

    #[test]
    fn zero_timeout_is_rejected_up_front() {
        let config = RemoteConfig { timeout_ms: 0, ..offline_config() };
        assert!(matches!(
            post_json(&config, CHAT_PATH, &json!({})),
            Err(AdapterError::Unavailable(_))
        ));
    }
}
