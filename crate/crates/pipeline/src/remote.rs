//! Clients for commercial face-verification services.
//!
//! Each provider adapter builds its own request and parses its own response
//! shape. Callers only see [`RemoteClient::verify`], which returns a
//! confidence in `[0, 100]`.
//!
//! Credentials are read from the environment at request time. They are held
//! only in memory, never serialized, and never logged.

use std::fmt;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use advstyle_core::FaceImage;
use base64::engine::general_purpose::STANDARD;
use base64::Engine as _;
use hmac::{Hmac, KeyInit, Mac};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Provider {
    Facepp,
    Aliyun,
    Generic,
}

impl Provider {
    pub fn as_str(self) -> &'static str {
        match self {
            Provider::Facepp => "facepp",
            Provider::Aliyun => "aliyun",
            Provider::Generic => "generic",
        }
    }

    /// Default `(key, secret)` environment variable names.
    pub fn default_env(self) -> (&'static str, Option<&'static str>) {
        match self {
            Provider::Facepp => ("FACEPP_API_KEY", Some("FACEPP_API_SECRET")),
            Provider::Aliyun => ("ALIYUN_ACCESS_KEY_ID", Some("ALIYUN_ACCESS_KEY_SECRET")),
            Provider::Generic => ("ADVSTYLE_VERIFY_TOKEN", None),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetryPolicy {
    /// Retries after the first attempt.
    pub max_retries: u32,
    pub initial_backoff_ms: u64,
    pub multiplier: f64,
    pub max_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_retries: 3, initial_backoff_ms: 250, multiplier: 2.0, max_backoff_ms: 8000 }
    }
}

impl RetryPolicy {
    /// Wait before retry number `retry` (0-based).
    pub fn backoff(&self, retry: u32) -> Duration {
        let ms = self.initial_backoff_ms as f64 * self.multiplier.powi(retry as i32);
        Duration::from_millis(ms.min(self.max_backoff_ms as f64) as u64)
    }
}

/// Only environment variable *names* live here, so the config can be saved
/// and shared without leaking anything.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RemoteVerifierConfig {
    pub provider: Provider,
    pub endpoint: String,
    pub key_env: String,
    #[serde(default)]
    pub secret_env: Option<String>,
    /// Request starts per second, retries included.
    pub rate_limit: f64,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_timeout")]
    pub timeout_ms: u64,
}

fn default_in_flight() -> usize {
    2
}

fn default_timeout() -> u64 {
    30_000
}

impl RemoteVerifierConfig {
    pub fn new(provider: Provider, endpoint: impl Into<String>) -> Self {
        let (key, secret) = provider.default_env();
        Self {
            provider,
            endpoint: endpoint.into(),
            key_env: key.into(),
            secret_env: secret.map(Into::into),
            rate_limit: 1.0,
            max_in_flight: default_in_flight(),
            retry: RetryPolicy::default(),
            timeout_ms: default_timeout(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rate_limit.is_finite() && self.rate_limit > 0.0) {
            return Err(Error::invalid(format!("rate limit must be positive, got {}", self.rate_limit)));
        }
        if self.max_in_flight == 0 {
            return Err(Error::invalid("max_in_flight must be at least 1"));
        }
        if !(self.retry.multiplier.is_finite() && self.retry.multiplier >= 1.0) {
            return Err(Error::invalid("retry multiplier must be at least 1"));
        }
        if !(self.endpoint.starts_with("http://") || self.endpoint.starts_with("https://")) {
            return Err(Error::invalid(format!("endpoint must be an http(s) URL: {}", self.endpoint)));
        }
        if self.provider != Provider::Generic && self.secret_env.is_none() {
            return Err(Error::invalid(format!("{} needs a secret variable", self.provider.as_str())));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse { what: "remote verifier config".into(), message: e.to_string() })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("remote config serializes")
    }
}

struct Credentials {
    key: String,
    secret: Option<String>,
}

impl fmt::Debug for Credentials {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Credentials(..)")
    }
}

impl Credentials {
    fn from_env(cfg: &RemoteVerifierConfig) -> Result<Self> {
        let var = |name: &str| std::env::var(name).map_err(|_| Error::MissingCredential(name.to_string()));
        let key = var(&cfg.key_env)?;
        let secret = cfg.secret_env.as_deref().map(var).transpose()?;
        Ok(Self { key, secret })
    }

    fn secret(&self) -> &str {
        self.secret.as_deref().unwrap_or_default()
    }

    /// Replaces any credential that a provider echoed back.
    fn scrub(&self, text: &str) -> String {
        let mut out = text.replace(&self.key, "[redacted]");
        if let Some(s) = self.secret.as_deref().filter(|s| !s.is_empty()) {
            out = out.replace(s, "[redacted]");
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Verification {
    /// Provider confidence in `[0, 100]`.
    pub confidence: f64,
    /// Attempts beyond the first.
    pub retries: u32,
}

struct Gate {
    next_start: Mutex<Option<Instant>>,
    in_flight: Mutex<usize>,
    freed: Condvar,
}

/// A provider client. Share one instance between workers so rate limit and
/// in-flight cap apply across all of them.
pub struct RemoteClient {
    cfg: RemoteVerifierConfig,
    agent: ureq::Agent,
    gate: Gate,
}

enum Attempt {
    Done(f64),
    Retry(String),
    RateLimited,
}

impl RemoteClient {
    pub fn new(cfg: RemoteVerifierConfig) -> Result<Self> {
        cfg.validate()?;
        let agent = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_millis(cfg.timeout_ms)))
            .build()
            .into();
        let gate = Gate { next_start: Mutex::new(None), in_flight: Mutex::new(0), freed: Condvar::new() };
        Ok(Self { cfg, agent, gate })
    }

    pub fn config(&self) -> &RemoteVerifierConfig {
        &self.cfg
    }

    fn wait_for_slot(&self) {
        let interval = Duration::from_secs_f64(1.0 / self.cfg.rate_limit);
        let mut next = self.gate.next_start.lock().expect("rate gate");
        let now = Instant::now();
        let start = next.map_or(now, |t| t.max(now));
        *next = Some(start + interval);
        drop(next);
        std::thread::sleep(start.saturating_duration_since(now));
    }

    fn acquire(&self) {
        let mut n = self.gate.in_flight.lock().expect("in-flight gate");
        while *n >= self.cfg.max_in_flight {
            n = self.gate.freed.wait(n).expect("in-flight gate");
        }
        *n += 1;
    }

    fn release(&self) {
        *self.gate.in_flight.lock().expect("in-flight gate") -= 1;
        self.gate.freed.notify_one();
    }

    /// Compares two faces. Transient failures (transport errors, HTTP 5xx,
    /// rate-limit replies) are retried with exponential backoff.
    pub fn verify(&self, a: &FaceImage, b: &FaceImage) -> Result<Verification> {
        let creds = Credentials::from_env(&self.cfg)?;
        let images = [STANDARD.encode(a.encode_png()), STANDARD.encode(b.encode_png())];
        let attempts = self.cfg.retry.max_retries + 1;
        let mut last = String::new();
        let mut rate_limited = false;
        for attempt in 0..attempts {
            if attempt > 0 {
                std::thread::sleep(self.cfg.retry.backoff(attempt - 1));
            }
            self.wait_for_slot();
            self.acquire();
            let outcome = self.attempt(&creds, &images);
            self.release();
            match outcome? {
                Attempt::Done(confidence) => return Ok(Verification { confidence, retries: attempt }),
                Attempt::Retry(why) => {
                    log::warn!("{} attempt {}/{attempts} failed: {why}", self.cfg.provider.as_str(), attempt + 1);
                    rate_limited = false;
                    last = why;
                }
                Attempt::RateLimited => {
                    log::warn!("{} attempt {}/{attempts} rate limited", self.cfg.provider.as_str(), attempt + 1);
                    rate_limited = true;
                }
            }
        }
        if rate_limited {
            Err(Error::RateLimited { attempts })
        } else {
            Err(Error::Transient { attempts, last })
        }
    }

    fn attempt(&self, creds: &Credentials, images: &[String; 2]) -> Result<Attempt> {
        let sent = match self.cfg.provider {
            Provider::Facepp => self.agent.post(&self.cfg.endpoint).send_form([
                ("api_key", creds.key.as_str()),
                ("api_secret", creds.secret()),
                ("image_base64_1", images[0].as_str()),
                ("image_base64_2", images[1].as_str()),
            ]),
            Provider::Aliyun => {
                let body = serde_json::json!({ "ImageDataA": images[0], "ImageDataB": images[1] }).to_string();
                let mut req = self.agent.post(&self.cfg.endpoint);
                for (name, value) in aliyun_headers(&self.cfg.endpoint, creds, &body)? {
                    req = req.header(name, value);
                }
                req.send(body.as_str())
            }
            Provider::Generic => {
                let body = serde_json::json!({ "image_a": images[0], "image_b": images[1] }).to_string();
                self.agent
                    .post(&self.cfg.endpoint)
                    .header("authorization", format!("Bearer {}", creds.key))
                    .header("content-type", "application/json")
                    .send(body.as_str())
            }
        };
        let mut response = match sent {
            Ok(r) => r,
            Err(e) => return Ok(Attempt::Retry(format!("transport: {}", creds.scrub(&e.to_string())))),
        };
        let status = response.status().as_u16();
        let body = match response.body_mut().read_to_string() {
            Ok(b) => creds.scrub(&b),
            Err(e) => return Ok(Attempt::Retry(format!("reading body: {e}"))),
        };
        log::debug!("{} replied HTTP {status}", self.cfg.provider.as_str());
        match status {
            200..=299 => parse_confidence(self.cfg.provider, &body).map(Attempt::Done),
            429 => Ok(Attempt::RateLimited),
            403 if self.cfg.provider == Provider::Facepp && body.contains("CONCURRENCY_LIMIT_EXCEEDED") => Ok(Attempt::RateLimited),
            401 | 403 => Err(Error::Auth { status }),
            500..=599 => Ok(Attempt::Retry(format!("HTTP {status}"))),
            _ => Err(Error::Malformed { reason: format!("HTTP {status}"), body }),
        }
    }
}

/// Pulls the confidence out of a provider reply and checks its range.
pub fn parse_confidence(provider: Provider, body: &str) -> Result<f64> {
    let malformed = |reason: &str| Error::Malformed { reason: reason.to_string(), body: body.to_string() };
    let value: serde_json::Value = serde_json::from_str(body).map_err(|_| malformed("not JSON"))?;
    let field = match provider {
        Provider::Facepp | Provider::Generic => value.get("confidence"),
        Provider::Aliyun => value.get("Data").and_then(|d| d.get("Confidence")),
    };
    let confidence = field.and_then(serde_json::Value::as_f64).ok_or_else(|| malformed("no confidence field"))?;
    if !(0.0..=100.0).contains(&confidence) {
        return Err(malformed(&format!("confidence {confidence} outside [0, 100]")));
    }
    Ok(confidence)
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

const ALIYUN_ACTION: &str = "CompareFace";
const ALIYUN_VERSION: &str = "2019-12-30";

/// Headers for an `ACS3-HMAC-SHA256` signed request.
fn aliyun_headers(endpoint: &str, creds: &Credentials, body: &str) -> Result<Vec<(&'static str, String)>> {
    let uri: ureq::http::Uri = endpoint.parse().map_err(|e| Error::invalid(format!("endpoint: {e}")))?;
    let host = uri.authority().map(|a| a.as_str().to_string()).unwrap_or_default();
    let path = if uri.path().is_empty() { "/" } else { uri.path() };
    let date = time::OffsetDateTime::now_utc()
        .format(time::macros::format_description!("[year]-[month]-[day]T[hour]:[minute]:[second]Z"))
        .map_err(|e| Error::invalid(format!("clock: {e}")))?;
    let nonce = hex(&Sha256::digest(format!("{date}{:?}", Instant::now()).as_bytes())[..16]);
    let payload = hex(&Sha256::digest(body.as_bytes()));
    let signed: [(&'static str, String); 7] = [
        ("content-type", "application/json".into()),
        ("host", host),
        ("x-acs-action", ALIYUN_ACTION.into()),
        ("x-acs-content-sha256", payload.clone()),
        ("x-acs-date", date),
        ("x-acs-signature-nonce", nonce),
        ("x-acs-version", ALIYUN_VERSION.into()),
    ];
    let names = signed.iter().map(|(n, _)| *n).collect::<Vec<_>>().join(";");
    let canonical_headers: String = signed.iter().map(|(n, v)| format!("{n}:{v}\n")).collect();
    let canonical = format!("POST\n{path}\n\n{canonical_headers}\n{names}\n{payload}");
    let to_sign = format!("ACS3-HMAC-SHA256\n{}", hex(&Sha256::digest(canonical.as_bytes())));
    let mut mac = Hmac::<Sha256>::new_from_slice(creds.secret().as_bytes()).expect("HMAC accepts any key length");
    mac.update(to_sign.as_bytes());
    let signature = hex(&mac.finalize().into_bytes());
    let mut headers: Vec<(&'static str, String)> = signed.into_iter().filter(|(n, _)| *n != "host").collect();
    headers.push(("authorization", format!("ACS3-HMAC-SHA256 Credential={},SignedHeaders={names},Signature={signature}", creds.key)));
    Ok(headers)
}
