//! Manifest-driven downloading with retries, checksum verification and a
//! recovery report.
//!
//! Status policy:
//!
//! | response                         | status           | retried |
//! |----------------------------------|------------------|---------|
//! | 2xx, checksum ok or absent       | `Ok`             | -       |
//! | 2xx, checksum mismatch           | `Corrupt`        | once    |
//! | 404, 410, other 4xx              | `ExpiredUrl`     | no      |
//! | 429, 503                         | `RateLimited`    | yes, `Retry-After` honoured |
//! | other 5xx, timeout, reset, DNS   | `NetworkFailure` | yes     |

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Component, Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Duration;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::augment::sample_rng;
use crate::error::{Error, Result};
use crate::util::stable_hash;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub url: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sha256: Option<String>,
    /// Output location relative to the download directory.
    pub path: String,
}

fn check_entry(e: &ManifestEntry) -> Result<()> {
    let uri: ureq::http::Uri = e
        .url
        .parse()
        .map_err(|err| Error::invalid(format!("{}: bad url {:?}: {err}", e.id, e.url)))?;
    if !matches!(uri.scheme_str(), Some("http" | "https")) || uri.host().is_none() {
        return Err(Error::invalid(format!(
            "{}: url must be http(s) with a host",
            e.id
        )));
    }
    if let Some(h) = &e.sha256 {
        if h.len() != 64 || !h.bytes().all(|b| b.is_ascii_hexdigit()) {
            return Err(Error::invalid(format!(
                "{}: sha256 must be 64 hex digits",
                e.id
            )));
        }
    }
    let p = Path::new(&e.path);
    if e.path.is_empty() || !p.components().all(|c| matches!(c, Component::Normal(_))) {
        return Err(Error::invalid(format!(
            "{}: path {:?} must be relative and stay inside the output directory",
            e.id, e.path
        )));
    }
    Ok(())
}

/// Parses JSONL, one entry per non-blank line. Ids and paths must be unique.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut entries = Vec::new();
    let mut ids = HashSet::new();
    let mut paths = HashSet::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let e: ManifestEntry = serde_json::from_str(line)
            .map_err(|err| Error::invalid(format!("manifest line {}: {err}", n + 1)))?;
        check_entry(&e)?;
        if !ids.insert(e.id.clone()) {
            return Err(Error::invalid(format!("duplicate sample id {:?}", e.id)));
        }
        if !paths.insert(e.path.clone()) {
            return Err(Error::invalid(format!(
                "duplicate output path {:?}",
                e.path
            )));
        }
        entries.push(e);
    }
    Ok(entries)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum FetchStatus {
    Ok,
    ExpiredUrl,
    RateLimited,
    NetworkFailure,
    Corrupt,
}

pub const ALL_STATUSES: [FetchStatus; 5] = [
    FetchStatus::Ok,
    FetchStatus::ExpiredUrl,
    FetchStatus::RateLimited,
    FetchStatus::NetworkFailure,
    FetchStatus::Corrupt,
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FetchOutcome {
    pub sample_id: String,
    pub status: FetchStatus,
    pub attempts: u32,
    pub bytes: u64,
    pub final_http_code: Option<u16>,
    /// Already present and verified; nothing was downloaded.
    pub skipped: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FetchPolicy {
    pub max_attempts: u32,
    pub base_backoff_ms: u64,
    /// Each delay is stretched by a factor drawn from `[1, 1 + jitter)`.
    pub jitter: f64,
    /// Upper bound on any single wait, including `Retry-After`.
    pub max_backoff_ms: u64,
    pub max_parallel: usize,
    pub timeout_ms: u64,
    pub max_redirects: u32,
}

impl Default for FetchPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 4,
            base_backoff_ms: 1000,
            jitter: 0.25,
            max_backoff_ms: 60_000,
            max_parallel: 8,
            timeout_ms: 30_000,
            max_redirects: 5,
        }
    }
}

impl FetchPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.max_attempts == 0 || self.max_parallel == 0 {
            return Err(Error::invalid(
                "max_attempts and max_parallel must be positive",
            ));
        }
        if !(self.jitter >= 0.0 && self.jitter.is_finite()) {
            return Err(Error::invalid("jitter must be finite and >= 0"));
        }
        Ok(())
    }

    /// Wait before attempt `attempt + 1`: exponential in the attempt number,
    /// jittered deterministically per sample.
    pub fn backoff(&self, sample_id: &str, attempt: u32) -> Duration {
        let mut rng = sample_rng(stable_hash(&[sample_id.as_bytes()]), u64::from(attempt));
        let factor = 1.0 + self.jitter * rng.random::<f64>();
        let exp = 2f64.powi(attempt.saturating_sub(1).min(30) as i32);
        let ms = (self.base_backoff_ms as f64 * exp * factor).min(self.max_backoff_ms as f64);
        Duration::from_millis(ms as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FetchReport {
    pub total: usize,
    pub totals: BTreeMap<FetchStatus, usize>,
    /// `Ok / total`; absent when the manifest is empty.
    pub recovery_rate: Option<f64>,
    pub recovery_rate_display: Option<String>,
    pub failures: Vec<FetchOutcome>,
}

/// Recovery rate as a percentage with one decimal, e.g. `92.9%`.
pub fn format_rate(ok: usize, total: usize) -> Option<String> {
    (total > 0).then(|| format!("{:.1}%", 100.0 * ok as f64 / total as f64))
}

pub fn summarize(outcomes: &[FetchOutcome]) -> FetchReport {
    let mut totals: BTreeMap<FetchStatus, usize> = ALL_STATUSES.iter().map(|&s| (s, 0)).collect();
    for o in outcomes {
        *totals.entry(o.status).or_default() += 1;
    }
    let ok = totals[&FetchStatus::Ok];
    let total = outcomes.len();
    FetchReport {
        total,
        recovery_rate: (total > 0).then(|| ok as f64 / total as f64),
        recovery_rate_display: format_rate(ok, total),
        failures: outcomes
            .iter()
            .filter(|o| o.status != FetchStatus::Ok)
            .cloned()
            .collect(),
        totals,
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn checksum_ok(bytes: &[u8], expected: Option<&str>) -> bool {
    expected.is_none_or(|h| sha256_hex(bytes).eq_ignore_ascii_case(h))
}

/// Fails unless `dir` exists (or can be created) and accepts new files.
fn ensure_writable(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let probe = dir.join(".matseg-write-probe");
    fs::File::create(&probe)
        .and_then(|mut f| f.write_all(b"ok"))
        .map_err(|e| Error::io(dir, e))?;
    fs::remove_file(&probe).map_err(|e| Error::io(&probe, e))
}

enum Attempt {
    Body(u16, Vec<u8>),
    Status(u16, Option<Duration>),
    Transport(String),
}

fn retry_after(resp: &ureq::http::Response<ureq::Body>) -> Option<Duration> {
    let v = resp.headers().get("retry-after")?.to_str().ok()?;
    v.trim().parse::<u64>().ok().map(Duration::from_secs)
}

fn attempt(agent: &ureq::Agent, url: &str) -> Attempt {
    match agent.get(url).call() {
        Ok(mut resp) => {
            let code = resp.status().as_u16();
            if resp.status().is_success() {
                match resp.body_mut().with_config().limit(u64::MAX).read_to_vec() {
                    Ok(b) => Attempt::Body(code, b),
                    Err(e) => Attempt::Transport(e.to_string()),
                }
            } else {
                Attempt::Status(code, retry_after(&resp))
            }
        }
        Err(e) => Attempt::Transport(e.to_string()),
    }
}

fn persist(target: &Path, bytes: &[u8]) -> std::io::Result<()> {
    if let Some(parent) = target.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut tmp = target.as_os_str().to_owned();
    tmp.push(".part");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, target)
}

fn fetch_one(
    agent: &ureq::Agent,
    entry: &ManifestEntry,
    dir: &Path,
    policy: &FetchPolicy,
) -> FetchOutcome {
    let target = dir.join(&entry.path);
    let mut out = FetchOutcome {
        sample_id: entry.id.clone(),
        status: FetchStatus::NetworkFailure,
        attempts: 0,
        bytes: 0,
        final_http_code: None,
        skipped: false,
        detail: None,
    };
    if let Ok(existing) = fs::read(&target) {
        if checksum_ok(&existing, entry.sha256.as_deref()) {
            out.status = FetchStatus::Ok;
            out.bytes = existing.len() as u64;
            out.skipped = true;
            return out;
        }
    }
    let mut redownloaded = false;
    while out.attempts < policy.max_attempts {
        out.attempts += 1;
        let wait = match attempt(agent, &entry.url) {
            Attempt::Body(code, bytes) => {
                out.final_http_code = Some(code);
                out.bytes = bytes.len() as u64;
                if checksum_ok(&bytes, entry.sha256.as_deref()) {
                    if let Err(e) = persist(&target, &bytes) {
                        out.status = FetchStatus::NetworkFailure;
                        out.detail = Some(format!("write failed: {e}"));
                        return out;
                    }
                    out.status = FetchStatus::Ok;
                    out.detail = None;
                    return out;
                }
                out.status = FetchStatus::Corrupt;
                out.detail = Some(format!("sha256 mismatch: got {}", sha256_hex(&bytes)));
                if redownloaded {
                    return out;
                }
                redownloaded = true;
                Duration::ZERO
            }
            Attempt::Status(code, after) => {
                out.final_http_code = Some(code);
                out.detail = None;
                match code {
                    429 | 503 => {
                        out.status = FetchStatus::RateLimited;
                        after.unwrap_or_else(|| policy.backoff(&entry.id, out.attempts))
                    }
                    500..=599 => {
                        out.status = FetchStatus::NetworkFailure;
                        policy.backoff(&entry.id, out.attempts)
                    }
                    _ => {
                        out.status = FetchStatus::ExpiredUrl;
                        return out;
                    }
                }
            }
            Attempt::Transport(msg) => {
                out.status = FetchStatus::NetworkFailure;
                out.final_http_code = None;
                out.detail = Some(msg);
                policy.backoff(&entry.id, out.attempts)
            }
        };
        if out.attempts < policy.max_attempts {
            std::thread::sleep(wait.min(Duration::from_millis(policy.max_backoff_ms)));
        }
    }
    out
}

/// Downloads every entry into `dir` with at most `max_parallel` concurrent
/// requests. Entries already on disk with a matching checksum are skipped.
/// Outcomes come back in manifest order.
pub fn fetch_all(
    entries: &[ManifestEntry],
    dir: &Path,
    policy: &FetchPolicy,
) -> Result<(Vec<FetchOutcome>, FetchReport)> {
    policy.validate()?;
    ensure_writable(dir)?;
    let agent: ureq::Agent = ureq::Agent::config_builder()
        .http_status_as_error(false)
        .max_redirects(policy.max_redirects)
        .timeout_global(Some(Duration::from_millis(policy.timeout_ms)))
        .build()
        .into();
    let next = AtomicUsize::new(0);
    let workers = policy.max_parallel.min(entries.len()).max(1);
    let mut done: Vec<(usize, FetchOutcome)> = std::thread::scope(|s| {
        let handles: Vec<_> = (0..workers)
            .map(|_| {
                s.spawn(|| {
                    let mut mine = Vec::new();
                    loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        let Some(e) = entries.get(i) else { break };
                        mine.push((i, fetch_one(&agent, e, dir, policy)));
                    }
                    mine
                })
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("fetch worker panicked"))
            .collect()
    });
    done.sort_by_key(|(i, _)| *i);
    let outcomes: Vec<FetchOutcome> = done.into_iter().map(|(_, o)| o).collect();
    let report = summarize(&outcomes);
    Ok((outcomes, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LocalStatus {
    Ok,
    Corrupt,
    Missing,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalEntry {
    pub sample_id: String,
    pub status: LocalStatus,
    pub sha256: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalReport {
    pub ok: usize,
    pub corrupt: usize,
    pub missing: usize,
    pub entries: Vec<LocalEntry>,
}

/// Re-hashes files already in `dir`; never touches the network.
pub fn verify_local(entries: &[ManifestEntry], dir: &Path) -> Result<LocalReport> {
    if !dir.is_dir() {
        return Err(Error::invalid(format!(
            "{} is not a directory",
            dir.display()
        )));
    }
    let mut report = LocalReport {
        ok: 0,
        corrupt: 0,
        missing: 0,
        entries: Vec::with_capacity(entries.len()),
    };
    for e in entries {
        let (status, sha256) = match fs::read(dir.join(&e.path)) {
            Err(_) => (LocalStatus::Missing, None),
            Ok(bytes) => {
                let h = sha256_hex(&bytes);
                let ok = e
                    .sha256
                    .as_deref()
                    .is_none_or(|want| want.eq_ignore_ascii_case(&h));
                (
                    if ok {
                        LocalStatus::Ok
                    } else {
                        LocalStatus::Corrupt
                    },
                    Some(h),
                )
            }
        };
        match status {
            LocalStatus::Ok => report.ok += 1,
            LocalStatus::Corrupt => report.corrupt += 1,
            LocalStatus::Missing => report.missing += 1,
        }
        report.entries.push(LocalEntry {
            sample_id: e.id.clone(),
            status,
            sha256,
        });
    }
    Ok(report)
}
