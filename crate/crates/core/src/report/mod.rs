//! Signed incident reports: canonical encoding, Ed25519 envelopes, replay
//! protection, persistence and mapping onto grid assets.

mod envelope;
mod geo;
mod store;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use unicode_normalization::UnicodeNormalization;
use uuid::Uuid;

pub use envelope::{
    sign, verify_envelope, DeviceEntry, DeviceKey, DeviceRegistry, RegistryRecord, SignedEnvelope,
};
pub use geo::{map_to_asset, GeoFrame, DEFAULT_RADIUS_M};
pub use store::{AcceptanceRecord, RejectionRecord, ReportStore, StoredReport};

use crate::contingency::Evidence;
use crate::grid::GridSpec;

/// Accepted clock skew between the report timestamp and the server clock.
pub const TIMESTAMP_WINDOW_MS: i64 = 300_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Image,
    Video,
    Audio,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Attachment {
    pub modality: Modality,
    /// SHA-256 of the attachment, lowercase hex.
    pub content_digest: String,
    pub byte_length: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IncidentReport {
    pub report_id: Uuid,
    pub device_key_id: String,
    /// UTC epoch milliseconds.
    pub timestamp: i64,
    pub location: GeoPoint,
    pub confidence: f64,
    pub description: String,
    #[serde(default)]
    pub attachments: Vec<Attachment>,
    /// 128-bit random value, 32 lowercase hex digits.
    pub nonce: String,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReportError {
    #[error("non-finite value in field {0}")]
    NonFinite(&'static str),
    #[error("invalid report: {0}")]
    Invalid(String),
    #[error("signing key does not belong to device {0}")]
    KeyMismatch(String),
}

fn is_lower_hex(s: &str, len: usize) -> bool {
    s.len() == len && s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f'))
}

/// Fresh 128-bit nonce as 32 lowercase hex digits.
pub fn random_nonce<R: rand::RngCore + ?Sized>(rng: &mut R) -> String {
    let mut bytes = [0u8; 16];
    rng.fill_bytes(&mut bytes);
    hex::encode(bytes)
}

impl IncidentReport {
    pub fn validate(&self) -> Result<(), ReportError> {
        for (name, v) in [
            ("confidence", self.confidence),
            ("location.lat", self.location.lat),
            ("location.lon", self.location.lon),
        ] {
            if !v.is_finite() {
                return Err(ReportError::NonFinite(name));
            }
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(ReportError::Invalid(format!(
                "confidence {} outside [0,1]",
                self.confidence
            )));
        }
        if !(-90.0..=90.0).contains(&self.location.lat)
            || !(-180.0..=180.0).contains(&self.location.lon)
        {
            return Err(ReportError::Invalid("location outside WGS-84 range".into()));
        }
        if !is_lower_hex(&self.nonce, 32) {
            return Err(ReportError::Invalid(
                "nonce must be 32 lowercase hex digits".into(),
            ));
        }
        if self.device_key_id.is_empty() {
            return Err(ReportError::Invalid("empty device_key_id".into()));
        }
        if let Some(a) = self
            .attachments
            .iter()
            .find(|a| !is_lower_hex(&a.content_digest, 64))
        {
            return Err(ReportError::Invalid(format!(
                "attachment digest {:?} is not SHA-256 hex",
                a.content_digest
            )));
        }
        Ok(())
    }
}

/// Deterministic encoding used for signing: JSON, keys sorted, no
/// whitespace, shortest round-trip numbers, NFC-normalized strings.
pub fn canonical_bytes(r: &IncidentReport) -> Result<Vec<u8>, ReportError> {
    for (name, v) in [
        ("confidence", r.confidence),
        ("location.lat", r.location.lat),
        ("location.lon", r.location.lon),
    ] {
        if !v.is_finite() {
            return Err(ReportError::NonFinite(name));
        }
    }
    let value = serde_json::to_value(r).map_err(|e| ReportError::Invalid(e.to_string()))?;
    let mut out = Vec::with_capacity(256);
    write_canonical(&value, &mut out);
    Ok(out)
}

/// Writes `value` as canonical JSON; usable for any serializable document.
pub fn write_canonical(value: &Value, out: &mut Vec<u8>) {
    match value {
        Value::Object(map) => {
            let mut entries: Vec<(String, &Value)> =
                map.iter().map(|(k, v)| (k.nfc().collect(), v)).collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            out.push(b'{');
            for (i, (k, v)) in entries.into_iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_string(&k, out);
                out.push(b':');
                write_canonical(v, out);
            }
            out.push(b'}');
        }
        Value::Array(items) => {
            out.push(b'[');
            for (i, v) in items.iter().enumerate() {
                if i > 0 {
                    out.push(b',');
                }
                write_canonical(v, out);
            }
            out.push(b']');
        }
        Value::String(s) => write_string(&s.nfc().collect::<String>(), out),
        // serde_json prints numbers in shortest round-trip form
        other => out.extend_from_slice(other.to_string().as_bytes()),
    }
}

fn write_string(s: &str, out: &mut Vec<u8>) {
    out.extend_from_slice(Value::String(s.to_owned()).to_string().as_bytes());
}

/// Reasons an envelope is turned away. Each maps to a stable code.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum Rejection {
    #[error("malformed envelope: {0}")]
    Malformed(String),
    #[error("unknown device key {0}")]
    UnknownKey(String),
    #[error("device key {0} is revoked")]
    Revoked(String),
    #[error("signature does not verify")]
    SignatureInvalid,
    #[error("payload names device {payload} but envelope names {envelope}")]
    KeyMismatch { envelope: String, payload: String },
    #[error("invalid report: {0}")]
    InvalidReport(String),
    #[error("timestamp {timestamp} outside window around {now}")]
    StaleTimestamp { timestamp: i64, now: i64 },
    #[error("nonce already used by this device")]
    Replay,
    #[error("storage failure: {0}")]
    Storage(String),
}

impl Rejection {
    pub fn code(&self) -> &'static str {
        match self {
            Rejection::Malformed(_) => "malformed",
            Rejection::UnknownKey(_) => "unknown_key",
            Rejection::Revoked(_) => "revoked",
            Rejection::SignatureInvalid => "signature_invalid",
            Rejection::KeyMismatch { .. } => "key_mismatch",
            Rejection::InvalidReport(_) => "invalid_report",
            Rejection::StaleTimestamp { .. } => "stale_timestamp",
            Rejection::Replay => "replay",
            Rejection::Storage(_) => "storage",
        }
    }

    /// HTTP status a service should answer with.
    pub fn http_status(&self) -> u16 {
        match self {
            Rejection::Malformed(_) | Rejection::InvalidReport(_) => 400,
            Rejection::UnknownKey(_) | Rejection::SignatureInvalid => 401,
            Rejection::Revoked(_) | Rejection::KeyMismatch { .. } => 403,
            Rejection::Replay => 409,
            Rejection::StaleTimestamp { .. } => 422,
            Rejection::Storage(_) => 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IngestSettings {
    pub radius_m: f64,
    pub frame: GeoFrame,
}

impl Default for IngestSettings {
    fn default() -> Self {
        IngestSettings {
            radius_m: DEFAULT_RADIUS_M,
            frame: GeoFrame::default(),
        }
    }
}

/// Verifies, maps and stores one envelope. Rejections are written to the
/// store's rejection log before being returned.
pub fn ingest(
    e: &SignedEnvelope,
    registry: &DeviceRegistry,
    store: &ReportStore,
    spec: &GridSpec,
    settings: &IngestSettings,
    now_ms: i64,
) -> Result<AcceptanceRecord, Rejection> {
    let outcome = verify_envelope(e, registry, now_ms).and_then(|report| {
        let asset = map_to_asset(report.location, spec, settings.radius_m, &settings.frame);
        store.admit(report, asset, now_ms)
    });
    match outcome {
        Ok(stored) => {
            tracing::info!(report_id = %stored.report.report_id, asset = ?stored.asset, "report accepted");
            Ok(AcceptanceRecord::from(&stored))
        }
        Err(rejection) => {
            tracing::warn!(device = %e.device_key_id, reason = rejection.code(), "report rejected");
            if let Err(log_err) = store.record_rejection(&e.device_key_id, &rejection, now_ms) {
                tracing::error!(error = %log_err, "could not write rejection log");
            }
            Err(rejection)
        }
    }
}

impl StoredReport {
    pub fn evidence(&self) -> Evidence {
        Evidence {
            report_id: self.report.report_id,
            asset: self.asset,
            confidence: self.report.confidence,
        }
    }
}
