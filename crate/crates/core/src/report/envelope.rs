use std::collections::HashMap;
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use ed25519_dalek::{Signature, Signer, SigningKey, VerifyingKey};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};

use super::{canonical_bytes, IncidentReport, Rejection, ReportError, TIMESTAMP_WINDOW_MS};

/// Wire form of a signed report: `{payload_b64, signature_b64, device_key_id}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SignedEnvelope {
    pub payload_b64: String,
    pub signature_b64: String,
    pub device_key_id: String,
}

impl SignedEnvelope {
    pub fn from_parts(payload: &[u8], signature: &[u8], device_key_id: &str) -> Self {
        SignedEnvelope {
            payload_b64: B64.encode(payload),
            signature_b64: B64.encode(signature),
            device_key_id: device_key_id.to_owned(),
        }
    }

    pub fn payload(&self) -> Result<Vec<u8>, Rejection> {
        B64.decode(&self.payload_b64)
            .map_err(|e| Rejection::Malformed(format!("payload_b64: {e}")))
    }

    pub fn signature(&self) -> Result<Vec<u8>, Rejection> {
        B64.decode(&self.signature_b64)
            .map_err(|e| Rejection::Malformed(format!("signature_b64: {e}")))
    }
}

/// A device's signing key together with the id it is enrolled under.
///
/// Key files are JSON: `{"device_key_id": "...", "secret_key_b64": "..."}`.
#[derive(Clone, Serialize, Deserialize)]
pub struct DeviceKey {
    pub device_key_id: String,
    secret_key_b64: String,
}

impl std::fmt::Debug for DeviceKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("DeviceKey")
            .field("device_key_id", &self.device_key_id)
            .finish_non_exhaustive()
    }
}

impl DeviceKey {
    pub fn generate<R: RngCore + CryptoRng>(device_key_id: &str, rng: &mut R) -> Self {
        let key = SigningKey::generate(rng);
        DeviceKey::from_signing_key(device_key_id, &key)
    }

    pub fn from_signing_key(device_key_id: &str, key: &SigningKey) -> Self {
        DeviceKey {
            device_key_id: device_key_id.to_owned(),
            secret_key_b64: B64.encode(key.to_bytes()),
        }
    }

    pub fn signing_key(&self) -> Result<SigningKey, ReportError> {
        let bytes: [u8; 32] = B64
            .decode(&self.secret_key_b64)
            .ok()
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| ReportError::Invalid("secret key must be 32 base64 bytes".into()))?;
        Ok(SigningKey::from_bytes(&bytes))
    }

    pub fn registry_record(&self) -> Result<RegistryRecord, ReportError> {
        Ok(RegistryRecord {
            device_key_id: self.device_key_id.clone(),
            public_key_b64: B64.encode(self.signing_key()?.verifying_key().to_bytes()),
            enrolled_at: None,
            revoked: false,
            role: None,
        })
    }
}

/// Signs the canonical encoding of `r` with the device's key.
pub fn sign(r: &IncidentReport, key: &DeviceKey) -> Result<SignedEnvelope, ReportError> {
    if r.device_key_id != key.device_key_id {
        return Err(ReportError::KeyMismatch(r.device_key_id.clone()));
    }
    r.validate()?;
    let payload = canonical_bytes(r)?;
    let signature = key.signing_key()?.sign(&payload);
    Ok(SignedEnvelope::from_parts(
        &payload,
        &signature.to_bytes(),
        &key.device_key_id,
    ))
}

/// One entry of the registry file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryRecord {
    pub device_key_id: String,
    pub public_key_b64: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enrolled_at: Option<i64>,
    #[serde(default)]
    pub revoked: bool,
    /// Reporter class (e.g. civilian, utility); recorded, not yet weighted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub role: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeviceEntry {
    pub public_key: VerifyingKey,
    pub enrolled_at: Option<i64>,
    pub revoked: bool,
    pub role: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct DeviceRegistry {
    devices: HashMap<String, DeviceEntry>,
}

impl DeviceRegistry {
    pub fn from_records(records: Vec<RegistryRecord>) -> Result<Self, ReportError> {
        let mut devices = HashMap::with_capacity(records.len());
        for r in records {
            let bytes: [u8; 32] = B64
                .decode(&r.public_key_b64)
                .ok()
                .and_then(|b| b.try_into().ok())
                .ok_or_else(|| {
                    ReportError::Invalid(format!("bad public key for {}", r.device_key_id))
                })?;
            let public_key = VerifyingKey::from_bytes(&bytes).map_err(|e| {
                ReportError::Invalid(format!("bad public key for {}: {e}", r.device_key_id))
            })?;
            let entry = DeviceEntry {
                public_key,
                enrolled_at: r.enrolled_at,
                revoked: r.revoked,
                role: r.role,
            };
            if devices.insert(r.device_key_id.clone(), entry).is_some() {
                return Err(ReportError::Invalid(format!(
                    "duplicate device_key_id {}",
                    r.device_key_id
                )));
            }
        }
        Ok(DeviceRegistry { devices })
    }

    /// Loads a JSON list of registry records.
    pub fn load(path: &Path) -> Result<Self, ReportError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ReportError::Invalid(format!("{}: {e}", path.display())))?;
        let records: Vec<RegistryRecord> = serde_json::from_str(&text)
            .map_err(|e| ReportError::Invalid(format!("{}: {e}", path.display())))?;
        Self::from_records(records)
    }

    pub fn enroll(&mut self, device_key_id: &str, public_key: VerifyingKey) {
        self.devices.insert(
            device_key_id.to_owned(),
            DeviceEntry {
                public_key,
                enrolled_at: None,
                revoked: false,
                role: None,
            },
        );
    }

    pub fn revoke(&mut self, device_key_id: &str) -> bool {
        self.devices
            .get_mut(device_key_id)
            .map(|d| d.revoked = true)
            .is_some()
    }

    pub fn get(&self, device_key_id: &str) -> Option<&DeviceEntry> {
        self.devices.get(device_key_id)
    }

    pub fn len(&self) -> usize {
        self.devices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.devices.is_empty()
    }
}

/// Stateless checks: known and unrevoked key, valid signature, well-formed
/// report from the same device, timestamp within the window. The nonce
/// check happens when the store admits the report.
pub fn verify_envelope(
    e: &SignedEnvelope,
    registry: &DeviceRegistry,
    now_ms: i64,
) -> Result<IncidentReport, Rejection> {
    let device = registry
        .get(&e.device_key_id)
        .ok_or_else(|| Rejection::UnknownKey(e.device_key_id.clone()))?;
    if device.revoked {
        return Err(Rejection::Revoked(e.device_key_id.clone()));
    }

    let payload = e.payload()?;
    let sig_bytes: [u8; 64] = e
        .signature()?
        .try_into()
        .map_err(|_| Rejection::SignatureInvalid)?;
    let signature = Signature::from_bytes(&sig_bytes);
    device
        .public_key
        .verify_strict(&payload, &signature)
        .map_err(|_| Rejection::SignatureInvalid)?;

    let report: IncidentReport = serde_json::from_slice(&payload)
        .map_err(|err| Rejection::Malformed(format!("payload: {err}")))?;
    if report.device_key_id != e.device_key_id {
        return Err(Rejection::KeyMismatch {
            envelope: e.device_key_id.clone(),
            payload: report.device_key_id,
        });
    }
    report
        .validate()
        .map_err(|err| Rejection::InvalidReport(err.to_string()))?;

    if now_ms.abs_diff(report.timestamp) > TIMESTAMP_WINDOW_MS as u64 {
        return Err(Rejection::StaleTimestamp {
            timestamp: report.timestamp,
            now: now_ms,
        });
    }
    Ok(report)
}
