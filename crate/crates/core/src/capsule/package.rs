//! Capsule packaging, the binary container format, and the key server.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::Mutex;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use chacha20poly1305::aead::{Aead, KeyInit, Payload};
use chacha20poly1305::{ChaCha20Poly1305, Nonce};
use ed25519_dalek::{Signature, Signer, SigningKey, VerifyingKey};
use hmac::{Hmac, Mac};
use rand::{CryptoRng, RngCore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use uuid::Uuid;

use super::{CapsuleError, CapsulePolicy, ObjectKind};
use crate::report::write_canonical;

pub const CAPSULE_MAGIC: &[u8; 4] = b"EYC1";
pub const CAPSULE_VERSION: u8 = 1;

const NONCE_LEN: usize = 12;
const SECTIONS: usize = 7;

type HmacSha256 = Hmac<Sha256>;

/// One named data object carried by a capsule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PayloadObject {
    pub name: String,
    #[serde(default = "file_kind")]
    pub kind: ObjectKind,
    #[serde(with = "b64_bytes", rename = "data_b64")]
    pub data: Vec<u8>,
}

fn file_kind() -> ObjectKind {
    ObjectKind::File
}

mod b64_bytes {
    use super::B64;
    use base64::Engine as _;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&B64.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        B64.decode(text).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Capsule {
    pub version: u8,
    pub capsule_id: Uuid,
    pub owner_id: String,
    pub key_id: Uuid,
    pub policy: CapsulePolicy,
    /// SHA-256 of the plaintext payload encoding.
    pub payload_digest: [u8; 32],
    /// nonce || ChaCha20-Poly1305 ciphertext, with the capsule id as AAD.
    pub encrypted_payload: Vec<u8>,
    pub signature: [u8; 64],
}

fn policy_bytes(policy: &CapsulePolicy) -> Vec<u8> {
    let value = serde_json::to_value(policy).expect("policy serializes");
    let mut out = Vec::new();
    write_canonical(&value, &mut out);
    out
}

fn push_section(out: &mut Vec<u8>, bytes: &[u8]) {
    out.extend_from_slice(&(bytes.len() as u32).to_be_bytes());
    out.extend_from_slice(bytes);
}

fn signed_message(
    version: u8,
    capsule_id: &Uuid,
    owner_id: &str,
    key_id: &Uuid,
    policy: &CapsulePolicy,
    digest: &[u8; 32],
    encrypted_payload: &[u8],
) -> Vec<u8> {
    let mut m = Vec::with_capacity(128);
    m.extend_from_slice(CAPSULE_MAGIC);
    m.push(version);
    m.extend_from_slice(capsule_id.as_bytes());
    m.extend_from_slice(key_id.as_bytes());
    push_section(&mut m, owner_id.as_bytes());
    push_section(&mut m, &policy_bytes(policy));
    m.extend_from_slice(digest);
    // covering the ciphertext too means any edit to the file fails verification
    m.extend_from_slice(&Sha256::digest(encrypted_payload));
    m
}

impl Capsule {
    /// Bytes covered by the owner signature.
    pub fn signed_bytes(&self) -> Vec<u8> {
        signed_message(
            self.version,
            &self.capsule_id,
            &self.owner_id,
            &self.key_id,
            &self.policy,
            &self.payload_digest,
            &self.encrypted_payload,
        )
    }

    pub fn verify(&self, owner: &VerifyingKey) -> Result<(), CapsuleError> {
        if self.version != CAPSULE_VERSION {
            return Err(CapsuleError::BadSignature);
        }
        owner
            .verify_strict(
                &self.signed_bytes(),
                &Signature::from_bytes(&self.signature),
            )
            .map_err(|_| CapsuleError::BadSignature)
    }

    /// Decrypts and checks the payload against the signed digest.
    pub fn open(&self, key: &CapsuleKey) -> Result<Vec<PayloadObject>, CapsuleError> {
        if key.key_id != self.key_id || self.encrypted_payload.len() < NONCE_LEN {
            return Err(CapsuleError::DecryptFailed);
        }
        let (nonce, ct) = self.encrypted_payload.split_at(NONCE_LEN);
        let plain = ChaCha20Poly1305::new((&key.key).into())
            .decrypt(
                Nonce::from_slice(nonce),
                Payload {
                    msg: ct,
                    aad: self.capsule_id.as_bytes(),
                },
            )
            .map_err(|_| CapsuleError::DecryptFailed)?;
        if Sha256::digest(&plain).as_slice() != self.payload_digest {
            return Err(CapsuleError::DigestMismatch);
        }
        serde_json::from_slice(&plain).map_err(|e| CapsuleError::Malformed(format!("payload: {e}")))
    }

    /// Container layout: magic, version byte, then u32-BE length-prefixed
    /// sections capsule_id, owner_id, key_id, policy, payload_digest,
    /// ciphertext, signature.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encrypted_payload.len() + 256);
        out.extend_from_slice(CAPSULE_MAGIC);
        out.push(self.version);
        push_section(&mut out, self.capsule_id.as_bytes());
        push_section(&mut out, self.owner_id.as_bytes());
        push_section(&mut out, self.key_id.as_bytes());
        push_section(&mut out, &policy_bytes(&self.policy));
        push_section(&mut out, &self.payload_digest);
        push_section(&mut out, &self.encrypted_payload);
        push_section(&mut out, &self.signature);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Capsule, CapsuleError> {
        let bad = |m: &str| CapsuleError::Malformed(m.to_owned());
        if bytes.len() < 5 || &bytes[..4] != CAPSULE_MAGIC {
            return Err(bad("bad magic"));
        }
        let version = bytes[4];
        if version != CAPSULE_VERSION {
            return Err(CapsuleError::Malformed(format!(
                "unsupported version {version}"
            )));
        }
        let mut rest = &bytes[5..];
        let mut sections = Vec::with_capacity(SECTIONS);
        for _ in 0..SECTIONS {
            if rest.len() < 4 {
                return Err(bad("truncated section header"));
            }
            let len = u32::from_be_bytes(rest[..4].try_into().unwrap()) as usize;
            rest = &rest[4..];
            if rest.len() < len {
                return Err(bad("truncated section"));
            }
            sections.push(&rest[..len]);
            rest = &rest[len..];
        }
        if !rest.is_empty() {
            return Err(bad("trailing bytes"));
        }
        let uuid = |b: &[u8]| Uuid::from_slice(b).map_err(|_| bad("uuid section must be 16 bytes"));
        let owner_id =
            std::str::from_utf8(sections[1]).map_err(|_| bad("owner_id is not UTF-8"))?;
        let policy: CapsulePolicy = serde_json::from_slice(sections[3])
            .map_err(|e| CapsuleError::Malformed(format!("policy: {e}")))?;
        Ok(Capsule {
            version,
            capsule_id: uuid(sections[0])?,
            owner_id: owner_id.to_owned(),
            key_id: uuid(sections[2])?,
            policy,
            payload_digest: sections[4]
                .try_into()
                .map_err(|_| bad("digest must be 32 bytes"))?,
            encrypted_payload: sections[5].to_vec(),
            signature: sections[6]
                .try_into()
                .map_err(|_| bad("signature must be 64 bytes"))?,
        })
    }
}

/// Owner signing key. Key files are JSON `{"owner_id", "secret_key_b64"}`.
#[derive(Clone, Serialize, Deserialize)]
pub struct OwnerKey {
    pub owner_id: String,
    secret_key_b64: String,
}

impl std::fmt::Debug for OwnerKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("OwnerKey")
            .field("owner_id", &self.owner_id)
            .finish_non_exhaustive()
    }
}

impl OwnerKey {
    pub fn generate<R: RngCore + CryptoRng>(owner_id: &str, rng: &mut R) -> Self {
        let key = SigningKey::generate(rng);
        OwnerKey {
            owner_id: owner_id.to_owned(),
            secret_key_b64: B64.encode(key.to_bytes()),
        }
    }

    pub fn signing_key(&self) -> Result<SigningKey, CapsuleError> {
        let bytes: [u8; 32] = B64
            .decode(&self.secret_key_b64)
            .ok()
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| {
                CapsuleError::Malformed("owner secret key must be 32 base64 bytes".into())
            })?;
        Ok(SigningKey::from_bytes(&bytes))
    }

    pub fn record(&self) -> Result<OwnerRecord, CapsuleError> {
        Ok(OwnerRecord {
            owner_id: self.owner_id.clone(),
            public_key_b64: B64.encode(self.signing_key()?.verifying_key().to_bytes()),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OwnerRecord {
    pub owner_id: String,
    pub public_key_b64: String,
}

/// Public keys of the capsule owners a device trusts.
#[derive(Debug, Clone, Default)]
pub struct OwnerDirectory {
    keys: HashMap<String, VerifyingKey>,
}

impl OwnerDirectory {
    pub fn from_records(records: &[OwnerRecord]) -> Result<Self, CapsuleError> {
        let mut dir = OwnerDirectory::default();
        for r in records {
            let bytes: [u8; 32] = B64
                .decode(&r.public_key_b64)
                .ok()
                .and_then(|b| b.try_into().ok())
                .ok_or_else(|| CapsuleError::Malformed(format!("public key of {}", r.owner_id)))?;
            let key = VerifyingKey::from_bytes(&bytes)
                .map_err(|_| CapsuleError::Malformed(format!("public key of {}", r.owner_id)))?;
            dir.keys.insert(r.owner_id.clone(), key);
        }
        Ok(dir)
    }

    /// Reads a JSON array of owner records.
    pub fn load(path: &Path) -> Result<Self, CapsuleError> {
        let text = std::fs::read_to_string(path)?;
        let records: Vec<OwnerRecord> = serde_json::from_str(&text)
            .map_err(|e| CapsuleError::Malformed(format!("{}: {e}", path.display())))?;
        Self::from_records(&records)
    }

    pub fn insert(&mut self, owner_id: &str, key: VerifyingKey) {
        self.keys.insert(owner_id.to_owned(), key);
    }

    pub fn get(&self, owner_id: &str) -> Option<&VerifyingKey> {
        self.keys.get(owner_id)
    }
}

/// Proof that a platform was checked by the key server: an HMAC over the
/// platform descriptor under the server secret.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttestationToken {
    pub platform: String,
    pub mac_b64: String,
}

#[derive(Clone, PartialEq, Eq)]
pub struct CapsuleKey {
    pub key_id: Uuid,
    pub key: [u8; 32],
}

impl std::fmt::Debug for CapsuleKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CapsuleKey")
            .field("key_id", &self.key_id)
            .finish_non_exhaustive()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeyRequest {
    pub capsule_id: Uuid,
    pub granted: bool,
}

#[derive(Serialize, Deserialize)]
struct EscrowRecord {
    capsule_id: Uuid,
    key_id: Uuid,
    key_b64: String,
}

#[derive(Serialize, Deserialize)]
struct KeyServerFile {
    secret_b64: String,
    attestation_required: bool,
    keys: Vec<EscrowRecord>,
}

/// Escrow for capsule decryption keys. Keys are released only to holders
/// of a valid attestation token, unless attestation is switched off.
pub struct KeyServer {
    secret: [u8; 32],
    attestation_required: bool,
    keys: Mutex<BTreeMap<Uuid, CapsuleKey>>,
    requests: Mutex<Vec<KeyRequest>>,
}

impl std::fmt::Debug for KeyServer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KeyServer")
            .field("attestation_required", &self.attestation_required)
            .finish_non_exhaustive()
    }
}

impl KeyServer {
    pub fn new(secret: [u8; 32], attestation_required: bool) -> Self {
        KeyServer {
            secret,
            attestation_required,
            keys: Mutex::new(BTreeMap::new()),
            requests: Mutex::new(Vec::new()),
        }
    }

    pub fn generate<R: RngCore + CryptoRng>(rng: &mut R, attestation_required: bool) -> Self {
        let mut secret = [0u8; 32];
        rng.fill_bytes(&mut secret);
        Self::new(secret, attestation_required)
    }

    fn mac(&self) -> HmacSha256 {
        <HmacSha256 as Mac>::new_from_slice(&self.secret).expect("hmac accepts any key length")
    }

    /// Issues a token for a platform descriptor the server has verified.
    pub fn attest(&self, platform: &str) -> AttestationToken {
        let mut mac = self.mac();
        mac.update(platform.as_bytes());
        AttestationToken {
            platform: platform.to_owned(),
            mac_b64: B64.encode(mac.finalize().into_bytes()),
        }
    }

    pub fn token_valid(&self, token: &AttestationToken) -> bool {
        let Ok(tag) = B64.decode(&token.mac_b64) else {
            return false;
        };
        let mut mac = self.mac();
        mac.update(token.platform.as_bytes());
        mac.verify_slice(&tag).is_ok()
    }

    pub fn deposit(&self, capsule_id: Uuid, key: CapsuleKey) {
        self.keys
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .insert(capsule_id, key);
    }

    pub fn release_key(
        &self,
        capsule_id: Uuid,
        token: Option<&AttestationToken>,
    ) -> Result<CapsuleKey, CapsuleError> {
        let attested = !self.attestation_required || token.is_some_and(|t| self.token_valid(t));
        let key = self
            .keys
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .get(&capsule_id)
            .cloned();
        let result = match (attested, key) {
            (false, _) => Err(CapsuleError::KeyDenied(capsule_id)),
            (true, None) => Err(CapsuleError::NotFound(capsule_id)),
            (true, Some(k)) => Ok(k),
        };
        self.requests
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .push(KeyRequest {
                capsule_id,
                granted: result.is_ok(),
            });
        result
    }

    /// Every release request so far, in order.
    pub fn requests(&self) -> Vec<KeyRequest> {
        self.requests
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .clone()
    }

    pub fn load(path: &Path) -> Result<Self, CapsuleError> {
        let bad = |m: String| CapsuleError::Malformed(format!("{}: {m}", path.display()));
        let file: KeyServerFile = serde_json::from_str(&std::fs::read_to_string(path)?)
            .map_err(|e| bad(e.to_string()))?;
        let secret: [u8; 32] = B64
            .decode(&file.secret_b64)
            .ok()
            .and_then(|b| b.try_into().ok())
            .ok_or_else(|| bad("secret must be 32 base64 bytes".into()))?;
        let server = KeyServer::new(secret, file.attestation_required);
        for r in file.keys {
            let key: [u8; 32] = B64
                .decode(&r.key_b64)
                .ok()
                .and_then(|b| b.try_into().ok())
                .ok_or_else(|| bad(format!("key for {}", r.capsule_id)))?;
            server.deposit(
                r.capsule_id,
                CapsuleKey {
                    key_id: r.key_id,
                    key,
                },
            );
        }
        Ok(server)
    }

    pub fn save(&self, path: &Path) -> Result<(), CapsuleError> {
        let keys = self.keys.lock().unwrap_or_else(|p| p.into_inner());
        let file = KeyServerFile {
            secret_b64: B64.encode(self.secret),
            attestation_required: self.attestation_required,
            keys: keys
                .iter()
                .map(|(id, k)| EscrowRecord {
                    capsule_id: *id,
                    key_id: k.key_id,
                    key_b64: B64.encode(k.key),
                })
                .collect(),
        };
        let text = serde_json::to_string_pretty(&file).expect("key server state serializes");
        std::fs::write(path, text)?;
        Ok(())
    }
}

fn random_uuid<R: RngCore>(rng: &mut R) -> Uuid {
    let mut bytes = [0u8; 16];
    rng.fill_bytes(&mut bytes);
    uuid::Builder::from_random_bytes(bytes).into_uuid()
}

/// Encrypts `payload` under a fresh key, signs the result as `owner`, and
/// escrows the key with `keyserver`.
pub fn package_capsule<R: RngCore + CryptoRng>(
    payload: &[PayloadObject],
    policy: CapsulePolicy,
    owner: &OwnerKey,
    keyserver: &KeyServer,
    rng: &mut R,
) -> Result<Capsule, CapsuleError> {
    policy.validate()?;
    let signing = owner.signing_key()?;

    let capsule_id = random_uuid(rng);
    let key_id = random_uuid(rng);
    let mut key = [0u8; 32];
    rng.fill_bytes(&mut key);
    let mut nonce = [0u8; NONCE_LEN];
    rng.fill_bytes(&mut nonce);

    let plain = serde_json::to_vec(payload).expect("payload serializes");
    let payload_digest: [u8; 32] = Sha256::digest(&plain).into();
    let ct = ChaCha20Poly1305::new((&key).into())
        .encrypt(
            Nonce::from_slice(&nonce),
            Payload {
                msg: &plain,
                aad: capsule_id.as_bytes(),
            },
        )
        .map_err(|_| CapsuleError::Malformed("encryption failed".into()))?;
    let mut encrypted_payload = nonce.to_vec();
    encrypted_payload.extend_from_slice(&ct);

    let message = signed_message(
        CAPSULE_VERSION,
        &capsule_id,
        &owner.owner_id,
        &key_id,
        &policy,
        &payload_digest,
        &encrypted_payload,
    );
    let signature = signing.sign(&message).to_bytes();

    keyserver.deposit(capsule_id, CapsuleKey { key_id, key });
    Ok(Capsule {
        version: CAPSULE_VERSION,
        capsule_id,
        owner_id: owner.owner_id.clone(),
        key_id,
        policy,
        payload_digest,
        encrypted_payload,
        signature,
    })
}
