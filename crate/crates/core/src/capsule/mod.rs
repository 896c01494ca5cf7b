//! Data capsules: signed, encrypted bundles of data plus a usage policy,
//! and the taint-tracking engine that keeps track of where their contents
//! spread once installed.

mod engine;
mod package;
mod policy;
mod script;

pub use engine::{
    select_tier, CapsuleEngine, FlowEvent, GraphObject, InstalledCapsule, ObjectGraph, ObjectKind,
    TaintDatabase, TaintEvent, ViolationRecord,
};
pub use package::{
    package_capsule, AttestationToken, Capsule, CapsuleKey, KeyRequest, KeyServer, OwnerDirectory,
    OwnerKey, OwnerRecord, PayloadObject, CAPSULE_MAGIC, CAPSULE_VERSION,
};
pub use policy::{
    check_access, effective_subject, AccessDecision, CapsulePolicy, InstalledPolicy, LabelPattern,
    LabelSet, Operation, PolicySet, Rule, RuleMatch, TaintLabel, Tier, Verdict,
};
pub use script::{EventScript, ScriptEvent, ScriptObject, Transcript, TranscriptLine};

use uuid::Uuid;

#[derive(Debug, thiserror::Error)]
pub enum CapsuleError {
    #[error("capsule signature does not verify")]
    BadSignature,
    #[error("unknown capsule owner {0}")]
    UnknownOwner(String),
    #[error("key release denied for capsule {0}")]
    KeyDenied(Uuid),
    #[error("no escrowed key for capsule {0}")]
    NotFound(Uuid),
    #[error("payload does not decrypt")]
    DecryptFailed,
    #[error("payload digest mismatch")]
    DigestMismatch,
    #[error("capsule {0} is already installed")]
    AlreadyInstalled(Uuid),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("malformed capsule: {0}")]
    Malformed(String),
    #[error("unknown object {0:?}")]
    UnknownObject(String),
    #[error("object {0:?} already exists")]
    ObjectExists(String),
    #[error("policy violation: {0}")]
    PolicyViolation(Box<ViolationRecord>),
    #[error("corrupt taint store: {0}")]
    CorruptStore(String),
    #[error("label space exhausted")]
    LabelsExhausted,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
