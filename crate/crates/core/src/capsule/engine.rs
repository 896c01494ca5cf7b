//! The object graph, taint database and enforcement engine.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use uuid::Uuid;

use super::{
    check_access, effective_subject, AttestationToken, Capsule, CapsuleError, CapsulePolicy,
    KeyServer, LabelSet, Operation, OwnerDirectory, PolicySet, RuleMatch, TaintLabel, Tier,
};

const STORE_FORMAT: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectKind {
    File,
    Process,
    IpcMessage,
    ServiceEndpoint,
    Account,
    NetworkSink,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphObject {
    pub kind: ObjectKind,
    pub labels: LabelSet,
}

/// An allowed data flow. `added` holds the labels the sink gained.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlowEvent {
    pub seq: u64,
    pub source: String,
    pub sink: String,
    pub operation: Operation,
    pub tier: Tier,
    pub added: LabelSet,
    pub matched: Vec<RuleMatch>,
}

/// A denied flow and the rule that denied it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ViolationRecord {
    pub source: String,
    pub sink: String,
    pub operation: Operation,
    pub tier: Tier,
    pub subject_labels: LabelSet,
    pub object_labels: LabelSet,
    pub matched: RuleMatch,
}

impl fmt::Display for ViolationRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{} {} -> {} denied at {} tier by capsule {} ({}) ",
            self.operation,
            self.source,
            self.sink,
            self.tier,
            self.matched.capsule_id,
            self.matched.label
        )?;
        match self.matched.rule {
            Some(i) => write!(f, "rule {i}"),
            None => f.write_str("default"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ObjectGraph {
    pub objects: BTreeMap<String, GraphObject>,
    pub edges: Vec<FlowEvent>,
}

/// An object joining a capsule's boundary. `cause` is the flow event that
/// carried the label there, or `None` for install-time sources.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaintEvent {
    pub capsule_id: Uuid,
    pub object: String,
    pub cause: Option<u64>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TaintDatabase {
    pub tainted: BTreeMap<Uuid, BTreeSet<String>>,
    pub log: Vec<TaintEvent>,
}

impl TaintDatabase {
    fn record(&mut self, event: TaintEvent) {
        self.tainted
            .entry(event.capsule_id)
            .or_default()
            .insert(event.object.clone());
        self.log.push(event);
    }

    pub fn objects_of(&self, capsule_id: &Uuid) -> Option<&BTreeSet<String>> {
        self.tainted.get(capsule_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstalledCapsule {
    pub label: TaintLabel,
    pub capsule_id: Uuid,
    pub owner_id: String,
    pub policy: CapsulePolicy,
    /// Payload objects created at install time.
    pub sources: Vec<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum StoreRecord {
    Header {
        format: u32,
        next_label: u32,
    },
    Capsule(InstalledCapsule),
    Object {
        id: String,
        kind: ObjectKind,
        labels: LabelSet,
    },
    Event(FlowEvent),
    Taint(TaintEvent),
    Violation(ViolationRecord),
    End {
        records: usize,
    },
}

/// Tier an event is enforced at when the caller does not pick one:
/// service endpoints are guarded by the service tier, processes holding
/// data from several capsules by the fine tier, everything else coarse.
pub fn select_tier(source: ObjectKind, sink: ObjectKind, subject: &GraphObject) -> Tier {
    if source == ObjectKind::ServiceEndpoint || sink == ObjectKind::ServiceEndpoint {
        Tier::Service
    } else if subject.kind == ObjectKind::Process && subject.labels.len() >= 2 {
        Tier::Fine
    } else {
        Tier::Coarse
    }
}

/// Single-writer taint tracker. Mutations take `&mut self`, so events are
/// applied in one total order; [`check_access`] itself is pure.
#[derive(Debug, Clone, PartialEq)]
pub struct CapsuleEngine {
    graph: ObjectGraph,
    db: TaintDatabase,
    policies: PolicySet,
    capsules: BTreeMap<TaintLabel, InstalledCapsule>,
    violations: Vec<ViolationRecord>,
    next_label: u32,
}

impl Default for CapsuleEngine {
    fn default() -> Self {
        Self::new()
    }
}

impl CapsuleEngine {
    pub fn new() -> Self {
        CapsuleEngine {
            graph: ObjectGraph::default(),
            db: TaintDatabase::default(),
            policies: PolicySet::default(),
            capsules: BTreeMap::new(),
            violations: Vec::new(),
            next_label: 1,
        }
    }

    pub fn graph(&self) -> &ObjectGraph {
        &self.graph
    }

    pub fn db(&self) -> &TaintDatabase {
        &self.db
    }

    pub fn policies(&self) -> &PolicySet {
        &self.policies
    }

    pub fn capsules(&self) -> impl Iterator<Item = &InstalledCapsule> {
        self.capsules.values()
    }

    pub fn capsule(&self, label: TaintLabel) -> Option<&InstalledCapsule> {
        self.capsules.get(&label)
    }

    pub fn violations(&self) -> &[ViolationRecord] {
        &self.violations
    }

    pub fn object(&self, id: &str) -> Option<&GraphObject> {
        self.graph.objects.get(id)
    }

    pub fn labels_of(&self, id: &str) -> Option<&LabelSet> {
        self.object(id).map(|o| &o.labels)
    }

    /// Smallest label the next install would receive.
    pub fn next_label(&self) -> u32 {
        self.next_label
    }

    /// Adds an unlabeled object.
    pub fn add_object(&mut self, id: &str, kind: ObjectKind) -> Result<(), CapsuleError> {
        if self.graph.objects.contains_key(id) {
            return Err(CapsuleError::ObjectExists(id.to_owned()));
        }
        self.graph.objects.insert(
            id.to_owned(),
            GraphObject {
                kind,
                labels: LabelSet::new(),
            },
        );
        Ok(())
    }

    /// Verifies, decrypts and installs a capsule, creating its payload
    /// objects as sources of a freshly allocated label.
    ///
    /// The owner signature is checked before the key server is contacted,
    /// and nothing in the engine changes unless every step succeeds.
    pub fn install_capsule(
        &mut self,
        capsule: &Capsule,
        owners: &OwnerDirectory,
        keyserver: &KeyServer,
        token: Option<&AttestationToken>,
    ) -> Result<InstalledCapsule, CapsuleError> {
        let owner = owners
            .get(&capsule.owner_id)
            .ok_or_else(|| CapsuleError::UnknownOwner(capsule.owner_id.clone()))?;
        capsule.verify(owner)?;
        capsule.policy.validate()?;
        if self.policies.label_of(&capsule.capsule_id).is_some() {
            return Err(CapsuleError::AlreadyInstalled(capsule.capsule_id));
        }

        let key = keyserver.release_key(capsule.capsule_id, token)?;
        let payload = capsule.open(&key)?;

        let mut names = BTreeSet::new();
        for obj in &payload {
            if self.graph.objects.contains_key(&obj.name) || !names.insert(obj.name.as_str()) {
                return Err(CapsuleError::ObjectExists(obj.name.clone()));
            }
        }
        let label = TaintLabel(self.next_label);
        let next = self
            .next_label
            .checked_add(1)
            .ok_or(CapsuleError::LabelsExhausted)?;

        self.next_label = next;
        for obj in &payload {
            self.graph.objects.insert(
                obj.name.clone(),
                GraphObject {
                    kind: obj.kind,
                    labels: LabelSet::from([label]),
                },
            );
            self.db.record(TaintEvent {
                capsule_id: capsule.capsule_id,
                object: obj.name.clone(),
                cause: None,
            });
        }
        self.db.tainted.entry(capsule.capsule_id).or_default();
        let installed = InstalledCapsule {
            label,
            capsule_id: capsule.capsule_id,
            owner_id: capsule.owner_id.clone(),
            policy: capsule.policy.clone(),
            sources: payload.into_iter().map(|o| o.name).collect(),
        };
        self.policies
            .insert(label, capsule.capsule_id, capsule.policy.clone());
        self.capsules.insert(label, installed.clone());
        Ok(installed)
    }

    /// Moves data from `source` to `sink` if policy allows it.
    ///
    /// For a read the sink is the acting subject; for write, ipc and export
    /// the source is. On allow the sink gains the labels of the data that
    /// moved: the whole source for a read, otherwise the acting subject's
    /// labels as the tier sees them. On deny nothing changes apart from a
    /// violation record.
    pub fn propagate(
        &mut self,
        source: &str,
        sink: &str,
        operation: Operation,
        tier: Option<Tier>,
    ) -> Result<FlowEvent, CapsuleError> {
        let src = self
            .object(source)
            .ok_or_else(|| CapsuleError::UnknownObject(source.to_owned()))?;
        let snk = self
            .object(sink)
            .ok_or_else(|| CapsuleError::UnknownObject(sink.to_owned()))?;
        let (subject, object) = if operation == Operation::Read {
            (snk, src)
        } else {
            (src, snk)
        };
        let tier = tier.unwrap_or_else(|| select_tier(src.kind, snk.kind, subject));

        let decision = check_access(
            &subject.labels,
            &object.labels,
            operation,
            tier,
            &self.policies,
        );
        if !decision.allowed() {
            let record = ViolationRecord {
                source: source.to_owned(),
                sink: sink.to_owned(),
                operation,
                tier,
                subject_labels: subject.labels.clone(),
                object_labels: object.labels.clone(),
                matched: decision.matched[0],
            };
            self.violations.push(record.clone());
            return Err(CapsuleError::PolicyViolation(Box::new(record)));
        }

        // a read moves the whole object; other operations move what the
        // acting context holds, which the fine tier narrows
        let flow = if operation == Operation::Read {
            src.labels.clone()
        } else {
            effective_subject(&subject.labels, &object.labels, tier)
        };
        let added: LabelSet = flow.difference(&snk.labels).copied().collect();
        let seq = self.graph.edges.len() as u64;
        let sink_obj = self.graph.objects.get_mut(sink).expect("checked above");
        sink_obj.labels.extend(added.iter().copied());
        for label in &added {
            let capsule_id = self.capsules[label].capsule_id;
            self.db.record(TaintEvent {
                capsule_id,
                object: sink.to_owned(),
                cause: Some(seq),
            });
        }
        let event = FlowEvent {
            seq,
            source: source.to_owned(),
            sink: sink.to_owned(),
            operation,
            tier,
            added,
            matched: decision.matched,
        };
        self.graph.edges.push(event.clone());
        Ok(event)
    }

    /// Checks that the taint database and the object graph describe the
    /// same boundaries.
    pub fn check_consistency(&self) -> Result<(), String> {
        let mut expected: BTreeMap<Uuid, BTreeSet<String>> = BTreeMap::new();
        for c in self.capsules.values() {
            expected.entry(c.capsule_id).or_default();
        }
        for (id, obj) in &self.graph.objects {
            for label in &obj.labels {
                let c = self
                    .capsules
                    .get(label)
                    .ok_or_else(|| format!("object {id:?} carries unallocated label {label}"))?;
                expected.entry(c.capsule_id).or_default().insert(id.clone());
            }
        }
        if expected != self.db.tainted {
            return Err("taint database disagrees with object labels".into());
        }
        if let Some(max) = self.capsules.keys().next_back() {
            if max.0 >= self.next_label {
                return Err(format!(
                    "label allocator at {} would reissue {max}",
                    self.next_label
                ));
            }
        }
        Ok(())
    }

    fn records(&self) -> Vec<StoreRecord> {
        let mut out = vec![StoreRecord::Header {
            format: STORE_FORMAT,
            next_label: self.next_label,
        }];
        out.extend(self.capsules.values().cloned().map(StoreRecord::Capsule));
        out.extend(
            self.graph
                .objects
                .iter()
                .map(|(id, o)| StoreRecord::Object {
                    id: id.clone(),
                    kind: o.kind,
                    labels: o.labels.clone(),
                }),
        );
        out.extend(self.graph.edges.iter().cloned().map(StoreRecord::Event));
        out.extend(self.db.log.iter().cloned().map(StoreRecord::Taint));
        out.extend(self.violations.iter().cloned().map(StoreRecord::Violation));
        let n = out.len();
        out.push(StoreRecord::End { records: n + 1 });
        out
    }

    /// NDJSON encoding of the whole engine state.
    pub fn to_ndjson(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        for r in self.records() {
            serde_json::to_writer(&mut buf, &r).expect("state serializes");
            buf.push(b'\n');
        }
        buf
    }

    /// Writes the state next to `path` and renames it into place, so a
    /// crash leaves either the old or the new file.
    pub fn persist(&self, path: &Path) -> Result<(), CapsuleError> {
        let mut tmp = path.as_os_str().to_owned();
        tmp.push(".tmp");
        let tmp = std::path::PathBuf::from(tmp);
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_ndjson())?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Loads a persisted state. Anything short of a complete, consistent
    /// file is an error.
    pub fn restore(path: &Path) -> Result<Self, CapsuleError> {
        let file = std::fs::File::open(path)?;
        Self::from_reader(BufReader::new(file)).map_err(|e| match e {
            CapsuleError::CorruptStore(m) => {
                CapsuleError::CorruptStore(format!("{}: {m}", path.display()))
            }
            other => other,
        })
    }

    pub fn from_reader<R: BufRead>(reader: R) -> Result<Self, CapsuleError> {
        let corrupt = |m: String| CapsuleError::CorruptStore(m);
        let mut engine = CapsuleEngine::new();
        let mut header_seen = false;
        let mut ended = false;
        let mut count = 0usize;

        for (n, line) in reader.lines().enumerate() {
            let line = line?;
            if ended {
                return Err(corrupt(format!("line {}: data after end record", n + 1)));
            }
            let record: StoreRecord =
                serde_json::from_str(&line).map_err(|e| corrupt(format!("line {}: {e}", n + 1)))?;
            count += 1;
            match record {
                StoreRecord::Header { format, next_label } => {
                    if header_seen || n != 0 {
                        return Err(corrupt(format!("line {}: unexpected header", n + 1)));
                    }
                    if format != STORE_FORMAT {
                        return Err(corrupt(format!("unsupported format {format}")));
                    }
                    header_seen = true;
                    engine.next_label = next_label;
                }
                _ if !header_seen => return Err(corrupt("missing header".into())),
                StoreRecord::Capsule(c) => {
                    engine
                        .policies
                        .insert(c.label, c.capsule_id, c.policy.clone());
                    engine.db.tainted.entry(c.capsule_id).or_default();
                    if engine.capsules.insert(c.label, c).is_some() {
                        return Err(corrupt(format!("line {}: duplicate label", n + 1)));
                    }
                }
                StoreRecord::Object { id, kind, labels } => {
                    engine
                        .graph
                        .objects
                        .insert(id, GraphObject { kind, labels });
                }
                StoreRecord::Event(e) => {
                    if e.seq != engine.graph.edges.len() as u64 {
                        return Err(corrupt(format!("line {}: event out of sequence", n + 1)));
                    }
                    engine.graph.edges.push(e);
                }
                StoreRecord::Taint(t) => engine.db.record(t),
                StoreRecord::Violation(v) => engine.violations.push(v),
                StoreRecord::End { records } => {
                    if records != count {
                        return Err(corrupt(format!(
                            "end record counts {records} lines, found {count}"
                        )));
                    }
                    ended = true;
                }
            }
        }
        if !ended {
            return Err(corrupt("truncated: no end record".into()));
        }
        if let Some(max) = engine.capsules.keys().next_back() {
            engine.next_label = engine.next_label.max(max.0.saturating_add(1));
        }
        engine.check_consistency().map_err(corrupt)?;
        Ok(engine)
    }
}
