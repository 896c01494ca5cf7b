//! Random capsule worlds replayed through the engine and the reference
//! monitor side by side.

use gridsight_core::capsule::{
    package_capsule, CapsuleEngine, CapsuleError, CapsulePolicy, KeyServer, LabelPattern,
    ObjectKind, Operation, OwnerDirectory, OwnerKey, PayloadObject, Rule, TaintLabel, Tier,
    Verdict,
};
use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use uuid::Uuid;

use super::refmon::{RefCapsule, RefMonitor};

const KINDS: [ObjectKind; 6] = [
    ObjectKind::File,
    ObjectKind::Process,
    ObjectKind::IpcMessage,
    ObjectKind::ServiceEndpoint,
    ObjectKind::Account,
    ObjectKind::NetworkSink,
];
const OPS: [Operation; 4] = [
    Operation::Read,
    Operation::Write,
    Operation::Ipc,
    Operation::Export,
];
const TIERS: [Tier; 3] = [Tier::Coarse, Tier::Fine, Tier::Service];

#[derive(Debug, Default)]
pub struct CaseReport {
    pub events: usize,
    pub denied: usize,
    pub verdict_mismatches: usize,
    pub label_mismatches: usize,
    pub unauthorized_sink_labels: usize,
    pub deny_side_effects: usize,
    pub roundtrip_identical: bool,
    pub objects: usize,
}

impl CaseReport {
    pub fn clean(&self) -> bool {
        self.verdict_mismatches == 0
            && self.label_mismatches == 0
            && self.unauthorized_sink_labels == 0
            && self.deny_side_effects == 0
            && self.roundtrip_identical
    }
}

fn pattern<R: Rng>(rng: &mut R, known: &[Uuid]) -> LabelPattern {
    match rng.gen_range(0..8) {
        0 | 1 => LabelPattern::Any,
        2 => LabelPattern::Unlabeled,
        3 => LabelPattern::Own,
        4 => LabelPattern::OnlyOwn,
        5 => LabelPattern::NotOwn,
        6 => LabelPattern::Foreign,
        _ => match known.choose(rng) {
            Some(id) if rng.gen_bool(0.8) => LabelPattern::Capsule(*id),
            _ => LabelPattern::Capsule(Uuid::from_u128(rng.gen())),
        },
    }
}

pub fn random_policy<R: Rng>(rng: &mut R, known: &[Uuid]) -> CapsulePolicy {
    let rules = (0..rng.gen_range(0..=6))
        .map(|_| Rule {
            subject: pattern(rng, known),
            object: pattern(rng, known),
            operation: *OPS.choose(rng).unwrap(),
            tier: if rng.gen_bool(0.3) {
                Some(*TIERS.choose(rng).unwrap())
            } else {
                None
            },
            verdict: if rng.gen_bool(0.7) {
                Verdict::Allow
            } else {
                Verdict::Deny
            },
        })
        .collect();
    CapsulePolicy {
        rules,
        ..Default::default()
    }
}

/// Builds a world from `seed`, replays `n_events` random events through
/// both monitors and compares everything observable.
pub fn run_case(seed: u64, n_events: usize, check_deny_bytes: bool) -> CaseReport {
    let mut rng = StdRng::seed_from_u64(seed);
    let owner = OwnerKey::generate("owner", &mut rng);
    let owners = OwnerDirectory::from_records(&[owner.record().unwrap()]).unwrap();
    let ks = KeyServer::generate(&mut rng, true);
    let token = ks.attest("sim-platform");

    let mut engine = CapsuleEngine::new();
    let mut oracle = RefMonitor::default();
    let mut known = Vec::new();
    let mut names = Vec::new();

    for k in 0..rng.gen_range(1..=4) {
        let policy = random_policy(&mut rng, &known);
        let payload: Vec<PayloadObject> = (0..rng.gen_range(1..=3))
            .map(|j| PayloadObject {
                name: format!("c{k}o{j}"),
                kind: *[
                    ObjectKind::File,
                    ObjectKind::Account,
                    ObjectKind::IpcMessage,
                ]
                .choose(&mut rng)
                .unwrap(),
                data: vec![k as u8, j as u8],
            })
            .collect();
        let capsule = package_capsule(&payload, policy.clone(), &owner, &ks, &mut rng).unwrap();
        let installed = engine
            .install_capsule(&capsule, &owners, &ks, Some(&token))
            .unwrap();
        known.push(capsule.capsule_id);
        oracle.capsules.push(RefCapsule {
            label: installed.label.0,
            id: capsule.capsule_id,
            policy,
        });
        for p in &payload {
            oracle.add_object(&p.name, p.kind, vec![installed.label.0]);
            names.push(p.name.clone());
        }
    }
    let extra = rng.gen_range(5..=50 - names.len());
    for i in 0..extra {
        // make sure at least one process and one network sink exist
        let kind = match i {
            0 => ObjectKind::Process,
            1 => ObjectKind::NetworkSink,
            _ => *KINDS.choose(&mut rng).unwrap(),
        };
        let id = format!("x{i}");
        engine.add_object(&id, kind).unwrap();
        oracle.add_object(&id, kind, Vec::new());
        names.push(id);
    }

    let mut report = CaseReport {
        objects: names.len(),
        ..Default::default()
    };
    for _ in 0..n_events {
        let source = names.choose(&mut rng).unwrap().clone();
        let sink = names.choose(&mut rng).unwrap().clone();
        let sink_kind = oracle.object(&sink).kind;
        let op = if sink_kind == ObjectKind::NetworkSink {
            *[Operation::Export, Operation::Write]
                .choose(&mut rng)
                .unwrap()
        } else {
            *OPS.choose(&mut rng).unwrap()
        };
        let tier = if rng.gen_bool(0.2) {
            Some(*TIERS.choose(&mut rng).unwrap())
        } else {
            None
        };

        let before = check_deny_bytes.then(|| engine.clone());
        let got = engine.propagate(&source, &sink, op, tier);
        let (want, want_tier) = oracle.step(&source, &sink, op, tier);
        report.events += 1;
        match got {
            Ok(ev) => {
                if !want || ev.tier != want_tier {
                    report.verdict_mismatches += 1;
                }
            }
            Err(CapsuleError::PolicyViolation(v)) => {
                report.denied += 1;
                if want || v.tier != want_tier {
                    report.verdict_mismatches += 1;
                }
                if let Some(before) = before {
                    if !same_except_violations(&before, &engine) {
                        report.deny_side_effects += 1;
                    }
                }
            }
            Err(other) => panic!("unexpected engine error {other}"),
        }
    }

    for o in &oracle.objects {
        let got: Vec<u32> = engine
            .labels_of(&o.id)
            .unwrap()
            .iter()
            .map(|l| l.0)
            .collect();
        if got != o.labels {
            report.label_mismatches += 1;
        }
    }
    report.unauthorized_sink_labels = unauthorized_sink_labels(&engine);

    let bytes = engine.to_ndjson();
    report.roundtrip_identical = match CapsuleEngine::from_reader(bytes.as_slice()) {
        Ok(restored) => restored == engine && restored.to_ndjson() == bytes,
        Err(_) => false,
    };
    report
}

fn strip_violations(bytes: Vec<u8>) -> Vec<String> {
    String::from_utf8(bytes)
        .unwrap()
        .lines()
        .filter(|l| {
            !l.starts_with(r#"{"record":"violation""#) && !l.starts_with(r#"{"record":"end""#)
        })
        .map(str::to_owned)
        .collect()
}

pub fn same_except_violations(a: &CapsuleEngine, b: &CapsuleEngine) -> bool {
    strip_violations(a.to_ndjson()) == strip_violations(b.to_ndjson())
        && b.violations().len() == a.violations().len() + 1
}

/// Replays the flow log: every label on a network sink must have arrived
/// through an export or write that the label's own capsule explicitly
/// allowed with a rule for that operation.
pub fn unauthorized_sink_labels(engine: &CapsuleEngine) -> usize {
    let mut bad = 0;
    for (id, obj) in &engine.graph().objects {
        if obj.kind != ObjectKind::NetworkSink {
            continue;
        }
        for &label in &obj.labels {
            let justified = engine.graph().edges.iter().any(|e| {
                e.sink == *id
                    && e.added.contains(&label)
                    && matches!(e.operation, Operation::Export | Operation::Write)
                    && e.matched.iter().any(|m| {
                        m.label == label
                            && m.verdict == Verdict::Allow
                            && m.rule.is_some_and(|i| {
                                let policy = &engine.capsule(TaintLabel(label.0)).unwrap().policy;
                                policy.rules[i].verdict == Verdict::Allow
                                    && policy.rules[i].operation == e.operation
                            })
                    })
            });
            if !justified {
                bad += 1;
            }
        }
    }
    bad
}
