//! Naive reference monitor: plain vectors and linear scans, no sharing with
//! the engine beyond the policy data types.

use gridsight_core::capsule::{CapsulePolicy, LabelPattern, ObjectKind, Operation, Tier, Verdict};
use uuid::Uuid;

pub struct RefCapsule {
    pub label: u32,
    pub id: Uuid,
    pub policy: CapsulePolicy,
}

pub struct RefObject {
    pub id: String,
    pub kind: ObjectKind,
    pub labels: Vec<u32>,
}

#[derive(Default)]
pub struct RefMonitor {
    pub capsules: Vec<RefCapsule>,
    pub objects: Vec<RefObject>,
}

fn has(set: &[u32], l: u32) -> bool {
    set.contains(&l)
}

impl RefMonitor {
    pub fn add_object(&mut self, id: &str, kind: ObjectKind, labels: Vec<u32>) {
        self.objects.push(RefObject {
            id: id.to_owned(),
            kind,
            labels,
        });
    }

    pub fn object(&self, id: &str) -> &RefObject {
        self.objects
            .iter()
            .find(|o| o.id == id)
            .expect("known object")
    }

    fn pattern(&self, p: &LabelPattern, set: &[u32], own: u32) -> bool {
        match p {
            LabelPattern::Any => true,
            LabelPattern::Unlabeled => set.is_empty(),
            LabelPattern::Own => has(set, own),
            LabelPattern::OnlyOwn => set.len() == 1 && set[0] == own,
            LabelPattern::NotOwn => !has(set, own),
            LabelPattern::Foreign => set.iter().any(|&l| l != own),
            LabelPattern::Capsule(id) => match self.capsules.iter().find(|c| c.id == *id) {
                Some(c) => has(set, c.label),
                None => false,
            },
        }
    }

    pub fn decide(&self, subject: &[u32], object: &[u32], op: Operation, tier: Tier) -> bool {
        let mut eff: Vec<u32> = Vec::new();
        if tier == Tier::Fine {
            for &l in subject {
                if has(object, l) {
                    eff.push(l);
                }
            }
        }
        if eff.is_empty() {
            eff = subject.to_vec();
        }
        for c in &self.capsules {
            if !has(&eff, c.label) && !has(object, c.label) {
                continue;
            }
            let mut verdict = Verdict::Deny;
            for r in &c.policy.rules {
                let tier_ok = match r.tier {
                    None => true,
                    Some(t) => t == tier,
                };
                if r.operation == op
                    && tier_ok
                    && self.pattern(&r.subject, &eff, c.label)
                    && self.pattern(&r.object, object, c.label)
                {
                    verdict = r.verdict;
                    break;
                }
            }
            if verdict == Verdict::Deny {
                return false;
            }
        }
        true
    }

    /// Applies one event; returns (allowed, tier used).
    pub fn step(
        &mut self,
        source: &str,
        sink: &str,
        op: Operation,
        tier: Option<Tier>,
    ) -> (bool, Tier) {
        let src = self.object(source);
        let snk = self.object(sink);
        let subject = if op == Operation::Read { snk } else { src };
        let object = if op == Operation::Read { src } else { snk };
        let tier = tier.unwrap_or(
            if src.kind == ObjectKind::ServiceEndpoint || snk.kind == ObjectKind::ServiceEndpoint {
                Tier::Service
            } else if subject.kind == ObjectKind::Process && subject.labels.len() >= 2 {
                Tier::Fine
            } else {
                Tier::Coarse
            },
        );
        let allowed = self.decide(&subject.labels, &object.labels, op, tier);
        if allowed {
            let mut incoming = Vec::new();
            if op != Operation::Read && tier == Tier::Fine {
                incoming = subject
                    .labels
                    .iter()
                    .copied()
                    .filter(|&l| has(&object.labels, l))
                    .collect();
            }
            if incoming.is_empty() {
                incoming = src.labels.clone();
            }
            let target = self.objects.iter_mut().find(|o| o.id == sink).unwrap();
            for l in incoming {
                if !has(&target.labels, l) {
                    target.labels.push(l);
                }
            }
            target.labels.sort_unstable();
        }
        (allowed, tier)
    }
}
