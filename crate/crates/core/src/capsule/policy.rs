//! Capsule policies and the access decision shared by all three tiers.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use uuid::Uuid;

use super::CapsuleError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TaintLabel(pub u32);

impl fmt::Display for TaintLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "L{}", self.0)
    }
}

pub type LabelSet = BTreeSet<TaintLabel>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operation {
    Read,
    Write,
    Ipc,
    Export,
}

impl fmt::Display for Operation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Operation::Read => "read",
            Operation::Write => "write",
            Operation::Ipc => "ipc",
            Operation::Export => "export",
        })
    }
}

/// Enforcement point. `Coarse` sees a process as the union of everything it
/// has read; `Fine` narrows a multi-context process to the context touching
/// the object; `Service` guards shared aggregation points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    Coarse,
    Fine,
    Service,
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tier::Coarse => "coarse",
            Tier::Fine => "fine",
            Tier::Service => "service",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Allow,
    Deny,
}

/// Predicate over a label set, written relative to the capsule that owns
/// the policy ("own" is that capsule's label).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelPattern {
    Any,
    /// The empty set.
    Unlabeled,
    /// Contains the own label.
    Own,
    /// Exactly the own label and nothing else.
    OnlyOwn,
    /// Does not contain the own label.
    NotOwn,
    /// Contains some label other than the own label.
    Foreign,
    /// Contains the label of the given capsule.
    Capsule(Uuid),
}

impl LabelPattern {
    pub fn matches(&self, set: &LabelSet, own: TaintLabel, policies: &PolicySet) -> bool {
        match self {
            LabelPattern::Any => true,
            LabelPattern::Unlabeled => set.is_empty(),
            LabelPattern::Own => set.contains(&own),
            LabelPattern::OnlyOwn => set.len() == 1 && set.contains(&own),
            LabelPattern::NotOwn => !set.contains(&own),
            LabelPattern::Foreign => set.iter().any(|l| *l != own),
            LabelPattern::Capsule(id) => policies.label_of(id).is_some_and(|l| set.contains(&l)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rule {
    pub subject: LabelPattern,
    pub object: LabelPattern,
    pub operation: Operation,
    /// Restricts the rule to one tier; applies everywhere when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tier: Option<Tier>,
    pub verdict: Verdict,
}

fn deny() -> Verdict {
    Verdict::Deny
}

/// First-match rule list. Anything no rule matches is denied.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapsulePolicy {
    pub rules: Vec<Rule>,
    #[serde(default = "deny")]
    pub default_verdict: Verdict,
}

impl Default for CapsulePolicy {
    fn default() -> Self {
        CapsulePolicy {
            rules: Vec::new(),
            default_verdict: Verdict::Deny,
        }
    }
}

impl CapsulePolicy {
    pub fn validate(&self) -> Result<(), CapsuleError> {
        if self.default_verdict != Verdict::Deny {
            return Err(CapsuleError::InvalidPolicy(
                "default_verdict must be deny".into(),
            ));
        }
        Ok(())
    }

    /// Index of the first rule matching the request, if any.
    pub fn first_match(
        &self,
        subject: &LabelSet,
        object: &LabelSet,
        op: Operation,
        tier: Tier,
        own: TaintLabel,
        policies: &PolicySet,
    ) -> Option<usize> {
        self.rules.iter().position(|r| {
            r.operation == op
                && r.tier.is_none_or(|t| t == tier)
                && r.subject.matches(subject, own, policies)
                && r.object.matches(object, own, policies)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstalledPolicy {
    pub capsule_id: Uuid,
    pub policy: CapsulePolicy,
}

/// Policies of all installed capsules, keyed by their labels.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PolicySet {
    by_label: BTreeMap<TaintLabel, InstalledPolicy>,
    by_capsule: BTreeMap<Uuid, TaintLabel>,
}

impl PolicySet {
    pub fn insert(&mut self, label: TaintLabel, capsule_id: Uuid, policy: CapsulePolicy) {
        self.by_capsule.insert(capsule_id, label);
        self.by_label
            .insert(label, InstalledPolicy { capsule_id, policy });
    }

    pub fn get(&self, label: TaintLabel) -> Option<&InstalledPolicy> {
        self.by_label.get(&label)
    }

    pub fn label_of(&self, capsule_id: &Uuid) -> Option<TaintLabel> {
        self.by_capsule.get(capsule_id).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&TaintLabel, &InstalledPolicy)> {
        self.by_label.iter()
    }

    pub fn len(&self) -> usize {
        self.by_label.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_label.is_empty()
    }
}

/// Which rule of which capsule produced a verdict. `rule` is `None` when the
/// policy's default applied.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RuleMatch {
    pub label: TaintLabel,
    pub capsule_id: Uuid,
    pub rule: Option<usize>,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessDecision {
    pub verdict: Verdict,
    /// For a deny, the denying match. For an allow, one match per involved
    /// capsule.
    pub matched: Vec<RuleMatch>,
}

impl AccessDecision {
    pub fn allowed(&self) -> bool {
        self.verdict == Verdict::Allow
    }
}

/// Subject labels a tier reasons about. The fine tier only sees the contexts
/// of a process that share labels with the object; when none do (or the
/// object is unlabeled) it cannot tell which context is acting and falls
/// back to the whole process.
pub fn effective_subject(subject: &LabelSet, object: &LabelSet, tier: Tier) -> LabelSet {
    if tier == Tier::Fine {
        let narrowed: LabelSet = subject.intersection(object).copied().collect();
        if !narrowed.is_empty() {
            return narrowed;
        }
    }
    subject.clone()
}

/// Reference-monitor decision for one access.
///
/// Every capsule whose label appears on either side evaluates its own rules
/// first-match; the access is allowed only if all of them allow. A request
/// that involves no labels is allowed.
pub fn check_access(
    subject_labels: &LabelSet,
    object_labels: &LabelSet,
    operation: Operation,
    tier: Tier,
    policies: &PolicySet,
) -> AccessDecision {
    let subject = effective_subject(subject_labels, object_labels, tier);
    let involved: LabelSet = subject.union(object_labels).copied().collect();

    let mut matched = Vec::with_capacity(involved.len());
    for label in involved {
        let Some(installed) = policies.get(label) else {
            // a label nobody owns cannot be authorized
            return AccessDecision {
                verdict: Verdict::Deny,
                matched: vec![RuleMatch {
                    label,
                    capsule_id: Uuid::nil(),
                    rule: None,
                    verdict: Verdict::Deny,
                }],
            };
        };
        let policy = &installed.policy;
        let rule = policy.first_match(&subject, object_labels, operation, tier, label, policies);
        let verdict = rule.map_or(policy.default_verdict, |i| policy.rules[i].verdict);
        let m = RuleMatch {
            label,
            capsule_id: installed.capsule_id,
            rule,
            verdict,
        };
        if verdict == Verdict::Deny {
            return AccessDecision {
                verdict,
                matched: vec![m],
            };
        }
        matched.push(m);
    }
    AccessDecision {
        verdict: Verdict::Allow,
        matched,
    }
}
