//! Event scripts replayed against an engine, and their verdict transcripts.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::{
    CapsuleEngine, CapsuleError, LabelSet, ObjectKind, Operation, RuleMatch, Tier, Verdict,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptObject {
    pub id: String,
    pub kind: ObjectKind,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScriptEvent {
    pub source: String,
    pub sink: String,
    pub operation: Operation,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tier: Option<Tier>,
}

/// `{"objects": [{"id", "kind"}], "events": [{"source", "sink", "operation", "tier"?}]}`
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventScript {
    #[serde(default)]
    pub objects: Vec<ScriptObject>,
    pub events: Vec<ScriptEvent>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptLine {
    pub index: usize,
    pub source: String,
    pub sink: String,
    pub operation: Operation,
    pub tier: Tier,
    pub verdict: Verdict,
    pub added: LabelSet,
    /// The denying rule, for denied events.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub denied_by: Option<RuleMatch>,
}

impl fmt::Display for TranscriptLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = match self.verdict {
            Verdict::Allow => "allow",
            Verdict::Deny => "deny",
        };
        write!(
            f,
            "#{} {verdict} {} {} -> {} [{}]",
            self.index, self.operation, self.source, self.sink, self.tier
        )?;
        if let Some(m) = &self.denied_by {
            write!(f, " by {} ", m.label)?;
            match m.rule {
                Some(i) => write!(f, "rule {i}")?,
                None => f.write_str("default")?,
            }
        }
        for l in &self.added {
            write!(f, " +{l}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub lines: Vec<TranscriptLine>,
}

impl Transcript {
    pub fn denied(&self) -> usize {
        self.lines
            .iter()
            .filter(|l| l.verdict == Verdict::Deny)
            .count()
    }
}

impl CapsuleEngine {
    /// Creates the script's objects (existing ones must have the same kind)
    /// and replays its events in order. Denied events are part of the
    /// transcript, not errors.
    pub fn run_script(&mut self, script: &EventScript) -> Result<Transcript, CapsuleError> {
        for o in &script.objects {
            match self.object(&o.id) {
                Some(existing) if existing.kind == o.kind => {}
                Some(_) => return Err(CapsuleError::ObjectExists(o.id.clone())),
                None => self.add_object(&o.id, o.kind)?,
            }
        }
        let mut transcript = Transcript::default();
        for (index, e) in script.events.iter().enumerate() {
            let line = match self.propagate(&e.source, &e.sink, e.operation, e.tier) {
                Ok(ev) => TranscriptLine {
                    index,
                    source: ev.source,
                    sink: ev.sink,
                    operation: ev.operation,
                    tier: ev.tier,
                    verdict: Verdict::Allow,
                    added: ev.added,
                    denied_by: None,
                },
                Err(CapsuleError::PolicyViolation(v)) => TranscriptLine {
                    index,
                    source: v.source,
                    sink: v.sink,
                    operation: v.operation,
                    tier: v.tier,
                    verdict: Verdict::Deny,
                    added: LabelSet::new(),
                    denied_by: Some(v.matched),
                },
                Err(other) => return Err(other),
            };
            transcript.lines.push(line);
        }
        Ok(transcript)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unlabeled_script_is_all_allow() {
        let script: EventScript = serde_json::from_str(
            r#"{"objects": [{"id": "p", "kind": "process"}, {"id": "f", "kind": "file"},
                            {"id": "net", "kind": "network_sink"}],
                "events": [{"source": "f", "sink": "p", "operation": "read"},
                           {"source": "p", "sink": "net", "operation": "export", "tier": "fine"}]}"#,
        )
        .unwrap();
        let mut engine = CapsuleEngine::new();
        let t = engine.run_script(&script).unwrap();
        assert_eq!(t.denied(), 0);
        assert_eq!(t.lines[1].tier, Tier::Fine);
        assert_eq!(t.lines[0].to_string(), "#0 allow read f -> p [coarse]");
    }

    #[test]
    fn kind_conflict_is_an_error() {
        let mut engine = CapsuleEngine::new();
        engine.add_object("x", ObjectKind::File).unwrap();
        let script = EventScript {
            objects: vec![ScriptObject {
                id: "x".into(),
                kind: ObjectKind::Process,
            }],
            events: vec![],
        };
        assert!(engine.run_script(&script).is_err());
    }
}
