//! Probability-screened contingency analysis.
//!
//! Field reports become per-asset failure probabilities (noisy-OR of report
//! confidences). A contingency's probability is the product of its members'
//! probabilities, treating asset failures as independent. Only contingencies
//! above the screening threshold are re-solved, most probable first.

mod raster;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use itertools::Itertools;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

use crate::grid::{apply_outage, connectivity, BusId, BusKind, GridError, GridSpec};
use crate::powerflow::{
    line_flows, solve_newton, Controls, PowerFlowError, SolveOptions, SolveOutcome,
};

pub use raster::{risk_surface, RiskRaster};

/// Severity assigned to contingencies that cannot be solved.
pub const SEVERITY_MAX: f64 = 10.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ContingencyError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    PowerFlow(#[from] PowerFlowError),
    #[error("contingency must name at least one element")]
    Empty,
    #[error("contingency lists {0} more than once")]
    Duplicate(AssetRef),
    #[error("invalid screening policy: {0}")]
    Policy(String),
    #[error("invalid raster request: {0}")]
    Raster(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssetKind {
    Branch,
    Generator,
}

impl fmt::Display for AssetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AssetKind::Branch => "branch",
            AssetKind::Generator => "generator",
        })
    }
}

/// An outageable element of the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AssetRef {
    pub kind: AssetKind,
    pub id: u32,
}

impl AssetRef {
    pub fn branch(id: u32) -> Self {
        AssetRef {
            kind: AssetKind::Branch,
            id,
        }
    }

    pub fn generator(id: u32) -> Self {
        AssetRef {
            kind: AssetKind::Generator,
            id,
        }
    }
}

impl fmt::Display for AssetRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let prefix = match self.kind {
            AssetKind::Branch => "b",
            AssetKind::Generator => "g",
        };
        write!(f, "{prefix}{}", self.id)
    }
}

/// A set of simultaneous outages. Elements are kept sorted, so the derived
/// ordering is lexicographic over (kind, id).
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<AssetRef>", into = "Vec<AssetRef>")]
pub struct Contingency {
    elements: Vec<AssetRef>,
}

impl Contingency {
    pub fn new(mut elements: Vec<AssetRef>) -> Result<Self, ContingencyError> {
        if elements.is_empty() {
            return Err(ContingencyError::Empty);
        }
        elements.sort_unstable();
        if let Some(w) = elements.windows(2).find(|w| w[0] == w[1]) {
            return Err(ContingencyError::Duplicate(w[0]));
        }
        Ok(Contingency { elements })
    }

    pub fn elements(&self) -> &[AssetRef] {
        &self.elements
    }

    pub fn order(&self) -> usize {
        self.elements.len()
    }

    pub fn contains(&self, asset: &AssetRef) -> bool {
        self.elements.binary_search(asset).is_ok()
    }

    /// Buses touched by any element of the contingency.
    pub fn incident_buses(&self, spec: &GridSpec) -> BTreeSet<BusId> {
        let mut buses = BTreeSet::new();
        for a in &self.elements {
            match a.kind {
                AssetKind::Branch => {
                    if let Some(br) = spec.branch(a.id) {
                        buses.insert(br.from_bus);
                        buses.insert(br.to_bus);
                    }
                }
                AssetKind::Generator => {
                    if let Some(g) = spec.generator(a.id) {
                        buses.insert(g.bus);
                    }
                }
            }
        }
        buses
    }
}

impl TryFrom<Vec<AssetRef>> for Contingency {
    type Error = ContingencyError;

    fn try_from(v: Vec<AssetRef>) -> Result<Self, Self::Error> {
        Contingency::new(v)
    }
}

impl From<Contingency> for Vec<AssetRef> {
    fn from(c: Contingency) -> Self {
        c.elements
    }
}

impl fmt::Display for Contingency {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.elements.iter().join("+"))
    }
}

/// In-service branches and generators, sorted by (kind, id).
pub fn outageable(spec: &GridSpec) -> Vec<AssetRef> {
    let mut out: Vec<AssetRef> = spec
        .branches
        .iter()
        .filter(|b| b.in_service)
        .map(|b| AssetRef::branch(b.id))
        .chain(
            spec.generators
                .iter()
                .filter(|g| g.in_service)
                .map(|g| AssetRef::generator(g.id)),
        )
        .collect();
    out.sort_unstable();
    out
}

/// Every size-`order` subset of the outageable elements, in lexicographic
/// order. Returns an empty list when `order` is zero or too large.
pub fn enumerate(spec: &GridSpec, order: usize) -> Vec<Contingency> {
    let assets = outageable(spec);
    if order == 0 || order > assets.len() {
        return Vec::new();
    }
    assets
        .into_iter()
        .combinations(order)
        .map(|elements| Contingency { elements })
        .collect()
}

/// One piece of evidence that an asset may fail.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub report_id: Uuid,
    pub asset: Option<AssetRef>,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetProbability {
    pub probs: BTreeMap<AssetRef, f64>,
    pub provenance: BTreeMap<AssetRef, Vec<Uuid>>,
}

impl AssetProbability {
    pub fn get(&self, asset: &AssetRef) -> f64 {
        self.probs.get(asset).copied().unwrap_or(0.0)
    }

    pub fn set(&mut self, asset: AssetRef, p: f64) {
        self.probs.insert(asset, p.clamp(0.0, 1.0));
    }

    /// Independence product over the contingency's members.
    pub fn contingency(&self, c: &Contingency) -> f64 {
        c.elements().iter().map(|a| self.get(a)).product()
    }
}

/// Noisy-OR combination of report confidences per asset.
///
/// Every branch and generator of `spec` gets an entry; assets without
/// evidence get `floor`. Evidence with no asset, or naming an asset not in
/// `spec`, is ignored.
pub fn derive_probabilities<'a>(
    evidence: impl IntoIterator<Item = &'a Evidence>,
    spec: &GridSpec,
    floor: f64,
) -> AssetProbability {
    let assets: BTreeSet<AssetRef> = spec
        .branches
        .iter()
        .map(|b| AssetRef::branch(b.id))
        .chain(spec.generators.iter().map(|g| AssetRef::generator(g.id)))
        .collect();

    // p <- p + c (1 - p) is 1 - prod(1 - c_i), exact for a single report
    let mut combined: BTreeMap<AssetRef, f64> = BTreeMap::new();
    let mut provenance: BTreeMap<AssetRef, Vec<Uuid>> = BTreeMap::new();
    for e in evidence {
        let Some(asset) = e.asset.filter(|a| assets.contains(a)) else {
            continue;
        };
        let c = e.confidence.clamp(0.0, 1.0);
        let p = combined.entry(asset).or_insert(0.0);
        *p += c * (1.0 - *p);
        provenance.entry(asset).or_default().push(e.report_id);
    }

    let probs = assets
        .into_iter()
        .map(|a| {
            let p = combined.get(&a).copied().unwrap_or(floor);
            (a, p.clamp(0.0, 1.0))
        })
        .collect();
    AssetProbability { probs, provenance }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScreeningPolicy {
    pub floor: f64,
    pub threshold: f64,
    pub budget: usize,
    pub max_order: usize,
}

impl Default for ScreeningPolicy {
    fn default() -> Self {
        ScreeningPolicy {
            floor: 0.001,
            threshold: 1e-4,
            budget: 100,
            max_order: 2,
        }
    }
}

impl ScreeningPolicy {
    /// No threshold, no budget: screening degenerates to full enumeration.
    pub fn exhaustive(max_order: usize) -> Self {
        ScreeningPolicy {
            threshold: 0.0,
            budget: usize::MAX,
            max_order,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), ContingencyError> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.floor) {
            return Err(ContingencyError::Policy(format!(
                "floor {} not in [0,1]",
                self.floor
            )));
        }
        if !unit.contains(&self.threshold) {
            return Err(ContingencyError::Policy(format!(
                "threshold {} not in [0,1]",
                self.threshold
            )));
        }
        if self.budget < 1 {
            return Err(ContingencyError::Policy("budget must be >= 1".into()));
        }
        if self.max_order < 1 {
            return Err(ContingencyError::Policy("max_order must be >= 1".into()));
        }
        Ok(())
    }
}

/// Sorts by probability, highest first; ties keep lexicographic element
/// order.
fn rank_by_probability(list: &mut [(Contingency, f64)]) {
    list.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
}

pub fn screen(
    candidates: &[Contingency],
    probs: &AssetProbability,
    policy: &ScreeningPolicy,
) -> Vec<(Contingency, f64)> {
    let mut kept: Vec<(Contingency, f64)> = candidates
        .iter()
        .map(|c| (c.clone(), probs.contingency(c)))
        .filter(|(_, p)| *p >= policy.threshold)
        .collect();
    rank_by_probability(&mut kept);
    kept.truncate(policy.budget);
    kept
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeverityScore {
    /// Largest post-contingency branch loading.
    pub value: f64,
    pub unsolvable: bool,
    pub worst_branch: Option<u32>,
}

impl SeverityScore {
    pub fn unsolvable() -> Self {
        SeverityScore {
            value: SEVERITY_MAX,
            unsolvable: true,
            worst_branch: None,
        }
    }
}

/// Severity of the grid as given, with no outage applied.
pub fn base_severity(
    spec: &GridSpec,
    u: &Controls,
    opts: &SolveOptions,
) -> Result<SeverityScore, ContingencyError> {
    severity_of(spec, spec, u, opts)
}

/// Applies `c`, re-solves and scores the result.
///
/// Islands without a slack bus are dropped when they carry no load; an
/// island that strands load makes the contingency unsolvable.
pub fn assess(
    spec: &GridSpec,
    c: &Contingency,
    u: &Controls,
    opts: &SolveOptions,
) -> Result<SeverityScore, ContingencyError> {
    let outaged = apply_outage(spec, c)?;
    severity_of(&outaged, spec, u, opts)
}

fn severity_of(
    outaged: &GridSpec,
    original: &GridSpec,
    u: &Controls,
    opts: &SolveOptions,
) -> Result<SeverityScore, ContingencyError> {
    let load_buses = outaged.load_buses();
    let mut keep = BTreeSet::new();
    for island in connectivity(outaged) {
        let has_slack = island
            .iter()
            .any(|id| outaged.bus(*id).is_some_and(|b| b.kind == BusKind::Slack));
        if has_slack {
            keep.extend(island);
        } else if island.iter().any(|id| load_buses.contains(id)) {
            return Ok(SeverityScore::unsolvable());
        }
    }

    let reduced;
    let (grid, controls) = if keep.len() == outaged.buses.len() {
        (outaged, u.clone())
    } else {
        reduced = outaged.restrict_to(&keep);
        (&reduced, u.remap(original, &reduced))
    };

    match solve_newton(grid, &controls, opts)? {
        SolveOutcome::Converged(sol) => {
            let mut score = SeverityScore {
                value: 0.0,
                unsolvable: false,
                worst_branch: None,
            };
            for flow in line_flows(&sol.state, grid) {
                if score.worst_branch.is_none() || flow.loading > score.value {
                    score.value = flow.loading;
                    score.worst_branch = Some(flow.branch_id);
                }
            }
            Ok(score)
        }
        SolveOutcome::Diverged { .. } | SolveOutcome::Islanded { .. } => {
            Ok(SeverityScore::unsolvable())
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssessedContingency {
    pub contingency: Contingency,
    pub probability: f64,
    pub severity: SeverityScore,
}

impl AssessedContingency {
    pub fn risk(&self) -> f64 {
        self.probability * self.severity.value
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskAssessment {
    /// Assessed contingencies in screening order.
    pub assessed: Vec<AssessedContingency>,
    /// Probability-weighted severity per bus.
    pub bus_risk: BTreeMap<BusId, f64>,
}

impl RiskAssessment {
    pub fn new(spec: &GridSpec, assessed: Vec<AssessedContingency>) -> Self {
        let mut bus_risk: BTreeMap<BusId, f64> = spec.buses.iter().map(|b| (b.id, 0.0)).collect();
        for a in &assessed {
            for bus in a.contingency.incident_buses(spec) {
                *bus_risk.entry(bus).or_insert(0.0) += a.risk();
            }
        }
        RiskAssessment { assessed, bus_risk }
    }

    /// Contingencies ordered by severity, worst first; ties by element order.
    pub fn ranked_by_severity(&self) -> Vec<&AssessedContingency> {
        let mut out: Vec<&AssessedContingency> = self.assessed.iter().collect();
        out.sort_by(|a, b| {
            b.severity
                .value
                .total_cmp(&a.severity.value)
                .then_with(|| a.contingency.cmp(&b.contingency))
        });
        out
    }

    pub fn worst(&self) -> Option<&AssessedContingency> {
        self.ranked_by_severity().into_iter().next()
    }

    /// Severity-ranked table with a header line.
    pub fn to_csv(&self) -> String {
        use std::fmt::Write as _;
        let mut out = String::from(
            "rank,contingency,order,probability,severity,unsolvable,worst_branch,risk\n",
        );
        for (rank, a) in self.ranked_by_severity().into_iter().enumerate() {
            let worst = a
                .severity
                .worst_branch
                .map(|b| b.to_string())
                .unwrap_or_default();
            let _ = writeln!(
                out,
                "{},{},{},{:e},{},{},{},{:e}",
                rank + 1,
                a.contingency,
                a.contingency.order(),
                a.probability,
                a.severity.value,
                a.severity.unsolvable,
                worst,
                a.risk()
            );
        }
        out
    }
}

/// Candidate contingencies of order 1 through `max_order`.
pub fn candidates(spec: &GridSpec, max_order: usize) -> Vec<Contingency> {
    (1..=max_order).flat_map(|x| enumerate(spec, x)).collect()
}

/// Enumerates, screens (unless `exhaustive`), and assesses in parallel.
pub fn analyze(
    spec: &GridSpec,
    probs: &AssetProbability,
    policy: &ScreeningPolicy,
    u: &Controls,
    opts: &SolveOptions,
    exhaustive: bool,
) -> Result<RiskAssessment, ContingencyError> {
    policy.validate()?;
    let all = candidates(spec, policy.max_order);
    let selected = if exhaustive {
        let mut list: Vec<_> = all
            .into_iter()
            .map(|c| {
                let p = probs.contingency(&c);
                (c, p)
            })
            .collect();
        rank_by_probability(&mut list);
        list
    } else {
        screen(&all, probs, policy)
    };

    let assessed = selected
        .into_par_iter()
        .map(|(contingency, probability)| {
            assess(spec, &contingency, u, opts).map(|severity| AssessedContingency {
                contingency,
                probability,
                severity,
            })
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RiskAssessment::new(spec, assessed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::{self, seven_bus};

    fn ev(asset: AssetRef, confidence: f64) -> Evidence {
        Evidence {
            report_id: Uuid::new_v4(),
            asset: Some(asset),
            confidence,
        }
    }

    #[test]
    fn contingency_validation() {
        assert_eq!(Contingency::new(vec![]), Err(ContingencyError::Empty));
        assert_eq!(
            Contingency::new(vec![AssetRef::branch(1), AssetRef::branch(1)]),
            Err(ContingencyError::Duplicate(AssetRef::branch(1)))
        );
        let c = Contingency::new(vec![AssetRef::generator(1), AssetRef::branch(4)]).unwrap();
        assert_eq!(c.elements(), &[AssetRef::branch(4), AssetRef::generator(1)]);
        assert_eq!(c.to_string(), "b4+g1");
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<Contingency>(&json).unwrap(), c);
        assert!(serde_json::from_str::<Contingency>("[]").is_err());
    }

    #[test]
    fn enumeration_counts() {
        let mut spec = seven_bus();
        spec.generators.clear();
        spec.branches.retain(|b| b.in_service && b.id <= 7);
        assert_eq!(enumerate(&spec, 1).len(), 7);
        assert_eq!(enumerate(&spec, 2).len(), 21);
        assert!(enumerate(&spec, 8).is_empty());
        assert!(enumerate(&spec, 0).is_empty());
    }

    #[test]
    fn enumeration_is_ordered_and_disjoint() {
        let spec = seven_bus();
        let one = enumerate(&spec, 1);
        let two = enumerate(&spec, 2);
        assert!(one.windows(2).all(|w| w[0] < w[1]));
        assert!(two.windows(2).all(|w| w[0] < w[1]));
        let one_set: BTreeSet<_> = one.iter().collect();
        assert!(two.iter().all(|c| !one_set.contains(c)));
        assert_eq!(one, enumerate(&spec, 1));
        // the spare is not outageable
        assert!(!one
            .iter()
            .any(|c| c.contains(&AssetRef::branch(fixtures::SPARE_BRANCH))));
    }

    #[test]
    fn noisy_or() {
        let spec = seven_bus();
        let p = derive_probabilities(&[ev(AssetRef::branch(1), 0.3)], &spec, 0.001);
        assert_eq!(p.get(&AssetRef::branch(1)), 0.3);

        let p = derive_probabilities(
            &[ev(AssetRef::branch(1), 0.3), ev(AssetRef::branch(1), 0.5)],
            &spec,
            0.001,
        );
        assert!((p.get(&AssetRef::branch(1)) - 0.65).abs() < 1e-15);
        assert_eq!(p.provenance[&AssetRef::branch(1)].len(), 2);

        let p = derive_probabilities(&[], &spec, 0.001);
        assert_eq!(p.probs.len(), spec.branches.len() + spec.generators.len());
        assert!(p.probs.values().all(|&v| v == 0.001));
    }

    #[test]
    fn unmapped_evidence_is_ignored() {
        let spec = seven_bus();
        let e = Evidence {
            report_id: Uuid::new_v4(),
            asset: None,
            confidence: 0.9,
        };
        let p = derive_probabilities(&[e, ev(AssetRef::branch(404), 0.9)], &spec, 0.001);
        assert!(p.probs.values().all(|&v| v == 0.001));
        assert!(p.provenance.is_empty());
    }

    fn probs(entries: &[(AssetRef, f64)]) -> AssetProbability {
        AssetProbability {
            probs: entries.iter().copied().collect(),
            provenance: BTreeMap::new(),
        }
    }

    #[test]
    fn screening_threshold_and_order() {
        let p = probs(&[
            (AssetRef::branch(1), 0.65),
            (AssetRef::branch(2), 0.1),
            (AssetRef::branch(3), 0.001),
        ]);
        let cands: Vec<_> = (1..=3)
            .map(|i| Contingency::new(vec![AssetRef::branch(i)]).unwrap())
            .collect();
        let policy = ScreeningPolicy {
            threshold: 0.05,
            ..Default::default()
        };
        let out = screen(&cands, &p, &policy);
        assert_eq!(out, vec![(cands[0].clone(), 0.65), (cands[1].clone(), 0.1)]);

        let pair = Contingency::new(vec![AssetRef::branch(1), AssetRef::branch(2)]).unwrap();
        assert!((p.contingency(&pair) - 0.065).abs() < 1e-15);
    }

    #[test]
    fn zero_threshold_keeps_everything() {
        let spec = seven_bus();
        let all = candidates(&spec, 2);
        let p = derive_probabilities(&[], &spec, 0.001);
        let out = screen(&all, &p, &ScreeningPolicy::exhaustive(2));
        let got: BTreeSet<_> = out.into_iter().map(|(c, _)| c).collect();
        assert_eq!(got, all.into_iter().collect());
    }

    #[test]
    fn budget_truncates_ties_lexicographically() {
        let spec = seven_bus();
        let all = candidates(&spec, 1);
        let p = derive_probabilities(&[], &spec, 0.001);
        let policy = ScreeningPolicy {
            budget: 3,
            ..Default::default()
        };
        let out = screen(&all, &p, &policy);
        assert_eq!(
            out.iter().map(|(c, _)| c.clone()).collect::<Vec<_>>(),
            all[..3].to_vec()
        );
    }

    #[test]
    fn islanding_a_load_is_unsolvable() {
        let spec = seven_bus();
        let u = Controls::from_spec(&spec);
        // bus 4 is fed by branches 4 and 5 only
        let c = Contingency::new(vec![AssetRef::branch(4), AssetRef::branch(5)]).unwrap();
        let s = assess(&spec, &c, &u, &SolveOptions::default()).unwrap();
        assert_eq!(s, SeverityScore::unsolvable());
        assert_eq!(s.value, SEVERITY_MAX);
    }

    #[test]
    fn unloaded_stub_and_spare_match_base_case() {
        let spec = seven_bus();
        let u = Controls::from_spec(&spec);
        let opts = SolveOptions::default();
        let base = base_severity(&spec, &u, &opts).unwrap();
        assert!(!base.unsolvable);

        let stub = Contingency::new(vec![AssetRef::branch(fixtures::RADIAL_STUB_BRANCH)]).unwrap();
        let s = assess(&spec, &stub, &u, &opts).unwrap();
        assert!(!s.unsolvable);
        assert!(
            (s.value - base.value).abs() < 1e-6,
            "{} vs {}",
            s.value,
            base.value
        );

        let spare = Contingency::new(vec![AssetRef::branch(fixtures::SPARE_BRANCH)]).unwrap();
        assert_eq!(assess(&spec, &spare, &u, &opts).unwrap(), base);
    }

    #[test]
    fn bus_risk_accumulates_over_incident_buses() {
        let spec = seven_bus();
        let c = Contingency::new(vec![AssetRef::branch(5)]).unwrap();
        let a = AssessedContingency {
            contingency: c,
            probability: 0.5,
            severity: SeverityScore {
                value: 0.8,
                unsolvable: false,
                worst_branch: Some(6),
            },
        };
        let r = RiskAssessment::new(&spec, vec![a]);
        assert_eq!(r.bus_risk[&4], 0.4);
        assert_eq!(r.bus_risk[&5], 0.4);
        assert_eq!(r.bus_risk[&1], 0.0);
    }
}
