//! Network description, validation, and admittance assembly.
//!
//! Grid files are JSON. Impedances (`r`, `x`, `b_shunt`) and voltage
//! setpoints are given in per-unit already; powers (`p_set`, `q_min`,
//! `q_max`, load `p`/`q`) and branch `rating` are given in MW / MVAr / MVA
//! and divided by `base_mva` while parsing. Everything downstream of
//! [`parse_grid`] is per-unit.

use std::collections::{BTreeMap, BTreeSet, HashMap, VecDeque};

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::contingency::{AssetKind, Contingency};

pub type BusId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BusKind {
    Slack,
    Pv,
    Pq,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bus {
    pub id: BusId,
    pub kind: BusKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub voltage_setpoint: Option<f64>,
    pub coord: (f64, f64),
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

impl Bus {
    /// Initial voltage magnitude for a flat start.
    pub fn initial_voltage(&self) -> f64 {
        match self.kind {
            BusKind::Pq => 1.0,
            _ => self.voltage_setpoint.unwrap_or(1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Branch {
    pub id: u32,
    pub from_bus: BusId,
    pub to_bus: BusId,
    pub r: f64,
    pub x: f64,
    #[serde(default)]
    pub b_shunt: f64,
    pub rating: f64,
    #[serde(default = "default_true")]
    pub in_service: bool,
}

impl Branch {
    pub fn series_admittance(&self) -> Complex64 {
        Complex64::new(1.0, 0.0) / Complex64::new(self.r, self.x)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Generator {
    pub id: u32,
    pub bus: BusId,
    pub p_set: f64,
    pub q_min: f64,
    pub q_max: f64,
    #[serde(default = "default_true")]
    pub in_service: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Load {
    pub id: u32,
    pub bus: BusId,
    pub p: f64,
    pub q: f64,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub base_mva: f64,
    pub buses: Vec<Bus>,
    #[serde(default)]
    pub branches: Vec<Branch>,
    #[serde(default)]
    pub generators: Vec<Generator>,
    #[serde(default)]
    pub loads: Vec<Load>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{element} references unknown bus {bus}")]
    UnknownBus { bus: BusId, element: String },
    #[error("duplicate {kind} id {id}")]
    DuplicateId { kind: &'static str, id: u32 },
    #[error("branch {0} has zero impedance")]
    ZeroImpedance(u32),
    #[error("branch {0} connects a bus to itself")]
    SelfLoop(u32),
    #[error("grid has no slack bus")]
    NoSlack,
    #[error("grid has multiple slack buses: {0:?}")]
    MultipleSlack(Vec<BusId>),
    #[error("invalid value: {0}")]
    Invalid(String),
    #[error("unknown {kind} {id}")]
    UnknownElement { kind: AssetKind, id: u32 },
}

/// Parses a grid file in strict mode: unknown keys are rejected.
pub fn parse_grid(text: &str) -> Result<GridSpec, GridError> {
    parse_grid_with(text, false)
}

/// Parses a grid file. With `lenient`, keys not belonging to the schema are
/// dropped instead of rejected.
pub fn parse_grid_with(text: &str, lenient: bool) -> Result<GridSpec, GridError> {
    let raw: GridSpec = if lenient {
        let mut value: serde_json::Value = serde_json::from_str(text).map_err(syntax)?;
        strip_unknown_keys(&mut value);
        serde_json::from_value(value).map_err(syntax)?
    } else {
        serde_json::from_str(text).map_err(syntax)?
    };
    let spec = raw.into_per_unit();
    spec.validate()?;
    Ok(spec)
}

fn syntax(err: serde_json::Error) -> GridError {
    GridError::Syntax {
        line: err.line(),
        column: err.column(),
        message: err.to_string(),
    }
}

fn strip_unknown_keys(value: &mut serde_json::Value) {
    const TOP: &[&str] = &["base_mva", "buses", "branches", "generators", "loads"];
    const BUS: &[&str] = &["id", "kind", "voltage_setpoint", "coord", "name"];
    const BRANCH: &[&str] = &[
        "id",
        "from_bus",
        "to_bus",
        "r",
        "x",
        "b_shunt",
        "rating",
        "in_service",
    ];
    const GEN: &[&str] = &["id", "bus", "p_set", "q_min", "q_max", "in_service"];
    const LOAD: &[&str] = &["id", "bus", "p", "q"];

    let Some(top) = value.as_object_mut() else {
        return;
    };
    top.retain(|k, _| TOP.contains(&k.as_str()));
    for (key, allowed) in [
        ("buses", BUS),
        ("branches", BRANCH),
        ("generators", GEN),
        ("loads", LOAD),
    ] {
        if let Some(items) = top.get_mut(key).and_then(|v| v.as_array_mut()) {
            for item in items.iter_mut().filter_map(|v| v.as_object_mut()) {
                item.retain(|k, _| allowed.contains(&k.as_str()));
            }
        }
    }
}

impl GridSpec {
    fn into_per_unit(mut self) -> Self {
        let base = self.base_mva;
        if !(base.is_finite() && base > 0.0) {
            // validate() reports it; leave values untouched
            return self;
        }
        for br in &mut self.branches {
            br.rating /= base;
        }
        for g in &mut self.generators {
            g.p_set /= base;
            g.q_min /= base;
            g.q_max /= base;
        }
        for l in &mut self.loads {
            l.p /= base;
            l.q /= base;
        }
        self
    }

    /// Checks every structural invariant of a grid description.
    pub fn validate(&self) -> Result<(), GridError> {
        if !(self.base_mva.is_finite() && self.base_mva > 0.0) {
            return Err(GridError::Invalid(format!(
                "base_mva must be positive, got {}",
                self.base_mva
            )));
        }

        let mut bus_ids = BTreeSet::new();
        for bus in &self.buses {
            if !bus_ids.insert(bus.id) {
                return Err(GridError::DuplicateId {
                    kind: "bus",
                    id: bus.id,
                });
            }
            if let Some(v) = bus.voltage_setpoint {
                if !(v.is_finite() && v > 0.0) {
                    return Err(GridError::Invalid(format!(
                        "bus {} voltage_setpoint must be positive",
                        bus.id
                    )));
                }
            }
            if !(bus.coord.0.is_finite() && bus.coord.1.is_finite()) {
                return Err(GridError::Invalid(format!(
                    "bus {} coord not finite",
                    bus.id
                )));
            }
        }
        let check_bus = |bus: BusId, element: String| {
            if bus_ids.contains(&bus) {
                Ok(())
            } else {
                Err(GridError::UnknownBus { bus, element })
            }
        };

        let mut seen = BTreeSet::new();
        for br in &self.branches {
            if !seen.insert(br.id) {
                return Err(GridError::DuplicateId {
                    kind: "branch",
                    id: br.id,
                });
            }
            check_bus(br.from_bus, format!("branch {}", br.id))?;
            check_bus(br.to_bus, format!("branch {}", br.id))?;
            if br.from_bus == br.to_bus {
                return Err(GridError::SelfLoop(br.id));
            }
            if ![br.r, br.x, br.b_shunt, br.rating]
                .iter()
                .all(|v| v.is_finite())
            {
                return Err(GridError::Invalid(format!(
                    "branch {} has non-finite data",
                    br.id
                )));
            }
            if br.r == 0.0 && br.x == 0.0 {
                return Err(GridError::ZeroImpedance(br.id));
            }
            if br.rating <= 0.0 {
                return Err(GridError::Invalid(format!(
                    "branch {} rating must be positive",
                    br.id
                )));
            }
        }

        seen.clear();
        for g in &self.generators {
            if !seen.insert(g.id) {
                return Err(GridError::DuplicateId {
                    kind: "generator",
                    id: g.id,
                });
            }
            check_bus(g.bus, format!("generator {}", g.id))?;
            if ![g.p_set, g.q_min, g.q_max].iter().all(|v| v.is_finite()) {
                return Err(GridError::Invalid(format!(
                    "generator {} has non-finite data",
                    g.id
                )));
            }
            if g.q_min > g.q_max {
                return Err(GridError::Invalid(format!(
                    "generator {} has q_min > q_max",
                    g.id
                )));
            }
        }

        seen.clear();
        for l in &self.loads {
            if !seen.insert(l.id) {
                return Err(GridError::DuplicateId {
                    kind: "load",
                    id: l.id,
                });
            }
            check_bus(l.bus, format!("load {}", l.id))?;
            if !(l.p.is_finite() && l.q.is_finite()) {
                return Err(GridError::Invalid(format!(
                    "load {} has non-finite data",
                    l.id
                )));
            }
        }

        let slack: Vec<BusId> = self
            .buses
            .iter()
            .filter(|b| b.kind == BusKind::Slack)
            .map(|b| b.id)
            .collect();
        match slack.len() {
            0 => Err(GridError::NoSlack),
            1 => Ok(()),
            _ => Err(GridError::MultipleSlack(slack)),
        }
    }

    pub fn bus(&self, id: BusId) -> Option<&Bus> {
        self.buses.iter().find(|b| b.id == id)
    }

    pub fn branch(&self, id: u32) -> Option<&Branch> {
        self.branches.iter().find(|b| b.id == id)
    }

    pub fn generator(&self, id: u32) -> Option<&Generator> {
        self.generators.iter().find(|g| g.id == id)
    }

    /// Real and reactive load at every bus, keyed by bus id.
    pub fn bus_loads(&self) -> BTreeMap<BusId, (f64, f64)> {
        let mut out = BTreeMap::new();
        for l in &self.loads {
            let e = out.entry(l.bus).or_insert((0.0, 0.0));
            e.0 += l.p;
            e.1 += l.q;
        }
        out
    }

    /// Buses that carry a nonzero load.
    pub fn load_buses(&self) -> BTreeSet<BusId> {
        self.loads
            .iter()
            .filter(|l| l.p != 0.0 || l.q != 0.0)
            .map(|l| l.bus)
            .collect()
    }

    /// Bus kind used by the solver. A PV bus without any in-service
    /// generator cannot hold its voltage and is treated as PQ.
    pub fn effective_kind(&self, bus: &Bus) -> BusKind {
        match bus.kind {
            BusKind::Pv
                if !self
                    .generators
                    .iter()
                    .any(|g| g.in_service && g.bus == bus.id) =>
            {
                BusKind::Pq
            }
            kind => kind,
        }
    }

    /// Keeps only the listed buses and the elements attached to them.
    pub fn restrict_to(&self, keep: &BTreeSet<BusId>) -> GridSpec {
        GridSpec {
            base_mva: self.base_mva,
            buses: self
                .buses
                .iter()
                .filter(|b| keep.contains(&b.id))
                .cloned()
                .collect(),
            branches: self
                .branches
                .iter()
                .filter(|b| keep.contains(&b.from_bus) && keep.contains(&b.to_bus))
                .cloned()
                .collect(),
            generators: self
                .generators
                .iter()
                .filter(|g| keep.contains(&g.bus))
                .cloned()
                .collect(),
            loads: self
                .loads
                .iter()
                .filter(|l| keep.contains(&l.bus))
                .cloned()
                .collect(),
        }
    }
}

/// Bus admittance matrix split into conductance and susceptance parts.
///
/// Rows follow the order of `GridSpec::buses`. `neighbors[i]` lists every
/// column k with a structural entry in row i, including i itself.
#[derive(Debug, Clone, PartialEq)]
pub struct AdmittanceMatrix {
    pub g: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub bus_ids: Vec<BusId>,
    index: HashMap<BusId, usize>,
    neighbors: Vec<Vec<usize>>,
}

impl AdmittanceMatrix {
    pub fn len(&self) -> usize {
        self.bus_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bus_ids.is_empty()
    }

    pub fn index_of(&self, bus: BusId) -> Option<usize> {
        self.index.get(&bus).copied()
    }

    pub fn neighbors(&self, row: usize) -> &[usize] {
        &self.neighbors[row]
    }

    /// Off-diagonal structural pattern as ordered (row, col) pairs.
    pub fn pattern(&self) -> BTreeSet<(usize, usize)> {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(i, ks)| ks.iter().filter(move |&&k| k != i).map(move |&k| (i, k)))
            .collect()
    }

    pub fn entry(&self, i: usize, k: usize) -> Complex64 {
        Complex64::new(self.g[(i, k)], self.b[(i, k)])
    }
}

/// Standard pi-model Y-bus assembly over in-service branches.
pub fn build_admittance(spec: &GridSpec) -> AdmittanceMatrix {
    let n = spec.buses.len();
    let bus_ids: Vec<BusId> = spec.buses.iter().map(|b| b.id).collect();
    let index: HashMap<BusId, usize> = bus_ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut g = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, n);
    let mut adjacency: Vec<BTreeSet<usize>> = (0..n).map(|i| BTreeSet::from([i])).collect();

    for br in spec.branches.iter().filter(|br| br.in_service) {
        let (f, t) = (index[&br.from_bus], index[&br.to_bus]);
        let y = br.series_admittance();
        let half_charging = br.b_shunt / 2.0;

        g[(f, t)] -= y.re;
        b[(f, t)] -= y.im;
        g[(t, f)] -= y.re;
        b[(t, f)] -= y.im;
        for i in [f, t] {
            g[(i, i)] += y.re;
            b[(i, i)] += y.im + half_charging;
        }
        adjacency[f].insert(t);
        adjacency[t].insert(f);
    }

    AdmittanceMatrix {
        g,
        b,
        bus_ids,
        index,
        neighbors: adjacency
            .into_iter()
            .map(|s| s.into_iter().collect())
            .collect(),
    }
}

/// Returns a copy of `spec` with every element of `c` taken out of service.
pub fn apply_outage(spec: &GridSpec, c: &Contingency) -> Result<GridSpec, GridError> {
    let mut out = spec.clone();
    for asset in c.elements() {
        let found = match asset.kind {
            AssetKind::Branch => out
                .branches
                .iter_mut()
                .find(|b| b.id == asset.id)
                .map(|b| b.in_service = false),
            AssetKind::Generator => out
                .generators
                .iter_mut()
                .find(|g| g.id == asset.id)
                .map(|g| g.in_service = false),
        };
        if found.is_none() {
            return Err(GridError::UnknownElement {
                kind: asset.kind,
                id: asset.id,
            });
        }
    }
    Ok(out)
}

/// Partitions buses into islands joined by in-service branches.
///
/// Islands are listed in order of their first bus in `spec.buses`; bus ids
/// inside an island keep that order too.
pub fn connectivity(spec: &GridSpec) -> Vec<Vec<BusId>> {
    let index: HashMap<BusId, usize> = spec
        .buses
        .iter()
        .enumerate()
        .map(|(i, b)| (b.id, i))
        .collect();
    let mut adj = vec![Vec::new(); spec.buses.len()];
    for br in spec.branches.iter().filter(|b| b.in_service) {
        if let (Some(&f), Some(&t)) = (index.get(&br.from_bus), index.get(&br.to_bus)) {
            adj[f].push(t);
            adj[t].push(f);
        }
    }

    let mut island_of = vec![usize::MAX; spec.buses.len()];
    let mut islands: Vec<Vec<usize>> = Vec::new();
    for start in 0..spec.buses.len() {
        if island_of[start] != usize::MAX {
            continue;
        }
        let id = islands.len();
        let mut members = vec![];
        let mut queue = VecDeque::from([start]);
        island_of[start] = id;
        while let Some(i) = queue.pop_front() {
            members.push(i);
            for &k in &adj[i] {
                if island_of[k] == usize::MAX {
                    island_of[k] = id;
                    queue.push_back(k);
                }
            }
        }
        members.sort_unstable();
        islands.push(members);
    }
    islands
        .into_iter()
        .map(|m| m.into_iter().map(|i| spec.buses[i].id).collect())
        .collect()
}
