//! Newton-Raphson AC power flow in polar coordinates.
//!
//! The residual at bus i is
//!
//! ```text
//! f_p[i] = -P_g[i] + P_l[i] + sum_k |V_i||V_k| (G_ik cos t_ik + B_ik sin t_ik)
//! f_q[i] = -Q_g[i] + Q_l[i] + sum_k |V_i||V_k| (G_ik sin t_ik - B_ik cos t_ik)
//! ```
//!
//! with `t_ik = theta_i - theta_k`. The sum runs over the columns k with a
//! structural entry in row i of the admittance matrix, diagonal included.
//!
//! Generator reactive limits are not enforced during the solve; violations
//! are reported as warnings on the solution. No step damping is applied.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{build_admittance, connectivity, AdmittanceMatrix, BusId, BusKind, GridSpec};

/// Any mismatch above this aborts the iteration.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PowerFlowError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid solve options: {0}")]
    Options(String),
}

/// Voltage magnitudes and angles, indexed like `GridSpec::buses`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemState {
    pub v: Vec<f64>,
    pub theta: Vec<f64>,
}

impl SystemState {
    /// Voltage at setpoint (or 1.0) and zero angle everywhere.
    pub fn flat(spec: &GridSpec) -> Self {
        SystemState {
            v: spec.buses.iter().map(|b| b.initial_voltage()).collect(),
            theta: vec![0.0; spec.buses.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.v.len()
    }

    pub fn is_empty(&self) -> bool {
        self.v.is_empty()
    }
}

/// Generator outputs, indexed like `GridSpec::generators`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Controls {
    pub p_gen: Vec<f64>,
    pub q_gen: Vec<f64>,
}

impl Controls {
    /// Scheduled real output of each generator, zero reactive output.
    pub fn from_spec(spec: &GridSpec) -> Self {
        Controls {
            p_gen: spec.generators.iter().map(|g| g.p_set).collect(),
            q_gen: vec![0.0; spec.generators.len()],
        }
    }

    /// Re-indexes controls of `from` onto the generators of `to` by id.
    pub fn remap(&self, from: &GridSpec, to: &GridSpec) -> Controls {
        let lookup = |id: u32| from.generators.iter().position(|g| g.id == id);
        let (p_gen, q_gen) = to
            .generators
            .iter()
            .map(|g| match lookup(g.id) {
                Some(i) => (self.p_gen[i], self.q_gen[i]),
                None => (g.p_set, 0.0),
            })
            .unzip();
        Controls { p_gen, q_gen }
    }
}

/// Per-bus residuals of the power-flow equations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mismatch {
    pub f_p: Vec<f64>,
    pub f_q: Vec<f64>,
}

impl Mismatch {
    pub fn norm_inf(&self) -> f64 {
        self.f_p
            .iter()
            .chain(&self.f_q)
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Infinity norm over the equations the solver enforces: real power at
    /// every non-slack bus, reactive power at every PQ bus.
    pub fn solved_norm(&self, spec: &GridSpec) -> f64 {
        let mut norm: f64 = 0.0;
        for (i, bus) in spec.buses.iter().enumerate() {
            match spec.effective_kind(bus) {
                BusKind::Slack => {}
                BusKind::Pv => norm = norm.max(self.f_p[i].abs()),
                BusKind::Pq => norm = norm.max(self.f_p[i].abs()).max(self.f_q[i].abs()),
            }
        }
        norm
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolveOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub flat_start: bool,
}

impl Default for SolveOptions {
    fn default() -> Self {
        SolveOptions {
            tol: 1e-8,
            max_iter: 20,
            flat_start: true,
        }
    }
}

impl SolveOptions {
    pub fn validate(&self) -> Result<(), PowerFlowError> {
        if !(self.tol.is_finite() && self.tol > 0.0) {
            return Err(PowerFlowError::Options(format!(
                "tol must be > 0, got {}",
                self.tol
            )));
        }
        if self.max_iter < 1 {
            return Err(PowerFlowError::Options("max_iter must be >= 1".into()));
        }
        if !self.flat_start {
            return Err(PowerFlowError::Options(
                "only flat start is supported".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DivergenceReason {
    MaxIterations,
    NonFinite,
    Blowup,
    SingularJacobian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitWarning {
    pub generator: u32,
    pub q: f64,
    pub q_min: f64,
    pub q_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Solution {
    pub state: SystemState,
    /// Controls with the slack and PV reactive outputs filled in.
    pub controls: Controls,
    /// Net generation required at the slack bus, (P, Q).
    pub slack_power: (f64, f64),
    pub iterations: usize,
    pub final_mismatch_norm: f64,
    /// Mismatch norm before each Newton step, and after the last one.
    pub trace: Vec<f64>,
    pub warnings: Vec<LimitWarning>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum SolveOutcome {
    Converged(Solution),
    Diverged {
        iterations: usize,
        mismatch_norm: f64,
        reason: DivergenceReason,
        trace: Vec<f64>,
    },
    Islanded {
        islands: Vec<Vec<BusId>>,
    },
}

impl SolveOutcome {
    pub fn solution(&self) -> Option<&Solution> {
        match self {
            SolveOutcome::Converged(s) => Some(s),
            _ => None,
        }
    }
}

/// Net injections P_i, Q_i computed from the network equations.
fn injections(state: &SystemState, y: &AdmittanceMatrix) -> (Vec<f64>, Vec<f64>) {
    let n = y.len();
    let mut p = vec![0.0; n];
    let mut q = vec![0.0; n];
    for i in 0..n {
        for &k in y.neighbors(i) {
            let t = state.theta[i] - state.theta[k];
            let (s, c) = t.sin_cos();
            let vv = state.v[i] * state.v[k];
            let (g, b) = (y.g[(i, k)], y.b[(i, k)]);
            p[i] += vv * (g * c + b * s);
            q[i] += vv * (g * s - b * c);
        }
    }
    (p, q)
}

fn check_dims(
    state: &SystemState,
    spec: &GridSpec,
    y: &AdmittanceMatrix,
) -> Result<(), PowerFlowError> {
    let n = spec.buses.len();
    if y.len() != n || state.v.len() != n || state.theta.len() != n {
        return Err(PowerFlowError::Dimension(format!(
            "{} buses, admittance {}x{}, state v={} theta={}",
            n,
            y.len(),
            y.len(),
            state.v.len(),
            state.theta.len()
        )));
    }
    Ok(())
}

pub fn compute_mismatch(
    state: &SystemState,
    u: &Controls,
    spec: &GridSpec,
    y: &AdmittanceMatrix,
) -> Result<Mismatch, PowerFlowError> {
    check_dims(state, spec, y)?;
    let m = spec.generators.len();
    if u.p_gen.len() != m || u.q_gen.len() != m {
        return Err(PowerFlowError::Dimension(format!(
            "{} generators, controls p={} q={}",
            m,
            u.p_gen.len(),
            u.q_gen.len()
        )));
    }

    let (mut f_p, mut f_q) = injections(state, y);
    for l in &spec.loads {
        let i = y.index_of(l.bus).expect("validated bus");
        f_p[i] += l.p;
        f_q[i] += l.q;
    }
    for (j, g) in spec.generators.iter().enumerate() {
        if g.in_service {
            let i = y.index_of(g.bus).expect("validated bus");
            f_p[i] -= u.p_gen[j];
            f_q[i] -= u.q_gen[j];
        }
    }
    Ok(Mismatch { f_p, f_q })
}

/// Jacobian of the enforced residuals with respect to the unknowns.
///
/// Unknowns are the angles of `angle_buses` followed by the magnitudes of
/// `voltage_buses`; rows are ordered the same way (f_p then f_q).
#[derive(Debug, Clone, PartialEq)]
pub struct Jacobian {
    pub matrix: DMatrix<f64>,
    pub angle_buses: Vec<usize>,
    pub voltage_buses: Vec<usize>,
}

/// Row indices of non-slack buses and of PQ buses.
fn unknown_layout(spec: &GridSpec) -> (Vec<usize>, Vec<usize>) {
    let mut angle = Vec::new();
    let mut voltage = Vec::new();
    for (i, bus) in spec.buses.iter().enumerate() {
        match spec.effective_kind(bus) {
            BusKind::Slack => {}
            BusKind::Pv => angle.push(i),
            BusKind::Pq => {
                angle.push(i);
                voltage.push(i);
            }
        }
    }
    (angle, voltage)
}

pub fn build_jacobian(
    state: &SystemState,
    spec: &GridSpec,
    y: &AdmittanceMatrix,
) -> Result<Jacobian, PowerFlowError> {
    check_dims(state, spec, y)?;
    let (angle_buses, voltage_buses) = unknown_layout(spec);
    let n = y.len();
    let (na, nv) = (angle_buses.len(), voltage_buses.len());

    // column position of each bus among the unknowns
    let mut angle_col = vec![None; n];
    let mut volt_col = vec![None; n];
    for (c, &i) in angle_buses.iter().enumerate() {
        angle_col[i] = Some(c);
    }
    for (c, &i) in voltage_buses.iter().enumerate() {
        volt_col[i] = Some(na + c);
    }

    let (p, q) = injections(state, y);
    let v = &state.v;
    let mut jac = DMatrix::zeros(na + nv, na + nv);

    let rows = angle_buses
        .iter()
        .enumerate()
        .map(|(r, &i)| (r, i, false))
        .chain(
            voltage_buses
                .iter()
                .enumerate()
                .map(|(r, &i)| (na + r, i, true)),
        );
    for (row, i, reactive) in rows {
        for &k in y.neighbors(i) {
            let (g, b) = (y.g[(i, k)], y.b[(i, k)]);
            let (d_theta, d_v) = if k == i {
                if reactive {
                    (p[i] - g * v[i] * v[i], q[i] / v[i] - b * v[i])
                } else {
                    (-q[i] - b * v[i] * v[i], p[i] / v[i] + g * v[i])
                }
            } else {
                let (s, c) = (state.theta[i] - state.theta[k]).sin_cos();
                if reactive {
                    (-v[i] * v[k] * (g * c + b * s), v[i] * (g * s - b * c))
                } else {
                    (v[i] * v[k] * (g * s - b * c), v[i] * (g * c + b * s))
                }
            };
            if let Some(col) = angle_col[k] {
                jac[(row, col)] = d_theta;
            }
            if let Some(col) = volt_col[k] {
                jac[(row, col)] = d_v;
            }
        }
    }

    Ok(Jacobian {
        matrix: jac,
        angle_buses,
        voltage_buses,
    })
}

fn residual_vector(mismatch: &Mismatch, jac_layout: (&[usize], &[usize])) -> DVector<f64> {
    let (angle, voltage) = jac_layout;
    DVector::from_iterator(
        angle.len() + voltage.len(),
        angle
            .iter()
            .map(|&i| mismatch.f_p[i])
            .chain(voltage.iter().map(|&i| mismatch.f_q[i])),
    )
}

/// Solves the power flow from a flat start.
pub fn solve_newton(
    spec: &GridSpec,
    u: &Controls,
    opts: &SolveOptions,
) -> Result<SolveOutcome, PowerFlowError> {
    opts.validate()?;

    let islands = connectivity(spec);
    let has_slack = |island: &Vec<BusId>| {
        island
            .iter()
            .any(|id| spec.bus(*id).is_some_and(|b| b.kind == BusKind::Slack))
    };
    if !islands.iter().all(has_slack) {
        return Ok(SolveOutcome::Islanded { islands });
    }

    let y = build_admittance(spec);
    let mut state = SystemState::flat(spec);
    let (angle_buses, voltage_buses) = unknown_layout(spec);
    let mut trace = Vec::new();
    let mut iterations = 0;

    loop {
        let mismatch = compute_mismatch(&state, u, spec, &y)?;
        let norm = mismatch.solved_norm(spec);
        trace.push(norm);

        if !norm.is_finite() || state.v.iter().chain(&state.theta).any(|x| !x.is_finite()) {
            return Ok(diverged(
                iterations,
                norm,
                DivergenceReason::NonFinite,
                trace,
            ));
        }
        if norm <= opts.tol {
            return Ok(SolveOutcome::Converged(finish(
                spec, &y, state, u, iterations, norm, trace,
            )));
        }
        if norm > DIVERGENCE_LIMIT {
            return Ok(diverged(iterations, norm, DivergenceReason::Blowup, trace));
        }
        if iterations >= opts.max_iter {
            return Ok(diverged(
                iterations,
                norm,
                DivergenceReason::MaxIterations,
                trace,
            ));
        }

        let jac = build_jacobian(&state, spec, &y)?;
        let rhs = -residual_vector(&mismatch, (&angle_buses, &voltage_buses));
        let Some(step) = jac.matrix.lu().solve(&rhs) else {
            tracing::debug!(iterations, norm, "singular Jacobian");
            return Ok(diverged(
                iterations,
                norm,
                DivergenceReason::SingularJacobian,
                trace,
            ));
        };
        let na = angle_buses.len();
        for (c, &i) in angle_buses.iter().enumerate() {
            state.theta[i] += step[c];
        }
        for (c, &i) in voltage_buses.iter().enumerate() {
            state.v[i] += step[na + c];
        }
        iterations += 1;
    }
}

fn diverged(
    iterations: usize,
    mismatch_norm: f64,
    reason: DivergenceReason,
    trace: Vec<f64>,
) -> SolveOutcome {
    SolveOutcome::Diverged {
        iterations,
        mismatch_norm,
        reason,
        trace,
    }
}

/// Fills in slack and PV generator outputs from the converged state.
fn finish(
    spec: &GridSpec,
    y: &AdmittanceMatrix,
    state: SystemState,
    u: &Controls,
    iterations: usize,
    norm: f64,
    trace: Vec<f64>,
) -> Solution {
    let (p_inj, q_inj) = injections(&state, y);
    let loads = spec.bus_loads();
    let mut controls = u.clone();
    let mut slack_power = (0.0, 0.0);

    for (i, bus) in spec.buses.iter().enumerate() {
        let kind = spec.effective_kind(bus);
        if kind == BusKind::Pq {
            continue;
        }
        let (pl, ql) = loads.get(&bus.id).copied().unwrap_or((0.0, 0.0));
        let gens: Vec<usize> = spec
            .generators
            .iter()
            .enumerate()
            .filter(|(_, g)| g.in_service && g.bus == bus.id)
            .map(|(j, _)| j)
            .collect();
        let q_needed = q_inj[i] + ql;
        let p_needed = p_inj[i] + pl;
        if kind == BusKind::Slack {
            slack_power = (p_needed, q_needed);
        }
        if gens.is_empty() {
            continue;
        }
        let share = gens.len() as f64;
        for &j in &gens {
            controls.q_gen[j] = q_needed / share;
            if kind == BusKind::Slack {
                controls.p_gen[j] = p_needed / share;
            }
        }
    }

    let warnings = spec
        .generators
        .iter()
        .zip(&controls.q_gen)
        .filter(|(g, &q)| g.in_service && (q < g.q_min || q > g.q_max))
        .map(|(g, &q)| LimitWarning {
            generator: g.id,
            q,
            q_min: g.q_min,
            q_max: g.q_max,
        })
        .collect();

    Solution {
        state,
        controls,
        slack_power,
        iterations,
        final_mismatch_norm: norm,
        trace,
        warnings,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchFlow {
    pub branch_id: u32,
    pub p_from: f64,
    pub q_from: f64,
    pub p_to: f64,
    pub q_to: f64,
    /// Larger terminal apparent power over the rating.
    pub loading: f64,
}

/// Pi-model terminal flows for every branch; out-of-service branches carry
/// nothing.
pub fn line_flows(state: &SystemState, spec: &GridSpec) -> Vec<BranchFlow> {
    let index = |id: BusId| {
        spec.buses
            .iter()
            .position(|b| b.id == id)
            .expect("validated bus")
    };
    spec.branches
        .iter()
        .map(|br| {
            if !br.in_service {
                return BranchFlow {
                    branch_id: br.id,
                    p_from: 0.0,
                    q_from: 0.0,
                    p_to: 0.0,
                    q_to: 0.0,
                    loading: 0.0,
                };
            }
            let (f, t) = (index(br.from_bus), index(br.to_bus));
            let vf = Complex64::from_polar(state.v[f], state.theta[f]);
            let vt = Complex64::from_polar(state.v[t], state.theta[t]);
            let ys = br.series_admittance();
            let ysh = Complex64::new(0.0, br.b_shunt / 2.0);
            let i_from = (ys + ysh) * vf - ys * vt;
            let i_to = (ys + ysh) * vt - ys * vf;
            let s_from = vf * i_from.conj();
            let s_to = vt * i_to.conj();
            BranchFlow {
                branch_id: br.id,
                p_from: s_from.re,
                q_from: s_from.im,
                p_to: s_to.re,
                q_to: s_to.im,
                loading: s_from.norm().max(s_to.norm()) / br.rating,
            }
        })
        .collect()
}
