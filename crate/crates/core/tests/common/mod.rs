//! Independent oracles shared by the integration and acceptance tests.
#![allow(dead_code)]

pub mod fuzz;
pub mod refmon;
pub mod scenario;

use gridsight_core::grid::{Branch, Bus, BusKind, Generator, GridSpec, Load};
use gridsight_core::powerflow::{Controls, SystemState};
use nalgebra::DMatrix;
use num_complex::Complex64;
use rand::Rng;

/// Random connected grid with `n` buses: bus 1 is the slack, roughly a
/// third of the rest are PV with a generator, every bus may carry load.
/// Quantities are already per-unit (base 1).
pub fn random_grid<R: Rng>(rng: &mut R, n: usize) -> GridSpec {
    let mut buses = Vec::with_capacity(n);
    for i in 0..n {
        let kind = if i == 0 {
            BusKind::Slack
        } else if rng.gen_bool(0.3) {
            BusKind::Pv
        } else {
            BusKind::Pq
        };
        let voltage_setpoint = (kind != BusKind::Pq).then(|| rng.gen_range(0.97..1.05));
        buses.push(Bus {
            id: (i + 1) as u32,
            kind,
            voltage_setpoint,
            coord: (rng.gen_range(0.0..10.0), rng.gen_range(0.0..10.0)),
            name: None,
        });
    }

    let mut branches = Vec::new();
    let mut add = |rng: &mut R, from: usize, to: usize, in_service: bool| {
        let id = branches.len() as u32 + 1;
        branches.push(Branch {
            id,
            from_bus: from as u32,
            to_bus: to as u32,
            r: rng.gen_range(0.0..0.1),
            x: rng.gen_range(0.05..0.5),
            b_shunt: rng.gen_range(0.0..0.05),
            rating: rng.gen_range(0.5..3.0),
            in_service,
        });
    };
    // spanning tree keeps every bus attached to the slack
    for i in 2..=n {
        let parent = rng.gen_range(1..i);
        add(rng, parent, i, true);
    }
    for _ in 0..rng.gen_range(0..=n) {
        let a = rng.gen_range(1..=n);
        let b = rng.gen_range(1..=n);
        if a != b {
            let on = rng.gen_bool(0.85);
            add(rng, a, b, on);
        }
    }

    let mut generators = Vec::new();
    let mut loads = Vec::new();
    for bus in &buses {
        if bus.kind != BusKind::Pq {
            generators.push(Generator {
                id: generators.len() as u32 + 1,
                bus: bus.id,
                p_set: if bus.kind == BusKind::Slack {
                    0.0
                } else {
                    rng.gen_range(0.0..0.8)
                },
                q_min: -2.0,
                q_max: 2.0,
                in_service: true,
            });
        }
        if rng.gen_bool(0.7) {
            loads.push(Load {
                id: loads.len() as u32 + 1,
                bus: bus.id,
                p: rng.gen_range(0.0..0.6),
                q: rng.gen_range(-0.1..0.3),
            });
        }
    }

    GridSpec {
        base_mva: 1.0,
        buses,
        branches,
        generators,
        loads,
    }
}

pub fn random_state<R: Rng>(rng: &mut R, n: usize) -> SystemState {
    SystemState {
        v: (0..n).map(|_| rng.gen_range(0.9..1.1)).collect(),
        theta: (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect(),
    }
}

pub fn random_controls<R: Rng>(rng: &mut R, spec: &GridSpec) -> Controls {
    Controls {
        p_gen: spec
            .generators
            .iter()
            .map(|_| rng.gen_range(0.0..1.0))
            .collect(),
        q_gen: spec
            .generators
            .iter()
            .map(|_| rng.gen_range(-0.5..0.5))
            .collect(),
    }
}

/// Dense complex bus admittance matrix built straight from the branch
/// list with the pi model.
pub fn dense_ybus(spec: &GridSpec) -> DMatrix<Complex64> {
    let n = spec.buses.len();
    let pos = |id: u32| spec.buses.iter().position(|b| b.id == id).unwrap();
    let mut y = DMatrix::from_element(n, n, Complex64::new(0.0, 0.0));
    for br in spec.branches.iter().filter(|b| b.in_service) {
        let (f, t) = (pos(br.from_bus), pos(br.to_bus));
        let ys = Complex64::new(1.0, 0.0) / Complex64::new(br.r, br.x);
        let half = Complex64::new(0.0, br.b_shunt / 2.0);
        y[(f, f)] += ys + half;
        y[(t, t)] += ys + half;
        y[(f, t)] -= ys;
        y[(t, f)] -= ys;
    }
    y
}

/// Residual S_calc - S_scheduled via complex arithmetic, S = V conj(Y V).
pub fn dense_mismatch(spec: &GridSpec, state: &SystemState, u: &Controls) -> (Vec<f64>, Vec<f64>) {
    let n = spec.buses.len();
    let pos = |id: u32| spec.buses.iter().position(|b| b.id == id).unwrap();
    let y = dense_ybus(spec);
    let v: Vec<Complex64> = (0..n)
        .map(|i| Complex64::from_polar(state.v[i], state.theta[i]))
        .collect();
    let mut sched = vec![Complex64::new(0.0, 0.0); n];
    for l in &spec.loads {
        sched[pos(l.bus)] -= Complex64::new(l.p, l.q);
    }
    for (j, g) in spec.generators.iter().enumerate() {
        if g.in_service {
            sched[pos(g.bus)] += Complex64::new(u.p_gen[j], u.q_gen[j]);
        }
    }
    let mut f_p = vec![0.0; n];
    let mut f_q = vec![0.0; n];
    for i in 0..n {
        let mut current = Complex64::new(0.0, 0.0);
        for k in 0..n {
            current += y[(i, k)] * v[k];
        }
        let s = v[i] * current.conj() - sched[i];
        f_p[i] = s.re;
        f_q[i] = s.im;
    }
    (f_p, f_q)
}
