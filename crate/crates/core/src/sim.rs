//! Planar articulated rigid-body simulator.
//!
//! Agents are trees of uniform rods in the x-z plane. Generalized coordinates
//! are the root reference point `(x, z)`, the root pitch, and one joint angle
//! per non-root limb (relative to its parent), in topological order. A limb
//! with absolute angle `phi` points along `(sin phi, -cos phi)`, so the rest
//! pose (all coordinates zero) stacks every limb straight down from the root.
//! Children attach at their parent's distal end.
//!
//! Dynamics are assembled from per-limb center-of-mass Jacobians and solved
//! with semi-implicit Euler. Ground contact at limb endpoints is a vertical
//! penalty spring with implicit damping and Coulomb-capped tangential
//! friction; joint limits apply a stiff penalty torque plus a hard clamp at
//! 10% overshoot of the joint range.

use crate::morphology::{topological_ordering, MorphologyGraph};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Fixed per-limb observation dimensionality, identical for every limb of
/// every agent.
pub const LIMB_STATE_DIM: usize = 17;

/// Joint-limit penalty stiffness (N·m/rad beyond the limit).
const JOINT_LIMIT_STIFFNESS: f64 = 400.0;
/// Implicit joint damping applied while a joint is beyond its limit.
const JOINT_LIMIT_DAMPING: f64 = 1.0;
/// Fraction of the joint range tolerated beyond a limit before hard clamping.
const JOINT_LIMIT_OVERSHOOT: f64 = 0.1;

#[derive(Debug, thiserror::Error)]
pub enum SimError {
    #[error("dynamics produced a non-finite state; episode must be truncated")]
    NonFiniteState,
}

/// Environment constants. Serialized as JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    /// Physics substep duration in seconds.
    pub dt: f64,
    /// Substeps per control step.
    pub frame_skip: u32,
    pub gravity: f64,
    pub ground_stiffness: f64,
    pub ground_damping: f64,
    pub friction_coefficient: f64,
    pub alive_bonus: f64,
    pub ctrl_cost_weight: f64,
    pub episode_length: u32,
    pub termination_height: f64,
    pub termination_pitch: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        crate::presets::env_default()
    }
}

/// Generalized coordinates, velocities and the control-step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct SimState {
    pub q: Vec<f64>,
    pub qdot: Vec<f64>,
    pub t: u32,
}

impl SimState {
    pub fn dof(&self) -> usize {
        self.q.len()
    }

    pub fn is_finite(&self) -> bool {
        self.q.iter().chain(self.qdot.iter()).all(|v| v.is_finite())
    }
}

/// Per-limb observation. Planar quantities are embedded in 3-dimensional
/// slots with exact zeros so the layout matches a spatial agent.
#[derive(Debug, Clone, PartialEq)]
pub struct LimbState {
    /// Limb-frame origin: x relative to the root reference point, absolute z,
    /// and a zero third slot.
    pub position: [f64; 3],
    /// Origin velocity (x, z, 0) in m/s.
    pub linear_velocity: [f64; 3],
    /// (0, 0, angular rate) in rad/s.
    pub angular_velocity: [f64; 3],
    /// Exponential-map rotation: (0, 0, absolute limb angle).
    pub rotation: [f64; 3],
    /// (joint position, low, high), each normalized to [0, 1]. The root
    /// carries the sentinel (0.5, 0, 1).
    pub joint_range: [f64; 3],
    /// (is_root, is_leaf) as 0/1 values.
    pub limb_type_flags: [f64; 2],
}

impl LimbState {
    pub fn features(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(LIMB_STATE_DIM);
        v.extend_from_slice(&self.position);
        v.extend_from_slice(&self.linear_velocity);
        v.extend_from_slice(&self.angular_velocity);
        v.extend_from_slice(&self.rotation);
        v.extend_from_slice(&self.joint_range);
        v.extend_from_slice(&self.limb_type_flags);
        v
    }
}

/// Integration options beyond the standard free-floating contact setup.
#[derive(Debug, Clone, Copy)]
pub struct SimOptions {
    /// Freeze the root coordinates (x, z, pitch); used for fixed-base setups.
    pub pinned_root: bool,
    /// Disable ground contact entirely.
    pub contacts: bool,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            pinned_root: false,
            contacts: true,
        }
    }
}

/// Precomputed kinematic description of a morphology.
struct Model {
    topo: Vec<usize>,
    /// Generalized-coordinate index of each limb's joint (None for the root).
    qix: Vec<Option<usize>>,
    /// Root-to-limb path, root first, limb itself last.
    path: Vec<Vec<usize>>,
    lengths: Vec<f64>,
    masses: Vec<f64>,
    /// Rod inertia about the center of mass.
    inertias: Vec<f64>,
    root: usize,
    ndof: usize,
}

impl Model {
    fn new(g: &MorphologyGraph) -> Self {
        let topo = topological_ordering(g);
        let n = g.len();
        let mut qix = vec![None; n];
        let mut next = 3;
        for &i in &topo {
            if i != g.root() {
                qix[i] = Some(next);
                next += 1;
            }
        }
        let mut path = vec![Vec::new(); n];
        for i in 0..n {
            let mut chain = vec![i];
            let mut cur = i;
            while let Some(p) = g.parent_of(cur) {
                chain.push(p);
                cur = p;
            }
            chain.reverse();
            path[i] = chain;
        }
        let lengths: Vec<f64> = g.limbs().iter().map(|l| l.length).collect();
        let masses: Vec<f64> = g.limbs().iter().map(|l| l.mass).collect();
        let inertias: Vec<f64> = g
            .limbs()
            .iter()
            .map(|l| l.mass * l.length * l.length / 12.0)
            .collect();
        Self {
            topo,
            qix,
            path,
            lengths,
            masses,
            inertias,
            root: g.root(),
            ndof: 3 + n - 1,
        }
    }
}

/// Instantaneous kinematics for one state.
struct Kinematics {
    /// Absolute angle per limb.
    phi: Vec<f64>,
    /// Absolute angular rate per limb.
    omega: Vec<f64>,
    /// Proximal point per limb.
    prox: Vec<[f64; 2]>,
    /// Proximal point velocity per limb.
    prox_vel: Vec<[f64; 2]>,
}

fn direction(phi: f64) -> [f64; 2] {
    [phi.sin(), -phi.cos()]
}

fn direction_deriv(phi: f64) -> [f64; 2] {
    [phi.cos(), phi.sin()]
}

fn kinematics(model: &Model, g: &MorphologyGraph, q: &[f64], qdot: &[f64]) -> Kinematics {
    let n = g.len();
    let mut phi = vec![0.0; n];
    let mut omega = vec![0.0; n];
    let mut prox = vec![[0.0; 2]; n];
    let mut prox_vel = vec![[0.0; 2]; n];
    for &i in &model.topo {
        match g.parent_of(i) {
            None => {
                phi[i] = q[2];
                omega[i] = qdot[2];
                prox[i] = [q[0], q[1]];
                prox_vel[i] = [qdot[0], qdot[1]];
            }
            Some(p) => {
                let j = model.qix[i].expect("non-root limb has a joint coordinate");
                phi[i] = phi[p] + q[j];
                omega[i] = omega[p] + qdot[j];
                let u = direction(phi[p]);
                let du = direction_deriv(phi[p]);
                let len = model.lengths[p];
                prox[i] = [prox[p][0] + len * u[0], prox[p][1] + len * u[1]];
                prox_vel[i] = [
                    prox_vel[p][0] + len * du[0] * omega[p],
                    prox_vel[p][1] + len * du[1] * omega[p],
                ];
            }
        }
    }
    Kinematics {
        phi,
        omega,
        prox,
        prox_vel,
    }
}

/// Jacobian of the point at arc length `s` along limb `i`, as two rows of
/// length `ndof`.
fn point_jacobian(model: &Model, kin: &Kinematics, i: usize, s: f64) -> (Vec<f64>, Vec<f64>) {
    let ndof = model.ndof;
    let mut jx = vec![0.0; ndof];
    let mut jz = vec![0.0; ndof];
    jx[0] = 1.0;
    jz[1] = 1.0;
    // Coordinates encountered so far along the path affect every later
    // segment; a segment's own joint affects it too.
    let mut cols: Vec<usize> = Vec::with_capacity(model.path[i].len() + 1);
    cols.push(2);
    for &m in &model.path[i] {
        if let Some(j) = model.qix[m] {
            cols.push(j);
        }
        let seg = if m == i { s } else { model.lengths[m] };
        let du = direction_deriv(kin.phi[m]);
        for &c in &cols {
            jx[c] += seg * du[0];
            jz[c] += seg * du[1];
        }
    }
    (jx, jz)
}

/// Center-of-mass acceleration of limb `i` with all joint accelerations zero
/// (the velocity-product term).
fn com_bias_acceleration(model: &Model, kin: &Kinematics, i: usize) -> [f64; 2] {
    let mut acc = [0.0, 0.0];
    for &m in &model.path[i] {
        let seg = if m == i {
            model.lengths[m] * 0.5
        } else {
            model.lengths[m]
        };
        let u = direction(kin.phi[m]);
        let w2 = kin.omega[m] * kin.omega[m];
        acc[0] -= seg * w2 * u[0];
        acc[1] -= seg * w2 * u[1];
    }
    acc
}

/// Dense LU solve with partial pivoting; `a` is row-major `n x n`.
fn lu_solve(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Option<Vec<f64>> {
    for col in 0..n {
        let mut pivot = col;
        let mut best = a[col * n + col].abs();
        for row in (col + 1)..n {
            let v = a[row * n + col].abs();
            if v > best {
                best = v;
                pivot = row;
            }
        }
        if best < 1e-12 {
            return None;
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            b.swap(col, pivot);
        }
        let diag = a[col * n + col];
        for row in (col + 1)..n {
            let factor = a[row * n + col] / diag;
            if factor != 0.0 {
                for k in col..n {
                    a[row * n + k] -= factor * a[col * n + k];
                }
                b[row] -= factor * b[col];
            }
        }
    }
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in (row + 1)..n {
            acc -= a[row * n + k] * b[k];
        }
        b[row] = acc / a[row * n + row];
    }
    Some(b)
}

struct ImplicitDamper {
    gain: f64,
    row: Vec<f64>,
}

/// One physics substep. `joint_torques` is indexed by generalized coordinate
/// (entries 0..3 unused).
fn substep(
    model: &Model,
    g: &MorphologyGraph,
    cfg: &EnvConfig,
    opts: &SimOptions,
    q: &mut [f64],
    qdot: &mut [f64],
    joint_torques: &[f64],
) {
    let ndof = model.ndof;
    let kin = kinematics(model, g, q, qdot);

    let mut mass = vec![0.0; ndof * ndof];
    let mut rhs = vec![0.0; ndof];

    for i in 0..g.len() {
        let m = model.masses[i];
        let (jx, jz) = point_jacobian(model, &kin, i, model.lengths[i] * 0.5);
        // Inertia: m J^T J plus rod inertia over the angular selector row.
        for r in 0..ndof {
            let jxr = jx[r];
            let jzr = jz[r];
            if jxr == 0.0 && jzr == 0.0 {
                continue;
            }
            for c in 0..ndof {
                mass[r * ndof + c] += m * (jxr * jx[c] + jzr * jz[c]);
            }
        }
        let mut ang_cols: Vec<usize> = vec![2];
        for &p in &model.path[i] {
            if let Some(j) = model.qix[p] {
                ang_cols.push(j);
            }
        }
        let inertia = model.inertias[i];
        for &r in &ang_cols {
            for &c in &ang_cols {
                mass[r * ndof + c] += inertia;
            }
        }
        // Gravity.
        let w = -m * cfg.gravity;
        for c in 0..ndof {
            rhs[c] += jz[c] * w;
        }
        // Velocity-product bias.
        let bias = com_bias_acceleration(model, &kin, i);
        for c in 0..ndof {
            rhs[c] -= m * (jx[c] * bias[0] + jz[c] * bias[1]);
        }
    }

    // Actuation.
    for v in joint_torques.iter().enumerate().skip(3) {
        rhs[v.0] += *v.1;
    }

    let mut dampers: Vec<ImplicitDamper> = Vec::new();

    // Joint limits: stiff penalty torque plus implicit damping while beyond.
    for i in 0..g.len() {
        let Some(j) = model.qix[i] else { continue };
        let limb = g.limb(i);
        let theta = q[j];
        let beyond = if theta > limb.joint_high {
            theta - limb.joint_high
        } else if theta < limb.joint_low {
            theta - limb.joint_low
        } else {
            0.0
        };
        if beyond != 0.0 {
            rhs[j] -= JOINT_LIMIT_STIFFNESS * beyond;
            let mut row = vec![0.0; ndof];
            row[j] = 1.0;
            dampers.push(ImplicitDamper {
                gain: JOINT_LIMIT_DAMPING,
                row,
            });
        }
    }

    // Ground contact at the root reference point and every limb tip.
    struct Friction {
        row: Vec<f64>,
        cap: f64,
    }
    let mut frictions: Vec<Friction> = Vec::new();
    if opts.contacts {
        let mut points: Vec<(usize, f64)> = vec![(model.root, 0.0)];
        points.extend((0..g.len()).map(|i| (i, model.lengths[i])));
        for (limb, s) in points {
            let u = direction(kin.phi[limb]);
            let pz = kin.prox[limb][1] + s * u[1];
            if pz >= 0.0 {
                continue;
            }
            let pen = -pz;
            let (jx, jz) = point_jacobian(model, &kin, limb, s);
            let vz: f64 = jz.iter().zip(qdot.iter()).map(|(a, b)| a * b).sum();
            let spring = cfg.ground_stiffness * pen;
            for c in 0..ndof {
                rhs[c] += jz[c] * spring;
            }
            if vz < 0.0 {
                dampers.push(ImplicitDamper {
                    gain: cfg.ground_damping,
                    row: jz.clone(),
                });
            }
            let normal_estimate = (spring - cfg.ground_damping * vz.min(0.0)).max(0.0);
            let cap = cfg.friction_coefficient * normal_estimate;
            frictions.push(Friction { row: jx, cap });
        }
    }

    let dt = cfg.dt;
    let solve = |extra_dampers: &[&ImplicitDamper], extra_rhs: &[f64]| -> Vec<f64> {
        let mut a = mass.clone();
        let mut b: Vec<f64> = rhs.iter().zip(extra_rhs).map(|(x, y)| x + y).collect();
        for d in dampers.iter().chain(extra_dampers.iter().copied()) {
            let rv: f64 = d.row.iter().zip(qdot.iter()).map(|(a, b)| a * b).sum();
            for r in 0..ndof {
                if d.row[r] == 0.0 {
                    continue;
                }
                for c in 0..ndof {
                    a[r * ndof + c] += dt * d.gain * d.row[r] * d.row[c];
                }
                b[r] -= d.gain * d.row[r] * rv;
            }
        }
        if opts.pinned_root {
            let free = ndof - 3;
            if free == 0 {
                return vec![0.0; ndof];
            }
            let mut ar = vec![0.0; free * free];
            let mut br = vec![0.0; free];
            for r in 0..free {
                br[r] = b[r + 3];
                for c in 0..free {
                    ar[r * free + c] = a[(r + 3) * ndof + (c + 3)];
                }
            }
            let sol = lu_solve(ar, br, free).unwrap_or_else(|| vec![0.0; free]);
            let mut full = vec![0.0; ndof];
            full[3..].copy_from_slice(&sol);
            full
        } else {
            lu_solve(a, b, ndof).unwrap_or_else(|| vec![f64::NAN; ndof])
        }
    };

    // First pass: all friction implicit. Contacts whose implied tangential
    // force exceeds the Coulomb cap are re-solved with the capped force.
    let friction_dampers: Vec<ImplicitDamper> = frictions
        .iter()
        .map(|f| ImplicitDamper {
            gain: cfg.ground_damping,
            row: f.row.clone(),
        })
        .collect();
    let all: Vec<&ImplicitDamper> = friction_dampers.iter().collect();
    let zero_extra = vec![0.0; ndof];
    let mut qddot = solve(&all, &zero_extra);

    let mut saturated = vec![false; frictions.len()];
    let mut any_saturated = false;
    for (k, f) in frictions.iter().enumerate() {
        let vx_new: f64 = f
            .row
            .iter()
            .enumerate()
            .map(|(c, j)| j * (qdot[c] + dt * qddot[c]))
            .sum();
        if (cfg.ground_damping * vx_new).abs() > f.cap {
            saturated[k] = true;
            any_saturated = true;
        }
    }
    if any_saturated {
        let mut extra_rhs = vec![0.0; ndof];
        let mut keep: Vec<&ImplicitDamper> = Vec::new();
        for (k, f) in frictions.iter().enumerate() {
            if saturated[k] {
                let vx_new: f64 = f
                    .row
                    .iter()
                    .enumerate()
                    .map(|(c, j)| j * (qdot[c] + dt * qddot[c]))
                    .sum();
                let force = -f.cap * vx_new.signum();
                for c in 0..ndof {
                    extra_rhs[c] += f.row[c] * force;
                }
            } else {
                keep.push(&friction_dampers[k]);
            }
        }
        qddot = solve(&keep, &extra_rhs);
    }

    let start = if opts.pinned_root { 3 } else { 0 };
    for c in start..ndof {
        qdot[c] += dt * qddot[c];
        q[c] += dt * qdot[c];
    }

    // Hard clamp at 10% overshoot of the joint range.
    for i in 0..g.len() {
        let Some(j) = model.qix[i] else { continue };
        let limb = g.limb(i);
        let slack = JOINT_LIMIT_OVERSHOOT * (limb.joint_high - limb.joint_low);
        if q[j] > limb.joint_high + slack {
            q[j] = limb.joint_high + slack;
            qdot[j] = 0.0;
        } else if q[j] < limb.joint_low - slack {
            q[j] = limb.joint_low - slack;
            qdot[j] = 0.0;
        }
    }
}

/// Rest pose: all coordinates zero except the root height, which places the
/// deepest limb tip exactly on the ground plane.
pub fn rest_state(g: &MorphologyGraph, _cfg: &EnvConfig) -> SimState {
    let depth = (0..g.len())
        .map(|i| g.rest_tip_depth(i))
        .fold(f64::NEG_INFINITY, f64::max);
    let ndof = 3 + g.len() - 1;
    let mut q = vec![0.0; ndof];
    q[1] = depth;
    SimState {
        q,
        qdot: vec![0.0; ndof],
        t: 0,
    }
}

/// Rest pose plus uniform noise in [-0.005, 0.005] on every coordinate and
/// velocity; deterministic per seed.
pub fn reset(g: &MorphologyGraph, cfg: &EnvConfig, seed: u64) -> (SimState, Vec<LimbState>) {
    let mut state = rest_state(g, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for v in state.q.iter_mut() {
        *v += rng.random_range(-0.005..=0.005);
    }
    for v in state.qdot.iter_mut() {
        *v += rng.random_range(-0.005..=0.005);
    }
    let obs = observe(&state, g, cfg);
    (state, obs)
}

/// Advances one control step (`frame_skip` substeps) under the default
/// free-root, contacts-on options.
pub fn step(
    state: &SimState,
    torques: &[f64],
    g: &MorphologyGraph,
    cfg: &EnvConfig,
) -> Result<(SimState, Vec<LimbState>, f64, bool), SimError> {
    step_with_options(state, torques, g, cfg, &SimOptions::default())
}

/// [`step`] with explicit integration options.
pub fn step_with_options(
    state: &SimState,
    torques: &[f64],
    g: &MorphologyGraph,
    cfg: &EnvConfig,
    opts: &SimOptions,
) -> Result<(SimState, Vec<LimbState>, f64, bool), SimError> {
    let model = Model::new(g);
    let actuated = g.actuated_limbs();
    assert_eq!(
        torques.len(),
        actuated.len(),
        "one torque per actuated limb"
    );
    let mut joint_torques = vec![0.0; model.ndof];
    for (a, &limb) in torques.iter().zip(actuated.iter()) {
        debug_assert!((-1.0..=1.0).contains(a), "torque commands are normalized");
        let j = model.qix[limb].expect("actuated limbs are non-root");
        joint_torques[j] = a * g.limb(limb).gear;
    }

    let mut q = state.q.clone();
    let mut qdot = state.qdot.clone();
    let x_before = q[0];
    for _ in 0..cfg.frame_skip {
        substep(&model, g, cfg, opts, &mut q, &mut qdot, &joint_torques);
    }
    let next = SimState {
        q,
        qdot,
        t: state.t + 1,
    };
    if !next.is_finite() {
        return Err(SimError::NonFiniteState);
    }

    let forward_velocity = (next.q[0] - x_before) / (cfg.dt * cfg.frame_skip as f64);
    let ctrl_cost: f64 = torques.iter().map(|a| a * a).sum::<f64>() * cfg.ctrl_cost_weight;
    let reward = forward_velocity + cfg.alive_bonus - ctrl_cost;

    let fell = next.q[1] < cfg.termination_height || next.q[2].abs() > cfg.termination_pitch;
    let done = next.t >= cfg.episode_length || fell;

    let obs = observe(&next, g, cfg);
    Ok((next, obs, reward, done))
}

/// Per-limb observations; a pure function of the state.
pub fn observe(state: &SimState, g: &MorphologyGraph, _cfg: &EnvConfig) -> Vec<LimbState> {
    let model = Model::new(g);
    let kin = kinematics(&model, g, &state.q, &state.qdot);
    let root_x = state.q[0];
    let mut out = Vec::with_capacity(g.len());
    for i in 0..g.len() {
        let limb = g.limb(i);
        let joint_range = match model.qix[i] {
            None => [0.5, 0.0, 1.0],
            Some(j) => {
                let span = limb.joint_high - limb.joint_low;
                let pos = ((state.q[j] - limb.joint_low) / span).clamp(0.0, 1.0);
                let norm = |a: f64| ((a + std::f64::consts::PI) / std::f64::consts::TAU).clamp(0.0, 1.0);
                [pos, norm(limb.joint_low), norm(limb.joint_high)]
            }
        };
        out.push(LimbState {
            position: [kin.prox[i][0] - root_x, kin.prox[i][1], 0.0],
            linear_velocity: [kin.prox_vel[i][0], kin.prox_vel[i][1], 0.0],
            angular_velocity: [0.0, 0.0, kin.omega[i]],
            rotation: [0.0, 0.0, kin.phi[i]],
            joint_range,
            limb_type_flags: [
                if i == g.root() { 1.0 } else { 0.0 },
                if g.is_leaf(i) { 1.0 } else { 0.0 },
            ],
        });
    }
    out
}

/// Total mechanical energy (kinetic + gravitational potential with the ground
/// plane as reference).
pub fn mechanical_energy(state: &SimState, g: &MorphologyGraph, cfg: &EnvConfig) -> f64 {
    let model = Model::new(g);
    let kin = kinematics(&model, g, &state.q, &state.qdot);
    let mut e = 0.0;
    for i in 0..g.len() {
        let m = model.masses[i];
        let half = model.lengths[i] * 0.5;
        let u = direction(kin.phi[i]);
        let du = direction_deriv(kin.phi[i]);
        let com_z = kin.prox[i][1] + half * u[1];
        let vx = kin.prox_vel[i][0] + half * du[0] * kin.omega[i];
        let vz = kin.prox_vel[i][1] + half * du[1] * kin.omega[i];
        e += 0.5 * m * (vx * vx + vz * vz);
        e += 0.5 * model.inertias[i] * kin.omega[i] * kin.omega[i];
        e += m * cfg.gravity * com_z;
    }
    e
}

/// CSV header for trajectory dumps: `t, q.., qdot.., reward, done`.
pub fn trajectory_header(g: &MorphologyGraph) -> String {
    let mut cols = vec!["t".to_string(), "x".into(), "z".into(), "pitch".into()];
    for &i in topological_ordering(g).iter().skip(1) {
        cols.push(format!("q_{}", g.limb(i).name));
    }
    cols.push("xdot".into());
    cols.push("zdot".into());
    cols.push("pitchdot".into());
    for &i in topological_ordering(g).iter().skip(1) {
        cols.push(format!("qdot_{}", g.limb(i).name));
    }
    cols.push("reward".into());
    cols.push("done".into());
    cols.join(",")
}

pub fn trajectory_row(state: &SimState, reward: f64, done: bool) -> String {
    let mut cols = vec![state.t.to_string()];
    cols.extend(state.q.iter().map(|v| v.to_string()));
    cols.extend(state.qdot.iter().map(|v| v.to_string()));
    cols.push(reward.to_string());
    cols.push((done as u8).to_string());
    cols.join(",")
}

/// Owned environment instance: one morphology, one config, one state.
/// Single-threaded; multiple instances may run concurrently.
pub struct Env {
    graph: MorphologyGraph,
    cfg: EnvConfig,
    state: SimState,
}

/// Result of one environment step.
pub struct StepOutcome {
    pub observations: Vec<LimbState>,
    pub reward: f64,
    pub done: bool,
}

impl Env {
    pub fn new(graph: MorphologyGraph, cfg: EnvConfig) -> Self {
        let state = rest_state(&graph, &cfg);
        Self { graph, cfg, state }
    }

    pub fn graph(&self) -> &MorphologyGraph {
        &self.graph
    }

    pub fn config(&self) -> &EnvConfig {
        &self.cfg
    }

    pub fn state(&self) -> &SimState {
        &self.state
    }

    pub fn reset(&mut self, seed: u64) -> Vec<LimbState> {
        let (state, obs) = reset(&self.graph, &self.cfg, seed);
        self.state = state;
        obs
    }

    pub fn step(&mut self, torques: &[f64]) -> Result<StepOutcome, SimError> {
        let (state, observations, reward, done) =
            step(&self.state, torques, &self.graph, &self.cfg)?;
        self.state = state;
        Ok(StepOutcome {
            observations,
            reward,
            done,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::morphology::{LimbSpec, MorphologyGraph};
    use crate::presets;

    fn free_body() -> MorphologyGraph {
        MorphologyGraph::new(
            "body",
            vec![LimbSpec {
                name: "body".into(),
                length: 0.3,
                mass: 1.0,
                is_actuated: false,
                joint_low: -1.0,
                joint_high: 1.0,
                gear: 1.0,
                child_order_index: 0,
            }],
            vec![None],
            "body",
        )
        .unwrap()
    }

    fn cfg_with(dt: f64, frame_skip: u32) -> EnvConfig {
        EnvConfig {
            dt,
            frame_skip,
            ..presets::env_default()
        }
    }

    #[test]
    fn free_fall_matches_semi_implicit_update() {
        let g = free_body();
        let cfg = cfg_with(0.01, 1);
        let state = SimState {
            q: vec![0.0, 1.0, 0.0],
            qdot: vec![0.0, 0.0, 0.0],
            t: 0,
        };
        let (next, _, _, _) = step(&state, &[], &g, &cfg).unwrap();
        let v_expected = 0.01 * -9.81;
        let z_expected = 1.0 + 0.01 * v_expected;
        assert_eq!(next.qdot[1], v_expected);
        assert_eq!(next.q[1], z_expected);
        assert_eq!(next.qdot[0], 0.0);
        assert_eq!(next.qdot[2], 0.0);
    }

    #[test]
    fn reset_is_deterministic_per_seed() {
        let g = presets::hopper2();
        let cfg = presets::env_default();
        let (a, oa) = reset(&g, &cfg, 1234);
        let (b, ob) = reset(&g, &cfg, 1234);
        assert_eq!(a, b);
        assert_eq!(oa, ob);
        let (c, _) = reset(&g, &cfg, 1235);
        assert_ne!(a, c);
    }

    #[test]
    fn reset_noise_stays_within_bounds() {
        let g = presets::hopper2();
        let cfg = presets::env_default();
        let rest = rest_state(&g, &cfg);
        for seed in 0..1000 {
            let (s, _) = reset(&g, &cfg, seed);
            for (v, r) in s.q.iter().zip(rest.q.iter()) {
                assert!((v - r).abs() <= 0.005 + 1e-12);
            }
            for v in s.qdot.iter() {
                assert!(v.abs() <= 0.005 + 1e-12);
            }
        }
    }

    #[test]
    fn hopper2_has_four_coordinates() {
        let g = presets::hopper2();
        let cfg = presets::env_default();
        let (s, _) = reset(&g, &cfg, 0);
        assert_eq!(s.q.len(), 4);
        assert_eq!(s.qdot.len(), 4);
    }

    #[test]
    fn standing_walker_earns_exactly_alive_bonus() {
        let g = presets::walker();
        let cfg = presets::env_default();
        let state = rest_state(&g, &cfg);
        let zeros = vec![0.0; g.actuated_limbs().len()];
        let (next, _, reward, done) = step(&state, &zeros, &g, &cfg).unwrap();
        assert_eq!(reward, cfg.alive_bonus);
        assert_eq!(next.q[0], 0.0);
        assert_eq!(next.q[2], 0.0);
        assert!(!done);
    }

    #[test]
    fn reward_decomposition_matches_measured_displacement() {
        let g = presets::hopper();
        let cfg = presets::env_default();
        let (mut state, _) = reset(&g, &cfg, 9);
        let torques = [0.8, -0.3, 0.5];
        for _ in 0..50 {
            let x_before = state.q[0];
            let (next, _, reward, done) = step(&state, &torques, &g, &cfg).unwrap();
            let ctrl: f64 = torques.iter().map(|a| a * a).sum::<f64>() * cfg.ctrl_cost_weight;
            let measured = (next.q[0] - x_before) / (cfg.dt * cfg.frame_skip as f64);
            assert!((reward - cfg.alive_bonus + ctrl - measured).abs() < 1e-9);
            state = next;
            if done {
                break;
            }
        }
    }

    #[test]
    fn step_is_bit_deterministic() {
        let g = presets::walker();
        let cfg = presets::env_default();
        let (state, _) = reset(&g, &cfg, 3);
        let torques = [0.3, -0.2, 0.9, -0.9, 0.1, 0.4];
        let (a, _, ra, _) = step(&state, &torques, &g, &cfg).unwrap();
        let (b, _, rb, _) = step(&state, &torques, &g, &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.to_bits(), rb.to_bits());
    }

    #[test]
    fn observe_is_pure() {
        let g = presets::walker();
        let cfg = presets::env_default();
        let (mut state, _) = reset(&g, &cfg, 5);
        let torques = [0.5, -0.5, 0.2, -0.2, 0.7, -0.7];
        for _ in 0..10 {
            (state, _, _, _) = {
                let (s, o, r, d) = step(&state, &torques, &g, &cfg).unwrap();
                (s, o, r, d)
            };
        }
        assert_eq!(observe(&state, &g, &cfg), observe(&state, &g, &cfg));
    }

    #[test]
    fn torso_joint_range_sentinel() {
        let g = presets::walker();
        let cfg = presets::env_default();
        let (state, obs) = reset(&g, &cfg, 0);
        assert_eq!(state.t, 0);
        assert_eq!(obs[g.root()].joint_range, [0.5, 0.0, 1.0]);
    }

    #[test]
    fn joint_at_low_limit_normalizes_to_zero() {
        let g = presets::hopper2();
        let cfg = presets::env_default();
        let mut state = rest_state(&g, &cfg);
        let leg = g.index_of("leg").unwrap();
        state.q[3] = g.limb(leg).joint_low;
        let obs = observe(&state, &g, &cfg);
        assert_eq!(obs[leg].joint_range[0], 0.0);
        state.q[3] = g.limb(leg).joint_high;
        let obs = observe(&state, &g, &cfg);
        assert_eq!(obs[leg].joint_range[0], 1.0);
    }

    #[test]
    fn rotation_is_planar_embedded() {
        let g = presets::hopper2();
        let cfg = presets::env_default();
        let (mut state, _) = reset(&g, &cfg, 77);
        state.q[2] = 0.3;
        state.q[3] = -0.4;
        let obs = observe(&state, &g, &cfg);
        let root = g.root();
        let leg = g.index_of("leg").unwrap();
        assert_eq!(obs[root].rotation[0], 0.0);
        assert_eq!(obs[root].rotation[1], 0.0);
        assert_eq!(obs[root].rotation[2], 0.3);
        assert_eq!(obs[leg].rotation[2], 0.3 - 0.4);
        for o in &obs {
            assert_eq!(o.angular_velocity[0], 0.0);
            assert_eq!(o.angular_velocity[1], 0.0);
            assert_eq!(o.position[2], 0.0);
            assert_eq!(o.linear_velocity[2], 0.0);
        }
    }

    #[test]
    fn all_limb_states_share_dimension_across_variants() {
        let base = presets::walker();
        let cfg = presets::env_default();
        let set =
            crate::morphology::enumerate_variants(&base, |v| v.len() >= 2, 0.2, 0).unwrap();
        for v in &set.variants {
            let (_, obs) = reset(v, &cfg, 1);
            for o in obs {
                assert_eq!(o.features().len(), LIMB_STATE_DIM);
            }
        }
    }

    #[test]
    fn episode_terminates_at_length() {
        let g = presets::hopper2();
        let mut cfg = presets::env_default();
        cfg.episode_length = 3;
        let mut state = rest_state(&g, &cfg);
        let mut done = false;
        let mut steps = 0;
        while !done {
            let (s, _, _, d) = step(&state, &[0.0], &g, &cfg).unwrap();
            state = s;
            done = d;
            steps += 1;
            assert!(steps <= 3);
        }
        assert_eq!(steps, 3);
    }

    #[test]
    fn falls_are_terminated_by_pitch() {
        let g = presets::hopper2();
        let cfg = presets::env_default();
        let mut state = rest_state(&g, &cfg);
        state.q[2] = 0.4; // lean far over
        let mut done = false;
        for _ in 0..400 {
            let (s, _, _, d) = step(&state, &[0.0], &g, &cfg).unwrap();
            state = s;
            if d {
                done = true;
                break;
            }
        }
        assert!(done, "leaning hopper should fall and terminate");
        assert!(state.q[1] < cfg.termination_height || state.q[2].abs() > cfg.termination_pitch);
    }
}
