//! Shared modular policies over morphology trees.
//!
//! One module (or module pair) is instantiated at every limb of every agent.
//! Modules coordinate through 32-dimensional learned message vectors passed
//! along tree edges under one of four schemes:
//!
//! - `none`: every limb acts from its own state alone
//! - `bottom_up`: messages flow leaf to root; each module consumes its state
//!   plus a fixed number of zero-padded child-message slots
//! - `top_down`: messages flow root to leaf; a parent emits one message slot
//!   per possible child and each child reads the slot matching its position
//! - `both_way`: an upward pass produces only messages, then a downward pass
//!   consumes (own up-message, parent down-message) and produces actions
//!
//! All emitted messages are L2-normalized. Variable branching is handled by
//! sizing every module for `c_max` child slots and zero-padding unused ones,
//! so a single parameter set drives any tree whose branching fits.

use crate::autodiff::{AutodiffError, Mlp, Tape, Tensor};
use crate::morphology::{topological_ordering, MorphologyGraph};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Learned message width.
pub const MESSAGE_DIM: usize = 32;
/// Epsilon guard for message normalization.
pub const MESSAGE_NORM_EPS: f64 = 1e-8;

#[derive(Debug, thiserror::Error)]
pub enum PolicyError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("node has {children} children but the policy was sized for {c_max}")]
    TooManyChildren { children: usize, c_max: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[serde(rename = "none")]
    NoMessage,
    BottomUp,
    TopDown,
    BothWay,
}

impl Scheme {
    pub const ALL: [Scheme; 4] = [
        Scheme::NoMessage,
        Scheme::BottomUp,
        Scheme::TopDown,
        Scheme::BothWay,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Scheme::NoMessage => "none",
            Scheme::BottomUp => "bottom_up",
            Scheme::TopDown => "top_down",
            Scheme::BothWay => "both_way",
        }
    }
}

impl std::str::FromStr for Scheme {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "none" => Ok(Scheme::NoMessage),
            "bottom_up" => Ok(Scheme::BottomUp),
            "top_down" => Ok(Scheme::TopDown),
            "both_way" => Ok(Scheme::BothWay),
            other => Err(format!(
                "unknown scheme `{other}` (expected none, bottom_up, top_down or both_way)"
            )),
        }
    }
}

impl std::fmt::Display for Scheme {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A 32-dimensional message vector.
#[derive(Debug, Clone, PartialEq)]
pub struct MessageVector(pub Vec<f64>);

impl MessageVector {
    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim])
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// `m / max(l2_norm(m), eps)`; zero vectors stay exactly zero.
pub fn normalize_message(m: &[f64]) -> MessageVector {
    let norm = m.iter().map(|v| v * v).sum::<f64>().sqrt();
    let denom = norm.max(MESSAGE_NORM_EPS);
    MessageVector(m.iter().map(|v| v / denom).collect())
}

/// Places each message in the slot of its index and fills the remaining
/// slots with exact zeros.
pub fn pad_child_messages(
    msgs: &[MessageVector],
    c_max: usize,
) -> Result<Vec<MessageVector>, PolicyError> {
    if msgs.len() > c_max {
        return Err(PolicyError::TooManyChildren {
            children: msgs.len(),
            c_max,
        });
    }
    let dim = msgs.first().map_or(MESSAGE_DIM, |m| m.0.len());
    let mut out = Vec::with_capacity(c_max);
    out.extend(msgs.iter().cloned());
    while out.len() < c_max {
        out.push(MessageVector::zeros(dim));
    }
    Ok(out)
}

/// Shared module parameters. A single instance serves every limb of every
/// agent; read-only during rollout.
pub struct SmpParams {
    pub scheme: Scheme,
    pub msg_dim: usize,
    pub c_max: usize,
    pub state_dim: usize,
    pub hidden: usize,
    theta1: Mlp,
    theta2: Option<Mlp>,
}

/// Checkpoint sidecar describing a policy's architecture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmpMeta {
    pub scheme: Scheme,
    pub c_max: usize,
    pub msg_dim: usize,
    #[serde(rename = "D_s")]
    pub state_dim: usize,
    pub hidden_width: usize,
}

impl SmpParams {
    pub fn new(
        scheme: Scheme,
        c_max: usize,
        state_dim: usize,
        hidden: usize,
        msg_dim: usize,
        seed: u64,
    ) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::new_with_rng(scheme, c_max, state_dim, hidden, msg_dim, &mut rng)
    }

    pub fn new_with_rng(
        scheme: Scheme,
        c_max: usize,
        state_dim: usize,
        hidden: usize,
        msg_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let h = hidden;
        let (theta1_dims, theta2_dims): (Vec<usize>, Option<Vec<usize>>) = match scheme {
            Scheme::NoMessage => (vec![state_dim, h, h, h, 1], None),
            Scheme::BottomUp => (
                vec![state_dim + c_max * msg_dim, h, h, h, 1 + msg_dim],
                None,
            ),
            Scheme::TopDown => (
                vec![state_dim + msg_dim, h, h, h, 1 + c_max * msg_dim],
                None,
            ),
            Scheme::BothWay => (
                vec![state_dim + c_max * msg_dim, h, h, h, msg_dim],
                Some(vec![2 * msg_dim, h, h, h, 1 + c_max * msg_dim]),
            ),
        };
        let theta1 = Mlp::new(rng, &theta1_dims, 0.01);
        let theta2 = theta2_dims.map(|d| Mlp::new(rng, &d, 0.01));
        Self {
            scheme,
            msg_dim,
            c_max,
            state_dim,
            hidden,
            theta1,
            theta2,
        }
    }

    pub fn meta(&self) -> SmpMeta {
        SmpMeta {
            scheme: self.scheme,
            c_max: self.c_max,
            msg_dim: self.msg_dim,
            state_dim: self.state_dim,
            hidden_width: self.hidden,
        }
    }

    pub fn theta1(&self) -> &Mlp {
        &self.theta1
    }

    pub fn theta2(&self) -> Option<&Mlp> {
        self.theta2.as_ref()
    }

    /// All trainable tensors.
    pub fn params(&self) -> Vec<Tensor> {
        let mut p = self.theta1.params();
        if let Some(t2) = &self.theta2 {
            p.extend(t2.params());
        }
        p
    }

    pub fn param_count(&self) -> usize {
        self.theta1.param_count() + self.theta2.as_ref().map_or(0, Mlp::param_count)
    }

    pub fn named_params(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (li, layer) in self.theta1.layers.iter().enumerate() {
            out.push((format!("{prefix}theta1.layer{li}.w"), layer.w.clone()));
            out.push((format!("{prefix}theta1.layer{li}.b"), layer.b.clone()));
        }
        if let Some(t2) = &self.theta2 {
            for (li, layer) in t2.layers.iter().enumerate() {
                out.push((format!("{prefix}theta2.layer{li}.w"), layer.w.clone()));
                out.push((format!("{prefix}theta2.layer{li}.b"), layer.b.clone()));
            }
        }
        out
    }

    /// Rebuilds a policy from checkpoint tensors; tensor names must follow
    /// [`SmpParams::named_params`] with the same prefix.
    pub fn from_tensors(
        meta: &SmpMeta,
        tensors: &[(String, Array2<f64>)],
        prefix: &str,
    ) -> Result<Self, PolicyError> {
        let template = Self::new(
            meta.scheme,
            meta.c_max,
            meta.state_dim,
            meta.hidden_width,
            meta.msg_dim,
            0,
        );
        let lookup = |name: &str| -> Result<&Array2<f64>, PolicyError> {
            tensors
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, v)| v)
                .ok_or_else(|| PolicyError::DimensionMismatch(format!("missing tensor `{name}`")))
        };
        for (li, layer) in template.theta1.layers.iter().enumerate() {
            layer.w.set_values(lookup(&format!("{prefix}theta1.layer{li}.w"))?.clone());
            layer.b.set_values(lookup(&format!("{prefix}theta1.layer{li}.b"))?.clone());
        }
        if let Some(t2) = &template.theta2 {
            for (li, layer) in t2.layers.iter().enumerate() {
                layer.w.set_values(lookup(&format!("{prefix}theta2.layer{li}.w"))?.clone());
                layer.b.set_values(lookup(&format!("{prefix}theta2.layer{li}.b"))?.clone());
            }
        }
        Ok(template)
    }

    pub fn deep_clone(&self) -> Self {
        Self {
            scheme: self.scheme,
            msg_dim: self.msg_dim,
            c_max: self.c_max,
            state_dim: self.state_dim,
            hidden: self.hidden,
            theta1: self.theta1.deep_clone(),
            theta2: self.theta2.as_ref().map(Mlp::deep_clone),
        }
    }

    pub fn soft_update_from(&mut self, other: &SmpParams, tau: f64) {
        self.theta1.soft_update_from(&other.theta1, tau);
        if let (Some(mine), Some(theirs)) = (self.theta2.as_mut(), other.theta2.as_ref()) {
            mine.soft_update_from(theirs, tau);
        }
    }
}

/// Tensor-level result of a policy forward pass over one graph.
pub struct ForwardOutput {
    /// Per-limb `B x 1` action tensors (tanh-bounded). The root's entry is
    /// computed like any other and discarded by the caller.
    pub actions: Vec<Tensor>,
    /// Emitted (normalized) up message per limb, for schemes with an upward
    /// pass.
    pub up_messages: Vec<Option<Tensor>>,
    /// Received (normalized) down message per limb, for schemes with a
    /// downward pass; the root receives an exact zero vector.
    pub down_received: Vec<Option<Tensor>>,
}

/// Float-level result of a single-state policy evaluation.
#[derive(Debug, Clone)]
pub struct PolicyOutput {
    pub actions: Vec<f64>,
    pub up_messages: Vec<Option<MessageVector>>,
    pub down_messages: Vec<Option<MessageVector>>,
}

fn check_states(
    g: &MorphologyGraph,
    states: &[Tensor],
    params: &SmpParams,
) -> Result<usize, PolicyError> {
    if states.len() != g.len() {
        return Err(PolicyError::DimensionMismatch(format!(
            "{} limb states for a {}-limb graph",
            states.len(),
            g.len()
        )));
    }
    let batch = states[0].shape().0;
    for s in states {
        let (b, d) = s.shape();
        if b != batch || d != params.state_dim {
            return Err(PolicyError::DimensionMismatch(format!(
                "expected {}x{} limb state, got {}x{}",
                batch, params.state_dim, b, d
            )));
        }
    }
    for i in 0..g.len() {
        let nc = g.children_of(i).len();
        if nc > params.c_max {
            return Err(PolicyError::TooManyChildren {
                children: nc,
                c_max: params.c_max,
            });
        }
    }
    Ok(batch)
}

fn zeros(batch: usize, dim: usize) -> Tensor {
    Tensor::constant(Array2::zeros((batch, dim)))
}

/// Concatenates a limb's state with its children's up messages, zero-padding
/// the unused slots. Slot order follows the graph's child ordering.
fn up_input(
    tape: &mut Tape,
    g: &MorphologyGraph,
    params: &SmpParams,
    batch: usize,
    state: &Tensor,
    node: usize,
    up: &[Option<Tensor>],
) -> Result<Tensor, PolicyError> {
    let mut parts: Vec<Tensor> = vec![state.clone()];
    for &c in g.children_of(node) {
        parts.push(up[c].clone().expect("children evaluated before parents"));
    }
    while parts.len() < 1 + params.c_max {
        parts.push(zeros(batch, params.msg_dim));
    }
    let refs: Vec<&Tensor> = parts.iter().collect();
    Ok(tape.concat_cols(&refs)?)
}

/// Extracts and normalizes the down-message slot a child consumes from its
/// parent's raw slot block.
fn down_slot(
    tape: &mut Tape,
    params: &SmpParams,
    slots: &Tensor,
    slot: usize,
) -> Result<Tensor, PolicyError> {
    let m = params.msg_dim;
    let raw = tape.slice_cols(slots, slot * m, (slot + 1) * m)?;
    Ok(tape.normalize_rows(&raw, MESSAGE_NORM_EPS)?)
}

/// Scheduled forward pass over one graph. `states[i]` is the `B x D_s` state
/// of limb `i`; rows are independent batch entries sharing the graph.
pub fn forward(
    tape: &mut Tape,
    g: &MorphologyGraph,
    states: &[Tensor],
    params: &SmpParams,
) -> Result<ForwardOutput, PolicyError> {
    let batch = check_states(g, states, params)?;
    let n = g.len();
    let order = topological_ordering(g);
    let mut actions: Vec<Option<Tensor>> = vec![None; n];
    let mut up: Vec<Option<Tensor>> = vec![None; n];
    let mut down_received: Vec<Option<Tensor>> = vec![None; n];

    match params.scheme {
        Scheme::NoMessage => {
            for &i in &order {
                let out = params.theta1.forward(tape, &states[i])?;
                let a = tape.slice_cols(&out, 0, 1)?;
                actions[i] = Some(tape.tanh(&a)?);
            }
        }
        Scheme::BottomUp => {
            for &i in order.iter().rev() {
                let input = up_input(tape, g, params, batch, &states[i], i, &up)?;
                let out = params.theta1.forward(tape, &input)?;
                let a = tape.slice_cols(&out, 0, 1)?;
                actions[i] = Some(tape.tanh(&a)?);
                let raw = tape.slice_cols(&out, 1, 1 + params.msg_dim)?;
                up[i] = Some(tape.normalize_rows(&raw, MESSAGE_NORM_EPS)?);
            }
        }
        Scheme::TopDown => {
            let mut slots: Vec<Option<Tensor>> = vec![None; n];
            for &i in &order {
                let received = match g.parent_of(i) {
                    None => zeros(batch, params.msg_dim),
                    Some(p) => {
                        let slot = g.sibling_slot(i).expect("non-root limb has a slot");
                        down_slot(tape, params, slots[p].as_ref().unwrap(), slot)?
                    }
                };
                let input = tape.concat_cols(&[&states[i], &received])?;
                let out = params.theta1.forward(tape, &input)?;
                let a = tape.slice_cols(&out, 0, 1)?;
                actions[i] = Some(tape.tanh(&a)?);
                slots[i] = Some(tape.slice_cols(&out, 1, 1 + params.c_max * params.msg_dim)?);
                down_received[i] = Some(received);
            }
        }
        Scheme::BothWay => {
            let theta2 = params
                .theta2
                .as_ref()
                .expect("both_way policies carry a second module");
            // Upward pass: messages only.
            for &i in order.iter().rev() {
                let input = up_input(tape, g, params, batch, &states[i], i, &up)?;
                let raw = params.theta1.forward(tape, &input)?;
                up[i] = Some(tape.normalize_rows(&raw, MESSAGE_NORM_EPS)?);
            }
            // Downward pass: actions and child messages.
            let mut slots: Vec<Option<Tensor>> = vec![None; n];
            for &i in &order {
                let received = match g.parent_of(i) {
                    None => zeros(batch, params.msg_dim),
                    Some(p) => {
                        let slot = g.sibling_slot(i).expect("non-root limb has a slot");
                        down_slot(tape, params, slots[p].as_ref().unwrap(), slot)?
                    }
                };
                let own_up = up[i].clone().expect("upward pass covered every limb");
                let input = tape.concat_cols(&[&own_up, &received])?;
                let out = theta2.forward(tape, &input)?;
                let a = tape.slice_cols(&out, 0, 1)?;
                actions[i] = Some(tape.tanh(&a)?);
                slots[i] = Some(tape.slice_cols(&out, 1, 1 + params.c_max * params.msg_dim)?);
                down_received[i] = Some(received);
            }
        }
    }

    Ok(ForwardOutput {
        actions: actions.into_iter().map(Option::unwrap).collect(),
        up_messages: up,
        down_received,
    })
}

fn states_to_tensors(states: &[Vec<f64>]) -> Vec<Tensor> {
    states.iter().map(|s| Tensor::from_row(s)).collect()
}

fn extract_output(out: &ForwardOutput) -> PolicyOutput {
    let actions = out.actions.iter().map(Tensor::item).collect();
    let msg = |t: &Option<Tensor>| {
        t.as_ref()
            .map(|m| MessageVector(m.values().row(0).to_vec()))
    };
    PolicyOutput {
        actions,
        up_messages: out.up_messages.iter().map(msg).collect(),
        down_messages: out.down_received.iter().map(msg).collect(),
    }
}

/// Single-state policy evaluation under the parameter set's own scheme.
pub fn act(
    states: &[Vec<f64>],
    g: &MorphologyGraph,
    params: &SmpParams,
) -> Result<PolicyOutput, PolicyError> {
    let mut tape = Tape::new();
    let tensors = states_to_tensors(states);
    let out = forward(&mut tape, g, &tensors, params)?;
    Ok(extract_output(&out))
}

fn act_with_scheme(
    states: &[Vec<f64>],
    g: &MorphologyGraph,
    params: &SmpParams,
    scheme: Scheme,
) -> Result<PolicyOutput, PolicyError> {
    assert_eq!(
        params.scheme, scheme,
        "parameter set was built for scheme {}",
        params.scheme
    );
    act(states, g, params)
}

/// Independent per-limb modules; each action depends only on its own limb.
pub fn act_no_message(
    states: &[Vec<f64>],
    g: &MorphologyGraph,
    params: &SmpParams,
) -> Result<PolicyOutput, PolicyError> {
    act_with_scheme(states, g, params, Scheme::NoMessage)
}

/// Leaf-to-root message schedule.
pub fn act_bottom_up(
    states: &[Vec<f64>],
    g: &MorphologyGraph,
    params: &SmpParams,
) -> Result<PolicyOutput, PolicyError> {
    act_with_scheme(states, g, params, Scheme::BottomUp)
}

/// Root-to-leaf message schedule.
pub fn act_top_down(
    states: &[Vec<f64>],
    g: &MorphologyGraph,
    params: &SmpParams,
) -> Result<PolicyOutput, PolicyError> {
    act_with_scheme(states, g, params, Scheme::TopDown)
}

/// Upward message pass followed by a downward action pass.
pub fn act_both_way(
    states: &[Vec<f64>],
    g: &MorphologyGraph,
    params: &SmpParams,
) -> Result<PolicyOutput, PolicyError> {
    act_with_scheme(states, g, params, Scheme::BothWay)
}

/// Evaluates a batch of agents (possibly different graphs) by grouping limbs
/// of equal tree depth: within a depth group no module depends on another,
/// so each group runs as one stacked matrix pass per module.
pub fn depth_batched_forward(
    batch: &[(&MorphologyGraph, Vec<Vec<f64>>)],
    params: &SmpParams,
) -> Result<Vec<PolicyOutput>, PolicyError> {
    let mut tape = Tape::new();

    // (entry, limb) keyed by depth.
    let mut max_depth = 0;
    let mut depths: Vec<Vec<usize>> = Vec::with_capacity(batch.len());
    for (g, states) in batch {
        if states.len() != g.len() {
            return Err(PolicyError::DimensionMismatch(format!(
                "{} limb states for a {}-limb graph",
                states.len(),
                g.len()
            )));
        }
        for i in 0..g.len() {
            let nc = g.children_of(i).len();
            if nc > params.c_max {
                return Err(PolicyError::TooManyChildren {
                    children: nc,
                    c_max: params.c_max,
                });
            }
        }
        let d: Vec<usize> = (0..g.len()).map(|i| g.depth_of(i)).collect();
        max_depth = max_depth.max(d.iter().copied().max().unwrap_or(0));
        depths.push(d);
    }
    let mut groups: Vec<Vec<(usize, usize)>> = vec![Vec::new(); max_depth + 1];
    for (e, (g, _)) in batch.iter().enumerate() {
        for i in 0..g.len() {
            groups[depths[e][i]].push((e, i));
        }
    }

    let state_tensors: Vec<Vec<Tensor>> = batch
        .iter()
        .map(|(_, states)| states_to_tensors(states))
        .collect();
    let mut actions: Vec<Vec<Option<Tensor>>> =
        batch.iter().map(|(g, _)| vec![None; g.len()]).collect();
    let mut up: Vec<Vec<Option<Tensor>>> =
        batch.iter().map(|(g, _)| vec![None; g.len()]).collect();
    let mut down_received: Vec<Vec<Option<Tensor>>> =
        batch.iter().map(|(g, _)| vec![None; g.len()]).collect();
    let mut slots: Vec<Vec<Option<Tensor>>> =
        batch.iter().map(|(g, _)| vec![None; g.len()]).collect();

    // One stacked module evaluation for a depth group; results are sliced
    // back to their (entry, limb) owners by `consume`.
    let run_group = |tape: &mut Tape,
                         mlp: &Mlp,
                         inputs: Vec<Tensor>,
                         members: &[(usize, usize)],
                         consume: &mut dyn FnMut(
        &mut Tape,
        usize,
        usize,
        Tensor,
    ) -> Result<(), PolicyError>|
     -> Result<(), PolicyError> {
        let refs: Vec<&Tensor> = inputs.iter().collect();
        let stacked = tape.stack_rows(&refs)?;
        let out = mlp.forward(tape, &stacked)?;
        for (row, &(e, i)) in members.iter().enumerate() {
            let r = tape.slice_rows(&out, row, row + 1)?;
            consume(tape, e, i, r)?;
        }
        Ok(())
    };

    let needs_up = matches!(params.scheme, Scheme::BottomUp | Scheme::BothWay);
    let needs_down = matches!(params.scheme, Scheme::TopDown | Scheme::BothWay);

    if matches!(params.scheme, Scheme::NoMessage) {
        for group in &groups {
            if group.is_empty() {
                continue;
            }
            let inputs: Vec<Tensor> = group
                .iter()
                .map(|&(e, i)| state_tensors[e][i].clone())
                .collect();
            run_group(
                &mut tape,
                &params.theta1,
                inputs,
                group,
                &mut |tape, e, i, row| {
                    let a = tape.slice_cols(&row, 0, 1)?;
                    actions[e][i] = Some(tape.tanh(&a)?);
                    Ok(())
                },
            )?;
        }
    }

    if needs_up {
        for group in groups.iter().rev() {
            if group.is_empty() {
                continue;
            }
            let mut inputs = Vec::with_capacity(group.len());
            for &(e, i) in group {
                let g = batch[e].0;
                let input =
                    up_input(&mut tape, g, params, 1, &state_tensors[e][i], i, &up[e])?;
                inputs.push(input);
            }
            if params.scheme == Scheme::BothWay {
                run_group(
                    &mut tape,
                    &params.theta1,
                    inputs,
                    group,
                    &mut |tape, e, i, row| {
                        up[e][i] = Some(tape.normalize_rows(&row, MESSAGE_NORM_EPS)?);
                        Ok(())
                    },
                )?;
            } else {
                run_group(
                    &mut tape,
                    &params.theta1,
                    inputs,
                    group,
                    &mut |tape, e, i, row| {
                        let a = tape.slice_cols(&row, 0, 1)?;
                        actions[e][i] = Some(tape.tanh(&a)?);
                        let raw = tape.slice_cols(&row, 1, 1 + params.msg_dim)?;
                        up[e][i] = Some(tape.normalize_rows(&raw, MESSAGE_NORM_EPS)?);
                        Ok(())
                    },
                )?;
            }
        }
    }

    if needs_down {
        for group in &groups {
            if group.is_empty() {
                continue;
            }
            let mut inputs = Vec::with_capacity(group.len());
            for &(e, i) in group {
                let g = batch[e].0;
                let received = match g.parent_of(i) {
                    None => zeros(1, params.msg_dim),
                    Some(p) => {
                        let slot = g.sibling_slot(i).expect("non-root limb has a slot");
                        down_slot(&mut tape, params, slots[e][p].as_ref().unwrap(), slot)?
                    }
                };
                let input = if params.scheme == Scheme::TopDown {
                    tape.concat_cols(&[&state_tensors[e][i], &received])?
                } else {
                    let own_up = up[e][i].clone().expect("upward pass ran first");
                    tape.concat_cols(&[&own_up, &received])?
                };
                down_received[e][i] = Some(received);
                inputs.push(input);
            }
            let mlp = match params.scheme {
                Scheme::TopDown => &params.theta1,
                _ => params.theta2.as_ref().expect("both_way carries theta2"),
            };
            run_group(&mut tape, mlp, inputs, group, &mut |tape, e, i, row| {
                let a = tape.slice_cols(&row, 0, 1)?;
                actions[e][i] = Some(tape.tanh(&a)?);
                slots[e][i] =
                    Some(tape.slice_cols(&row, 1, 1 + params.c_max * params.msg_dim)?);
                Ok(())
            })?;
        }
    }

    let mut outputs = Vec::with_capacity(batch.len());
    for (e, _) in batch.iter().enumerate() {
        let fo = ForwardOutput {
            actions: actions[e].iter().cloned().map(Option::unwrap).collect(),
            up_messages: up[e].clone(),
            down_received: down_received[e].clone(),
        };
        outputs.push(extract_output(&fo));
    }
    Ok(outputs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;
    use crate::sim::LIMB_STATE_DIM;

    fn random_states(g: &MorphologyGraph, seed: u64) -> Vec<Vec<f64>> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..g.len())
            .map(|_| (0..LIMB_STATE_DIM).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect()
    }

    fn params_for(scheme: Scheme, c_max: usize, seed: u64) -> SmpParams {
        SmpParams::new(scheme, c_max, LIMB_STATE_DIM, 16, MESSAGE_DIM, seed)
    }

    #[test]
    fn identical_states_give_identical_actions() {
        let g = presets::chain(&["t", "a", "b"]);
        let p = params_for(Scheme::NoMessage, 1, 0);
        let mut states = random_states(&g, 1);
        states[1] = states[2].clone();
        let out = act_no_message(&states, &g, &p).unwrap();
        assert_eq!(out.actions[1], out.actions[2]);
    }

    #[test]
    fn permuting_limb_states_permutes_actions() {
        let g = presets::walker();
        let p = params_for(Scheme::NoMessage, 2, 0);
        let states = random_states(&g, 2);
        let out = act_no_message(&states, &g, &p).unwrap();
        let mut swapped = states.clone();
        swapped.swap(1, 2);
        let out2 = act_no_message(&swapped, &g, &p).unwrap();
        assert_eq!(out.actions[1], out2.actions[2]);
        assert_eq!(out.actions[2], out2.actions[1]);
    }

    #[test]
    fn no_message_actions_ignore_other_limbs() {
        let g = presets::walker();
        let p = params_for(Scheme::NoMessage, 2, 3);
        let states = random_states(&g, 4);
        let base = act_no_message(&states, &g, &p).unwrap();
        for perturbed_limb in 0..g.len() {
            let mut s = states.clone();
            s[perturbed_limb][0] += 0.5;
            let out = act_no_message(&s, &g, &p).unwrap();
            for i in 0..g.len() {
                if i != perturbed_limb {
                    assert_eq!(out.actions[i], base.actions[i]);
                }
            }
        }
    }

    #[test]
    fn bottom_up_single_limb_consumes_zero_slots() {
        let g = presets::single_limb();
        let p = params_for(Scheme::BottomUp, 2, 5);
        let states = random_states(&g, 6);
        let out = act_bottom_up(&states, &g, &p).unwrap();

        // Same action as evaluating theta1 on (state, zero slots) directly.
        let mut tape = Tape::new();
        let mut input = states[0].clone();
        input.extend(std::iter::repeat(0.0).take(2 * MESSAGE_DIM));
        let x = Tensor::from_row(&input);
        let raw = p.theta1().forward(&mut tape, &x).unwrap();
        let a = raw.values()[[0, 0]].tanh();
        assert_eq!(out.actions[0], a);
    }

    #[test]
    fn bottom_up_directional_information_flow() {
        let g = presets::chain(&["t", "a", "b"]);
        let p = params_for(Scheme::BottomUp, 1, 7);
        let states = random_states(&g, 8);
        let base = act_bottom_up(&states, &g, &p).unwrap();
        let (t, b) = (g.index_of("t").unwrap(), g.index_of("b").unwrap());

        let mut leaf_perturbed = states.clone();
        leaf_perturbed[b][1] += 0.25;
        let out = act_bottom_up(&leaf_perturbed, &g, &p).unwrap();
        assert_ne!(out.actions[t], base.actions[t], "root hears the leaf");

        let mut root_perturbed = states.clone();
        root_perturbed[t][1] += 0.25;
        let out = act_bottom_up(&root_perturbed, &g, &p).unwrap();
        assert_eq!(out.actions[b], base.actions[b], "leaf cannot hear the root");
    }

    #[test]
    fn top_down_breaks_symmetry_between_identical_children() {
        let g = presets::double_chain(1);
        let p = params_for(Scheme::TopDown, 2, 9);
        let mut states = random_states(&g, 10);
        states[2] = states[1].clone();
        let out = act_top_down(&states, &g, &p).unwrap();
        assert_ne!(
            out.actions[1], out.actions[2],
            "distinct slots allow distinct actions for identical states"
        );
    }

    #[test]
    fn top_down_directional_information_flow() {
        let g = presets::chain(&["t", "a", "b"]);
        let p = params_for(Scheme::TopDown, 1, 11);
        let states = random_states(&g, 12);
        let base = act_top_down(&states, &g, &p).unwrap();
        let (t, b) = (g.index_of("t").unwrap(), g.index_of("b").unwrap());

        let mut leaf_perturbed = states.clone();
        leaf_perturbed[b][2] += 0.3;
        let out = act_top_down(&leaf_perturbed, &g, &p).unwrap();
        assert_eq!(out.actions[t], base.actions[t], "root cannot hear the leaf");

        let mut root_perturbed = states.clone();
        root_perturbed[t][2] += 0.3;
        let out = act_top_down(&root_perturbed, &g, &p).unwrap();
        assert_ne!(out.actions[b], base.actions[b], "leaf hears the root");
    }

    #[test]
    fn top_down_output_carries_all_slots() {
        let p = params_for(Scheme::TopDown, 3, 13);
        assert_eq!(p.theta1().output_dim(), 1 + 3 * MESSAGE_DIM);
    }

    #[test]
    fn both_way_full_range_information_flow() {
        let g = presets::chain(&["t", "a", "b", "c"]);
        let p = params_for(Scheme::BothWay, 1, 15);
        let states = random_states(&g, 16);
        let base = act_both_way(&states, &g, &p).unwrap();
        let (t, c) = (g.index_of("t").unwrap(), g.index_of("c").unwrap());

        let mut leaf_perturbed = states.clone();
        leaf_perturbed[c][0] += 0.2;
        let out = act_both_way(&leaf_perturbed, &g, &p).unwrap();
        assert!(
            (out.actions[t] - base.actions[t]).abs() > 1e-8,
            "leaf reaches the root"
        );

        let mut root_perturbed = states.clone();
        root_perturbed[t][0] += 0.2;
        let out = act_both_way(&root_perturbed, &g, &p).unwrap();
        assert!(
            (out.actions[c] - base.actions[c]).abs() > 1e-8,
            "root reaches the leaf"
        );
    }

    #[test]
    fn both_way_single_limb_degenerates_to_composition() {
        let g = presets::single_limb();
        let p = params_for(Scheme::BothWay, 2, 17);
        let states = random_states(&g, 18);
        let out = act_both_way(&states, &g, &p).unwrap();

        let mut tape = Tape::new();
        let mut input = states[0].clone();
        input.extend(std::iter::repeat(0.0).take(2 * MESSAGE_DIM));
        let x = Tensor::from_row(&input);
        let raw = p.theta1().forward(&mut tape, &x).unwrap();
        let up = tape.normalize_rows(&raw, MESSAGE_NORM_EPS).unwrap();
        let zero = Tensor::from_row(&vec![0.0; MESSAGE_DIM]);
        let input2 = tape.concat_cols(&[&up, &zero]).unwrap();
        let out2 = p.theta2().unwrap().forward(&mut tape, &input2).unwrap();
        let expected = out2.values()[[0, 0]].tanh();
        assert_eq!(out.actions[0], expected);
    }

    #[test]
    fn pad_examples() {
        let empty = pad_child_messages(&[], 2).unwrap();
        assert_eq!(empty.len(), 2);
        assert!(empty.iter().all(|m| m.0.iter().all(|&v| v == 0.0)));

        let m = normalize_message(&vec![1.0; MESSAGE_DIM]);
        let padded = pad_child_messages(std::slice::from_ref(&m), 2).unwrap();
        assert_eq!(padded[0], m);
        assert!(padded[1].0.iter().all(|&v| v == 0.0));

        let three = vec![m.clone(), m.clone(), m];
        assert!(matches!(
            pad_child_messages(&three, 2),
            Err(PolicyError::TooManyChildren { children: 3, c_max: 2 })
        ));
    }

    #[test]
    fn normalize_message_examples() {
        let mut unit = vec![0.0; MESSAGE_DIM];
        unit[4] = 1.0;
        assert_eq!(normalize_message(&unit).0, unit);

        let zero = vec![0.0; MESSAGE_DIM];
        assert_eq!(normalize_message(&zero).0, zero);

        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100 {
            let v: Vec<f64> = (0..MESSAGE_DIM).map(|_| rng.random_range(-3.0..3.0)).collect();
            let n = normalize_message(&v).norm();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn actions_stay_in_bounds() {
        let g = presets::walker();
        for scheme in Scheme::ALL {
            let p = params_for(scheme, 2, 21);
            let mut states = random_states(&g, 22);
            for s in &mut states {
                for v in s.iter_mut() {
                    *v *= 50.0;
                }
            }
            let out = act(&states, &g, &p).unwrap();
            for a in out.actions {
                assert!((-1.0..=1.0).contains(&a));
            }
        }
    }

    #[test]
    fn forward_succeeds_on_every_enumerated_variant() {
        let base = presets::walker();
        let set = crate::morphology::enumerate_variants(&base, |_| true, 0.2, 1).unwrap();
        let c_max = crate::morphology::max_children(set.variants.iter());
        let p = params_for(Scheme::BothWay, c_max, 23);
        for v in &set.variants {
            let states = random_states(v, 24);
            let out = act_both_way(&states, v, &p).unwrap();
            assert_eq!(out.actions.len(), v.len());
        }
    }

    #[test]
    fn branching_beyond_c_max_is_rejected() {
        let g = presets::humanoid();
        let p = params_for(Scheme::BothWay, 2, 25);
        let states = random_states(&g, 26);
        assert!(matches!(
            act(&states, &g, &p),
            Err(PolicyError::TooManyChildren { children: 3, c_max: 2 })
        ));
    }

    #[test]
    fn parameter_count_is_morphology_independent() {
        let p = params_for(Scheme::BothWay, 2, 27);
        let count = p.param_count();
        let q = params_for(Scheme::BothWay, 2, 28);
        assert_eq!(count, q.param_count());
        let expected_t1 = {
            let din = LIMB_STATE_DIM + 2 * MESSAGE_DIM;
            din * 16 + 16 + (16 * 16 + 16) * 2 + 16 * MESSAGE_DIM + MESSAGE_DIM
        };
        let expected_t2 = {
            let din = 2 * MESSAGE_DIM;
            let dout = 1 + 2 * MESSAGE_DIM;
            din * 16 + 16 + (16 * 16 + 16) * 2 + 16 * dout + dout
        };
        assert_eq!(count, expected_t1 + expected_t2);
    }

    #[test]
    fn checkpoint_meta_roundtrip() {
        let p = params_for(Scheme::BothWay, 2, 29);
        let named = p.named_params("actor.");
        let raw: Vec<(String, Array2<f64>)> = named
            .iter()
            .map(|(n, t)| (n.clone(), t.value_clone()))
            .collect();
        let q = SmpParams::from_tensors(&p.meta(), &raw, "actor.").unwrap();
        let g = presets::walker();
        let states = random_states(&g, 30);
        let a = act(&states, &g, &p).unwrap();
        let b = act(&states, &g, &q).unwrap();
        assert_eq!(a.actions, b.actions);
    }
}
