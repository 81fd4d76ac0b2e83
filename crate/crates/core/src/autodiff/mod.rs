//! Reverse-mode automatic differentiation over dense 64-bit arrays.
//!
//! Every value is a row-major 2-D array (scalars are 1x1, row vectors 1xN).
//! Primitives evaluate eagerly and record themselves on a [`Tape`]; calling
//! [`backward`] walks the tape in reverse, accumulates gradients into every
//! tensor that needs one, and consumes the tape. A tensor is a shared handle,
//! so parameters persist across tapes while intermediates die with theirs.

mod adam;
mod checkpoint;
mod mlp;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{load_tensors, save_tensors};
pub use mlp::{Linear, Mlp};

use ndarray::{s, Array2, Axis};
use std::cell::{Ref, RefCell};
use std::rc::Rc;

#[derive(Debug, thiserror::Error)]
pub enum AutodiffError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss must be a 1x1 scalar")]
    NonScalarLoss,
    #[error("tape already consumed by a backward pass")]
    TapeConsumed,
    #[error("parameter `{0}` is missing its gradient")]
    MissingGradient(String),
}

struct TensorData {
    values: Array2<f64>,
    grad: Option<Array2<f64>>,
    requires_grad: bool,
    /// True when this tensor is a gradient leaf or derives from one.
    needs_grad: bool,
}

/// Shared handle to a dense value and (optionally) its gradient.
#[derive(Clone)]
pub struct Tensor(Rc<RefCell<TensorData>>);

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let d = self.0.borrow();
        f.debug_struct("Tensor")
            .field("shape", &d.values.dim())
            .field("requires_grad", &d.requires_grad)
            .finish()
    }
}

impl Tensor {
    fn new(values: Array2<f64>, requires_grad: bool, needs_grad: bool) -> Self {
        Self(Rc::new(RefCell::new(TensorData {
            values,
            grad: None,
            requires_grad,
            needs_grad,
        })))
    }

    /// A value that does not participate in differentiation.
    pub fn constant(values: Array2<f64>) -> Self {
        Self::new(values, false, false)
    }

    /// A gradient leaf.
    pub fn parameter(values: Array2<f64>) -> Self {
        Self::new(values, true, true)
    }

    pub fn from_row(row: &[f64]) -> Self {
        Self::constant(Array2::from_shape_vec((1, row.len()), row.to_vec()).unwrap())
    }

    pub fn scalar(v: f64) -> Self {
        Self::constant(Array2::from_elem((1, 1), v))
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.borrow().values.dim()
    }

    pub fn values(&self) -> Ref<'_, Array2<f64>> {
        Ref::map(self.0.borrow(), |d| &d.values)
    }

    pub fn value_clone(&self) -> Array2<f64> {
        self.0.borrow().values.clone()
    }

    pub fn item(&self) -> f64 {
        let d = self.0.borrow();
        assert_eq!(d.values.len(), 1, "item() requires a scalar tensor");
        d.values[[0, 0]]
    }

    pub fn requires_grad(&self) -> bool {
        self.0.borrow().requires_grad
    }

    pub fn grad_clone(&self) -> Option<Array2<f64>> {
        self.0.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.0.borrow_mut().grad = None;
    }

    pub fn set_values(&self, values: Array2<f64>) {
        let mut d = self.0.borrow_mut();
        assert_eq!(d.values.dim(), values.dim(), "set_values must keep shape");
        d.values = values;
    }

    /// In-place update used by optimizers and soft target updates.
    pub fn map_values(&self, f: impl FnOnce(&mut Array2<f64>)) {
        f(&mut self.0.borrow_mut().values);
    }

    pub fn ptr_eq(a: &Tensor, b: &Tensor) -> bool {
        Rc::ptr_eq(&a.0, &b.0)
    }

    fn needs_grad(&self) -> bool {
        self.0.borrow().needs_grad
    }

    fn take_grad(&self) -> Option<Array2<f64>> {
        self.0.borrow_mut().grad.take()
    }

    fn accumulate_grad(&self, delta: &Array2<f64>) {
        let mut d = self.0.borrow_mut();
        match &mut d.grad {
            Some(g) => *g += delta,
            None => d.grad = Some(delta.clone()),
        }
    }
}

enum Op {
    MatMul,
    Add,
    Relu,
    Tanh,
    ConcatCols,
    SliceCols(usize, usize),
    StackRows,
    SliceRows(usize, usize),
    Sum,
    Mean,
    Square,
    ScalarMul(f64),
    NormalizeRows(f64),
}

struct Node {
    op: Op,
    inputs: Vec<Tensor>,
    output: Tensor,
}

/// Ordered record of primitive operations for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

type Result<T> = std::result::Result<T, AutodiffError>;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn record(&mut self, op: Op, inputs: Vec<Tensor>, values: Array2<f64>) -> Tensor {
        let needs = inputs.iter().any(Tensor::needs_grad);
        let out = Tensor::new(values, false, needs);
        // Subgraphs that cannot influence any gradient leaf are not recorded.
        if needs {
            self.nodes.push(Node {
                op,
                inputs,
                output: out.clone(),
            });
        }
        out
    }

    pub fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (am, ak) = a.shape();
        let (bk, bn) = b.shape();
        if ak != bk {
            return Err(AutodiffError::ShapeMismatch(format!(
                "matmul {am}x{ak} . {bk}x{bn}"
            )));
        }
        let values = a.values().dot(&*b.values());
        Ok(self.record(Op::MatMul, vec![a.clone(), b.clone()], values))
    }

    /// Element-wise addition; the second operand may be a 1xN row broadcast
    /// over the first operand's rows.
    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (am, an) = a.shape();
        let (bm, bn) = b.shape();
        let values = if (am, an) == (bm, bn) {
            &*a.values() + &*b.values()
        } else if bm == 1 && bn == an {
            let bv = b.values();
            let row = bv.row(0);
            let mut out = a.value_clone();
            for mut r in out.rows_mut() {
                r += &row;
            }
            out
        } else {
            return Err(AutodiffError::ShapeMismatch(format!(
                "add {am}x{an} + {bm}x{bn}"
            )));
        };
        Ok(self.record(Op::Add, vec![a.clone(), b.clone()], values))
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let neg = self.scalar_mul(b, -1.0)?;
        self.add(a, &neg)
    }

    pub fn relu(&mut self, x: &Tensor) -> Result<Tensor> {
        let values = x.values().mapv(|v| if v > 0.0 { v } else { 0.0 });
        Ok(self.record(Op::Relu, vec![x.clone()], values))
    }

    pub fn tanh(&mut self, x: &Tensor) -> Result<Tensor> {
        let values = x.values().mapv(f64::tanh);
        Ok(self.record(Op::Tanh, vec![x.clone()], values))
    }

    /// Concatenates along columns; all operands must share the row count.
    pub fn concat_cols(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = parts[0].shape().0;
        let total: usize = parts.iter().map(|p| p.shape().1).sum();
        let mut values = Array2::zeros((rows, total));
        let mut off = 0;
        for p in parts {
            let (pm, pn) = p.shape();
            if pm != rows {
                return Err(AutodiffError::ShapeMismatch(format!(
                    "concat_cols rows {pm} != {rows}"
                )));
            }
            values.slice_mut(s![.., off..off + pn]).assign(&*p.values());
            off += pn;
        }
        let inputs = parts.iter().map(|p| (*p).clone()).collect();
        Ok(self.record(Op::ConcatCols, inputs, values))
    }

    pub fn slice_cols(&mut self, x: &Tensor, from: usize, to: usize) -> Result<Tensor> {
        let (_, n) = x.shape();
        if to > n || from >= to {
            return Err(AutodiffError::ShapeMismatch(format!(
                "slice_cols {from}..{to} of width {n}"
            )));
        }
        let values = x.values().slice(s![.., from..to]).to_owned();
        Ok(self.record(Op::SliceCols(from, to), vec![x.clone()], values))
    }

    /// Stacks along rows; all operands must share the column count.
    pub fn stack_rows(&mut self, parts: &[&Tensor]) -> Result<Tensor> {
        assert!(!parts.is_empty(), "stack of nothing");
        let cols = parts[0].shape().1;
        let total: usize = parts.iter().map(|p| p.shape().0).sum();
        let mut values = Array2::zeros((total, cols));
        let mut off = 0;
        for p in parts {
            let (pm, pn) = p.shape();
            if pn != cols {
                return Err(AutodiffError::ShapeMismatch(format!(
                    "stack_rows cols {pn} != {cols}"
                )));
            }
            values.slice_mut(s![off..off + pm, ..]).assign(&*p.values());
            off += pm;
        }
        let inputs = parts.iter().map(|p| (*p).clone()).collect();
        Ok(self.record(Op::StackRows, inputs, values))
    }

    pub fn slice_rows(&mut self, x: &Tensor, from: usize, to: usize) -> Result<Tensor> {
        let (m, _) = x.shape();
        if to > m || from >= to {
            return Err(AutodiffError::ShapeMismatch(format!(
                "slice_rows {from}..{to} of height {m}"
            )));
        }
        let values = x.values().slice(s![from..to, ..]).to_owned();
        Ok(self.record(Op::SliceRows(from, to), vec![x.clone()], values))
    }

    pub fn sum(&mut self, x: &Tensor) -> Result<Tensor> {
        let values = Array2::from_elem((1, 1), x.values().sum());
        Ok(self.record(Op::Sum, vec![x.clone()], values))
    }

    pub fn mean(&mut self, x: &Tensor) -> Result<Tensor> {
        let v = x.values();
        let values = Array2::from_elem((1, 1), v.sum() / v.len() as f64);
        drop(v);
        Ok(self.record(Op::Mean, vec![x.clone()], values))
    }

    pub fn square(&mut self, x: &Tensor) -> Result<Tensor> {
        let values = x.values().mapv(|v| v * v);
        Ok(self.record(Op::Square, vec![x.clone()], values))
    }

    pub fn scalar_mul(&mut self, x: &Tensor, c: f64) -> Result<Tensor> {
        let values = x.values().mapv(|v| c * v);
        Ok(self.record(Op::ScalarMul(c), vec![x.clone()], values))
    }

    /// Divides each row by `max(l2_norm(row), eps)`.
    pub fn normalize_rows(&mut self, x: &Tensor, eps: f64) -> Result<Tensor> {
        let v = x.values();
        let mut values = v.clone();
        drop(v);
        for mut row in values.rows_mut() {
            let norm = row.iter().map(|a| a * a).sum::<f64>().sqrt();
            let denom = norm.max(eps);
            row.mapv_inplace(|a| a / denom);
        }
        Ok(self.record(Op::NormalizeRows(eps), vec![x.clone()], values))
    }
}

/// Populates gradients of every tensor reachable from `loss` that needs one,
/// then consumes the tape.
pub fn backward(loss: &Tensor, tape: &mut Tape) -> Result<()> {
    if tape.consumed {
        return Err(AutodiffError::TapeConsumed);
    }
    if loss.shape() != (1, 1) {
        return Err(AutodiffError::NonScalarLoss);
    }
    tape.consumed = true;
    loss.accumulate_grad(&Array2::from_elem((1, 1), 1.0));

    for node in tape.nodes.iter().rev() {
        let Some(grad) = node.output.take_grad() else {
            continue;
        };
        match &node.op {
            Op::MatMul => {
                let a = &node.inputs[0];
                let b = &node.inputs[1];
                if a.needs_grad() {
                    a.accumulate_grad(&grad.dot(&b.values().t()));
                }
                if b.needs_grad() {
                    b.accumulate_grad(&a.values().t().dot(&grad));
                }
            }
            Op::Add => {
                let a = &node.inputs[0];
                let b = &node.inputs[1];
                if a.needs_grad() {
                    a.accumulate_grad(&grad);
                }
                if b.needs_grad() {
                    if b.shape() == grad.dim() {
                        b.accumulate_grad(&grad);
                    } else {
                        let summed = grad.sum_axis(Axis(0)).insert_axis(Axis(0));
                        b.accumulate_grad(&summed);
                    }
                }
            }
            Op::Relu => {
                let x = &node.inputs[0];
                if x.needs_grad() {
                    let mask = x.values().mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
                    x.accumulate_grad(&(&grad * &mask));
                }
            }
            Op::Tanh => {
                let x = &node.inputs[0];
                if x.needs_grad() {
                    let y = node.output.values();
                    let d = y.mapv(|v| 1.0 - v * v);
                    drop(y);
                    x.accumulate_grad(&(&grad * &d));
                }
            }
            Op::ConcatCols => {
                let mut off = 0;
                for p in &node.inputs {
                    let w = p.shape().1;
                    if p.needs_grad() {
                        p.accumulate_grad(&grad.slice(s![.., off..off + w]).to_owned());
                    }
                    off += w;
                }
            }
            Op::SliceCols(from, to) => {
                let x = &node.inputs[0];
                if x.needs_grad() {
                    let (m, n) = x.shape();
                    let mut dx = Array2::zeros((m, n));
                    dx.slice_mut(s![.., *from..*to]).assign(&grad);
                    x.accumulate_grad(&dx);
                }
            }
            Op::StackRows => {
                let mut off = 0;
                for p in &node.inputs {
                    let h = p.shape().0;
                    if p.needs_grad() {
                        p.accumulate_grad(&grad.slice(s![off..off + h, ..]).to_owned());
                    }
                    off += h;
                }
            }
            Op::SliceRows(from, to) => {
                let x = &node.inputs[0];
                if x.needs_grad() {
                    let (m, n) = x.shape();
                    let mut dx = Array2::zeros((m, n));
                    dx.slice_mut(s![*from..*to, ..]).assign(&grad);
                    x.accumulate_grad(&dx);
                }
            }
            Op::Sum => {
                let x = &node.inputs[0];
                if x.needs_grad() {
                    let g = grad[[0, 0]];
                    let (m, n) = x.shape();
                    x.accumulate_grad(&Array2::from_elem((m, n), g));
                }
            }
            Op::Mean => {
                let x = &node.inputs[0];
                if x.needs_grad() {
                    let (m, n) = x.shape();
                    let g = grad[[0, 0]] / (m * n) as f64;
                    x.accumulate_grad(&Array2::from_elem((m, n), g));
                }
            }
            Op::Square => {
                let x = &node.inputs[0];
                if x.needs_grad() {
                    let d = x.values().mapv(|v| 2.0 * v);
                    x.accumulate_grad(&(&grad * &d));
                }
            }
            Op::ScalarMul(c) => {
                let x = &node.inputs[0];
                if x.needs_grad() {
                    x.accumulate_grad(&grad.mapv(|v| c * v));
                }
            }
            Op::NormalizeRows(eps) => {
                let x = &node.inputs[0];
                if x.needs_grad() {
                    let xv = x.values();
                    let yv = node.output.values();
                    let mut dx = Array2::zeros(xv.dim());
                    for (i, xrow) in xv.rows().into_iter().enumerate() {
                        let norm = xrow.iter().map(|a| a * a).sum::<f64>().sqrt();
                        let grow = grad.row(i);
                        let mut drow = dx.row_mut(i);
                        if norm > *eps {
                            let yrow = yv.row(i);
                            let dot: f64 = yrow.iter().zip(grow.iter()).map(|(a, b)| a * b).sum();
                            for k in 0..drow.len() {
                                drow[k] = (grow[k] - yrow[k] * dot) / norm;
                            }
                        } else {
                            for k in 0..drow.len() {
                                drow[k] = grow[k] / eps;
                            }
                        }
                    }
                    drop(xv);
                    drop(yv);
                    x.accumulate_grad(&dx);
                }
            }
        }
    }
    tape.nodes.clear();
    Ok(())
}

/// Clears gradients of all listed tensors.
pub fn zero_grads(params: &[Tensor]) {
    for p in params {
        p.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn tanh_at_zero() {
        let mut tape = Tape::new();
        let x = Tensor::parameter(array![[0.0]]);
        let y = tape.tanh(&x).unwrap();
        assert_eq!(y.item(), 0.0);
        let loss = tape.sum(&y).unwrap();
        backward(&loss, &mut tape).unwrap();
        assert_eq!(x.grad_clone().unwrap()[[0, 0]], 1.0);
    }

    #[test]
    fn relu_negative_input() {
        let mut tape = Tape::new();
        let x = Tensor::parameter(array![[-2.0]]);
        let y = tape.relu(&x).unwrap();
        assert_eq!(y.item(), 0.0);
        let loss = tape.sum(&y).unwrap();
        backward(&loss, &mut tape).unwrap();
        assert_eq!(x.grad_clone().unwrap()[[0, 0]], 0.0);
    }

    #[test]
    fn sum_gradient_is_ones() {
        let mut tape = Tape::new();
        let x = Tensor::parameter(Array2::from_shape_fn((1, 5), |(_, j)| j as f64));
        let loss = tape.sum(&x).unwrap();
        backward(&loss, &mut tape).unwrap();
        assert_eq!(x.grad_clone().unwrap(), Array2::from_elem((1, 5), 1.0));
    }

    #[test]
    fn second_backward_fails() {
        let mut tape = Tape::new();
        let x = Tensor::parameter(array![[1.0]]);
        let loss = tape.square(&x).unwrap();
        backward(&loss, &mut tape).unwrap();
        let err = backward(&loss, &mut tape).unwrap_err();
        assert!(matches!(err, AutodiffError::TapeConsumed));
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::new();
        let x = Tensor::parameter(array![[1.0, 2.0]]);
        let y = tape.square(&x).unwrap();
        let err = backward(&y, &mut tape).unwrap_err();
        assert!(matches!(err, AutodiffError::NonScalarLoss));
    }

    #[test]
    fn matmul_shape_mismatch() {
        let mut tape = Tape::new();
        let a = Tensor::constant(Array2::zeros((2, 3)));
        let b = Tensor::constant(Array2::zeros((4, 1)));
        assert!(matches!(
            tape.matmul(&a, &b),
            Err(AutodiffError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn bias_broadcast_backward_sums_rows() {
        let mut tape = Tape::new();
        let a = Tensor::constant(Array2::zeros((3, 2)));
        let b = Tensor::parameter(array![[1.0, 2.0]]);
        let y = tape.add(&a, &b).unwrap();
        let loss = tape.sum(&y).unwrap();
        backward(&loss, &mut tape).unwrap();
        assert_eq!(b.grad_clone().unwrap(), array![[3.0, 3.0]]);
    }

    #[test]
    fn normalize_rows_unit_and_zero_vectors() {
        let mut tape = Tape::new();
        let x = Tensor::constant(array![[1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]);
        let y = tape.normalize_rows(&x, 1e-8).unwrap();
        assert_eq!(y.value_clone().row(0).to_vec(), vec![1.0, 0.0, 0.0]);
        assert_eq!(y.value_clone().row(1).to_vec(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut tape = Tape::new();
            let a = Tensor::constant(Array2::from_shape_fn((4, 6), |(i, j)| {
                ((i * 7 + j * 3) as f64).sin()
            }));
            let b = Tensor::constant(Array2::from_shape_fn((6, 5), |(i, j)| {
                ((i + 11 * j) as f64).cos()
            }));
            let c = tape.matmul(&a, &b).unwrap();
            let d = tape.tanh(&c).unwrap();
            d.value_clone()
        };
        assert_eq!(run(), run());
    }
}
