//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Tensors are reference-counted graph nodes. Every op that touches a
//! grad-requiring input records its parents and a backward closure; calling
//! [`backward`] on a scalar loss walks the recorded graph in reverse creation
//! order (deterministic) and accumulates gradients into every reachable node
//! that asked for them. Double precision throughout.

mod checkpoint;
mod ops;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use ops::{attention, concat, embedding_lookup, positional_encoding};

use std::cell::RefCell;
use std::collections::HashSet;
use std::fmt;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

type BackwardFn = Box<dyn Fn(&[f64], &[Tensor])>;

struct Inner {
    id: u64,
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
    requires_grad: bool,
    needs_grad: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Dense n-dimensional array of f64, optionally participating in the tape.
#[derive(Clone)]
pub struct Tensor {
    inner: Rc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.inner.id)
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .finish()
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Tensor {
        Self::leaf(shape, data, false)
    }

    pub fn param(shape: &[usize], data: Vec<f64>) -> Tensor {
        Self::leaf(shape, data, true)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Self::new(shape, vec![0.0; shape.iter().product()])
    }

    pub fn scalar(v: f64) -> Tensor {
        Self::new(&[1], vec![v])
    }

    fn leaf(shape: &[usize], data: Vec<f64>, requires_grad: bool) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor leaf: shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape: shape.to_vec(),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad,
                needs_grad: requires_grad,
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    /// Graph-node constructor used by every op (including custom ops such as
    /// the CTC loss). The backward closure receives the output gradient and
    /// the parent list, and is responsible for accumulating into parents.
    pub(crate) fn from_op(shape: &[usize], data: Vec<f64>, parents: Vec<Tensor>, backward: BackwardFn) -> Tensor {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor op: shape {:?} does not match data length {}",
            shape,
            data.len()
        );
        let needs_grad = parents.iter().any(|p| p.inner.needs_grad);
        let (parents, backward) = if needs_grad {
            (parents, Some(backward))
        } else {
            (Vec::new(), None)
        };
        Tensor {
            inner: Rc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape: shape.to_vec(),
                data: RefCell::new(data),
                grad: RefCell::new(None),
                requires_grad: false,
                needs_grad,
                parents,
                backward: None,
            }),
        }
        .with_backward(backward)
    }

    fn with_backward(mut self, backward: Option<BackwardFn>) -> Tensor {
        if let Some(b) = backward {
            // Safe: the Rc was just created and has a single owner.
            let inner = Rc::get_mut(&mut self.inner).expect("fresh tensor node");
            inner.backward = Some(b);
        }
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn len(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn data(&self) -> Vec<f64> {
        self.inner.data.borrow().clone()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.len(), 1, "item() on non-scalar tensor {:?}", self.shape());
        self.inner.data.borrow()[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Overwrite the stored values (optimizer updates on parameters).
    pub fn set_data(&self, data: &[f64]) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), data.len(), "set_data length mismatch");
        d.copy_from_slice(data);
    }

    pub(crate) fn accum_grad(&self, g: &[f64]) {
        let mut slot = self.inner.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a += b;
                }
            }
            None => *slot = Some(g.to_vec()),
        }
    }

    fn needs_grad(&self) -> bool {
        self.inner.needs_grad
    }
}

/// Reverse-mode sweep from a scalar loss. Gradients accumulate additively
/// into every tape node reachable from `loss`; leaves created with
/// `requires_grad` keep theirs for the optimizer.
pub fn backward(loss: &Tensor) -> crate::Result<()> {
    if loss.len() != 1 {
        return Err(crate::Error::Shape {
            op: "backward",
            detail: format!("loss must be scalar, got {:?}", loss.shape()),
        });
    }
    if !loss.needs_grad() {
        return Err(crate::Error::Shape {
            op: "backward",
            detail: "loss is not connected to any grad-requiring tensor".into(),
        });
    }
    // Topological order by creation id: a node's id is always greater than
    // its parents', so descending id order is a valid reverse sweep.
    let mut nodes: Vec<Tensor> = Vec::new();
    let mut seen: HashSet<u64> = HashSet::new();
    let mut stack = vec![loss.clone()];
    while let Some(t) = stack.pop() {
        if !t.needs_grad() || !seen.insert(t.inner.id) {
            continue;
        }
        for p in &t.inner.parents {
            stack.push(p.clone());
        }
        nodes.push(t);
    }
    nodes.sort_by(|a, b| b.inner.id.cmp(&a.inner.id));

    loss.accum_grad(&[1.0]);
    for node in &nodes {
        let grad = match node.inner.grad.borrow().clone() {
            Some(g) => g,
            None => continue,
        };
        if let Some(back) = &node.inner.backward {
            back(&grad, &node.inner.parents);
        }
        // Intermediate buffers are not needed once propagated.
        if !node.inner.requires_grad && !Rc::ptr_eq(&node.inner, &loss.inner) {
            *node.inner.grad.borrow_mut() = None;
        }
    }
    Ok(())
}

/// Max relative error between the analytic gradient of `f` at `x` and a
/// central finite difference with step `eps`.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> crate::Result<f64>
where
    F: Fn(&Tensor) -> Tensor,
{
    assert!(eps > 0.0, "grad_check: eps must be positive");
    let loss = f(x);
    if loss.len() != 1 {
        return Err(crate::Error::Shape {
            op: "grad_check",
            detail: format!("f must be scalar-valued, got {:?}", loss.shape()),
        });
    }
    x.zero_grad();
    backward(&loss)?;
    let analytic = x
        .grad()
        .unwrap_or_else(|| vec![0.0; x.len()]);
    let mut max_err: f64 = 0.0;
    for i in 0..x.len() {
        let orig = x.inner.data.borrow()[i];
        x.inner.data.borrow_mut()[i] = orig + eps;
        let up = f(x).item();
        x.inner.data.borrow_mut()[i] = orig - eps;
        let down = f(x).item();
        x.inner.data.borrow_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(crate::Error::NonFinite("grad_check finite-difference probe".into()));
        }
        let fd = (up - down) / (2.0 * eps);
        let a = analytic[i];
        let err = (a - fd).abs() / f64::max(1.0, a.abs());
        max_err = max_err.max(err);
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        let w = Tensor::param(&[2], vec![1.0, 2.0]);
        let loss = w.hadamard(&w).sum_all();
        backward(&loss).unwrap();
        assert_eq!(w.grad().unwrap(), vec![2.0, 4.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let x = Tensor::param(&[1], vec![0.0]);
        let loss = x.sigmoid().sum_all();
        backward(&loss).unwrap();
        let g = x.grad().unwrap();
        assert!((g[0] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn gradients_accumulate_across_uses() {
        let x = Tensor::param(&[1], vec![3.0]);
        // loss = x + x  =>  dloss/dx = 2
        let loss = x.add(&x).sum_all();
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]);
        let y = x.relu();
        assert!(backward(&y).is_err());
    }

    #[test]
    fn grad_check_constant_gradient() {
        let x = Tensor::param(&[3], vec![0.3, -1.2, 2.0]);
        let err = grad_check(|x| x.sum_all(), &x, 1e-6).unwrap();
        assert!(err < 1e-9, "err={err}");
    }

    #[test]
    fn grad_check_relu_away_from_kink() {
        let x = Tensor::param(&[4], vec![0.7, -0.9, 1.3, -2.1]);
        let err = grad_check(|x| x.relu().sum_all(), &x, 1e-6).unwrap();
        assert!(err < 1e-6, "err={err}");
    }
}
