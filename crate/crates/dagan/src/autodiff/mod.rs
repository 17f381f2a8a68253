//! Reverse-mode automatic differentiation over `ndarray` arrays.
//!
//! Every value is an f64 tensor. Operations build a graph of reference-counted
//! nodes; calling [`Tensor::backward`] on a scalar walks the graph once in
//! reverse topological order and accumulates gradients into the leaves that
//! were created with [`Tensor::param`]. Parameters use interior mutability so
//! an optimizer can update them in place between iterations; each forward pass
//! rebuilds a fresh graph against the same leaves.

mod ops;

pub use ops::{
    bilinear_resize, concat_batch, concat_channels, conv2d, conv_transpose2d, global_avg_pool,
    global_max_pool, index_batch, linear, matmul, softmax_rows, transpose2d, Conv2dSpec,
};

use ndarray::{ArrayD, IxDyn};
use std::cell::{Cell, Ref, RefCell};
use std::collections::HashSet;
use std::rc::Rc;

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
    static NEXT_ID: Cell<u64> = const { Cell::new(1) };
}

fn next_id() -> u64 {
    NEXT_ID.with(|c| {
        let id = c.get();
        c.set(id + 1);
        id
    })
}

/// Runs `f` with graph recording disabled. Forward passes inside are plain
/// array math; nothing inside can be differentiated.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    let out = f();
    GRAD_ENABLED.with(|g| g.set(prev));
    out
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

/// Context handed to a backward function.
pub(crate) struct BackwardCtx<'a> {
    pub out_grad: &'a ArrayD<f64>,
    pub out_value: &'a ArrayD<f64>,
    pub parents: &'a [Tensor],
    /// Which parents actually need a gradient; expensive inputs can be skipped.
    pub needs: &'a [bool],
}

pub(crate) type BackwardFn = Box<dyn Fn(&BackwardCtx) -> Vec<Option<ArrayD<f64>>>>;

struct Op {
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Node {
    id: u64,
    value: RefCell<ArrayD<f64>>,
    grad: RefCell<Option<ArrayD<f64>>>,
    requires_grad: bool,
    op: Option<Op>,
}

/// A node in the autodiff graph. Cheap to clone (shared reference).
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl Tensor {
    /// Constant leaf: carries data, never receives a gradient.
    pub fn new(value: ArrayD<f64>) -> Tensor {
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                value: RefCell::new(value),
                grad: RefCell::new(None),
                requires_grad: false,
                op: None,
            }),
        }
    }

    /// Trainable leaf: gradient is accumulated here during backward.
    pub fn param(value: ArrayD<f64>) -> Tensor {
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                value: RefCell::new(value),
                grad: RefCell::new(None),
                requires_grad: true,
                op: None,
            }),
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new(ArrayD::from_elem(IxDyn(&[]), v))
    }

    pub(crate) fn from_op(value: ArrayD<f64>, parents: Vec<Tensor>, backward: BackwardFn) -> Tensor {
        let recording = grad_enabled() && parents.iter().any(|p| p.node.requires_grad);
        Tensor {
            node: Rc::new(Node {
                id: next_id(),
                value: RefCell::new(value),
                grad: RefCell::new(None),
                requires_grad: recording,
                op: if recording { Some(Op { parents, backward }) } else { None },
            }),
        }
    }

    pub fn value(&self) -> Ref<'_, ArrayD<f64>> {
        self.node.value.borrow()
    }

    pub fn to_array(&self) -> ArrayD<f64> {
        self.node.value.borrow().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.node.value.borrow().shape().to_vec()
    }

    pub fn len(&self) -> usize {
        self.node.value.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Scalar extraction; panics if the tensor has more than one element.
    pub fn item(&self) -> f64 {
        let v = self.node.value.borrow();
        assert_eq!(v.len(), 1, "item() on non-scalar tensor");
        *v.iter().next().unwrap()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    pub fn grad(&self) -> Option<ArrayD<f64>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    /// Overwrites a leaf's value in place. Only valid on leaves; interior
    /// nodes cache forward values and must never be mutated.
    pub fn assign(&self, value: ArrayD<f64>) {
        assert!(self.node.op.is_none(), "assign() is only valid on leaf tensors");
        assert_eq!(
            self.node.value.borrow().shape(),
            value.shape(),
            "assign() must preserve shape"
        );
        *self.node.value.borrow_mut() = value;
    }

    /// In-place update `value += delta` for optimizers.
    pub fn update_value(&self, f: impl FnOnce(&mut ArrayD<f64>)) {
        assert!(self.node.op.is_none(), "update_value() is only valid on leaf tensors");
        f(&mut self.node.value.borrow_mut());
    }

    /// A constant leaf sharing this tensor's current value; cuts the graph.
    pub fn detach(&self) -> Tensor {
        Tensor::new(self.to_array())
    }

    fn accumulate_grad(&self, g: ArrayD<f64>) {
        let mut slot = self.node.grad.borrow_mut();
        match slot.as_mut() {
            Some(acc) => *acc += &g,
            None => *slot = Some(g),
        }
    }

    /// Reverse pass from a scalar output. Gradients accumulate into every
    /// reachable leaf with `requires_grad`.
    pub fn backward(&self) {
        assert_eq!(self.len(), 1, "backward() requires a scalar output");
        // Iterative post-order topological sort over the subgraph that
        // requires gradients.
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        while let Some((t, child)) = stack.pop() {
            if child == 0 {
                if visited.contains(&t.node.id) {
                    continue;
                }
                visited.insert(t.node.id);
            }
            if let Some(op) = &t.node.op {
                if child < op.parents.len() {
                    let next = op.parents[child].clone();
                    stack.push((t, child + 1));
                    if next.node.requires_grad && !visited.contains(&next.node.id) {
                        stack.push((next, 0));
                    }
                    continue;
                }
            }
            order.push(t);
        }

        self.accumulate_grad(ArrayD::from_elem(self.value().raw_dim(), 1.0));

        for t in order.iter().rev() {
            let Some(op) = &t.node.op else { continue };
            let out_grad = match t.node.grad.borrow().clone() {
                Some(g) => g,
                None => continue, // no downstream contribution
            };
            let out_value = t.node.value.borrow();
            let needs: Vec<bool> = op.parents.iter().map(|p| p.node.requires_grad).collect();
            let ctx = BackwardCtx {
                out_grad: &out_grad,
                out_value: &out_value,
                parents: &op.parents,
                needs: &needs,
            };
            let parent_grads = (op.backward)(&ctx);
            drop(out_value);
            assert_eq!(parent_grads.len(), op.parents.len());
            for (p, g) in op.parents.iter().zip(parent_grads) {
                if let Some(g) = g {
                    if p.node.requires_grad {
                        debug_assert_eq!(g.shape(), p.node.value.borrow().shape());
                        p.accumulate_grad(g);
                    }
                }
            }
            // Interior gradients are not needed once consumed.
            if t.node.id != self.node.id {
                *t.node.grad.borrow_mut() = None;
            }
        }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn backward_accumulates_through_shared_nodes() {
        let x = Tensor::param(arr1(&[2.0, 3.0]).into_dyn());
        let y = x.mul(&x); // x^2
        let z = y.add(&x); // x^2 + x
        let loss = z.sum();
        loss.backward();
        let g = x.grad().unwrap();
        // d/dx (x^2 + x) = 2x + 1
        assert_eq!(g[[0]], 5.0);
        assert_eq!(g[[1]], 7.0);
    }

    #[test]
    fn no_grad_suppresses_graph() {
        let x = Tensor::param(arr1(&[1.0]).into_dyn());
        let y = no_grad(|| x.mul(&x));
        assert!(!y.requires_grad());
    }

    #[test]
    fn detach_cuts_graph() {
        let x = Tensor::param(arr1(&[4.0]).into_dyn());
        let y = x.mul(&x).detach();
        let loss = y.sum();
        assert!(!loss.requires_grad());
    }
}
