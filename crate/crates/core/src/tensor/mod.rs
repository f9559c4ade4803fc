//! Dense NCHW f64 tensors plus a recorded-operation tape for reverse-mode
//! gradients.
//!
//! Every differentiable op appends a node (inputs, output, backward closure)
//! to a [`Tape`]. [`Tape::backward`] seeds the scalar loss with 1.0 and
//! replays nodes in reverse, accumulating adjoints into each tensor's `grad`
//! buffer. Tensors are shared handles (`Rc`), so the tape keeps activations
//! alive until it is dropped.
//!
//! Ops can be tagged with a scope (`tape.scoped("enc/l0", ...)`) so a forward
//! pass can be audited op-by-op; this is how train-vs-inference cost claims
//! are checked rather than asserted.

mod ops;
mod optim;

pub use ops::*;
pub use optim::Sgd;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::BTreeMap;
use std::rc::Rc;

use crate::error::{CoreError, Result};

#[derive(Clone)]
pub struct Tensor {
    inner: Rc<TensorInner>,
}

struct TensorInner {
    shape: Vec<usize>,
    data: RefCell<Vec<f64>>,
    grad: RefCell<Option<Vec<f64>>>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], v: f64) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            inner: Rc::new(TensorInner {
                shape: shape.to_vec(),
                data: RefCell::new(vec![v; n]),
                grad: RefCell::new(None),
            }),
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::from_vec(&[1], vec![v]).unwrap()
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(CoreError::shape(format!(
                "shape {:?} wants {} elements, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(Tensor {
            inner: Rc::new(TensorInner {
                shape: shape.to_vec(),
                data: RefCell::new(data),
                grad: RefCell::new(None),
            }),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    /// Value of a 1-element tensor.
    pub fn value(&self) -> f64 {
        assert_eq!(self.numel(), 1, "value() needs a scalar tensor");
        self.inner.data.borrow()[0]
    }

    pub fn data(&self) -> Ref<'_, Vec<f64>> {
        self.inner.data.borrow()
    }

    pub fn data_mut(&self) -> RefMut<'_, Vec<f64>> {
        self.inner.data.borrow_mut()
    }

    pub fn set_data(&self, values: &[f64]) {
        let mut d = self.inner.data.borrow_mut();
        assert_eq!(d.len(), values.len(), "set_data length mismatch");
        d.copy_from_slice(values);
    }

    /// Cloned gradient, if one has been accumulated.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.borrow().clone()
    }

    pub(crate) fn grad_guard(&self) -> Ref<'_, Option<Vec<f64>>> {
        self.inner.grad.borrow()
    }

    pub fn has_grad(&self) -> bool {
        self.inner.grad.borrow().is_some()
    }

    pub fn clear_grad(&self) {
        *self.inner.grad.borrow_mut() = None;
    }

    /// Allocate a zero gradient buffer if none exists.
    pub fn ensure_grad(&self) {
        let mut g = self.inner.grad.borrow_mut();
        if g.is_none() {
            *g = Some(vec![0.0; self.numel()]);
        }
    }

    /// Mutate the gradient buffer (allocating zeros first if needed).
    pub fn with_grad_mut(&self, f: impl FnOnce(&mut [f64])) {
        self.ensure_grad();
        let mut g = self.inner.grad.borrow_mut();
        f(g.as_deref_mut().unwrap());
    }

    pub fn ptr_eq(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// (n, c, h, w) of a rank-4 tensor.
    pub fn dims4(&self) -> Result<(usize, usize, usize, usize)> {
        let s = self.shape();
        if s.len() != 4 {
            return Err(CoreError::shape(format!("expected rank-4 tensor, got {:?}", s)));
        }
        Ok((s[0], s[1], s[2], s[3]))
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Tensor{:?}", self.shape())
    }
}

struct Node {
    kind: &'static str,
    scope: String,
    inputs: Vec<Tensor>,
    output: Tensor,
    backward: Box<dyn Fn()>,
}

/// Records differentiable ops as they execute.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    scope_stack: RefCell<Vec<String>>,
    done: Cell<bool>,
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    /// Run `f` with `name` pushed onto the scope stack; ops recorded inside
    /// carry the joined scope path.
    pub fn scoped<R>(&self, name: impl Into<String>, f: impl FnOnce() -> R) -> R {
        self.scope_stack.borrow_mut().push(name.into());
        let r = f();
        self.scope_stack.borrow_mut().pop();
        r
    }

    fn current_scope(&self) -> String {
        self.scope_stack.borrow().join("/")
    }

    pub fn record(
        &self,
        kind: &'static str,
        inputs: Vec<Tensor>,
        output: Tensor,
        backward: impl Fn() + 'static,
    ) {
        self.nodes.borrow_mut().push(Node {
            kind,
            scope: self.current_scope(),
            inputs,
            output,
            backward: Box::new(backward),
        });
    }

    pub fn num_ops(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// Op count per scope path (empty path for unscoped ops).
    pub fn scope_counts(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for n in self.nodes.borrow().iter() {
            *out.entry(n.scope.clone()).or_insert(0) += 1;
        }
        out
    }

    /// `(scope, kind)` of every recorded op, in execution order.
    pub fn op_log(&self) -> Vec<(String, &'static str)> {
        self.nodes.borrow().iter().map(|n| (n.scope.clone(), n.kind)).collect()
    }

    /// Reverse-mode sweep from a scalar loss. Accumulates into existing
    /// gradient buffers (so parameter gradients sum across tapes until
    /// cleared). A tape can only be swept once.
    pub fn backward(&self, loss: &Tensor) -> Result<()> {
        if loss.numel() != 1 {
            return Err(CoreError::Grad(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        if self.done.replace(true) {
            return Err(CoreError::Grad("backward already ran on this tape".into()));
        }
        let nodes = self.nodes.borrow();
        for n in nodes.iter() {
            for t in &n.inputs {
                t.ensure_grad();
            }
            n.output.ensure_grad();
        }
        loss.with_grad_mut(|g| g[0] += 1.0);
        for n in nodes.iter().rev() {
            (n.backward)();
        }
        Ok(())
    }
}
