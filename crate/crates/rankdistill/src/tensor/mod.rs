//! Reverse-mode automatic differentiation on dense row-major f64 tensors.
//!
//! A [`Tape`] records every differentiable operation as a node holding one
//! vector-Jacobian-product closure per input. [`Tensor::backward`] walks the
//! recording in reverse topological order (node ids are creation-ordered, so a
//! reverse index scan is such an order) and accumulates gradients by addition,
//! which handles fan-out for free.
//!
//! Conventions:
//! - Scalars are tensors of shape `[1]`.
//! - Row-oriented operations (softmax, layer norm) treat the last axis as the
//!   row contents and flatten all leading axes into rows.
//! - Tensors are immutable value types; `data` is shared behind an `Rc`, so
//!   clones are cheap. Only [`Tensor::data_mut`] copies, and only when shared.
//! - A tensor participates in differentiation only after [`Tape::watch`] or
//!   when produced by an op with at least one tracked input. Plain tensors
//!   (e.g. a frozen teacher's activations) never accumulate gradient.

use std::cell::RefCell;
use std::fmt;
use std::rc::Rc;

use crate::error::{Error, Result};

pub mod gradcheck;
mod ops;

pub use ops::{concat_cols, concat_rows};

/// Vector-Jacobian product: maps the gradient at an op's output to the
/// gradient contribution for one of its inputs.
type Vjp = Box<dyn Fn(&[f64]) -> Vec<f64>>;

struct Edge {
    parent: usize,
    vjp: Vjp,
}

struct Node {
    edges: Vec<Edge>,
}

#[derive(Default)]
struct TapeInner {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

/// A gradient tape. Cloning produces another handle to the same recording.
#[derive(Clone, Default)]
pub struct Tape {
    inner: Rc<RefCell<TapeInner>>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Register `t` as a differentiable leaf of this tape. The returned tensor
    /// shares `t`'s storage; any graph `t` previously belonged to is ignored.
    pub fn watch(&self, t: &Tensor) -> Tensor {
        let id = {
            let mut inner = self.inner.borrow_mut();
            inner.nodes.push(Node { edges: Vec::new() });
            inner.grads.push(None);
            inner.nodes.len() - 1
        };
        Tensor {
            shape: t.shape.clone(),
            data: Rc::clone(&t.data),
            node: Some((self.clone(), id)),
        }
    }

    /// Number of recorded nodes (leaves included).
    pub fn num_nodes(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    fn push(&self, edges: Vec<Edge>) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { edges });
        inner.grads.push(None);
        inner.nodes.len() - 1
    }

    fn same(a: &Tape, b: &Tape) -> bool {
        Rc::ptr_eq(&a.inner, &b.inner)
    }
}

/// Dense row-major f64 tensor, optionally tracked on a [`Tape`].
#[derive(Clone)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Rc<Vec<f64>>,
    node: Option<(Tape, usize)>,
}

impl Tensor {
    /// Build a tensor from explicit shape and data. Every dimension must be
    /// nonzero and the data length must equal the shape product.
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape {
                op: "from_vec",
                shape,
                reason: "dimensions must be nonzero (scalars are shape [1])".into(),
            });
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidShape {
                op: "from_vec",
                shape,
                reason: format!("shape product {} != data length {}", numel, data.len()),
            });
        }
        Ok(Tensor {
            shape,
            data: Rc::new(data),
            node: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        Tensor::from_vec(shape, vec![0.0; numel])
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor {
            shape: vec![1],
            data: Rc::new(vec![v]),
            node: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access to the underlying storage, copying it first if shared.
    /// The result is detached: in-place edits never rewrite tape history.
    pub fn data_mut(&mut self) -> &mut Vec<f64> {
        self.node = None;
        Rc::make_mut(&mut self.data)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// Extract the value of a scalar tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::InvalidShape {
                op: "item",
                shape: self.shape.clone(),
                reason: "item() requires a scalar".into(),
            });
        }
        Ok(self.data[0])
    }

    /// The same values with no tape attachment.
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Rc::clone(&self.data),
            node: None,
        }
    }

    pub fn requires_grad(&self) -> bool {
        self.node.is_some()
    }

    /// Run reverse-mode differentiation from this scalar. Gradients of any
    /// previous backward pass on the same tape are discarded first.
    pub fn backward(&self) -> Result<()> {
        let (tape, loss_id) = match &self.node {
            Some((t, id)) => (t.clone(), *id),
            None => return Err(Error::NoTape),
        };
        if self.numel() != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.shape.clone(),
            });
        }
        let mut inner = tape.inner.borrow_mut();
        let n = inner.nodes.len();
        inner.grads = vec![None; n];
        inner.grads[loss_id] = Some(vec![1.0]);
        let TapeInner { nodes, grads } = &mut *inner;
        for i in (0..=loss_id).rev() {
            if nodes[i].edges.is_empty() {
                continue;
            }
            let gi = match &grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            for edge in &nodes[i].edges {
                let contrib = (edge.vjp)(&gi);
                match &mut grads[edge.parent] {
                    Some(acc) => {
                        debug_assert_eq!(acc.len(), contrib.len());
                        for (a, c) in acc.iter_mut().zip(&contrib) {
                            *a += c;
                        }
                    }
                    slot => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    /// Gradient accumulated by the most recent backward pass, if any reached
    /// this tensor.
    pub fn grad(&self) -> Option<Tensor> {
        let (tape, id) = self.node.as_ref()?;
        let inner = tape.inner.borrow();
        let g = inner.grads.get(*id)?.as_ref()?;
        Some(Tensor {
            shape: self.shape.clone(),
            data: Rc::new(g.clone()),
            node: None,
        })
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape)
            .field("tracked", &self.node.is_some())
            .field(
                "data",
                &if self.numel() <= 8 {
                    format!("{:?}", &self.data[..])
                } else {
                    format!("[{} values]", self.numel())
                },
            )
            .finish()
    }
}

/// Record the output of an op. `inputs` and `vjps` are index-aligned; edges
/// are kept only for tracked inputs. With no tracked input the output is a
/// plain tensor. Mixing tensors from two different tapes is an error.
pub(crate) fn record(
    shape: Vec<usize>,
    data: Vec<f64>,
    inputs: &[&Tensor],
    vjps: Vec<Vjp>,
) -> Result<Tensor> {
    debug_assert_eq!(inputs.len(), vjps.len());
    let mut tape: Option<&Tape> = None;
    for t in inputs {
        if let Some((tp, _)) = &t.node {
            match tape {
                None => tape = Some(tp),
                Some(existing) if Tape::same(existing, tp) => {}
                Some(_) => return Err(Error::TapeMismatch),
            }
        }
    }
    let node = tape.map(|tp| {
        let mut edges = Vec::new();
        for (t, vjp) in inputs.iter().zip(vjps) {
            if let Some((_, id)) = &t.node {
                edges.push(Edge { parent: *id, vjp });
            }
        }
        (tp.clone(), tp.push(edges))
    });
    Ok(Tensor {
        shape,
        data: Rc::new(data),
        node,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_validates_shape() {
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::from_vec(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_vec(vec![], vec![]).is_err());
        assert!(Tensor::from_vec(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn scalar_item_round_trip() {
        let s = Tensor::scalar(2.5);
        assert_eq!(s.shape(), &[1]);
        assert_eq!(s.item().unwrap(), 2.5);
        let m = Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(m.item().is_err());
    }

    #[test]
    fn backward_requires_tape_and_scalar() {
        let x = Tensor::scalar(1.0);
        assert!(matches!(x.backward(), Err(Error::NoTape)));

        let tape = Tape::new();
        let v = tape.watch(&Tensor::from_vec(vec![2], vec![1.0, 2.0]).unwrap());
        assert!(matches!(v.backward(), Err(Error::NonScalarLoss { .. })));
    }

    #[test]
    fn fan_out_accumulates() {
        // y = x*x + x*x has dy/dx = 4x.
        let tape = Tape::new();
        let x = tape.watch(&Tensor::scalar(3.0));
        let a = x.mul(&x).unwrap();
        let b = x.mul(&x).unwrap();
        let y = a.add(&b).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[12.0]);
    }

    #[test]
    fn diamond_graph_gradient() {
        // y = (x + x) * x = 2x^2, dy/dx = 4x.
        let tape = Tape::new();
        let x = tape.watch(&Tensor::scalar(1.5));
        let s = x.add(&x).unwrap();
        let y = s.mul(&x).unwrap();
        y.backward().unwrap();
        assert_eq!(x.grad().unwrap().data(), &[6.0]);
    }

    #[test]
    fn detach_blocks_gradient() {
        let tape = Tape::new();
        let x = tape.watch(&Tensor::scalar(2.0));
        let frozen = x.detach();
        let y = frozen.mul(&x).unwrap();
        y.backward().unwrap();
        // Only the live branch contributes: d(c*x)/dx = c.
        assert_eq!(x.grad().unwrap().data(), &[2.0]);
        assert!(frozen.grad().is_none());
    }

    #[test]
    fn untracked_inputs_produce_untracked_outputs() {
        let a = Tensor::scalar(1.0);
        let b = Tensor::scalar(2.0);
        let c = a.add(&b).unwrap();
        assert!(!c.requires_grad());
    }

    #[test]
    fn mixing_tapes_is_rejected() {
        let t1 = Tape::new();
        let t2 = Tape::new();
        let a = t1.watch(&Tensor::scalar(1.0));
        let b = t2.watch(&Tensor::scalar(2.0));
        assert!(matches!(a.add(&b), Err(Error::TapeMismatch)));
    }

    #[test]
    fn second_backward_resets_gradients() {
        let tape = Tape::new();
        let x = tape.watch(&Tensor::scalar(2.0));
        let y = x.mul(&x).unwrap();
        y.backward().unwrap();
        y.backward().unwrap();
        // Gradient is dy/dx = 2x once, not twice.
        assert_eq!(x.grad().unwrap().data(), &[4.0]);
    }

    #[test]
    fn unreached_leaf_has_no_grad() {
        let tape = Tape::new();
        let x = tape.watch(&Tensor::scalar(2.0));
        let unused = tape.watch(&Tensor::scalar(5.0));
        let y = x.mul(&x).unwrap();
        y.backward().unwrap();
        assert!(unused.grad().is_none());
    }

    #[test]
    fn data_mut_copies_shared_storage() {
        let a = Tensor::scalar(1.0);
        let mut b = a.clone();
        b.data_mut()[0] = 9.0;
        assert_eq!(a.item().unwrap(), 1.0);
        assert_eq!(b.item().unwrap(), 9.0);
    }
}
