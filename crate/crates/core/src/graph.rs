//! Tape-based reverse-mode differentiation.
//!
//! Every op appends a node to the tape, so node order is already a
//! topological order and `backward` is a single reverse sweep. A [`Var`] is
//! a plain index into the tape that produced it.
//!
//! `detach` (stop-gradient) values are logged in call order. A graph built
//! with [`Graph::replaying`] substitutes the logged values instead, which
//! lets finite differences treat stop-gradient outputs as the constants
//! they are semantically.

use crate::error::{Error, Result};
use crate::ops::{backprop, Op};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub(crate) struct Node {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub op: Op,
    pub needs_grad: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DetachLog(pub Vec<Vec<f64>>);

#[derive(Default)]
pub struct Graph {
    pub(crate) nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    detached: DetachLog,
    replay: Option<(DetachLog, usize)>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose `detach` calls return the values recorded in `log`,
    /// in order, instead of the live input values.
    pub fn replaying(log: DetachLog) -> Self {
        Graph {
            replay: Some((log, 0)),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf; receives a gradient on `backward`.
    pub fn param(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, true)
    }

    /// Leaf that honours the tensor's own `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, t.requires_grad())
    }

    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf, false)
    }

    pub fn constant_from(&mut self, shape: &[usize], values: Vec<f64>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(Error::dim("constant", shape, &[values.len()]));
        }
        Ok(self.push(shape.to_vec(), values, Op::Leaf, false))
    }

    /// Stop-gradient: same forward value, no backward flow.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        let value = match &mut self.replay {
            Some((log, cursor)) => {
                let v = log.0.get(*cursor).cloned().ok_or_else(|| {
                    Error::Contract("detach replay log exhausted".into())
                })?;
                if v.len() != self.nodes[x.0].value.len() {
                    return Err(Error::dim("detach replay", &self.nodes[x.0].shape, &[v.len()]));
                }
                *cursor += 1;
                v
            }
            None => self.nodes[x.0].value.clone(),
        };
        self.detached.0.push(value.clone());
        let shape = self.nodes[x.0].shape.clone();
        Ok(self.push(shape, value, Op::Detach, false))
    }

    pub fn detach_log(&self) -> &DetachLog {
        &self.detached
    }

    pub fn take_detach_log(&mut self) -> DetachLog {
        std::mem::take(&mut self.detached)
    }

    pub fn shape(&self, x: Var) -> &[usize] {
        &self.nodes[x.0].shape
    }

    pub fn value(&self, x: Var) -> &[f64] {
        &self.nodes[x.0].value
    }

    pub fn scalar(&self, x: Var) -> f64 {
        self.nodes[x.0].value[0]
    }

    pub fn requires_grad(&self, x: Var) -> bool {
        self.nodes[x.0].needs_grad
    }

    /// Snapshot of a node as a [`Tensor`], with its gradient when one exists.
    pub fn tensor(&self, x: Var) -> Tensor {
        let node = &self.nodes[x.0];
        let mut t = Tensor::new(&node.shape, node.value.clone())
            .expect("graph nodes always hold consistent shapes")
            .with_requires_grad(node.needs_grad);
        if let Some(g) = self.grad(x) {
            t.set_grad(g.to_vec()).expect("gradient shape matches node");
        }
        t
    }

    pub fn grad(&self, x: Var) -> Option<&[f64]> {
        self.grads.get(x.0).and_then(|g| g.as_deref())
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar loss. Gradients accumulate additively
    /// over fan-out and can be read back with [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else { continue };
            backprop(&self.nodes, i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        self.grads = grads;
        Ok(())
    }
}
