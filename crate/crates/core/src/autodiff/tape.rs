use crate::error::{FdaError, Result};

use super::tensor::{Real, Tensor5};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Read access to node values while gradients are being propagated.
pub struct Values<'a, T> {
    nodes: &'a [Node<T>],
}

impl<T: Real> Values<'_, T> {
    pub fn get(&self, v: Var) -> &Tensor5<T> {
        &self.nodes[v.0].value
    }
}

/// The pullback of one recorded operation.
pub trait Backward<T: Real> {
    fn inputs(&self) -> Vec<Var>;

    /// Gradients for each input (in `inputs()` order). Entries whose `needs`
    /// flag is false may be `None`.
    fn backward(&self, values: &Values<'_, T>, output: &Tensor5<T>, grad: &[T], needs: &[bool])
        -> Vec<Option<Vec<T>>>;
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor5<T>,
    pub(crate) backward: Option<Box<dyn Backward<T>>>,
    pub(crate) requires_grad: bool,
}

/// Records operations in creation order, which is a topological order of the
/// computation DAG. Leaf gradients are kept after [`Tape::backward`];
/// intermediate gradients are dropped as soon as they have been propagated.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor5<T>>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor5<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, backward: None, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor5<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor5<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor5<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> [usize; 5] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an op result. The pullback is kept only when some input needs
    /// a gradient.
    pub fn push(&mut self, value: Tensor5<T>, backward: Box<dyn Backward<T>>) -> Var {
        let requires_grad = backward.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let backward = requires_grad.then_some(backward);
        self.nodes.push(Node { value, backward, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Gradient of the last `backward` call with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&Tensor5<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Populates `d(loss)/d(leaf)` for every leaf with `requires_grad`.
    /// Contributions along different paths are summed. Calling it again on
    /// the same tape recomputes the same gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let out_shape = self.nodes[loss.0].value.shape();
        if out_shape.iter().product::<usize>() != 1 {
            return Err(FdaError::Shape(format!("backward needs a scalar loss, got shape {out_shape:?}")));
        }
        let n = loss.0 + 1;
        let mut pending: Vec<Option<Vec<T>>> = (0..n).map(|_| None).collect();
        pending[loss.0] = Some(vec![T::one()]);
        self.grads = (0..self.nodes.len()).map(|_| None).collect();

        for i in (0..n).rev() {
            let Some(g) = pending[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(bw) = node.backward.as_ref() else {
                self.grads[i] = Some(Tensor5::new(node.value.shape(), g)?);
                continue;
            };
            let inputs = bw.inputs();
            let needs: Vec<bool> = inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
            let values = Values { nodes: &self.nodes };
            let input_grads = bw.backward(&values, &node.value, &g, &needs);
            for ((v, ig), need) in inputs.iter().zip(input_grads).zip(&needs) {
                let (true, Some(ig)) = (*need, ig) else { continue };
                match &mut pending[v.0] {
                    Some(acc) => acc.iter_mut().zip(&ig).for_each(|(a, b)| *a += *b),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(())
    }
}
