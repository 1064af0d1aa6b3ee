use super::{Element, Tensor};
use crate::error::{Error, Result};
use std::cell::{Ref, RefCell};
use std::collections::{BTreeMap, HashMap};
use std::fmt;

/// What a backward rule sees when the sweep reaches its node.
pub(crate) struct BackwardCtx<'a, T> {
    /// dLoss/dOutput, same length as `out`.
    pub grad: &'a [T],
    pub out: &'a Tensor<T>,
    pub inputs: &'a [&'a Tensor<T>],
    /// Which inputs need a gradient; rules may return `None` for the rest.
    pub needs: &'a [bool],
}

/// Backward rule: one optional gradient per input, in input order.
pub(crate) type BackwardFn<T> = Box<dyn Fn(&BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>>>;

struct Node<T> {
    value: Tensor<T>,
    parents: Vec<usize>,
    backward: Option<BackwardFn<T>>,
    requires_grad: bool,
}

/// Records a computation graph for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and the backward sweep is a single reverse pass. A tape
/// built with [`Tape::no_grad`] keeps values only.
pub struct Tape<T: Element> {
    nodes: RefCell<Vec<Node<T>>>,
    named: RefCell<BTreeMap<String, usize>>,
    recording: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> fmt::Debug for Tape<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .field("recording", &self.recording)
            .finish()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, T: Element> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Element> fmt::Debug for Var<'_, T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            named: RefCell::new(BTreeMap::new()),
            recording: true,
        }
    }

    /// A tape that stores forward values but never records backward rules.
    pub fn no_grad() -> Self {
        Self {
            recording: false,
            ..Self::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Record an input. It participates in differentiation when the tensor's
    /// `requires_grad` flag is set.
    pub fn leaf(&self, tensor: Tensor<T>) -> Var<'_, T> {
        let rg = self.recording && tensor.requires_grad();
        self.push_node(tensor, Vec::new(), None, rg)
    }

    /// Record an input that always participates in differentiation.
    pub fn var(&self, tensor: Tensor<T>) -> Var<'_, T> {
        let rg = self.recording;
        self.push_node(tensor, Vec::new(), None, rg)
    }

    /// Record an input that is never differentiated.
    pub fn constant(&self, tensor: Tensor<T>) -> Var<'_, T> {
        self.push_node(tensor, Vec::new(), None, false)
    }

    /// Record a named parameter. Repeated calls with the same name return the
    /// same node, so a parameter used twice accumulates both contributions.
    pub fn param(&self, name: &str, tensor: &Tensor<T>) -> Var<'_, T> {
        if let Some(&id) = self.named.borrow().get(name) {
            return Var { tape: self, id };
        }
        let mut t = tensor.clone();
        t.set_grad(None).expect("clearing grad");
        let v = self.var(t);
        self.named.borrow_mut().insert(name.to_string(), v.id);
        v
    }

    /// Names of every parameter recorded so far.
    pub fn param_names(&self) -> Vec<String> {
        self.named.borrow().keys().cloned().collect()
    }

    pub(crate) fn value(&self, id: usize) -> Ref<'_, Tensor<T>> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    pub(crate) fn requires_grad(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    fn push_node(
        &self,
        value: Tensor<T>,
        parents: Vec<usize>,
        backward: Option<BackwardFn<T>>,
        requires_grad: bool,
    ) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            parents,
            backward,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Append the result of an operation. The backward rule is dropped when
    /// nothing upstream requires a gradient.
    pub(crate) fn push_op<F>(&self, value: Tensor<T>, parents: &[usize], backward: F) -> Var<'_, T>
    where
        F: Fn(&BackwardCtx<'_, T>) -> Vec<Option<Vec<T>>> + 'static,
    {
        let rg = self.recording && parents.iter().any(|&p| self.requires_grad(p));
        let bw: Option<BackwardFn<T>> = if rg { Some(Box::new(backward)) } else { None };
        self.push_node(value, parents.to_vec(), bw, rg)
    }

    /// Reverse sweep from `out`, returning the gradients of every node in
    /// `keep` (zeros for nodes the output does not depend on).
    fn sweep(&self, out: usize, keep: &[usize]) -> Result<HashMap<usize, Vec<T>>> {
        let nodes = self.nodes.borrow();
        if nodes[out].value.numel() != 1 {
            return Err(Error::invalid(format!(
                "gradient requested of non-scalar output with shape {:?}",
                nodes[out].value.shape()
            )));
        }
        let mut kept: HashMap<usize, Vec<T>> = HashMap::new();
        let mut grads: Vec<Option<Vec<T>>> = (0..=out).map(|_| None).collect();
        grads[out] = Some(vec![T::one()]);
        let keep_set: std::collections::HashSet<usize> = keep.iter().copied().collect();

        for id in (0..=out).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(bw) = &node.backward {
                let inputs: Vec<&Tensor<T>> = node.parents.iter().map(|&p| &nodes[p].value).collect();
                let needs: Vec<bool> = node.parents.iter().map(|&p| nodes[p].requires_grad).collect();
                let parent_grads = bw(&BackwardCtx {
                    grad: &g,
                    out: &node.value,
                    inputs: &inputs,
                    needs: &needs,
                });
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for ((&p, pg), &need) in node.parents.iter().zip(parent_grads).zip(&needs) {
                    let (Some(pg), true) = (pg, need) else { continue };
                    debug_assert_eq!(pg.len(), nodes[p].value.numel());
                    match &mut grads[p] {
                        Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += *b),
                        slot @ None => *slot = Some(pg),
                    }
                }
            }
            if keep_set.contains(&id) {
                kept.insert(id, g);
            }
        }
        Ok(kept)
    }

    /// Gradients of the scalar `output` with respect to each of `inputs`.
    /// Inputs the output does not depend on get a zero gradient.
    pub fn grad_of(&self, output: Var<'_, T>, inputs: &[Var<'_, T>]) -> Result<Vec<Tensor<T>>> {
        let ids: Vec<usize> = inputs.iter().map(|v| v.id).collect();
        let kept = self.sweep(output.id, &ids)?;
        Ok(ids
            .iter()
            .map(|&id| {
                let shape = self.value(id).shape().to_vec();
                let data = kept
                    .get(&id)
                    .cloned()
                    .unwrap_or_else(|| vec![T::zero(); super::numel(&shape)]);
                Tensor::new(&shape, data).expect("gradient shape")
            })
            .collect())
    }

    /// Gradients of `output` for every named parameter on the tape.
    pub fn param_grads(&self, output: Var<'_, T>) -> Result<BTreeMap<String, Vec<T>>> {
        let named = self.named.borrow().clone();
        let ids: Vec<usize> = named.values().copied().collect();
        let mut kept = self.sweep(output.id, &ids)?;
        Ok(named
            .into_iter()
            .map(|(name, id)| {
                let g = kept
                    .remove(&id)
                    .unwrap_or_else(|| vec![T::zero(); self.value(id).numel()]);
                (name, g)
            })
            .collect())
    }
}

impl<'t, T: Element> Var<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.value(self.id).shape().to_vec()
    }

    pub fn value(&self) -> Ref<'t, Tensor<T>> {
        self.tape.value(self.id)
    }

    /// Owned copy of the value.
    pub fn to_tensor(&self) -> Tensor<T> {
        self.value().clone()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.requires_grad(self.id)
    }

    pub(crate) fn same_tape(&self, other: &Var<'_, T>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::invalid("operands recorded on different tapes"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn non_scalar_output_rejected() {
        let tape = Tape::<f64>::new();
        let x = tape.var(Tensor::full(&[2], 1.0));
        let err = tape.grad_of(x, &[x]).unwrap_err();
        assert!(err.is_invalid_argument());
    }

    #[test]
    fn unreachable_input_gets_zero_gradient() {
        let tape = Tape::<f64>::new();
        let x = tape.var(Tensor::full(&[3], 2.0));
        let y = tape.var(Tensor::full(&[3], 5.0));
        let s = y.sum().unwrap();
        let g = tape.grad_of(s, &[x, y]).unwrap();
        assert_eq!(g[0].data(), &[0.0; 3]);
        assert_eq!(g[1].data(), &[1.0; 3]);
    }

    #[test]
    fn no_grad_tape_records_no_rules() {
        let tape = Tape::<f64>::no_grad();
        let x = tape.var(Tensor::full(&[3], 2.0));
        let s = x.mul(&x).unwrap().sum().unwrap();
        assert!(!s.requires_grad());
        assert_eq!(s.value().item(), 12.0);
    }

    #[test]
    fn param_dedup_accumulates() {
        let tape = Tape::<f64>::new();
        let w = Tensor::full(&[1], 3.0);
        let a = tape.param("w", &w);
        let b = tape.param("w", &w);
        assert_eq!(a.id(), b.id());
        let y = a.mul(&b).unwrap().sum().unwrap();
        let g = tape.param_grads(y).unwrap();
        assert_eq!(g["w"], vec![6.0]);
    }

    #[test]
    fn repeated_sweeps_identical() {
        let tape = Tape::<f64>::new();
        let x = tape.var(Tensor::from_fn(&[4], |i| i as f64 * 0.3 - 0.5));
        let y = x.sigmoid().unwrap().mul(&x).unwrap().sum().unwrap();
        let g1 = tape.grad_of(y, &[x]).unwrap();
        let g2 = tape.grad_of(y, &[x]).unwrap();
        assert_eq!(g1, g2);
    }
}
