//! Reverse-mode differentiation tape.
//!
//! Every operation appends a node holding its forward value, the ids of its
//! inputs and (when any input needs a gradient) a [`Backward`] rule. A tape is
//! owned by one thread of execution; independent tapes are fully isolated.

use std::fmt;

use crate::error::{NdError, Result};
use crate::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Copy, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Debug for Var {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Var#{}", self.0)
    }
}

/// Local derivative rule of one recorded operation.
pub trait Backward<T: Real> {
    fn name(&self) -> &'static str;

    /// Vector-Jacobian product: given the gradient of the loss w.r.t. the
    /// output, return the gradient w.r.t. each input. Entries for which
    /// `needs[i]` is false may be `None`.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>>;
}

struct Node<T: Real> {
    value: Tensor<T>,
    inputs: Vec<Var>,
    rule: Option<Box<dyn Backward<T>>>,
    requires_grad: bool,
}

/// Multiply-accumulate counters for convolution-type operations.
#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct MacCount {
    pub conv2d: u64,
    pub conv3d: u64,
}

pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
    grad_enabled: bool,
    macs: MacCount,
    /// Hash of the branch taken by every piecewise op, when tracked.
    branches: Option<u64>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), grad_enabled: true, macs: MacCount::default(), branches: None }
    }

    /// A tape that records values only; no backward rules are kept.
    pub fn inference() -> Self {
        Self { grad_enabled: false, ..Self::new() }
    }

    /// Makes piecewise ops (ReLU) record which side of their kink each
    /// element lies on; see [`Tape::branch_signature`].
    pub fn tracking_branches(mut self) -> Self {
        self.branches = Some(0xcbf2_9ce4_8422_2325);
        self
    }

    /// Folds branch selections into the signature if tracking is on.
    pub fn note_branches(&mut self, sides: impl IntoIterator<Item = bool>) {
        if let Some(h) = self.branches.as_mut() {
            for side in sides {
                *h = (*h ^ side as u64 ^ 2).wrapping_mul(0x100_0000_01b3);
            }
        }
    }

    /// Identical signatures mean every piecewise op took the same branches.
    pub fn branch_signature(&self) -> Option<u64> {
        self.branches
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. `requires_grad` leaves receive gradients on backward.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(Node { value, inputs: Vec::new(), rule: None, requires_grad })
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn macs(&self) -> MacCount {
        self.macs
    }

    pub fn count_macs_2d(&mut self, n: u64) {
        self.macs.conv2d += n;
    }

    pub fn count_macs_3d(&mut self, n: u64) {
        self.macs.conv3d += n;
    }

    /// Records the result of an operation. Fails if `output` holds NaN/Inf.
    pub fn record(
        &mut self,
        op: &'static str,
        inputs: &[Var],
        output: Tensor<T>,
        rule: Box<dyn Backward<T>>,
    ) -> Result<Var> {
        if !output.all_finite() {
            return Err(NdError::NonFinite { op });
        }
        let requires_grad = self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let rule = if requires_grad { Some(rule) } else { None };
        Ok(self.push(Node { value: output, inputs: inputs.to_vec(), rule, requires_grad }))
    }

    fn push(&mut self, node: Node<T>) -> Var {
        self.nodes.push(node);
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// Propagates d(loss)/d(node) to every reachable leaf that requires a
    /// gradient. Leaf gradients accumulate across calls: running backward twice
    /// without [`Tape::zero_grad`] doubles them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(NdError::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut local: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        local[loss.0] = Some(Tensor::ones(self.nodes[loss.0].value.shape()));

        for i in (0..=loss.0).rev() {
            let Some(g) = local[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.rule {
                None => {
                    if node.inputs.is_empty() {
                        match &mut self.grads[i] {
                            Some(acc) => acc.add_assign(&g),
                            slot @ None => *slot = Some(g),
                        }
                    }
                }
                Some(rule) => {
                    let inputs: Vec<&Tensor<T>> =
                        node.inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                    let needs: Vec<bool> =
                        node.inputs.iter().map(|v| self.nodes[v.0].requires_grad).collect();
                    let input_grads = rule.backward(&inputs, &node.value, &g, &needs);
                    debug_assert_eq!(input_grads.len(), node.inputs.len(), "{}", rule.name());
                    for ((v, need), ig) in node.inputs.iter().zip(&needs).zip(input_grads) {
                        if !need {
                            continue;
                        }
                        let Some(ig) = ig else { continue };
                        debug_assert_eq!(
                            ig.shape(),
                            self.nodes[v.0].value.shape(),
                            "gradient shape from {}",
                            rule.name()
                        );
                        match &mut local[v.0] {
                            Some(acc) => acc.add_assign(&ig),
                            slot @ None => *slot = Some(ig),
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::ones(&[3]));
        assert!(matches!(tape.backward(x), Err(NdError::Usage(_))));
    }

    #[test]
    fn inference_tape_drops_rules() {
        let mut tape = Tape::<f64>::inference();
        let x = tape.param(Tensor::ones(&[3]));
        let y = crate::ops::sum(&mut tape, x).unwrap();
        assert!(!tape.requires_grad(y));
    }
}
