//! Reverse-mode automatic differentiation over a fixed set of primitives.
//!
//! A [`Tape`] records every operation whose result depends on a parameter
//! leaf. Each node saves the context its backward rule needs at forward
//! time; [`Tape::backward`] replays nodes once, in reverse order. Values
//! that do not depend on any parameter are never recorded, and a tape built
//! with [`Tape::no_grad`] records nothing at all.

pub mod conv;
pub(crate) mod gradcheck;
mod ops;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub use conv::Padding;
pub use gradcheck::{finite_diff_check, GradCheckResult, ParamSet};
pub use ops::{Activation, BinaryKind, Mode, RunningStats};

const NO_NODE: usize = usize::MAX;

/// Handle to a value produced on a tape.
pub struct Var<T> {
    id: usize,
    value: Arc<Tensor<T>>,
}

impl<T> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var {
            id: self.id,
            value: Arc::clone(&self.value),
        }
    }
}

impl<T> Var<T> {
    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    pub fn shared(&self) -> Arc<Tensor<T>> {
        Arc::clone(&self.value)
    }

    pub fn requires_grad(&self) -> bool {
        self.id != NO_NODE
    }
}

impl<T: Scalar> Var<T> {
    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }
}

impl<T> fmt::Debug for Var<T>
where
    Tensor<T>: fmt::Debug,
{
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("value", &self.value)
            .finish()
    }
}

/// Identifies a primitive; used in gradient-check reports and for fault injection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum OpKind {
    Conv2d,
    ConvTranspose2d,
    Relu,
    Sigmoid,
    BatchNorm,
    GlobalAvgPool,
    Dense,
    Concat,
    Mul,
    Add,
    Dropout,
    Sum,
    DiceLoss,
}

impl OpKind {
    pub const ALL: [OpKind; 13] = [
        OpKind::Conv2d,
        OpKind::ConvTranspose2d,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::BatchNorm,
        OpKind::GlobalAvgPool,
        OpKind::Dense,
        OpKind::Concat,
        OpKind::Mul,
        OpKind::Add,
        OpKind::Dropout,
        OpKind::Sum,
        OpKind::DiceLoss,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Conv2d => "conv2d",
            OpKind::ConvTranspose2d => "conv2d_transpose",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::BatchNorm => "batchnorm2d",
            OpKind::GlobalAvgPool => "global_avg_pool",
            OpKind::Dense => "dense",
            OpKind::Concat => "concat_channels",
            OpKind::Mul => "mul",
            OpKind::Add => "add",
            OpKind::Dropout => "dropout",
            OpKind::Sum => "sum",
            OpKind::DiceLoss => "dice_loss",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

enum Op<T> {
    Leaf {
        name: String,
    },
    Conv2d {
        x: Arc<Tensor<T>>,
        w: Arc<Tensor<T>>,
        geom: conv::ConvGeom,
    },
    ConvTranspose2d {
        x: Arc<Tensor<T>>,
        w: Arc<Tensor<T>>,
        geom: conv::ConvGeom,
    },
    Relu {
        y: Arc<Tensor<T>>,
    },
    Sigmoid {
        y: Arc<Tensor<T>>,
    },
    BatchNorm {
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        gamma: Arc<Tensor<T>>,
        batch_stats: bool,
    },
    GlobalAvgPool {
        dims: [usize; 4],
    },
    Dense {
        x: Arc<Tensor<T>>,
        w: Arc<Tensor<T>>,
    },
    Concat {
        split: usize,
    },
    Mul {
        a: Arc<Tensor<T>>,
        b: Arc<Tensor<T>>,
    },
    Add,
    Dropout {
        mask: Vec<T>,
    },
    Sum,
    DiceLoss {
        prob: Arc<Tensor<T>>,
        gt: Arc<Tensor<T>>,
        loss: T,
        denom: T,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf { .. } => return None,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::ConvTranspose2d { .. } => OpKind::ConvTranspose2d,
            Op::Relu { .. } => OpKind::Relu,
            Op::Sigmoid { .. } => OpKind::Sigmoid,
            Op::BatchNorm { .. } => OpKind::BatchNorm,
            Op::GlobalAvgPool { .. } => OpKind::GlobalAvgPool,
            Op::Dense { .. } => OpKind::Dense,
            Op::Concat { .. } => OpKind::Concat,
            Op::Mul { .. } => OpKind::Mul,
            Op::Add => OpKind::Add,
            Op::Dropout { .. } => OpKind::Dropout,
            Op::Sum => OpKind::Sum,
            Op::DiceLoss { .. } => OpKind::DiceLoss,
        })
    }
}

struct Node<T> {
    op: Op<T>,
    /// Input node ids in operand order; `NO_NODE` for constant operands.
    inputs: Vec<usize>,
    /// Operand shapes, needed to size gradients of broadcast operands.
    input_shapes: Vec<Vec<usize>>,
    shape: Vec<usize>,
}

/// Gradients keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct GradientSet<T> {
    grads: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> GradientSet<T> {
    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn insert(&mut self, name: impl Into<String>, grad: Tensor<T>) {
        self.grads.insert(name.into(), grad);
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor<T>> {
        self.grads
    }
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0100_0000_01b3;

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    recording: bool,
    fault: Option<OpKind>,
    relu_margin: f64,
    relu_signature: u64,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: true,
            fault: None,
            relu_margin: f64::INFINITY,
            relu_signature: FNV_OFFSET,
        }
    }

    /// A tape that evaluates ops without recording anything.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            recording: false,
            fault: None,
            relu_margin: f64::INFINITY,
            relu_signature: FNV_OFFSET,
        }
    }

    /// Test hook: scales every input gradient produced by `kind`'s backward
    /// rule by 1.5, so gradient checks can prove they detect broken rules.
    pub fn with_fault(mut self, kind: OpKind) -> Self {
        self.fault = Some(kind);
        self
    }

    /// Smallest |input| seen by any ReLU evaluated on this tape.
    pub fn relu_margin(&self) -> f64 {
        self.relu_margin
    }

    /// Hash of the on/off pattern of every ReLU evaluated on this tape. Two
    /// evaluations with equal signatures took the same linear piece.
    pub fn relu_signature(&self) -> u64 {
        self.relu_signature
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers a named trainable leaf.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<T>) -> Var<T> {
        let value = Arc::new(value);
        if !self.recording {
            return Var { id: NO_NODE, value };
        }
        let shape = value.shape().to_vec();
        self.nodes.push(Node {
            op: Op::Leaf { name: name.into() },
            inputs: Vec::new(),
            input_shapes: Vec::new(),
            shape,
        });
        Var {
            id: self.nodes.len() - 1,
            value,
        }
    }

    /// A value that never receives a gradient.
    pub fn constant(&self, value: Tensor<T>) -> Var<T> {
        Var {
            id: NO_NODE,
            value: Arc::new(value),
        }
    }

    fn push(&mut self, op: Op<T>, inputs: &[&Var<T>], value: Tensor<T>) -> Var<T> {
        let value = Arc::new(value);
        if !self.recording || inputs.iter().all(|v| !v.requires_grad()) {
            return Var { id: NO_NODE, value };
        }
        self.nodes.push(Node {
            op,
            inputs: inputs.iter().map(|v| v.id).collect(),
            input_shapes: inputs.iter().map(|v| v.shape().to_vec()).collect(),
            shape: value.shape().to_vec(),
        });
        Var {
            id: self.nodes.len() - 1,
            value,
        }
    }

    /// Reverse-mode sweep from a scalar loss.
    ///
    /// Every parameter leaf registered on this tape appears in the result;
    /// leaves the loss does not depend on get zeros.
    pub fn backward(&self, loss: &Var<T>) -> Result<GradientSet<T>> {
        if loss.value().len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        if loss.requires_grad() && loss.id >= self.nodes.len() {
            return Err(Error::Contract(
                "loss was not produced on this tape".to_string(),
            ));
        }

        let mut grads: Vec<Option<Tensor<T>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        if loss.requires_grad() {
            grads[loss.id] = Some(Tensor::ones(loss.shape()));
        }

        let mut out = GradientSet::default();
        for id in (0..self.nodes.len()).rev() {
            let node = &self.nodes[id];
            if let Op::Leaf { name } = &node.op {
                let g = grads[id].take().unwrap_or_else(|| Tensor::zeros(&node.shape));
                match out.grads.get_mut(name) {
                    Some(existing) => existing.add_assign(&g),
                    None => {
                        out.grads.insert(name.clone(), g);
                    }
                }
                continue;
            }
            let Some(dy) = grads[id].take() else {
                continue;
            };
            let needs: Vec<bool> = node.inputs.iter().map(|&i| i != NO_NODE).collect();
            let mut input_grads = ops::backward_rule(node, &dy, &needs)?;
            if node.op.kind().is_some() && node.op.kind() == self.fault {
                for g in input_grads.iter_mut().flatten() {
                    *g = g.map(|v| v * T::lit(1.5));
                }
            }
            for ((&input, g), shape) in node.inputs.iter().zip(input_grads).zip(&node.input_shapes) {
                let (Some(g), true) = (g, input != NO_NODE) else {
                    continue;
                };
                debug_assert_eq!(g.shape(), &shape[..], "gradient shape for {:?}", node.op.kind());
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&g),
                    slot @ None => *slot = Some(g),
                }
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_gradient_is_input() {
        let mut tape = Tape::<f64>::new();
        let x = Tensor::new(&[3], vec![1.0, -2.0, 0.5]).unwrap();
        let w = tape.param("w", Tensor::new(&[3], vec![0.3, 0.1, -0.7]).unwrap());
        let xc = tape.constant(x.clone());
        let prod = tape.mul(&w, &xc).unwrap();
        let loss = tape.sum(&prod);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get("w").unwrap(), &x);
    }

    #[test]
    fn unreachable_parameter_gets_zeros() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param("w", Tensor::ones(&[2]));
        let _p = tape.param("p", Tensor::ones(&[2, 2]));
        let loss = tape.sum(&w);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get("p").unwrap(), &Tensor::zeros(&[2, 2]));
        assert_eq!(grads.get("w").unwrap(), &Tensor::ones(&[2]));
    }

    #[test]
    fn non_scalar_loss_is_contract_error() {
        let mut tape = Tape::<f64>::new();
        let w = tape.param("w", Tensor::ones(&[2]));
        assert!(matches!(tape.backward(&w), Err(Error::Contract(_))));
    }

    #[test]
    fn shared_input_accumulates() {
        // loss = sum(w * w) → grad 2w
        let mut tape = Tape::<f64>::new();
        let w = tape.param("w", Tensor::new(&[2], vec![3.0, -1.0]).unwrap());
        let sq = tape.mul(&w, &w).unwrap();
        let loss = tape.sum(&sq);
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get("w").unwrap().data(), &[6.0, -2.0]);
    }

    #[test]
    fn no_grad_tape_records_nothing() {
        let mut tape = Tape::<f32>::no_grad();
        let w = tape.param("w", Tensor::ones(&[4]));
        let y = tape.activation(&w, Activation::Sigmoid);
        assert!(tape.is_empty());
        assert!(!y.requires_grad());
    }

    #[test]
    fn replay_visits_nodes_in_topological_order() {
        let mut tape = Tape::<f64>::new();
        let a = tape.param("a", Tensor::ones(&[2]));
        let b = tape.activation(&a, Activation::Sigmoid);
        let c = tape.add(&a, &b).unwrap();
        let _ = tape.sum(&c);
        for (id, node) in tape.nodes.iter().enumerate() {
            assert!(node.inputs.iter().all(|&i| i == NO_NODE || i < id));
        }
    }
}
