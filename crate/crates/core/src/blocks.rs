//! Composite building blocks: squeeze-and-excitation, full pre-activation
//! residual block, plain double-conv stage, strided down-sampling,
//! transposed-conv up-sampling and the sigmoid gating junction.
//!
//! Every block has a `declare` function listing its layers (names, shapes,
//! initialization) and a typed parameter struct bound from tape leaves.
//! The model, the parameter ledger and the checkpoint loader all work from
//! the same declarations.

use std::collections::BTreeMap;

use crate::autodiff::{Mode, Padding, RunningStats, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Conv2d { cin: usize, cout: usize, kernel: usize },
    ConvTranspose2d { cin: usize, cout: usize, kernel: usize, stride: usize },
    BatchNorm { channels: usize },
    Dense { cin: usize, cout: usize },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Gaussian with standard deviation sqrt(2 / fan_in).
    He { fan_in: usize },
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerDecl {
    pub name: String,
    pub kind: LayerKind,
}

impl LayerDecl {
    fn new(name: impl Into<String>, kind: LayerKind) -> Self {
        LayerDecl {
            name: name.into(),
            kind,
        }
    }

    /// Trainable tensors of this layer.
    pub fn tensors(&self) -> Vec<TensorDecl> {
        let t = |suffix: &str, shape: Vec<usize>, init| TensorDecl {
            name: format!("{}/{suffix}", self.name),
            shape,
            init,
        };
        match self.kind {
            LayerKind::Conv2d { cin, cout, kernel } => vec![
                t("w", vec![cout, cin, kernel, kernel], Init::He { fan_in: cin * kernel * kernel }),
                t("b", vec![cout], Init::Zeros),
            ],
            LayerKind::ConvTranspose2d { cin, cout, kernel, stride } => {
                let taps = kernel.div_ceil(stride);
                vec![
                    t("w", vec![cin, cout, kernel, kernel], Init::He { fan_in: cin * taps * taps }),
                    t("b", vec![cout], Init::Zeros),
                ]
            }
            LayerKind::BatchNorm { channels } => vec![
                t("gamma", vec![channels], Init::Ones),
                t("beta", vec![channels], Init::Zeros),
            ],
            LayerKind::Dense { cin, cout } => vec![
                t("w", vec![cin, cout], Init::He { fan_in: cin }),
                t("b", vec![cout], Init::Zeros),
            ],
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.shape.iter().product::<usize>()).sum()
    }
}

impl TensorDecl {
    pub fn realize<T: Scalar>(&self, rng: &mut RngState) -> Tensor<T> {
        match self.init {
            Init::Zeros => Tensor::zeros(&self.shape),
            Init::Ones => Tensor::ones(&self.shape),
            Init::He { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                Tensor::from_fn(&self.shape, |_| T::lit(rng.normal() * std))
            }
        }
    }
}

/// State threaded through block forwards.
pub struct BlockCtx<'a, T> {
    pub tape: &'a mut Tape<T>,
    pub stats: &'a mut BTreeMap<String, RunningStats<T>>,
    pub mode: Mode,
    pub rng: &'a mut RngState,
}

/// Looks up leaves by hierarchical name.
pub trait Leaves<T> {
    fn leaf(&self, name: &str) -> Result<Var<T>>;
}

impl<T> Leaves<T> for BTreeMap<String, Var<T>> {
    fn leaf(&self, name: &str) -> Result<Var<T>> {
        self.get(name)
            .cloned()
            .ok_or_else(|| Error::Contract(format!("missing parameter '{name}'")))
    }
}

#[derive(Clone, Debug)]
pub struct ConvParams<T> {
    pub w: Var<T>,
    pub b: Var<T>,
}

impl<T: Scalar> ConvParams<T> {
    pub fn bind(leaves: &impl Leaves<T>, name: &str) -> Result<Self> {
        Ok(ConvParams {
            w: leaves.leaf(&format!("{name}/w"))?,
            b: leaves.leaf(&format!("{name}/b"))?,
        })
    }

    fn out_channels(&self) -> usize {
        self.b.shape()[0]
    }
}

pub type DenseParams<T> = ConvParams<T>;

#[derive(Clone, Debug)]
pub struct BnParams<T> {
    pub gamma: Var<T>,
    pub beta: Var<T>,
    /// Key of this layer's running statistics.
    pub key: String,
}

impl<T: Scalar> BnParams<T> {
    pub fn bind(leaves: &impl Leaves<T>, name: &str) -> Result<Self> {
        Ok(BnParams {
            gamma: leaves.leaf(&format!("{name}/gamma"))?,
            beta: leaves.leaf(&format!("{name}/beta"))?,
            key: name.to_string(),
        })
    }
}

impl<T: Scalar> BlockCtx<'_, T> {
    pub fn batchnorm(&mut self, x: &Var<T>, p: &BnParams<T>) -> Result<Var<T>> {
        let stats = self
            .stats
            .get_mut(&p.key)
            .ok_or_else(|| Error::Contract(format!("missing running statistics for '{}'", p.key)))?;
        self.tape
            .batchnorm2d(x, &p.gamma, &p.beta, stats, self.mode, T::lit(BN_EPS), T::lit(BN_MOMENTUM))
    }

    fn conv(&mut self, x: &Var<T>, p: &ConvParams<T>, stride: usize) -> Result<Var<T>> {
        self.tape.conv2d(x, &p.w, &p.b, stride, Padding::Same)
    }

    pub fn dropout(&mut self, x: &Var<T>, rate: f64) -> Result<Var<T>> {
        self.tape.dropout(x, rate, self.mode, self.rng)
    }
}

// ---------------------------------------------------------------------------
// Squeeze-and-excitation

#[derive(Clone, Debug)]
pub struct SEBlockParams<T> {
    pub reduce: DenseParams<T>,
    pub expand: DenseParams<T>,
}

pub fn se_hidden_width(channels: usize, ratio: usize) -> usize {
    (channels / ratio.max(1)).max(1)
}

impl<T: Scalar> SEBlockParams<T> {
    pub fn declare(name: &str, channels: usize, ratio: usize) -> Vec<LayerDecl> {
        let hidden = se_hidden_width(channels, ratio);
        vec![
            LayerDecl::new(format!("{name}/reduce"), LayerKind::Dense { cin: channels, cout: hidden }),
            LayerDecl::new(format!("{name}/expand"), LayerKind::Dense { cin: hidden, cout: channels }),
        ]
    }

    pub fn bind(leaves: &impl Leaves<T>, name: &str) -> Result<Self> {
        Ok(SEBlockParams {
            reduce: ConvParams::bind(leaves, &format!("{name}/reduce"))?,
            expand: ConvParams::bind(leaves, &format!("{name}/expand"))?,
        })
    }
}

/// `x · sigmoid(expand(relu(reduce(gap(x)))))`, one gate per channel.
pub fn se_block<T: Scalar>(tape: &mut Tape<T>, x: &Var<T>, p: &SEBlockParams<T>) -> Result<Var<T>> {
    let [_, c, _, _] = x.value().dims4("se_block")?;
    if p.reduce.w.shape()[0] != c || p.expand.b.shape() != [c] {
        return Err(Error::shape("se_block", x.shape(), p.reduce.w.shape()));
    }
    let squeezed = tape.global_avg_pool(x)?;
    let hidden = tape.dense(&squeezed, &p.reduce.w, &p.reduce.b)?;
    let hidden = tape.relu(&hidden);
    let logits = tape.dense(&hidden, &p.expand.w, &p.expand.b)?;
    let gates = tape.sigmoid(&logits);
    tape.mul(x, &gates)
}

// ---------------------------------------------------------------------------
// Full pre-activation residual block (no bottleneck)

#[derive(Clone, Debug)]
pub struct ResidualBlockParams<T> {
    pub bn1: BnParams<T>,
    pub conv1: ConvParams<T>,
    pub bn2: BnParams<T>,
    pub conv2: ConvParams<T>,
    /// 1×1 shortcut projection, present iff input and output widths differ.
    pub projection: Option<ConvParams<T>>,
}

impl<T: Scalar> ResidualBlockParams<T> {
    pub fn declare(name: &str, cin: usize, cout: usize) -> Vec<LayerDecl> {
        let mut layers = vec![
            LayerDecl::new(format!("{name}/bn1"), LayerKind::BatchNorm { channels: cin }),
            LayerDecl::new(format!("{name}/conv1"), LayerKind::Conv2d { cin, cout, kernel: 3 }),
            LayerDecl::new(format!("{name}/bn2"), LayerKind::BatchNorm { channels: cout }),
            LayerDecl::new(format!("{name}/conv2"), LayerKind::Conv2d { cin: cout, cout, kernel: 3 }),
        ];
        if cin != cout {
            layers.push(LayerDecl::new(
                format!("{name}/projection"),
                LayerKind::Conv2d { cin, cout, kernel: 1 },
            ));
        }
        layers
    }

    pub fn bind(leaves: &impl Leaves<T>, name: &str) -> Result<Self> {
        let conv1 = ConvParams::bind(leaves, &format!("{name}/conv1"))?;
        let cin = conv1.w.shape()[1];
        let cout = conv1.out_channels();
        Ok(ResidualBlockParams {
            bn1: BnParams::bind(leaves, &format!("{name}/bn1"))?,
            conv1,
            bn2: BnParams::bind(leaves, &format!("{name}/bn2"))?,
            conv2: ConvParams::bind(leaves, &format!("{name}/conv2"))?,
            projection: if cin != cout {
                Some(ConvParams::bind(leaves, &format!("{name}/projection"))?)
            } else {
                None
            },
        })
    }
}

/// `shortcut(x) + conv(relu(bn(conv(relu(bn(x))))))`.
pub fn preact_residual_block<T: Scalar>(ctx: &mut BlockCtx<'_, T>, x: &Var<T>, p: &ResidualBlockParams<T>) -> Result<Var<T>> {
    let [_, cin, _, _] = x.value().dims4("preact_residual_block")?;
    if p.bn1.gamma.shape() != [cin] {
        return Err(Error::shape("preact_residual_block", x.shape(), p.conv1.w.shape()));
    }
    if (cin != p.conv1.out_channels()) != p.projection.is_some() {
        return Err(Error::Contract(
            "residual projection must exist iff input and output widths differ".to_string(),
        ));
    }
    let h = ctx.batchnorm(x, &p.bn1)?;
    let h = ctx.tape.relu(&h);
    let h = ctx.conv(&h, &p.conv1, 1)?;
    let h = ctx.batchnorm(&h, &p.bn2)?;
    let h = ctx.tape.relu(&h);
    let residual = ctx.conv(&h, &p.conv2, 1)?;
    let shortcut = match &p.projection {
        Some(proj) => ctx.conv(x, proj, 1)?,
        None => x.clone(),
    };
    ctx.tape.add(&shortcut, &residual)
}

// ---------------------------------------------------------------------------
// Plain double-conv stage

#[derive(Clone, Debug)]
pub struct ConvStageParams<T> {
    pub conv1: ConvParams<T>,
    pub bn1: BnParams<T>,
    pub conv2: ConvParams<T>,
    pub bn2: BnParams<T>,
}

impl<T: Scalar> ConvStageParams<T> {
    pub fn declare(name: &str, cin: usize, cout: usize) -> Vec<LayerDecl> {
        vec![
            LayerDecl::new(format!("{name}/conv1"), LayerKind::Conv2d { cin, cout, kernel: 3 }),
            LayerDecl::new(format!("{name}/bn1"), LayerKind::BatchNorm { channels: cout }),
            LayerDecl::new(format!("{name}/conv2"), LayerKind::Conv2d { cin: cout, cout, kernel: 3 }),
            LayerDecl::new(format!("{name}/bn2"), LayerKind::BatchNorm { channels: cout }),
        ]
    }

    pub fn bind(leaves: &impl Leaves<T>, name: &str) -> Result<Self> {
        Ok(ConvStageParams {
            conv1: ConvParams::bind(leaves, &format!("{name}/conv1"))?,
            bn1: BnParams::bind(leaves, &format!("{name}/bn1"))?,
            conv2: ConvParams::bind(leaves, &format!("{name}/conv2"))?,
            bn2: BnParams::bind(leaves, &format!("{name}/bn2"))?,
        })
    }
}

pub struct ConvStageOutput<T> {
    pub output: Var<T>,
    /// Final normalized convolution output, before its ReLU.
    pub pre_activation: Var<T>,
}

/// conv3×3 → BN → ReLU → conv3×3 → BN → ReLU.
pub fn conv_stage<T: Scalar>(ctx: &mut BlockCtx<'_, T>, x: &Var<T>, p: &ConvStageParams<T>) -> Result<ConvStageOutput<T>> {
    let h = ctx.conv(x, &p.conv1, 1)?;
    let h = ctx.batchnorm(&h, &p.bn1)?;
    let h = ctx.tape.relu(&h);
    let h = ctx.conv(&h, &p.conv2, 1)?;
    let pre_activation = ctx.batchnorm(&h, &p.bn2)?;
    let output = ctx.tape.relu(&pre_activation);
    Ok(ConvStageOutput { output, pre_activation })
}

// ---------------------------------------------------------------------------
// Resolution changes

#[derive(Clone, Debug)]
pub struct SampleBlockParams<T> {
    pub conv: ConvParams<T>,
    pub bn: BnParams<T>,
}

impl<T: Scalar> SampleBlockParams<T> {
    pub fn declare_down(name: &str, cin: usize, cout: usize) -> Vec<LayerDecl> {
        vec![
            LayerDecl::new(format!("{name}/conv"), LayerKind::Conv2d { cin, cout, kernel: 3 }),
            LayerDecl::new(format!("{name}/bn"), LayerKind::BatchNorm { channels: cout }),
        ]
    }

    pub fn declare_up(name: &str, cin: usize, cout: usize) -> Vec<LayerDecl> {
        vec![
            LayerDecl::new(
                format!("{name}/conv"),
                LayerKind::ConvTranspose2d { cin, cout, kernel: 2, stride: 2 },
            ),
            LayerDecl::new(format!("{name}/bn"), LayerKind::BatchNorm { channels: cout }),
        ]
    }

    pub fn bind(leaves: &impl Leaves<T>, name: &str) -> Result<Self> {
        Ok(SampleBlockParams {
            conv: ConvParams::bind(leaves, &format!("{name}/conv"))?,
            bn: BnParams::bind(leaves, &format!("{name}/bn"))?,
        })
    }
}

/// 3×3 stride-2 convolution → BN → ReLU; halves height and width.
pub fn down_block<T: Scalar>(ctx: &mut BlockCtx<'_, T>, x: &Var<T>, p: &SampleBlockParams<T>) -> Result<Var<T>> {
    let [_, _, h, w] = x.value().dims4("down_block")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Geometry {
            op: "down_block",
            detail: format!("spatial dims {h}×{w} must be even"),
        });
    }
    let y = ctx.conv(x, &p.conv, 2)?;
    let y = ctx.batchnorm(&y, &p.bn)?;
    Ok(ctx.tape.relu(&y))
}

/// 2×2 stride-2 transposed convolution → BN → ReLU; doubles height and width.
pub fn up_block<T: Scalar>(ctx: &mut BlockCtx<'_, T>, x: &Var<T>, p: &SampleBlockParams<T>) -> Result<Var<T>> {
    let y = ctx.tape.conv2d_transpose(x, &p.conv.w, &p.conv.b, 2)?;
    let y = ctx.batchnorm(&y, &p.bn)?;
    Ok(ctx.tape.relu(&y))
}

// ---------------------------------------------------------------------------
// Gating junction

pub struct Gated<T> {
    pub output: Var<T>,
    pub gate: Var<T>,
}

/// `f · sigmoid(d)`, elementwise.
pub fn gated_multiply<T: Scalar>(tape: &mut Tape<T>, f: &Var<T>, d: &Var<T>) -> Result<Gated<T>> {
    if f.shape() != d.shape() {
        return Err(Error::shape("gated_multiply", f.shape(), d.shape()));
    }
    let gate = tape.sigmoid(d);
    let output = tape.mul(f, &gate)?;
    Ok(Gated { output, gate })
}

/// Draws every tensor declared by `layers`, plus running statistics for
/// each batch-norm layer.
pub fn realize<T: Scalar>(
    layers: &[LayerDecl],
    rng: &mut RngState,
) -> (BTreeMap<String, Tensor<T>>, BTreeMap<String, RunningStats<T>>) {
    let mut params = BTreeMap::new();
    let mut stats = BTreeMap::new();
    for layer in layers {
        for t in layer.tensors() {
            params.insert(t.name.clone(), t.realize(rng));
        }
        if let LayerKind::BatchNorm { channels } = layer.kind {
            stats.insert(layer.name.clone(), RunningStats::new(channels));
        }
    }
    (params, stats)
}
