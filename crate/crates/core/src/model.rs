//! The two-branch gated-attention segmentation network.
//!
//! Branch one is a plain encoder-decoder whose per-level decoder outputs
//! `D_l` (taken before their final ReLU) become gates `σ(D_l)`. Branch two
//! is a residual/SE encoder-decoder; at every encoder level the output of
//! its first SE block `F_l` is multiplied by the gate of the same level:
//! `A_l = F_l · σ(D_l)`. A 1×1 convolution with sigmoid produces the
//! per-pixel probability map.
//!
//! Both branches use the same width schedule, so each gate lines up with
//! its junction without any projection.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use crate::autodiff::{Mode, RunningStats, Tape, Var};
use crate::blocks::{
    conv_stage, down_block, gated_multiply, preact_residual_block, realize, se_block, up_block, BlockCtx,
    ConvParams, ConvStageParams, LayerDecl, LayerKind, ResidualBlockParams, SEBlockParams, SampleBlockParams,
};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct ArchConfig {
    pub in_channels: usize,
    pub encoder_widths: Vec<usize>,
    pub bottleneck_width: usize,
    pub decoder_widths: Vec<usize>,
    pub se_ratio: usize,
    pub dropout_rate: f64,
    pub input_size: usize,
}

impl ArchConfig {
    /// 32 → 64 → 128 → 256 → 512 → 256 → 128 → 64, plus a width-32
    /// full-resolution decoder stage, on 256×256 RGB input.
    pub fn full_scale() -> Self {
        ArchConfig {
            in_channels: 3,
            encoder_widths: vec![32, 64, 128, 256],
            bottleneck_width: 512,
            decoder_widths: vec![256, 128, 64, 32],
            se_ratio: 8,
            dropout_rate: 0.2,
            input_size: 256,
        }
    }

    /// Desk-scale network: widths 4, 8 with a 16-wide bottleneck.
    pub fn tiny() -> Self {
        ArchConfig {
            in_channels: 1,
            encoder_widths: vec![4, 8],
            bottleneck_width: 16,
            decoder_widths: vec![8, 4],
            se_ratio: 8,
            dropout_rate: 0.2,
            input_size: 64,
        }
    }

    pub fn depth(&self) -> usize {
        self.encoder_widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.in_channels != 1 && self.in_channels != 3 {
            return fail(format!("in_channels must be 1 or 3, got {}", self.in_channels));
        }
        if self.encoder_widths.is_empty() {
            return fail("encoder_widths must not be empty".to_string());
        }
        if self.decoder_widths.len() != self.encoder_widths.len() {
            return fail(format!(
                "len(decoder_widths) = {} must equal len(encoder_widths) = {}",
                self.decoder_widths.len(),
                self.encoder_widths.len()
            ));
        }
        let widths = self.encoder_widths.iter().chain(&self.decoder_widths);
        if widths.chain([&self.bottleneck_width]).any(|&w| w == 0) {
            return fail("all widths must be positive".to_string());
        }
        let reversed: Vec<usize> = self.encoder_widths.iter().rev().copied().collect();
        if self.decoder_widths != reversed {
            return fail(format!(
                "decoder_widths {:?} must mirror encoder_widths {:?} so every gate aligns with its junction",
                self.decoder_widths, self.encoder_widths
            ));
        }
        if self.se_ratio == 0 {
            return fail("se_ratio must be positive".to_string());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return fail(format!("dropout_rate {} outside [0, 1)", self.dropout_rate));
        }
        let factor = 1usize << self.depth();
        if self.input_size == 0 || !self.input_size.is_multiple_of(factor) {
            return fail(format!(
                "input_size {} must be a positive multiple of 2^{} = {factor}",
                self.input_size,
                self.depth()
            ));
        }
        Ok(())
    }

    /// Width of the decoder stage that runs at level `l` (0 = full resolution).
    pub fn decoder_width_at(&self, level: usize) -> usize {
        self.decoder_widths[self.depth() - 1 - level]
    }

    fn encoder_input_width(&self, level: usize) -> usize {
        if level == 0 {
            self.in_channels
        } else {
            self.encoder_widths[level]
        }
    }

    fn down_width(&self, level: usize) -> usize {
        self.encoder_widths.get(level + 1).copied().unwrap_or(self.bottleneck_width)
    }

    fn decoder_input_width(&self, level: usize) -> usize {
        if level + 1 == self.depth() {
            self.bottleneck_width
        } else {
            self.decoder_width_at(level + 1)
        }
    }

    /// Every layer of both branches, in forward order.
    pub fn layers(&self) -> Vec<LayerDecl> {
        let depth = self.depth();
        let mut out = Vec::new();

        for l in 0..depth {
            out.extend(ConvStageParams::<f32>::declare(
                &format!("att/enc{l}"),
                self.encoder_input_width(l),
                self.encoder_widths[l],
            ));
            out.extend(SampleBlockParams::<f32>::declare_down(
                &format!("att/down{l}"),
                self.encoder_widths[l],
                self.down_width(l),
            ));
        }
        out.extend(ConvStageParams::<f32>::declare(
            "att/bottleneck",
            self.bottleneck_width,
            self.bottleneck_width,
        ));
        for l in (0..depth).rev() {
            let w = self.decoder_width_at(l);
            out.extend(SampleBlockParams::<f32>::declare_up(
                &format!("att/dec{l}/up"),
                self.decoder_input_width(l),
                w,
            ));
            out.extend(ConvStageParams::<f32>::declare(
                &format!("att/dec{l}/stage"),
                self.encoder_widths[l] + w,
                w,
            ));
        }

        for l in 0..depth {
            let w = self.encoder_widths[l];
            out.extend(ResidualBlockParams::<f32>::declare(
                &format!("seg/enc{l}/res1"),
                self.encoder_input_width(l),
                w,
            ));
            out.extend(SEBlockParams::<f32>::declare(&format!("seg/enc{l}/se1"), w, self.se_ratio));
            out.extend(ResidualBlockParams::<f32>::declare(&format!("seg/enc{l}/res2"), w, w));
            out.extend(SEBlockParams::<f32>::declare(&format!("seg/enc{l}/se2"), w, self.se_ratio));
            out.extend(SampleBlockParams::<f32>::declare_down(
                &format!("seg/enc{l}/down"),
                w,
                self.down_width(l),
            ));
        }
        let b = self.bottleneck_width;
        out.extend(ResidualBlockParams::<f32>::declare("seg/bottleneck/res", b, b));
        out.extend(SEBlockParams::<f32>::declare("seg/bottleneck/se", b, self.se_ratio));
        for l in (0..depth).rev() {
            let w = self.decoder_width_at(l);
            out.extend(SampleBlockParams::<f32>::declare_up(
                &format!("seg/dec{l}/up"),
                self.decoder_input_width(l),
                w,
            ));
            out.extend(ResidualBlockParams::<f32>::declare(
                &format!("seg/dec{l}/res"),
                self.encoder_widths[l] + w,
                w,
            ));
            out.extend(SEBlockParams::<f32>::declare(&format!("seg/dec{l}/se"), w, self.se_ratio));
        }
        out.push(LayerDecl {
            name: "head".to_string(),
            kind: LayerKind::Conv2d {
                cin: self.decoder_width_at(0),
                cout: 1,
                kernel: 1,
            },
        });
        out
    }

    /// Shapes (C, H, W) on both sides of each gating junction.
    pub fn gate_junctions(&self) -> Vec<GateJunction> {
        (0..self.depth())
            .map(|l| {
                let s = self.input_size >> l;
                GateJunction {
                    level: l,
                    gate: [self.decoder_width_at(l), s, s],
                    features: [self.encoder_widths[l], s, s],
                }
            })
            .collect()
    }

    /// `key = value` lines; the inverse of [`ArchConfig::from_text`].
    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "in_channels = {}\nencoder_widths = {}\nbottleneck_width = {}\ndecoder_widths = {}\nse_ratio = {}\ndropout_rate = {}\ninput_size = {}\n",
            self.in_channels,
            list(&self.encoder_widths),
            self.bottleneck_width,
            list(&self.decoder_widths),
            self.se_ratio,
            self.dropout_rate,
            self.input_size
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = ArchConfig::tiny();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected key = value, got '{line}'")))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one field from its textual form. Returns an error for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "in_channels" => self.in_channels = parse(key, value)?,
            "encoder_widths" => self.encoder_widths = parse_list(key, value)?,
            "bottleneck_width" => self.bottleneck_width = parse(key, value)?,
            "decoder_widths" => self.decoder_widths = parse_list(key, value)?,
            "se_ratio" => self.se_ratio = parse(key, value)?,
            "dropout_rate" => self.dropout_rate = parse(key, value)?,
            "input_size" => self.input_size = parse(key, value)?,
            _ => return Err(Error::Config(format!("unknown architecture key '{key}'"))),
        }
        Ok(())
    }

    pub const KEYS: [&'static str; 7] = [
        "in_channels",
        "encoder_widths",
        "bottleneck_width",
        "decoder_widths",
        "se_ratio",
        "dropout_rate",
        "input_size",
    ];
}

pub(crate) fn parse<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value '{value}' for '{key}'")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|v| parse(key, v.trim())).collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GateJunction {
    pub level: usize,
    pub gate: [usize; 3],
    pub features: [usize; 3],
}

impl GateJunction {
    pub fn aligned(&self) -> bool {
        self.gate == self.features
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamLedger {
    pub total: usize,
    pub layers: Vec<(String, usize)>,
}

impl fmt::Display for ParamLedger {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (name, count) in &self.layers {
            writeln!(f, "{name:<32} {count:>12}")?;
        }
        write!(f, "{:<32} {:>12}", "total", self.total)
    }
}

/// Trainable parameter count from declared shapes; allocates no tensors.
pub fn param_count(cfg: &ArchConfig) -> Result<ParamLedger> {
    cfg.validate()?;
    let layers: Vec<(String, usize)> = cfg.layers().into_iter().map(|l| (l.name.clone(), l.param_count())).collect();
    Ok(ParamLedger {
        total: layers.iter().map(|(_, c)| c).sum(),
        layers,
    })
}

/// How the segmentation branch consumes the attention gates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GateMode {
    #[default]
    Learned,
    /// Multiply by a constant 1 instead of `σ(D_l)`.
    ConstantOne,
    /// Bypass the junction entirely.
    Skip,
}

#[derive(Clone, Debug)]
pub struct LevelTrace<T> {
    /// Attention-encoder output `E_l`.
    pub encoder: Arc<Tensor<T>>,
    /// Attention-decoder output `D_l`, before its ReLU.
    pub decoder: Arc<Tensor<T>>,
    /// `σ(D_l)`.
    pub gate: Arc<Tensor<T>>,
    /// Segmentation features `F_l` entering the junction.
    pub features: Arc<Tensor<T>>,
    /// Gated output `A_l`.
    pub gated: Arc<Tensor<T>>,
}

#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    pub levels: Vec<LevelTrace<T>>,
    pub prob: Arc<Tensor<T>>,
}

pub struct ForwardOutput<T> {
    pub prob: Var<T>,
    pub trace: ForwardTrace<T>,
    /// Batch-norm running statistics after this pass (unchanged in eval mode).
    pub stats: BTreeMap<String, RunningStats<T>>,
}

/// Named parameter tensors and batch-norm statistics realized from an [`ArchConfig`].
#[derive(Clone, Debug, PartialEq)]
pub struct FocusNetParams<T> {
    pub arch: ArchConfig,
    pub params: BTreeMap<String, Tensor<T>>,
    pub stats: BTreeMap<String, RunningStats<T>>,
}

impl<T: Scalar> FocusNetParams<T> {
    /// He-initialized weights, zero biases and betas, unit gammas.
    pub fn build(cfg: &ArchConfig, rng: &mut RngState) -> Result<Self> {
        cfg.validate()?;
        let junctions = cfg.gate_junctions();
        if let Some(j) = junctions.iter().find(|j| !j.aligned()) {
            return Err(Error::Config(format!(
                "gate at level {} has shape {:?} but its junction expects {:?}",
                j.level, j.gate, j.features
            )));
        }
        let (params, stats) = realize(&cfg.layers(), rng);
        Ok(FocusNetParams {
            arch: cfg.clone(),
            params,
            stats,
        })
    }

    /// A zero-filled parameter set with the right names and shapes.
    pub fn skeleton(cfg: &ArchConfig) -> Result<Self> {
        cfg.validate()?;
        let mut params = BTreeMap::new();
        let mut stats = BTreeMap::new();
        for layer in cfg.layers() {
            for t in layer.tensors() {
                params.insert(t.name, Tensor::zeros(&t.shape));
            }
            if let LayerKind::BatchNorm { channels } = layer.kind {
                stats.insert(layer.name, RunningStats::new(channels));
            }
        }
        Ok(FocusNetParams {
            arch: cfg.clone(),
            params,
            stats,
        })
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    pub fn cast<U: Scalar>(&self) -> FocusNetParams<U> {
        FocusNetParams {
            arch: self.arch.clone(),
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            stats: self
                .stats
                .iter()
                .map(|(k, s)| {
                    (
                        k.clone(),
                        RunningStats {
                            mean: s.mean.cast(),
                            var: s.var.cast(),
                        },
                    )
                })
                .collect(),
        }
    }

    /// Registers every parameter on `tape` as a named leaf.
    pub fn leaves(&self, tape: &mut Tape<T>) -> BTreeMap<String, Var<T>> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), tape.param(k.clone(), v.clone())))
            .collect()
    }

    /// Full forward pass. Parameters are registered on `tape` as leaves.
    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        x: &Tensor<T>,
        mode: Mode,
        rng: &mut RngState,
        gates: GateMode,
    ) -> Result<ForwardOutput<T>> {
        let leaves = self.leaves(tape);
        let mut stats = self.stats.clone();
        let (prob, trace) = forward_with(&self.arch, tape, &leaves, &mut stats, x, mode, rng, gates)?;
        Ok(ForwardOutput { prob, trace, stats })
    }

    /// Eval-mode probabilities without recording gradients.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::no_grad();
        let out = self.forward(&mut tape, x, Mode::Eval, &mut RngState::new(0), GateMode::Learned)?;
        Ok(Arc::unwrap_or_clone(out.prob.shared()))
    }
}

/// Forward pass over caller-supplied leaves; `stats` is updated in train mode.
#[allow(clippy::too_many_arguments)]
pub fn forward_with<T: Scalar>(
    arch: &ArchConfig,
    tape: &mut Tape<T>,
    leaves: &BTreeMap<String, Var<T>>,
    stats: &mut BTreeMap<String, RunningStats<T>>,
    x: &Tensor<T>,
    mode: Mode,
    rng: &mut RngState,
    gates: GateMode,
) -> Result<(Var<T>, ForwardTrace<T>)> {
    let x = tape.constant(x.clone());
    let mut ctx = BlockCtx { tape, stats, mode, rng };
    forward_graph(arch, leaves, &mut ctx, &x, gates)
}

fn forward_graph<T: Scalar>(
    arch: &ArchConfig,
    leaves: &BTreeMap<String, Var<T>>,
    ctx: &mut BlockCtx<'_, T>,
    x: &Var<T>,
    gate_mode: GateMode,
) -> Result<(Var<T>, ForwardTrace<T>)> {
    let [_, c, h, w] = x.value().dims4("forward").map_err(|e| e.in_stage("input"))?;
    if c != arch.in_channels || h != arch.input_size || w != arch.input_size {
        return Err(Error::shape(
            "forward",
            x.shape(),
            &[x.shape()[0], arch.in_channels, arch.input_size, arch.input_size],
        )
        .in_stage("input"));
    }
    let depth = arch.depth();
    let dropout = arch.dropout_rate;

    // Attention branch: encoder (E_l) then skip-concatenated decoder (D_l).
    let mut h = x.clone();
    let mut enc = Vec::with_capacity(depth);
    for l in 0..depth {
        let stage = format!("att/enc{l}");
        let e = conv_stage(ctx, &h, &ConvStageParams::bind(leaves, &stage)?)
            .map_err(|e| e.in_stage(&stage))?
            .output;
        let down = format!("att/down{l}");
        h = down_block(ctx, &e, &SampleBlockParams::bind(leaves, &down)?).map_err(|e| e.in_stage(&down))?;
        enc.push(e);
    }
    h = conv_stage(ctx, &h, &ConvStageParams::bind(leaves, "att/bottleneck")?)
        .map_err(|e| e.in_stage("att/bottleneck"))?
        .output;
    let mut dec: Vec<Option<Var<T>>> = vec![None; depth];
    for l in (0..depth).rev() {
        let stage = format!("att/dec{l}");
        let run = |ctx: &mut BlockCtx<'_, T>, h: &Var<T>| -> Result<_> {
            let up = up_block(ctx, h, &SampleBlockParams::bind(leaves, &format!("{stage}/up"))?)?;
            let cat = ctx.tape.concat_channels(&enc[l], &up)?;
            conv_stage(ctx, &cat, &ConvStageParams::bind(leaves, &format!("{stage}/stage"))?)
        };
        let out = run(ctx, &h).map_err(|e| e.in_stage(&stage))?;
        dec[l] = Some(out.pre_activation);
        h = out.output;
    }

    // Segmentation branch with A_l = F_l · σ(D_l) after the first SE block.
    let mut levels = Vec::with_capacity(depth);
    let mut skips = Vec::with_capacity(depth);
    let mut h = x.clone();
    for l in 0..depth {
        let stage = format!("seg/enc{l}");
        let d = dec[l].take().expect("decoder output per level");
        let mut run = |ctx: &mut BlockCtx<'_, T>, h: &Var<T>| -> Result<_> {
            let r = preact_residual_block(ctx, h, &ResidualBlockParams::bind(leaves, &format!("{stage}/res1"))?)?;
            let f = se_block(ctx.tape, &r, &SEBlockParams::bind(leaves, &format!("{stage}/se1"))?)?;
            if d.shape() != f.shape() {
                return Err(Error::Geometry {
                    op: "gate junction",
                    detail: format!("gate {:?} does not align with features {:?}", d.shape(), f.shape()),
                });
            }
            let gated = gated_multiply(ctx.tape, &f, &d)?;
            let a = match gate_mode {
                GateMode::Learned => gated.output.clone(),
                GateMode::ConstantOne => {
                    let ones = ctx.tape.constant(Tensor::ones(f.shape()));
                    ctx.tape.mul(&f, &ones)?
                }
                GateMode::Skip => f.clone(),
            };
            levels.push(LevelTrace {
                encoder: enc[l].shared(),
                decoder: d.shared(),
                gate: gated.gate.shared(),
                features: f.shared(),
                gated: a.shared(),
            });
            let r = preact_residual_block(ctx, &a, &ResidualBlockParams::bind(leaves, &format!("{stage}/res2"))?)?;
            let s = se_block(ctx.tape, &r, &SEBlockParams::bind(leaves, &format!("{stage}/se2"))?)?;
            let s = ctx.dropout(&s, dropout)?;
            let down = down_block(ctx, &s, &SampleBlockParams::bind(leaves, &format!("{stage}/down"))?)?;
            Ok((s, down))
        };
        let (skip, down) = run(ctx, &h).map_err(|e| e.in_stage(&stage))?;
        skips.push(skip);
        h = down;
    }
    {
        let run = |ctx: &mut BlockCtx<'_, T>| -> Result<_> {
            let r = preact_residual_block(ctx, &h, &ResidualBlockParams::bind(leaves, "seg/bottleneck/res")?)?;
            let s = se_block(ctx.tape, &r, &SEBlockParams::bind(leaves, "seg/bottleneck/se")?)?;
            ctx.dropout(&s, dropout)
        };
        h = run(ctx).map_err(|e| e.in_stage("seg/bottleneck"))?;
    }
    for l in (0..depth).rev() {
        let stage = format!("seg/dec{l}");
        let run = |ctx: &mut BlockCtx<'_, T>, h: &Var<T>| -> Result<_> {
            let up = up_block(ctx, h, &SampleBlockParams::bind(leaves, &format!("{stage}/up"))?)?;
            let cat = ctx.tape.concat_channels(&skips[l], &up)?;
            let r = preact_residual_block(ctx, &cat, &ResidualBlockParams::bind(leaves, &format!("{stage}/res"))?)?;
            let s = se_block(ctx.tape, &r, &SEBlockParams::bind(leaves, &format!("{stage}/se"))?)?;
            ctx.dropout(&s, dropout)
        };
        h = run(ctx, &h).map_err(|e| e.in_stage(&stage))?;
    }
    let head = ConvParams::bind(leaves, "head")?;
    let logits = ctx
        .tape
        .conv2d(&h, &head.w, &head.b, 1, crate::autodiff::Padding::Same)
        .map_err(|e| e.in_stage("head"))?;
    let prob = ctx.tape.sigmoid(&logits);
    let trace = ForwardTrace {
        levels,
        prob: prob.shared(),
    };
    Ok((prob, trace))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn micro() -> ArchConfig {
        ArchConfig {
            in_channels: 1,
            encoder_widths: vec![2, 4],
            bottleneck_width: 8,
            decoder_widths: vec![4, 2],
            se_ratio: 8,
            dropout_rate: 0.2,
            input_size: 8,
        }
    }

    fn input(n: usize, cfg: &ArchConfig, seed: u64) -> Tensor<f32> {
        let mut rng = RngState::new(seed);
        Tensor::from_fn(&[n, cfg.in_channels, cfg.input_size, cfg.input_size], |_| rng.normal() as f32)
    }

    #[test]
    fn config_errors() {
        let mut cfg = ArchConfig::full_scale();
        cfg.input_size = 100;
        match cfg.validate() {
            Err(Error::Config(msg)) => assert!(msg.contains("16"), "{msg}"),
            other => panic!("{other:?}"),
        }
        let mut cfg = ArchConfig::tiny();
        cfg.decoder_widths = vec![8];
        assert!(cfg.validate().is_err());
        let mut cfg = ArchConfig::tiny();
        cfg.decoder_widths = vec![4, 8];
        assert!(cfg.validate().is_err());
        let mut cfg = ArchConfig::tiny();
        cfg.in_channels = 2;
        assert!(cfg.validate().is_err());
        assert!(FocusNetParams::<f32>::build(&cfg, &mut RngState::new(0)).is_err());
    }

    #[test]
    fn text_round_trip() {
        let cfg = ArchConfig::full_scale();
        assert_eq!(ArchConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        assert!(ArchConfig::from_text("bogus = 1").is_err());
    }

    #[test]
    fn build_is_deterministic_and_matches_ledger() {
        let cfg = ArchConfig::tiny();
        let a = FocusNetParams::<f32>::build(&cfg, &mut RngState::new(5)).unwrap();
        let b = FocusNetParams::<f32>::build(&cfg, &mut RngState::new(5)).unwrap();
        assert_eq!(a, b);
        let ledger = param_count(&cfg).unwrap();
        assert_eq!(ledger.total, a.num_params());
        for (name, t) in &a.params {
            if name.ends_with("/b") || name.ends_with("/beta") {
                assert!(t.data().iter().all(|&v| v == 0.0), "{name}");
            }
            if name.ends_with("/gamma") {
                assert!(t.data().iter().all(|&v| v == 1.0), "{name}");
            }
        }
    }

    #[test]
    fn forward_shapes_and_ranges() {
        let cfg = micro();
        let p = FocusNetParams::<f32>::build(&cfg, &mut RngState::new(1)).unwrap();
        let x = input(2, &cfg, 2);
        let mut tape = Tape::no_grad();
        let out = p.forward(&mut tape, &x, Mode::Eval, &mut RngState::new(0), GateMode::Learned).unwrap();
        assert_eq!(out.prob.shape(), &[2, 1, 8, 8]);
        assert!(out.prob.value().data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(out.trace.levels.len(), 2);
        for lt in &out.trace.levels {
            assert_eq!(lt.decoder.shape(), lt.features.shape());
            assert!(lt.gate.data().iter().all(|&g| g > 0.0 && g < 1.0));
            for (a, f) in lt.gated.data().iter().zip(lt.features.data()) {
                assert!(a.abs() <= f.abs());
                if *f != 0.0 {
                    assert!(a.abs() < f.abs());
                }
            }
        }
        assert_eq!(out.stats, p.stats);
    }

    #[test]
    fn forward_rejects_wrong_input() {
        let cfg = micro();
        let p = FocusNetParams::<f32>::build(&cfg, &mut RngState::new(1)).unwrap();
        let x = Tensor::zeros(&[1, 3, 8, 8]);
        match p.forward(&mut Tape::no_grad(), &x, Mode::Eval, &mut RngState::new(0), GateMode::Learned) {
            Err(Error::Stage { stage, .. }) => assert_eq!(stage, "input"),
            other => panic!("{:?}", other.err()),
        }
    }

    #[test]
    fn train_mode_updates_stats() {
        let cfg = micro();
        let p = FocusNetParams::<f32>::build(&cfg, &mut RngState::new(1)).unwrap();
        let out = p
            .forward(&mut Tape::new(), &input(2, &cfg, 3), Mode::Train, &mut RngState::new(0), GateMode::Learned)
            .unwrap();
        assert_ne!(out.stats, p.stats);
    }

    #[test]
    fn gate_ablation_wiring() {
        let cfg = micro();
        let p = FocusNetParams::<f32>::build(&cfg, &mut RngState::new(1)).unwrap();
        let x = input(1, &cfg, 4);
        let run = |mode| {
            p.forward(&mut Tape::no_grad(), &x, Mode::Eval, &mut RngState::new(0), mode)
                .unwrap()
                .trace
                .prob
        };
        let ones = run(GateMode::ConstantOne);
        let skip = run(GateMode::Skip);
        let learned = run(GateMode::Learned);
        assert_eq!(ones, skip);
        assert_ne!(ones, learned);
    }

    #[test]
    fn every_parameter_is_reachable() {
        // Eval mode: in train mode a conv bias ahead of batch norm has an exactly
        // zero gradient. Several seeds, since a single dead ReLU can zero a path.
        let cfg = micro();
        let mut touched = std::collections::BTreeSet::new();
        let mut names = Vec::new();
        for seed in 0..12 {
            let p = FocusNetParams::<f64>::build(&cfg, &mut RngState::new(seed)).unwrap();
            names = p.params.keys().cloned().collect();
            let x = input(2, &cfg, 10 + seed).cast::<f64>();
            let mut tape = Tape::new();
            let out = p.forward(&mut tape, &x, Mode::Eval, &mut RngState::new(0), GateMode::Learned).unwrap();
            let loss = tape.sum(&out.prob);
            let grads = tape.backward(&loss).unwrap();
            assert_eq!(grads.len(), p.params.len());
            for (name, g) in grads.iter() {
                if g.data().iter().any(|&v| v != 0.0) {
                    touched.insert(name.clone());
                }
            }
        }
        for name in names {
            assert!(touched.contains(&name), "no gradient reached {name}");
        }
    }
}
