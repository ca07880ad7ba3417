//! Finite-difference checks over every primitive, each composite block and
//! a small end-to-end network, all in 64-bit.
//!
//! Primitive and block inputs are redrawn until every ReLU input is at least
//! [`KINK_MARGIN`] from zero. A whole network always has some activation
//! closer than that, so the end-to-end draw is instead accepted only when no
//! ±step evaluation switches any ReLU on or off.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::autodiff::{Mode, OpKind, Padding, ParamSet, RunningStats, Tape, Var};
use crate::autodiff::gradcheck::finite_diff_check_with_fault;
use crate::blocks::{
    conv_stage, down_block, gated_multiply, preact_residual_block, realize, se_block, up_block, BlockCtx,
    ConvStageParams, LayerDecl, ResidualBlockParams, SEBlockParams, SampleBlockParams, BN_EPS, BN_MOMENTUM,
};
use crate::error::{Error, Result};
use crate::model::{forward_with, ArchConfig, GateMode};
use crate::rng::RngState;
use crate::tensor::Tensor;
use crate::train::dice_loss;

pub const STEP: f64 = 1e-4;
pub const SMOOTH_TOLERANCE: f64 = 1e-5;
pub const RELU_TOLERANCE: f64 = 1e-4;
pub const KINK_MARGIN: f64 = 1e-3;
const MAX_DRAWS: u64 = 200;
/// Cheap pre-screen before the end-to-end sweep looks for actual crossings.
const MODEL_SCREEN_MARGIN: f64 = 1e-5;
const MAX_MODEL_DRAWS: u64 = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub coordinates: usize,
    pub worst: Option<(String, usize)>,
    /// Coordinates whose difference quotient straddled a ReLU kink.
    pub kink_crossings: usize,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance && self.kink_crossings == 0
    }
}

#[derive(Clone, Debug, Default)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Deliberately corrupt this op's backward rule.
    pub fault: Option<OpKind>,
    pub skip_model: bool,
}

type Leaves = BTreeMap<String, Var<f64>>;
type Objective = Box<dyn FnMut(&mut Tape<f64>, &Leaves) -> Result<Var<f64>>>;

struct Check {
    name: String,
    tolerance: f64,
    params: ParamSet<f64>,
    f: Objective,
}

fn uniform(rng: &mut RngState, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.uniform_range(lo, hi))
}

/// `Σ y ⊙ r` for a fixed pseudo-random `r`, so every output coordinate matters.
fn project(tape: &mut Tape<f64>, y: &Var<f64>, seed: u64) -> Result<Var<f64>> {
    let r = uniform(&mut RngState::derive(seed, &[0x9e37]), y.shape(), -1.0, 1.0);
    let r = tape.constant(r);
    let p = tape.mul(y, &r)?;
    Ok(tape.sum(&p))
}

fn randomize(params: &mut ParamSet<f64>, rng: &mut RngState) {
    for (name, t) in params.iter_mut() {
        if name.ends_with("/b") || name.ends_with("/beta") {
            *t = uniform(rng, t.shape(), -0.2, 0.2);
        } else if name.ends_with("/gamma") {
            *t = uniform(rng, t.shape(), 0.5, 1.5);
        }
    }
}

fn random_stats(stats: &mut BTreeMap<String, RunningStats<f64>>, rng: &mut RngState) {
    for s in stats.values_mut() {
        s.mean = uniform(rng, s.mean.shape(), -0.2, 0.2);
        s.var = uniform(rng, s.var.shape(), 0.5, 1.5);
    }
}

fn params(entries: Vec<(&str, Tensor<f64>)>) -> ParamSet<f64> {
    entries.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
}

fn primitive_checks(seed: u64) -> Vec<Check> {
    let mut rng = RngState::derive(seed, &[1]);
    let mut checks = Vec::new();
    let mut add = |name: &str, tolerance: f64, params: ParamSet<f64>, f: Objective| {
        checks.push(Check {
            name: name.to_string(),
            tolerance,
            params,
            f,
        })
    };

    let conv_cases = [
        ("conv2d same s1", [2, 3, 5, 5], 4, 3, 1, Padding::Same),
        ("conv2d same s2 even", [2, 2, 6, 6], 3, 3, 2, Padding::Same),
        ("conv2d same s2 odd", [1, 2, 5, 5], 2, 3, 2, Padding::Same),
        ("conv2d valid s2", [2, 2, 6, 6], 3, 3, 2, Padding::Valid),
        ("conv2d 1x1", [2, 3, 4, 4], 2, 1, 1, Padding::Same),
    ];
    for (name, xs, o, k, s, pad) in conv_cases {
        let c = xs[1];
        let p = params(vec![
            ("x", uniform(&mut rng, &xs, -1.0, 1.0)),
            ("w", uniform(&mut rng, &[o, c, k, k], -1.0, 1.0)),
            ("b", uniform(&mut rng, &[o], -1.0, 1.0)),
        ]);
        add(
            name,
            SMOOTH_TOLERANCE,
            p,
            Box::new(move |t, l| {
                let y = t.conv2d(&l["x"], &l["w"], &l["b"], s, pad)?;
                project(t, &y, 1)
            }),
        );
    }
    for (name, xs, o, k, s) in [
        ("conv2d_transpose k2 s2", [2, 3, 3, 3], 2, 2, 2),
        ("conv2d_transpose k4 s2", [1, 2, 3, 3], 2, 4, 2),
        ("conv2d_transpose k3 s1", [2, 2, 4, 4], 3, 3, 1),
    ] {
        let c = xs[1];
        let p = params(vec![
            ("x", uniform(&mut rng, &xs, -1.0, 1.0)),
            ("w", uniform(&mut rng, &[c, o, k, k], -1.0, 1.0)),
            ("b", uniform(&mut rng, &[o], -1.0, 1.0)),
        ]);
        add(
            name,
            SMOOTH_TOLERANCE,
            p,
            Box::new(move |t, l| {
                let y = t.conv2d_transpose(&l["x"], &l["w"], &l["b"], s)?;
                project(t, &y, 2)
            }),
        );
    }

    // Away from the kink: shift small magnitudes outwards.
    let x = uniform(&mut rng, &[2, 3, 4, 4], -1.0, 1.0).map(|v| if v.abs() < KINK_MARGIN { v + 2.0 * KINK_MARGIN } else { v });
    add(
        "relu",
        SMOOTH_TOLERANCE,
        params(vec![("x", x)]),
        Box::new(|t, l| {
            let y = t.relu(&l["x"]);
            project(t, &y, 3)
        }),
    );
    add(
        "sigmoid",
        SMOOTH_TOLERANCE,
        params(vec![("x", uniform(&mut rng, &[2, 3, 4, 4], -3.0, 3.0))]),
        Box::new(|t, l| {
            let y = t.sigmoid(&l["x"]);
            project(t, &y, 4)
        }),
    );

    for mode in [Mode::Train, Mode::Eval] {
        let stats = RunningStats {
            mean: uniform(&mut rng, &[3], -0.3, 0.3),
            var: uniform(&mut rng, &[3], 0.5, 1.5),
        };
        let p = params(vec![
            ("x", uniform(&mut rng, &[2, 3, 3, 3], -1.0, 1.0)),
            ("gamma", uniform(&mut rng, &[3], 0.5, 1.5)),
            ("beta", uniform(&mut rng, &[3], -0.5, 0.5)),
        ]);
        let name = if mode == Mode::Train { "batchnorm2d train" } else { "batchnorm2d eval" };
        add(
            name,
            SMOOTH_TOLERANCE,
            p,
            Box::new(move |t, l| {
                let mut s = stats.clone();
                let y = t.batchnorm2d(&l["x"], &l["gamma"], &l["beta"], &mut s, mode, BN_EPS, BN_MOMENTUM)?;
                project(t, &y, 5)
            }),
        );
    }

    add(
        "global_avg_pool",
        SMOOTH_TOLERANCE,
        params(vec![("x", uniform(&mut rng, &[2, 3, 3, 4], -1.0, 1.0))]),
        Box::new(|t, l| {
            let y = t.global_avg_pool(&l["x"])?;
            project(t, &y, 6)
        }),
    );
    add(
        "dense",
        SMOOTH_TOLERANCE,
        params(vec![
            ("x", uniform(&mut rng, &[3, 4], -1.0, 1.0)),
            ("w", uniform(&mut rng, &[4, 2], -1.0, 1.0)),
            ("b", uniform(&mut rng, &[2], -1.0, 1.0)),
        ]),
        Box::new(|t, l| {
            let y = t.dense(&l["x"], &l["w"], &l["b"])?;
            project(t, &y, 7)
        }),
    );
    add(
        "concat_channels",
        SMOOTH_TOLERANCE,
        params(vec![
            ("a", uniform(&mut rng, &[2, 2, 3, 3], -1.0, 1.0)),
            ("b", uniform(&mut rng, &[2, 3, 3, 3], -1.0, 1.0)),
        ]),
        Box::new(|t, l| {
            let y = t.concat_channels(&l["a"], &l["b"])?;
            project(t, &y, 8)
        }),
    );
    for (name, bshape) in [("mul", [2, 3, 3, 3].as_slice()), ("mul broadcast", &[2, 3])] {
        add(
            name,
            SMOOTH_TOLERANCE,
            params(vec![
                ("a", uniform(&mut rng, &[2, 3, 3, 3], -1.0, 1.0)),
                ("b", uniform(&mut rng, bshape, -1.0, 1.0)),
            ]),
            Box::new(|t, l| {
                let y = t.mul(&l["a"], &l["b"])?;
                project(t, &y, 9)
            }),
        );
    }
    for (name, bshape) in [("add", [2, 3, 3, 3].as_slice()), ("add broadcast", &[2, 3])] {
        add(
            name,
            SMOOTH_TOLERANCE,
            params(vec![
                ("a", uniform(&mut rng, &[2, 3, 3, 3], -1.0, 1.0)),
                ("b", uniform(&mut rng, bshape, -1.0, 1.0)),
            ]),
            Box::new(|t, l| {
                let y = t.add(&l["a"], &l["b"])?;
                project(t, &y, 10)
            }),
        );
    }
    add(
        "dropout",
        SMOOTH_TOLERANCE,
        params(vec![("x", uniform(&mut rng, &[2, 3, 4, 4], -1.0, 1.0))]),
        Box::new(|t, l| {
            // Same mask on every evaluation.
            let y = t.dropout(&l["x"], 0.2, Mode::Train, &mut RngState::new(11))?;
            project(t, &y, 11)
        }),
    );
    add(
        "sum",
        SMOOTH_TOLERANCE,
        params(vec![("x", uniform(&mut rng, &[2, 3], -1.0, 1.0))]),
        Box::new(|t, l| {
            let sq = t.mul(&l["x"], &l["x"])?;
            Ok(t.sum(&sq))
        }),
    );
    let gt = Tensor::from_fn(&[2, 1, 3, 3], |_| if rng.bernoulli(0.4) { 1.0 } else { 0.0 });
    add(
        "dice_loss",
        SMOOTH_TOLERANCE,
        params(vec![("p", uniform(&mut rng, &[2, 1, 3, 3], 0.05, 0.95))]),
        Box::new(move |t, l| dice_loss(t, &l["p"], &gt, 1.0)),
    );
    checks
}

/// A block check: declared layers, a random input, and a forward over `BlockCtx`.
fn block_check(
    name: &str,
    tolerance: f64,
    layers: Vec<LayerDecl>,
    input_shape: &[usize],
    rng: &mut RngState,
    forward: impl Fn(&mut BlockCtx<'_, f64>, &Leaves, &Var<f64>) -> Result<Var<f64>> + 'static,
) -> Check {
    let (mut p, mut stats) = realize::<f64>(&layers, rng);
    randomize(&mut p, rng);
    random_stats(&mut stats, rng);
    p.insert("input".to_string(), uniform(rng, input_shape, -1.0, 1.0));
    Check {
        name: name.to_string(),
        tolerance,
        params: p,
        f: Box::new(move |tape, leaves| {
            let mut s = stats.clone();
            let mut r = RngState::new(0);
            let mut ctx = BlockCtx {
                tape,
                stats: &mut s,
                mode: Mode::Eval,
                rng: &mut r,
            };
            let y = forward(&mut ctx, leaves, &leaves["input"])?;
            project(ctx.tape, &y, 20)
        }),
    }
}

fn block_checks(rng: &mut RngState) -> Vec<Check> {
    vec![
        block_check(
            "se_block",
            RELU_TOLERANCE,
            SEBlockParams::<f64>::declare("se", 4, 2),
            &[2, 4, 3, 3],
            rng,
            |ctx, l, x| se_block(ctx.tape, x, &SEBlockParams::bind(l, "se")?),
        ),
        block_check(
            "preact_residual_block identity",
            RELU_TOLERANCE,
            ResidualBlockParams::<f64>::declare("res", 3, 3),
            &[2, 3, 4, 4],
            rng,
            |ctx, l, x| preact_residual_block(ctx, x, &ResidualBlockParams::bind(l, "res")?),
        ),
        block_check(
            "preact_residual_block projection",
            RELU_TOLERANCE,
            ResidualBlockParams::<f64>::declare("res", 2, 3),
            &[2, 2, 4, 4],
            rng,
            |ctx, l, x| preact_residual_block(ctx, x, &ResidualBlockParams::bind(l, "res")?),
        ),
        block_check(
            "conv_stage",
            RELU_TOLERANCE,
            ConvStageParams::<f64>::declare("stage", 2, 3),
            &[2, 2, 4, 4],
            rng,
            |ctx, l, x| Ok(conv_stage(ctx, x, &ConvStageParams::bind(l, "stage")?)?.output),
        ),
        block_check(
            "down_block",
            RELU_TOLERANCE,
            SampleBlockParams::<f64>::declare_down("down", 2, 3),
            &[2, 2, 4, 4],
            rng,
            |ctx, l, x| down_block(ctx, x, &SampleBlockParams::bind(l, "down")?),
        ),
        block_check(
            "up_block",
            RELU_TOLERANCE,
            SampleBlockParams::<f64>::declare_up("up", 3, 2),
            &[2, 3, 2, 2],
            rng,
            |ctx, l, x| up_block(ctx, x, &SampleBlockParams::bind(l, "up")?),
        ),
        {
            let d = uniform(rng, &[2, 3, 3, 3], -2.0, 2.0);
            Check {
                name: "gated_multiply".to_string(),
                tolerance: SMOOTH_TOLERANCE,
                params: params(vec![("f", uniform(rng, &[2, 3, 3, 3], -1.0, 1.0)), ("d", d)]),
                f: Box::new(|t, l| {
                    let g = gated_multiply(t, &l["f"], &l["d"])?;
                    project(t, &g.output, 21)
                }),
            }
        },
    ]
}

/// The tiny architecture at a 4x4 input, which keeps the end-to-end sweep short.
pub fn gradcheck_arch() -> ArchConfig {
    ArchConfig {
        input_size: 4,
        ..ArchConfig::tiny()
    }
}

fn model_check(rng: &mut RngState) -> Result<Check> {
    let arch = gradcheck_arch();
    let (mut p, mut stats) = realize::<f64>(&arch.layers(), rng);
    randomize(&mut p, rng);
    random_stats(&mut stats, rng);
    let n = 1;
    let x = uniform(rng, &[n, 1, arch.input_size, arch.input_size], -1.0, 1.0);
    let gt = Tensor::from_fn(&[n, 1, arch.input_size, arch.input_size], |_| if rng.bernoulli(0.4) { 1.0 } else { 0.0 });
    let stats = Arc::new(stats);
    Ok(Check {
        name: "focusnet dice loss (end to end)".to_string(),
        tolerance: RELU_TOLERANCE,
        params: p,
        f: Box::new(move |tape, leaves| {
            let mut s = (*stats).clone();
            let (prob, _) = forward_with(&arch, tape, leaves, &mut s, &x, Mode::Eval, &mut RngState::new(0), GateMode::Learned)?;
            dice_loss(tape, &prob, &gt, 1.0)
        }),
    })
}

/// Evaluates `check.f` once and reports how close any ReLU came to its kink.
fn relu_margin(check: &mut Check) -> Result<f64> {
    let mut tape = Tape::no_grad();
    let leaves = check
        .params
        .iter()
        .map(|(k, v)| (k.clone(), tape.param(k.clone(), v.clone())))
        .collect();
    (check.f)(&mut tape, &leaves)?;
    Ok(tape.relu_margin())
}

/// Draws checks from `build` until every ReLU input clears the kink margin.
fn draw_clear_of_kinks(seed: u64, margin: f64, build: impl Fn(&mut RngState) -> Result<Vec<Check>>) -> Result<Vec<Check>> {
    for draw in 0..MAX_DRAWS {
        let mut checks = build(&mut RngState::derive(seed, &[2, draw]))?;
        let mut clear = true;
        for c in checks.iter_mut() {
            clear &= relu_margin(c)? >= margin;
        }
        if clear {
            return Ok(checks);
        }
    }
    Err(Error::Numerical(format!("no draw kept all ReLU inputs {margin} away from zero")))
}

/// Redraws the end-to-end check until its sweep crosses no kink.
fn run_model_check(seed: u64, fault: Option<OpKind>) -> Result<CheckOutcome> {
    let mut last = None;
    for draw in 0..MAX_MODEL_DRAWS {
        let check = draw_clear_of_kinks(seed ^ (draw << 32), MODEL_SCREEN_MARGIN, |rng| Ok(vec![model_check(rng)?]))?;
        let o = run(check.into_iter().next().expect("one check"), fault, true)?;
        if o.kink_crossings == 0 {
            return Ok(o);
        }
        last = Some(o);
    }
    Ok(last.expect("at least one draw"))
}

fn run(check: Check, fault: Option<OpKind>, stop_on_crossing: bool) -> Result<CheckOutcome> {
    let Check {
        name,
        tolerance,
        params,
        f,
    } = check;
    let r = finite_diff_check_with_fault(&params, STEP, fault, stop_on_crossing, f)?;
    Ok(CheckOutcome {
        name,
        max_rel_error: r.max_rel_error,
        tolerance,
        coordinates: r.coordinates,
        worst: r.worst,
        kink_crossings: r.kink_crossings,
    })
}

/// Runs every check, calling `report` as each one finishes.
pub fn run_suite(opts: &SuiteOptions, mut report: impl FnMut(&CheckOutcome)) -> Result<Vec<CheckOutcome>> {
    let mut checks = primitive_checks(opts.seed);
    checks.extend(draw_clear_of_kinks(opts.seed, KINK_MARGIN, |rng| Ok(block_checks(rng)))?);
    let mut out = Vec::with_capacity(checks.len() + 1);
    for c in checks {
        let o = run(c, opts.fault, false)?;
        report(&o);
        out.push(o);
    }
    if !opts.skip_model {
        let o = run_model_check(opts.seed ^ 0x5eed, opts.fault)?;
        report(&o);
        out.push(o);
    }
    Ok(out)
}
