use std::sync::Arc;

use super::conv::{self, ConvGeom, Padding};
use super::{Node, Op, Tape, Var, FNV_PRIME};
use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Mul,
    Add,
}

/// Per-channel running mean and variance of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        RunningStats {
            mean: Tensor::zeros(&[channels]),
            var: Tensor::ones(&[channels]),
        }
    }
}

/// Sigmoid clamped so a rounded result never reaches exactly 0 or 1.
#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    let y = if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    };
    let upper = T::one() - T::epsilon() / T::lit(2.0);
    y.max(T::min_positive_value()).min(upper)
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> bool {
    matches!((a, b), ([n, c, _, _], [bn, bc]) if n == bn && c == bc)
}

impl<T: Scalar> Tape<T> {
    /// Cross-correlation of `x: [N,C,H,W]` with `w: [O,C,k,k]` plus bias `b: [O]`.
    pub fn conv2d(&mut self, x: &Var<T>, w: &Var<T>, b: &Var<T>, stride: usize, padding: Padding) -> Result<Var<T>> {
        let [n, c, h, wd] = x.value().dims4("conv2d")?;
        let [o, wc, kh, kw] = w.value().dims4("conv2d")?;
        if wc != c || kh != kw {
            return Err(Error::shape("conv2d", x.shape(), w.shape()));
        }
        if b.shape() != [o] {
            return Err(Error::shape("conv2d", w.shape(), b.shape()));
        }
        let geom = ConvGeom::for_conv("conv2d", c, h, wd, kh, stride, padding)?;
        if geom.out_h == 0 || geom.out_w == 0 || c == 0 {
            return Err(Error::Geometry {
                op: "conv2d",
                detail: "zero-size output".to_string(),
            });
        }
        let data = conv::conv2d_forward(x.value().data(), n, w.value().data(), b.value().data(), o, &geom);
        let out = Tensor::new(&[n, o, geom.out_h, geom.out_w], data)?;
        Ok(self.push(
            Op::Conv2d {
                x: x.shared(),
                w: w.shared(),
                geom,
            },
            &[x, w, b],
            out,
        ))
    }

    /// Transposed convolution, `x: [N,C,H,W]`, `w: [C,O,k,k]` → `[N,O,H·s,W·s]`.
    pub fn conv2d_transpose(&mut self, x: &Var<T>, w: &Var<T>, b: &Var<T>, stride: usize) -> Result<Var<T>> {
        let [n, c, h, wd] = x.value().dims4("conv2d_transpose")?;
        let [wc, o, kh, kw] = w.value().dims4("conv2d_transpose")?;
        if wc != c || kh != kw {
            return Err(Error::shape("conv2d_transpose", x.shape(), w.shape()));
        }
        if b.shape() != [o] {
            return Err(Error::shape("conv2d_transpose", w.shape(), b.shape()));
        }
        if c == 0 {
            return Err(Error::Geometry {
                op: "conv2d_transpose",
                detail: "zero input channels".to_string(),
            });
        }
        let geom = ConvGeom::for_transpose("conv2d_transpose", o, h, wd, kh, stride)?;
        let data = conv::conv_transpose_forward(x.value().data(), n, c, w.value().data(), b.value().data(), &geom);
        let out = Tensor::new(&[n, o, geom.height, geom.width], data)?;
        Ok(self.push(
            Op::ConvTranspose2d {
                x: x.shared(),
                w: w.shared(),
                geom,
            },
            &[x, w, b],
            out,
        ))
    }

    pub fn activation(&mut self, x: &Var<T>, kind: Activation) -> Var<T> {
        match kind {
            Activation::Relu => {
                let margin = x.value().data().iter().fold(f64::INFINITY, |m, v| m.min(v.as_f64().abs()));
                self.relu_margin = self.relu_margin.min(margin);
                for v in x.value().data() {
                    self.relu_signature = (self.relu_signature ^ u64::from(*v > T::zero())).wrapping_mul(FNV_PRIME);
                }
                let y = Arc::new(x.value().map(|v| v.max(T::zero())));
                let op = Op::Relu { y: Arc::clone(&y) };
                self.push(op, &[x], Arc::unwrap_or_clone(y))
            }
            Activation::Sigmoid => {
                let y = Arc::new(x.value().map(sigmoid));
                let op = Op::Sigmoid { y: Arc::clone(&y) };
                self.push(op, &[x], Arc::unwrap_or_clone(y))
            }
        }
    }

    pub fn relu(&mut self, x: &Var<T>) -> Var<T> {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: &Var<T>) -> Var<T> {
        self.activation(x, Activation::Sigmoid)
    }

    /// Batch normalization over N, H, W per channel.
    ///
    /// Train mode normalizes with batch statistics and folds them into
    /// `stats` as `new = (1 - momentum)·old + momentum·batch` (unbiased
    /// variance). Eval mode normalizes with `stats`.
    #[allow(clippy::too_many_arguments)]
    pub fn batchnorm2d(
        &mut self,
        x: &Var<T>,
        gamma: &Var<T>,
        beta: &Var<T>,
        stats: &mut RunningStats<T>,
        mode: Mode,
        eps: T,
        momentum: T,
    ) -> Result<Var<T>> {
        let [n, c, h, w] = x.value().dims4("batchnorm2d")?;
        for p in [gamma.shape(), beta.shape(), stats.mean.shape(), stats.var.shape()] {
            if p != [c] {
                return Err(Error::shape("batchnorm2d", x.shape(), p));
            }
        }
        let plane = h * w;
        let count = n * plane;
        let xs = x.value().data();
        let per_channel = |ch: usize| (0..n).flat_map(move |b| (b * c + ch) * plane..(b * c + ch + 1) * plane);

        let (mean, var) = match mode {
            Mode::Train => {
                if count < 2 {
                    return Err(Error::DegenerateStats(format!(
                        "batchnorm2d in train mode needs N·H·W >= 2, got {count}"
                    )));
                }
                let m = T::from_usize(count).unwrap();
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mu = per_channel(ch).map(|i| xs[i]).sum::<T>() / m;
                    let v = per_channel(ch).map(|i| (xs[i] - mu) * (xs[i] - mu)).sum::<T>() / m;
                    mean[ch] = mu;
                    var[ch] = v;
                }
                let unbias = m / (m - T::one());
                for ch in 0..c {
                    let rm = &mut stats.mean.data_mut()[ch];
                    *rm = (T::one() - momentum) * *rm + momentum * mean[ch];
                    let rv = &mut stats.var.data_mut()[ch];
                    *rv = (T::one() - momentum) * *rv + momentum * var[ch] * unbias;
                }
                (mean, var)
            }
            Mode::Eval => (stats.mean.data().to_vec(), stats.var.data().to_vec()),
        };

        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = Tensor::zeros(x.shape());
        let mut out = Tensor::zeros(x.shape());
        let (g, bt) = (gamma.value().data(), beta.value().data());
        for ch in 0..c {
            for i in per_channel(ch) {
                let xh = (xs[i] - mean[ch]) * inv_std[ch];
                xhat.data_mut()[i] = xh;
                out.data_mut()[i] = g[ch] * xh + bt[ch];
            }
        }
        Ok(self.push(
            Op::BatchNorm {
                xhat,
                inv_std,
                gamma: gamma.shared(),
                batch_stats: mode == Mode::Train,
            },
            &[x, gamma, beta],
            out,
        ))
    }

    /// Per-channel spatial mean, `[N,C,H,W]` → `[N,C]`.
    pub fn global_avg_pool(&mut self, x: &Var<T>) -> Result<Var<T>> {
        let dims = x.value().dims4("global_avg_pool")?;
        let [n, c, h, w] = dims;
        if h == 0 || w == 0 {
            return Err(Error::Geometry {
                op: "global_avg_pool",
                detail: "zero-size spatial map".to_string(),
            });
        }
        let plane = h * w;
        let denom = T::from_usize(plane).unwrap();
        let data = x
            .value()
            .data()
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() / denom)
            .collect();
        let out = Tensor::new(&[n, c], data)?;
        Ok(self.push(Op::GlobalAvgPool { dims }, &[x], out))
    }

    /// Affine map `x·w + b` with `x: [N,C]`, `w: [C,M]`, `b: [M]`.
    pub fn dense(&mut self, x: &Var<T>, w: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let (&[n, c], &[wc, m]) = (x.shape(), w.shape()) else {
            return Err(Error::shape("dense", x.shape(), w.shape()));
        };
        if wc != c {
            return Err(Error::shape("dense", x.shape(), w.shape()));
        }
        if b.shape() != [m] {
            return Err(Error::shape("dense", w.shape(), b.shape()));
        }
        let mut data: Vec<T> = (0..n).flat_map(|_| b.value().data().iter().copied()).collect();
        T::gemm(n, c, m, T::one(), x.value().data(), (c, 1), w.value().data(), (m, 1), T::one(), &mut data, (m, 1));
        let out = Tensor::new(&[n, m], data)?;
        Ok(self.push(
            Op::Dense {
                x: x.shared(),
                w: w.shared(),
            },
            &[x, w, b],
            out,
        ))
    }

    /// Stacks `a` then `b` along the channel axis.
    pub fn concat_channels(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        let [n, ca, h, w] = a.value().dims4("concat_channels")?;
        let [bn, cb, bh, bw] = b.value().dims4("concat_channels")?;
        if (n, h, w) != (bn, bh, bw) {
            return Err(Error::shape("concat_channels", a.shape(), b.shape()));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * (ca + cb) * plane);
        for i in 0..n {
            data.extend_from_slice(&a.value().data()[i * ca * plane..(i + 1) * ca * plane]);
            data.extend_from_slice(&b.value().data()[i * cb * plane..(i + 1) * cb * plane]);
        }
        let out = Tensor::new(&[n, ca + cb, h, w], data)?;
        Ok(self.push(Op::Concat { split: ca }, &[a, b], out))
    }

    /// Elementwise product or sum. `b` may also be `[N,C]` against a
    /// `[N,C,H,W]` `a`, broadcast over the spatial axes.
    pub fn elementwise(&mut self, a: &Var<T>, b: &Var<T>, kind: BinaryKind) -> Result<Var<T>> {
        let f = |x: T, y: T| match kind {
            BinaryKind::Mul => x * y,
            BinaryKind::Add => x + y,
        };
        let out = if a.shape() == b.shape() {
            a.value().zip_map(b.value(), f)?
        } else if broadcast_shape(a.shape(), b.shape()) {
            let plane = a.shape()[2] * a.shape()[3];
            let bd = b.value().data();
            let data = a
                .value()
                .data()
                .chunks(plane.max(1))
                .zip(bd)
                .flat_map(|(chunk, &s)| chunk.iter().map(move |&v| f(v, s)))
                .collect();
            Tensor::new(a.shape(), data)?
        } else {
            return Err(Error::shape(
                match kind {
                    BinaryKind::Mul => "mul",
                    BinaryKind::Add => "add",
                },
                a.shape(),
                b.shape(),
            ));
        };
        let op = match kind {
            BinaryKind::Mul => Op::Mul {
                a: a.shared(),
                b: b.shared(),
            },
            BinaryKind::Add => Op::Add,
        };
        Ok(self.push(op, &[a, b], out))
    }

    pub fn mul(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.elementwise(a, b, BinaryKind::Mul)
    }

    pub fn add(&mut self, a: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
        self.elementwise(a, b, BinaryKind::Add)
    }

    /// Inverted dropout. Eval mode and rate 0 are the identity and draw nothing.
    pub fn dropout(&mut self, x: &Var<T>, rate: f64, mode: Mode, rng: &mut RngState) -> Result<Var<T>> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Param(format!("dropout rate {rate} outside [0, 1)")));
        }
        if mode == Mode::Eval || rate == 0.0 {
            return Ok(x.clone());
        }
        let keep = T::lit(1.0 / (1.0 - rate));
        let mask: Vec<T> = (0..x.value().len())
            .map(|_| if rng.uniform() < rate { T::zero() } else { keep })
            .collect();
        let data = x.value().data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let out = Tensor::new(x.shape(), data)?;
        Ok(self.push(Op::Dropout { mask }, &[x], out))
    }

    /// Sum of all elements as a one-element tensor.
    pub fn sum(&mut self, x: &Var<T>) -> Var<T> {
        let out = Tensor::scalar(x.value().sum());
        self.push(Op::Sum, &[x], out)
    }

    /// `1 - (2·Σp·g + s) / (Σp + Σg + s)` over the whole batch.
    ///
    /// Evaluated as `Σ(p + g - 2pg) / (Σp + Σg + s)`, which is exactly zero
    /// when `p == g` is binary and never negative for binary `g`.
    pub(crate) fn dice_loss_unchecked(&mut self, prob: &Var<T>, gt: Arc<Tensor<T>>, smooth: T) -> Result<Var<T>> {
        if prob.shape() != gt.shape() {
            return Err(Error::shape("dice_loss", prob.shape(), gt.shape()));
        }
        let (mut num, mut sp, mut sg) = (T::zero(), T::zero(), T::zero());
        for (&p, &g) in prob.value().data().iter().zip(gt.data()) {
            num += p + g - T::lit(2.0) * p * g;
            sp += p;
            sg += g;
        }
        let denom = sp + sg + smooth;
        let loss = num / denom;
        Ok(self.push(
            Op::DiceLoss {
                prob: prob.shared(),
                gt,
                loss,
                denom,
            },
            &[prob],
            Tensor::scalar(loss),
        ))
    }
}

/// Reduces a `[N,C,H,W]` gradient to `[N,C]` by summing spatial positions.
fn reduce_spatial<T: Scalar>(g: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    let plane = g.shape()[2] * g.shape()[3];
    let data = g
        .data()
        .chunks(plane.max(1))
        .map(|c| c.iter().copied().sum())
        .collect();
    Tensor::new(target, data).expect("reduced shape")
}

fn expand_spatial<T: Scalar>(b: &Tensor<T>, target: &[usize]) -> Tensor<T> {
    let plane = target[2] * target[3];
    let data = b
        .data()
        .iter()
        .flat_map(|&v| std::iter::repeat_n(v, plane))
        .collect();
    Tensor::new(target, data).expect("expanded shape")
}

pub(super) fn backward_rule<T: Scalar>(node: &Node<T>, dy: &Tensor<T>, needs: &[bool]) -> Result<Vec<Option<Tensor<T>>>> {
    let shapes = &node.input_shapes;
    Ok(match &node.op {
        Op::Leaf { .. } => Vec::new(),
        Op::Conv2d { x, w, geom } => {
            let n = x.shape()[0];
            let o = w.shape()[0];
            let g = conv::conv2d_backward(x.data(), n, w.data(), o, geom, dy.data(), needs[0]);
            vec![
                g.dx.map(|d| Tensor::new(x.shape(), d)).transpose()?,
                Some(Tensor::new(w.shape(), g.dw)?),
                Some(Tensor::new(&[o], g.db)?),
            ]
        }
        Op::ConvTranspose2d { x, w, geom } => {
            let [n, c, _, _] = x.dims4("conv2d_transpose")?;
            let g = conv::conv_transpose_backward(x.data(), n, c, w.data(), geom, dy.data(), needs[0]);
            vec![
                g.dx.map(|d| Tensor::new(x.shape(), d)).transpose()?,
                Some(Tensor::new(w.shape(), g.dw)?),
                Some(Tensor::new(&[geom.channels], g.db)?),
            ]
        }
        Op::Relu { y } => vec![Some(dy.zip_map(y, |d, v| if v > T::zero() { d } else { T::zero() })?)],
        Op::Sigmoid { y } => vec![Some(dy.zip_map(y, |d, v| d * v * (T::one() - v))?)],
        Op::BatchNorm {
            xhat,
            inv_std,
            gamma,
            batch_stats,
        } => {
            let [n, c, h, w] = xhat.dims4("batchnorm2d")?;
            let plane = h * w;
            let m = T::from_usize(n * plane).unwrap();
            let idx = |ch: usize| (0..n).flat_map(move |b| (b * c + ch) * plane..(b * c + ch + 1) * plane);
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for ch in 0..c {
                for i in idx(ch) {
                    dbeta[ch] += dy.data()[i];
                    dgamma[ch] += dy.data()[i] * xhat.data()[i];
                }
            }
            let dx = needs[0].then(|| {
                let mut dx = Tensor::zeros(xhat.shape());
                for ch in 0..c {
                    let scale = gamma.data()[ch] * inv_std[ch];
                    for i in idx(ch) {
                        dx.data_mut()[i] = if *batch_stats {
                            scale * (dy.data()[i] - dbeta[ch] / m - xhat.data()[i] * dgamma[ch] / m)
                        } else {
                            scale * dy.data()[i]
                        };
                    }
                }
                dx
            });
            vec![dx, Some(Tensor::new(&[c], dgamma)?), Some(Tensor::new(&[c], dbeta)?)]
        }
        Op::GlobalAvgPool { dims } => {
            let plane = dims[2] * dims[3];
            let inv = T::one() / T::from_usize(plane).unwrap();
            let data = dy
                .data()
                .iter()
                .flat_map(|&g| std::iter::repeat_n(g * inv, plane))
                .collect();
            vec![Some(Tensor::new(dims, data)?)]
        }
        Op::Dense { x, w } => {
            let (n, c, m) = (x.shape()[0], x.shape()[1], w.shape()[1]);
            let dx = needs[0]
                .then(|| {
                    let mut d = vec![T::zero(); n * c];
                    T::gemm(n, m, c, T::one(), dy.data(), (m, 1), w.data(), (1, m), T::zero(), &mut d, (c, 1));
                    Tensor::new(&[n, c], d)
                })
                .transpose()?;
            let mut dw = vec![T::zero(); c * m];
            T::gemm(c, n, m, T::one(), x.data(), (1, c), dy.data(), (m, 1), T::zero(), &mut dw, (m, 1));
            let mut db = vec![T::zero(); m];
            for row in dy.data().chunks(m) {
                for (a, &b) in db.iter_mut().zip(row) {
                    *a += b;
                }
            }
            vec![dx, Some(Tensor::new(&[c, m], dw)?), Some(Tensor::new(&[m], db)?)]
        }
        Op::Concat { split } => {
            let total = dy.shape()[1];
            vec![
                Some(dy.slice_channels(0, *split)?),
                Some(dy.slice_channels(*split, total - split)?),
            ]
        }
        Op::Mul { a, b } => {
            if a.shape() == b.shape() {
                vec![
                    needs[0].then(|| dy.zip_map(b, |d, v| d * v)).transpose()?,
                    needs[1].then(|| dy.zip_map(a, |d, v| d * v)).transpose()?,
                ]
            } else {
                let b_full = expand_spatial(b, a.shape());
                vec![
                    needs[0].then(|| dy.zip_map(&b_full, |d, v| d * v)).transpose()?,
                    needs[1]
                        .then(|| dy.zip_map(a, |d, v| d * v).map(|g| reduce_spatial(&g, b.shape())))
                        .transpose()?,
                ]
            }
        }
        Op::Add => {
            let db = if shapes[1] == shapes[0] {
                dy.clone()
            } else {
                reduce_spatial(dy, &shapes[1])
            };
            vec![Some(dy.clone()), Some(db)]
        }
        Op::Dropout { mask } => {
            let data = dy.data().iter().zip(mask).map(|(&d, &m)| d * m).collect();
            vec![Some(Tensor::new(dy.shape(), data)?)]
        }
        Op::Sum => {
            let g = dy.data()[0];
            vec![Some(Tensor::full(&shapes[0], g))]
        }
        Op::DiceLoss { prob, gt, loss, denom } => {
            let g = dy.data()[0];
            let data = gt
                .data()
                .iter()
                .map(|&t| g * ((T::one() - T::lit(2.0) * t) - *loss) / *denom)
                .collect();
            vec![Some(Tensor::new(prob.shape(), data)?)]
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, v.to_vec()).unwrap()
    }

    #[test]
    fn conv2d_valid_sums_window() {
        let mut tape = Tape::<f64>::no_grad();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
        let w = tape.constant(Tensor::ones(&[1, 1, 2, 2]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d(&x, &w, &b, 1, Padding::Valid).unwrap();
        assert_eq!(y.value().data(), &[10.0]);
    }

    #[test]
    fn conv2d_identity_and_zero_kernel() {
        let mut tape = Tape::<f64>::no_grad();
        let data: Vec<f64> = (0..2 * 3 * 5 * 4).map(|i| (i as f64 * 0.37).sin()).collect();
        let x = tape.constant(t(&[2, 3, 5, 4], &data));
        // per-channel identity 1×1 kernel
        let eye = Tensor::from_fn(&[3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let w = tape.constant(eye);
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.conv2d(&x, &w, &b, 1, Padding::Same).unwrap();
        assert_eq!(y.value(), x.value());

        let w0 = tape.constant(Tensor::zeros(&[4, 3, 3, 3]));
        let b0 = tape.constant(Tensor::zeros(&[4]));
        let y0 = tape.conv2d(&x, &w0, &b0, 2, Padding::Same).unwrap();
        assert_eq!(y0.shape(), &[2, 4, 3, 2]);
        assert!(y0.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_channel_mismatch_names_both_shapes() {
        let mut tape = Tape::<f32>::no_grad();
        let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[1]));
        match tape.conv2d(&x, &w, &b, 1, Padding::Same) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![1, 2, 4, 4]);
                assert_eq!(rhs, vec![1, 3, 3, 3]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn conv_transpose_scatters() {
        let mut tape = Tape::<f64>::no_grad();
        let x = tape.constant(t(&[1, 1, 1, 1], &[5.0]));
        let w = tape.constant(Tensor::ones(&[1, 1, 2, 2]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv2d_transpose(&x, &w, &b, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 2]);
        assert_eq!(y.value().data(), &[5.0; 4]);
        let wz = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let yz = tape.conv2d_transpose(&x, &wz, &b, 2).unwrap();
        assert!(yz.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn activations() {
        let mut tape = Tape::<f64>::no_grad();
        let x = tape.constant(t(&[4], &[-1.0, 2.0, 0.0, 100.0]));
        let r = tape.relu(&x);
        assert_eq!(r.value().data(), &[0.0, 2.0, 0.0, 100.0]);
        let s = tape.sigmoid(&x);
        assert_eq!(s.value().data()[2], 0.5);
        assert!((s.value().data()[3] - 1.0).abs() < 1e-6);
        assert!(s.value().data()[3] < 1.0);
    }

    #[test]
    fn sigmoid_stays_open_in_f32() {
        for x in [-1000.0f32, -100.0, -20.0, 20.0, 100.0, 1000.0] {
            let y = sigmoid(x);
            assert!(y > 0.0 && y < 1.0, "sigmoid({x}) = {y}");
        }
    }

    #[test]
    fn batchnorm_two_values() {
        let mut tape = Tape::<f64>::no_grad();
        let x = tape.constant(t(&[1, 1, 1, 2], &[1.0, 3.0]));
        let g = tape.constant(Tensor::ones(&[1]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let mut stats = RunningStats::new(1);
        let y = tape.batchnorm2d(&x, &g, &b, &mut stats, Mode::Train, 0.0, 0.1).unwrap();
        assert_eq!(y.value().data(), &[-1.0, 1.0]);
        // running: mean 0.9·0 + 0.1·2, var 0.9·1 + 0.1·2 (unbiased variance of {1,3})
        assert!((stats.mean.data()[0] - 0.2).abs() < 1e-15);
        assert!((stats.var.data()[0] - 1.1).abs() < 1e-15);
    }

    #[test]
    fn batchnorm_gamma_zero_and_eval_identity() {
        let mut tape = Tape::<f64>::no_grad();
        let data: Vec<f64> = (0..2 * 2 * 3 * 3).map(|i| (i as f64).cos()).collect();
        let x = tape.constant(t(&[2, 2, 3, 3], &data));
        let g0 = tape.constant(Tensor::zeros(&[2]));
        let beta = tape.constant(t(&[2], &[0.25, -0.5]));
        let mut stats = RunningStats::new(2);
        let y = tape.batchnorm2d(&x, &g0, &beta, &mut stats, Mode::Train, 1e-5, 0.1).unwrap();
        for (i, &v) in y.value().data().iter().enumerate() {
            assert_eq!(v, if (i / 9) % 2 == 0 { 0.25 } else { -0.5 });
        }
        let g1 = tape.constant(Tensor::ones(&[2]));
        let b0 = tape.constant(Tensor::zeros(&[2]));
        let mut fresh = RunningStats::new(2);
        let y = tape.batchnorm2d(&x, &g1, &b0, &mut fresh, Mode::Eval, 1e-5, 0.1).unwrap();
        let scale = 1.0 / (1.0f64 + 1e-5).sqrt();
        for (a, b) in y.value().data().iter().zip(&data) {
            assert!((a - b * scale).abs() < 1e-15);
        }
        assert_eq!(fresh, RunningStats::new(2));
    }

    #[test]
    fn batchnorm_single_element_is_degenerate() {
        let mut tape = Tape::<f32>::no_grad();
        let x = tape.constant(Tensor::ones(&[1, 3, 1, 1]));
        let g = tape.constant(Tensor::ones(&[3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let mut stats = RunningStats::new(3);
        assert!(matches!(
            tape.batchnorm2d(&x, &g, &b, &mut stats, Mode::Train, 1e-5, 0.1),
            Err(Error::DegenerateStats(_))
        ));
        assert!(tape.batchnorm2d(&x, &g, &b, &mut stats, Mode::Eval, 1e-5, 0.1).is_ok());
    }

    #[test]
    fn gap_values() {
        let mut tape = Tape::<f64>::no_grad();
        let x = tape.constant(t(&[1, 2, 2, 2], &[1., 2., 3., 4., 7., 7., 7., 7.]));
        let y = tape.global_avg_pool(&x).unwrap();
        assert_eq!(y.value().data(), &[2.5, 7.0]);
        let one = tape.constant(t(&[1, 1, 1, 1], &[-3.0]));
        assert_eq!(tape.global_avg_pool(&one).unwrap().value().data(), &[-3.0]);
    }

    #[test]
    fn dense_cases() {
        let mut tape = Tape::<f64>::no_grad();
        let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let b = tape.constant(t(&[1], &[1.0]));
        assert_eq!(tape.dense(&x, &w, &b).unwrap().value().data(), &[4.0]);

        let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let b0 = tape.constant(Tensor::zeros(&[2]));
        assert_eq!(tape.dense(&x, &eye, &b0).unwrap().value(), x.value());

        let x2 = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let wz = tape.constant(Tensor::zeros(&[2, 3]));
        let bb = tape.constant(t(&[3], &[0.5, -1.0, 2.0]));
        assert_eq!(
            tape.dense(&x2, &wz, &bb).unwrap().value().data(),
            &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]
        );
        assert!(tape.dense(&x2, &bb, &b0).is_err());
    }

    #[test]
    fn concat_round_trip_and_empty() {
        let mut tape = Tape::<f64>::no_grad();
        let a = tape.constant(Tensor::from_fn(&[2, 2, 3, 3], |i| i as f64));
        let b = tape.constant(Tensor::from_fn(&[2, 3, 3, 3], |i| -(i as f64)));
        let y = tape.concat_channels(&a, &b).unwrap();
        assert_eq!(y.shape(), &[2, 5, 3, 3]);
        assert_eq!(&y.value().slice_channels(0, 2).unwrap(), a.value());
        assert_eq!(&y.value().slice_channels(2, 3).unwrap(), b.value());

        let empty = tape.constant(Tensor::zeros(&[2, 0, 3, 3]));
        assert_eq!(tape.concat_channels(&a, &empty).unwrap().value(), a.value());
        let bad = tape.constant(Tensor::zeros(&[2, 1, 4, 3]));
        assert!(tape.concat_channels(&a, &bad).is_err());
    }

    #[test]
    fn elementwise_cases() {
        let mut tape = Tape::<f64>::no_grad();
        let a = tape.constant(t(&[2], &[2.0, 3.0]));
        let b = tape.constant(t(&[2], &[4.0, 5.0]));
        assert_eq!(tape.mul(&a, &b).unwrap().value().data(), &[8.0, 15.0]);
        let ones = tape.constant(Tensor::ones(&[2]));
        let zeros = tape.constant(Tensor::zeros(&[2]));
        assert_eq!(tape.mul(&a, &ones).unwrap().value(), a.value());
        assert_eq!(tape.add(&a, &zeros).unwrap().value(), a.value());

        let x = tape.constant(Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64));
        let s = tape.constant(t(&[1, 2], &[10.0, -1.0]));
        let y = tape.mul(&x, &s).unwrap();
        assert_eq!(y.value().data(), &[0., 10., 20., 30., -4., -5., -6., -7.]);
        let three = tape.constant(Tensor::zeros(&[3]));
        assert!(tape.mul(&a, &three).is_err());
    }

    #[test]
    fn dropout_modes() {
        let mut tape = Tape::<f64>::no_grad();
        let mut rng = RngState::new(1);
        let x = tape.constant(Tensor::ones(&[10]));
        assert_eq!(tape.dropout(&x, 0.5, Mode::Eval, &mut rng).unwrap().value(), x.value());
        assert_eq!(tape.dropout(&x, 0.0, Mode::Train, &mut rng).unwrap().value(), x.value());
        assert!(matches!(tape.dropout(&x, 1.0, Mode::Train, &mut rng), Err(Error::Param(_))));
        assert!(matches!(tape.dropout(&x, -0.1, Mode::Train, &mut rng), Err(Error::Param(_))));
    }

    #[test]
    fn dropout_expectation_and_replay() {
        let mut tape = Tape::<f64>::no_grad();
        let x = tape.constant(Tensor::ones(&[100_000]));
        let y = tape.dropout(&x, 0.2, Mode::Train, &mut RngState::new(42)).unwrap();
        let mean = y.value().sum() / 100_000.0;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
        let again = tape.dropout(&x, 0.2, Mode::Train, &mut RngState::new(42)).unwrap();
        assert_eq!(y.value(), again.value());
    }
}
