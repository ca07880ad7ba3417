//! Independent reference implementations shared by the integration tests
//! and the acceptance binary. None of this calls into the library's kernels.

#![allow(dead_code)]

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Multiples of 1/8 in [-1, 1]; sums of their products are exact in f64.
pub fn dyadic(r: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| f64::from(r.random_range(-8i32..=8)) / 8.0).collect()
}

pub fn uniform(r: &mut impl Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| r.random_range(-1.0..1.0)).collect()
}

/// Output extent and leading pad of one axis. `same` pads to ceil(size/stride)
/// outputs with any odd leftover after the image.
pub fn axis(size: usize, k: usize, s: usize, same: bool) -> (usize, usize) {
    if same {
        let out = size.div_ceil(s);
        let need = ((out - 1) * s + k).saturating_sub(size);
        (out, need / 2)
    } else {
        ((size - k) / s + 1, 0)
    }
}

pub struct ConvCase {
    pub n: usize,
    pub c: usize,
    pub o: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub s: usize,
    pub same: bool,
}

/// Direct cross-correlation. Returns the output and, per element, the sum of
/// absolute products (a scale for relative comparisons).
pub fn conv_direct(cs: &ConvCase, x: &[f64], wt: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (oh, pt) = axis(cs.h, cs.k, cs.s, cs.same);
    let (ow, pl) = axis(cs.w, cs.k, cs.s, cs.same);
    let mut out = vec![0.0; cs.n * cs.o * oh * ow];
    let mut scale = vec![0.0; out.len()];
    for n in 0..cs.n {
        for o in 0..cs.o {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b[o];
                    let mut mag = b[o].abs();
                    for c in 0..cs.c {
                        for ky in 0..cs.k {
                            for kx in 0..cs.k {
                                let y = (i * cs.s + ky) as isize - pt as isize;
                                let xx = (j * cs.s + kx) as isize - pl as isize;
                                if y < 0 || xx < 0 || y >= cs.h as isize || xx >= cs.w as isize {
                                    continue;
                                }
                                let xv = x[((n * cs.c + c) * cs.h + y as usize) * cs.w + xx as usize];
                                let wv = wt[((o * cs.c + c) * cs.k + ky) * cs.k + kx];
                                acc += xv * wv;
                                mag += (xv * wv).abs();
                            }
                        }
                    }
                    let idx = ((n * cs.o + o) * oh + i) * ow + j;
                    out[idx] = acc;
                    scale[idx] = mag;
                }
            }
        }
    }
    (out, scale)
}

/// Direct transposed convolution: input `[n,c,h,w]`, weights `[c,o,k,k]`,
/// output `[n,o,h·s,w·s]`, with `(k - s) / 2` cropped from the leading edge.
pub fn conv_transpose_direct(cs: &ConvCase, x: &[f64], wt: &[f64], b: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (oh, ow) = (cs.h * cs.s, cs.w * cs.s);
    let crop = (cs.k - cs.s) / 2;
    let mut out = vec![0.0; cs.n * cs.o * oh * ow];
    let mut scale = vec![0.0; out.len()];
    for n in 0..cs.n {
        for (o, bo) in b.iter().enumerate() {
            let base = (n * cs.o + o) * oh * ow;
            out[base..base + oh * ow].fill(*bo);
            scale[base..base + oh * ow].fill(bo.abs());
        }
        for c in 0..cs.c {
            for i in 0..cs.h {
                for j in 0..cs.w {
                    let xv = x[((n * cs.c + c) * cs.h + i) * cs.w + j];
                    for o in 0..cs.o {
                        for ky in 0..cs.k {
                            for kx in 0..cs.k {
                                let y = (i * cs.s + ky) as isize - crop as isize;
                                let xx = (j * cs.s + kx) as isize - crop as isize;
                                if y < 0 || xx < 0 || y >= oh as isize || xx >= ow as isize {
                                    continue;
                                }
                                let wv = wt[((c * cs.o + o) * cs.k + ky) * cs.k + kx];
                                let idx = ((n * cs.o + o) * oh + y as usize) * ow + xx as usize;
                                out[idx] += xv * wv;
                                scale[idx] += (xv * wv).abs();
                            }
                        }
                    }
                }
            }
        }
    }
    (out, scale)
}

/// Random geometry: `transpose` cases keep `k >= s`, plain ones keep valid
/// padding feasible.
pub fn random_case(r: &mut impl Rng, transpose: bool) -> ConvCase {
    let k = r.random_range(1..=5);
    let s = if transpose { r.random_range(1..=k.min(3)) } else { r.random_range(1..=3) };
    let same = transpose || r.random_bool(0.5);
    let lo = if same { 1 } else { k };
    ConvCase {
        n: r.random_range(1..=2),
        c: r.random_range(1..=4),
        o: r.random_range(1..=4),
        h: r.random_range(lo..=lo + 7),
        w: r.random_range(lo..=lo + 7),
        k,
        s,
        same,
    }
}

#[derive(Debug, PartialEq)]
pub struct BruteMetrics {
    pub counts: [u64; 4],
    pub se: f64,
    pub sp: f64,
    pub ac: f64,
    pub ji: f64,
    pub di: f64,
}

/// Pixel loop over two masks; 0/0 ratios read as 1.
pub fn brute_metrics(pred: &[bool], gt: &[bool]) -> BruteMetrics {
    let (mut tp, mut fp, mut tn, mut fn_) = (0u64, 0u64, 0u64, 0u64);
    for i in 0..pred.len() {
        if pred[i] && gt[i] {
            tp += 1;
        } else if pred[i] {
            fp += 1;
        } else if gt[i] {
            fn_ += 1;
        } else {
            tn += 1;
        }
    }
    let ratio = |a: u64, b: u64| if b == 0 { 1.0 } else { a as f64 / b as f64 };
    let union = tp + fp + fn_;
    BruteMetrics {
        counts: [tp, fp, tn, fn_],
        se: ratio(tp, tp + fn_),
        sp: ratio(tn, tn + fp),
        ac: ratio(tp + tn, tp + fp + tn + fn_),
        ji: ratio(tp, union),
        di: ratio(2 * tp, union + tp),
    }
}
