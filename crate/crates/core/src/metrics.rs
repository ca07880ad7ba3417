//! Confusion counts, the five segmentation metrics and report formatting.

use std::fmt::Write as _;
use std::ops::{Add, AddAssign};

use rayon::prelude::*;

use crate::data::{to_batch, SegmentationSample};
use crate::error::{Error, Result};
use crate::model::FocusNetParams;
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// A 0/1 mask with a shape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryMask {
    shape: Vec<usize>,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(shape: &[usize], data: Vec<bool>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape("binary_mask", shape, &[data.len()]));
        }
        Ok(BinaryMask {
            shape: shape.to_vec(),
            data,
        })
    }

    /// Accepts only tensors whose values are exactly 0 or 1.
    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let data = t
            .data()
            .iter()
            .map(|&v| {
                if v == T::one() {
                    Ok(true)
                } else if v == T::zero() {
                    Ok(false)
                } else {
                    Err(Error::Validation(format!("mask value {} is not binary", v.as_f64())))
                }
            })
            .collect::<Result<_>>()?;
        Self::new(t.shape(), data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn positives(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }
}

/// 1 where `prob > threshold` (strict), else 0.
pub fn binarize<T: Scalar>(prob: &Tensor<T>, threshold: f64) -> Result<BinaryMask> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Validation(format!("threshold {threshold} outside (0, 1)")));
    }
    BinaryMask::new(prob.shape(), prob.data().iter().map(|v| v.as_f64() > threshold).collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

impl Add for ConfusionCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        ConfusionCounts {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
            fn_: self.fn_ + o.fn_,
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        *self = *self + o;
    }
}

pub fn confusion(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts> {
    if pred.shape != gt.shape {
        return Err(Error::shape("confusion", &pred.shape, &gt.shape));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    Se,
    Sp,
    Ac,
    Ji,
    Di,
}

impl Metric {
    pub const ALL: [Metric; 5] = [Metric::Se, Metric::Sp, Metric::Ac, Metric::Ji, Metric::Di];

    pub fn label(self) -> &'static str {
        match self {
            Metric::Se => "SE",
            Metric::Sp => "SP",
            Metric::Ac => "AC",
            Metric::Ji => "JI",
            Metric::Di => "DI",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MetricValues {
    pub se: f64,
    pub sp: f64,
    pub ac: f64,
    pub ji: f64,
    pub di: f64,
}

impl MetricValues {
    pub fn get(&self, m: Metric) -> f64 {
        match m {
            Metric::Se => self.se,
            Metric::Sp => self.sp,
            Metric::Ac => self.ac,
            Metric::Ji => self.ji,
            Metric::Di => self.di,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub values: MetricValues,
    /// Metrics whose ratio was 0/0 and were reported as 1.0.
    pub degenerate: Vec<Metric>,
}

pub fn metrics_from_confusion(c: &ConfusionCounts) -> Result<Metrics> {
    if c.total() == 0 {
        return Err(Error::Validation("metrics of empty confusion counts".to_string()));
    }
    let mut degenerate = Vec::new();
    let mut ratio = |m: Metric, num: u64, den: u64| {
        if den == 0 {
            degenerate.push(m);
            1.0
        } else {
            num as f64 / den as f64
        }
    };
    let values = MetricValues {
        se: ratio(Metric::Se, c.tp, c.tp + c.fn_),
        sp: ratio(Metric::Sp, c.tn, c.tn + c.fp),
        ac: ratio(Metric::Ac, c.tp + c.tn, c.total()),
        ji: ratio(Metric::Ji, c.tp, c.tp + c.fp + c.fn_),
        di: ratio(Metric::Di, 2 * c.tp, 2 * c.tp + c.fp + c.fn_),
    };
    Ok(Metrics { values, degenerate })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub id: String,
    pub counts: ConfusionCounts,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    /// Counts pooled over every pixel of every image.
    pub counts: ConfusionCounts,
    /// Metrics of the pooled counts.
    pub micro: Metrics,
    /// Unweighted mean of per-image metrics.
    pub macro_avg: MetricValues,
    pub per_image: Vec<ImageMetrics>,
}

/// Builds a report from per-image (id, prediction, ground truth) triples.
pub fn report_from_masks(items: &[(String, BinaryMask, BinaryMask)]) -> Result<MetricsReport> {
    if items.is_empty() {
        return Err(Error::Validation("cannot evaluate an empty dataset".to_string()));
    }
    let per_image = items
        .iter()
        .map(|(id, pred, gt)| {
            let counts = confusion(pred, gt)?;
            Ok(ImageMetrics {
                id: id.clone(),
                counts,
                metrics: metrics_from_confusion(&counts)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let counts = per_image
        .iter()
        .fold(ConfusionCounts::default(), |acc, m| acc + m.counts);
    let n = per_image.len() as f64;
    let mean = |m: Metric| per_image.iter().map(|i| i.metrics.values.get(m)).sum::<f64>() / n;
    Ok(MetricsReport {
        counts,
        micro: metrics_from_confusion(&counts)?,
        macro_avg: MetricValues {
            se: mean(Metric::Se),
            sp: mean(Metric::Sp),
            ac: mean(Metric::Ac),
            ji: mean(Metric::Ji),
            di: mean(Metric::Di),
        },
        per_image,
    })
}

/// Scores `predict` (a batch of images to probabilities) on `samples`.
pub fn evaluate_with<F>(samples: &[SegmentationSample], threshold: f64, batch_size: usize, predict: F) -> Result<MetricsReport>
where
    F: Fn(&Tensor<f32>) -> Result<Tensor<f32>> + Sync,
{
    if batch_size == 0 {
        return Err(Error::Validation("batch size must be positive".to_string()));
    }
    let batches: Vec<&[SegmentationSample]> = samples.chunks(batch_size).collect();
    let items = batches
        .par_iter()
        .map(|chunk| {
            let refs: Vec<&SegmentationSample> = chunk.iter().collect();
            let (x, gt) = to_batch(&refs)?;
            let prob = predict(&x)?;
            if prob.shape() != gt.shape() {
                return Err(Error::shape("evaluate", prob.shape(), gt.shape()));
            }
            chunk
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    Ok((
                        s.id.clone(),
                        binarize(&prob.batch_item(i)?, threshold)?,
                        BinaryMask::from_tensor(&gt.batch_item(i)?)?,
                    ))
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    report_from_masks(&items.into_iter().flatten().collect::<Vec<_>>())
}

/// Eval-mode model evaluation.
pub fn evaluate(
    params: &FocusNetParams<f32>,
    samples: &[SegmentationSample],
    threshold: f64,
    batch_size: usize,
) -> Result<MetricsReport> {
    evaluate_with(samples, threshold, batch_size, |x| params.predict(x))
}

/// Decimal rounding to `places` digits, half away from zero, on the shortest
/// decimal representation of `v`.
pub fn round_half_up(v: f64, places: usize) -> String {
    let text = format!("{}", v.abs());
    let (int_part, frac_part) = text.split_once('.').unwrap_or((&text, ""));
    let mut digits: Vec<u8> = int_part.bytes().chain(frac_part.bytes().chain(std::iter::repeat(b'0')).take(places)).collect();
    let round_up = frac_part.as_bytes().get(places).is_some_and(|&d| d >= b'5');
    if round_up {
        let mut i = digits.len();
        loop {
            if i == 0 {
                digits.insert(0, b'1');
                break;
            }
            i -= 1;
            if digits[i] == b'9' {
                digits[i] = b'0';
            } else {
                digits[i] += 1;
                break;
            }
        }
    }
    let split = digits.len() - places;
    let mut out = String::new();
    if v.is_sign_negative() && digits.iter().any(|&d| d != b'0') {
        out.push('-');
    }
    out.push_str(std::str::from_utf8(&digits[..split]).expect("ascii digits"));
    if places > 0 {
        out.push('.');
        out.push_str(std::str::from_utf8(&digits[split..]).expect("ascii digits"));
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct TableRow {
    pub name: String,
    pub values: Vec<f64>,
}

impl TableRow {
    pub fn new(name: impl Into<String>, values: &[f64]) -> Self {
        TableRow {
            name: name.into(),
            values: values.to_vec(),
        }
    }

    pub fn from_metrics(name: impl Into<String>, m: &MetricValues, columns: &[Metric]) -> Self {
        TableRow {
            name: name.into(),
            values: columns.iter().map(|&c| m.get(c)).collect(),
        }
    }
}

const VALUE_WIDTH: usize = 6;

/// Fixed-width table with a header line; values rounded to 4 decimals.
pub fn format_table(columns: &[Metric], rows: &[TableRow]) -> Result<String> {
    if let Some(r) = rows.iter().find(|r| r.values.len() != columns.len()) {
        return Err(Error::Validation(format!(
            "row '{}' has {} values for {} columns",
            r.name,
            r.values.len(),
            columns.len()
        )));
    }
    let name_width = rows.iter().map(|r| r.name.chars().count()).chain([6]).max().unwrap_or(6);
    let mut out = format!("{:<name_width$}", "Method");
    for c in columns {
        write!(out, "  {:>VALUE_WIDTH$}", c.label()).expect("write to string");
    }
    for r in rows {
        write!(out, "\n{:<name_width$}", r.name).expect("write to string");
        for &v in &r.values {
            write!(out, "  {:>VALUE_WIDTH$}", round_half_up(v, 4)).expect("write to string");
        }
    }
    out.push('\n');
    Ok(out)
}

fn csv_line(name: &str, m: &Metrics) -> String {
    let flags: Vec<String> = m.degenerate.iter().map(|d| format!("degenerate_{}", d.label())).collect();
    let v = &m.values;
    format!("{name},{},{},{},{},{},{}\n", v.se, v.sp, v.ac, v.ji, v.di, flags.join("|"))
}

impl MetricsReport {
    /// `name,SE,SP,AC,JI,DI,flags`: the pooled row, the macro row, then one row per image.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,SE,SP,AC,JI,DI,flags\n");
        out.push_str(&csv_line("micro", &self.micro));
        out.push_str(&csv_line(
            "macro",
            &Metrics {
                values: self.macro_avg,
                degenerate: Vec::new(),
            },
        ));
        for img in &self.per_image {
            out.push_str(&csv_line(&img.id, &img.metrics));
        }
        out
    }

    pub fn table(&self, name: &str) -> String {
        let rows = [
            TableRow::from_metrics(format!("{name} (micro)"), &self.micro.values, &Metric::ALL),
            TableRow::from_metrics(format!("{name} (macro)"), &self.macro_avg, &Metric::ALL),
        ];
        format_table(&Metric::ALL, &rows).expect("five columns per row")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(v: &[u8]) -> BinaryMask {
        BinaryMask::new(&[v.len()], v.iter().map(|&b| b == 1).collect()).unwrap()
    }

    #[test]
    fn binarize_is_strict() {
        let t = Tensor::new(&[3], vec![0.5f32, 0.9, 0.1]).unwrap();
        assert_eq!(binarize(&t, 0.5).unwrap().data(), &[false, true, false]);
        assert!(binarize(&t, 1.0).is_err());
    }

    #[test]
    fn enumerated_counts_and_values() {
        let c = confusion(&mask(&[1, 1, 0, 0]), &mask(&[1, 0, 1, 0])).unwrap();
        assert_eq!(c, ConfusionCounts { tp: 1, fp: 1, tn: 1, fn_: 1 });
        let m = metrics_from_confusion(&c).unwrap();
        assert_eq!((m.values.se, m.values.sp, m.values.ac, m.values.di), (0.5, 0.5, 0.5, 0.5));
        assert_eq!(m.values.ji, 1.0 / 3.0);
        assert!(m.degenerate.is_empty());
    }

    #[test]
    fn degenerate_convention() {
        let c = confusion(&mask(&[0, 0, 0]), &mask(&[0, 0, 0])).unwrap();
        let m = metrics_from_confusion(&c).unwrap();
        assert_eq!(m.degenerate, [Metric::Se, Metric::Ji, Metric::Di]);
        assert_eq!((m.values.se, m.values.sp, m.values.ac), (1.0, 1.0, 1.0));
        assert!(metrics_from_confusion(&ConfusionCounts::default()).is_err());
    }

    #[test]
    fn rounding() {
        assert_eq!(round_half_up(0.5, 4), "0.5000");
        assert_eq!(round_half_up(0.76725, 4), "0.7673");
        assert_eq!(round_half_up(0.99995, 4), "1.0000");
        assert_eq!(round_half_up(0.12344999, 4), "0.1234");
        assert_eq!(round_half_up(-0.00001, 4), "0.0000");
    }

    #[test]
    fn table_layout() {
        let t = format_table(&Metric::ALL, &[TableRow::new("x", &[0.5, 1.0, 0.0, 0.25, 0.125])]).unwrap();
        assert_eq!(t, "Method      SE      SP      AC      JI      DI\nx       0.5000  1.0000  0.0000  0.2500  0.1250\n");
    }

    #[test]
    fn stub_predictor_scores_perfectly() {
        let s = crate::data::synth_generate(3, 16, 1, &mut crate::RngState::new(0)).unwrap();
        let samples = s.samples.clone();
        let r = evaluate_with(&samples, 0.5, 2, |x| {
            let n = x.shape()[0];
            let start = samples.iter().position(|s| s.image.data() == &x.data()[..s.image.len()]).unwrap();
            let masks: Vec<_> = samples[start..start + n].iter().map(|s| s.mask.clone()).collect();
            Tensor::stack(&masks)
        })
        .unwrap();
        assert_eq!(r.micro.values, MetricValues { se: 1.0, sp: 1.0, ac: 1.0, ji: 1.0, di: 1.0 });
        assert_eq!(r.per_image.len(), 3);
        let sum = r.per_image.iter().fold(ConfusionCounts::default(), |a, m| a + m.counts);
        assert_eq!(sum, r.counts);
    }
}
