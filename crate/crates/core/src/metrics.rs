//! Overlap metrics with per-volume pooling.
//!
//! Confusion counts are summed over every slice of a volume before any ratio
//! is taken; the reported aggregate is the arithmetic mean over volumes. A
//! ratio whose denominator is zero (nothing predicted and nothing present)
//! scores 1.0.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{load_batches, VolumeDataset};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::combined_loss;
use crate::model::Model;
use crate::nn::Mode;
use crate::tensor::Scalar;

pub const EMPTY_CONVENTION: &str = "a metric whose denominator is zero scores 1.0";

/// A binary `height × width` mask holding 0 or 1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Data(format!(
                "mask buffer has {} values, expected {height}x{width}",
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::Data("mask is not binary".into()));
        }
        Ok(Mask {
            height,
            width,
            data,
        })
    }

    /// 1 where `probs > threshold`.
    pub fn threshold<T: Scalar>(probs: &[T], height: usize, width: usize, threshold: T) -> Self {
        Mask {
            height,
            width,
            data: probs.iter().map(|&p| u8::from(p > threshold)).collect(),
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

impl std::ops::AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.tn += o.tn;
    }
}

/// Pixel-wise confusion counts of two equal-length {0, 1} masks.
pub fn confusion(pred: &[u8], gt: &[u8]) -> Result<ConfusionCounts> {
    if pred.len() != gt.len() {
        return Err(Error::shape("confusion", &[pred.len()], &[gt.len()]));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (1, 1) => c.tp += 1,
            (1, 0) => c.fp += 1,
            (0, 1) => c.fn_ += 1,
            (0, 0) => c.tn += 1,
            _ => return Err(Error::Data(format!("non-binary mask values ({p}, {g})"))),
        }
    }
    Ok(c)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub dice: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

pub fn metrics_from_counts(c: &ConfusionCounts) -> Metrics {
    Metrics {
        dice: ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_),
        iou: ratio(c.tp, c.tp + c.fp + c.fn_),
        precision: ratio(c.tp, c.tp + c.fp),
        recall: ratio(c.tp, c.tp + c.fn_),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeMetrics {
    pub volume_id: String,
    pub dice: f64,
    pub iou: f64,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// Free-form description of the evaluated model, e.g. `xnet+fsm`.
    #[serde(default)]
    pub label: String,
    pub convention: String,
    pub volumes: Vec<VolumeMetrics>,
    pub aggregate: Metrics,
}

impl MetricReport {
    /// Builds the report from pooled counts, one entry per volume.
    pub fn from_counts(label: &str, per_volume: &[(String, ConfusionCounts)]) -> Result<Self> {
        if per_volume.is_empty() {
            return Err(Error::Data("cannot report on zero volumes".into()));
        }
        let volumes: Vec<VolumeMetrics> = per_volume
            .iter()
            .map(|(id, c)| {
                let m = metrics_from_counts(c);
                VolumeMetrics {
                    volume_id: id.clone(),
                    dice: m.dice,
                    iou: m.iou,
                    precision: m.precision,
                    recall: m.recall,
                }
            })
            .collect();
        let n = volumes.len() as f64;
        let mean = |f: fn(&VolumeMetrics) -> f64| volumes.iter().map(f).sum::<f64>() / n;
        let aggregate = Metrics {
            dice: mean(|v| v.dice),
            iou: mean(|v| v.iou),
            precision: mean(|v| v.precision),
            recall: mean(|v| v.recall),
        };
        Ok(MetricReport {
            label: label.to_string(),
            convention: EMPTY_CONVENTION.to_string(),
            volumes,
            aggregate,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// `Dice 0.1234  IoU ...` with four decimals.
    pub fn summary_line(&self) -> String {
        let a = &self.aggregate;
        format!(
            "Dice {:.4}  IoU {:.4}  precision {:.4}  recall {:.4}",
            a.dice, a.iou, a.precision, a.recall
        )
    }
}

/// Markdown table juxtaposing several reports.
pub fn merge_table(reports: &[MetricReport]) -> String {
    let mut out = String::from("| model | Dice | IoU | precision | recall | volumes |\n");
    out.push_str("|---|---|---|---|---|---|\n");
    for r in reports {
        let a = &r.aggregate;
        let _ = writeln!(
            out,
            "| {} | {:.4} | {:.4} | {:.4} | {:.4} | {} |",
            r.label,
            a.dice,
            a.iou,
            a.precision,
            a.recall,
            r.volumes.len()
        );
    }
    out
}

/// Evaluates `volumes` of `dataset` in eval mode. Returns the metric report
/// and the slice-weighted mean combined loss.
pub fn evaluate_with_loss<T: Scalar>(
    model: &mut Model<T>,
    dataset: &VolumeDataset,
    volumes: &[usize],
    batch_size: usize,
    label: &str,
) -> Result<(MetricReport, f64)> {
    if volumes.is_empty() {
        return Err(Error::Data("evaluation fold is empty".into()));
    }
    let mut counts = vec![ConfusionCounts::default(); dataset.volumes.len()];
    let (mut loss_sum, mut seen) = (0.0, 0usize);
    let half = T::from_f64_lossy(0.5);
    for batch in load_batches::<T>(dataset, volumes, batch_size, 0, None) {
        let mut g = Graph::new();
        let x = g.input(batch.images)?;
        let t = g.input(batch.masks)?;
        let probs = model.forward(&mut g, x, Mode::Eval)?;
        let loss = combined_loss(&mut g, probs, t)?;
        let n = batch.slices.len();
        loss_sum += g.value(loss).item()?.to_f64().unwrap_or(f64::NAN) * n as f64;
        seen += n;
        let plane = dataset.height * dataset.width;
        let p = g.value(probs).data();
        for (k, &(v, s)) in batch.slices.iter().enumerate() {
            let pred = Mask::threshold(&p[k * plane..(k + 1) * plane], dataset.height, dataset.width, half);
            counts[v] += confusion(pred.data(), &dataset.volumes[v].masks[s])?;
        }
    }
    let per_volume: Vec<(String, ConfusionCounts)> = volumes
        .iter()
        .map(|&v| (dataset.volumes[v].id.clone(), counts[v]))
        .collect();
    Ok((
        MetricReport::from_counts(label, &per_volume)?,
        loss_sum / seen as f64,
    ))
}

/// Per-volume evaluation of a model on the given volumes.
pub fn evaluate_volumes<T: Scalar>(
    model: &mut Model<T>,
    dataset: &VolumeDataset,
    volumes: &[usize],
    label: &str,
) -> Result<MetricReport> {
    evaluate_with_loss(model, dataset, volumes, 8, label).map(|(r, _)| r)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counted_confusion() {
        let c = confusion(&[1, 1, 0, 0], &[1, 0, 1, 0]).unwrap();
        assert_eq!(
            c,
            ConfusionCounts {
                tp: 1,
                fp: 1,
                fn_: 1,
                tn: 1
            }
        );
        assert_eq!(c.total(), 4);
        let m = metrics_from_counts(&c);
        assert_eq!(m.dice, 0.5);
        assert_eq!(m.iou, 1.0 / 3.0);
        assert_eq!(m.precision, 0.5);
        assert_eq!(m.recall, 0.5);
    }

    #[test]
    fn identical_and_complementary_masks() {
        let gt = [1, 0, 0, 1, 1];
        let c = confusion(&gt, &gt).unwrap();
        assert_eq!((c.fp, c.fn_), (0, 0));
        let inv: Vec<u8> = gt.iter().map(|&v| 1 - v).collect();
        let c = confusion(&inv, &gt).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
    }

    #[test]
    fn empty_vs_empty_scores_one() {
        let m = metrics_from_counts(&ConfusionCounts {
            tp: 0,
            fp: 0,
            fn_: 0,
            tn: 10,
        });
        assert_eq!(
            m,
            Metrics {
                dice: 1.0,
                iou: 1.0,
                precision: 1.0,
                recall: 1.0
            }
        );
    }

    #[test]
    fn rejects_non_binary_and_mismatched() {
        assert!(confusion(&[2], &[1]).is_err());
        assert!(confusion(&[1, 0], &[1]).is_err());
        assert!(Mask::new(1, 2, vec![0, 3]).is_err());
    }

    #[test]
    fn aggregate_is_mean_over_volumes() {
        // dice 0.4: tp=2, fp+fn=6; dice 0.6: tp=3, fp+fn=4
        let per = vec![
            ("a".to_string(), ConfusionCounts { tp: 2, fp: 6, fn_: 0, tn: 0 }),
            ("b".to_string(), ConfusionCounts { tp: 3, fp: 0, fn_: 4, tn: 0 }),
        ];
        let r = MetricReport::from_counts("x", &per).unwrap();
        assert_eq!(r.volumes[0].dice, 0.4);
        assert_eq!(r.volumes[1].dice, 0.6);
        assert!((r.aggregate.dice - 0.5).abs() < 1e-15);
        assert!(MetricReport::from_counts("x", &[]).is_err());
    }

    #[test]
    fn report_json_field_names() {
        let per = vec![("v".to_string(), ConfusionCounts { tp: 1, fp: 0, fn_: 0, tn: 3 })];
        let r = MetricReport::from_counts("m", &per).unwrap();
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        let rec = &v["volumes"][0];
        for key in ["volume_id", "dice", "iou", "precision", "recall"] {
            assert!(rec.get(key).is_some(), "missing {key}");
        }
        assert!(v["aggregate"].get("dice").is_some());
        let table = merge_table(&[r.clone(), r]);
        assert_eq!(table.lines().count(), 4);
        assert!(table.contains("| m | 1.0000 | 1.0000 | 1.0000 | 1.0000 | 1 |"));
    }
}
