//! Per-class IoU / mean IoU over a pixel confusion matrix, with ignore
//! handling, shardable accumulation, and report rendering (machine-readable
//! plus a one-row text table in the conventional 19-class layout).

use crate::data::{ClassTaxonomy, LabelMap, IGNORE_LABEL};
use crate::tensor::{Scalar, TensorImage};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("prediction shape {pred:?} does not match ground truth {gt:?}")]
    Shape { pred: (usize, usize), gt: (usize, usize) },
    #[error("prediction contains invalid id {value} (classes 0..{num_classes})")]
    InvalidPrediction { value: u8, num_classes: usize },
    #[error("ground-truth id {value} outside 0..{num_classes} and not ignore")]
    GroundTruthRange { value: u8, num_classes: usize },
    #[error("cannot merge a {a}-class matrix with a {b}-class matrix")]
    SizeMismatch { a: usize, b: usize },
    #[error("no class present in either prediction or ground truth")]
    NoClassesPresent,
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// Square pixel-count matrix: rows are ground-truth train ids, columns are
/// predicted train ids. Ignore-labeled pixels are never counted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    counts: Array2<u64>,
}

impl Default for ConfusionMatrix {
    fn default() -> Self {
        Self::new(19)
    }
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        assert!(num_classes >= 1, "need at least one class");
        Self { counts: Array2::zeros((num_classes, num_classes)) }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.nrows()
    }

    pub fn counts(&self) -> &Array2<u64> {
        &self.counts
    }

    pub fn total_pixels(&self) -> u64 {
        self.counts.sum()
    }

    /// Accumulates one (prediction, ground-truth) pair.
    pub fn update(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if pred.dim() != gt.dim() {
            return Err(MetricsError::Shape { pred: pred.dim(), gt: gt.dim() });
        }
        let k = self.num_classes();
        for (&p, &g) in pred.data().iter().zip(gt.data().iter()) {
            if g == IGNORE_LABEL {
                continue;
            }
            if (g as usize) >= k {
                return Err(MetricsError::GroundTruthRange { value: g, num_classes: k });
            }
            if p == IGNORE_LABEL || (p as usize) >= k {
                return Err(MetricsError::InvalidPrediction { value: p, num_classes: k });
            }
            self.counts[[g as usize, p as usize]] += 1;
        }
        Ok(())
    }

    /// Elementwise sum; associative and commutative, so shard-and-merge
    /// accumulation equals a single pass.
    pub fn merge(&self, other: &ConfusionMatrix) -> Result<ConfusionMatrix> {
        if self.num_classes() != other.num_classes() {
            return Err(MetricsError::SizeMismatch {
                a: self.num_classes(),
                b: other.num_classes(),
            });
        }
        Ok(ConfusionMatrix { counts: &self.counts + &other.counts })
    }

    /// IoU per class: diagonal / (row sum + column sum − diagonal).
    /// `None` (not zero) when the class occurs in neither prediction nor
    /// ground truth, so absent classes never drag the mean.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        let k = self.num_classes();
        (0..k)
            .map(|c| {
                let tp = self.counts[[c, c]];
                let row: u64 = (0..k).map(|j| self.counts[[c, j]]).sum();
                let col: u64 = (0..k).map(|i| self.counts[[i, c]]).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }

    /// Fraction of counted pixels on the diagonal; 0 when nothing was counted.
    pub fn pixel_accuracy(&self) -> f64 {
        let total = self.total_pixels();
        if total == 0 {
            return 0.0;
        }
        let trace: u64 = (0..self.num_classes()).map(|c| self.counts[[c, c]]).sum();
        trace as f64 / total as f64
    }
}

/// Mean over present classes.
pub fn mean_iou(per_class: &[Option<f64>]) -> Result<f64> {
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    if present.is_empty() {
        return Err(MetricsError::NoClassesPresent);
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// Per-pixel argmax over the class axis, ties broken toward the lower
/// class index. Returns one map per batch item.
pub fn argmax_predictions<T: Scalar>(logits: &TensorImage<T>) -> Vec<LabelMap> {
    let (b, k, h, w) = logits.dim();
    assert!(k < IGNORE_LABEL as usize, "class axis too large for u8 train ids");
    (0..b)
        .map(|n| {
            let data = Array2::from_shape_fn((h, w), |(y, x)| {
                let mut best = 0usize;
                let mut best_v = logits[[n, 0, y, x]];
                for c in 1..k {
                    let v = logits[[n, c, y, x]];
                    if v > best_v {
                        best_v = v;
                        best = c;
                    }
                }
                best as u8
            });
            LabelMap::new(data).expect("argmax indices are valid train ids")
        })
        .collect()
}

/// Evaluation summary in taxonomy class order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub class_names: Vec<String>,
    /// Per-class IoU in [0,1]; `None` marks classes absent from both
    /// prediction and ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub pixel_accuracy: f64,
    pub total_pixels: u64,
}

impl MetricsReport {
    pub fn from_confusion(conf: &ConfusionMatrix, taxonomy: &ClassTaxonomy) -> Result<Self> {
        let per_class_iou = conf.iou_per_class();
        let miou = mean_iou(&per_class_iou)?;
        let class_names = (0..conf.num_classes())
            .map(|c| {
                if c < taxonomy.num_classes() {
                    taxonomy.name(c as u8).to_string()
                } else {
                    format!("class{c}")
                }
            })
            .collect();
        Ok(Self {
            class_names,
            per_class_iou,
            miou,
            pixel_accuracy: conf.pixel_accuracy(),
            total_pixels: conf.total_pixels(),
        })
    }

    /// One-row text table: class columns (IoU as percent, 2 decimals,
    /// `-` for absent classes) followed by the mIoU column.
    pub fn text_table(&self) -> String {
        let mut header = Vec::new();
        let mut row = Vec::new();
        for (name, iou) in self.class_names.iter().zip(&self.per_class_iou) {
            header.push(name.clone());
            row.push(match iou {
                Some(v) => format!("{:.2}", v * 100.0),
                None => "-".to_string(),
            });
        }
        header.push("mIoU".to_string());
        row.push(format!("{:.2}", self.miou * 100.0));

        let widths: Vec<usize> = header
            .iter()
            .zip(&row)
            .map(|(h, r)| h.len().max(r.len()))
            .collect();
        let line = |cells: &[String]| -> String {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:>w$}"))
                .collect::<Vec<_>>()
                .join("  ")
        };
        format!("{}\n{}\n", line(&header), line(&row))
    }
}

/// A published per-class IoU row (percent scale) bundled as reference
/// data: checking that each row's mean reproduces its printed mIoU guards
/// the transcription and pins down the mean-over-classes convention.
pub struct ReferenceRow {
    pub label: &'static str,
    pub per_class_percent: [f64; 19],
    pub printed_miou: f64,
}

pub const REFERENCE_ROWS: [ReferenceRow; 2] = [
    ReferenceRow {
        label: "cityscapes-trained",
        per_class_percent: [
            92.59, 58.56, 78.65, 5.83, 10.11, 30.48, 16.33, 32.45, 78.97, 30.35, 80.25, 52.98,
            14.57, 80.77, 0.46, 0.02, 0.02, 0.11, 49.52,
        ],
        printed_miou: 37.53,
    },
    ReferenceRow {
        label: "nightcity-fine-trained",
        per_class_percent: [
            87.25, 37.63, 77.84, 23.79, 32.72, 23.58, 9.87, 28.06, 49.62, 14.63, 82.82, 29.76,
            0.01, 70.84, 20.65, 24.55, 0.0, 0.0, 20.01,
        ],
        printed_miou: 33.35,
    },
];
