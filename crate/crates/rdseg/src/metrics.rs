//! Segmentation evaluation: confusion matrix, per-class IoU, mean IoU, pixel
//! accuracy, and summary statistics of difficulty maps. Also owns the schema
//! of the per-evaluation metrics CSV.

use thiserror::Error;

use crate::distill::DifficultyMap;
use crate::grid::LabelGrid;
use crate::tensor::DiffTensor;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("class {class} out of range [0, {classes}) in {what}")]
    ClassOutOfRange { class: u32, classes: usize, what: &'static str },
    #[error("prediction and label grids differ: {0}")]
    ShapeMismatch(String),
    #[error("every class is absent; mIoU is undefined")]
    Empty,
}

/// Reserved sentinel for pixels that should not be counted. Unused by the
/// synthetic data (annotation is complete) but honored by `accumulate`.
pub const IGNORE_LABEL: u32 = u32::MAX;

/// Square count matrix, rows = ground truth, columns = prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    num_classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.num_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Count every pixel of a prediction/label pair. Accumulation is
    /// order-independent; labels equal to [`IGNORE_LABEL`] are skipped.
    pub fn accumulate(
        &mut self,
        predictions: &LabelGrid,
        labels: &LabelGrid,
    ) -> Result<(), MetricsError> {
        if (predictions.batch(), predictions.height(), predictions.width())
            != (labels.batch(), labels.height(), labels.width())
        {
            return Err(MetricsError::ShapeMismatch(format!(
                "{}x{}x{} vs {}x{}x{}",
                predictions.batch(),
                predictions.height(),
                predictions.width(),
                labels.batch(),
                labels.height(),
                labels.width()
            )));
        }
        for (&pred, &truth) in predictions.labels().iter().zip(labels.labels()) {
            if truth == IGNORE_LABEL {
                continue;
            }
            if truth as usize >= self.num_classes {
                return Err(MetricsError::ClassOutOfRange {
                    class: truth,
                    classes: self.num_classes,
                    what: "labels",
                });
            }
            if pred as usize >= self.num_classes {
                return Err(MetricsError::ClassOutOfRange {
                    class: pred,
                    classes: self.num_classes,
                    what: "predictions",
                });
            }
            self.counts[truth as usize * self.num_classes + pred as usize] += 1;
        }
        Ok(())
    }

    /// Exact integer merge of a shard (for parallel evaluation).
    pub fn merge(&mut self, other: &ConfusionMatrix) {
        assert_eq!(self.num_classes, other.num_classes);
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    /// Per-class intersection over union; `None` for classes absent from
    /// both prediction and ground truth.
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        let c = self.num_classes;
        (0..c)
            .map(|k| {
                let diag = self.counts[k * c + k];
                let row: u64 = (0..c).map(|j| self.counts[k * c + j]).sum();
                let col: u64 = (0..c).map(|i| self.counts[i * c + k]).sum();
                let union = row + col - diag;
                if union == 0 {
                    None
                } else {
                    Some(diag as f64 / union as f64)
                }
            })
            .collect()
    }

    /// Mean IoU over classes present in prediction or truth; absent classes
    /// are excluded from the mean rather than scored 0 or 1.
    pub fn miou(&self) -> Result<f64, MetricsError> {
        let ious: Vec<f64> = self.per_class_iou().into_iter().flatten().collect();
        if ious.is_empty() {
            return Err(MetricsError::Empty);
        }
        Ok(ious.iter().sum::<f64>() / ious.len() as f64)
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 0.0;
        }
        let diag: u64 = (0..self.num_classes).map(|k| self.count(k, k)).sum();
        diag as f64 / total as f64
    }
}

/// Argmax over the class axis of a `[B, C, H, W]` logit map; ties resolve to
/// the lowest class index.
pub fn predictions_from_logits(logits: &DiffTensor) -> LabelGrid {
    let shape = logits.shape();
    assert_eq!(shape.len(), 4, "expected [B, C, H, W]");
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let plane = h * w;
    let x = logits.data();
    let mut out = vec![0u32; b * plane];
    for bi in 0..b {
        for p in 0..plane {
            let mut best = x[(bi * c) * plane + p];
            let mut best_c = 0u32;
            for ci in 1..c {
                let v = x[(bi * c + ci) * plane + p];
                if v > best {
                    best = v;
                    best_c = ci as u32;
                }
            }
            out[bi * plane + p] = best_c;
        }
    }
    LabelGrid::new(b, h, w, out)
}

/// Summary of a difficulty map: mean weight, fraction of active pixels, and
/// a 16-bin histogram over `[0, 1]` (1.0 lands in the top bin).
#[derive(Debug, Clone, PartialEq)]
pub struct DifficultyStats {
    pub mean: f64,
    pub active_fraction: f64,
    pub histogram: [u64; 16],
}

pub fn difficulty_stats(map: &DifficultyMap) -> DifficultyStats {
    let values = map.grid().values();
    let mut histogram = [0u64; 16];
    for v in values {
        let bin = ((v * 16.0).floor() as usize).min(15);
        histogram[bin] += 1;
    }
    DifficultyStats {
        mean: map.mean(),
        active_fraction: map.active_fraction(),
        histogram,
    }
}

/// One per-evaluation row of the metrics CSV.
#[derive(Debug, Clone)]
pub struct EvalRow {
    pub iter: u64,
    /// Stage label of the latest training iteration ("tfe"/"tse", or "-"
    /// for unstaged methods and the pre-training evaluation).
    pub stage: String,
    pub miou: f64,
    pub pixel_acc: f64,
    pub per_class_iou: Vec<Option<f64>>,
    pub mean_rd: f64,
    pub active_fraction: f64,
    pub loss_total: f64,
    pub loss_task_weighted: f64,
    pub loss_kd: f64,
    pub loss_extras: f64,
}

/// Header matching [`format_eval_row`]; per-class IoU columns expand with
/// the class count.
pub fn eval_csv_header(num_classes: usize) -> String {
    let mut cols = vec!["iter".to_string(), "stage".into(), "miou".into(), "pixel_acc".into()];
    for c in 0..num_classes {
        cols.push(format!("iou_class_{c}"));
    }
    cols.extend(
        ["mean_rd", "active_fraction", "loss_total", "loss_task_weighted", "loss_kd", "loss_extras"]
            .map(String::from),
    );
    cols.join(",")
}

pub fn format_eval_row(row: &EvalRow) -> String {
    let mut cols = vec![
        row.iter.to_string(),
        row.stage.clone(),
        format!("{:.6}", row.miou),
        format!("{:.6}", row.pixel_acc),
    ];
    for iou in &row.per_class_iou {
        cols.push(match iou {
            Some(v) => format!("{v:.6}"),
            None => String::new(),
        });
    }
    for v in [
        row.mean_rd,
        row.active_fraction,
        row.loss_total,
        row.loss_task_weighted,
        row.loss_kd,
        row.loss_extras,
    ] {
        cols.push(format!("{v:.6}"));
    }
    cols.join(",")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distill::MapKind;
    use crate::grid::PixelGrid;

    fn grid(values: Vec<u32>) -> LabelGrid {
        let n = values.len();
        LabelGrid::new(1, 1, n, values)
    }

    #[test]
    fn empty_batch_leaves_matrix_unchanged() {
        let mut cm = ConfusionMatrix::new(3);
        let empty = LabelGrid::new(1, 1, 1, vec![IGNORE_LABEL]);
        let preds = grid(vec![0]);
        cm.accumulate(&preds, &empty).unwrap();
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn perfect_predictions_are_diagonal() {
        let mut cm = ConfusionMatrix::new(4);
        let labels = grid(vec![0, 1, 2, 3, 2, 1]);
        cm.accumulate(&labels.clone(), &labels).unwrap();
        for t in 0..4 {
            for p in 0..4 {
                let expect = if t == p { if t == 0 || t == 3 { 1 } else { 2 } } else { 0 };
                assert_eq!(cm.count(t, p), expect);
            }
        }
        assert_eq!(cm.miou().unwrap(), 1.0);
    }

    #[test]
    fn hand_tally_and_miou() {
        // pred = [0,0,1,1], gt = [0,1,1,1]: counts = [[1,0],[1,2]];
        // IoU_0 = 1/2, IoU_1 = 2/3, mIoU = 7/12.
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&grid(vec![0, 0, 1, 1]), &grid(vec![0, 1, 1, 1])).unwrap();
        assert_eq!(cm.count(0, 0), 1);
        assert_eq!(cm.count(0, 1), 0);
        assert_eq!(cm.count(1, 0), 1);
        assert_eq!(cm.count(1, 1), 2);
        let iou = cm.per_class_iou();
        assert_eq!(iou[0], Some(0.5));
        assert_eq!(iou[1], Some(2.0 / 3.0));
        assert!((cm.miou().unwrap() - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_class_is_an_error() {
        let mut cm = ConfusionMatrix::new(2);
        let err = cm.accumulate(&grid(vec![2]), &grid(vec![0])).unwrap_err();
        assert!(matches!(err, MetricsError::ClassOutOfRange { what: "predictions", .. }));
    }

    #[test]
    fn all_absent_is_an_error() {
        let cm = ConfusionMatrix::new(3);
        assert!(matches!(cm.miou(), Err(MetricsError::Empty)));
    }

    /// Independent reference: per class, count set intersection and union
    /// directly from the pixel arrays.
    fn miou_set_oracle(preds: &[u32], labels: &[u32], classes: u32) -> Option<f64> {
        let mut ious = Vec::new();
        for c in 0..classes {
            let inter = preds
                .iter()
                .zip(labels)
                .filter(|(p, l)| **p == c && **l == c)
                .count();
            let union = preds
                .iter()
                .zip(labels)
                .filter(|(p, l)| **p == c || **l == c)
                .count();
            if union > 0 {
                ious.push(inter as f64 / union as f64);
            }
        }
        if ious.is_empty() {
            None
        } else {
            Some(ious.iter().sum::<f64>() / ious.len() as f64)
        }
    }

    #[test]
    fn miou_matches_set_oracle_on_random_maps() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(123);
        for case in 0..100 {
            let classes = if case % 2 == 0 { 2 } else { 5 };
            let preds: Vec<u32> = (0..64).map(|_| rng.gen_range(0..classes)).collect();
            let labels: Vec<u32> = (0..64).map(|_| rng.gen_range(0..classes)).collect();
            let mut cm = ConfusionMatrix::new(classes as usize);
            cm.accumulate(
                &LabelGrid::new(1, 8, 8, preds.clone()),
                &LabelGrid::new(1, 8, 8, labels.clone()),
            )
            .unwrap();
            let oracle = miou_set_oracle(&preds, &labels, classes).unwrap();
            assert!((cm.miou().unwrap() - oracle).abs() < 1e-12);
        }
    }

    #[test]
    fn accumulation_is_order_independent() {
        use rand::{seq::SliceRandom, Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let preds: Vec<u32> = (0..100).map(|_| rng.gen_range(0..4)).collect();
        let labels: Vec<u32> = (0..100).map(|_| rng.gen_range(0..4)).collect();
        let mut order: Vec<usize> = (0..100).collect();
        order.shuffle(&mut rng);

        let mut a = ConfusionMatrix::new(4);
        a.accumulate(&LabelGrid::new(1, 10, 10, preds.clone()), &LabelGrid::new(1, 10, 10, labels.clone()))
            .unwrap();
        let mut b = ConfusionMatrix::new(4);
        let sp: Vec<u32> = order.iter().map(|&i| preds[i]).collect();
        let sl: Vec<u32> = order.iter().map(|&i| labels[i]).collect();
        b.accumulate(&LabelGrid::new(1, 10, 10, sp), &LabelGrid::new(1, 10, 10, sl)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn miou_invariant_under_class_permutation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let preds: Vec<u32> = (0..64).map(|_| rng.gen_range(0..4)).collect();
        let labels: Vec<u32> = (0..64).map(|_| rng.gen_range(0..4)).collect();
        let perm = [2u32, 0, 3, 1];
        let apply = |v: &[u32]| v.iter().map(|&x| perm[x as usize]).collect::<Vec<u32>>();

        let mut a = ConfusionMatrix::new(4);
        a.accumulate(&LabelGrid::new(1, 8, 8, preds.clone()), &LabelGrid::new(1, 8, 8, labels.clone()))
            .unwrap();
        let mut b = ConfusionMatrix::new(4);
        b.accumulate(&LabelGrid::new(1, 8, 8, apply(&preds)), &LabelGrid::new(1, 8, 8, apply(&labels)))
            .unwrap();
        assert!((a.miou().unwrap() - b.miou().unwrap()).abs() < 1e-15);
    }

    #[test]
    fn merge_is_exact() {
        let mut a = ConfusionMatrix::new(2);
        a.accumulate(&grid(vec![0, 1]), &grid(vec![0, 0])).unwrap();
        let mut b = ConfusionMatrix::new(2);
        b.accumulate(&grid(vec![1, 1]), &grid(vec![1, 0])).unwrap();
        let mut whole = ConfusionMatrix::new(2);
        whole
            .accumulate(&grid(vec![0, 1, 1, 1]), &grid(vec![0, 0, 1, 0]))
            .unwrap();
        a.merge(&b);
        assert_eq!(a, whole);
    }

    fn tse_map(values: Vec<f64>) -> DifficultyMap {
        let n = values.len();
        DifficultyMap::new_tse(PixelGrid::new(1, 1, n, values)).unwrap()
    }

    #[test]
    fn difficulty_stats_cases() {
        let zeros = difficulty_stats(&tse_map(vec![0.0; 8]));
        assert_eq!(zeros.active_fraction, 0.0);
        assert_eq!(zeros.histogram[0], 8);

        let ones = difficulty_stats(
            &DifficultyMap::new_tfe(PixelGrid::new(1, 1, 8, vec![1.0; 8])).unwrap(),
        );
        assert_eq!(ones.mean, 1.0);
        assert_eq!(ones.histogram[15], 8);

        let half = difficulty_stats(&tse_map(vec![0.0, 1.0, 0.0, 1.0]));
        assert_eq!(half.mean, 0.5);
        assert_eq!(half.active_fraction, 0.5);
    }

    #[test]
    fn predictions_take_lowest_index_on_ties() {
        let logits = DiffTensor::new(vec![1, 3, 1, 1], vec![0.5, 0.5, 0.1]).unwrap();
        let preds = predictions_from_logits(&logits);
        assert_eq!(preds.labels(), &[0]);
    }

    #[test]
    fn csv_header_matches_row_arity() {
        let row = EvalRow {
            iter: 200,
            stage: "tse".into(),
            miou: 0.5,
            pixel_acc: 0.75,
            per_class_iou: vec![Some(0.5), None, Some(0.25)],
            mean_rd: 0.1,
            active_fraction: 0.2,
            loss_total: 1.5,
            loss_task_weighted: 1.0,
            loss_kd: 0.5,
            loss_extras: 0.0,
        };
        let header = eval_csv_header(3);
        let line = format_eval_row(&row);
        assert_eq!(header.split(',').count(), line.split(',').count());
        assert!(line.contains(",,"), "absent class renders as empty cell");
    }
}
