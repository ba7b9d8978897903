//! Relative-difficulty distillation: per-pixel difficulty maps computed from
//! prediction discrepancies, the reweighted task loss, the pixel-wise
//! distillation loss, and the two-stage total loss with a hook for extra
//! distillation terms.
//!
//! Difficulty maps are constants: they are computed from detached values and
//! never participate in gradient flow. The early stage weights the task loss
//! by `exp(-KL)` between the teacher's two heads (continuous, favors easy
//! pixels); the late stage weights it by a binary combination of thresholded
//! teacher/student confidence maps (selects pixels worth learning).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{LabelGrid, PixelGrid};
use crate::imgio;
use crate::model::LogitPair;
use crate::tensor::{DiffTensor, Tape, TensorError, ValueId};

#[derive(Debug, Error)]
pub enum DistillError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{0}")]
    ShapeMismatch(String),
    #[error("TFE stage needs a dual-head teacher: auxiliary logits are missing; \
             run the teacher forward with want_aux = true or set the stage fraction p to 0")]
    MissingAuxiliary,
    #[error("invalid distillation config: {0}")]
    InvalidConfig(String),
    #[error("confidence {value} outside (0, 1) at flat index {index}")]
    ConfidenceOutOfRange { value: f64, index: usize },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// How the thresholded teacher/student difficulty maps combine in the late
/// stage. `Xor` is the default; `Strict` keeps only pixels the teacher has
/// mastered and the student has not.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum CombineMode {
    Xor,
    And,
    Or,
    Strict,
}

impl std::fmt::Display for CombineMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            CombineMode::Xor => "XOR",
            CombineMode::And => "AND",
            CombineMode::Or => "OR",
            CombineMode::Strict => "STRICT",
        };
        f.write_str(s)
    }
}

/// Training stage of the two-stage schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    Tfe,
    Tse,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Tfe => "tfe",
            Stage::Tse => "tse",
        })
    }
}

/// Which kind of difficulty map: continuous early-stage weights in `(0, 1]`
/// or binary late-stage weights in `{0, 1}`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MapKind {
    Tfe,
    Tse,
}

/// Per-pixel non-negative loss weights.
#[derive(Debug, Clone)]
pub struct DifficultyMap {
    kind: MapKind,
    grid: PixelGrid,
}

impl DifficultyMap {
    /// Continuous map; every value must lie in `(0, 1]`.
    pub fn new_tfe(grid: PixelGrid) -> Result<Self, DistillError> {
        if let Some(v) = grid.values().iter().find(|v| !(**v > 0.0 && **v <= 1.0)) {
            return Err(DistillError::ShapeMismatch(format!(
                "TFE difficulty value {v} outside (0, 1]"
            )));
        }
        Ok(Self { kind: MapKind::Tfe, grid })
    }

    /// Binary map; every value must be exactly 0 or 1.
    pub fn new_tse(grid: PixelGrid) -> Result<Self, DistillError> {
        if let Some(v) = grid.values().iter().find(|v| **v != 0.0 && **v != 1.0) {
            return Err(DistillError::ShapeMismatch(format!(
                "TSE difficulty value {v} is not binary"
            )));
        }
        Ok(Self { kind: MapKind::Tse, grid })
    }

    pub fn kind(&self) -> MapKind {
        self.kind
    }

    pub fn grid(&self) -> &PixelGrid {
        &self.grid
    }

    pub fn mean(&self) -> f64 {
        let v = self.grid.values();
        v.iter().sum::<f64>() / v.len() as f64
    }

    /// Fraction of pixels with a strictly positive weight.
    pub fn active_fraction(&self) -> f64 {
        let v = self.grid.values();
        v.iter().filter(|x| **x > 0.0).count() as f64 / v.len() as f64
    }
}

/// All schedule, threshold and mode hyperparameters of the distillation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    /// Fraction of total iterations spent in the early (TFE) stage.
    pub stage_fraction: f64,
    /// Confidence threshold `t`; a pixel counts as difficult when its
    /// confidence is `<= t`.
    pub confidence_threshold: f64,
    /// Distillation temperature for the pixel-wise KD loss.
    pub temperature: f64,
    /// Late-stage combination of the two thresholded maps.
    pub mode: CombineMode,
    /// Total training iterations the schedule is measured against.
    pub total_iters: u64,
    /// Divide the weighted task loss by the weight sum instead of the pixel
    /// count. Off by default: the per-pixel weighting then stays literal.
    #[serde(default)]
    pub normalize_by_weight_sum: bool,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            stage_fraction: 0.10,
            confidence_threshold: 0.70,
            temperature: 1.0,
            mode: CombineMode::Xor,
            total_iters: 2000,
            normalize_by_weight_sum: false,
        }
    }
}

impl DistillConfig {
    pub fn validate(&self) -> Result<(), DistillError> {
        if !(0.0..=1.0).contains(&self.stage_fraction) {
            return Err(DistillError::InvalidConfig(format!(
                "stage_fraction must lie in [0, 1], got {}",
                self.stage_fraction
            )));
        }
        if !(self.confidence_threshold > 0.0 && self.confidence_threshold < 1.0) {
            return Err(DistillError::InvalidConfig(format!(
                "confidence_threshold must lie in (0, 1), got {}",
                self.confidence_threshold
            )));
        }
        if self.temperature <= 0.0 {
            return Err(DistillError::InvalidConfig(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.total_iters == 0 {
            return Err(DistillError::InvalidConfig("total_iters must be positive".into()));
        }
        Ok(())
    }
}

/// Number of iterations assigned to the TFE stage: `round(p * total_iters)`.
/// The boundary iteration itself belongs to TFE.
pub fn tfe_iterations(config: &DistillConfig) -> u64 {
    (config.stage_fraction * config.total_iters as f64).round() as u64
}

/// Stage for a 1-based iteration index.
pub fn stage_for_iter(iter: u64, config: &DistillConfig) -> Stage {
    if iter <= tfe_iterations(config) {
        Stage::Tfe
    } else {
        Stage::Tse
    }
}

/// Scalar components of one evaluated total loss.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: f64,
    pub task_weighted: f64,
    pub kd: f64,
    pub extras: Vec<(String, f64)>,
    pub stage: Stage,
    pub mean_rd: f64,
    pub active_pixel_fraction: f64,
}

fn check_bchw(what: &str, shape: &[usize]) -> Result<(usize, usize, usize, usize), DistillError> {
    if shape.len() != 4 || shape[1] < 2 {
        return Err(DistillError::ShapeMismatch(format!(
            "{what} must be [B, C>=2, H, W], got {shape:?}"
        )));
    }
    Ok((shape[0], shape[1], shape[2], shape[3]))
}

/// Per-pixel maximum softmax probability of a `[B, C, H, W]` logit map.
/// Computed from detached values; never recorded on a tape.
pub fn confidence_map(logits: &DiffTensor) -> Result<PixelGrid, DistillError> {
    let (b, c, h, w) = check_bchw("logits", logits.shape())?;
    let x = logits.data();
    let plane = h * w;
    let mut out = vec![0.0; b * plane];
    for bi in 0..b {
        for p in 0..plane {
            let at = |ci: usize| x[(bi * c + ci) * plane + p];
            let mut max = f64::NEG_INFINITY;
            for ci in 0..c {
                max = max.max(at(ci));
            }
            let mut total = 0.0;
            for ci in 0..c {
                total += (at(ci) - max).exp();
            }
            // max softmax prob = exp(max - logsumexp) = 1 / sum(exp(x - max))
            out[bi * plane + p] = 1.0 / total;
        }
    }
    Ok(PixelGrid::new(b, h, w, out))
}

/// Per-pixel `KL(softmax(p) || softmax(q))` between two logit maps, computed
/// from log-softmax for stability. Tiny negative rounding is clamped to 0.
pub fn kl_per_pixel(p_logits: &DiffTensor, q_logits: &DiffTensor) -> Result<PixelGrid, DistillError> {
    if p_logits.shape() != q_logits.shape() {
        return Err(DistillError::ShapeMismatch(format!(
            "logit maps differ: {:?} vs {:?}",
            p_logits.shape(),
            q_logits.shape()
        )));
    }
    let (b, c, h, w) = check_bchw("logits", p_logits.shape())?;
    let plane = h * w;
    let (xp, xq) = (p_logits.data(), q_logits.data());
    let mut out = vec![0.0; b * plane];
    let mut lsp = vec![0.0; c];
    let mut lsq = vec![0.0; c];
    for bi in 0..b {
        for p in 0..plane {
            log_softmax_lane(xp, bi, c, plane, p, &mut lsp);
            log_softmax_lane(xq, bi, c, plane, p, &mut lsq);
            let mut kl = 0.0;
            for ci in 0..c {
                kl += lsp[ci].exp() * (lsp[ci] - lsq[ci]);
            }
            out[bi * plane + p] = kl.max(0.0);
        }
    }
    Ok(PixelGrid::new(b, h, w, out))
}

fn log_softmax_lane(x: &[f64], b: usize, c: usize, plane: usize, p: usize, out: &mut [f64]) {
    let at = |ci: usize| x[(b * c + ci) * plane + p];
    let mut max = f64::NEG_INFINITY;
    for ci in 0..c {
        max = max.max(at(ci));
    }
    let mut total = 0.0;
    for ci in 0..c {
        total += (at(ci) - max).exp();
    }
    let log_total = total.ln();
    for ci in 0..c {
        out[ci] = at(ci) - max - log_total;
    }
}

/// Early-stage difficulty map `exp(-KL(primary || aux))` from the teacher's
/// two heads. Larger values mean simpler pixels; agreement gives exactly 1.
pub fn rd_tfe(
    teacher_primary: &DiffTensor,
    teacher_aux: &DiffTensor,
) -> Result<DifficultyMap, DistillError> {
    let kl = kl_per_pixel(teacher_primary, teacher_aux)?;
    let (b, h, w) = (kl.batch(), kl.height(), kl.width());
    let values: Vec<f64> = kl.values().iter().map(|v| (-v).exp()).collect();
    DifficultyMap::new_tfe(PixelGrid::new(b, h, w, values))
}

/// Late-stage binary difficulty map from thresholded confidences. A pixel is
/// difficult for a network when its confidence is `<= t` (ties are
/// difficult); the two boolean maps then combine per `mode`.
pub fn rd_tse(
    student_conf: &PixelGrid,
    teacher_conf: &PixelGrid,
    threshold: f64,
    mode: CombineMode,
) -> Result<DifficultyMap, DistillError> {
    if (student_conf.batch(), student_conf.height(), student_conf.width())
        != (teacher_conf.batch(), teacher_conf.height(), teacher_conf.width())
    {
        return Err(DistillError::ShapeMismatch(format!(
            "confidence maps differ: {}x{}x{} vs {}x{}x{}",
            student_conf.batch(),
            student_conf.height(),
            student_conf.width(),
            teacher_conf.batch(),
            teacher_conf.height(),
            teacher_conf.width()
        )));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(DistillError::InvalidConfig(format!(
            "threshold must lie in (0, 1), got {threshold}"
        )));
    }
    for (i, v) in student_conf.values().iter().chain(teacher_conf.values()).enumerate() {
        if !(*v > 0.0 && *v < 1.0) {
            return Err(DistillError::ConfidenceOutOfRange { value: *v, index: i });
        }
    }
    let values: Vec<f64> = student_conf
        .values()
        .iter()
        .zip(teacher_conf.values())
        .map(|(s, t)| {
            let s_hard = *s <= threshold;
            let t_hard = *t <= threshold;
            let bit = match mode {
                CombineMode::Xor => s_hard ^ t_hard,
                CombineMode::And => s_hard & t_hard,
                CombineMode::Or => s_hard | t_hard,
                CombineMode::Strict => s_hard & !t_hard,
            };
            if bit {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    DifficultyMap::new_tse(PixelGrid::new(
        student_conf.batch(),
        student_conf.height(),
        student_conf.width(),
        values,
    ))
}

/// Plain mean cross-entropy over all pixels of a `[B, C, H, W]` logit map.
pub fn cross_entropy_loss(
    tape: &mut Tape,
    logits: ValueId,
    labels: &LabelGrid,
) -> Result<ValueId, DistillError> {
    let ce = per_pixel_cross_entropy(tape, logits, labels)?;
    Ok(tape.mean(ce)?)
}

fn per_pixel_cross_entropy(
    tape: &mut Tape,
    logits: ValueId,
    labels: &LabelGrid,
) -> Result<ValueId, DistillError> {
    let (b, _, h, w) = check_bchw("logits", tape.shape(logits))?;
    if (labels.batch(), labels.height(), labels.width()) != (b, h, w) {
        return Err(DistillError::ShapeMismatch(format!(
            "labels {}x{}x{} do not match logits {:?}",
            labels.batch(),
            labels.height(),
            labels.width(),
            tape.shape(logits)
        )));
    }
    let log_probs = tape.log_softmax(logits, 1)?;
    let picked = tape.gather_class_channel(log_probs, labels.labels())?;
    Ok(tape.scale(picked, -1.0)?)
}

/// Cross-entropy task loss with a per-pixel constant weight:
/// `mean_over_pixels(rd * CE)`. The map never receives gradient.
///
/// With `normalize_by_weight_sum` the sum is divided by `sum(rd)` instead of
/// the pixel count (0 when the map is all zeros).
pub fn weighted_task_loss(
    tape: &mut Tape,
    student_logits: ValueId,
    labels: &LabelGrid,
    rd: &DifficultyMap,
    normalize_by_weight_sum: bool,
) -> Result<ValueId, DistillError> {
    let grid = rd.grid();
    let (b, _, h, w) = check_bchw("logits", tape.shape(student_logits))?;
    if (grid.batch(), grid.height(), grid.width()) != (b, h, w) {
        return Err(DistillError::ShapeMismatch(format!(
            "difficulty map {}x{}x{} does not match logits {:?}",
            grid.batch(),
            grid.height(),
            grid.width(),
            tape.shape(student_logits)
        )));
    }
    let ce = per_pixel_cross_entropy(tape, student_logits, labels)?;
    let weights = tape.constant(vec![b, h, w], grid.values().to_vec())?;
    let weighted = tape.mul(ce, weights)?;
    if normalize_by_weight_sum {
        let total = tape.sum(weighted)?;
        let weight_sum: f64 = grid.values().iter().sum();
        let factor = if weight_sum > 0.0 { 1.0 / weight_sum } else { 0.0 };
        Ok(tape.scale(total, factor)?)
    } else {
        Ok(tape.mean(weighted)?)
    }
}

/// Pixel-wise distillation loss: mean over pixels of
/// `KL(softmax(student/T) || softmax(teacher/T))`, student distribution
/// first. Differentiable with respect to both logit maps; callers pass the
/// teacher side as a constant.
pub fn pixelwise_kd_loss(
    tape: &mut Tape,
    student_logits: ValueId,
    teacher_logits: ValueId,
    temperature: f64,
) -> Result<ValueId, DistillError> {
    if tape.shape(student_logits) != tape.shape(teacher_logits) {
        return Err(DistillError::ShapeMismatch(format!(
            "student logits {:?} and teacher logits {:?} differ",
            tape.shape(student_logits),
            tape.shape(teacher_logits)
        )));
    }
    check_bchw("logits", tape.shape(student_logits))?;
    if temperature <= 0.0 {
        return Err(DistillError::InvalidConfig(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let (student, teacher) = if temperature == 1.0 {
        (student_logits, teacher_logits)
    } else {
        (
            tape.scale(student_logits, 1.0 / temperature)?,
            tape.scale(teacher_logits, 1.0 / temperature)?,
        )
    };
    let ls_student = tape.log_softmax(student, 1)?;
    let ls_teacher = tape.log_softmax(teacher, 1)?;
    let probs = tape.exp(ls_student)?;
    let diff = tape.sub(ls_student, ls_teacher)?;
    let integrand = tape.mul(probs, diff)?;
    let per_pixel = tape.sum_axis(integrand, 1)?;
    Ok(tape.mean(per_pixel)?)
}

/// Attention-transfer loss over paired stage features.
///
/// Per pair, the attention map is the channel-wise sum of squared
/// activations, vectorized per sample and L2-normalized; the loss is
/// `(beta/2) * sum over pairs and samples of |q_s - q_t|_2`. Spatial size
/// mismatches are reconciled by nearest-neighbor upsampling of the smaller
/// map. The gradient is undefined where a pair coincides exactly.
pub fn at_hook(
    tape: &mut Tape,
    student_features: &[ValueId],
    teacher_features: &[ValueId],
    beta: f64,
) -> Result<ValueId, DistillError> {
    if student_features.len() != teacher_features.len() || student_features.is_empty() {
        return Err(DistillError::ShapeMismatch(format!(
            "attention transfer needs matched stage lists, got {} student and {} teacher stages",
            student_features.len(),
            teacher_features.len()
        )));
    }
    let mut total: Option<ValueId> = None;
    for (&sf, &tf) in student_features.iter().zip(teacher_features) {
        let q_s = attention_rows(tape, sf)?;
        let q_t = attention_rows(tape, tf)?;
        let (q_s, q_t) = match_spatial(tape, q_s, q_t)?;
        let q_s = tape.row_l2_normalize(q_s, 1e-12)?;
        let q_t = tape.row_l2_normalize(q_t, 1e-12)?;
        let diff = tape.sub(q_s, q_t)?;
        let sq = tape.mul(diff, diff)?;
        let per_sample = tape.sum_axis(sq, 1)?;
        let norms = tape.sqrt(per_sample)?;
        let pair_total = tape.sum(norms)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, pair_total)?,
            None => pair_total,
        });
    }
    Ok(tape.scale(total.expect("non-empty pair list"), beta / 2.0)?)
}

/// `[B, C, H, W] -> [B, H*W]` attention rows (channel-wise sum of squares),
/// remembering the spatial size.
fn attention_rows(tape: &mut Tape, features: ValueId) -> Result<(ValueId, usize, usize), DistillError> {
    let shape = tape.shape(features).to_vec();
    if shape.len() != 4 {
        return Err(DistillError::ShapeMismatch(format!(
            "stage features must be [B, C, H, W], got {shape:?}"
        )));
    }
    let (b, h, w) = (shape[0], shape[2], shape[3]);
    let sq = tape.mul(features, features)?;
    let att = tape.sum_axis(sq, 1)?;
    let rows = tape.reshape(att, vec![b, h * w])?;
    Ok((rows, h, w))
}

fn match_spatial(
    tape: &mut Tape,
    (s_rows, sh, sw): (ValueId, usize, usize),
    (t_rows, th, tw): (ValueId, usize, usize),
) -> Result<(ValueId, ValueId), DistillError> {
    if (sh, sw) == (th, tw) {
        return Ok((s_rows, t_rows));
    }
    let upsample = |tape: &mut Tape, rows: ValueId, h: usize, w: usize, factor: usize| {
        let b = tape.shape(rows)[0];
        let as_image = tape.reshape(rows, vec![b, 1, h, w])?;
        let up = tape.upsample_nearest(as_image, factor)?;
        tape.reshape(up, vec![b, h * factor * w * factor])
    };
    if sh < th {
        if th % sh != 0 || tw % sw != 0 || th / sh != tw / sw {
            return Err(DistillError::ShapeMismatch(format!(
                "cannot align attention maps {sh}x{sw} and {th}x{tw} by integer upsampling"
            )));
        }
        let s_up = upsample(tape, s_rows, sh, sw, th / sh)?;
        Ok((s_up, t_rows))
    } else {
        if sh % th != 0 || sw % tw != 0 || sh / th != sw / tw {
            return Err(DistillError::ShapeMismatch(format!(
                "cannot align attention maps {sh}x{sw} and {th}x{tw} by integer upsampling"
            )));
        }
        let t_up = upsample(tape, t_rows, th, tw, sh / th)?;
        Ok((s_rows, t_up))
    }
}

/// The staged total loss: weighted task loss plus the pixel-wise KD loss plus
/// any extra hook terms already evaluated on the tape.
///
/// `iter` is 1-based; iterations up to and including `round(p * total)` run
/// the TFE stage, the rest run TSE. Teacher logits must be detached (frozen
/// teacher); difficulty maps are computed from values, not recorded ops.
pub fn rdd_total_loss(
    tape: &mut Tape,
    iter: u64,
    config: &DistillConfig,
    student: &LogitPair,
    teacher: &LogitPair,
    labels: &LabelGrid,
    extras: &[(String, ValueId)],
) -> Result<(ValueId, LossBreakdown), DistillError> {
    config.validate()?;
    if iter == 0 || iter > config.total_iters {
        return Err(DistillError::InvalidConfig(format!(
            "iter {iter} outside [1, {}]",
            config.total_iters
        )));
    }
    debug_assert!(
        !tape.requires_grad(teacher.primary),
        "teacher logits are expected to be detached"
    );
    let stage = stage_for_iter(iter, config);
    let rd = match stage {
        Stage::Tfe => {
            let aux = teacher.auxiliary.ok_or(DistillError::MissingAuxiliary)?;
            rd_tfe(&tape.to_tensor(teacher.primary), &tape.to_tensor(aux))?
        }
        Stage::Tse => {
            let student_conf = confidence_map(&tape.to_tensor(student.primary))?;
            let teacher_conf = confidence_map(&tape.to_tensor(teacher.primary))?;
            rd_tse(&student_conf, &teacher_conf, config.confidence_threshold, config.mode)?
        }
    };
    let task_weighted =
        weighted_task_loss(tape, student.primary, labels, &rd, config.normalize_by_weight_sum)?;
    let kd = pixelwise_kd_loss(tape, student.primary, teacher.primary, config.temperature)?;
    let mut total = tape.add(task_weighted, kd)?;
    let mut extra_values = Vec::with_capacity(extras.len());
    for (name, id) in extras {
        if tape.numel(*id) != 1 {
            return Err(DistillError::ShapeMismatch(format!(
                "extra loss '{name}' must be scalar, has {} elements",
                tape.numel(*id)
            )));
        }
        total = tape.add(total, *id)?;
        extra_values.push((name.clone(), tape.value(*id)[0]));
    }
    let breakdown = LossBreakdown {
        total: tape.value(total)[0],
        task_weighted: tape.value(task_weighted)[0],
        kd: tape.value(kd)[0],
        extras: extra_values,
        stage,
        mean_rd: rd.mean(),
        active_pixel_fraction: rd.active_fraction(),
    };
    Ok((total, breakdown))
}

/// Write one sample of a difficulty map as an 8-bit PGM
/// (`round(255 * rd)`) plus a raw CSV of the float values. Files are named
/// `{split}_{index}_{stage}.pgm` / `.csv`.
pub fn export_difficulty_map(
    dir: &Path,
    split: &str,
    index: usize,
    map: &DifficultyMap,
) -> Result<(PathBuf, PathBuf), DistillError> {
    let grid = map.grid();
    if grid.batch() != 1 {
        return Err(DistillError::ShapeMismatch(format!(
            "export expects a single-sample map, got batch {}",
            grid.batch()
        )));
    }
    let stage = match map.kind() {
        MapKind::Tfe => "tfe",
        MapKind::Tse => "tse",
    };
    std::fs::create_dir_all(dir)?;
    let stem = format!("{split}_{index}_{stage}");
    let pgm = dir.join(format!("{stem}.pgm"));
    let bytes: Vec<u8> = grid
        .values()
        .iter()
        .map(|v| (255.0 * v).round().clamp(0.0, 255.0) as u8)
        .collect();
    imgio::write_pgm(&pgm, grid.width(), grid.height(), &bytes)?;
    let csv = dir.join(format!("{stem}.csv"));
    imgio::write_float_grid_csv(&csv, grid.width(), grid.height(), grid.values())?;
    Ok((pgm, csv))
}
