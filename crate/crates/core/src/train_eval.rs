//! Losses, optimizer, metrics, and the training loop.
//!
//! The loss is cross-entropy plus Lovász-Softmax over per-point class
//! logits; the metric is intersection-over-union of the moving class,
//! evaluated on current-scan points only and additionally split by range
//! into close / medium / far bins. The loop is deterministic: all per-epoch
//! randomness derives from `(seed, epoch, scene)`, so a resumed run follows
//! the interrupted run bit for bit.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::Write as IoWrite;
use std::ops::AddAssign;
use std::path::Path;
use std::rc::Rc;

use crate::aggregation::{aggregate_scans, augment_random, relative_poses, SpatioTemporalCloud};
use crate::error::{Error, Result};
use crate::kitti_io::{class, read_labels, read_scan, remap_labels, LabelMap, SequenceDir};
use crate::network_blocks::{
    bind_params, fnv1a64, load_checkpoint, save_checkpoint, ModelConfig, Params, SegModel,
};
use crate::tensor_core::{CustomGrad, DenseArray, Tape, ValueId};

/// Label value of the moving class in prediction and ground-truth arrays
/// (0 = unlabeled, 1 = static, 2 = moving, 3 = movable).
pub const MOVING_LABEL: u32 = 2;

/// True/false positive and false negative tallies for the moving class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    /// False negatives (`fn` is reserved).
    pub fn_: u64,
}

impl ConfusionCounts {
    /// `TP / (TP + FP + FN)`; `None` when the union is empty, so empty
    /// frames can be excluded from averages instead of scoring zero.
    pub fn iou(&self) -> Option<f64> {
        let d = self.tp + self.fp + self.fn_;
        if d == 0 {
            None
        } else {
            Some(self.tp as f64 / d as f64)
        }
    }

    pub fn precision(&self) -> Option<f64> {
        let d = self.tp + self.fp;
        if d == 0 {
            None
        } else {
            Some(self.tp as f64 / d as f64)
        }
    }

    pub fn recall(&self) -> Option<f64> {
        let d = self.tp + self.fn_;
        if d == 0 {
            None
        } else {
            Some(self.tp as f64 / d as f64)
        }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: ConfusionCounts) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// Moving-class confusion over masked points. Points with ground-truth
/// label 0 (unlabeled) are always excluded.
pub fn confusion_moving(pred: &[u32], gt: &[u32], mask: &[bool]) -> Result<ConfusionCounts> {
    if pred.len() != gt.len() || mask.len() != gt.len() {
        return Err(Error::LengthMismatch {
            what: "prediction/label/mask arrays",
            got: pred.len().min(mask.len()),
            expected: gt.len(),
        });
    }
    let mut c = ConfusionCounts::default();
    for i in 0..gt.len() {
        if !mask[i] || gt[i] == 0 {
            continue;
        }
        let p = pred[i] == MOVING_LABEL;
        let g = gt[i] == MOVING_LABEL;
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => {}
        }
    }
    Ok(c)
}

/// Moving-object IoU; `None` when the union is empty.
pub fn iou_mos(pred: &[u32], gt: &[u32], mask: &[bool]) -> Result<Option<f64>> {
    Ok(confusion_moving(pred, gt, mask)?.iou())
}

/// Per-range-bin confusion: close `[0, 20)`, medium `[20, 50)`,
/// far `[50, ∞)` meters, left-closed edges.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DistanceBinnedReport {
    pub close: ConfusionCounts,
    pub medium: ConfusionCounts,
    pub far: ConfusionCounts,
}

impl DistanceBinnedReport {
    pub fn overall(&self) -> ConfusionCounts {
        let mut c = self.close;
        c += self.medium;
        c += self.far;
        c
    }

    pub fn merge(&mut self, o: &DistanceBinnedReport) {
        self.close += o.close;
        self.medium += o.medium;
        self.far += o.far;
    }
}

fn bin_of(range: f64) -> usize {
    if range < 20.0 {
        0
    } else if range < 50.0 {
        1
    } else {
        2
    }
}

/// Bins the moving-class confusion by the Euclidean range of each point in
/// the current-scan frame.
pub fn distance_binned_eval(
    pred: &[u32],
    gt: &[u32],
    coords: &[[f64; 3]],
    mask: &[bool],
) -> Result<DistanceBinnedReport> {
    if coords.len() != gt.len() {
        return Err(Error::LengthMismatch {
            what: "coordinate array",
            got: coords.len(),
            expected: gt.len(),
        });
    }
    let mut report = DistanceBinnedReport::default();
    for i in 0..gt.len() {
        let range = (coords[i][0] * coords[i][0]
            + coords[i][1] * coords[i][1]
            + coords[i][2] * coords[i][2])
            .sqrt();
        let single = [mask[i]];
        let bin = confusion_moving(&pred[i..i + 1], &gt[i..i + 1], &single)?;
        match bin_of(range) {
            0 => report.close += bin,
            1 => report.medium += bin,
            _ => report.far += bin,
        }
    }
    Ok(report)
}

/// Row index of the largest entry per row; the first maximum wins ties.
pub fn argmax_rows(a: &DenseArray) -> Vec<usize> {
    let (r, c) = (a.rows(), a.cols());
    let mut out = Vec::with_capacity(r);
    for i in 0..r {
        let row = &a.data()[i * c..(i + 1) * c];
        let mut best = 0;
        for j in 1..c {
            if row[j] > row[best] {
                best = j;
            }
        }
        out.push(best);
    }
    out
}

fn check_targets(targets: &[i64], rows: usize, classes: usize, ignore_id: i64) -> Result<()> {
    if targets.len() != rows {
        return Err(Error::LengthMismatch {
            what: "loss targets",
            got: targets.len(),
            expected: rows,
        });
    }
    for &t in targets {
        if t != ignore_id && !(0..classes as i64).contains(&t) {
            return Err(Error::ShapeMismatch {
                op: "loss targets",
                msg: format!("target {t} outside 0..{classes}"),
            });
        }
    }
    Ok(())
}

fn ce_value_and_grad(
    logits: &DenseArray,
    targets: &[i64],
    ignore_id: i64,
    weights: Option<&[f64]>,
) -> (f64, DenseArray) {
    let (r, k) = (logits.rows(), logits.cols());
    let mut total_w = 0.0;
    let mut loss = 0.0;
    let mut probs = vec![0.0; r * k];
    for i in 0..r {
        if targets[i] == ignore_id {
            continue;
        }
        let t = targets[i] as usize;
        let w = weights.map_or(1.0, |ws| ws[t]);
        let row = &logits.data()[i * k..(i + 1) * k];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|&l| (l - m).exp()).sum();
        let lse = m + z.ln();
        loss += w * (lse - row[t]);
        total_w += w;
        for j in 0..k {
            probs[i * k + j] = w * ((row[j] - m).exp() / z - if j == t { 1.0 } else { 0.0 });
        }
    }
    if total_w == 0.0 {
        return (0.0, DenseArray::zeros(logits.shape()));
    }
    for p in &mut probs {
        *p /= total_w;
    }
    (
        loss / total_w,
        DenseArray::from_vec(logits.shape(), probs),
    )
}

struct CrossEntropyGrad {
    targets: Vec<i64>,
    ignore_id: i64,
    weights: Option<Vec<f64>>,
}

impl CustomGrad for CrossEntropyGrad {
    fn name(&self) -> &'static str {
        "cross_entropy"
    }

    fn backward(
        &self,
        grad_out: &DenseArray,
        inputs: &[&DenseArray],
        _output: &DenseArray,
    ) -> Vec<DenseArray> {
        let (_, mut grad) =
            ce_value_and_grad(inputs[0], &self.targets, self.ignore_id, self.weights.as_deref());
        let g = grad_out.item();
        for v in grad.data_mut() {
            *v *= g;
        }
        vec![grad]
    }
}

/// Mean negative log-softmax over non-ignored rows; 0 when all rows are
/// ignored. Optional per-class weights turn the mean into a weighted mean.
pub fn cross_entropy(
    tape: &mut Tape,
    logits: ValueId,
    targets: &[i64],
    ignore_id: i64,
    class_weights: Option<&[f64]>,
) -> Result<ValueId> {
    let lv = tape.value(logits);
    let k = lv.cols();
    check_targets(targets, lv.rows(), k, ignore_id)?;
    if let Some(ws) = class_weights {
        if ws.len() != k {
            return Err(Error::LengthMismatch {
                what: "class weights",
                got: ws.len(),
                expected: k,
            });
        }
    }
    let (loss, _) = ce_value_and_grad(lv, targets, ignore_id, class_weights);
    tape.custom(
        &[logits],
        DenseArray::scalar(loss),
        Rc::new(CrossEntropyGrad {
            targets: targets.to_vec(),
            ignore_id,
            weights: class_weights.map(|w| w.to_vec()),
        }),
    )
}

/// Loss value and gradient with respect to the probabilities. The loss is
/// the Lovász extension of the Jaccard loss, averaged over classes that
/// appear in the (non-ignored) targets; given the descending error sort the
/// extension is linear, so the gradient is the Jaccard-difference vector
/// scattered back through the sort.
fn lovasz_parts(
    probs: &DenseArray,
    targets: &[i64],
    ignore_id: i64,
) -> Result<(f64, DenseArray)> {
    let (r, k) = (probs.rows(), probs.cols());
    for i in 0..r {
        let sum: f64 = probs.data()[i * k..(i + 1) * k].iter().sum();
        if (sum - 1.0).abs() > 1e-5 {
            return Err(Error::RowNotNormalized { row: i, sum });
        }
    }
    let valid: Vec<usize> = (0..r).filter(|&i| targets[i] != ignore_id).collect();
    let mut grad = DenseArray::zeros(probs.shape());
    if valid.is_empty() {
        return Ok((0.0, grad));
    }
    let present: Vec<usize> = (0..k)
        .filter(|&c| valid.iter().any(|&i| targets[i] == c as i64))
        .collect();
    let scale = 1.0 / present.len() as f64;
    let mut loss = 0.0;
    for &c in &present {
        let errors: Vec<f64> = valid
            .iter()
            .map(|&i| {
                let p = probs.data()[i * k + c];
                if targets[i] == c as i64 {
                    1.0 - p
                } else {
                    p
                }
            })
            .collect();
        let mut order: Vec<usize> = (0..valid.len()).collect();
        order.sort_by(|&a, &b| errors[b].partial_cmp(&errors[a]).unwrap().then(a.cmp(&b)));

        let gts = valid.iter().filter(|&&i| targets[i] == c as i64).count() as f64;
        let mut cum_fg = 0.0;
        let mut cum_bg = 0.0;
        let mut prev_jacc = 0.0;
        for &slot in &order {
            let i = valid[slot];
            let fg = targets[i] == c as i64;
            if fg {
                cum_fg += 1.0;
            } else {
                cum_bg += 1.0;
            }
            let jacc = 1.0 - (gts - cum_fg) / (gts + cum_bg);
            let gk = jacc - prev_jacc;
            prev_jacc = jacc;
            loss += errors[slot] * gk * scale;
            let sign = if fg { -1.0 } else { 1.0 };
            grad.data_mut()[i * k + c] += sign * gk * scale;
        }
    }
    Ok((loss, grad))
}

struct LovaszGrad {
    targets: Vec<i64>,
    ignore_id: i64,
}

impl CustomGrad for LovaszGrad {
    fn name(&self) -> &'static str {
        "lovasz_softmax"
    }

    fn backward(
        &self,
        grad_out: &DenseArray,
        inputs: &[&DenseArray],
        _output: &DenseArray,
    ) -> Vec<DenseArray> {
        let (_, mut grad) =
            lovasz_parts(inputs[0], &self.targets, self.ignore_id).expect("forward validated");
        let g = grad_out.item();
        for v in grad.data_mut() {
            *v *= g;
        }
        vec![grad]
    }
}

/// Lovász-Softmax loss over probability rows (each must sum to 1 within
/// 1e-5). Mean over classes present in the non-ignored targets.
pub fn lovasz_softmax(
    tape: &mut Tape,
    probs: ValueId,
    targets: &[i64],
    ignore_id: i64,
) -> Result<ValueId> {
    let pv = tape.value(probs);
    check_targets(targets, pv.rows(), pv.cols(), ignore_id)?;
    let (loss, _) = lovasz_parts(pv, targets, ignore_id)?;
    tape.custom(
        &[probs],
        DenseArray::scalar(loss),
        Rc::new(LovaszGrad {
            targets: targets.to_vec(),
            ignore_id,
        }),
    )
}

/// The joint objective and its two parts, all scalars on the tape.
pub struct LossBreakdown {
    pub total: ValueId,
    pub ce: ValueId,
    pub lovasz: ValueId,
}

/// `L = L_ce + L_ls` on the same logits.
pub fn joint_loss(
    tape: &mut Tape,
    logits: ValueId,
    targets: &[i64],
    ignore_id: i64,
) -> Result<LossBreakdown> {
    let ce = cross_entropy(tape, logits, targets, ignore_id, None)?;
    let probs = tape.softmax_rows(logits)?;
    let lovasz = lovasz_softmax(tape, probs, targets, ignore_id)?;
    let total = tape.add(ce, lovasz)?;
    Ok(LossBreakdown { total, ce, lovasz })
}

/// Decoupled-weight-decay Adam. Decay multiplies only matrix-shaped
/// parameters (rank ≥ 2), leaving biases, norm scales, and other vectors
/// unregularized.
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: BTreeMap<String, DenseArray>,
    v: BTreeMap<String, DenseArray>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> AdamW {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every parameter. Parameters without an entry in
    /// `grads` see a zero gradient (they still decay).
    pub fn step(&mut self, params: &mut Params, grads: &BTreeMap<String, DenseArray>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (lr, b1, b2, eps, wd) = (self.lr, self.beta1, self.beta2, self.eps, self.weight_decay);
        for (name, p) in params.iter_mut() {
            let n = p.numel();
            let shape = p.shape().to_vec();
            let zero;
            let g = match grads.get(name) {
                Some(g) => g.data(),
                None => {
                    zero = vec![0.0; n];
                    &zero
                }
            };
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| DenseArray::zeros(&shape));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| DenseArray::zeros(&shape));
            let decay = wd != 0.0 && shape.len() >= 2;
            let (md, vd, pd) = (m.data_mut(), v.data_mut(), p.data_mut());
            for i in 0..n {
                md[i] = b1 * md[i] + (1.0 - b1) * g[i];
                vd[i] = b2 * vd[i] + (1.0 - b2) * g[i] * g[i];
                if decay {
                    pd[i] *= 1.0 - lr * wd;
                }
                pd[i] -= lr * (md[i] / bc1) / ((vd[i] / bc2).sqrt() + eps);
            }
        }
    }

    /// Moment estimates and step counter as named arrays for checkpointing.
    pub fn state_arrays(&self) -> BTreeMap<String, DenseArray> {
        let mut out = BTreeMap::new();
        for (n, a) in &self.m {
            out.insert(format!("m.{n}"), a.clone());
        }
        for (n, a) in &self.v {
            out.insert(format!("v.{n}"), a.clone());
        }
        out.insert("step".into(), DenseArray::scalar(self.step as f64));
        out
    }

    pub fn restore_state(&mut self, arrays: &BTreeMap<String, DenseArray>) -> Result<()> {
        let step = arrays
            .get("step")
            .ok_or_else(|| Error::BadCheckpoint("optimizer state lacks step".into()))?;
        self.step = step.item() as u64;
        self.m.clear();
        self.v.clear();
        for (name, a) in arrays {
            if let Some(rest) = name.strip_prefix("m.") {
                self.m.insert(rest.to_string(), a.clone());
            } else if let Some(rest) = name.strip_prefix("v.") {
                self.v.insert(rest.to_string(), a.clone());
            }
        }
        Ok(())
    }
}

/// Training hyperparameters, readable from a flat `key = value` file.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub num_scans: usize,
    pub grid_size: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.00032,
            weight_decay: 0.005,
            epochs: 50,
            num_scans: 8,
            grid_size: 0.09,
            batch: 4,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) || !(self.grid_size > 0.0) {
            return Err(Error::Config {
                path: "train config".into(),
                msg: "lr and grid_size must be positive".into(),
            });
        }
        if self.num_scans == 0 || self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config {
                path: "train config".into(),
                msg: "num_scans, epochs, batch must be at least 1".into(),
            });
        }
        Ok(())
    }

    /// Sets one field by its config-file key.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse()
                .map_err(|_| format!("bad value {v:?} for key {key}"))
        }
        match key {
            "lr" => self.lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "num_scans" => self.num_scans = num(key, value)?,
            "grid_size" => self.grid_size = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            _ => return Err(format!("unknown key {key}")),
        }
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment, blank lines are
    /// skipped. Unknown keys and malformed values are errors.
    pub fn from_text(origin: &Path, text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Config {
                path: origin.to_path_buf(),
                msg: format!("line {}: expected key = value", lineno + 1),
            })?;
            cfg.set(key.trim(), value.trim())
                .map_err(|msg| Error::Config {
                    path: origin.to_path_buf(),
                    msg: format!("line {}: {msg}", lineno + 1),
                })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        TrainConfig::from_text(path, &text)
    }

    pub fn to_text(&self) -> String {
        format!(
            "lr = {}\nweight_decay = {}\nepochs = {}\nnum_scans = {}\n\
             grid_size = {}\nbatch = {}\nseed = {}\n",
            self.lr, self.weight_decay, self.epochs, self.num_scans, self.grid_size, self.batch,
            self.seed
        )
    }
}

/// One aggregated multi-scan cloud with per-point labels (0 = unlabeled,
/// 1 = static, 2 = moving, 3 = movable). Scan id 0 is the current scan and
/// positions are in its frame.
#[derive(Debug, Clone)]
pub struct SceneSample {
    pub cloud: SpatioTemporalCloud,
    pub labels: Vec<u32>,
}

/// Reads the `f`-scan window ending at scan `current` from an on-disk
/// sequence, compensates it into the current scan's frame, and concatenates
/// labels in the matching row order (current scan first). Raw label ids are
/// remapped through `map` when one is given; otherwise they must already be
/// class ids.
pub fn load_window(
    dir: &SequenceDir,
    current: usize,
    f: usize,
    map: Option<&LabelMap>,
) -> Result<SceneSample> {
    let poses = dir.read_poses()?;
    let rel = relative_poses(&poses, current, f)?;
    let mut scans = Vec::with_capacity(f);
    let mut labels = Vec::new();
    for t in 0..f {
        let idx = current - t;
        scans.push(read_scan(&dir.scan_path(idx))?);
        let raw = read_labels(&dir.label_path(idx))?;
        match map {
            Some(m) => labels.extend(remap_labels(&raw, m)),
            None => labels.extend(raw),
        }
    }
    if let Some(&value) = labels.iter().find(|&&l| l > class::MAX) {
        return Err(Error::LabelOutOfRange { value });
    }
    let cloud = aggregate_scans(&scans, &rel)?;
    if labels.len() != cloud.len() {
        return Err(Error::LengthMismatch {
            what: "window labels",
            got: labels.len(),
            expected: cloud.len(),
        });
    }
    Ok(SceneSample { cloud, labels })
}

pub const METRIC_CSV_HEADER: &str =
    "epoch,split,loss_ce,loss_ls,iou_mos,iou_close,iou_medium,iou_far";

/// One line of the metric trace.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    pub loss_ce: f64,
    pub loss_ls: f64,
    pub iou_mos: Option<f64>,
    pub iou_close: Option<f64>,
    pub iou_medium: Option<f64>,
    pub iou_far: Option<f64>,
}

fn fmt_opt(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.6}"),
        None => "nan".into(),
    }
}

impl MetricRow {
    pub fn csv_line(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{},{},{},{}",
            self.epoch,
            self.split,
            self.loss_ce,
            self.loss_ls,
            fmt_opt(self.iou_mos),
            fmt_opt(self.iou_close),
            fmt_opt(self.iou_medium),
            fmt_opt(self.iou_far),
        )
    }
}

pub fn write_metric_csv(path: &Path, rows: &[MetricRow]) -> Result<()> {
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{METRIC_CSV_HEADER}").map_err(|e| Error::io(path, e))?;
    for row in rows {
        writeln!(f, "{}", row.csv_line()).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

/// Pooled losses and confusion over a scene set.
#[derive(Debug, Clone, Default)]
pub struct EvalSummary {
    pub loss_ce: f64,
    pub loss_ls: f64,
    pub confusion: ConfusionCounts,
    pub bins: DistanceBinnedReport,
}

impl EvalSummary {
    pub fn to_row(&self, epoch: usize, split: &str) -> MetricRow {
        MetricRow {
            epoch,
            split: split.to_string(),
            loss_ce: self.loss_ce,
            loss_ls: self.loss_ls,
            iou_mos: self.confusion.iou(),
            iou_close: self.bins.close.iou(),
            iou_medium: self.bins.medium.iou(),
            iou_far: self.bins.far.iou(),
        }
    }
}

struct ScenePass {
    ce: f64,
    ls: f64,
    grads: BTreeMap<String, DenseArray>,
    confusion: ConfusionCounts,
    bins: DistanceBinnedReport,
}

fn scene_pass(
    model: &SegModel,
    params: &Params,
    scene: &SceneSample,
    aug_seed: Option<u64>,
    compute_grads: bool,
) -> Result<ScenePass> {
    if scene.labels.len() != scene.cloud.len() {
        return Err(Error::LengthMismatch {
            what: "scene labels",
            got: scene.labels.len(),
            expected: scene.cloud.len(),
        });
    }
    let cloud = match aug_seed {
        Some(s) => augment_random(&scene.cloud, s),
        None => scene.cloud.clone(),
    };
    let mut tape = Tape::new();
    let bp = bind_params(&mut tape, params)?;
    let out = model.forward(&mut tape, &bp, &cloud)?;
    // Labels 1..=3 map to class indices 0..=2; unlabeled becomes the ignore
    // id. Supervision covers points of every scan in the window.
    let targets: Vec<i64> = scene.labels.iter().map(|&l| l as i64 - 1).collect();
    let loss = joint_loss(&mut tape, out.point_logits, &targets, -1)?;
    let ce = tape.value(loss.ce).item();
    let ls = tape.value(loss.lovasz).item();

    let mut grads = BTreeMap::new();
    if compute_grads {
        tape.backward(loss.total)?;
        for (name, id) in bp.ids() {
            if let Some(g) = tape.grad(id) {
                grads.insert(name.clone(), g.clone());
            }
        }
    }

    let pred: Vec<u32> = argmax_rows(tape.value(out.point_logits))
        .iter()
        .map(|&c| c as u32 + 1)
        .collect();
    let mask: Vec<bool> = cloud.scan_ids.iter().map(|&t| t == 0).collect();
    let confusion = confusion_moving(&pred, &scene.labels, &mask)?;
    let bins = distance_binned_eval(&pred, &scene.labels, &cloud.positions, &mask)?;
    Ok(ScenePass {
        ce,
        ls,
        grads,
        confusion,
        bins,
    })
}

/// Forward-only pass over a scene set: mean losses, pooled confusion.
pub fn evaluate(model: &SegModel, params: &Params, scenes: &[SceneSample]) -> Result<EvalSummary> {
    let mut summary = EvalSummary::default();
    for scene in scenes {
        let pass = scene_pass(model, params, scene, None, false)?;
        summary.loss_ce += pass.ce;
        summary.loss_ls += pass.ls;
        summary.confusion += pass.confusion;
        summary.bins.merge(&pass.bins);
    }
    let n = scenes.len().max(1) as f64;
    summary.loss_ce /= n;
    summary.loss_ls /= n;
    Ok(summary)
}

/// Per-epoch, per-scene seed for augmentation: stateless, so resuming at
/// any epoch reproduces the same draws.
fn derive_seed(base: u64, epoch: u64, scene: u64) -> u64 {
    let mut bytes = [0u8; 24];
    bytes[..8].copy_from_slice(&base.to_le_bytes());
    bytes[8..16].copy_from_slice(&epoch.to_le_bytes());
    bytes[16..].copy_from_slice(&scene.to_le_bytes());
    fnv1a64(&bytes)
}

/// Everything needed to continue a run, flattened into named arrays.
pub struct TrainingState {
    pub params: Params,
    pub opt: BTreeMap<String, DenseArray>,
    pub next_epoch: usize,
    pub best_iou: Option<f64>,
}

pub fn pack_training_state(
    params: &Params,
    opt: &AdamW,
    next_epoch: usize,
    best_iou: Option<f64>,
) -> BTreeMap<String, DenseArray> {
    let mut map = BTreeMap::new();
    for (n, a) in params.iter() {
        map.insert(format!("param.{n}"), a.clone());
    }
    for (n, a) in opt.state_arrays() {
        map.insert(format!("opt.{n}"), a);
    }
    map.insert(
        "meta.epoch".into(),
        DenseArray::scalar(next_epoch as f64),
    );
    map.insert(
        "meta.best".into(),
        DenseArray::scalar(best_iou.unwrap_or(f64::NAN)),
    );
    map
}

pub fn unpack_training_state(map: BTreeMap<String, DenseArray>) -> Result<TrainingState> {
    let mut params = Params::new();
    let mut opt = BTreeMap::new();
    let mut next_epoch = None;
    let mut best = None;
    for (name, a) in map {
        if let Some(rest) = name.strip_prefix("param.") {
            params.insert(rest.to_string(), a);
        } else if let Some(rest) = name.strip_prefix("opt.") {
            opt.insert(rest.to_string(), a);
        } else if name == "meta.epoch" {
            next_epoch = Some(a.item() as usize);
        } else if name == "meta.best" {
            let v = a.item();
            best = if v.is_nan() { None } else { Some(v) };
        } else {
            return Err(Error::BadCheckpoint(format!("unexpected array {name}")));
        }
    }
    Ok(TrainingState {
        params,
        opt,
        next_epoch: next_epoch
            .ok_or_else(|| Error::BadCheckpoint("missing meta.epoch".into()))?,
        best_iou: best,
    })
}

/// Model parameters alone from a packed training state on disk.
pub fn load_params(path: &Path, digest: u64) -> Result<Params> {
    Ok(unpack_training_state(load_checkpoint(path, digest)?)?.params)
}

pub struct TrainOutcome {
    pub trace: Vec<MetricRow>,
    pub params: Params,
    pub best_iou: Option<f64>,
}

/// The full training loop: augment, forward, joint loss, AdamW, metrics.
///
/// Writes `last.ckpt` every epoch and `best.ckpt` on validation-IoU
/// improvement when `out_dir` is given (train IoU stands in when there are
/// no validation scenes). `resume` continues from a `last.ckpt`; because
/// augmentation seeds are derived statelessly, the resumed trace is
/// bit-identical to an uninterrupted run.
pub fn train_loop(
    train: &[SceneSample],
    val: &[SceneSample],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    out_dir: Option<&Path>,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let model = SegModel::new(model_cfg.clone())?;
    let digest = model_cfg.digest();

    let mut opt = AdamW::new(cfg.lr, cfg.weight_decay);
    let mut params;
    let mut start_epoch = 0;
    let mut best: Option<f64> = None;
    if let Some(path) = resume {
        let state = unpack_training_state(load_checkpoint(path, digest)?)?;
        opt.restore_state(&state.opt)?;
        params = state.params;
        start_epoch = state.next_epoch;
        best = state.best_iou;
    } else {
        params = Params::init(model_cfg)?;
    }

    let mut trace = Vec::new();
    let order: Vec<usize> = (0..train.len()).collect();
    for epoch in start_epoch..cfg.epochs {
        let mut summary = EvalSummary::default();
        for chunk in order.chunks(cfg.batch) {
            let mut acc: BTreeMap<String, DenseArray> = BTreeMap::new();
            for &si in chunk {
                let seed = derive_seed(cfg.seed, epoch as u64, si as u64);
                let pass = scene_pass(&model, &params, &train[si], Some(seed), true)?;
                summary.loss_ce += pass.ce;
                summary.loss_ls += pass.ls;
                summary.confusion += pass.confusion;
                summary.bins.merge(&pass.bins);
                for (name, g) in pass.grads {
                    match acc.get_mut(&name) {
                        Some(a) => {
                            for (x, y) in a.data_mut().iter_mut().zip(g.data()) {
                                *x += y;
                            }
                        }
                        None => {
                            acc.insert(name, g);
                        }
                    }
                }
            }
            let inv = 1.0 / chunk.len() as f64;
            for a in acc.values_mut() {
                for v in a.data_mut() {
                    *v *= inv;
                }
            }
            opt.step(&mut params, &acc);
        }
        let n = train.len().max(1) as f64;
        summary.loss_ce /= n;
        summary.loss_ls /= n;
        trace.push(summary.to_row(epoch, "train"));

        let monitored = if val.is_empty() {
            summary.confusion.iou()
        } else {
            let vs = evaluate(&model, &params, val)?;
            let row = vs.to_row(epoch, "val");
            let iou = row.iou_mos;
            trace.push(row);
            iou
        };

        let improved = match (monitored, best) {
            (Some(iou), Some(b)) => iou > b,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if improved {
            best = monitored;
        }
        if let Some(dir) = out_dir {
            let state = pack_training_state(&params, &opt, epoch + 1, best);
            save_checkpoint(&dir.join("last.ckpt"), digest, &state)?;
            if improved {
                save_checkpoint(&dir.join("best.ckpt"), digest, &state)?;
            }
        }
    }
    Ok(TrainOutcome {
        trace,
        params,
        best_iou: best,
    })
}
