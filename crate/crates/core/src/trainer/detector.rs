//! Toy anchor-free detector: a three-level backbone, a fusion neck and
//! per-level heads predicting class logits and four side distances.
//!
//! Location `(i, j)` on a level with stride `s` sits at
//! `((j + ½)·s, (i + ½)·s)`. Distances are `s · softplus(raw)`, so they are
//! never negative.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::block::{FilterBlock, ParamMut};
use crate::error::{Error, Result};
use crate::layers::FilterKind;
use crate::necks::{build_neck, Neck, NeckConfig, NeckKind};
use crate::tensor::Tensor4;

use super::classifier::Arch;
use super::data::{generate_scenes, iou, GtBox, Scene, ShapesConfig};
use super::optim::{sgd_step, OptimConfig, SgdState, Trainable};
use super::record::{LayerRecord, StepRecord, TrainRecord};

pub const STRIDES: [usize; 3] = [4, 8, 16];
/// Upper bound of `max(l, t, r, b)` for levels 0 and 1; level 2 is open.
pub const RANGES: [f32; 2] = [12.0, 24.0];
pub const CENTER_RADIUS: f32 = 1.5;
pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
pub const PRIOR: f64 = 0.01;
pub const NMS_IOU: f32 = 0.3;
const BACKBONE_WIDTHS: [usize; 4] = [8, 8, 16, 16];
const NECK_WIDTH: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target {
    pub class: usize,
    /// Distances to the left, top, right and bottom box sides.
    pub ltrb: [f32; 4],
}

/// Per-level assignment, row-major over the level grid.
pub type LevelTargets = Vec<Option<Target>>;

/// Assigns each location to at most one box: the location must lie inside
/// the box and within `CENTER_RADIUS · stride` of its center on both axes,
/// and `max(l, t, r, b)` must fall in the level's range. Ties go to the
/// smallest box.
pub fn assign_targets(boxes: &[GtBox], grid: &[(usize, usize)]) -> Vec<LevelTargets> {
    grid.iter()
        .enumerate()
        .map(|(lvl, &(h, w))| {
            let s = STRIDES[lvl] as f32;
            let lo = if lvl == 0 { 0.0 } else { RANGES[lvl - 1] };
            let hi = RANGES.get(lvl).copied().unwrap_or(f32::INFINITY);
            (0..h * w)
                .map(|idx| {
                    let (x, y) = (((idx % w) as f32 + 0.5) * s, ((idx / w) as f32 + 0.5) * s);
                    boxes
                        .iter()
                        .filter_map(|b| {
                            let ltrb = [x - b.x0, y - b.y0, b.x1 - x, b.y1 - y];
                            let (cx, cy) = ((b.x0 + b.x1) / 2.0, (b.y0 + b.y1) / 2.0);
                            let inside = ltrb.iter().all(|&d| d > 0.0);
                            let central = (x - cx).abs() < CENTER_RADIUS * s && (y - cy).abs() < CENTER_RADIUS * s;
                            let m = ltrb.iter().fold(0.0f32, |a, &d| a.max(d));
                            (inside && central && m > lo && m <= hi).then_some((b.area(), Target { class: b.class, ltrb }))
                        })
                        .min_by(|a, b| a.0.total_cmp(&b.0))
                        .map(|(_, t)| t)
                })
                .collect()
        })
        .collect()
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Sigmoid focal loss for one logit and its derivative.
pub fn focal_loss(z: f64, positive: bool) -> (f64, f64) {
    let p = sigmoid(z);
    let (a, g) = (FOCAL_ALPHA, FOCAL_GAMMA);
    if positive {
        let ln_p = -softplus(-z);
        let q = 1.0 - p;
        let loss = -a * q.powf(g) * ln_p;
        let grad = a * g * q.powf(g) * p * ln_p - a * q.powf(g + 1.0);
        (loss, grad)
    } else {
        let ln_q = -softplus(z);
        let loss = -(1.0 - a) * p.powf(g) * ln_q;
        let grad = (1.0 - a) * (p.powf(g + 1.0) - g * p.powf(g) * (1.0 - p) * ln_q);
        (loss, grad)
    }
}

/// `−ln((I + 1) / (U + 1))` for boxes given as side distances from the
/// same point, and its derivative with respect to `pred`.
pub fn iou_loss(pred: [f64; 4], target: [f64; 4]) -> (f64, [f64; 4]) {
    let [l, t, r, b] = pred;
    let [tl, tt, tr, tb] = target;
    let iw = l.min(tl) + r.min(tr);
    let ih = t.min(tt) + b.min(tb);
    let inter = iw * ih;
    let ap = (l + r) * (t + b);
    let ag = (tl + tr) * (tt + tb);
    let union = ap + ag - inter;
    let loss = -((inter + 1.0) / (union + 1.0)).ln();
    // dI/dside: the side contributes to I only while it is the smaller one.
    let di = [
        if l < tl { ih } else { 0.0 },
        if t < tt { iw } else { 0.0 },
        if r < tr { ih } else { 0.0 },
        if b < tb { iw } else { 0.0 },
    ];
    let dap = [t + b, l + r, t + b, l + r];
    let mut grad = [0.0; 4];
    for k in 0..4 {
        grad[k] = -di[k] / (inter + 1.0) + (dap[k] - di[k]) / (union + 1.0);
    }
    (loss, grad)
}

#[derive(Debug, Clone)]
pub struct Head {
    pub tower: FilterBlock,
    pub cls: FilterBlock,
    pub reg: FilterBlock,
    tower_out: Option<Tensor4>,
}

impl Head {
    fn new<R: Rng + ?Sized>(c: usize, classes: usize, rng: &mut R) -> Result<Self> {
        let tower = FilterBlock::init(FilterKind::Conv, c, c, 3, 1, false, true, rng)?;
        let mut cls = FilterBlock::init(FilterKind::Conv, c, classes, 3, 1, false, false, rng)?;
        if let Some(b) = cls.filter.bias.as_mut() {
            b.fill((-((1.0 - PRIOR) / PRIOR).ln()) as f32);
        }
        let reg = FilterBlock::init(FilterKind::Conv, c, 4, 3, 1, false, false, rng)?;
        Ok(Self { tower, cls, reg, tower_out: None })
    }

    fn forward(&mut self, x: &Tensor4, training: bool) -> Result<(Tensor4, Tensor4)> {
        let t = self.tower.forward(x, training)?;
        let c = self.cls.forward(&t, training)?;
        let r = self.reg.forward(&t, training)?;
        self.tower_out = training.then_some(t);
        Ok((c, r))
    }

    fn backward(&mut self, gc: &Tensor4, gr: &Tensor4) -> Result<Tensor4> {
        self.tower_out
            .take()
            .ok_or_else(|| Error::Config("head backward without a training forward".into()))?;
        let mut gt = self.cls.backward(gc)?;
        gt.add_assign(&self.reg.backward(gr)?)?;
        self.tower.backward(&gt)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub bbox: GtBox,
    pub score: f32,
}

#[derive(Debug, Clone)]
pub struct Detector {
    pub arch: Arch,
    pub stem: FilterBlock,
    pub stages: Vec<FilterBlock>,
    pub neck: Neck,
    pub heads: Vec<Head>,
    pub classes: usize,
}

/// Raw head outputs for one batch, per level.
#[derive(Debug, Clone)]
pub struct HeadOutputs {
    pub cls: Vec<Tensor4>,
    pub reg: Vec<Tensor4>,
}

impl Detector {
    pub fn new<R: Rng + ?Sized>(arch: Arch, neck_kind: NeckKind, classes: usize, rng: &mut R) -> Result<Self> {
        let kind = arch.filter_kind();
        let w = BACKBONE_WIDTHS;
        let stem = FilterBlock::init(FilterKind::Conv, 3, w[0], 3, 2, true, true, rng)?;
        let stages = (1..4)
            .map(|i| FilterBlock::init(kind, w[i - 1], w[i], 3, 2, true, true, rng))
            .collect::<Result<Vec<_>>>()?;
        let cfg = NeckConfig::new(neck_kind, w[1..].to_vec(), NECK_WIDTH, kind);
        let neck = Neck::new(build_neck(&cfg)?, rng)?;
        let heads = (0..3)
            .map(|_| Head::new(NECK_WIDTH, classes, rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { arch, stem, stages, neck, heads, classes })
    }

    pub fn forward(&mut self, x: &Tensor4, training: bool) -> Result<HeadOutputs> {
        let mut h = self.stem.forward(x, training)?;
        let mut pyramid = Vec::with_capacity(3);
        for s in &mut self.stages {
            h = s.forward(&h, training)?;
            pyramid.push(h.clone());
        }
        let feats = self.neck.forward(&pyramid, training)?;
        let mut out = HeadOutputs { cls: Vec::new(), reg: Vec::new() };
        for (head, f) in self.heads.iter_mut().zip(&feats) {
            let (c, r) = head.forward(f, training)?;
            out.cls.push(c);
            out.reg.push(r);
        }
        Ok(out)
    }

    pub fn backward(&mut self, g: &HeadOutputs) -> Result<()> {
        let g_feats = self
            .heads
            .iter_mut()
            .zip(g.cls.iter().zip(&g.reg))
            .map(|(h, (gc, gr))| h.backward(gc, gr))
            .collect::<Result<Vec<_>>>()?;
        let g_pyr = self.neck.backward(&g_feats)?;
        let mut carry: Option<Tensor4> = None;
        for (i, stage) in self.stages.iter_mut().enumerate().rev() {
            let mut gi = g_pyr[i].clone();
            if let Some(c) = carry.take() {
                gi.add_assign(&c)?;
            }
            carry = Some(stage.backward(&gi)?);
        }
        self.stem.backward(&carry.expect("three stages"))?;
        Ok(())
    }

    /// Focal classification loss over every location and class, normalized
    /// by the number of positives, plus the mean IoU loss over positives.
    /// Returns `(loss, gradient)`.
    pub fn loss(&self, out: &HeadOutputs, scenes: &[&Scene]) -> Result<(f64, HeadOutputs)> {
        let n = scenes.len();
        let grid: Vec<(usize, usize)> = out.cls.iter().map(|t| (t.shape().h, t.shape().w)).collect();
        let targets: Vec<Vec<LevelTargets>> = scenes.iter().map(|s| assign_targets(&s.boxes, &grid)).collect();
        let num_pos: usize = targets.iter().flatten().flatten().filter(|t| t.is_some()).count();
        let norm = num_pos.max(1) as f64;
        let mut g = HeadOutputs {
            cls: out.cls.iter().map(|t| Tensor4::zeros(t.shape())).collect(),
            reg: out.reg.iter().map(|t| Tensor4::zeros(t.shape())).collect(),
        };
        let (mut cls_loss, mut reg_loss) = (0.0, 0.0);
        for lvl in 0..grid.len() {
            let (h, w) = grid[lvl];
            let s = STRIDES[lvl] as f64;
            for b in 0..n {
                for idx in 0..h * w {
                    let (y, x) = (idx / w, idx % w);
                    let t = targets[b][lvl][idx];
                    for k in 0..self.classes {
                        let z = f64::from(out.cls[lvl].at(b, k, y, x));
                        let (l, dz) = focal_loss(z, t.is_some_and(|t| t.class == k));
                        cls_loss += l;
                        g.cls[lvl].set(b, k, y, x, (dz / norm) as f32);
                    }
                    if let Some(t) = t {
                        let raw: [f64; 4] = std::array::from_fn(|k| f64::from(out.reg[lvl].at(b, k, y, x)));
                        let pred = raw.map(|r| s * softplus(r));
                        let target = t.ltrb.map(f64::from);
                        let (l, dp) = iou_loss(pred, target);
                        reg_loss += l;
                        for k in 0..4 {
                            let dr = dp[k] * s * sigmoid(raw[k]) / norm;
                            g.reg[lvl].set(b, k, y, x, dr as f32);
                        }
                    }
                }
            }
        }
        let loss = (cls_loss + reg_loss) / norm;
        if !loss.is_finite() {
            return Err(Error::NonFinite("detection loss".into()));
        }
        Ok((loss, g))
    }

    /// Decodes, thresholds and suppresses detections for sample `b`.
    pub fn decode(&self, out: &HeadOutputs, b: usize, score_threshold: f32, image_size: f32) -> Vec<Detection> {
        let mut dets = Vec::new();
        for (lvl, (cls, reg)) in out.cls.iter().zip(&out.reg).enumerate() {
            let sh = cls.shape();
            let s = STRIDES[lvl] as f32;
            for y in 0..sh.h {
                for x in 0..sh.w {
                    let (k, z) = (0..self.classes)
                        .map(|k| (k, cls.at(b, k, y, x)))
                        .fold((0, f32::NEG_INFINITY), |a, c| if c.1 > a.1 { c } else { a });
                    let score = sigmoid(f64::from(z)) as f32;
                    if score < score_threshold {
                        continue;
                    }
                    let d: [f32; 4] = std::array::from_fn(|i| s * softplus(f64::from(reg.at(b, i, y, x))) as f32);
                    let (cx, cy) = ((x as f32 + 0.5) * s, (y as f32 + 0.5) * s);
                    dets.push(Detection {
                        bbox: GtBox {
                            x0: (cx - d[0]).max(0.0),
                            y0: (cy - d[1]).max(0.0),
                            x1: (cx + d[2]).min(image_size),
                            y1: (cy + d[3]).min(image_size),
                            class: k,
                        },
                        score,
                    });
                }
            }
        }
        nms(dets, NMS_IOU, 20)
    }
}

/// Greedy class-agnostic suppression, highest score first, at most `keep`
/// boxes. Objects in the shapes dataset never overlap, so a box that
/// overlaps a stronger one is a duplicate whatever its class.
pub fn nms(mut dets: Vec<Detection>, threshold: f32, keep: usize) -> Vec<Detection> {
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut out: Vec<Detection> = Vec::new();
    for d in dets {
        if out.len() == keep {
            break;
        }
        if out.iter().all(|o| iou(&o.bbox, &d.bbox) <= threshold) {
            out.push(d);
        }
    }
    out
}

/// Matches detections to ground truth greedily by score at IoU ≥ 0.5 with
/// equal classes. Returns `(tp, fp, fn)`.
pub fn match_detections(dets: &[Detection], gt: &[GtBox]) -> (usize, usize, usize) {
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    let mut used = vec![false; gt.len()];
    let mut tp = 0;
    for d in order {
        let best = gt
            .iter()
            .enumerate()
            .filter(|(i, g)| !used[*i] && g.class == d.bbox.class)
            .map(|(i, g)| (i, iou(&d.bbox, g)))
            .filter(|&(_, v)| v >= 0.5)
            .max_by(|a, b| a.1.total_cmp(&b.1));
        if let Some((i, _)) = best {
            used[i] = true;
            tp += 1;
        }
    }
    (tp, dets.len() - tp, gt.len() - tp)
}

pub fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        1.0
    } else {
        2.0 * tp as f64 / denom as f64
    }
}

impl Trainable for Detector {
    fn visit_params(&mut self, f: &mut dyn FnMut(ParamMut<'_>)) {
        self.stem.visit_params("stem", f);
        for (i, s) in self.stages.iter_mut().enumerate() {
            s.visit_params(&format!("c{}", i + 3), f);
        }
        self.neck.visit_params("neck", f);
        for (i, h) in self.heads.iter_mut().enumerate() {
            h.tower.visit_params(&format!("head{i}.tower"), f);
            h.cls.visit_params(&format!("head{i}.cls"), f);
            h.reg.visit_params(&format!("head{i}.reg"), f);
        }
    }

    fn zero_grad(&mut self) {
        self.stem.zero_grad();
        for s in &mut self.stages {
            s.zero_grad();
        }
        self.neck.zero_grad();
        for h in &mut self.heads {
            h.tower.zero_grad();
            h.cls.zero_grad();
            h.reg.zero_grad();
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    /// Train a fresh classifier twin on the pretraining task.
    Pretrain,
    /// Fine-tune a pretrained classifier on the shifted task.
    Classify,
    Detect,
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Task::Pretrain => "pretrain",
            Task::Classify => "classify",
            Task::Detect => "detect",
        })
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Task::Pretrain),
            "classify" => Ok(Task::Classify),
            "detect" => Ok(Task::Detect),
            other => Err(Error::Config(format!("unknown task `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorRun {
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub train_scenes: usize,
    pub test_scenes: usize,
    pub score_threshold: f32,
    pub optim: OptimConfig,
    pub data: ShapesConfig,
}

impl DetectorRun {
    pub fn new(seed: u64) -> Self {
        let steps = 800;
        Self {
            steps,
            batch_size: 8,
            seed,
            train_scenes: 512,
            test_scenes: 64,
            score_threshold: 0.3,
            optim: OptimConfig::new(0.01, steps),
            data: ShapesConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct DetectionResult {
    pub record: TrainRecord,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

/// Micro-averaged F1 over `scenes`, evaluated in inference mode.
pub fn evaluate(model: &mut Detector, scenes: &[Scene], score_threshold: f32) -> Result<(f64, usize, usize, usize)> {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for chunk in scenes.chunks(16) {
        let imgs: Vec<Tensor4> = chunk.iter().map(|s| s.image.clone()).collect();
        let x = Tensor4::concat_batch(&imgs)?;
        let size = x.shape().w as f32;
        let out = model.forward(&x, false)?;
        for (b, sc) in chunk.iter().enumerate() {
            let dets = model.decode(&out, b, score_threshold, size);
            let (t, p, n) = match_detections(&dets, &sc.boxes);
            tp += t;
            fp += p;
            fn_ += n;
        }
    }
    Ok((f1(tp, fp, fn_), tp, fp, fn_))
}

/// A trained detector with its log and held-out scenes.
#[derive(Debug, Clone)]
pub struct TrainedDetector {
    pub model: Detector,
    pub record: TrainRecord,
    pub test: Vec<Scene>,
}

/// Trains a detector from scratch on the shapes dataset. Train and test
/// scenes use seeds derived from `run.seed`; the model is initialized from
/// `run.seed` as well.
pub fn train_detector_model(neck_kind: NeckKind, arch: Arch, run: &DetectorRun) -> Result<TrainedDetector> {
    run.optim.validate()?;
    if run.batch_size < 2 {
        return Err(Error::Config("batch size must be at least 2".into()));
    }
    let train = generate_scenes(&run.data, run.train_scenes, run.seed.wrapping_mul(2).wrapping_add(1000))?;
    let test = generate_scenes(&run.data, run.test_scenes, run.seed.wrapping_mul(2).wrapping_add(1001))?;
    let mut rng = ChaCha8Rng::seed_from_u64(run.seed);
    let mut model = Detector::new(arch, neck_kind, run.data.classes, &mut rng)?;
    let mut state = SgdState::new();
    let mut record = TrainRecord::new();
    let mut order: Vec<usize> = Vec::new();
    for step in 0..run.steps {
        if order.len() < run.batch_size {
            let mut fresh: Vec<usize> = (0..train.len()).collect();
            fresh.shuffle(&mut rng);
            order.extend(fresh);
        }
        let idx: Vec<usize> = order.drain(..run.batch_size).collect();
        let scenes: Vec<&Scene> = idx.iter().map(|&i| &train[i]).collect();
        let imgs: Vec<Tensor4> = scenes.iter().map(|s| s.image.clone()).collect();
        let x = Tensor4::concat_batch(&imgs)?;
        model.zero_grad();
        let out = model.forward(&x, true)?;
        let (loss, g) = model.loss(&out, &scenes)?;
        model.backward(&g)?;
        let lr = run.optim.schedule.lr(run.optim.base_lr, step)?;
        sgd_step(&mut model, &mut state, lr, &run.optim)?;
        record.push_step(StepRecord { step, loss, lr })?;
        for (i, s) in model.stages.iter().enumerate() {
            let bn = s.bn.as_ref().expect("stages use batch norm");
            let l2 = |v: &[f32]| v.iter().map(|&a| f64::from(a).powi(2)).sum::<f64>().sqrt();
            record.push_layer(LayerRecord {
                step,
                layer: format!("c{}", i + 3),
                bn_mean_norm: l2(&bn.running_mean),
                bn_var_norm: l2(&bn.running_var),
                weight_l2: s.filter.weights().l2_norm(),
            })?;
        }
    }
    Ok(TrainedDetector { model, record, test })
}

/// [`train_detector_model`] followed by held-out F1 at `run.score_threshold`.
pub fn train_toy_detector(neck_kind: NeckKind, arch: Arch, run: &DetectorRun) -> Result<DetectionResult> {
    let mut t = train_detector_model(neck_kind, arch, run)?;
    let (f1, tp, fp, fn_) = evaluate(&mut t.model, &t.test, run.score_threshold)?;
    Ok(DetectionResult { record: t.record, f1, tp, fp, fn_ })
}

/// Shape of the level grids for an input of `size × size`.
pub fn level_grid(size: usize) -> Vec<(usize, usize)> {
    STRIDES.iter().map(|&s| (size / s, size / s)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape4;

    #[test]
    fn focal_gradient_matches_finite_differences() {
        for &z in &[-6.0, -2.0, -0.3, 0.0, 0.7, 3.0] {
            for pos in [true, false] {
                let h = 1e-5;
                let num = (focal_loss(z + h, pos).0 - focal_loss(z - h, pos).0) / (2.0 * h);
                let (_, g) = focal_loss(z, pos);
                assert!((num - g).abs() < 1e-6 * num.abs().max(1.0), "z {z} pos {pos}: {num} vs {g}");
            }
        }
    }

    #[test]
    fn iou_loss_gradient_matches_finite_differences() {
        let cases = [
            ([3.0, 4.0, 5.0, 2.0], [4.0, 3.0, 4.5, 6.0]),
            ([10.0, 1.0, 2.5, 8.0], [2.0, 2.0, 2.0, 2.0]),
        ];
        for (p, t) in cases {
            let (_, g) = iou_loss(p, t);
            for k in 0..4 {
                let mut a = p;
                let mut b = p;
                a[k] += 1e-6;
                b[k] -= 1e-6;
                let num = (iou_loss(a, t).0 - iou_loss(b, t).0) / 2e-6;
                assert!((num - g[k]).abs() < 1e-6, "{k}: {num} vs {}", g[k]);
            }
        }
        let (l, _) = iou_loss([2.0, 3.0, 4.0, 5.0], [2.0, 3.0, 4.0, 5.0]);
        assert!(l.abs() < 1e-12);
    }

    #[test]
    fn assignment_respects_center_and_range() {
        let b = GtBox { x0: 20.0, y0: 20.0, x1: 30.0, y1: 30.0, class: 2 };
        let t = assign_targets(&[b], &level_grid(64));
        let pos0: Vec<usize> = (0..256).filter(|&i| t[0][i].is_some()).collect();
        assert!(!pos0.is_empty());
        for &i in &pos0 {
            let tt = t[0][i].unwrap();
            assert_eq!(tt.class, 2);
            assert!(tt.ltrb.iter().all(|&d| d > 0.0 && d <= RANGES[0]));
        }
        assert!(t[1].iter().chain(&t[2]).all(Option::is_none));
    }

    #[test]
    fn overlapping_boxes_prefer_the_smaller() {
        let big = GtBox { x0: 0.0, y0: 0.0, x1: 20.0, y1: 20.0, class: 0 };
        let small = GtBox { x0: 6.0, y0: 6.0, x1: 14.0, y1: 14.0, class: 1 };
        let t = assign_targets(&[big, small], &level_grid(64));
        let at_center = t[0][2 * 16 + 2].unwrap();
        assert_eq!(at_center.class, 1);
    }

    #[test]
    fn nms_and_matching() {
        let b = |x0: f32, class, score| Detection {
            bbox: GtBox { x0, y0: 0.0, x1: x0 + 10.0, y1: 10.0, class },
            score,
        };
        // IoU(b(0), b(1)) = 9/11, IoU(b(0), b(6)) = 4/16.
        let kept = nms(vec![b(0.0, 0, 0.9), b(1.0, 0, 0.8), b(1.0, 1, 0.7), b(6.0, 2, 0.65), b(30.0, 0, 0.6)], 0.3, 10);
        let xs: Vec<f32> = kept.iter().map(|d| d.bbox.x0).collect();
        assert_eq!(xs, [0.0, 6.0, 30.0]);
        assert_eq!(nms(vec![b(0.0, 0, 0.9), b(30.0, 0, 0.6), b(60.0, 0, 0.5)], 0.3, 2).len(), 2);
        let gt = [GtBox { x0: 0.0, y0: 0.0, x1: 10.0, y1: 10.0, class: 0 }];
        assert_eq!(match_detections(&kept, &gt), (1, 2, 0));
        assert!((f1(1, 2, 0) - 0.5).abs() < 1e-12);
        assert_eq!(f1(0, 0, 0), 1.0);
    }

    #[test]
    fn predicted_distances_are_non_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = Detector::new(Arch::Adder, NeckKind::Rpafpn, 3, &mut rng).unwrap();
        for h in &mut m.heads {
            h.reg.filter.weights_mut().iter_mut().for_each(|w| *w *= 50.0);
        }
        let x = Tensor4::randn(Shape4::new(2, 3, 64, 64), 1.0, &mut rng);
        let out = m.forward(&x, false).unwrap();
        let dets = m.decode(&out, 0, 0.0, 64.0);
        for d in dets {
            assert!(d.bbox.x1 >= d.bbox.x0 && d.bbox.y1 >= d.bbox.y0);
        }
        for (lvl, r) in out.reg.iter().enumerate() {
            for &v in r.data() {
                assert!(STRIDES[lvl] as f64 * softplus(f64::from(v)) >= 0.0);
            }
        }
    }

    /// Directional difference of the detection loss with respect to raw
    /// head outputs.
    #[test]
    fn loss_gradient_directional_check_on_head_outputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = Detector::new(Arch::Conv, NeckKind::Fpn, 3, &mut rng).unwrap();
        let scenes = generate_scenes(&ShapesConfig::default(), 2, 3).unwrap();
        let refs: Vec<&Scene> = scenes.iter().collect();
        let out = HeadOutputs {
            cls: level_grid(64).iter().map(|&(h, w)| Tensor4::randn(Shape4::new(2, 3, h, w), 1.0, &mut rng)).collect(),
            reg: level_grid(64).iter().map(|&(h, w)| Tensor4::randn(Shape4::new(2, 4, h, w), 1.0, &mut rng)).collect(),
        };
        let (_, g) = m.loss(&out, &refs).unwrap();
        let dir: Vec<Tensor4> = out.reg.iter().map(|t| Tensor4::randn(t.shape(), 1.0, &mut rng)).collect();
        let dirc: Vec<Tensor4> = out.cls.iter().map(|t| Tensor4::randn(t.shape(), 1.0, &mut rng)).collect();
        let analytic: f64 = g.reg.iter().zip(&dir).map(|(a, b)| a.dot(b).unwrap()).sum::<f64>()
            + g.cls.iter().zip(&dirc).map(|(a, b)| a.dot(b).unwrap()).sum::<f64>();
        let eps = 1e-3;
        let shifted = |s: f64| HeadOutputs {
            cls: out.cls.iter().zip(&dirc).map(|(a, d)| a.add(&d.scale(s)).unwrap()).collect(),
            reg: out.reg.iter().zip(&dir).map(|(a, d)| a.add(&d.scale(s)).unwrap()).collect(),
        };
        let num = (m.loss(&shifted(eps), &refs).unwrap().0 - m.loss(&shifted(-eps), &refs).unwrap().0) / (2.0 * eps);
        assert!((num - analytic).abs() < 1e-2 * num.abs().max(1e-3), "{num} vs {analytic}");
    }
}
