//! Target assignment, the two-stage loss, sampling and the optimizer loop.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::command::{GraspLabel, Sample};
use crate::dataset::{Dataset, Split};
use crate::geometry::{theta_to_class, AxisBox, Grasp5D, OrientationClass};
use crate::manifest::{derive_seed, RunManifest};
use crate::model::{
    command_backward, command_forward, encode_box, generate_anchors, head_backward, head_forward, image_tensor,
    output_backward, output_forward, propose, visual_backward, visual_forward, Checkpoint, ModelConfig,
    ModelError, OptimizerState, Weights,
};
use crate::nn::{sigmoid, smooth_l1, smooth_l1_grad, softplus, Real};
use crate::scene::Scene;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("no training samples")]
    NoSamples,
    #[error("non-finite loss at iteration {iteration}: {parts:?}")]
    NonFinite { iteration: u64, parts: LossParts },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// What the grasp classifier is taught to pick out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMode {
    /// Target grasps by orientation, other objects' grasps as not-target.
    Command,
    /// Every grasp is a target; no not-target class.
    Agnostic,
    /// Object boxes (angle zero) stand in for grasps; used by the retrieval model.
    ObjectBoxes,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub n_cls_p: usize,
    pub n_cls_g: usize,
    pub word_dropout: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub lr: f64,
    /// Fraction of `iterations` after which the learning rate is multiplied by `lr_drop`.
    pub lr_drop_at: f64,
    pub lr_drop: f64,
    pub eps: f64,
    pub iterations: u64,
    pub batch_size: usize,
    pub seed: u64,
    pub iou_hi: f64,
    pub iou_lo: f64,
    pub label_mode: LabelMode,
    pub log_every: u64,
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            n_cls_p: 128,
            n_cls_g: 128,
            word_dropout: 0.1,
            beta1: 0.9,
            beta2: 0.99,
            lr: 1e-3,
            lr_drop_at: 0.7,
            lr_drop: 0.1,
            eps: 1e-8,
            iterations: 20_000,
            batch_size: 1,
            seed: 0,
            iou_hi: 0.5,
            iou_lo: 0.3,
            label_mode: LabelMode::Command,
            log_every: 50,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        toml::from_str(text).map_err(|e| TrainError::Config(e.message().to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if self.n_cls_p == 0 || self.n_cls_g < 2 || self.batch_size == 0 {
            return bad("n_cls_p and batch_size must be at least 1, n_cls_g at least 2");
        }
        if !(0.0..1.0).contains(&self.word_dropout) {
            return bad("word_dropout must be in [0, 1)");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must be in [0, 1)");
        }
        if !(self.lr > 0.0 && self.eps > 0.0 && self.lr_drop > 0.0) {
            return bad("lr, lr_drop and eps must be positive");
        }
        if !(0.0..=1.0).contains(&self.lr_drop_at) {
            return bad("lr_drop_at must be in [0, 1]");
        }
        if !(0.0 <= self.iou_lo && self.iou_lo <= self.iou_hi && self.iou_hi <= 1.0) {
            return bad("need 0 <= iou_lo <= iou_hi <= 1");
        }
        Ok(())
    }

    /// Learning rate used at zero-based iteration `it`.
    pub fn lr_at(&self, it: u64) -> f64 {
        if (it as f64) < self.lr_drop_at * self.iterations as f64 {
            self.lr
        } else {
            self.lr * self.lr_drop
        }
    }
}

/// Grasp labels of a sample under a labeling mode.
pub fn training_labels(sample: &Sample, scene: &Scene, mode: LabelMode, n_orient: usize) -> Vec<GraspLabel> {
    match mode {
        LabelMode::Command => sample.labels.clone(),
        LabelMode::Agnostic => sample
            .labels
            .iter()
            .map(|l| GraspLabel { class: OrientationClass::Orientation(theta_to_class(l.grasp.theta(), n_orient)), ..*l })
            .collect(),
        LabelMode::ObjectBoxes => scene
            .objects
            .iter()
            .enumerate()
            .filter_map(|(i, o)| {
                let grasp = Grasp5D::new(o.bbox.x, o.bbox.y, 0.0, o.bbox.w, o.bbox.h).ok()?;
                let class = if sample.target == Some(o.category) {
                    OrientationClass::Orientation(theta_to_class(0.0, n_orient))
                } else {
                    OrientationClass::NotTarget
                };
                Some(GraspLabel { grasp, class, object: i })
            })
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProposalLabel {
    Positive,
    Negative,
    Ignore,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiAssignment {
    pub rho_star: ProposalLabel,
    /// Hull of the best-matching grasp; `None` when nothing overlaps.
    pub r_star: Option<AxisBox>,
    /// `None` only for ignored regions.
    pub c_star: Option<OrientationClass>,
    /// Index into the label list of the best match.
    pub matched: Option<usize>,
    pub iou: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Thresholds {
    pub hi: f64,
    pub lo: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self { hi: 0.5, lo: 0.3 }
    }
}

fn assignment(label: ProposalLabel, best: Option<(usize, f64)>, labels: &[GraspLabel]) -> RoiAssignment {
    let matched = best.map(|b| b.0);
    let iou = best.map_or(0.0, |b| b.1);
    let r_star = matched.map(|m| labels[m].grasp.hull());
    let c_star = match label {
        ProposalLabel::Negative => Some(OrientationClass::Background),
        ProposalLabel::Positive => matched.map(|m| labels[m].class),
        ProposalLabel::Ignore => None,
    };
    RoiAssignment { rho_star: label, r_star, c_star, matched, iou }
}

fn best_match(roi: &AxisBox, labels: &[GraspLabel]) -> Option<(usize, f64)> {
    labels
        .iter()
        .enumerate()
        .map(|(i, l)| (i, roi.iou(&l.grasp.hull())))
        .filter(|&(_, v)| v > 0.0)
        .fold(None, |acc: Option<(usize, f64)>, cur| match acc {
            Some(a) if a.1 >= cur.1 => Some(a),
            _ => Some(cur),
        })
}

/// Label each region against the axis-aligned hulls of the ground-truth grasps.
pub fn assign_rois(rois: &[AxisBox], labels: &[GraspLabel], th: Thresholds) -> Vec<RoiAssignment> {
    rois.iter()
        .map(|roi| {
            let best = best_match(roi, labels);
            let iou = best.map_or(0.0, |b| b.1);
            let label = if iou >= th.hi {
                ProposalLabel::Positive
            } else if iou < th.lo {
                ProposalLabel::Negative
            } else {
                ProposalLabel::Ignore
            };
            assignment(label, best, labels)
        })
        .collect()
}

/// Like [`assign_rois`], and additionally marks the highest-overlap anchor of
/// every grasp as positive so small grasps always have a match.
pub fn assign_anchors(anchors: &[AxisBox], labels: &[GraspLabel], th: Thresholds) -> Vec<RoiAssignment> {
    let mut out = assign_rois(anchors, labels, th);
    for (li, l) in labels.iter().enumerate() {
        let hull = l.grasp.hull();
        let best = anchors
            .iter()
            .enumerate()
            .map(|(i, a)| (i, a.iou(&hull)))
            .fold((usize::MAX, 0.0), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
        if best.0 != usize::MAX && out[best.0].rho_star != ProposalLabel::Positive {
            out[best.0] = assignment(ProposalLabel::Positive, Some((li, best.1)), labels);
        }
    }
    out
}

/// Draw `n` anchors: positives up to half, negatives for the rest, padding
/// by resampling the drawn pool when there are too few.
pub fn sample_anchors<R: Rng>(assign: &[RoiAssignment], n: usize, rng: &mut R) -> Vec<usize> {
    let mut pos: Vec<usize> = (0..assign.len()).filter(|&i| assign[i].rho_star == ProposalLabel::Positive).collect();
    let mut neg: Vec<usize> = (0..assign.len()).filter(|&i| assign[i].rho_star == ProposalLabel::Negative).collect();
    pos.shuffle(rng);
    neg.shuffle(rng);
    pos.truncate(n / 2);
    neg.truncate(n - pos.len());
    let mut out: Vec<usize> = pos.into_iter().chain(neg).collect();
    let drawn = out.len();
    if drawn == 0 {
        return out;
    }
    while out.len() < n {
        out.push(out[rng.random_range(0..drawn)]);
    }
    out
}

/// All positives (capped at `cap`) plus an equal number of random negatives.
pub fn sample_fusion_rois<R: Rng>(assign: &[RoiAssignment], cap: usize, rng: &mut R) -> Vec<usize> {
    let mut pos: Vec<usize> = (0..assign.len()).filter(|&i| assign[i].rho_star == ProposalLabel::Positive).collect();
    let mut neg: Vec<usize> = (0..assign.len()).filter(|&i| assign[i].rho_star == ProposalLabel::Negative).collect();
    pos.shuffle(rng);
    pos.truncate(cap);
    neg.shuffle(rng);
    neg.truncate(pos.len());
    pos.into_iter().chain(neg).collect()
}

pub fn apply_word_dropout<R: Rng>(tokens: &[usize], p: f64, unk: usize, rng: &mut R) -> Vec<usize> {
    tokens.iter().map(|&t| if rng.random::<f64>() < p { unk } else { t }).collect()
}

/// One sampled anchor for the proposal loss.
#[derive(Debug, Clone, Copy)]
pub struct ProposalItem<T> {
    pub logit: T,
    pub delta: [T; 4],
    pub positive: bool,
    pub target: [f64; 4],
}

/// One fused region for the grasp loss.
#[derive(Debug, Clone)]
pub struct GraspItem<'a, T> {
    pub logits: &'a [T],
    /// Predicted deltas of the regressed orientation row.
    pub delta: [T; 4],
    pub class: usize,
    /// Regression target; `None` for background.
    pub target: Option<[f64; 4]>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub p_cls: f64,
    pub p_loc: f64,
    pub g_cls: f64,
    pub g_loc: f64,
}

impl LossParts {
    pub fn proposal(&self) -> f64 {
        self.p_cls + self.p_loc
    }

    pub fn grasp(&self) -> f64 {
        self.g_cls + self.g_loc
    }

    pub fn total(&self) -> f64 {
        self.proposal() + self.grasp()
    }

    pub fn is_finite(&self) -> bool {
        [self.p_cls, self.p_loc, self.g_cls, self.g_loc].iter().all(|v| v.is_finite())
    }
}

/// Binary cross entropy over `n_cls` sampled anchors plus smooth L1 over
/// the positives. Returns `(cls, loc)` and per-item `(d_logit, d_delta)`.
pub fn proposal_loss<T: Real>(items: &[ProposalItem<T>], n_cls: usize) -> ((T, T), Vec<(T, [T; 4])>) {
    let z_cls = T::of(n_cls.max(1) as f64);
    let n_pos = items.iter().filter(|i| i.positive).count();
    let z_loc = T::of(n_pos.max(1) as f64);
    let mut cls = T::zero();
    let mut loc = T::zero();
    let grads = items
        .iter()
        .map(|it| {
            let y = if it.positive { T::one() } else { T::zero() };
            cls += softplus(it.logit) - y * it.logit;
            let d_logit = (sigmoid(it.logit) - y) / z_cls;
            let mut d_delta = [T::zero(); 4];
            if it.positive {
                for k in 0..4 {
                    let d = it.delta[k] - T::of(it.target[k]);
                    loc += smooth_l1(d);
                    d_delta[k] = smooth_l1_grad(d) / z_loc;
                }
            }
            (d_logit, d_delta)
        })
        .collect();
    ((cls / z_cls, loc / z_loc), grads)
}

/// Mean cross entropy over the fused regions plus smooth L1 over the
/// non-background ones, normalized by their count.
pub fn grasp_loss<T: Real>(items: &[GraspItem<T>]) -> ((T, T), Vec<(Vec<T>, [T; 4])>) {
    let z_cls = T::of(items.len().max(1) as f64);
    let n_pos = items.iter().filter(|i| i.target.is_some()).count();
    let z_loc = T::of(n_pos.max(1) as f64);
    let mut cls = T::zero();
    let mut loc = T::zero();
    let grads = items
        .iter()
        .map(|it| {
            let m = it.logits.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = m + it.logits.iter().map(|&v| (v - m).exp()).sum::<T>().ln();
            cls += lse - it.logits[it.class];
            let mut d_logits: Vec<T> = it.logits.iter().map(|&v| (v - lse).exp() / z_cls).collect();
            d_logits[it.class] -= T::one() / z_cls;
            let mut d_delta = [T::zero(); 4];
            if let Some(t) = it.target {
                for k in 0..4 {
                    let d = it.delta[k] - T::of(t[k]);
                    loc += smooth_l1(d);
                    d_delta[k] = smooth_l1_grad(d) / z_loc;
                }
            }
            (d_logits, d_delta)
        })
        .collect();
    ((cls / z_cls, loc / z_loc), grads)
}

/// A fused region with its class and regression target.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RoiTarget {
    pub roi: AxisBox,
    pub class: usize,
    /// `(orientation row, encoded target)` unless background.
    pub regress: Option<(usize, [f64; 4])>,
}

/// Everything random or data-dependent about one step, fixed before the
/// differentiable part runs.
#[derive(Debug, Clone, PartialEq)]
pub struct StepPlan {
    /// `(anchor, positive, target)` per sampled anchor.
    pub anchors: Vec<(usize, bool, [f64; 4])>,
    pub rois: Vec<RoiTarget>,
    pub tokens: Vec<usize>,
}

/// Regression row and target of a non-background region.
fn roi_target(roi: &AxisBox, a: &RoiAssignment, labels: &[GraspLabel], n_orient: usize) -> Option<RoiTarget> {
    let class = a.c_star?;
    let regress = match (class, a.matched) {
        (OrientationClass::Background, _) | (_, None) => None,
        (c, Some(m)) => {
            let g = &labels[m].grasp;
            let row = c.orientation().unwrap_or_else(|| theta_to_class(g.theta(), n_orient));
            Some((row, encode_box(roi, g.x(), g.y(), g.w(), g.h())))
        }
    };
    Some(RoiTarget { roi: *roi, class: class.index(n_orient), regress })
}

#[allow(clippy::too_many_arguments)]
pub fn plan_step<T: Real, R: Rng>(
    cfg: &ModelConfig,
    tc: &TrainConfig,
    anchors: &[AxisBox],
    trace: &crate::model::VisualTrace<T>,
    labels: &[GraspLabel],
    tokens: &[usize],
    unk: usize,
    rng: &mut R,
) -> StepPlan {
    let th = Thresholds { hi: tc.iou_hi, lo: tc.iou_lo };
    let a_assign = assign_anchors(anchors, labels, th);
    let picks = sample_anchors(&a_assign, tc.n_cls_p, rng);
    let anchor_items = picks
        .into_iter()
        .map(|i| {
            let a = &a_assign[i];
            let positive = a.rho_star == ProposalLabel::Positive;
            let target = match (positive, a.r_star) {
                (true, Some(r)) => encode_box(&anchors[i], r.x, r.y, r.w, r.h),
                _ => [0.0; 4],
            };
            (i, positive, target)
        })
        .collect();

    let mut rois: Vec<AxisBox> = propose(cfg, anchors, trace, cfg.n_p_train).into_iter().map(|p| p.roi).collect();
    rois.extend(labels.iter().map(|l| l.grasp.hull()));
    let r_assign = assign_rois(&rois, labels, th);
    let fused = sample_fusion_rois(&r_assign, tc.n_cls_g / 2, rng);
    let roi_targets = fused
        .into_iter()
        .filter_map(|i| roi_target(&rois[i], &r_assign[i], labels, cfg.n_orient))
        .collect();
    StepPlan {
        anchors: anchor_items,
        rois: roi_targets,
        tokens: apply_word_dropout(tokens, tc.word_dropout, unk, rng),
    }
}

/// Loss of one planned step; accumulates gradients into `grads` if given.
pub fn step_loss<T: Real>(
    w: &Weights<T>,
    image: &[T],
    plan: &StepPlan,
    n_cls_p: usize,
    grads: Option<&mut Weights<T>>,
) -> LossParts {
    let trace = visual_forward(w, image);
    step_loss_from_trace(w, &trace, plan, n_cls_p, grads)
}

pub fn step_loss_from_trace<T: Real>(
    w: &Weights<T>,
    trace: &crate::model::VisualTrace<T>,
    plan: &StepPlan,
    n_cls_p: usize,
    grads: Option<&mut Weights<T>>,
) -> LossParts {
    let cfg = w.config();
    let items: Vec<ProposalItem<T>> = plan
        .anchors
        .iter()
        .map(|&(a, positive, target)| ProposalItem {
            logit: trace.logits[a],
            delta: trace.anchor_delta(a),
            positive,
            target,
        })
        .collect();
    let ((p_cls, p_loc), p_grads) = proposal_loss(&items, n_cls_p);
    let mut parts = LossParts { p_cls: p_cls.f64(), p_loc: p_loc.f64(), ..Default::default() };

    let rows = plan.rois.len();
    let k = cfg.n_classes();
    let rois: Vec<AxisBox> = plan.rois.iter().map(|r| r.roi).collect();
    let head = (rows > 0).then(|| head_forward(w, trace.features(), trace.hf, trace.wf, &rois));
    let cmd = command_forward(w, &plan.tokens);
    let mut g_grads = Vec::new();
    let out = head.as_ref().map(|h| {
        let out = output_forward(w, &h.y_img, rows, &cmd.y_cmd);
        let g_items: Vec<GraspItem<T>> = plan
            .rois
            .iter()
            .enumerate()
            .map(|(r, t)| {
                let row = t.regress.map_or(0, |(row, _)| row);
                GraspItem {
                    logits: &out.logits[r * k..(r + 1) * k],
                    delta: std::array::from_fn(|j| out.deltas[r * 4 * cfg.n_orient + row * 4 + j]),
                    class: t.class,
                    target: t.regress.map(|(_, tgt)| tgt),
                }
            })
            .collect();
        let ((g_cls, g_loc), gr) = grasp_loss(&g_items);
        parts.g_cls = g_cls.f64();
        parts.g_loc = g_loc.f64();
        g_grads = gr;
        out
    });

    let Some(g) = grads else {
        return parts;
    };
    let hw = trace.hf * trace.wf;
    let mut d_logits = vec![T::zero(); trace.logits.len()];
    let mut d_deltas = vec![T::zero(); trace.deltas.len()];
    for (&(a, _, _), (dl, dd)) in plan.anchors.iter().zip(&p_grads) {
        d_logits[a] += *dl;
        let (ai, pos) = (a / hw, a % hw);
        for j in 0..4 {
            d_deltas[(ai * 4 + j) * hw + pos] += dd[j];
        }
    }
    let c = cfg.feature_channels();
    let mut d_features = vec![T::zero(); c * hw];
    if let (Some(head), Some(out)) = (&head, &out) {
        let r4 = 4 * cfg.n_orient;
        let mut dl = vec![T::zero(); rows * k];
        let mut dd = vec![T::zero(); rows * r4];
        for (r, (t, (gl, gd))) in plan.rois.iter().zip(&g_grads).enumerate() {
            dl[r * k..(r + 1) * k].copy_from_slice(gl);
            if let Some((row, _)) = t.regress {
                for j in 0..4 {
                    dd[r * r4 + row * 4 + j] = gd[j];
                }
            }
        }
        let mut d_y_cmd = vec![T::zero(); cfg.d_c];
        let d_y_img = output_backward(w, out, &head.y_img, rows, &cmd.y_cmd, &dl, &dd, &mut d_y_cmd, g);
        command_backward(w, &cmd, &d_y_cmd, g);
        d_features = head_backward(w, head, &d_y_img, trace.hf, trace.wf, g);
    }
    visual_backward(w, trace, &d_logits, &d_deltas, d_features, g);
    parts
}

/// In-place Adam update with bias correction.
pub fn adam_step(w: &mut Weights<f32>, g: &Weights<f32>, st: &mut OptimizerState, tc: &TrainConfig) {
    st.step += 1;
    let t = st.step as i32;
    let (b1, b2) = (tc.beta1 as f32, tc.beta2 as f32);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    let lr = tc.lr_at(st.step - 1) as f32;
    let eps = tc.eps as f32;
    for (i, p) in w.params_mut().iter_mut().enumerate() {
        let grad = &g.params()[i].value.data;
        let (m, v) = (&mut st.m[i], &mut st.v[i]);
        for j in 0..p.value.data.len() {
            let gj = grad[j];
            m[j] = b1 * m[j] + (1.0 - b1) * gj;
            v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
            p.value.data[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: u64,
    pub parts: LossParts,
}

pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// One record per iteration run in this call.
    pub history: Vec<LossRecord>,
}

/// Sample index used at `iteration`: a fresh permutation per epoch.
fn sample_at(pool: &[usize], seed: u64, iteration: u64) -> usize {
    let n = pool.len() as u64;
    let (epoch, pos) = (iteration / n, iteration % n);
    let mut order = pool.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch ^ 0x5eed_0000_0000)));
    order[pos as usize]
}

pub const METRICS_FILE: &str = "metrics.tsv";
pub const FINAL_CHECKPOINT: &str = "model.ckpt";

/// Train on the dataset's training split. With `resume`, continues from the
/// stored iteration and optimizer state; the result is identical to an
/// uninterrupted run.
pub fn train(
    ds: &Dataset,
    model_cfg: &ModelConfig,
    tc: &TrainConfig,
    out_dir: Option<&Path>,
    resume: Option<Checkpoint>,
) -> Result<TrainOutcome, TrainError> {
    tc.validate()?;
    let pool = ds.sample_indices(Split::Train);
    if pool.is_empty() {
        return Err(TrainError::NoSamples);
    }
    let (mut w, mut opt, start) = match resume {
        Some(ck) => {
            let opt = ck.optimizer.unwrap_or_else(|| OptimizerState::new(&ck.weights));
            (ck.weights, opt, ck.iteration)
        }
        None => {
            let cfg = model_cfg.clone().with_vocab(ds.vocab.len());
            let w = Weights::<f32>::new(&cfg, derive_seed(tc.seed, 0x1417))?;
            let opt = OptimizerState::new(&w);
            (w, opt, 0)
        }
    };
    let cfg = w.config().clone();
    let anchors = generate_anchors(&cfg);
    let manifest = RunManifest::new()
        .with_config("model", &cfg)
        .with_config("train", tc)
        .with_seed("train", tc.seed)
        .with_parent(ds.manifest.clone());
    let mut log = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join(METRICS_FILE);
            let fresh = start == 0 || !path.exists();
            let mut f = fs::OpenOptions::new().create(true).append(true).open(&path)?;
            if fresh {
                f.set_len(0)?;
                writeln!(f, "iteration\tl_p\tl_g\tl\tlr\twall_s")?;
            }
            Some(f)
        }
        None => None,
    };
    let clock = Instant::now();
    let mut history = Vec::with_capacity(tc.iterations.saturating_sub(start) as usize);
    let mut window = LossParts::default();
    let mut in_window = 0u64;
    let make_ck = |w: &Weights<f32>, opt: &OptimizerState, it: u64| Checkpoint {
        weights: w.clone(),
        vocab: ds.vocab.clone(),
        manifest: manifest.clone(),
        iteration: it,
        optimizer: Some(opt.clone()),
    };

    for it in start..tc.iterations {
        let mut grads = w.zeros_like();
        let mut parts = LossParts::default();
        for b in 0..tc.batch_size {
            let step_id = it * tc.batch_size as u64 + b as u64;
            let si = sample_at(&pool, tc.seed, step_id);
            let sample = &ds.samples[si];
            let scene = &ds.scenes[sample.scene];
            let labels = training_labels(sample, scene, tc.label_mode, cfg.n_orient);
            let image = image_tensor::<f32>(&scene.image);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(tc.seed, step_id));
            let trace = visual_forward(&w, &image);
            let plan = plan_step(&cfg, tc, &anchors, &trace, &labels, &sample.command, ds.vocab.unk(), &mut rng);
            let p = step_loss_from_trace(&w, &trace, &plan, tc.n_cls_p, Some(&mut grads));
            parts.p_cls += p.p_cls;
            parts.p_loc += p.p_loc;
            parts.g_cls += p.g_cls;
            parts.g_loc += p.g_loc;
        }
        let scale = 1.0 / tc.batch_size as f64;
        parts = LossParts {
            p_cls: parts.p_cls * scale,
            p_loc: parts.p_loc * scale,
            g_cls: parts.g_cls * scale,
            g_loc: parts.g_loc * scale,
        };
        if !parts.is_finite() {
            if let Some(dir) = out_dir {
                crate::model::save_checkpoint(&make_ck(&w, &opt, it), &dir.join("diagnostic.ckpt"))?;
                fs::write(dir.join("diagnostic.json"), serde_json::to_string_pretty(&LossRecord { iteration: it, parts }).expect("serializes"))?;
            }
            return Err(TrainError::NonFinite { iteration: it, parts });
        }
        if tc.batch_size > 1 {
            let s = scale as f32;
            grads.params_mut().iter_mut().for_each(|p| p.value.data.iter_mut().for_each(|v| *v *= s));
        }
        adam_step(&mut w, &grads, &mut opt, tc);
        history.push(LossRecord { iteration: it, parts });

        window.p_cls += parts.p_cls;
        window.p_loc += parts.p_loc;
        window.g_cls += parts.g_cls;
        window.g_loc += parts.g_loc;
        in_window += 1;
        let done = it + 1;
        if tc.log_every > 0 && (done % tc.log_every == 0 || done == tc.iterations) {
            let n = in_window as f64;
            let (lp, lg) = (window.proposal() / n, window.grasp() / n);
            log::info!("iter {done}: L_p {lp:.4} L_g {lg:.4} L {:.4}", lp + lg);
            if let Some(f) = log.as_mut() {
                writeln!(f, "{done}\t{lp:.6}\t{lg:.6}\t{:.6}\t{:e}\t{:.3}", lp + lg, tc.lr_at(it), clock.elapsed().as_secs_f64())?;
            }
            window = LossParts::default();
            in_window = 0;
        }
        if let Some(dir) = out_dir {
            if tc.checkpoint_every > 0 && done % tc.checkpoint_every == 0 && done != tc.iterations {
                crate::model::save_checkpoint(&make_ck(&w, &opt, done), &checkpoint_path(dir, done))?;
            }
        }
    }
    let ck = make_ck(&w, &opt, tc.iterations.max(start));
    if let Some(dir) = out_dir {
        crate::model::save_checkpoint(&ck, &dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(TrainOutcome { checkpoint: ck, history })
}

pub fn checkpoint_path(dir: &Path, iteration: u64) -> PathBuf {
    dir.join(format!("checkpoint-{iteration:06}.ckpt"))
}

/// Per-tensor relative error between analytic and central-difference
/// gradients of the step loss, in double precision.
pub fn gradient_check(w: &Weights<f64>, image: &[f64], plan: &StepPlan, n_cls_p: usize, eps: f64) -> Vec<(String, f64)> {
    let mut analytic = w.zeros_like();
    step_loss(w, image, plan, n_cls_p, Some(&mut analytic));
    let mut probe = w.clone();
    let mut out = Vec::new();
    for i in 0..w.params().len() {
        let mut num = vec![0.0; w.params()[i].value.len()];
        for j in 0..num.len() {
            let orig = probe.params()[i].value.data[j];
            probe.params_mut()[i].value.data[j] = orig + eps;
            let up = step_loss(&probe, image, plan, n_cls_p, None).total();
            probe.params_mut()[i].value.data[j] = orig - eps;
            let down = step_loss(&probe, image, plan, n_cls_p, None).total();
            probe.params_mut()[i].value.data[j] = orig;
            num[j] = (up - down) / (2.0 * eps);
        }
        let a = &analytic.params()[i].value.data;
        let diff: f64 = a.iter().zip(&num).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt() + num.iter().map(|x| x * x).sum::<f64>().sqrt();
        let rel = if scale < 1e-12 { diff } else { diff / scale };
        out.push((w.params()[i].name.clone(), rel));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn label(x: f64, y: f64, theta: f64, class: OrientationClass) -> GraspLabel {
        GraspLabel { grasp: Grasp5D::new(x, y, theta, 20.0, 8.0).unwrap(), class, object: 0 }
    }

    #[test]
    fn lr_drops_once() {
        let tc = TrainConfig { iterations: 10, lr: 1e-3, lr_drop_at: 0.7, lr_drop: 0.1, ..Default::default() };
        assert_eq!(tc.lr_at(0), 1e-3);
        assert_eq!(tc.lr_at(6), 1e-3);
        assert_abs_diff_eq!(tc.lr_at(7), 1e-4, epsilon = 1e-15);
        assert_abs_diff_eq!(tc.lr_at(9), 1e-4, epsilon = 1e-15);
        let flat = TrainConfig { lr_drop_at: 1.0, ..tc };
        assert_eq!(flat.lr_at(9), 1e-3);
        assert!(TrainConfig { lr_drop_at: 1.5, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn assignment_rules() {
        let n = 19;
        let labels = vec![
            label(30.0, 30.0, std::f64::consts::FRAC_PI_2, OrientationClass::Orientation(theta_to_class(std::f64::consts::FRAC_PI_2, n))),
            label(90.0, 90.0, 0.0, OrientationClass::NotTarget),
        ];
        let rois = vec![
            AxisBox::new(5.0, 120.0, 6.0, 6.0),
            labels[1].grasp.hull(),
            labels[0].grasp.hull(),
            AxisBox::new(30.0 + 3.5, 30.0, 8.0, 20.0),
        ];
        let a = assign_rois(&rois, &labels, Thresholds::default());
        assert_eq!((a[0].rho_star, a[0].c_star), (ProposalLabel::Negative, Some(OrientationClass::Background)));
        assert_eq!((a[1].rho_star, a[1].c_star), (ProposalLabel::Positive, Some(OrientationClass::NotTarget)));
        assert_eq!((a[2].rho_star, a[2].c_star), (ProposalLabel::Positive, Some(OrientationClass::Orientation(9))));
        assert_eq!(a[2].r_star, Some(labels[0].grasp.hull()));
        assert_eq!((a[3].rho_star, a[3].c_star), (ProposalLabel::Ignore, None));
    }

    #[test]
    fn forced_anchor_match() {
        let labels = vec![label(30.0, 30.0, 0.3, OrientationClass::Orientation(1))];
        let anchors = vec![AxisBox::new(30.0, 30.0, 60.0, 60.0), AxisBox::new(100.0, 100.0, 10.0, 10.0)];
        let a = assign_anchors(&anchors, &labels, Thresholds::default());
        assert_eq!(a[0].rho_star, ProposalLabel::Positive);
        assert_eq!(a[1].rho_star, ProposalLabel::Negative);
    }

    #[test]
    fn proposal_loss_analytics() {
        let items: Vec<ProposalItem<f64>> = (0..128)
            .map(|i| ProposalItem { logit: 0.0, delta: [0.0; 4], positive: i % 2 == 0, target: [0.0; 4] })
            .collect();
        let ((cls, loc), _) = proposal_loss(&items, 128);
        assert_abs_diff_eq!(cls, 2f64.ln(), epsilon = 1e-12);
        assert_eq!(loc, 0.0);

        let perfect = [ProposalItem { logit: 50.0, delta: [0.1, 0.2, 0.3, 0.4], positive: true, target: [0.1, 0.2, 0.3, 0.4] },
            ProposalItem { logit: -50.0, delta: [9.0; 4], positive: false, target: [0.0; 4] }];
        let ((cls, loc), _) = proposal_loss(&perfect, 2);
        assert!(cls < 1e-20 && loc == 0.0);

        let one = [ProposalItem { logit: 0.0, delta: [0.5, 2.0, 0.0, 0.0], positive: true, target: [0.0; 4] }];
        let ((_, loc), _) = proposal_loss(&one, 1);
        assert_abs_diff_eq!(loc, 0.125 + 1.5, epsilon = 1e-15);

        let none: [ProposalItem<f64>; 1] = [ProposalItem { logit: 0.0, delta: [3.0; 4], positive: false, target: [0.0; 4] }];
        assert_eq!(proposal_loss(&none, 1).0 .1, 0.0);
    }

    #[test]
    fn grasp_loss_analytics() {
        let logits = vec![0.0f64; 21];
        let items = vec![GraspItem { logits: &logits, delta: [0.0; 4], class: 19, target: None }; 4];
        let ((cls, loc), _) = grasp_loss(&items);
        assert_abs_diff_eq!(cls, 21f64.ln(), epsilon = 1e-12);
        assert_eq!(loc, 0.0);

        let mut sharp = vec![-60.0f64; 21];
        sharp[4] = 60.0;
        let exact = [GraspItem { logits: &sharp, delta: [0.1, -0.2, 0.0, 0.3], class: 4, target: Some([0.1, -0.2, 0.0, 0.3]) }];
        let ((cls, loc), _) = grasp_loss(&exact);
        assert!(cls < 1e-40 && loc == 0.0);

        // Not-target regions still regress.
        let nt = [GraspItem { logits: &sharp, delta: [0.5, 0.0, 0.0, 0.0], class: 20, target: Some([0.0; 4]) }];
        let ((_, loc), g) = grasp_loss(&nt);
        assert_abs_diff_eq!(loc, 0.125);
        assert!(g[0].1[0] != 0.0);
    }

    #[test]
    fn fusion_sampling() {
        let pos = RoiAssignment { rho_star: ProposalLabel::Positive, r_star: None, c_star: Some(OrientationClass::NotTarget), matched: None, iou: 0.9 };
        let neg = RoiAssignment { rho_star: ProposalLabel::Negative, c_star: Some(OrientationClass::Background), ..pos };
        let mut a = vec![pos; 10];
        a.extend(vec![neg; 100]);
        let f = sample_fusion_rois(&a, 64, &mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(f.len(), 20);
        assert_eq!(f.iter().filter(|&&i| i < 10).count(), 10);
        assert_eq!(f, sample_fusion_rois(&a, 64, &mut ChaCha8Rng::seed_from_u64(1)));
        assert!(sample_fusion_rois(&a[10..], 64, &mut ChaCha8Rng::seed_from_u64(1)).is_empty());
        assert_eq!(sample_anchors(&a, 128, &mut ChaCha8Rng::seed_from_u64(2)).len(), 128);
    }

    #[test]
    fn word_dropout() {
        let toks: Vec<usize> = (1..=50).collect();
        assert_eq!(apply_word_dropout(&toks, 0.0, 0, &mut ChaCha8Rng::seed_from_u64(0)), toks);
        let big = vec![5usize; 100_000];
        let p = 1.0 - 1e-3;
        let out = apply_word_dropout(&big, p, 0, &mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(out.len(), big.len());
        let frac = out.iter().filter(|&&t| t == 0).count() as f64 / big.len() as f64;
        let sigma = (p * (1.0 - p) / big.len() as f64).sqrt();
        assert!((frac - p).abs() <= 3.0 * sigma, "{frac}");
        let a = apply_word_dropout(&toks, 0.3, 0, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, apply_word_dropout(&toks, 0.3, 0, &mut ChaCha8Rng::seed_from_u64(9)));
    }

    #[test]
    fn config_checks() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { word_dropout: 1.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { n_cls_p: 0, ..Default::default() }.validate().is_err());
        let c = TrainConfig::from_toml("iterations = 5\nlabel_mode = \"agnostic\"\n").unwrap();
        assert_eq!((c.iterations, c.label_mode), (5, LabelMode::Agnostic));
        assert!(TrainConfig::from_toml("lr_decay = 1").unwrap_err().to_string().contains("lr_decay"));
    }
}
