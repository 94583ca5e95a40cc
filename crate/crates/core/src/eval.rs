//! Test-time grasp retrieval, detection metrics and the baseline pipelines.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Dataset, Split};
use crate::geometry::{angle_error, rect_iou, rotated_nms, AxisBox, Grasp5D, OrientationClass};
use crate::manifest::{derive_seed, RunManifest};
use crate::model::{
    decode_box, encode_command, extract_proposals, predict_grasps, GraspPrediction, ModelError, ProposalOutput,
    Weights,
};
use crate::nn::Real;
use crate::scene::Image;

pub const KS: [usize; 4] = [1, 3, 5, 10];
pub const IOU_THRESHOLD: f64 = 0.25;
pub const ANGLE_THRESHOLD: f64 = std::f64::consts::PI / 6.0;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("k must be at least 1")]
    ZeroK,
    #[error("the {0} split has no samples")]
    EmptySplit(&'static str),
    #[error("method `{method}` needs the {artifact} checkpoint")]
    MissingModel { method: Method, artifact: &'static str },
    #[error("unknown method `{0}`; valid methods: cgnet, agn_rnd, ret_gr, cg_ret")]
    UnknownMethod(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub grasp: Grasp5D,
    pub score: f64,
    pub class: OrientationClass,
}

/// Keep regions whose best orientation beats both garbage classes, decode
/// them at that orientation and suppress overlaps.
pub fn detections_from_predictions<T: Real>(
    rois: &[AxisBox],
    preds: &[GraspPrediction<T>],
    n_orient: usize,
    nms_threshold: f64,
) -> Vec<Detection> {
    let mut cands: Vec<(Grasp5D, f64)> = Vec::new();
    let mut classes: Vec<usize> = Vec::new();
    for (roi, p) in rois.iter().zip(preds) {
        let g: Vec<f64> = p.gamma.iter().map(|v| v.f64()).collect();
        let (best, &score) = g[..n_orient]
            .iter()
            .enumerate()
            .fold((0, &f64::NEG_INFINITY), |acc, cur| if cur.1 > acc.1 { cur } else { acc });
        if score <= g[n_orient].max(g[n_orient + 1]) {
            continue;
        }
        if let Ok(grasp) = decode_box(roi, p.delta(best), OrientationClass::Orientation(best), n_orient) {
            cands.push((grasp, score));
            classes.push(best);
        }
    }
    rotated_nms(&cands, nms_threshold)
        .into_iter()
        .map(|(grasp, score)| {
            let i = cands.iter().position(|c| c.0 == grasp && c.1 == score).expect("kept candidate");
            Detection { grasp, score, class: OrientationClass::Orientation(classes[i]) }
        })
        .collect()
}

/// Detections for one region set and command feature.
fn detect<T: Real>(props: &[ProposalOutput<T>], tokens: &[usize], w: &Weights<T>) -> Result<Vec<Detection>, ModelError> {
    if props.is_empty() {
        return Ok(Vec::new());
    }
    let cmd = encode_command(tokens, w)?;
    let preds = predict_grasps(props, &cmd, w)?;
    let rois: Vec<AxisBox> = props.iter().map(|p| p.roi).collect();
    let cfg = w.config();
    Ok(detections_from_predictions(&rois, &preds, cfg.n_orient, cfg.detection_nms))
}

/// Full test-time pipeline: may return nothing, meaning no graspable target.
pub fn infer<T: Real>(image: &Image, tokens: &[usize], w: &Weights<T>) -> Result<Vec<Detection>, ModelError> {
    let props = extract_proposals(image, w)?;
    detect(&props, tokens, w)
}

pub fn score_detection(det: &Detection, gt: &[Grasp5D]) -> bool {
    gt.iter().any(|g| {
        angle_error(det.grasp.theta(), g.theta()) < ANGLE_THRESHOLD
            && rect_iou(&det.grasp, g).map(|v| v > IOU_THRESHOLD).unwrap_or(false)
    })
}

/// 1 if any of the first `k` flags is set.
pub fn sample_recall(correct: &[bool], k: usize) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    Ok(if correct.iter().take(k).any(|&c| c) { 1.0 } else { 0.0 })
}

/// Fraction correct among the first `min(k, len)` flags; 0 when empty.
pub fn sample_precision(correct: &[bool], k: usize) -> Result<f64, EvalError> {
    if k == 0 {
        return Err(EvalError::ZeroK);
    }
    let n = correct.len().min(k);
    if n == 0 {
        return Ok(0.0);
    }
    Ok(correct[..n].iter().filter(|&&c| c).count() as f64 / n as f64)
}

fn mean_over<F: Fn(&[bool]) -> Result<f64, EvalError>>(flags: &[Vec<bool>], f: F) -> Result<f64, EvalError> {
    f(&[])?;
    if flags.is_empty() {
        return Ok(0.0);
    }
    let mut s = 0.0;
    for c in flags {
        s += f(c)?;
    }
    Ok(s / flags.len() as f64)
}

/// Averages over samples of `(detections sorted by score, target grasps)`.
pub fn recall_at_k(results: &[(Vec<Detection>, Vec<Grasp5D>)], k: usize) -> Result<f64, EvalError> {
    mean_over(&correctness(results), |c| sample_recall(c, k))
}

pub fn precision_at_k(results: &[(Vec<Detection>, Vec<Grasp5D>)], k: usize) -> Result<f64, EvalError> {
    mean_over(&correctness(results), |c| sample_precision(c, k))
}

fn correctness(results: &[(Vec<Detection>, Vec<Grasp5D>)]) -> Vec<Vec<bool>> {
    results.iter().map(|(d, g)| d.iter().map(|x| score_detection(x, g)).collect()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Cgnet,
    AgnRnd,
    RetGr,
    CgRet,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Cgnet, Method::AgnRnd, Method::RetGr, Method::CgRet];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Cgnet => "cgnet",
            Method::AgnRnd => "agn_rnd",
            Method::RetGr => "ret_gr",
            Method::CgRet => "cg_ret",
        }
    }

    pub fn parse_list(s: &str) -> Result<Vec<Method>, EvalError> {
        let mut out: Vec<Method> = Vec::new();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let m = part.parse()?;
            if !out.contains(&m) {
                out.push(m);
            }
        }
        Ok(out)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = EvalError;
    fn from_str(s: &str) -> Result<Self, EvalError> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| EvalError::UnknownMethod(s.to_string()))
    }
}

/// Trained networks available to the evaluator.
#[derive(Default)]
pub struct Models {
    pub cgnet: Option<Weights<f32>>,
    /// Command-ablated detector trained on every grasp.
    pub agnostic: Option<Weights<f32>>,
    /// Same architecture trained to box the commanded object.
    pub retrieval: Option<Weights<f32>>,
}

impl Models {
    fn need(&self, m: Method) -> Result<(), EvalError> {
        let missing = |artifact| Err(EvalError::MissingModel { method: m, artifact });
        let needs: &[(&Option<Weights<f32>>, &'static str)] = match m {
            Method::Cgnet => &[(&self.cgnet, "cgnet")],
            Method::AgnRnd => &[(&self.agnostic, "agnostic")],
            Method::RetGr => &[(&self.agnostic, "agnostic"), (&self.retrieval, "retrieval")],
            Method::CgRet => &[(&self.cgnet, "cgnet"), (&self.retrieval, "retrieval")],
        };
        for (w, name) in needs {
            if w.is_none() {
                return missing(*name);
            }
        }
        Ok(())
    }
}

/// Retrieval box: the top detection's axis-aligned extent, angle ignored.
pub fn retrieval_box(dets: &[Detection]) -> Option<AxisBox> {
    dets.first().map(|d| AxisBox::new(d.grasp.x(), d.grasp.y(), d.grasp.w(), d.grasp.h()))
}

pub fn agn_rnd(dets: &[Detection], seed: u64) -> Vec<Detection> {
    let mut out = dets.to_vec();
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    out
}

/// Grasps centered inside the box, nearest to its center first.
pub fn ret_gr(dets: &[Detection], region: Option<AxisBox>) -> Vec<Detection> {
    let Some(b) = region else {
        return Vec::new();
    };
    let mut out: Vec<Detection> = dets.iter().copied().filter(|d| b.contains(d.grasp.x(), d.grasp.y())).collect();
    let dist = |d: &Detection| (d.grasp.x() - b.x).hypot(d.grasp.y() - b.y);
    out.sort_by(|a, c| dist(a).total_cmp(&dist(c)));
    out
}

/// Detections centered inside the box, in their original order.
pub fn cg_ret(dets: &[Detection], region: Option<AxisBox>) -> Vec<Detection> {
    let Some(b) = region else {
        return Vec::new();
    };
    dets.iter().copied().filter(|d| b.contains(d.grasp.x(), d.grasp.y())).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodRow {
    pub method: Method,
    /// R@k for each k in [`KS`].
    pub recall: Vec<f64>,
    pub precision: Vec<f64>,
    /// Fraction of no-target samples answered with an empty set.
    pub nt_rejection: f64,
    pub have_target: usize,
    pub no_target: usize,
    /// Samples per second; excluded from equality checks.
    pub throughput: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub ks: Vec<usize>,
    pub rows: Vec<MethodRow>,
    /// Expected R@1 of picking a uniformly random scene grasp.
    pub chance_floor: f64,
    pub manifest: RunManifest,
}

fn k_label(prefix: &str, k: usize) -> String {
    format!("{prefix}@{k}")
}

impl EvalReport {
    pub fn row(&self, m: Method) -> Option<&MethodRow> {
        self.rows.iter().find(|r| r.method == m)
    }

    /// Same report with throughput zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.rows.iter_mut().for_each(|row| row.throughput = 0.0);
        r
    }

    pub fn to_table(&self) -> String {
        let mut head = vec!["method".to_string()];
        head.extend(self.ks.iter().map(|&k| k_label("R", k)));
        head.extend(self.ks.iter().map(|&k| k_label("P", k)));
        head.extend(["NT".to_string(), "FPS".to_string()]);
        let mut out = head.join("\t");
        out.push('\n');
        for r in &self.rows {
            let mut cells = vec![r.method.to_string()];
            cells.extend(r.recall.iter().chain(&r.precision).map(|v| format!("{:.1}", 100.0 * v)));
            cells.push(format!("{:.1}", 100.0 * r.nt_rejection));
            cells.push(format!("{:.1}", r.throughput));
            out.push_str(&cells.join("\t"));
            out.push('\n');
        }
        out
    }

    pub fn to_kv(&self) -> String {
        let mut kv: BTreeMap<String, String> = BTreeMap::new();
        kv.insert("split".into(), format!("{:?}", self.split).to_lowercase());
        kv.insert("chance_floor".into(), format!("{}", self.chance_floor));
        for r in &self.rows {
            let m = r.method.name();
            for (i, &k) in self.ks.iter().enumerate() {
                kv.insert(format!("{m}.{}", k_label("R", k)), format!("{}", r.recall[i]));
                kv.insert(format!("{m}.{}", k_label("P", k)), format!("{}", r.precision[i]));
            }
            kv.insert(format!("{m}.nt_rejection"), format!("{}", r.nt_rejection));
            kv.insert(format!("{m}.have_target"), r.have_target.to_string());
            kv.insert(format!("{m}.no_target"), r.no_target.to_string());
            kv.insert(format!("{m}.throughput"), format!("{}", r.throughput));
        }
        kv.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    pub fn write(&self, dir: &Path) -> Result<(), EvalError> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("report.tsv"), self.to_table())?;
        fs::write(dir.join("report.kv"), self.to_kv())?;
        fs::write(dir.join("report.json"), serde_json::to_string_pretty(self).expect("report serializes"))?;
        Ok(())
    }
}

/// Per-sample outputs of every requested method, for rendering and tests.
#[derive(Debug, Clone, Default)]
pub struct MethodOutputs {
    pub detections: BTreeMap<Method, Vec<Vec<Detection>>>,
    pub retrieval: Vec<Option<AxisBox>>,
    pub samples: Vec<usize>,
}

/// Mean share of target grasps among all scene grasps, over samples with a target.
pub fn chance_floor(ds: &Dataset, samples: &[usize]) -> f64 {
    let shares: Vec<f64> = samples
        .iter()
        .map(|&i| &ds.samples[i])
        .filter(|s| s.has_target())
        .map(|s| s.target_grasps().len() as f64 / s.labels.len().max(1) as f64)
        .collect();
    if shares.is_empty() {
        0.0
    } else {
        shares.iter().sum::<f64>() / shares.len() as f64
    }
}

pub fn run_methods(ds: &Dataset, models: &Models, methods: &[Method], split: Split, seed: u64) -> Result<(MethodOutputs, BTreeMap<Method, f64>), EvalError> {
    for &m in methods {
        models.need(m)?;
    }
    let samples = ds.sample_indices(split);
    if samples.is_empty() {
        return Err(EvalError::EmptySplit(match split {
            Split::Train => "train",
            Split::Test => "test",
        }));
    }
    let wants = |ms: &[Method]| methods.iter().any(|m| ms.contains(m));
    let mut seconds: BTreeMap<&str, f64> = BTreeMap::new();

    // Scene-level caches: region features depend only on the image.
    let mut by_scene: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (pos, &si) in samples.iter().enumerate() {
        by_scene.entry(ds.samples[si].scene).or_default().push(pos);
    }
    let n = samples.len();
    let mut cg: Vec<Vec<Detection>> = vec![Vec::new(); n];
    let mut agn: Vec<Vec<Detection>> = vec![Vec::new(); n];
    let mut ret: Vec<Option<AxisBox>> = vec![None; n];
    for (&scene, positions) in &by_scene {
        let img = &ds.scenes[scene].image;
        if wants(&[Method::Cgnet, Method::CgRet]) {
            let w = models.cgnet.as_ref().expect("checked");
            let t = Instant::now();
            let props = extract_proposals(img, w)?;
            for &p in positions {
                cg[p] = detect(&props, &ds.samples[samples[p]].command, w)?;
            }
            *seconds.entry("cgnet").or_default() += t.elapsed().as_secs_f64();
        }
        if wants(&[Method::AgnRnd, Method::RetGr]) {
            let w = models.agnostic.as_ref().expect("checked");
            let t = Instant::now();
            let props = extract_proposals(img, w)?;
            let dets = detect(&props, &[0], w)?;
            for &p in positions {
                agn[p] = dets.clone();
            }
            *seconds.entry("agnostic").or_default() += t.elapsed().as_secs_f64();
        }
        if wants(&[Method::RetGr, Method::CgRet]) {
            let w = models.retrieval.as_ref().expect("checked");
            let t = Instant::now();
            let props = extract_proposals(img, w)?;
            for &p in positions {
                ret[p] = retrieval_box(&detect(&props, &ds.samples[samples[p]].command, w)?);
            }
            *seconds.entry("retrieval").or_default() += t.elapsed().as_secs_f64();
        }
    }

    let mut out = MethodOutputs { samples: samples.clone(), retrieval: ret.clone(), ..Default::default() };
    let mut throughput = BTreeMap::new();
    for &m in methods {
        let dets: Vec<Vec<Detection>> = (0..n)
            .map(|p| match m {
                Method::Cgnet => cg[p].clone(),
                Method::AgnRnd => agn_rnd(&agn[p], derive_seed(seed, samples[p] as u64)),
                Method::RetGr => ret_gr(&agn[p], ret[p]),
                Method::CgRet => cg_ret(&cg[p], ret[p]),
            })
            .collect();
        let parts: &[&str] = match m {
            Method::Cgnet => &["cgnet"],
            Method::AgnRnd => &["agnostic"],
            Method::RetGr => &["agnostic", "retrieval"],
            Method::CgRet => &["cgnet", "retrieval"],
        };
        let secs: f64 = parts.iter().map(|p| seconds.get(p).copied().unwrap_or(0.0)).sum();
        throughput.insert(m, if secs > 0.0 { n as f64 / secs } else { 0.0 });
        out.detections.insert(m, dets);
    }
    Ok((out, throughput))
}

pub fn evaluate(ds: &Dataset, models: &Models, methods: &[Method], split: Split, seed: u64) -> Result<EvalReport, EvalError> {
    let (outputs, throughput) = run_methods(ds, models, methods, split, seed)?;
    let samples = &outputs.samples;
    let mut rows = Vec::new();
    for &m in methods {
        let dets = &outputs.detections[&m];
        let mut have: Vec<(Vec<Detection>, Vec<Grasp5D>)> = Vec::new();
        let mut rejected = 0usize;
        let mut no_target = 0usize;
        for (p, &si) in samples.iter().enumerate() {
            let s = &ds.samples[si];
            if s.has_target() {
                have.push((dets[p].clone(), s.target_grasps()));
            } else {
                no_target += 1;
                rejected += dets[p].is_empty() as usize;
            }
        }
        rows.push(MethodRow {
            method: m,
            recall: KS.iter().map(|&k| recall_at_k(&have, k)).collect::<Result<_, _>>()?,
            precision: KS.iter().map(|&k| precision_at_k(&have, k)).collect::<Result<_, _>>()?,
            nt_rejection: if no_target == 0 { 0.0 } else { rejected as f64 / no_target as f64 },
            have_target: have.len(),
            no_target,
            throughput: throughput[&m],
        });
    }
    Ok(EvalReport {
        split,
        ks: KS.to_vec(),
        rows,
        chance_floor: chance_floor(ds, samples),
        manifest: RunManifest::new().with_seed("eval", seed).with_parent(ds.manifest.clone()),
    })
}
