//! Precision of the task-agnostic detector against all scene grasps.

use cgnet::dataset::{generate_dataset, DatasetConfig, Split};
use cgnet::eval::{infer, score_detection};
use cgnet::geometry::Grasp5D;
use cgnet::model::load_checkpoint;

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let ck = load_checkpoint(std::path::Path::new(&args[1]))?;
    let scenes: usize = args.get(2).map(|s| s.parse()).transpose()?.unwrap_or(600);
    let (ds, _) = generate_dataset(&DatasetConfig { scenes, ..Default::default() })?;
    let (mut grasps_total, mut dup) = (0usize, 0usize);
    let mut miss = [0usize; 3];
    let (mut n, mut dets_total, mut hit_any, mut hit_target, mut expect, mut floor) = (0, 0, 0, 0, 0.0, 0.0);
    let mut score_hits = Vec::new();
    for &si in &ds.sample_indices(Split::Test) {
        let s = &ds.samples[si];
        if !s.has_target() {
            continue;
        }
        let scene = &ds.scenes[s.scene];
        let dets = infer(&scene.image, &s.command, &ck.weights)?;
        let all: Vec<Grasp5D> = s.labels.iter().map(|l| l.grasp).collect();
        let target = s.target_grasps();
        let t = dets.iter().filter(|d| score_detection(d, &target)).count();
        for d in &dets {
            score_hits.push((d.score, score_detection(d, &all)));
        }
        n += 1;
        grasps_total += all.len();
        let owners = scene.owner_map();
        for d in dets.iter().filter(|d| !score_detection(d, &all)) {
            let near = all.iter().any(|g| cgnet::geometry::rect_iou(&d.grasp, g).unwrap_or(0.0) > 0.25);
            let (px, py) = (d.grasp.x().round() as usize, d.grasp.y().round() as usize);
            let on_object = px < scene.image.width && py < scene.image.height && owners[py * scene.image.width + px].is_some();
            miss[if near { 0 } else if on_object { 1 } else { 2 }] += 1;
        }
        let mut seen = vec![false; all.len()];
        for d in &dets {
            for (i, g) in all.iter().enumerate() {
                if score_detection(d, std::slice::from_ref(g)) {
                    dup += seen[i] as usize;
                    seen[i] = true;
                    break;
                }
            }
        }
        dets_total += dets.len();
        hit_any += dets.iter().filter(|d| score_detection(d, &all)).count();
        hit_target += t;
        if !dets.is_empty() {
            expect += t as f64 / dets.len() as f64;
        }
        floor += target.len() as f64 / all.len() as f64;
    }
    println!("samples {n}, detections/sample {:.2}, grasps/sample {:.2}", dets_total as f64 / n as f64, grasps_total as f64 / n as f64);
    println!("detections matching an already matched grasp: {:.3}", dup as f64 / dets_total as f64);
    println!("precision vs any grasp {:.3}, vs target {:.3}", hit_any as f64 / dets_total as f64, hit_target as f64 / dets_total as f64);
    println!("expected random-pick R@1 {:.3}, chance floor {:.3}", expect / n as f64, floor / n as f64);
    let m = dets_total as f64;
    println!("unmatched: overlap but wrong angle {:.3}, centered on an object {:.3}, off objects {:.3}", miss[0] as f64 / m, miss[1] as f64 / m, miss[2] as f64 / m);
    score_hits.sort_by(|a, b| b.0.total_cmp(&a.0));
    for q in [0.25, 0.5, 0.75, 1.0] {
        let k = ((score_hits.len() as f64 * q) as usize).max(1);
        let p = score_hits[..k].iter().filter(|x| x.1).count() as f64 / k as f64;
        println!("top {:.0}% by score (score >= {:.3}): precision {p:.3}", q * 100.0, score_hits[k - 1].0);
    }
    Ok(())
}
