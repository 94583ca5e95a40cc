//! Break down top-1 failures of a trained model on a split.

use cgnet::dataset::{generate_dataset, DatasetConfig, Split};
use cgnet::eval::{infer, score_detection};
use cgnet::geometry::{rect_iou, Grasp5D};
use cgnet::model::load_checkpoint;

fn main() -> anyhow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let ck = load_checkpoint(std::path::Path::new(&args[1]))?;
    let split: Split = args.get(2).map(|s| s.parse()).transpose().map_err(anyhow::Error::msg)?.unwrap_or(Split::Test);
    let scenes: usize = args.get(3).map(|s| s.parse()).transpose()?.unwrap_or(600);
    let (ds, _) = generate_dataset(&DatasetConfig { scenes, ..Default::default() })?;
    let mut counts = [0usize; 5];
    for &si in &ds.sample_indices(split) {
        let s = &ds.samples[si];
        if !s.has_target() {
            continue;
        }
        let scene = &ds.scenes[s.scene];
        let dets = infer(&scene.image, &s.command, &ck.weights)?;
        let target = s.target_grasps();
        let others: Vec<Grasp5D> = s.labels.iter().filter(|l| !l.class.is_orientation()).map(|l| l.grasp).collect();
        let k = match dets.first() {
            None => 0,
            Some(d) if score_detection(d, &target) => 1,
            Some(d) if score_detection(d, &others) => 2,
            Some(d) if target.iter().any(|g| rect_iou(&d.grasp, g).unwrap_or(0.0) > 0.25) => 3,
            Some(_) => 4,
        };
        counts[k] += 1;
    }
    let n: usize = counts.iter().sum();
    for (name, c) in ["empty", "correct", "other object", "target, bad angle", "elsewhere"].iter().zip(counts) {
        println!("{name:18} {c:5} {:5.1}%", 100.0 * c as f64 / n as f64);
    }
    Ok(())
}
