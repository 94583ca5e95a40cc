//! Helpers shared by the integration test targets.

#![allow(dead_code)]

use cgnet::geometry::Grasp5D;

/// Pixel-center rasterization of the IoU of two rectangles on an `n × n`
/// grid spanning both. Works row by row: on each scanline every rectangle
/// covers one x interval, found from the point-in-rectangle test in the
/// rectangle's own frame.
pub fn raster_iou(a: &Grasp5D, b: &Grasp5D, n: usize) -> f64 {
    let reach = |g: &Grasp5D| (g.w().hypot(g.h())) / 2.0;
    let x0 = (a.x() - reach(a)).min(b.x() - reach(b));
    let y0 = (a.y() - reach(a)).min(b.y() - reach(b));
    let x1 = (a.x() + reach(a)).max(b.x() + reach(b));
    let y1 = (a.y() + reach(a)).max(b.y() + reach(b));
    let s = (x1 - x0).max(y1 - y0) / n as f64;

    let count = |lo: f64, hi: f64| -> i64 {
        if hi < lo {
            return 0;
        }
        let first = ((lo - x0) / s - 0.5).ceil().max(0.0) as i64;
        let last = (((hi - x0) / s - 0.5).floor() as i64).min(n as i64 - 1);
        (last - first + 1).max(0)
    };
    let (mut ca, mut cb, mut cab) = (0i64, 0i64, 0i64);
    for row in 0..n {
        let y = y0 + (row as f64 + 0.5) * s;
        let ia = span(a, y);
        let ib = span(b, y);
        ca += count(ia.0, ia.1);
        cb += count(ib.0, ib.1);
        cab += count(ia.0.max(ib.0), ia.1.min(ib.1));
    }
    let union = ca + cb - cab;
    if union == 0 {
        0.0
    } else {
        cab as f64 / union as f64
    }
}

/// x interval where `|u·(p-c)| <= w/2` and `|v·(p-c)| <= h/2` on the line at height `y`.
fn span(g: &Grasp5D, y: f64) -> (f64, f64) {
    let (s, c) = g.theta().sin_cos();
    let dy = y - g.y();
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    // Axis (ax, ay) with half extent e: |ax·dx + ay·dy| <= e.
    for (ax, ay, e) in [(c, s, g.w() / 2.0), (-s, c, g.h() / 2.0)] {
        let off = ay * dy;
        if ax.abs() < 1e-15 {
            if off.abs() > e {
                return (1.0, 0.0);
            }
            continue;
        }
        let (p, q) = ((-e - off) / ax, (e - off) / ax);
        lo = lo.max(p.min(q));
        hi = hi.min(p.max(q));
    }
    (lo + g.x(), hi + g.x())
}

use cgnet::dataset::{generate_dataset, Dataset, DatasetConfig};
use cgnet::geometry::AxisBox;
use cgnet::model::{encode_box, AnchorSpec, ModelConfig};
use cgnet::train::{RoiTarget, StepPlan};

/// Tiny network for finite-difference checks: a 128×128 input gives an 8×8 map.
pub fn micro_config() -> ModelConfig {
    ModelConfig {
        backbone: vec![2, 3, 3, 3],
        rpn_channels: 3,
        head_channels: 2,
        d_i: 5,
        d_c: 4,
        d_e: 3,
        lstm_widths: (3, 4),
        n_orient: 3,
        anchors: AnchorSpec { scales: vec![16.0], ratios: vec![0.5, 2.0] },
        vocab_size: 6,
        ..ModelConfig::toy()
    }
}

/// Four ROIs covering every target kind and a three-word command.
pub fn micro_plan() -> StepPlan {
    let rois = [
        AxisBox::new(30.0, 40.0, 20.0, 12.0),
        AxisBox::new(70.0, 64.0, 16.0, 24.0),
        AxisBox::new(100.0, 20.0, 30.0, 30.0),
        AxisBox::new(64.0, 100.0, 12.0, 12.0),
    ];
    let g = Grasp5D::new(32.0, 41.0, 0.4, 22.0, 10.0).unwrap();
    StepPlan {
        anchors: vec![(3, true, [0.1, -0.2, 0.3, 0.05]), (40, false, [0.0; 4]), (77, true, [-0.3, 0.2, -0.1, 0.4]), (100, false, [0.0; 4])],
        rois: vec![
            RoiTarget { roi: rois[0], class: 1, regress: Some((1, encode_box(&rois[0], g.x(), g.y(), g.w(), g.h()))) },
            RoiTarget { roi: rois[1], class: 4, regress: Some((0, [0.2, 0.1, -0.3, 0.2])) },
            RoiTarget { roi: rois[2], class: 3, regress: None },
            RoiTarget { roi: rois[3], class: 2, regress: Some((2, [-0.1, 0.0, 0.1, -0.2])) },
        ],
        tokens: vec![1, 4, 2],
    }
}

/// A dataset whose training split is one have-target sample.
pub fn single_sample_dataset(seed: u64) -> Dataset {
    let (mut ds, _) = generate_dataset(&DatasetConfig { scenes: 2, seed, ..Default::default() }).unwrap();
    let keep = ds.samples.iter().position(|s| s.has_target() && s.scene == 0).unwrap();
    ds.samples = vec![ds.samples[keep].clone()];
    ds.train_scenes = vec![0];
    ds.test_scenes = vec![1];
    ds
}
