//! Procedural multi-object tabletop scenes with grasp annotations.
//!
//! Objects are flat textured primitives (bars, disks, rings, ellipses and
//! compositions of bars). Grasps are placed on each shape's skeleton and close
//! across its thin direction. Occlusion follows a painter's algorithm by
//! `depth_order`; grasps whose center ends up covered are dropped.

use std::f64::consts::PI;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{AxisBox, Grasp5D};

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("invalid scene config: {0}")]
    InvalidConfig(String),
    #[error("could not place objects after {attempts} attempts: {constraint}")]
    Placement { attempts: usize, constraint: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ShapeKind {
    Disk,
    Bar,
    Ellipse,
    Ring,
    Striped,
    LShape,
    Cross,
    Handle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Texture {
    Solid,
    Stripes,
    Checker,
}

/// One entry of the category registry shared with command generation.
#[derive(Debug, Clone, Copy)]
pub struct Category {
    pub name: &'static str,
    /// Surface words substituted into command templates.
    pub words: &'static str,
    pub shape: ShapeKind,
    pub color: [u8; 3],
    pub accent: [u8; 3],
    pub texture: Texture,
}

const REGISTRY: [Category; 8] = [
    Category { name: "apple", words: "apple", shape: ShapeKind::Disk, color: [200, 40, 40], accent: [150, 25, 25], texture: Texture::Solid },
    Category { name: "banana", words: "banana", shape: ShapeKind::Bar, color: [235, 215, 60], accent: [200, 180, 40], texture: Texture::Solid },
    Category { name: "wrist_developer", words: "wrist developer", shape: ShapeKind::Ellipse, color: [140, 60, 190], accent: [100, 40, 140], texture: Texture::Checker },
    Category { name: "tape", words: "tape", shape: ShapeKind::Ring, color: [50, 90, 215], accent: [35, 65, 170], texture: Texture::Solid },
    Category { name: "toothpaste", words: "toothpaste", shape: ShapeKind::Striped, color: [70, 200, 200], accent: [235, 245, 245], texture: Texture::Stripes },
    Category { name: "wrench", words: "wrench", shape: ShapeKind::LShape, color: [165, 165, 170], accent: [120, 120, 125], texture: Texture::Solid },
    Category { name: "pliers", words: "pliers", shape: ShapeKind::Cross, color: [245, 140, 30], accent: [190, 100, 20], texture: Texture::Checker },
    Category { name: "screwdriver", words: "screwdriver", shape: ShapeKind::Handle, color: [50, 170, 70], accent: [205, 205, 215], texture: Texture::Solid },
];

pub fn registry() -> &'static [Category] {
    &REGISTRY
}

pub const BACKGROUND: [u8; 3] = [80, 66, 52];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    /// Number of registry categories in use (the first `categories` entries).
    pub categories: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Minimum visible fraction of every object after occlusion.
    pub min_visibility: f64,
    pub min_grasps: usize,
    pub max_grasps: usize,
    /// Extent of the gripper plates, i.e. the grasp `h`.
    pub plate_extent: f64,
    /// Added to the object thickness to get the grasp opening `w`.
    pub opening_margin: f64,
    pub max_attempts: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            categories: 8,
            min_objects: 2,
            max_objects: 5,
            min_visibility: 0.5,
            min_grasps: 2,
            max_grasps: 6,
            plate_extent: 8.0,
            opening_margin: 6.0,
            max_attempts: 500,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SceneError> {
        let bad = |m: &str| Err(SceneError::InvalidConfig(m.to_string()));
        if self.width < 64 || self.height < 64 {
            return bad("canvas must be at least 64×64");
        }
        if self.categories == 0 || self.categories > REGISTRY.len() {
            return bad(&format!("categories must be in 1..={}", REGISTRY.len()));
        }
        if self.min_objects == 0 || self.min_objects > self.max_objects {
            return bad("need 1 <= min_objects <= max_objects");
        }
        if self.max_objects > self.categories {
            return bad("max_objects cannot exceed categories (objects in a scene have distinct categories)");
        }
        if !(0.0..=1.0).contains(&self.min_visibility) {
            return bad("min_visibility must be in [0, 1]");
        }
        if self.min_grasps == 0 || self.min_grasps > self.max_grasps {
            return bad("need 1 <= min_grasps <= max_grasps");
        }
        if !(self.plate_extent > 0.0 && self.opening_margin >= 0.0) {
            return bad("plate_extent must be positive and opening_margin non-negative");
        }
        if self.max_attempts == 0 {
            return bad("max_attempts must be positive");
        }
        Ok(())
    }
}

/// Filled primitive in image coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Part {
    Bar { cx: f64, cy: f64, len: f64, thick: f64, angle: f64 },
    Disk { cx: f64, cy: f64, r: f64 },
    Ring { cx: f64, cy: f64, r_out: f64, r_in: f64 },
    Ellipse { cx: f64, cy: f64, a: f64, b: f64, angle: f64 },
}

impl Part {
    pub fn contains(&self, px: f64, py: f64) -> bool {
        match *self {
            Part::Bar { cx, cy, len, thick, angle } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (px - cx, py - cy);
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                u.abs() <= len / 2.0 && v.abs() <= thick / 2.0
            }
            Part::Disk { cx, cy, r } => (px - cx).powi(2) + (py - cy).powi(2) <= r * r,
            Part::Ring { cx, cy, r_out, r_in } => {
                let d2 = (px - cx).powi(2) + (py - cy).powi(2);
                d2 <= r_out * r_out && d2 >= r_in * r_in
            }
            Part::Ellipse { cx, cy, a, b, angle } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (px - cx, py - cy);
                let u = dx * c + dy * s;
                let v = -dx * s + dy * c;
                (u / a).powi(2) + (v / b).powi(2) <= 1.0
            }
        }
    }

    fn bounds(&self) -> (f64, f64, f64, f64) {
        match *self {
            Part::Bar { cx, cy, len, thick, angle } => {
                let g = Grasp5D::new(cx, cy, angle, len, thick).expect("positive bar size");
                let h = g.hull();
                (h.x1(), h.y1(), h.x2(), h.y2())
            }
            Part::Disk { cx, cy, r } | Part::Ring { cx, cy, r_out: r, .. } => (cx - r, cy - r, cx + r, cy + r),
            Part::Ellipse { cx, cy, a, b, angle } => {
                let (s, c) = angle.sin_cos();
                let hx = ((a * c).powi(2) + (b * s).powi(2)).sqrt();
                let hy = ((a * s).powi(2) + (b * c).powi(2)).sqrt();
                (cx - hx, cy - hy, cx + hx, cy + hy)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    /// Index into the category registry.
    pub category: usize,
    pub bbox: AxisBox,
    pub grasps: Vec<Grasp5D>,
    /// Higher values are painted later, i.e. on top.
    pub depth_order: usize,
    pub parts: Vec<Part>,
}

impl SceneObject {
    pub fn contains(&self, px: f64, py: f64) -> bool {
        self.parts.iter().any(|p| p.contains(px, py))
    }
}

/// Packed RGB image, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    #[serde(skip)]
    pub pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            pixels: vec![0; width * height * 3],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub image: Image,
    pub objects: Vec<SceneObject>,
    pub rng_seed: u64,
}

impl Scene {
    /// Index of the object visible at each pixel, top-most wins.
    pub fn owner_map(&self) -> Vec<Option<usize>> {
        owner_map(&self.objects, self.image.width, self.image.height)
    }

    pub fn all_grasps(&self) -> impl Iterator<Item = (usize, &Grasp5D)> {
        self.objects
            .iter()
            .enumerate()
            .flat_map(|(i, o)| o.grasps.iter().map(move |g| (i, g)))
    }
}

fn owner_map(objects: &[SceneObject], width: usize, height: usize) -> Vec<Option<usize>> {
    let mut order: Vec<usize> = (0..objects.len()).collect();
    order.sort_by_key(|&i| objects[i].depth_order);
    let mut owner = vec![None; width * height];
    for &i in &order {
        let b = &objects[i].bbox;
        let (x0, x1) = pixel_span(b.x1(), b.x2(), width);
        let (y0, y1) = pixel_span(b.y1(), b.y2(), height);
        for y in y0..y1 {
            for x in x0..x1 {
                if objects[i].contains(x as f64 + 0.5, y as f64 + 0.5) {
                    owner[y * width + x] = Some(i);
                }
            }
        }
    }
    owner
}

fn pixel_span(lo: f64, hi: f64, limit: usize) -> (usize, usize) {
    let a = lo.floor().max(0.0) as usize;
    let b = (hi.ceil().max(0.0) as usize).min(limit);
    (a.min(limit), b)
}

/// Count of mask pixels of object `i` ignoring occlusion.
fn mask_area(obj: &SceneObject, width: usize, height: usize) -> usize {
    let b = &obj.bbox;
    let (x0, x1) = pixel_span(b.x1(), b.x2(), width);
    let (y0, y1) = pixel_span(b.y1(), b.y2(), height);
    let mut n = 0;
    for y in y0..y1 {
        for x in x0..x1 {
            if obj.contains(x as f64 + 0.5, y as f64 + 0.5) {
                n += 1;
            }
        }
    }
    n
}

/// Visible pixel fraction of every object.
pub fn visibility(scene: &Scene) -> Vec<f64> {
    let owner = scene.owner_map();
    scene
        .objects
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let total = mask_area(o, scene.image.width, scene.image.height);
            let vis = owner.iter().filter(|&&v| v == Some(i)).count();
            if total == 0 {
                0.0
            } else {
                vis as f64 / total as f64
            }
        })
        .collect()
}

/// Candidate grasp on a part's skeleton: `(x, y, theta, thickness)`.
fn bar_candidates(cx: f64, cy: f64, len: f64, thick: f64, angle: f64, plate: f64, n: usize) -> Vec<(f64, f64, f64, f64)> {
    let reach = (len / 2.0 - plate / 2.0 - 1.0).max(0.0);
    let (s, c) = angle.sin_cos();
    (0..n)
        .map(|k| {
            let t = if n == 1 { 0.0 } else { -reach + 2.0 * reach * k as f64 / (n - 1) as f64 };
            (cx + t * c, cy + t * s, angle + PI / 2.0, thick)
        })
        .collect()
}

fn shape_parts(kind: ShapeKind, cx: f64, cy: f64, angle: f64, rng: &mut ChaCha8Rng) -> Vec<Part> {
    let (s, c) = angle.sin_cos();
    match kind {
        ShapeKind::Disk => vec![Part::Disk { cx, cy, r: rng.random_range(10.0..13.0) }],
        ShapeKind::Bar => vec![Part::Bar { cx, cy, len: rng.random_range(40.0..52.0), thick: rng.random_range(8.0..10.0), angle }],
        ShapeKind::Striped => vec![Part::Bar { cx, cy, len: rng.random_range(32.0..40.0), thick: rng.random_range(10.0..12.0), angle }],
        ShapeKind::Ellipse => vec![Part::Ellipse { cx, cy, a: rng.random_range(16.0..20.0), b: rng.random_range(8.0..10.0), angle }],
        ShapeKind::Ring => {
            let r_out = rng.random_range(12.0..15.0);
            vec![Part::Ring { cx, cy, r_out, r_in: r_out - rng.random_range(5.0..6.5) }]
        }
        ShapeKind::LShape => {
            let l1 = rng.random_range(30.0..38.0);
            let l2 = rng.random_range(18.0..24.0);
            let t = rng.random_range(7.0..8.5);
            // Long arm along `angle`, short arm perpendicular at its far end.
            let (ex, ey) = (cx + c * (l1 / 2.0 - t / 2.0), cy + s * (l1 / 2.0 - t / 2.0));
            let (px, py) = (-s, c);
            vec![
                Part::Bar { cx, cy, len: l1, thick: t, angle },
                Part::Bar { cx: ex + px * (l2 / 2.0 - t / 2.0), cy: ey + py * (l2 / 2.0 - t / 2.0), len: l2, thick: t, angle: angle + PI / 2.0 },
            ]
        }
        ShapeKind::Cross => {
            let l = rng.random_range(30.0..38.0);
            let t = rng.random_range(6.0..7.5);
            let spread = rng.random_range(0.6..0.9);
            vec![
                Part::Bar { cx, cy, len: l, thick: t, angle },
                Part::Bar { cx, cy, len: l, thick: t, angle: angle + spread },
            ]
        }
        ShapeKind::Handle => {
            let lh = rng.random_range(16.0..20.0);
            let th = rng.random_range(10.0..12.0);
            let ls = rng.random_range(20.0..26.0);
            // Handle and shaft are collinear and touch end to end.
            let (th_c, sh_c) = (-ls / 2.0, lh / 2.0);
            vec![
                Part::Bar { cx: cx + c * th_c, cy: cy + s * th_c, len: lh, thick: th, angle },
                Part::Bar { cx: cx + c * sh_c, cy: cy + s * sh_c, len: ls, thick: 4.0, angle },
            ]
        }
    }
}

/// Every grasp the shape could carry; the generator picks a subset.
fn grasp_candidates(parts: &[Part], kind: ShapeKind, cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Vec<Grasp5D> {
    let plate = cfg.plate_extent;
    let mut raw = Vec::new();
    for (pi, part) in parts.iter().enumerate() {
        match *part {
            Part::Bar { cx, cy, len, thick, angle } => {
                // The cross has an intersection at its center; keep to the arms.
                let n = ((len / (plate + 2.0)).floor() as usize).clamp(1, 6);
                let mut c = bar_candidates(cx, cy, len, thick, angle, plate, n);
                if kind == ShapeKind::Cross {
                    c.retain(|&(x, y, _, _)| (x - cx).hypot(y - cy) > thick * 1.2);
                }
                if kind == ShapeKind::Handle && pi == 1 {
                    c.truncate(2);
                }
                raw.extend(c);
            }
            Part::Disk { cx, cy, r } => {
                for _ in 0..6 {
                    raw.push((cx, cy, rng.random_range(0.0..PI), 2.0 * r));
                }
            }
            Part::Ring { cx, cy, r_out, r_in } => {
                let rm = (r_out + r_in) / 2.0;
                let phase = rng.random_range(0.0..PI / 3.0);
                for k in 0..6 {
                    let a = phase + k as f64 * PI / 3.0;
                    raw.push((cx + rm * a.cos(), cy + rm * a.sin(), a, r_out - r_in));
                }
            }
            Part::Ellipse { cx, cy, a, b, angle } => {
                let (s, c) = angle.sin_cos();
                for k in 0..5 {
                    let t = -0.5 * a + a * k as f64 / 4.0;
                    let thick = 2.0 * b * (1.0 - (t / a).powi(2)).sqrt();
                    raw.push((cx + t * c, cy + t * s, angle + PI / 2.0, thick));
                }
            }
        }
    }
    raw.into_iter()
        .filter_map(|(x, y, theta, thick)| Grasp5D::new(x, y, theta, thick + cfg.opening_margin, plate).ok())
        .collect()
}

fn bbox_of(parts: &[Part]) -> AxisBox {
    let (mut x1, mut y1, mut x2, mut y2) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in parts {
        let (a, b, c, d) = p.bounds();
        x1 = x1.min(a);
        y1 = y1.min(b);
        x2 = x2.max(c);
        y2 = y2.max(d);
    }
    AxisBox::from_corners(x1, y1, x2, y2)
}

fn grasp_inside_canvas(g: &Grasp5D, w: usize, h: usize) -> bool {
    g.corners()
        .iter()
        .all(|&(x, y)| x >= 0.0 && y >= 0.0 && x <= w as f64 && y <= h as f64)
}

/// Deterministically generate one scene from `(config, seed)`.
pub fn generate_scene(cfg: &SceneConfig, seed: u64) -> Result<Scene, SceneError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (cfg.width, cfg.height);
    let n_obj = rng.random_range(cfg.min_objects..=cfg.max_objects);
    let mut last_failure = String::new();
    for _ in 0..cfg.max_attempts {
        let mut cats: Vec<usize> = (0..cfg.categories).collect();
        cats.shuffle(&mut rng);
        cats.truncate(n_obj);
        let mut depth: Vec<usize> = (0..n_obj).collect();
        depth.shuffle(&mut rng);

        let mut objects = Vec::with_capacity(n_obj);
        let mut candidates = Vec::with_capacity(n_obj);
        let mut fits = true;
        for (k, &cat) in cats.iter().enumerate() {
            let kind = REGISTRY[cat].shape;
            let cx = rng.random_range(14.0..(w as f64 - 14.0));
            let cy = rng.random_range(14.0..(h as f64 - 14.0));
            let angle = rng.random_range(0.0..2.0 * PI);
            let parts = shape_parts(kind, cx, cy, angle, &mut rng);
            let bbox = bbox_of(&parts);
            if bbox.x1() < 1.0 || bbox.y1() < 1.0 || bbox.x2() > w as f64 - 1.0 || bbox.y2() > h as f64 - 1.0 {
                fits = false;
            }
            candidates.push(grasp_candidates(&parts, kind, cfg, &mut rng));
            objects.push(SceneObject { category: cat, bbox, grasps: Vec::new(), depth_order: depth[k], parts });
        }
        if !fits {
            last_failure = "object extends past the canvas".into();
            continue;
        }

        let owner = owner_map(&objects, w, h);
        let mut ok = true;
        for (i, obj) in objects.iter().enumerate() {
            let total = mask_area(obj, w, h);
            let vis = owner.iter().filter(|&&v| v == Some(i)).count();
            if total == 0 || (vis as f64) < cfg.min_visibility * total as f64 {
                last_failure = format!("visibility below {}", cfg.min_visibility);
                ok = false;
                break;
            }
        }
        if !ok {
            continue;
        }

        for (i, obj) in objects.iter_mut().enumerate() {
            let mut usable: Vec<Grasp5D> = candidates[i]
                .iter()
                .copied()
                .filter(|g| {
                    let (px, py) = (g.x().floor() as usize, g.y().floor() as usize);
                    px < w && py < h && owner[py * w + px] == Some(i) && grasp_inside_canvas(g, w, h)
                })
                .collect();
            if usable.is_empty() {
                last_failure = "an object has no unoccluded grasp".into();
                ok = false;
                break;
            }
            usable.shuffle(&mut rng);
            let want = rng.random_range(cfg.min_grasps..=cfg.max_grasps);
            usable.truncate(want);
            obj.grasps = usable;
        }
        if !ok {
            continue;
        }

        let image = render(&objects, &owner, w, h, &mut rng);
        return Ok(Scene { image, objects, rng_seed: seed });
    }
    Err(SceneError::Placement {
        attempts: cfg.max_attempts,
        constraint: last_failure,
    })
}

fn jitter(c: [u8; 3], amount: i32, rng: &mut ChaCha8Rng) -> [u8; 3] {
    let n = rng.random_range(-amount..=amount);
    c.map(|v| (v as i32 + n).clamp(0, 255) as u8)
}

fn render(objects: &[SceneObject], owner: &[Option<usize>], w: usize, h: usize, rng: &mut ChaCha8Rng) -> Image {
    let mut img = Image::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let rgb = match owner[y * w + x] {
                None => jitter(BACKGROUND, 10, rng),
                Some(i) => {
                    let cat = &REGISTRY[objects[i].category];
                    let (fx, fy) = (x as f64, y as f64);
                    let use_accent = match cat.texture {
                        Texture::Solid => false,
                        Texture::Stripes => ((fx + fy) / 4.0).floor() as i64 % 2 == 0,
                        Texture::Checker => ((fx / 4.0).floor() as i64 + (fy / 4.0).floor() as i64) % 2 == 0,
                    };
                    // The screwdriver shaft is drawn in the accent color.
                    let on_shaft = cat.shape == ShapeKind::Handle
                        && objects[i].parts.get(1).is_some_and(|p| p.contains(fx + 0.5, fy + 0.5))
                        && !objects[i].parts[0].contains(fx + 0.5, fy + 0.5);
                    jitter(if use_accent || on_shaft { cat.accent } else { cat.color }, 8, rng)
                }
            };
            img.put(x, y, rgb);
        }
    }
    img
}
