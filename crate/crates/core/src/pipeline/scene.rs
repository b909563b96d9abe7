//! Procedural shape scenes used as a stand-in dataset.
//!
//! Ground-truth boxes are exposed for diagnostics only; training never
//! reads them.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{iou, BoxN};
use crate::pipeline::image::ImageTensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
    /// Apex at the top center of the box, base along its bottom edge.
    Triangle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneShape {
    pub kind: ShapeKind,
    pub color: [f32; 3],
    /// Tight box; shapes are inscribed in it.
    pub bbox: BoxN,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub background: [f32; 3],
    /// Back to front.
    pub shapes: Vec<SceneShape>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneParams {
    pub size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    /// Shape extents as a fraction of the image side.
    pub min_extent: f64,
    pub max_extent: f64,
    /// Largest IoU allowed between two shapes before a placement is redrawn.
    pub max_overlap: f64,
}

impl Default for SceneParams {
    fn default() -> Self {
        SceneParams { size: 64, min_shapes: 1, max_shapes: 5, min_extent: 0.2, max_extent: 0.5, max_overlap: 0.1 }
    }
}

impl SceneParams {
    pub fn with_shapes(size: usize, count: usize) -> Self {
        SceneParams { size, min_shapes: count, max_shapes: count, ..SceneParams::default() }
    }
}

const MIN_COLOR_GAP: f32 = 0.2;

fn color_gap(a: [f32; 3], b: [f32; 3]) -> f32 {
    (0..3).map(|c| (a[c] - b[c]).abs()).fold(0.0, f32::max)
}

fn random_color(rng: &mut impl Rng, avoid: &[[f32; 3]]) -> [f32; 3] {
    loop {
        let c = [rng.gen::<f32>(), rng.gen::<f32>(), rng.gen::<f32>()];
        if avoid.iter().all(|a| color_gap(*a, c) >= MIN_COLOR_GAP) {
            return c;
        }
    }
}

/// Draws and renders a scene. Box corners sit on the pixel grid.
pub fn synth_scene(rng: &mut impl Rng, params: &SceneParams) -> (ImageTensor, SceneSpec) {
    let size = params.size;
    let background = random_color(rng, &[]);
    let count = rng.gen_range(params.min_shapes..=params.max_shapes);
    let mut colors = vec![background];
    let mut shapes: Vec<SceneShape> = Vec::with_capacity(count);
    let lo = ((params.min_extent * size as f64).round() as usize).max(2);
    let hi = ((params.max_extent * size as f64).round() as usize).clamp(lo, size);
    for _ in 0..count {
        let mut bbox = None;
        for attempt in 0..50 {
            let w = rng.gen_range(lo..=hi);
            let h = rng.gen_range(lo..=hi);
            let x = rng.gen_range(0..=size - w);
            let y = rng.gen_range(0..=size - h);
            let s = size as f64;
            let b = BoxN::from_corners(x as f64 / s, y as f64 / s, (x + w) as f64 / s, (y + h) as f64 / s)
                .expect("inside the image");
            bbox = Some(b);
            if attempt == 49 || shapes.iter().all(|o| iou(&o.bbox, &b) <= params.max_overlap) {
                break;
            }
        }
        let kind = match rng.gen_range(0..3) {
            0 => ShapeKind::Rectangle,
            1 => ShapeKind::Ellipse,
            _ => ShapeKind::Triangle,
        };
        let color = random_color(rng, &colors);
        colors.push(color);
        shapes.push(SceneShape { kind, color, bbox: bbox.expect("at least one attempt") });
    }
    let spec = SceneSpec { background, shapes };
    (render_scene(&spec, size), spec)
}

fn covers(shape: &SceneShape, u: f64, v: f64) -> bool {
    let (x1, y1, x2, y2) = shape.bbox.to_corners();
    if u < x1 || u >= x2 || v < y1 || v >= y2 {
        return false;
    }
    match shape.kind {
        ShapeKind::Rectangle => true,
        ShapeKind::Ellipse => {
            let (cx, cy) = ((x1 + x2) / 2.0, (y1 + y2) / 2.0);
            let (rx, ry) = ((x2 - x1) / 2.0, (y2 - y1) / 2.0);
            ((u - cx) / rx).powi(2) + ((v - cy) / ry).powi(2) <= 1.0
        }
        ShapeKind::Triangle => {
            // Half-width grows linearly from the apex to the base.
            let t = (v - y1) / (y2 - y1);
            let half = t * (x2 - x1) / 2.0;
            ((u - (x1 + x2) / 2.0).abs()) <= half
        }
    }
}

/// Square rendering sampled at pixel centers.
pub fn render_scene(spec: &SceneSpec, size: usize) -> ImageTensor {
    let mut img = ImageTensor::filled(size, size, spec.background);
    let s = size as f64;
    for shape in &spec.shapes {
        for y in 0..size {
            for x in 0..size {
                if covers(shape, (x as f64 + 0.5) / s, (y as f64 + 0.5) / s) {
                    img.set_pixel(y, x, shape.color);
                }
            }
        }
    }
    img
}
