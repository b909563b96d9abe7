//! Weak (geometric) and strong (photometric) augmentations.
//!
//! The weak distribution follows the usual DETR recipe: a coin flip for
//! horizontal mirroring, then either a single multi-scale resize or a
//! resize, random crop, resize chain. Pixel constants are given for an
//! 800-pixel reference and scaled by `input_size / 800`.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::config::ImageScale;
use crate::error::{Error, Result};
use crate::geometry::{BoxN, BoxSet};
use crate::pipeline::image::ImageTensor;

const REFERENCE_SIZE: f64 = 800.0;
const MAX_SIZE: f64 = 1333.0;
/// Boxes keeping less than this fraction of their area after a crop are
/// dropped.
const MIN_RETAINED_AREA: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum GeomOp {
    Flip,
    Resize { height: usize, width: usize },
    /// Pixel rectangle in the current frame.
    Crop { x: usize, y: usize, width: usize, height: usize },
}

/// Geometric ops applied to a source image, in order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AugRecord {
    pub source_height: usize,
    pub source_width: usize,
    pub ops: Vec<GeomOp>,
}

impl AugRecord {
    pub fn identity(height: usize, width: usize) -> Self {
        AugRecord { source_height: height, source_width: width, ops: Vec::new() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeakParams {
    pub scale: ImageScale,
    pub input_size: usize,
}

impl WeakParams {
    fn factor(&self) -> f64 {
        self.input_size as f64 / REFERENCE_SIZE
    }

    fn px(&self, v: f64) -> usize {
        ((v * self.factor()).round() as usize).max(1)
    }

    fn short_edges(&self) -> Vec<usize> {
        let (lo, hi, step) = match self.scale {
            ImageScale::Large => (480, 801, 32),
            ImageScale::Mid => (320, 481, 16),
        };
        (lo..hi).step_by(step).map(|v| self.px(v as f64)).collect()
    }
}

/// Output size when resizing the short edge to `short`, capping the long
/// edge at `max_size`.
fn resized_dims(height: usize, width: usize, short: usize, max_size: usize) -> (usize, usize) {
    let (h, w) = (height as f64, width as f64);
    let (lo, hi) = (h.min(w), h.max(w));
    let mut target = short as f64;
    if hi / lo * target > max_size as f64 {
        target = (max_size as f64 * lo / hi).round();
    }
    let scale = target / lo;
    let out_h = ((h * scale).round() as usize).max(1);
    let out_w = ((w * scale).round() as usize).max(1);
    (out_h, out_w)
}

/// Draws a weak augmentation record for an image of the given size.
pub fn sample_weak_record(height: usize, width: usize, params: WeakParams, rng: &mut impl Rng) -> AugRecord {
    let mut record = AugRecord::identity(height, width);
    let (mut h, mut w) = (height, width);
    let max_size = params.px(MAX_SIZE);
    if rng.gen_bool(0.5) {
        record.ops.push(GeomOp::Flip);
    }
    let edges = params.short_edges();
    if rng.gen_bool(0.5) {
        let short = *edges.choose(rng).expect("non-empty");
        let (nh, nw) = resized_dims(h, w, short, max_size);
        record.ops.push(GeomOp::Resize { height: nh, width: nw });
    } else {
        let pre = [400.0, 500.0, 600.0].map(|v| params.px(v));
        let short = *pre.choose(rng).expect("non-empty");
        (h, w) = resized_dims(h, w, short, max_size);
        record.ops.push(GeomOp::Resize { height: h, width: w });

        let (min_crop, max_crop) = (params.px(384.0), params.px(600.0));
        let cw = rng.gen_range(min_crop.min(w)..=max_crop.min(w));
        let ch = rng.gen_range(min_crop.min(h)..=max_crop.min(h));
        let x = rng.gen_range(0..=w - cw);
        let y = rng.gen_range(0..=h - ch);
        record.ops.push(GeomOp::Crop { x, y, width: cw, height: ch });
        (h, w) = (ch, cw);

        let short = *edges.choose(rng).expect("non-empty");
        let (nh, nw) = resized_dims(h, w, short, max_size);
        record.ops.push(GeomOp::Resize { height: nh, width: nw });
    }
    record
}

/// Replays a record on its source image.
pub fn apply_record(img: &ImageTensor, record: &AugRecord) -> Result<ImageTensor> {
    if img.height() != record.source_height || img.width() != record.source_width {
        return Err(Error::Contract(format!(
            "record made for {}x{}, image is {}x{}",
            record.source_width,
            record.source_height,
            img.width(),
            img.height()
        )));
    }
    let mut out = img.clone();
    for op in &record.ops {
        out = match *op {
            GeomOp::Flip => out.flip_horizontal(),
            GeomOp::Resize { height, width } => out.resize(height, width)?,
            GeomOp::Crop { x, y, width, height } => out.crop(x, y, width, height)?,
        };
    }
    Ok(out)
}

pub fn weak_augment(img: &ImageTensor, params: WeakParams, rng: &mut impl Rng) -> Result<(ImageTensor, AugRecord)> {
    let record = sample_weak_record(img.height(), img.width(), params, rng);
    let view = apply_record(img, &record)?;
    Ok((view, record))
}

/// Maps boxes given on the source image into the frame produced by the
/// record. Resizes leave normalized coordinates unchanged.
pub fn transport_boxes(boxes: &BoxSet, record: &AugRecord) -> BoxSet {
    let mut current: Vec<(f64, f64, f64, f64, f64)> = boxes
        .boxes
        .iter()
        .map(|b| {
            let (x1, y1, x2, y2) = b.to_corners();
            (x1, y1, x2, y2, b.area())
        })
        .collect();
    let (mut h, mut w) = (record.source_height as f64, record.source_width as f64);
    for op in &record.ops {
        match *op {
            GeomOp::Flip => {
                for b in &mut current {
                    (b.0, b.2) = (1.0 - b.2, 1.0 - b.0);
                }
            }
            GeomOp::Resize { height, width } => (h, w) = (height as f64, width as f64),
            GeomOp::Crop { x, y, width, height } => {
                let (cx1, cy1) = (x as f64 / w, y as f64 / h);
                let (sw, sh) = (width as f64 / w, height as f64 / h);
                current = current
                    .into_iter()
                    .filter_map(|(x1, y1, x2, y2, original)| {
                        let nx1 = ((x1 - cx1) / sw).clamp(0.0, 1.0);
                        let ny1 = ((y1 - cy1) / sh).clamp(0.0, 1.0);
                        let nx2 = ((x2 - cx1) / sw).clamp(0.0, 1.0);
                        let ny2 = ((y2 - cy1) / sh).clamp(0.0, 1.0);
                        // Retained area measured in the pre-crop frame.
                        let kept = (nx2 - nx1).max(0.0) * sw * (ny2 - ny1).max(0.0) * sh;
                        (kept >= MIN_RETAINED_AREA * original && kept > 0.0)
                            .then(|| (nx1, ny1, nx2, ny2, (nx2 - nx1) * (ny2 - ny1)))
                    })
                    .collect();
                (h, w) = (height as f64, width as f64);
            }
        }
    }
    let out = current
        .into_iter()
        .filter_map(|(x1, y1, x2, y2, _)| BoxN::from_corners(x1, y1, x2, y2).ok())
        .collect();
    BoxSet::new(boxes.image_id.clone(), out)
}

/// Color jitter factors. Brightness, contrast and saturation multiply;
/// hue shifts in `[-0.5, 0.5]` hue units. `order` is a permutation of the
/// four adjustments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Jitter {
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
    pub order: [u8; 4],
}

impl Jitter {
    pub fn neutral() -> Self {
        Jitter { brightness: 1.0, contrast: 1.0, saturation: 1.0, hue: 0.0, order: [0, 1, 2, 3] }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrongParams {
    pub jitter: Option<Jitter>,
    pub grayscale: bool,
    pub blur_sigma: Option<f32>,
}

pub fn sample_strong(rng: &mut impl Rng) -> StrongParams {
    let jitter = rng.gen_bool(0.8).then(|| {
        let mut order = [0u8, 1, 2, 3];
        order.shuffle(rng);
        Jitter {
            brightness: rng.gen_range(0.6..=1.4),
            contrast: rng.gen_range(0.6..=1.4),
            saturation: rng.gen_range(0.6..=1.4),
            hue: rng.gen_range(-0.1..=0.1),
            order,
        }
    });
    let grayscale = rng.gen_bool(0.2);
    let blur_sigma = rng.gen_bool(0.5).then(|| {
        let (lo, hi) = (0.1f32.ln(), 2.0f32.ln());
        rng.gen_range(lo..=hi).exp()
    });
    StrongParams { jitter, grayscale, blur_sigma }
}

fn luma(p: [f32; 3]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn rgb_to_hsv([r, g, b]: [f32; 3]) -> [f32; 3] {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    [h, s, max]
}

fn hsv_to_rgb([h, s, v]: [f32; 3]) -> [f32; 3] {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let (p, q, t) = (v * (1.0 - s), v * (1.0 - s * f), v * (1.0 - s * (1.0 - f)));
    match i as u32 % 6 {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

fn gaussian_blur(img: &ImageTensor, sigma: f32) -> ImageTensor {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let kernel: Vec<f32> = (-radius..=radius).map(|i| (-(i * i) as f32 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| k / norm).collect();
    let (h, w) = (img.height() as isize, img.width() as isize);
    let pass = |src: &ImageTensor, horizontal: bool| {
        let mut out = src.clone();
        for y in 0..h {
            for x in 0..w {
                let mut acc = [0.0f32; 3];
                for (k, weight) in kernel.iter().enumerate() {
                    let o = k as isize - radius;
                    let (sy, sx) = if horizontal { (y, (x + o).clamp(0, w - 1)) } else { ((y + o).clamp(0, h - 1), x) };
                    let p = src.pixel(sy as usize, sx as usize);
                    for c in 0..3 {
                        acc[c] += weight * p[c];
                    }
                }
                out.set_pixel(y as usize, x as usize, acc);
            }
        }
        out
    };
    pass(&pass(img, true), false)
}

/// Applies photometric ops in the order jitter, grayscale, blur. Output
/// dimensions always equal input dimensions.
pub fn apply_strong(img: &ImageTensor, params: &StrongParams) -> ImageTensor {
    let mut out = img.clone();
    if let Some(j) = params.jitter {
        for step in j.order {
            out = match step {
                0 => out.map_pixels(|p| p.map(|v| v * j.brightness)),
                1 => {
                    let n = (out.height() * out.width()) as f32;
                    let mean = out.data().chunks(3).map(|p| luma([p[0], p[1], p[2]])).sum::<f32>() / n;
                    out.map_pixels(|p| p.map(|v| mean + (v - mean) * j.contrast))
                }
                2 => out.map_pixels(|p| {
                    let g = luma(p);
                    p.map(|v| g + (v - g) * j.saturation)
                }),
                _ if j.hue == 0.0 => out,
                _ => out.map_pixels(|p| {
                    let [h, s, v] = rgb_to_hsv(p);
                    hsv_to_rgb([h + j.hue, s, v])
                }),
            };
        }
    }
    if params.grayscale {
        out = out.map_pixels(|p| [luma(p); 3]);
    }
    if let Some(sigma) = params.blur_sigma {
        out = gaussian_blur(&out, sigma);
    }
    out
}

pub fn strong_augment(img: &ImageTensor, rng: &mut impl Rng) -> ImageTensor {
    let params = sample_strong(rng);
    apply_strong(img, &params)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gradient(h: usize, w: usize) -> ImageTensor {
        let data = (0..h * w)
            .flat_map(|i| {
                let (y, x) = (i / w, i % w);
                [x as f32 / w as f32, y as f32 / h as f32, ((x * y) % 7) as f32 / 7.0]
            })
            .collect();
        ImageTensor::new(h, w, data).unwrap()
    }

    const PARAMS: WeakParams = WeakParams { scale: ImageScale::Large, input_size: 64 };

    #[test]
    fn single_resize_record() {
        let img = gradient(64, 64);
        let record = AugRecord { source_height: 64, source_width: 64, ops: vec![GeomOp::Resize { height: 48, width: 48 }] };
        assert_eq!(apply_record(&img, &record).unwrap(), img.resize(48, 48).unwrap());
        assert_eq!(record.ops.len(), 1);
    }

    #[test]
    fn flip_record_mirrors() {
        let img = gradient(8, 10);
        let record = AugRecord { source_height: 8, source_width: 10, ops: vec![GeomOp::Flip] };
        let view = apply_record(&img, &record).unwrap();
        assert_eq!(view.pixel(3, 0), img.pixel(3, 9));
    }

    #[test]
    fn replay_is_bitwise() {
        let img = gradient(64, 48);
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (view, record) = weak_augment(&img, PARAMS, &mut rng).unwrap();
            assert_eq!(apply_record(&img, &record).unwrap(), view);
        }
    }

    #[test]
    fn sizes_follow_scaled_table() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let allowed = PARAMS.short_edges();
        assert_eq!(allowed.first(), Some(&38));
        assert_eq!(allowed.last(), Some(&64));
        for _ in 0..200 {
            let r = sample_weak_record(64, 64, PARAMS, &mut rng);
            let Some(GeomOp::Resize { height, width }) = r.ops.last() else { panic!("no final resize") };
            assert!(allowed.contains(&(*height).min(*width)), "{r:?}");
            for op in &r.ops {
                if let GeomOp::Crop { width, height, .. } = op {
                    assert!((31..=48).contains(width) && (31..=48).contains(height));
                }
            }
        }
        let mid = WeakParams { scale: ImageScale::Mid, input_size: 64 };
        assert_eq!(mid.short_edges().first(), Some(&26));
        assert_eq!(mid.short_edges().last(), Some(&38));
    }

    #[test]
    fn transport_flip_and_identity() {
        let set = BoxSet::new("a", vec![BoxN::new(0.3, 0.5, 0.2, 0.2).unwrap()]);
        let flip = AugRecord { source_height: 10, source_width: 10, ops: vec![GeomOp::Flip] };
        let b = transport_boxes(&set, &flip).boxes[0];
        assert!((b.cx - 0.7).abs() < 1e-6 && (b.w - 0.2).abs() < 1e-6);
        assert_eq!(transport_boxes(&set, &AugRecord::identity(10, 10)), set);
    }

    #[test]
    fn transport_crop_right_half() {
        let set = BoxSet::new("a", vec![BoxN::new(0.75, 0.5, 0.2, 0.2).unwrap(), BoxN::new(0.1, 0.5, 0.1, 0.1).unwrap()]);
        let crop = AugRecord { source_height: 100, source_width: 100, ops: vec![GeomOp::Crop { x: 50, y: 0, width: 50, height: 100 }] };
        let out = transport_boxes(&set, &crop);
        assert_eq!(out.len(), 1);
        let b = out.boxes[0];
        for (got, want) in b.to_array().iter().zip([0.5, 0.5, 0.4, 0.2]) {
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn crop_drops_slivers() {
        // 5% of the box survives the crop.
        let set = BoxSet::new("a", vec![BoxN::from_corners(0.4, 0.0, 0.6, 1.0).unwrap()]);
        let crop = AugRecord { source_height: 100, source_width: 100, ops: vec![GeomOp::Crop { x: 59, y: 0, width: 41, height: 100 }] };
        assert!(transport_boxes(&set, &crop).is_empty());
    }

    #[test]
    fn transported_boxes_are_valid() {
        let img = gradient(64, 64);
        let boxes: Vec<BoxN> = (0..20).map(|i| BoxN::new(0.05 * i as f32, 0.5, 0.1, 0.3).unwrap()).collect();
        let set = BoxSet::new("a", boxes);
        for seed in 0..50 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (_, record) = weak_augment(&img, PARAMS, &mut rng).unwrap();
            for b in transport_boxes(&set, &record).boxes {
                let (x1, y1, x2, y2) = b.to_corners();
                assert!(x1 >= -1e-6 && y1 >= -1e-6 && x2 <= 1.0 + 1e-6 && y2 <= 1.0 + 1e-6);
            }
        }
    }

    #[test]
    fn strong_keeps_geometry() {
        let img = gradient(20, 30);
        for seed in 0..30 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let out = strong_augment(&img, &mut rng);
            assert_eq!((out.height(), out.width()), (20, 30));
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn grayscale_equal_channels() {
        let img = gradient(6, 6);
        let out = apply_strong(&img, &StrongParams { jitter: None, grayscale: true, blur_sigma: None });
        for p in out.data().chunks(3) {
            assert!(p[0] == p[1] && p[1] == p[2]);
        }
    }

    #[test]
    fn neutral_jitter_is_identity() {
        let img = gradient(6, 6);
        let out = apply_strong(&img, &StrongParams { jitter: Some(Jitter::neutral()), grayscale: false, blur_sigma: None });
        for (a, b) in img.data().iter().zip(out.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn hsv_round_trip() {
        for p in [[0.2, 0.5, 0.9], [1.0, 0.0, 0.0], [0.3, 0.3, 0.3], [0.9, 0.8, 0.1]] {
            let back = hsv_to_rgb(rgb_to_hsv(p));
            for c in 0..3 {
                assert!((back[c] - p[c]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn blur_sigma_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..500 {
            if let Some(s) = sample_strong(&mut rng).blur_sigma {
                assert!((0.1..=2.0 + 1e-6).contains(&s));
            }
        }
    }
}
