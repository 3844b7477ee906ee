//! Synthetic moving-shapes videos.
//!
//! Each class is one shape drawn in a random colour over a fixed noisy grey
//! background. Objects move at constant speed with a small random turn per
//! frame and bounce off the borders. Frames are rendered on demand from the
//! stored object poses, so a sequence is cheap to keep in memory.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::detection::{BBox, GroundTruth};
use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Number of distinct shapes the renderer can draw.
pub const MAX_CLASSES: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoParams {
    pub n_objects: usize,
    pub classes: usize,
    pub resolution: usize,
    pub length: usize,
    /// Pixels per frame.
    pub speed: f64,
    /// Standard deviation of the background texture.
    pub noise: f64,
    /// Standard deviation of the per-frame heading change, in radians.
    pub turn: f64,
    /// Object side range as a fraction of the resolution.
    pub size: (f64, f64),
}

impl VideoParams {
    /// Desk-scale defaults: 64 px, 3 classes, 40 frames.
    pub fn toy() -> Self {
        VideoParams {
            n_objects: 2,
            classes: 3,
            resolution: 64,
            length: 40,
            speed: 1.5,
            noise: 0.05,
            turn: 0.15,
            size: (0.2, 0.4),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes == 0 || self.classes > MAX_CLASSES {
            return Err(Error::Config(format!("classes must be in 1..={MAX_CLASSES}, got {}", self.classes)));
        }
        if self.resolution < 8 || self.length == 0 {
            return Err(Error::Config("video needs resolution >= 8 and at least one frame".into()));
        }
        let (lo, hi) = self.size;
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return Err(Error::Config(format!("object size range {lo}..{hi} must satisfy 0 < lo <= hi < 1")));
        }
        if self.speed < 0.0 || self.noise < 0.0 || self.turn < 0.0 {
            return Err(Error::Config("speed, noise and turn must be non-negative".into()));
        }
        Ok(())
    }
}

/// One object in one frame, in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose {
    pub class: usize,
    pub color: [f32; 3],
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl Pose {
    fn bbox(&self, res: f64) -> BBox {
        BBox::new(self.cx / res, self.cy / res, self.w / res, self.h / res)
    }
}

/// Axis-aligned rectangle in pixels; pixels whose centres fall inside are
/// zeroed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x0: f64,
    pub y0: f64,
    pub w: f64,
    pub h: f64,
}

impl PixelRect {
    fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x0 && x < self.x0 + self.w && y >= self.y0 && y < self.y0 + self.h
    }
}

/// Image-space augmentation applied at render time.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Augment {
    pub flip: bool,
    /// Crop window `(x0, y0, side)` in normalised coordinates, resampled
    /// back to full resolution.
    pub crop: (f64, f64, f64),
}

impl Default for Augment {
    fn default() -> Self {
        Augment { flip: false, crop: (0.0, 0.0, 1.0) }
    }
}

impl Augment {
    /// Random flip (p = 0.5) and a crop keeping at least `min_side` of the image.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, min_side: f64) -> Self {
        let side = rng.gen_range(min_side..=1.0);
        Augment {
            flip: rng.gen_bool(0.5),
            crop: (rng.gen_range(0.0..=1.0 - side), rng.gen_range(0.0..=1.0 - side), side),
        }
    }

    /// Maps an output pixel coordinate (normalised) to the source image.
    fn source(&self, u: f64, v: f64) -> (f64, f64) {
        let u = if self.flip { 1.0 - u } else { u };
        let (x0, y0, s) = self.crop;
        (x0 + u * s, y0 + v * s)
    }

    /// Transforms a box; `None` when less than half of it stays in view.
    pub fn apply_box(&self, b: &BBox) -> Option<BBox> {
        let (x0, y0, s) = self.crop;
        let t = BBox::new((b.cx - x0) / s, (b.cy - y0) / s, b.w / s, b.h / s);
        let c = t.clipped();
        if c.area() < 0.5 * t.area() {
            return None;
        }
        Some(if self.flip { BBox::new(1.0 - c.cx, c.cy, c.w, c.h) } else { c })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoSequence {
    pub seed: u64,
    pub params: VideoParams,
    pub poses: Vec<Vec<Pose>>,
    pub occlusions: Vec<Vec<PixelRect>>,
}

impl VideoSequence {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    /// Ground truth of frame `t` (unaffected by occlusion).
    pub fn gt(&self, t: usize) -> Vec<GroundTruth> {
        let res = self.params.resolution as f64;
        self.poses[t].iter().map(|p| GroundTruth { class: p.class, bbox: p.bbox(res) }).collect()
    }

    pub fn gt_all(&self) -> Vec<Vec<GroundTruth>> {
        (0..self.len()).map(|t| self.gt(t)).collect()
    }

    /// Ground truth of frame `t` after `aug`.
    pub fn gt_augmented(&self, t: usize, aug: &Augment) -> Vec<GroundTruth> {
        self.gt(t)
            .into_iter()
            .filter_map(|g| aug.apply_box(&g.bbox).map(|bbox| GroundTruth { class: g.class, bbox }))
            .collect()
    }

    pub fn frame<T: Real>(&self, t: usize) -> Tensor<T> {
        self.frame_augmented(t, &Augment::default())
    }

    /// Renders frame `t` as a `(1, R, R, 3)` tensor with values in `[0, 1]`.
    pub fn frame_augmented<T: Real>(&self, t: usize, aug: &Augment) -> Tensor<T> {
        let r = self.params.resolution;
        let rf = r as f64;
        let texture = self.texture();
        let mut out = Tensor::zeros(Shape::new(1, r, r, 3));
        let data = out.data_mut();
        for y in 0..r {
            for x in 0..r {
                let (u, v) = aug.source((x as f64 + 0.5) / rf, (y as f64 + 0.5) / rf);
                let (px, py) = (u * rf, v * rf);
                let rgb = self.sample_pixel(t, px, py, &texture);
                let o = (y * r + x) * 3;
                for c in 0..3 {
                    data[o + c] = T::of(f64::from(rgb[c]));
                }
            }
        }
        out
    }

    fn texture(&self) -> Vec<f32> {
        let r = self.params.resolution;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x7e57_u64);
        let noise = Normal::new(0.0, self.params.noise.max(0.0)).expect("finite std");
        (0..r * r).map(|_| (0.5 + noise.sample(&mut rng)).clamp(0.0, 1.0) as f32).collect()
    }

    /// Colour at continuous pixel position `(px, py)` of frame `t`.
    fn sample_pixel(&self, t: usize, px: f64, py: f64, texture: &[f32]) -> [f32; 3] {
        let r = self.params.resolution;
        if self.occlusions[t].iter().any(|o| o.contains(px, py)) {
            return [0.0; 3];
        }
        for p in self.poses[t].iter().rev() {
            if inside_shape(p, px, py) {
                return p.color;
            }
        }
        let ix = (px.floor().max(0.0) as usize).min(r - 1);
        let iy = (py.floor().max(0.0) as usize).min(r - 1);
        let g = texture[iy * r + ix];
        [g; 3]
    }
}

/// Shape membership for class `1..=MAX_CLASSES`: square, disk, triangle,
/// diamond, cross.
fn inside_shape(p: &Pose, x: f64, y: f64) -> bool {
    let u = (x - p.cx) / (0.5 * p.w);
    let v = (y - p.cy) / (0.5 * p.h);
    if u.abs() > 1.0 || v.abs() > 1.0 {
        return false;
    }
    match p.class {
        1 => true,
        2 => u * u + v * v <= 1.0,
        // Apex at the top, base along the bottom edge.
        3 => u.abs() <= (v + 1.0) / 2.0,
        4 => u.abs() + v.abs() <= 1.0,
        _ => u.abs() <= 0.35 || v.abs() <= 0.35,
    }
}

/// Renders a deterministic video from `seed`.
pub fn generate_video(seed: u64, params: &VideoParams) -> Result<VideoSequence> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let res = params.resolution as f64;
    let turn = Normal::new(0.0, params.turn).map_err(|e| Error::Config(e.to_string()))?;
    struct Mover {
        pose: Pose,
        vx: f64,
        vy: f64,
    }
    let mut movers: Vec<Mover> = (0..params.n_objects)
        .map(|_| {
            let side = rng.gen_range(params.size.0..=params.size.1) * res;
            let aspect: f64 = rng.gen_range(0.8..=1.25);
            let (w, h) = (side * aspect.sqrt(), side / aspect.sqrt());
            let heading = rng.gen_range(0.0..2.0 * PI);
            let color = loop {
                let c: [f32; 3] = [rng.gen(), rng.gen(), rng.gen()];
                // Keep objects distinguishable from the grey background.
                if c.iter().map(|v| (v - 0.5).abs()).fold(0.0, f32::max) > 0.3 {
                    break c;
                }
            };
            Mover {
                pose: Pose {
                    class: rng.gen_range(1..=params.classes),
                    color,
                    cx: rng.gen_range(w / 2.0..=res - w / 2.0),
                    cy: rng.gen_range(h / 2.0..=res - h / 2.0),
                    w,
                    h,
                },
                vx: params.speed * heading.cos(),
                vy: params.speed * heading.sin(),
            }
        })
        .collect();
    let mut poses = Vec::with_capacity(params.length);
    for t in 0..params.length {
        if t > 0 {
            for m in &mut movers {
                let a = turn.sample(&mut rng);
                let (s, c) = a.sin_cos();
                (m.vx, m.vy) = (m.vx * c - m.vy * s, m.vx * s + m.vy * c);
                advance(&mut m.pose.cx, &mut m.vx, m.pose.w, res);
                advance(&mut m.pose.cy, &mut m.vy, m.pose.h, res);
            }
        }
        poses.push(movers.iter().map(|m| m.pose).collect());
    }
    Ok(VideoSequence { seed, params: params.clone(), occlusions: vec![Vec::new(); poses.len()], poses })
}

/// Moves a centre one step, reflecting off `[0, limit]` so the object stays
/// inside.
fn advance(c: &mut f64, v: &mut f64, extent: f64, limit: f64) {
    let lo = extent / 2.0;
    let hi = limit - extent / 2.0;
    *c += *v;
    if *c < lo {
        *c = 2.0 * lo - *c;
        *v = -*v;
    } else if *c > hi {
        *c = 2.0 * hi - *c;
        *v = -*v;
    }
    *c = c.clamp(lo, hi);
}

/// Zeroes a random rectangle inside each ground-truth box with probability
/// `p`. Rectangle sides are uniform in `[H/2, 3H/4] x [W/2, 3W/4]` of the box
/// and the rectangle lies fully inside it. Ground truth is unchanged.
pub fn occlude<R: Rng + ?Sized>(seq: &VideoSequence, p: f64, rng: &mut R) -> Result<VideoSequence> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("occlusion probability {p} outside [0, 1]")));
    }
    let mut out = seq.clone();
    for (t, poses) in seq.poses.iter().enumerate() {
        for pose in poses {
            // Every draw happens regardless of the outcome, so one stream
            // yields nested occlusion sets as `p` grows.
            let u: f64 = rng.gen();
            let w = rng.gen_range(0.5 * pose.w..=0.75 * pose.w);
            let h = rng.gen_range(0.5 * pose.h..=0.75 * pose.h);
            let dx = rng.gen_range(0.0..=pose.w - w);
            let dy = rng.gen_range(0.0..=pose.h - h);
            if u < p {
                out.occlusions[t].push(PixelRect {
                    x0: pose.cx - pose.w / 2.0 + dx,
                    y0: pose.cy - pose.h / 2.0 + dy,
                    w,
                    h,
                });
            }
        }
    }
    Ok(out)
}

/// A set of videos generated from consecutive seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub videos: Vec<VideoSequence>,
}

impl Dataset {
    /// Video `i` uses seed `base_seed * 1_000_003 + i`.
    pub fn generate(count: usize, base_seed: u64, params: &VideoParams) -> Result<Self> {
        let videos = (0..count as u64)
            .map(|i| generate_video(base_seed.wrapping_mul(1_000_003).wrapping_add(i), params))
            .collect::<Result<_>>()?;
        Ok(Dataset { videos })
    }

    /// Every video occluded with its own stream derived from `seed`.
    pub fn occluded(&self, p: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let videos = self.videos.iter().map(|v| occlude(v, p, &mut rng)).collect::<Result<_>>()?;
        Ok(Dataset { videos })
    }

    /// Videos truncated to the given frame windows.
    pub fn windows(&self, ranges: &[std::ops::Range<usize>]) -> Result<Self> {
        if ranges.len() != self.videos.len() {
            return Err(Error::Contract(format!("{} windows for {} videos", ranges.len(), self.videos.len())));
        }
        let videos = self
            .videos
            .iter()
            .zip(ranges)
            .map(|(v, r)| {
                if r.end > v.len() {
                    return Err(Error::Contract(format!("window {r:?} beyond {} frames", v.len())));
                }
                Ok(VideoSequence {
                    seed: v.seed,
                    params: v.params.clone(),
                    poses: v.poses[r.clone()].to_vec(),
                    occlusions: v.occlusions[r.clone()].to_vec(),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Dataset { videos })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> VideoParams {
        VideoParams { length: 12, ..VideoParams::toy() }
    }

    #[test]
    fn same_seed_same_video() {
        let a = generate_video(11, &params()).unwrap();
        let b = generate_video(11, &params()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.frame::<f32>(5).data(), b.frame::<f32>(5).data());
        assert_ne!(a, generate_video(12, &params()).unwrap());
    }

    #[test]
    fn static_video_repeats() {
        let p = VideoParams { speed: 0.0, ..params() };
        let v = generate_video(3, &p).unwrap();
        for t in 1..v.len() {
            assert_eq!(v.gt(t), v.gt(0));
            assert_eq!(v.frame::<f32>(t).data(), v.frame::<f32>(0).data());
        }
    }

    #[test]
    fn bounce_keeps_object_inside() {
        // Object of width 10 touching the right wall of a 64 px frame,
        // moving right at 3 px/frame.
        let (mut c, mut v) = (58.5, 3.0);
        let mut trace = Vec::new();
        for _ in 0..5 {
            advance(&mut c, &mut v, 10.0, 64.0);
            trace.push((c, v));
        }
        assert_eq!(trace[0], (56.5, -3.0));
        assert_eq!(trace[1], (53.5, -3.0));
        assert!(trace.iter().all(|&(c, _)| (5.0..=59.0).contains(&c)));
    }

    #[test]
    fn displacement_is_bounded_and_boxes_stay_in_frame() {
        let v = generate_video(8, &VideoParams { length: 40, ..params() }).unwrap();
        for t in 0..v.len() {
            for (k, g) in v.gt(t).iter().enumerate() {
                let (x0, y0, x1, y1) = g.bbox.corners();
                assert!(x0 >= -1e-9 && y0 >= -1e-9 && x1 <= 1.0 + 1e-9 && y1 <= 1.0 + 1e-9);
                if t > 0 {
                    let p = v.gt(t - 1)[k].bbox;
                    let step = ((g.bbox.cx - p.cx).powi(2) + (g.bbox.cy - p.cy).powi(2)).sqrt() * 64.0;
                    assert!(step <= 1.5 + 1e-9);
                }
            }
        }
    }

    #[test]
    fn shapes_render_with_object_colour() {
        let v = generate_video(2, &params()).unwrap();
        let f = v.frame::<f64>(0);
        for p in &v.poses[0] {
            let (x, y) = (p.cx.floor() as usize, p.cy.floor() as usize);
            let covered_later = v.poses[0]
                .iter()
                .skip_while(|q| *q != p)
                .skip(1)
                .any(|q| inside_shape(q, x as f64 + 0.5, y as f64 + 0.5));
            if !covered_later && inside_shape(p, x as f64 + 0.5, y as f64 + 0.5) {
                assert_eq!(f.get(0, y, x, 0), f64::from(p.color[0]));
            }
        }
    }

    #[test]
    fn occlusion_probability_is_validated() {
        let v = generate_video(1, &params()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(occlude(&v, 1.5, &mut rng).is_err());
        assert!(occlude(&v, -0.1, &mut rng).is_err());
        assert_eq!(occlude(&v, 0.0, &mut rng).unwrap(), v);
    }

    #[test]
    fn full_occlusion_of_eight_pixel_boxes() {
        let mut v = generate_video(4, &params()).unwrap();
        for frame in &mut v.poses {
            for p in frame.iter_mut() {
                (p.w, p.h) = (8.0, 8.0);
                (p.cx, p.cy) = (p.cx.round(), p.cy.round());
            }
        }
        let o = occlude(&v, 1.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        for (t, rects) in o.occlusions.iter().enumerate() {
            assert_eq!(rects.len(), v.poses[t].len());
            let f = o.frame::<f64>(t);
            for (r, p) in rects.iter().zip(&v.poses[t]) {
                assert!((4.0..=6.0).contains(&r.w) && (4.0..=6.0).contains(&r.h));
                assert!(r.x0 >= p.cx - 4.0 && r.x0 + r.w <= p.cx + 4.0);
                assert!(r.y0 >= p.cy - 4.0 && r.y0 + r.h <= p.cy + 4.0);
                let (x, y) = ((r.x0 + r.w / 2.0) as usize, (r.y0 + r.h / 2.0) as usize);
                assert_eq!([f.get(0, y, x, 0), f.get(0, y, x, 1), f.get(0, y, x, 2)], [0.0; 3]);
            }
            assert_eq!(o.gt(t), v.gt(t));
        }
        let again = occlude(&v, 1.0, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(o, again);
    }

    #[test]
    fn occlusion_frequency_tracks_p() {
        let p = VideoParams { n_objects: 5, length: 100, ..params() };
        let data = Dataset::generate(20, 1, &p).unwrap();
        for prob in [0.25, 0.5, 0.75] {
            let o = data.occluded(prob, 77).unwrap();
            let rects: usize = o.videos.iter().flat_map(|v| &v.occlusions).map(Vec::len).sum();
            let freq = rects as f64 / 10_000.0;
            assert!((freq - prob).abs() <= 0.02, "p={prob}: {freq}");
        }
    }

    #[test]
    fn augmentation_moves_boxes_with_pixels() {
        let v = generate_video(5, &VideoParams { n_objects: 1, noise: 0.0, ..params() }).unwrap();
        let aug = Augment { flip: true, crop: (0.0, 0.0, 1.0) };
        let g = v.gt(0)[0].bbox;
        let fg = v.gt_augmented(0, &aug)[0].bbox;
        assert!((fg.cx - (1.0 - g.cx)).abs() < 1e-12);
        let f = v.frame::<f64>(0);
        let ff = v.frame_augmented::<f64>(0, &aug);
        for y in 0..64 {
            for x in 0..64 {
                assert_eq!(ff.get(0, y, x, 1), f.get(0, y, 63 - x, 1));
            }
        }
        // A crop away from the object drops its box.
        let right_half = g.cx - g.w / 2.0 > 0.5;
        let away = Augment { flip: false, crop: (if right_half { 0.0 } else { 0.5 }, 0.0, 0.5) };
        if right_half || g.cx + g.w / 2.0 < 0.5 {
            assert!(v.gt_augmented(0, &away).is_empty());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let a = Augment::random(&mut rng, 0.8);
            for b in v.gt_augmented(3, &a) {
                let (x0, y0, x1, y1) = b.bbox.corners();
                assert!(x0 >= -1e-12 && y0 >= -1e-12 && x1 <= 1.0 + 1e-12 && y1 <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn windows_slice_frames() {
        let d = Dataset::generate(2, 3, &params()).unwrap();
        let w = d.windows(&[2..7, 0..12]).unwrap();
        assert_eq!(w.videos[0].len(), 5);
        assert_eq!(w.videos[0].gt(0), d.videos[0].gt(2));
        assert!(d.windows(&[0..13, 0..1]).is_err());
        assert!(VideoParams { classes: 9, ..params() }.validate().is_err());
    }
}
