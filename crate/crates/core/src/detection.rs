//! SSD box machinery: anchors, matching, the multibox loss with weighted
//! hard-negative mining, non-maximum suppression and mAP evaluation.
//!
//! Boxes are `(cx, cy, w, h)` in image-normalised coordinates. Class `0` is
//! background; object classes are `1..=C`.

use std::fmt::Write as _;
use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Variances applied to centre and size offsets when encoding boxes.
pub const BOX_VARIANCE: (f64, f64) = (0.1, 0.2);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BBox { cx: 0.5 * (x0 + x1), cy: 0.5 * (y0 + y1), w: x1 - x0, h: y1 - y0 }
    }

    /// `(x0, y0, x1, y1)`.
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (self.cx - 0.5 * self.w, self.cy - 0.5 * self.h, self.cx + 0.5 * self.w, self.cy + 0.5 * self.h)
    }

    pub fn area(&self) -> f64 {
        self.w.max(0.0) * self.h.max(0.0)
    }

    /// Clips the corners to the unit square.
    pub fn clipped(&self) -> BBox {
        let (x0, y0, x1, y1) = self.corners();
        BBox::from_corners(x0.clamp(0.0, 1.0), y0.clamp(0.0, 1.0), x1.clamp(0.0, 1.0), y1.clamp(0.0, 1.0))
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    let area_a = (ax1 - ax0).max(0.0) * (ay1 - ay0).max(0.0);
    let area_b = (bx1 - bx0).max(0.0) * (by1 - by0).max(0.0);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub bbox: BBox,
    /// Index of the feature map the anchor belongs to.
    pub source: usize,
}

/// Anchors for maps of `(H, W)` cells, ordered map, row, column, shape.
///
/// `scales` holds one scale per map, or a single scale shared by all maps.
/// Each cell gets one box per aspect ratio `r`, sized
/// `(s * sqrt(r), s / sqrt(r))`.
pub fn generate_anchors(fm_shapes: &[(usize, usize)], scales: &[f64], aspect_ratios: &[f64]) -> Result<Vec<Anchor>> {
    let shapes: Vec<Vec<(f64, f64)>> = (0..fm_shapes.len())
        .map(|k| {
            let s = pick_scale(scales, k, fm_shapes.len())?;
            Ok(aspect_ratios.iter().map(|r| (s * r.sqrt(), s / r.sqrt())).collect())
        })
        .collect::<Result<_>>()?;
    anchors_from_shapes(fm_shapes, &shapes)
}

fn pick_scale(scales: &[f64], k: usize, maps: usize) -> Result<f64> {
    match scales.len() {
        1 => Ok(scales[0]),
        n if n == maps => Ok(scales[k]),
        n => Err(Error::Contract(format!("{n} anchor scales for {maps} feature maps"))),
    }
}

/// Linearly spaced scales from `s_min` to `s_max`, one per map.
pub fn linear_scales(maps: usize, s_min: f64, s_max: f64) -> Vec<f64> {
    if maps <= 1 {
        return vec![s_min; maps];
    }
    (0..maps).map(|k| s_min + (s_max - s_min) * k as f64 / (maps - 1) as f64).collect()
}

/// SSD-style anchors: every aspect ratio at scale `s_k`, plus (when
/// `extra_unit_box`) a square box of scale `sqrt(s_k * s_{k+1})`.
pub fn ssd_anchors(
    fm_shapes: &[(usize, usize)],
    s_min: f64,
    s_max: f64,
    aspect_ratios: &[f64],
    extra_unit_box: bool,
) -> Result<Vec<Anchor>> {
    let maps = fm_shapes.len();
    let scales = linear_scales(maps, s_min, s_max);
    let shapes: Vec<Vec<(f64, f64)>> = (0..maps)
        .map(|k| {
            let s = scales[k];
            let mut v: Vec<(f64, f64)> = aspect_ratios.iter().map(|r| (s * r.sqrt(), s / r.sqrt())).collect();
            if extra_unit_box {
                let next = scales.get(k + 1).copied().unwrap_or(1.0);
                let e = (s * next).sqrt();
                v.push((e, e));
            }
            v
        })
        .collect();
    anchors_from_shapes(fm_shapes, &shapes)
}

fn anchors_from_shapes(fm_shapes: &[(usize, usize)], shapes: &[Vec<(f64, f64)>]) -> Result<Vec<Anchor>> {
    let mut out = Vec::new();
    for (k, (&(h, w), cell)) in fm_shapes.iter().zip(shapes).enumerate() {
        if h == 0 || w == 0 {
            return Err(Error::Contract(format!("feature map {k} has no cells")));
        }
        for y in 0..h {
            for x in 0..w {
                let cx = (x as f64 + 0.5) / w as f64;
                let cy = (y as f64 + 0.5) / h as f64;
                for &(bw, bh) in cell {
                    if !(bw > 0.0 && bh > 0.0) {
                        return Err(Error::Contract("anchor sizes must be positive".into()));
                    }
                    out.push(Anchor { bbox: BBox::new(cx, cy, bw, bh), source: k });
                }
            }
        }
    }
    Ok(out)
}

/// Regression targets of `gt` relative to `anchor`.
pub fn encode(gt: &BBox, anchor: &BBox) -> [f64; 4] {
    let (vc, vs) = BOX_VARIANCE;
    [
        (gt.cx - anchor.cx) / anchor.w / vc,
        (gt.cy - anchor.cy) / anchor.h / vc,
        (gt.w / anchor.w).ln() / vs,
        (gt.h / anchor.h).ln() / vs,
    ]
}

pub fn decode(t: &[f64; 4], anchor: &BBox) -> BBox {
    let (vc, vs) = BOX_VARIANCE;
    BBox {
        cx: anchor.cx + t[0] * vc * anchor.w,
        cy: anchor.cy + t[1] * vc * anchor.h,
        w: anchor.w * (t[2] * vs).exp(),
        h: anchor.h * (t[3] * vs).exp(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub class: usize,
    pub bbox: BBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class: usize,
    pub score: f64,
    pub bbox: BBox,
}

/// Training target of one anchor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Target {
    /// 0 for background.
    pub label: usize,
    pub offsets: [f64; 4],
    pub matched: Option<usize>,
}

/// Matches ground truth to anchors: each box first claims its best free
/// anchor (highest IoU pairs first), then every other anchor whose best IoU
/// reaches `match_thresh` takes that box.
pub fn assign_targets(anchors: &[Anchor], gt: &[GroundTruth], match_thresh: f64) -> Result<Vec<Target>> {
    if anchors.is_empty() {
        return Err(Error::Contract("cannot assign targets to an empty anchor set".into()));
    }
    let mut assigned: Vec<Option<usize>> = vec![None; anchors.len()];
    let ious: Vec<Vec<f64>> = gt.iter().map(|g| anchors.iter().map(|a| iou(&g.bbox, &a.bbox)).collect()).collect();
    let mut gt_done = vec![false; gt.len()];
    for _ in 0..gt.len().min(anchors.len()) {
        let mut best: Option<(usize, usize, f64)> = None;
        for (gi, row) in ious.iter().enumerate() {
            if gt_done[gi] {
                continue;
            }
            for (ai, &v) in row.iter().enumerate() {
                if assigned[ai].is_none() && best.is_none_or(|(_, _, b)| v > b) {
                    best = Some((gi, ai, v));
                }
            }
        }
        let Some((gi, ai, _)) = best else { break };
        assigned[ai] = Some(gi);
        gt_done[gi] = true;
    }
    for ai in 0..anchors.len() {
        if assigned[ai].is_some() {
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for (gi, row) in ious.iter().enumerate() {
            if best.is_none_or(|(_, b)| row[ai] > b) {
                best = Some((gi, row[ai]));
            }
        }
        if let Some((gi, v)) = best {
            if v >= match_thresh {
                assigned[ai] = Some(gi);
            }
        }
    }
    Ok(assigned
        .into_iter()
        .zip(anchors)
        .map(|(m, a)| match m {
            Some(gi) => Target { label: gt[gi].class, offsets: encode(&gt[gi].bbox, &a.bbox), matched: Some(gi) },
            None => Target { label: 0, offsets: [0.0; 4], matched: None },
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Selected negatives per positive.
    pub neg_ratio: usize,
    /// Multiplier on every selected negative's classification loss.
    pub neg_weight: f64,
    /// Negatives kept when an image has no positives.
    pub zero_positive_negatives: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { neg_ratio: 10, neg_weight: 0.3, zero_positive_negatives: 30 }
    }
}

/// Per-anchor loss weights for one image, before normalisation.
#[derive(Clone, Debug, PartialEq)]
pub struct LossPlan {
    pub labels: Vec<usize>,
    pub cls_weights: Vec<f64>,
    pub loc_targets: Vec<f64>,
    pub loc_weights: Vec<f64>,
    pub positives: usize,
    pub negatives: usize,
}

/// Chooses hard negatives from background anchors by descending
/// background cross-entropy. `cls_logits` holds one row of `labels_per_row`
/// logits per anchor.
pub fn plan_loss(cls_logits: &[f64], labels_per_row: usize, targets: &[Target], cfg: &LossConfig) -> Result<LossPlan> {
    if cls_logits.len() != targets.len() * labels_per_row {
        return Err(Error::Contract(format!(
            "{} logits for {} anchors of {labels_per_row} labels",
            cls_logits.len(),
            targets.len()
        )));
    }
    let positives = targets.iter().filter(|t| t.label > 0).count();
    let mut neg: Vec<(usize, f64)> = targets
        .iter()
        .enumerate()
        .filter(|(_, t)| t.label == 0)
        .map(|(i, _)| (i, -log_softmax_at(&cls_logits[i * labels_per_row..(i + 1) * labels_per_row], 0)))
        .collect();
    let quota = if positives == 0 { cfg.zero_positive_negatives } else { cfg.neg_ratio * positives };
    let take = quota.min(neg.len());
    neg.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut cls_weights = vec![0.0; targets.len()];
    let mut loc_weights = vec![0.0; targets.len()];
    for (i, t) in targets.iter().enumerate() {
        if t.label > 0 {
            cls_weights[i] = 1.0;
            loc_weights[i] = 1.0;
        }
    }
    for &(i, _) in &neg[..take] {
        cls_weights[i] = cfg.neg_weight;
    }
    Ok(LossPlan {
        labels: targets.iter().map(|t| t.label).collect(),
        cls_weights,
        loc_targets: targets.iter().flat_map(|t| t.offsets).collect(),
        loc_weights,
        positives,
        negatives: take,
    })
}

fn log_softmax_at(row: &[f64], k: usize) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row[k] - lse
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls_positive: f64,
    pub cls_negative: f64,
    pub localization: f64,
    pub positives: usize,
    pub negatives: usize,
}

/// Multibox loss of one image, normalised by `max(positives, 1)`.
pub fn multibox_loss(
    cls_logits: &[f64],
    loc: &[f64],
    labels_per_row: usize,
    targets: &[Target],
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    if loc.len() != targets.len() * 4 {
        return Err(Error::Contract(format!("{} box outputs for {} anchors", loc.len(), targets.len())));
    }
    let plan = plan_loss(cls_logits, labels_per_row, targets, cfg)?;
    let (mut pos, mut negl, mut locl) = (0.0, 0.0, 0.0);
    for (i, t) in targets.iter().enumerate() {
        let w = plan.cls_weights[i];
        if w == 0.0 {
            continue;
        }
        let ce = -log_softmax_at(&cls_logits[i * labels_per_row..(i + 1) * labels_per_row], t.label);
        if t.label > 0 {
            pos += ce;
            for j in 0..4 {
                locl += crate::ops::smooth_l1(loc[i * 4 + j] - t.offsets[j]).0;
            }
        } else {
            negl += w * ce;
        }
    }
    let norm = plan.positives.max(1) as f64;
    Ok(LossBreakdown {
        total: (pos + negl + locl) / norm,
        cls_positive: pos / norm,
        cls_negative: negl / norm,
        localization: locl / norm,
        positives: plan.positives,
        negatives: plan.negatives,
    })
}

/// Greedy per-class suppression; output sorted by descending score.
pub fn nms(detections: &[Detection], iou_thresh: f64, max_out: usize) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| detections[b].score.total_cmp(&detections[a].score).then(a.cmp(&b)));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        if kept.len() >= max_out {
            break;
        }
        let d = detections[i];
        if kept.iter().all(|k| k.class != d.class || iou(&k.bbox, &d.bbox) <= iou_thresh) {
            kept.push(d);
        }
    }
    kept
}

/// Inference knobs for turning head outputs into detections.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub score_thresh: f64,
    pub max_detections: usize,
    pub nms_iou: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig { score_thresh: 0.01, max_detections: 100, nms_iou: 0.5 }
    }
}

/// Softmax scores and decoded boxes for every anchor and object class above
/// the threshold, then NMS.
pub fn decode_detections(
    cls_logits: &[f64],
    loc: &[f64],
    anchors: &[Anchor],
    labels_per_row: usize,
    cfg: &DecodeConfig,
) -> Result<Vec<Detection>> {
    if cls_logits.len() != anchors.len() * labels_per_row || loc.len() != anchors.len() * 4 {
        return Err(Error::Contract("head outputs do not match the anchor set".into()));
    }
    let mut cands = Vec::new();
    for (i, a) in anchors.iter().enumerate() {
        let row = &cls_logits[i * labels_per_row..(i + 1) * labels_per_row];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let t = [loc[i * 4], loc[i * 4 + 1], loc[i * 4 + 2], loc[i * 4 + 3]];
        let bbox = decode(&t, &a.bbox).clipped();
        for (c, &v) in row.iter().enumerate().skip(1) {
            let p = (v - m).exp() / z;
            if p >= cfg.score_thresh {
                cands.push(Detection { class: c, score: p, bbox });
            }
        }
    }
    Ok(nms(&cands, cfg.nms_iou, cfg.max_detections))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: usize,
    pub gt_count: usize,
    /// `None` when the class has no ground truth.
    pub ap: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub per_class: Vec<ClassAp>,
    pub map: f64,
}

impl MapReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("class,gt_count,ap\n");
        for c in &self.per_class {
            let ap = c.ap.map_or_else(String::new, |v| format!("{v:.6}"));
            let _ = writeln!(s, "{},{},{}", c.class, c.gt_count, ap);
        }
        let _ = writeln!(s, "mAP,,{:.6}", self.map);
        s
    }
}

/// Greedy VOC matching of one class's detections (already in rank order).
/// Returns a true-positive flag per detection.
fn match_ranked(ranked: &[(usize, &Detection)], gts: &[Vec<GroundTruth>], class: usize, iou_thresh: f64) -> Vec<bool> {
    let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    ranked
        .iter()
        .map(|&(frame, d)| {
            let mut best: Option<(usize, f64)> = None;
            for (gi, g) in gts[frame].iter().enumerate() {
                if g.class != class {
                    continue;
                }
                let v = iou(&d.bbox, &g.bbox);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((gi, v));
                }
            }
            match best {
                Some((gi, v)) if v >= iou_thresh && !used[frame][gi] => {
                    used[frame][gi] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

fn ranked_for_class(dets: &[Vec<Detection>], class: usize) -> Vec<(usize, &Detection)> {
    let mut v: Vec<(usize, &Detection)> = dets
        .iter()
        .enumerate()
        .flat_map(|(f, ds)| ds.iter().filter(|d| d.class == class).map(move |d| (f, d)))
        .collect();
    v.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));
    v
}

/// Area under the monotone precision envelope, over recall points.
fn envelope_area(points: &[(f64, f64)]) -> f64 {
    let mut env: Vec<f64> = points.iter().map(|p| p.1).collect();
    for i in (0..env.len().saturating_sub(1)).rev() {
        env[i] = env[i].max(env[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (i, &(r, _)) in points.iter().enumerate() {
        ap += (r - prev_r) * env[i];
        prev_r = r;
    }
    ap
}

/// All-point-interpolated AP per class and their mean over classes that
/// have ground truth. Detections sharing a score enter the PR curve together.
pub fn evaluate_map(
    dets: &[Vec<Detection>],
    gts: &[Vec<GroundTruth>],
    num_classes: usize,
    iou_thresh: f64,
) -> Result<MapReport> {
    if dets.len() != gts.len() {
        return Err(Error::Contract(format!("{} detection frames vs {} ground-truth frames", dets.len(), gts.len())));
    }
    let mut per_class = Vec::with_capacity(num_classes);
    for class in 1..=num_classes {
        let gt_count = gts.iter().flatten().filter(|g| g.class == class).count();
        if gt_count == 0 {
            per_class.push(ClassAp { class, gt_count, ap: None });
            continue;
        }
        let ranked = ranked_for_class(dets, class);
        let tp = match_ranked(&ranked, gts, class, iou_thresh);
        let mut points = Vec::new();
        let mut hits = 0usize;
        for i in 0..ranked.len() {
            hits += tp[i] as usize;
            let block_end = i + 1 == ranked.len() || ranked[i + 1].1.score != ranked[i].1.score;
            if block_end {
                points.push((hits as f64 / gt_count as f64, hits as f64 / (i + 1) as f64));
            }
        }
        per_class.push(ClassAp { class, gt_count, ap: Some(envelope_area(&points)) });
    }
    let aps: Vec<f64> = per_class.iter().filter_map(|c| c.ap).collect();
    let map = if aps.is_empty() { 0.0 } else { aps.iter().sum::<f64>() / aps.len() as f64 };
    Ok(MapReport { per_class, map })
}

/// One window of `len` consecutive frames per video (the whole video when
/// shorter), placed uniformly at random.
pub fn select_minival<R: Rng + ?Sized>(video_lengths: &[usize], len: usize, rng: &mut R) -> Vec<Range<usize>> {
    video_lengths
        .iter()
        .map(|&n| {
            if n <= len {
                0..n
            } else {
                let s = rng.gen_range(0..=n - len);
                s..s + len
            }
        })
        .collect()
}

/// `frame_id class score cx cy w h` per line.
pub fn write_detections(frames: &[Vec<Detection>]) -> String {
    let mut s = String::new();
    for (f, ds) in frames.iter().enumerate() {
        for d in ds {
            let b = d.bbox;
            let _ = writeln!(s, "{f} {} {} {} {} {} {}", d.class, d.score, b.cx, b.cy, b.w, b.h);
        }
    }
    s
}

/// Ground truth in the detection line format with score 1.
pub fn write_ground_truth(frames: &[Vec<GroundTruth>]) -> String {
    let as_dets: Vec<Vec<Detection>> = frames
        .iter()
        .map(|g| g.iter().map(|g| Detection { class: g.class, score: 1.0, bbox: g.bbox }).collect())
        .collect();
    write_detections(&as_dets)
}

/// Parses the line format; `frames` fixes the number of frames (frames
/// without lines are empty).
pub fn read_detections(text: &str, frames: usize) -> Result<Vec<Vec<Detection>>> {
    let mut out = vec![Vec::new(); frames];
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let perr = |msg: String| Error::Parse { line: i + 1, msg };
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 7 {
            return Err(perr(format!("expected 7 fields, found {}", f.len())));
        }
        let frame: usize = f[0].parse().map_err(|_| perr(format!("bad frame id `{}`", f[0])))?;
        let class: usize = f[1].parse().map_err(|_| perr(format!("bad class `{}`", f[1])))?;
        let nums: Vec<f64> = f[2..]
            .iter()
            .map(|v| v.parse::<f64>().map_err(|_| perr(format!("bad number `{v}`"))))
            .collect::<Result<_>>()?;
        if frame >= frames {
            return Err(perr(format!("frame {frame} beyond {frames} frames")));
        }
        out[frame].push(Detection { class, score: nums[0], bbox: BBox::new(nums[1], nums[2], nums[3], nums[4]) });
    }
    Ok(out)
}

pub fn read_ground_truth(text: &str, frames: usize) -> Result<Vec<Vec<GroundTruth>>> {
    Ok(read_detections(text, frames)?
        .into_iter()
        .map(|ds| ds.into_iter().map(|d| GroundTruth { class: d.class, bbox: d.bbox }).collect())
        .collect())
}

/// Number of frames referenced by a line-format file.
pub fn frame_count(text: &str) -> usize {
    text.lines().filter_map(|l| l.split_whitespace().next()?.parse::<usize>().ok()).map(|f| f + 1).max().unwrap_or(0)
}
