//! Single-scale inference: per-detector proposals and NMS, ROI
//! classification, cross-detector aggregation, and the final suppression.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geometry::{iou, Box};
use crate::model::layers::sigmoid;
use crate::model::loss::decode_deltas;
use crate::model::net::{image_to_tensor, Model, RpnCache};
use crate::sampler::AnchorSet;
use crate::synthdata::{resize_longest, AnnotatedImage};

/// A scored box tagged with the detector that produced it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Detection {
    pub bbox: Box,
    pub score: f64,
    pub detector_id: usize,
}

/// One serialized detection line: `{image_id, x, y, w, h, score, detector_id}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub score: f64,
    pub detector_id: usize,
}

impl DetectionRecord {
    pub fn new(image_id: &str, d: &Detection) -> Self {
        DetectionRecord {
            image_id: image_id.to_string(),
            x: d.bbox.x,
            y: d.bbox.y,
            w: d.bbox.w,
            h: d.bbox.h,
            score: d.score,
            detector_id: d.detector_id,
        }
    }

    pub fn bbox(&self) -> Box {
        Box::new(self.x, self.y, self.w, self.h)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Train,
    Test,
}

/// Inference-time knobs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    /// Images are rescaled so the longer side never exceeds this.
    pub longest_side_cap: usize,
    pub proposal_budget_train: usize,
    pub proposal_budget_test: usize,
    pub proposal_nms: f64,
    pub final_nms: f64,
    /// Detections below this score are dropped after the final NMS.
    pub score_floor: f64,
    /// Top-k kept before proposal NMS, as a multiple of the budget.
    pub prenms_factor: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            longest_side_cap: 1300,
            proposal_budget_train: 2000,
            proposal_budget_test: 500,
            proposal_nms: 0.7,
            final_nms: 0.3,
            score_floor: 0.05,
            prenms_factor: 3,
        }
    }
}

impl InferenceConfig {
    pub fn budget(&self, phase: Phase) -> usize {
        match phase {
            Phase::Train => self.proposal_budget_train,
            Phase::Test => self.proposal_budget_test,
        }
    }

    pub fn validate(&self) -> Result<()> {
        use crate::error::Error;
        if self.proposal_budget_train == 0 || self.proposal_budget_test == 0 {
            return Err(Error::invalid("proposal budgets must be positive"));
        }
        for (name, v) in [("proposal_nms", self.proposal_nms), ("final_nms", self.final_nms)] {
            if !(v > 0.0 && v < 1.0) {
                return Err(Error::invalid(format!("{name} must lie in (0, 1)")));
            }
        }
        if self.longest_side_cap == 0 {
            return Err(Error::invalid("longest side cap must be positive"));
        }
        Ok(())
    }
}

/// Greedy non-maximum suppression: boxes are visited by descending score
/// (ties broken by smaller area, then input order) and any box overlapping a
/// kept box with IoU strictly above the threshold is suppressed.
pub fn nms(detections: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        let da = &detections[a];
        let db = &detections[b];
        db.score
            .partial_cmp(&da.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(da.bbox.area().partial_cmp(&db.bbox.area()).unwrap_or(std::cmp::Ordering::Equal))
            .then(a.cmp(&b))
    });
    let mut kept: Vec<Detection> = Vec::new();
    for &i in &order {
        let cand = &detections[i];
        if kept.iter().all(|k| iou(&k.bbox, &cand.bbox) <= iou_threshold) {
            kept.push(*cand);
        }
    }
    kept
}

fn clip_box(b: &Box, w: f64, h: f64) -> Option<Box> {
    let x0 = b.x.max(0.0);
    let y0 = b.y.max(0.0);
    let x1 = b.right().min(w);
    let y1 = b.bottom().min(h);
    (x1 - x0 >= 1.0 && y1 - y0 >= 1.0).then(|| Box::new(x0, y0, x1 - x0, y1 - y0))
}

/// Decodes every anchor's objectness and box delta from dense RPN outputs.
/// Output order matches the anchor set's (height, row, col) order.
pub fn decode_rpn_outputs(cache: &RpnCache, anchors: &AnchorSet) -> Vec<(Box, f64)> {
    let (gh, gw) = (anchors.grid_h, anchors.grid_w);
    debug_assert_eq!(cache.obj_out.shape(), &[anchors.heights.len(), gh, gw]);
    let obj = cache.obj_out.data();
    let reg = cache.reg_out.data();
    let plane = gh * gw;
    let mut out = Vec::with_capacity(anchors.len());
    for a in 0..anchors.heights.len() {
        for y in 0..gh {
            for x in 0..gw {
                let idx = (a * gh + y) * gw + x;
                let score = sigmoid(obj[idx]);
                let deltas = [
                    reg[(a * 4) * plane + y * gw + x],
                    reg[(a * 4 + 1) * plane + y * gw + x],
                    reg[(a * 4 + 2) * plane + y * gw + x],
                    reg[(a * 4 + 3) * plane + y * gw + x],
                ];
                let anchor = anchors.anchor_box(y, x, a);
                out.push((decode_deltas(&anchor, &deltas), score));
            }
        }
    }
    out
}

/// Anchor deltas to budgeted proposals: decode, clip to the image, keep the
/// top scores, suppress at the proposal NMS threshold, truncate to budget.
pub fn propose(
    cache: &RpnCache,
    anchors: &AnchorSet,
    image_w: f64,
    image_h: f64,
    config: &InferenceConfig,
    phase: Phase,
    detector_id: usize,
) -> Vec<Detection> {
    let mut cands: Vec<Detection> = decode_rpn_outputs(cache, anchors)
        .into_iter()
        .filter_map(|(b, score)| {
            clip_box(&b, image_w, image_h).map(|bbox| Detection { bbox, score, detector_id })
        })
        .collect();
    let budget = config.budget(phase);
    let prenms = budget.saturating_mul(config.prenms_factor.max(1));
    cands.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.bbox.area().partial_cmp(&b.bbox.area()).unwrap_or(std::cmp::Ordering::Equal))
    });
    cands.truncate(prenms);
    let mut kept = nms(&cands, config.proposal_nms);
    kept.truncate(budget);
    kept
}

/// Runs the full single-scale pipeline over one image for a set of models
/// (one joint model, or one model per range for a naive ensemble). Detector
/// ids are global across models. Detections come back in the original
/// image's coordinates, sorted by descending score.
pub fn detect(models: &[&Model], image: &AnnotatedImage, config: &InferenceConfig) -> Result<Vec<Detection>> {
    config.validate()?;
    let resized = resize_longest(image, config.longest_side_cap);
    let scale_back = image.width as f64 / resized.width as f64;
    let tensor = image_to_tensor(&resized);

    let mut all: Vec<Detection> = Vec::new();
    let mut detector_offset = 0;
    for model in models {
        let max_stride = model.spec.backbone.max_stride() as usize;
        let padded_w = resized.width.div_ceil(max_stride) * max_stride;
        let padded_h = resized.height.div_ceil(max_stride) * max_stride;
        let cache = model.forward_backbone(&tensor)?;
        for d in 0..model.n_detectors() {
            let binding = model.spec.bindings[d];
            let curr_map = cache.stage_output(binding.curr_stage);
            let prev_map = cache.stage_output(binding.prev_stage);
            let rpn_cache = model.detectors[d].rpn.forward(curr_map);
            let anchors = model.anchor_set(d, padded_w, padded_h);
            let proposals = propose(
                &rpn_cache,
                &anchors,
                resized.width as f64,
                resized.height as f64,
                config,
                Phase::Test,
                detector_offset + d,
            );
            let strides = model.detector_strides(d);
            for p in proposals {
                let roi = model.detectors[d].cls.forward(prev_map, curr_map, strides, &p.bbox)?;
                let refined = decode_deltas(&p.bbox, &roi.deltas);
                if let Some(bbox) = clip_box(&refined, resized.width as f64, resized.height as f64) {
                    all.push(Detection {
                        bbox,
                        score: sigmoid(roi.score_logit),
                        detector_id: detector_offset + d,
                    });
                }
            }
        }
        detector_offset += model.n_detectors();
    }

    let mut final_dets = nms(&all, config.final_nms);
    final_dets.retain(|d| d.score >= config.score_floor);
    for d in &mut final_dets {
        d.bbox = Box::new(
            d.bbox.x * scale_back,
            d.bbox.y * scale_back,
            d.bbox.w * scale_back,
            d.bbox.h * scale_back,
        );
    }
    Ok(final_dets)
}

/// Writes detections as JSON lines.
pub fn save_detections(path: &std::path::Path, records: &[DetectionRecord]) -> Result<()> {
    use std::io::Write;
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        writeln!(f, "{}", serde_json::to_string(r)?)?;
    }
    Ok(())
}

pub fn load_detections(path: &std::path::Path) -> Result<Vec<DetectionRecord>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(line).map_err(|e| crate::error::Error::Parse {
            file: path.display().to_string(),
            line: lineno + 1,
            msg: e.to_string(),
        })?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(x: f64, y: f64, w: f64, h: f64, score: f64) -> Detection {
        Detection { bbox: Box::new(x, y, w, h), score, detector_id: 0 }
    }

    /// Quadratic reference: walk ranks in order, suppressing forward.
    fn nms_reference(dets: &[Detection], thr: f64) -> Vec<Detection> {
        let mut order: Vec<usize> = (0..dets.len()).collect();
        order.sort_by(|&a, &b| {
            dets[b]
                .score
                .partial_cmp(&dets[a].score)
                .unwrap()
                .then(dets[a].bbox.area().partial_cmp(&dets[b].bbox.area()).unwrap())
                .then(a.cmp(&b))
        });
        let mut suppressed = vec![false; dets.len()];
        let mut kept = Vec::new();
        for (rank, &i) in order.iter().enumerate() {
            if suppressed[i] {
                continue;
            }
            kept.push(dets[i]);
            for &j in &order[rank + 1..] {
                if !suppressed[j] && iou(&dets[i].bbox, &dets[j].bbox) > thr {
                    suppressed[j] = true;
                }
            }
        }
        kept
    }

    #[test]
    fn nms_examples() {
        let single = vec![det(0.0, 0.0, 10.0, 10.0, 0.7)];
        assert_eq!(nms(&single, 0.3), single);

        let pair = vec![det(0.0, 0.0, 10.0, 10.0, 0.9), det(0.0, 0.0, 10.0, 10.0, 0.8)];
        let kept = nms(&pair, 0.3);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);
    }

    #[test]
    fn nms_matches_quadratic_reference_on_random_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        for case in 0..100 {
            let n = rng.random_range(1..=50);
            let dets: Vec<Detection> = (0..n)
                .map(|_| {
                    det(
                        rng.random_range(0.0..80.0),
                        rng.random_range(0.0..80.0),
                        rng.random_range(2.0..30.0),
                        rng.random_range(2.0..30.0),
                        // Coarse scores provoke ties.
                        (rng.random_range(0..20) as f64) / 20.0,
                    )
                })
                .collect();
            for thr in [0.3, 0.5, 0.7] {
                assert_eq!(nms(&dets, thr), nms_reference(&dets, thr), "case {case} thr {thr}");
            }
        }
    }

    #[test]
    fn nms_output_pairwise_iou_bounded() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let dets: Vec<Detection> = (0..60)
            .map(|_| {
                det(
                    rng.random_range(0.0..50.0),
                    rng.random_range(0.0..50.0),
                    rng.random_range(2.0..25.0),
                    rng.random_range(2.0..25.0),
                    rng.random_range(0.0..1.0),
                )
            })
            .collect();
        let kept = nms(&dets, 0.3);
        for i in 0..kept.len() {
            for j in i + 1..kept.len() {
                assert!(iou(&kept[i].bbox, &kept[j].bbox) <= 0.3);
            }
        }
    }

    #[test]
    fn clip_box_bounds() {
        let b = clip_box(&Box::new(-5.0, -5.0, 20.0, 20.0), 100.0, 100.0).unwrap();
        assert_eq!((b.x, b.y, b.w, b.h), (0.0, 0.0, 15.0, 15.0));
        let b = clip_box(&Box::new(90.0, 95.0, 20.0, 20.0), 100.0, 100.0).unwrap();
        assert_eq!((b.right(), b.bottom()), (100.0, 100.0));
        assert!(clip_box(&Box::new(200.0, 0.0, 10.0, 10.0), 100.0, 100.0).is_none());
    }

    #[test]
    fn detection_record_round_trip() {
        let rec = DetectionRecord::new("im_00003", &det(1.5, 2.5, 10.0, 12.0, 0.73));
        let line = serde_json::to_string(&rec).unwrap();
        let back: DetectionRecord = serde_json::from_str(&line).unwrap();
        assert_eq!(back, rec);

        let dir = std::env::temp_dir().join(format!("svdet_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("dets.jsonl");
        save_detections(&path, &[rec.clone()]).unwrap();
        assert_eq!(load_detections(&path).unwrap(), vec![rec]);
        std::fs::remove_dir_all(&dir).ok();
    }
}
