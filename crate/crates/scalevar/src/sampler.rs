//! Scale-routed sample assignment for training.
//!
//! Every detector trains only on ground truth whose height falls in its
//! range; everything else becomes an ignored class whose overlapping samples
//! are discarded outright. Negatives are drawn from a pool that balances
//! pure background against ill-aligned regions 1:1, and the classifier batch
//! can mine the hardest negatives by loss.

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, Box};
use crate::partition::{ScaleRange, SplitScheme};

/// IoU at or above which a sample matches an in-range ground truth.
pub const POSITIVE_IOU: f64 = 0.5;
/// IoU with an ignored-class ground truth at or above which a sample is discarded.
pub const DISCARD_IOU: f64 = 0.3;
/// In-range IoU band [ILL_LO, DISCARD_IOU) labels an ill-aligned negative.
pub const ILL_LO: f64 = 0.1;

/// Sample role in a training batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Positive,
    PureBackground,
    IllAligned,
    /// In-range overlap in [0.3, 0.5): excluded from batches entirely.
    Ignore,
    /// Overlaps an out-of-range ground truth too much to be a safe negative.
    Discard,
}

/// A region with its assigned role.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoiSample {
    pub bbox: Box,
    pub role: Role,
    /// Index into the in-range ground-truth list; present iff positive.
    pub matched_gt: Option<usize>,
    pub detector_id: usize,
}

/// Square anchors tiled over one detector's feature grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    /// At most 4 heights, geometrically spaced across the detector's range.
    pub heights: Vec<f64>,
    /// Feature stride of the detector; anchor centers sit on cell centers.
    pub stride: u32,
    pub grid_w: usize,
    pub grid_h: usize,
}

impl AnchorSet {
    /// Total anchors = heights x grid cells.
    pub fn len(&self) -> usize {
        self.heights.len() * self.grid_w * self.grid_h
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Anchor box for (row, col, height index), 1:1 aspect, centered on the cell.
    pub fn anchor_box(&self, row: usize, col: usize, height_idx: usize) -> Box {
        let s = self.stride as f64;
        let cx = (col as f64 + 0.5) * s;
        let cy = (row as f64 + 0.5) * s;
        let a = self.heights[height_idx];
        Box::new(cx - a / 2.0, cy - a / 2.0, a, a)
    }

    /// All anchors in (height, row, col) order, matching the dense RPN output layout.
    pub fn boxes(&self) -> Vec<Box> {
        let mut out = Vec::with_capacity(self.len());
        for hi in 0..self.heights.len() {
            for row in 0..self.grid_h {
                for col in 0..self.grid_w {
                    out.push(self.anchor_box(row, col, hi));
                }
            }
        }
        out
    }
}

/// Number of geometric anchor heights that keep the worst-case gap ratio
/// below 1.5, capped at 4.
pub fn anchor_count(range: &ScaleRange) -> usize {
    anchors_needed(range)
}

fn anchors_needed(range: &ScaleRange) -> usize {
    if range.hi <= range.lo {
        return 1;
    }
    let n = 1.0 + ((range.hi / range.lo).ln() / 1.5f64.ln() - 1e-9).ceil();
    (n as usize).clamp(1, 4)
}

/// Builds the anchor set for one detector: up to 4 square anchors with
/// heights geometrically spaced from `range.lo` to `range.hi`, one per
/// feature cell of an `image_w x image_h` input at the given stride.
pub fn make_anchors(range: &ScaleRange, stride: u32, image_w: usize, image_h: usize) -> Result<AnchorSet> {
    if stride == 0 {
        return Err(Error::invalid("anchor stride must be positive"));
    }
    let n = anchors_needed(range);
    let heights = if n == 1 {
        vec![range.lo.max(1.0)]
    } else {
        (0..n)
            .map(|i| range.lo * (range.hi / range.lo).powf(i as f64 / (n - 1) as f64))
            .collect()
    };
    Ok(AnchorSet {
        heights,
        stride,
        grid_w: image_w.div_ceil(stride as usize),
        grid_h: image_h.div_ceil(stride as usize),
    })
}

/// Ground truth split for one detector: indices of boxes whose height routes
/// to it, and indices of every other box (the ignored class, including
/// heights outside the whole target range).
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RoutedGt {
    pub in_range: Vec<usize>,
    pub ignored: Vec<usize>,
}

pub fn route_gt(gts: &[Box], scheme: &SplitScheme, detector_id: usize) -> RoutedGt {
    let mut out = RoutedGt::default();
    for (i, gt) in gts.iter().enumerate() {
        if scheme.route(gt.h) == Some(detector_id) {
            out.in_range.push(i);
        } else {
            out.ignored.push(i);
        }
    }
    out
}

/// Assigns a role to every ROI. Precedence: positive (in-range IoU >= 0.5,
/// matched to the argmax ground truth), then discard (ignored-class IoU >=
/// 0.3), then the in-range bands [0.3, 0.5) -> ignore, [0.1, 0.3) ->
/// ill-aligned, [0.0, 0.1) -> pure background.
pub fn label_rois(
    rois: &[Box],
    in_range_gts: &[Box],
    ignored_gts: &[Box],
    detector_id: usize,
) -> Vec<RoiSample> {
    rois.iter()
        .map(|roi| {
            let (max_in, argmax_in) = max_iou(roi, in_range_gts);
            let (max_ig, _) = max_iou(roi, ignored_gts);
            let (role, matched_gt) = if max_in >= POSITIVE_IOU {
                (Role::Positive, Some(argmax_in))
            } else if max_ig >= DISCARD_IOU {
                (Role::Discard, None)
            } else if max_in >= DISCARD_IOU {
                (Role::Ignore, None)
            } else if max_in >= ILL_LO {
                (Role::IllAligned, None)
            } else {
                (Role::PureBackground, None)
            };
            RoiSample {
                bbox: *roi,
                role,
                matched_gt,
                detector_id,
            }
        })
        .collect()
}

/// Anchor labeling for the proposal branch: [`label_rois`] plus promotion of
/// each in-range ground truth's best-overlapping anchor to positive, so every
/// target owns at least one anchor even when no anchor clears the 0.5 bar.
/// Anchors already discarded (ignored-class overlap) are never promoted.
pub fn label_anchors(
    anchors: &[Box],
    in_range_gts: &[Box],
    ignored_gts: &[Box],
    detector_id: usize,
) -> Vec<RoiSample> {
    let mut samples = label_rois(anchors, in_range_gts, ignored_gts, detector_id);
    const PROMOTE_FLOOR: f64 = 0.05;
    for (gi, gt) in in_range_gts.iter().enumerate() {
        let mut best = (PROMOTE_FLOOR, None);
        for (ai, anchor) in anchors.iter().enumerate() {
            let v = iou(anchor, gt);
            if v > best.0 {
                best = (v, Some(ai));
            }
        }
        if let Some(ai) = best.1 {
            let s = &mut samples[ai];
            if matches!(s.role, Role::PureBackground | Role::IllAligned | Role::Ignore) {
                s.role = Role::Positive;
                s.matched_gt = Some(gi);
            }
        }
    }
    samples
}

fn max_iou(roi: &Box, gts: &[Box]) -> (f64, usize) {
    let mut best = (0.0, 0);
    for (i, gt) in gts.iter().enumerate() {
        let v = iou(roi, gt);
        if v > best.0 {
            best = (v, i);
        }
    }
    best
}

/// Batch sampling parameters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchSpec {
    pub size: usize,
    /// Fraction of the batch reserved for positives, in (0, 1).
    pub positive_fraction: f64,
    pub hard_mining: bool,
    pub seed: u64,
}

impl BatchSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.positive_fraction > 0.0 && self.positive_fraction < 1.0) {
            return Err(Error::invalid("positive fraction must lie in (0, 1)"));
        }
        if self.size == 0 {
            return Err(Error::invalid("batch size must be positive"));
        }
        Ok(())
    }
}

/// Balanced negative pool: k pure-background plus k ill-aligned indices,
/// k = min of the two counts, each side subsampled uniformly under `rng`.
/// Both sub-pools empty (or either one) yields an empty pool; the caller
/// decides whether that warrants a warning or a skipped step.
pub fn build_negative_pool(samples: &[RoiSample], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut pure: Vec<usize> = Vec::new();
    let mut ill: Vec<usize> = Vec::new();
    for (i, s) in samples.iter().enumerate() {
        match s.role {
            Role::PureBackground => pure.push(i),
            Role::IllAligned => ill.push(i),
            _ => {}
        }
    }
    let k = pure.len().min(ill.len());
    if k == 0 {
        return Vec::new();
    }
    pure.shuffle(rng);
    ill.shuffle(rng);
    let mut pool = Vec::with_capacity(2 * k);
    pool.extend_from_slice(&pure[..k]);
    pool.extend_from_slice(&ill[..k]);
    pool
}

/// Samples a training batch: positives up to `positive_fraction * size`,
/// remainder filled from the balanced negative pool — by descending loss
/// when hard mining, uniformly otherwise. Pure function of
/// `(samples, spec, losses)`.
pub fn sample_batch(
    samples: &[RoiSample],
    spec: &BatchSpec,
    losses: Option<&[f64]>,
) -> Result<Vec<usize>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut positives: Vec<usize> = samples
        .iter()
        .enumerate()
        .filter(|(_, s)| s.role == Role::Positive)
        .map(|(i, _)| i)
        .collect();
    let pool = build_negative_pool(samples, &mut rng);
    if positives.is_empty() && pool.is_empty() {
        return Err(Error::EmptyBatch);
    }

    let quota = (spec.positive_fraction * spec.size as f64).round() as usize;
    let n_pos = positives.len().min(quota);
    positives.shuffle(&mut rng);
    positives.truncate(n_pos);

    let n_neg = (spec.size - n_pos).min(pool.len());
    let negatives: Vec<usize> = if spec.hard_mining {
        let losses = losses.ok_or_else(|| {
            Error::invalid("hard mining requires per-sample losses for all negatives")
        })?;
        if losses.len() != samples.len() {
            return Err(Error::invalid("loss vector length must match sample count"));
        }
        let mut ranked = pool;
        // Descending loss, index as the deterministic tie-break.
        ranked.sort_by(|&a, &b| {
            losses[b].partial_cmp(&losses[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
        });
        ranked.truncate(n_neg);
        ranked
    } else {
        let mut shuffled = pool;
        shuffled.shuffle(&mut rng);
        shuffled.truncate(n_neg);
        shuffled
    };

    let mut batch = positives;
    batch.extend(negatives);
    Ok(batch)
}

/// Per-detector batch composition counts, emitted as one structured log line.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchStats {
    pub detector_id: usize,
    pub positives: usize,
    pub pure_background: usize,
    pub ill_aligned: usize,
}

impl BatchStats {
    pub fn from_batch(samples: &[RoiSample], batch: &[usize], detector_id: usize) -> Self {
        let mut stats = BatchStats {
            detector_id,
            positives: 0,
            pure_background: 0,
            ill_aligned: 0,
        };
        for &i in batch {
            match samples[i].role {
                Role::Positive => stats.positives += 1,
                Role::PureBackground => stats.pure_background += 1,
                Role::IllAligned => stats.ill_aligned += 1,
                Role::Ignore | Role::Discard => {
                    debug_assert!(false, "ignore/discard sample leaked into a batch")
                }
            }
        }
        stats
    }

    pub fn to_log_line(self) -> String {
        format!(
            "batch_stats {}",
            serde_json::to_string(&self).expect("stats serialize")
        )
    }
}

/// Deterministically jittered copies of a ground-truth box, used to seed the
/// classifier with well-aligned positives.
pub fn jitter_box(gt: &Box, count: usize, rng: &mut ChaCha8Rng) -> Vec<Box> {
    (0..count)
        .map(|_| {
            let dx = rng.random_range(-0.12..0.12) * gt.w;
            let dy = rng.random_range(-0.12..0.12) * gt.h;
            let sw = rng.random_range(0.88..1.14);
            let sh = rng.random_range(0.88..1.14);
            Box::new(gt.x + dx, gt.y + dy, (gt.w * sw).max(1.0), (gt.h * sh).max(1.0))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::partition::named_scheme;
    use proptest::prelude::*;

    fn b(x: f64, y: f64, w: f64, h: f64) -> Box {
        Box::new(x, y, w, h)
    }

    #[test]
    fn anchors_geometric_spacing() {
        let r = ScaleRange::new(40.0, 140.0).unwrap();
        let a = make_anchors(&r, 16, 512, 512).unwrap();
        assert_eq!(a.heights.len(), 4);
        // lo * (hi/lo)^(i/3), computed independently.
        let expected: Vec<f64> = (0..4).map(|i| 40.0 * 3.5f64.powf(i as f64 / 3.0)).collect();
        for (got, want) in a.heights.iter().zip(&expected) {
            assert!((got - want).abs() < 1e-9);
        }
        assert!((a.heights[1] - 60.73).abs() < 0.01);
        assert!((a.heights[2] - 92.21).abs() < 0.01);

        let degenerate = ScaleRange { lo: 10.0, hi: 10.0 };
        let a = make_anchors(&degenerate, 8, 64, 64).unwrap();
        assert_eq!(a.heights, vec![10.0]);

        let a = make_anchors(&r, 16, 512, 512).unwrap();
        assert_eq!(a.grid_w * a.grid_h, 32 * 32);
        assert_eq!(a.len(), 32 * 32 * 4);
    }

    #[test]
    fn anchors_stay_in_range_and_capped() {
        for (lo, hi) in [(6.0, 16.0), (16.0, 48.0), (48.0, 96.0), (10.0, 1300.0)] {
            let r = ScaleRange::new(lo, hi).unwrap();
            let a = make_anchors(&r, 4, 64, 64).unwrap();
            assert!(a.heights.len() <= 4 && !a.heights.is_empty());
            for h in &a.heights {
                assert!(*h >= lo - 1e-9 && *h <= hi + 1e-9);
            }
        }
    }

    #[test]
    fn route_gt_examples() {
        let scheme = named_scheme("three-splits").unwrap();
        let gts = vec![b(0.0, 0.0, 12.0, 12.0), b(0.0, 0.0, 80.0, 80.0), b(0.0, 0.0, 300.0, 300.0)];
        let routed = route_gt(&gts, &scheme, 0);
        assert_eq!(routed.in_range, vec![0]);
        assert_eq!(routed.ignored, vec![1, 2]);

        assert_eq!(route_gt(&[], &scheme, 0), RoutedGt::default());

        let small = vec![b(0.0, 0.0, 9.0, 9.0)];
        for d in 0..3 {
            assert!(route_gt(&small, &scheme, d).in_range.is_empty());
            assert_eq!(route_gt(&small, &scheme, d).ignored, vec![0]);
        }
    }

    #[test]
    fn label_rois_role_bands() {
        let gt = b(0.0, 0.0, 20.0, 20.0);
        // IoU 0.6 with an in-range gt: positive.
        let roi_pos = b(0.0, 0.0, 20.0, 15.0); // IoU 300/400 = 0.75
        let s = label_rois(&[roi_pos], &[gt], &[], 0);
        assert_eq!(s[0].role, Role::Positive);
        assert_eq!(s[0].matched_gt, Some(0));

        // High overlap with an ignored gt only: discard.
        let s = label_rois(&[roi_pos], &[], &[gt], 0);
        assert_eq!(s[0].role, Role::Discard);
        assert_eq!(s[0].matched_gt, None);

        // IoU 0.2 band with in-range: ill-aligned.
        // Shift so intersection 10x20=200, union 600 => 1/3... use offset for ~0.2:
        let roi_ill = b(14.0, 0.0, 20.0, 20.0); // inter 6*20=120, union 680 => 0.176
        let s = label_rois(&[roi_ill], &[gt], &[], 0);
        assert_eq!(s[0].role, Role::IllAligned);

        // Far away: pure background.
        let s = label_rois(&[b(100.0, 100.0, 20.0, 20.0)], &[gt], &[], 0);
        assert_eq!(s[0].role, Role::PureBackground);

        // In-range band [0.3, 0.5): ignore.
        let roi_mid = b(8.0, 0.0, 20.0, 20.0); // inter 12*20=240, union 560 => 0.4286
        let s = label_rois(&[roi_mid], &[gt], &[], 0);
        assert_eq!(s[0].role, Role::Ignore);

        // Discard outranks the in-range negative bands.
        let ignored = b(8.0, 0.0, 20.0, 20.0);
        let s = label_rois(&[roi_mid], &[b(100.0, 0.0, 20.0, 20.0)], &[ignored], 0);
        assert_eq!(s[0].role, Role::Discard);
    }

    #[test]
    fn label_anchors_promotes_best_anchor() {
        // A gt too small for any anchor to clear IoU 0.5 still gets one
        // positive anchor: its argmax.
        let gt = b(33.0, 33.0, 6.0, 6.0);
        let range = ScaleRange::new(6.0, 16.0).unwrap();
        let anchors = make_anchors(&range, 16, 64, 64).unwrap().boxes();
        let labeled = label_anchors(&anchors, &[gt], &[], 0);
        let positives: Vec<_> = labeled.iter().filter(|s| s.role == Role::Positive).collect();
        assert_eq!(positives.len(), 1);
        assert_eq!(positives[0].matched_gt, Some(0));
        // Plain labeling finds none.
        let plain = label_rois(&anchors, &[gt], &[], 0);
        assert!(plain.iter().all(|s| s.role != Role::Positive));
    }

    #[test]
    fn negative_pool_examples() {
        let mk = |role: Role| RoiSample {
            bbox: b(0.0, 0.0, 1.0, 1.0),
            role,
            matched_gt: None,
            detector_id: 0,
        };
        let mut samples = vec![mk(Role::PureBackground); 100];
        samples.extend(vec![mk(Role::IllAligned); 40]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pool = build_negative_pool(&samples, &mut rng);
        assert_eq!(pool.len(), 80);
        let pure = pool.iter().filter(|&&i| samples[i].role == Role::PureBackground).count();
        assert_eq!(pure, 40);

        let only_pure = vec![mk(Role::PureBackground); 10];
        assert!(build_negative_pool(&only_pure, &mut rng).is_empty());

        let mut even = vec![mk(Role::PureBackground); 7];
        even.extend(vec![mk(Role::IllAligned); 7]);
        assert_eq!(build_negative_pool(&even, &mut rng).len(), 14);
    }

    #[test]
    fn sample_batch_examples() {
        let mk = |role: Role| RoiSample {
            bbox: b(0.0, 0.0, 1.0, 1.0),
            role,
            matched_gt: if role == Role::Positive { Some(0) } else { None },
            detector_id: 0,
        };
        // Hard mining picks the highest-loss negatives.
        let samples = vec![mk(Role::PureBackground), mk(Role::IllAligned), mk(Role::PureBackground), mk(Role::IllAligned)];
        let losses = vec![0.9, 0.1, 0.5, 0.45];
        let spec = BatchSpec { size: 3, positive_fraction: 0.34, hard_mining: true, seed: 3 };
        let batch = sample_batch(&samples, &spec, Some(&losses)).unwrap();
        assert!(batch.contains(&0) && batch.contains(&2));

        // Quota arithmetic: 0.25 * 16 = 4 positives even with 10 available.
        let mut samples = vec![mk(Role::Positive); 10];
        samples.extend(vec![mk(Role::PureBackground); 20]);
        samples.extend(vec![mk(Role::IllAligned); 20]);
        let spec = BatchSpec { size: 16, positive_fraction: 0.25, hard_mining: false, seed: 9 };
        let batch = sample_batch(&samples, &spec, None).unwrap();
        assert_eq!(batch.len(), 16);
        let pos = batch.iter().filter(|&&i| samples[i].role == Role::Positive).count();
        assert_eq!(pos, 4);

        // Determinism under the seed.
        assert_eq!(batch, sample_batch(&samples, &spec, None).unwrap());

        // Nothing to sample at all.
        let empty = vec![mk(Role::Ignore), mk(Role::Discard)];
        assert!(matches!(sample_batch(&empty, &spec, None), Err(Error::EmptyBatch)));
    }

    #[test]
    fn batch_stats_log_line_round_trips() {
        let stats = BatchStats { detector_id: 2, positives: 4, pure_background: 6, ill_aligned: 6 };
        let line = stats.to_log_line();
        let json = line.strip_prefix("batch_stats ").unwrap();
        let back: BatchStats = serde_json::from_str(json).unwrap();
        assert_eq!(back, stats);
    }

    proptest! {
        // Role assignment is total and exclusive, and no batch ever contains
        // an ignore or discard sample.
        #[test]
        fn roles_partition_and_batches_clean(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gen_box = |rng: &mut ChaCha8Rng| {
                Box::new(
                    rng.random_range(0.0..80.0),
                    rng.random_range(0.0..80.0),
                    rng.random_range(4.0..40.0),
                    rng.random_range(4.0..40.0),
                )
            };
            let in_range: Vec<Box> = (0..3).map(|_| gen_box(&mut rng)).collect();
            let ignored: Vec<Box> = (0..3).map(|_| gen_box(&mut rng)).collect();
            let rois: Vec<Box> = (0..60).map(|_| gen_box(&mut rng)).collect();
            let samples = label_rois(&rois, &in_range, &ignored, 0);
            prop_assert_eq!(samples.len(), rois.len());
            for s in &samples {
                prop_assert_eq!(s.matched_gt.is_some(), s.role == Role::Positive);
            }
            let spec = BatchSpec { size: 12, positive_fraction: 0.25, hard_mining: false, seed };
            match sample_batch(&samples, &spec, None) {
                Ok(batch) => {
                    for &i in &batch {
                        prop_assert!(samples[i].role != Role::Ignore);
                        prop_assert!(samples[i].role != Role::Discard);
                    }
                }
                Err(Error::EmptyBatch) => {}
                Err(e) => return Err(TestCaseError::fail(format!("unexpected error: {e}"))),
            }
        }

        // Routing sends every ground truth to at most one detector, so no
        // box can be a positive for two detectors.
        #[test]
        fn routed_positives_disjoint(seed in 0u64..200) {
            let scheme = named_scheme("three-splits").unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let gts: Vec<Box> = (0..8)
                .map(|_| {
                    let h = rng.random_range(5.0..1400.0);
                    Box::new(rng.random_range(0.0..500.0), rng.random_range(0.0..500.0), h * 0.8, h)
                })
                .collect();
            let mut owners = vec![0usize; gts.len()];
            for d in 0..scheme.len() {
                for &gi in &route_gt(&gts, &scheme, d).in_range {
                    owners[gi] += 1;
                }
            }
            for (gi, &n) in owners.iter().enumerate() {
                let in_target = scheme.route(gts[gi].h).is_some();
                prop_assert_eq!(n, usize::from(in_target));
            }
        }
    }
}
