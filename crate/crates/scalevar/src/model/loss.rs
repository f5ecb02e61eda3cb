//! Box-delta parameterization and the detection loss.

use serde::{Deserialize, Serialize};

use crate::geometry::Box;
use crate::model::layers::{bce_with_logit, smooth_l1};

/// Log-scale deltas of `gt` relative to `base` (anchor or proposal):
/// `(dx, dy, dw, dh)` with centers normalized by the base size and sizes in
/// log ratio.
pub fn encode_deltas(base: &Box, gt: &Box) -> [f64; 4] {
    let (bcx, bcy) = base.center();
    let (gcx, gcy) = gt.center();
    [
        (gcx - bcx) / base.w,
        (gcy - bcy) / base.h,
        (gt.w / base.w).ln(),
        (gt.h / base.h).ln(),
    ]
}

/// Inverse of [`encode_deltas`]; the zero delta decodes to the base itself.
pub fn decode_deltas(base: &Box, deltas: &[f64; 4]) -> Box {
    let (bcx, bcy) = base.center();
    let cx = bcx + deltas[0] * base.w;
    let cy = bcy + deltas[1] * base.h;
    let w = base.w * deltas[2].exp();
    let h = base.h * deltas[3].exp();
    Box::new(cx - w / 2.0, cy - h / 2.0, w, h)
}

/// Loss decomposition for one sampled batch: mean binary cross-entropy over
/// all samples plus `lambda` times the mean smooth-L1 over positives.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub class_term: f64,
    pub box_term: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn add(&mut self, other: &LossBreakdown) {
        self.class_term += other.class_term;
        self.box_term += other.box_term;
        self.total += other.total;
    }
}

/// One scored sample in a batch: the classification logit with its 0/1
/// target, and for positives the predicted and target box deltas.
pub struct BatchSample {
    pub logit: f64,
    pub target: f64,
    pub boxes: Option<([f64; 4], [f64; 4])>,
}

/// Computes the batch loss and, through `grads`, the gradient of the total
/// with respect to every logit and predicted delta. The box term is the mean
/// over positive samples of the summed per-coordinate smooth-L1 (an empty
/// positive set contributes zero).
pub fn batch_loss(samples: &[BatchSample], lambda: f64) -> (LossBreakdown, Vec<SampleGrad>) {
    let n = samples.len().max(1) as f64;
    let n_pos = samples.iter().filter(|s| s.boxes.is_some()).count().max(1) as f64;
    let mut out = LossBreakdown::default();
    let mut grads = Vec::with_capacity(samples.len());
    for s in samples {
        let (cls_loss, dlogit) = bce_with_logit(s.logit, s.target);
        out.class_term += cls_loss / n;
        let mut g = SampleGrad { dlogit: dlogit / n, ddeltas: [0.0; 4] };
        if let Some((pred, target)) = &s.boxes {
            for d in 0..4 {
                let (l, dl) = smooth_l1(pred[d] - target[d]);
                out.box_term += l / n_pos;
                g.ddeltas[d] = lambda * dl / n_pos;
            }
        }
        grads.push(g);
    }
    out.total = out.class_term + lambda * out.box_term;
    (out, grads)
}

/// Gradient of the batch total with respect to one sample's outputs.
#[derive(Clone, Copy, Debug, Default)]
pub struct SampleGrad {
    pub dlogit: f64,
    pub ddeltas: [f64; 4],
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_delta_decodes_to_base() {
        let base = Box::new(10.0, 20.0, 30.0, 40.0);
        let out = decode_deltas(&base, &[0.0; 4]);
        assert!((out.x - base.x).abs() < 1e-12);
        assert!((out.y - base.y).abs() < 1e-12);
        assert!((out.w - base.w).abs() < 1e-12);
        assert!((out.h - base.h).abs() < 1e-12);
    }

    #[test]
    fn log_deltas_double_the_box() {
        let base = Box::new(0.0, 0.0, 10.0, 10.0);
        let out = decode_deltas(&base, &[0.0, 0.0, 2f64.ln(), 2f64.ln()]);
        assert!((out.w - 20.0).abs() < 1e-12);
        assert!((out.h - 20.0).abs() < 1e-12);
        // Center preserved.
        let (cx, cy) = out.center();
        assert!((cx - 5.0).abs() < 1e-12 && (cy - 5.0).abs() < 1e-12);
    }

    #[test]
    fn encode_decode_round_trip() {
        let base = Box::new(3.0, 4.0, 12.0, 9.0);
        let gt = Box::new(5.0, 2.0, 20.0, 14.0);
        let deltas = encode_deltas(&base, &gt);
        let back = decode_deltas(&base, &deltas);
        for (a, b) in [(back.x, gt.x), (back.y, gt.y), (back.w, gt.w), (back.h, gt.h)] {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn loss_examples() {
        // Perfect predictions drive the total toward zero.
        let samples = vec![
            BatchSample { logit: 30.0, target: 1.0, boxes: Some(([0.1, 0.2, 0.3, 0.4], [0.1, 0.2, 0.3, 0.4])) },
            BatchSample { logit: -30.0, target: 0.0, boxes: None },
        ];
        let (loss, _) = batch_loss(&samples, 1.0);
        assert!(loss.total < 1e-8);

        // No positives: box term is exactly zero.
        let samples = vec![BatchSample { logit: 0.3, target: 0.0, boxes: None }];
        let (loss, _) = batch_loss(&samples, 1.0);
        assert_eq!(loss.box_term, 0.0);

        // Score 0.5 on a single negative: class term ln 2.
        let samples = vec![BatchSample { logit: 0.0, target: 0.0, boxes: None }];
        let (loss, _) = batch_loss(&samples, 1.0);
        assert!((loss.class_term - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((loss.total - std::f64::consts::LN_2).abs() < 1e-12);
    }
}
