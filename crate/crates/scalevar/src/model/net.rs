//! The trainable network: shared backbone plus per-range detector heads.

use crate::error::{Error, Result};
use crate::geometry::Box;
use crate::model::layers::{
    relu_backward, relu_forward, roi_pool_backward, roi_pool_forward, Conv2d, Linear, RoiPoolCache,
};
use crate::model::spec::{HeadSpec, ModelSpec};
use crate::model::tensor::{Param, Tensor};
use crate::sampler;
use crate::synthdata::AnnotatedImage;

fn fnv1a(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.as_bytes() {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

fn tensor_seed(init_seed: u64, name: &str) -> u64 {
    crate::synthdata::subseed(init_seed, fnv1a(name))
}

/// Initial bias of score/objectness outputs; starts predictions near the
/// background prior so early training is not swamped by false positives.
const SCORE_BIAS: f64 = -2.0;

#[derive(Clone)]
pub struct Backbone {
    pub stages: Vec<Vec<Conv2d>>,
}

/// Per-conv activations kept for the backward pass. The relu output of the
/// last conv in each stage is that stage's feature map.
pub struct BackboneCache {
    /// [stage][conv] -> (conv input, relu output).
    records: Vec<Vec<(Tensor, Tensor)>>,
}

impl BackboneCache {
    pub fn stage_output(&self, stage: usize) -> &Tensor {
        &self.records[stage].last().expect("stage has convs").1
    }

    pub fn n_stages(&self) -> usize {
        self.records.len()
    }
}

impl Backbone {
    fn new(spec: &ModelSpec, init_seed: u64) -> Backbone {
        let mut stages = Vec::new();
        let mut in_c = 1;
        for (si, stage) in spec.backbone.stages.iter().enumerate() {
            let mut convs = Vec::new();
            for b in 0..stage.blocks {
                let stride = if b == 0 {
                    if si == 0 {
                        spec.backbone.stem_stride as usize
                    } else {
                        2
                    }
                } else {
                    1
                };
                let name = format!("bb.s{si}.c{b}");
                convs.push(Conv2d::new(in_c, stage.channels, 3, stride, 1, tensor_seed(init_seed, &name)));
                in_c = stage.channels;
            }
            stages.push(convs);
        }
        Backbone { stages }
    }

    pub fn forward(&self, image: &Tensor) -> BackboneCache {
        let mut records = Vec::with_capacity(self.stages.len());
        let mut x = image.clone();
        for convs in &self.stages {
            let mut stage_records = Vec::with_capacity(convs.len());
            for conv in convs {
                let pre = conv.forward(&x);
                let post = relu_forward(&pre);
                stage_records.push((x, post.clone()));
                x = post;
            }
            records.push(stage_records);
        }
        BackboneCache { records }
    }

    /// Propagates per-stage output gradients back through every conv,
    /// accumulating parameter gradients. Gradients flowing out of stage i+1
    /// add onto the external gradient for stage i.
    pub fn backward(&mut self, cache: &BackboneCache, mut grad_stages: Vec<Tensor>) {
        assert_eq!(grad_stages.len(), self.stages.len());
        for si in (0..self.stages.len()).rev() {
            let mut g = grad_stages[si].clone();
            for ci in (0..self.stages[si].len()).rev() {
                let (input, relu_out) = &cache.records[si][ci];
                let g_pre = relu_backward(relu_out, &g);
                let first = si == 0 && ci == 0;
                match self.stages[si][ci].backward(input, &g_pre, !first) {
                    Some(gi) => g = gi,
                    None => break,
                }
            }
            if si > 0 {
                let dst = grad_stages[si - 1].data_mut();
                for (d, s) in dst.iter_mut().zip(g.data()) {
                    *d += s;
                }
            }
        }
    }
}

/// Proposal branch: 3x3 conv + relu, then 1x1 objectness (one per anchor)
/// and 1x1 box-delta (four per anchor) outputs, dense over the feature map.
#[derive(Clone)]
pub struct RpnHead {
    pub conv: Conv2d,
    pub obj: Conv2d,
    pub reg: Conv2d,
    pub n_anchors: usize,
}

pub struct RpnCache {
    pub mid: Tensor,
    /// [A, H, W] objectness logits.
    pub obj_out: Tensor,
    /// [4A, H, W] box deltas, coordinate-major per anchor: channel a*4+d.
    pub reg_out: Tensor,
}

impl RpnHead {
    fn new(in_c: usize, spec: &HeadSpec, n_anchors: usize, prefix: &str, init_seed: u64) -> RpnHead {
        RpnHead {
            conv: Conv2d::new(in_c, spec.rpn_channels, 3, 1, 1, tensor_seed(init_seed, &format!("{prefix}.conv"))),
            obj: Conv2d::new_output(spec.rpn_channels, n_anchors, 1, SCORE_BIAS, tensor_seed(init_seed, &format!("{prefix}.obj"))),
            reg: Conv2d::new_output(spec.rpn_channels, 4 * n_anchors, 1, 0.0, tensor_seed(init_seed, &format!("{prefix}.reg"))),
            n_anchors,
        }
    }

    pub fn forward(&self, feat: &Tensor) -> RpnCache {
        let mid = relu_forward(&self.conv.forward(feat));
        RpnCache {
            obj_out: self.obj.forward(&mid),
            reg_out: self.reg.forward(&mid),
            mid,
        }
    }

    pub fn backward(
        &mut self,
        feat: &Tensor,
        cache: &RpnCache,
        grad_obj: &Tensor,
        grad_reg: &Tensor,
    ) -> Tensor {
        let mut g_mid = self.obj.backward(&cache.mid, grad_obj, true).expect("input grad");
        let g_mid2 = self.reg.backward(&cache.mid, grad_reg, true).expect("input grad");
        for (a, b) in g_mid.data_mut().iter_mut().zip(g_mid2.data()) {
            *a += b;
        }
        let g_pre = relu_backward(&cache.mid, &g_mid);
        self.conv.backward(feat, &g_pre, true).expect("input grad")
    }
}

/// Classifier branch applied to hypercolumn ROI features: two 3x3 convs on
/// the pooled template grid, two fully connected layers, then the score and
/// box-delta outputs.
#[derive(Clone)]
pub struct ClsHead {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
    pub fc1: Linear,
    pub fc2: Linear,
    pub score: Linear,
    pub reg: Linear,
    pub template: u32,
}

pub struct ClsRoiCache {
    pub bbox: Box,
    pooled: Tensor,
    pool_prev: RoiPoolCache,
    pool_curr: RoiPoolCache,
    prev_channels: usize,
    c1_out: Tensor,
    c2_out: Tensor,
    flat: Vec<f64>,
    f1_out: Vec<f64>,
    f2_out: Vec<f64>,
    pub score_logit: f64,
    pub deltas: [f64; 4],
}

impl ClsHead {
    fn new(hyper_c: usize, spec: &HeadSpec, prefix: &str, init_seed: u64) -> ClsHead {
        let t = spec.template as usize;
        ClsHead {
            conv1: Conv2d::new(hyper_c, spec.cls_channels, 3, 1, 1, tensor_seed(init_seed, &format!("{prefix}.conv1"))),
            conv2: Conv2d::new(spec.cls_channels, spec.cls_channels, 3, 1, 1, tensor_seed(init_seed, &format!("{prefix}.conv2"))),
            fc1: Linear::new(spec.cls_channels * t * t, spec.fc1, tensor_seed(init_seed, &format!("{prefix}.fc1"))),
            fc2: Linear::new(spec.fc1, spec.fc2, tensor_seed(init_seed, &format!("{prefix}.fc2"))),
            score: Linear::new_output(spec.fc2, 1, SCORE_BIAS, tensor_seed(init_seed, &format!("{prefix}.score"))),
            reg: Linear::new_output(spec.fc2, 4, 0.0, tensor_seed(init_seed, &format!("{prefix}.reg"))),
            template: spec.template,
        }
    }

    /// Hypercolumn ROI features: the box is pooled independently on each map
    /// at its own stride and the results concatenate along channels.
    pub fn forward(
        &self,
        prev_map: &Tensor,
        curr_map: &Tensor,
        strides: (u32, u32),
        bbox: &Box,
    ) -> Result<ClsRoiCache> {
        if strides.0 * 2 != strides.1 {
            return Err(Error::invalid(format!(
                "hypercolumn expects the previous stride to be half the current: {} vs {}",
                strides.0, strides.1
            )));
        }
        let t = self.template;
        let (pool_p, cache_p) = roi_pool_forward(prev_map, bbox, strides.0, t);
        let (pool_c, cache_c) = roi_pool_forward(curr_map, bbox, strides.1, t);
        let cp = pool_p.shape()[0];
        let cc = pool_c.shape()[0];
        let ts = t as usize;
        let mut pooled = Tensor::zeros(&[cp + cc, ts, ts]);
        pooled.data_mut()[..cp * ts * ts].copy_from_slice(pool_p.data());
        pooled.data_mut()[cp * ts * ts..].copy_from_slice(pool_c.data());

        let c1_out = relu_forward(&self.conv1.forward(&pooled));
        let c2_out = relu_forward(&self.conv2.forward(&c1_out));
        let flat = c2_out.data().to_vec();
        let f1_out: Vec<f64> = self.fc1.forward(&flat).into_iter().map(|v| v.max(0.0)).collect();
        let f2_out: Vec<f64> = self.fc2.forward(&f1_out).into_iter().map(|v| v.max(0.0)).collect();
        let score_logit = self.score.forward(&f2_out)[0];
        let reg = self.reg.forward(&f2_out);
        Ok(ClsRoiCache {
            bbox: *bbox,
            pooled,
            pool_prev: cache_p,
            pool_curr: cache_c,
            prev_channels: cp,
            c1_out,
            c2_out,
            flat,
            f1_out,
            f2_out,
            score_logit,
            deltas: [reg[0], reg[1], reg[2], reg[3]],
        })
    }

    /// Backward for one ROI; pooled-feature gradients accumulate into the
    /// per-stage map gradients.
    pub fn backward(
        &mut self,
        cache: &ClsRoiCache,
        dscore: f64,
        ddeltas: [f64; 4],
        grad_prev_map: &mut Tensor,
        grad_curr_map: &mut Tensor,
    ) {
        let g_f2a = self.score.backward(&cache.f2_out, &[dscore]);
        let g_f2b = self.reg.backward(&cache.f2_out, &ddeltas);
        let mut g_f2: Vec<f64> = g_f2a.iter().zip(&g_f2b).map(|(a, b)| a + b).collect();
        for (g, &o) in g_f2.iter_mut().zip(&cache.f2_out) {
            if o <= 0.0 {
                *g = 0.0;
            }
        }
        let mut g_f1 = self.fc2.backward(&cache.f1_out, &g_f2);
        for (g, &o) in g_f1.iter_mut().zip(&cache.f1_out) {
            if o <= 0.0 {
                *g = 0.0;
            }
        }
        let g_flat = self.fc1.backward(&cache.flat, &g_f1);
        let g_c2 = Tensor::from_vec(cache.c2_out.shape(), g_flat).expect("shape matches");
        let g_c2 = relu_backward(&cache.c2_out, &g_c2);
        let g_c1 = self.conv2.backward(&cache.c1_out, &g_c2, true).expect("input grad");
        let g_c1 = relu_backward(&cache.c1_out, &g_c1);
        let g_pooled = self.conv1.backward(&cache.pooled, &g_c1, true).expect("input grad");

        let ts = self.template as usize;
        let split = cache.prev_channels * ts * ts;
        let g_prev = Tensor::from_vec(
            &[cache.prev_channels, ts, ts],
            g_pooled.data()[..split].to_vec(),
        )
        .expect("shape matches");
        let cc = g_pooled.shape()[0] - cache.prev_channels;
        let g_curr = Tensor::from_vec(&[cc, ts, ts], g_pooled.data()[split..].to_vec()).expect("shape matches");
        roi_pool_backward(&cache.pool_prev, &g_prev, grad_prev_map);
        roi_pool_backward(&cache.pool_curr, &g_curr, grad_curr_map);
    }
}

/// One scale-variant detector: binding plus its two branches.
#[derive(Clone)]
pub struct DetectorNet {
    pub rpn: RpnHead,
    pub cls: ClsHead,
    pub anchor_heights: Vec<f64>,
}

/// The full model: backbone, detectors, and the structural spec they were
/// built from.
#[derive(Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub backbone: Backbone,
    pub detectors: Vec<DetectorNet>,
}

impl Model {
    /// Builds a model with freshly initialized parameters. Every tensor gets
    /// its own RNG stream derived from `(init_seed, tensor name)`, so the
    /// initialization is independent of construction order.
    pub fn new(spec: &ModelSpec, init_seed: u64) -> Result<Model> {
        spec.backbone.validate()?;
        spec.head.validate()?;
        if spec.bindings.is_empty() {
            return Err(Error::invalid("model needs at least one detector binding"));
        }
        let strides = spec.backbone.cumulative_strides();
        let channels: Vec<usize> = spec.backbone.stages.iter().map(|s| s.channels).collect();
        for b in &spec.bindings {
            if b.curr_stage >= strides.len() || b.prev_stage + 1 != b.curr_stage {
                return Err(Error::invalid("detector binding stages must be adjacent and in range"));
            }
        }
        let backbone = Backbone::new(spec, init_seed);
        let detectors = spec
            .bindings
            .iter()
            .enumerate()
            .map(|(d, b)| {
                let anchors = sampler::make_anchors(&b.range, strides[b.curr_stage], 1, 1)
                    .expect("stride positive");
                DetectorNet {
                    rpn: RpnHead::new(
                        channels[b.curr_stage],
                        &spec.head,
                        anchors.heights.len(),
                        &format!("det{d}.rpn"),
                        init_seed,
                    ),
                    cls: ClsHead::new(
                        channels[b.prev_stage] + channels[b.curr_stage],
                        &spec.head,
                        &format!("det{d}.cls"),
                        init_seed,
                    ),
                    anchor_heights: anchors.heights,
                }
            })
            .collect();
        Ok(Model { spec: spec.clone(), backbone, detectors })
    }

    pub fn n_detectors(&self) -> usize {
        self.detectors.len()
    }

    /// Detector stride (current stage's cumulative stride).
    pub fn detector_stride(&self, d: usize) -> u32 {
        self.spec.backbone.cumulative_strides()[self.spec.bindings[d].curr_stage]
    }

    pub fn detector_strides(&self, d: usize) -> (u32, u32) {
        let s = self.spec.backbone.cumulative_strides();
        (s[self.spec.bindings[d].prev_stage], s[self.spec.bindings[d].curr_stage])
    }

    /// Anchor set for detector `d` on an image of the given padded size.
    pub fn anchor_set(&self, d: usize, width: usize, height: usize) -> sampler::AnchorSet {
        sampler::AnchorSet {
            heights: self.detectors[d].anchor_heights.clone(),
            stride: self.detector_stride(d),
            grid_w: width.div_ceil(self.detector_stride(d) as usize),
            grid_h: height.div_ceil(self.detector_stride(d) as usize),
        }
    }

    /// Runs the backbone on a grayscale image tensor, padding to a multiple
    /// of the maximum stride first.
    pub fn forward_backbone(&self, image: &Tensor) -> Result<BackboneCache> {
        if !image.all_finite() {
            return Err(Error::invalid("backbone input contains non-finite values"));
        }
        Ok(self.backbone.forward(&pad_to_stride(image, self.spec.backbone.max_stride() as usize)))
    }

    pub fn visit_params(&self, f: &mut impl FnMut(&str, &Param)) {
        for (si, convs) in self.backbone.stages.iter().enumerate() {
            for (ci, conv) in convs.iter().enumerate() {
                f(&format!("bb.s{si}.c{ci}.w"), &conv.w);
                f(&format!("bb.s{si}.c{ci}.b"), &conv.b);
            }
        }
        for (d, det) in self.detectors.iter().enumerate() {
            let rp = format!("det{d}.rpn");
            f(&format!("{rp}.conv.w"), &det.rpn.conv.w);
            f(&format!("{rp}.conv.b"), &det.rpn.conv.b);
            f(&format!("{rp}.obj.w"), &det.rpn.obj.w);
            f(&format!("{rp}.obj.b"), &det.rpn.obj.b);
            f(&format!("{rp}.reg.w"), &det.rpn.reg.w);
            f(&format!("{rp}.reg.b"), &det.rpn.reg.b);
            let cp = format!("det{d}.cls");
            f(&format!("{cp}.conv1.w"), &det.cls.conv1.w);
            f(&format!("{cp}.conv1.b"), &det.cls.conv1.b);
            f(&format!("{cp}.conv2.w"), &det.cls.conv2.w);
            f(&format!("{cp}.conv2.b"), &det.cls.conv2.b);
            f(&format!("{cp}.fc1.w"), &det.cls.fc1.w);
            f(&format!("{cp}.fc1.b"), &det.cls.fc1.b);
            f(&format!("{cp}.fc2.w"), &det.cls.fc2.w);
            f(&format!("{cp}.fc2.b"), &det.cls.fc2.b);
            f(&format!("{cp}.score.w"), &det.cls.score.w);
            f(&format!("{cp}.score.b"), &det.cls.score.b);
            f(&format!("{cp}.reg.w"), &det.cls.reg.w);
            f(&format!("{cp}.reg.b"), &det.cls.reg.b);
        }
    }

    pub fn visit_params_mut(&mut self, f: &mut impl FnMut(&str, &mut Param)) {
        for (si, convs) in self.backbone.stages.iter_mut().enumerate() {
            for (ci, conv) in convs.iter_mut().enumerate() {
                f(&format!("bb.s{si}.c{ci}.w"), &mut conv.w);
                f(&format!("bb.s{si}.c{ci}.b"), &mut conv.b);
            }
        }
        for (d, det) in self.detectors.iter_mut().enumerate() {
            let rp = format!("det{d}.rpn");
            f(&format!("{rp}.conv.w"), &mut det.rpn.conv.w);
            f(&format!("{rp}.conv.b"), &mut det.rpn.conv.b);
            f(&format!("{rp}.obj.w"), &mut det.rpn.obj.w);
            f(&format!("{rp}.obj.b"), &mut det.rpn.obj.b);
            f(&format!("{rp}.reg.w"), &mut det.rpn.reg.w);
            f(&format!("{rp}.reg.b"), &mut det.rpn.reg.b);
            let cp = format!("det{d}.cls");
            f(&format!("{cp}.conv1.w"), &mut det.cls.conv1.w);
            f(&format!("{cp}.conv1.b"), &mut det.cls.conv1.b);
            f(&format!("{cp}.conv2.w"), &mut det.cls.conv2.w);
            f(&format!("{cp}.conv2.b"), &mut det.cls.conv2.b);
            f(&format!("{cp}.fc1.w"), &mut det.cls.fc1.w);
            f(&format!("{cp}.fc1.b"), &mut det.cls.fc1.b);
            f(&format!("{cp}.fc2.w"), &mut det.cls.fc2.w);
            f(&format!("{cp}.fc2.b"), &mut det.cls.fc2.b);
            f(&format!("{cp}.score.w"), &mut det.cls.score.w);
            f(&format!("{cp}.score.b"), &mut det.cls.score.b);
            f(&format!("{cp}.reg.w"), &mut det.cls.reg.w);
            f(&format!("{cp}.reg.b"), &mut det.cls.reg.b);
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| n += p.value.len());
        n
    }

    pub fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |_, p| p.zero_grad());
    }
}

/// Grayscale bytes to a normalized `[1, H, W]` tensor in [-1, 1].
pub fn image_to_tensor(img: &AnnotatedImage) -> Tensor {
    let data = img.pixels.iter().map(|&v| v as f64 / 127.5 - 1.0).collect();
    Tensor::from_vec(&[1, img.height, img.width], data).expect("size matches")
}

/// Zero-pads bottom/right so both spatial dims divide `stride`.
pub fn pad_to_stride(image: &Tensor, stride: usize) -> Tensor {
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let ph = h.div_ceil(stride) * stride;
    let pw = w.div_ceil(stride) * stride;
    if ph == h && pw == w {
        return image.clone();
    }
    let mut out = Tensor::zeros(&[c, ph, pw]);
    for ch in 0..c {
        for y in 0..h {
            let src = &image.data()[(ch * h + y) * w..][..w];
            out.data_mut()[(ch * ph + y) * pw..][..w].copy_from_slice(src);
        }
    }
    out
}
