//! Stride/ROI geometry for candidate network structures.
//!
//! Everything here is pure arithmetic on boxes, strides, and layer chains:
//! how large a box projects onto a feature map, which cell rectangle it
//! occupies, when two distinct boxes collide onto the same cells at a coarse
//! stride, and how the receptive field accumulates with depth.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One backbone stage, described by its cumulative geometry.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: String,
    /// Pixels of input per feature cell at this stage.
    pub cumulative_stride: u32,
    /// Input-pixel extent influencing one activation of this stage.
    pub receptive_field: u32,
    pub channels: usize,
}

impl StageSpec {
    pub fn new(name: impl Into<String>, cumulative_stride: u32, receptive_field: u32, channels: usize) -> Self {
        StageSpec {
            name: name.into(),
            cumulative_stride,
            receptive_field,
            channels,
        }
    }
}

/// Fixed square output grid of ROI pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiTemplate {
    pub size_cells: u32,
}

impl RoiTemplate {
    pub fn new(size_cells: u32) -> Result<Self> {
        if size_cells < 1 {
            return Err(Error::invalid("ROI template size must be >= 1"));
        }
        Ok(RoiTemplate { size_cells })
    }
}

/// Axis-aligned box in image pixels, top-left anchored.
///
/// The height is the scale measure throughout the crate: ranges, routing,
/// anchors, and difficulty buckets are all keyed on `h`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Box {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl Box {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        debug_assert!(w > 0.0 && h > 0.0, "box sides must be positive");
        Box { x, y, w, h }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn center(&self) -> (f64, f64) {
        (self.x + self.w / 2.0, self.y + self.h / 2.0)
    }

    pub fn right(&self) -> f64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> f64 {
        self.y + self.h
    }
}

/// Half-open rectangle of feature cells: columns `col0..col1`, rows `row0..row1`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CellRect {
    pub col0: i64,
    pub row0: i64,
    pub col1: i64,
    pub row1: i64,
}

impl CellRect {
    pub fn cols(&self) -> i64 {
        self.col1 - self.col0
    }

    pub fn rows(&self) -> i64 {
        self.row1 - self.row0
    }

    pub fn cell_count(&self) -> i64 {
        self.cols() * self.rows()
    }

    fn intersection_count(&self, other: &CellRect) -> i64 {
        let cols = (self.col1.min(other.col1) - self.col0.max(other.col0)).max(0);
        let rows = (self.row1.min(other.row1) - self.row0.max(other.row0)).max(0);
        cols * rows
    }
}

/// Height of a box in feature cells at the given stride.
pub fn projected_extent(b: &Box, stride: f64) -> Result<f64> {
    if stride <= 0.0 {
        return Err(Error::invalid(format!("stride must be positive, got {stride}")));
    }
    Ok(b.h / stride)
}

/// Cell rectangle a box occupies on a feature map: floor on the low edge,
/// ceil on the high edge, so the rect is never empty for a positive-area box.
pub fn roi_cell_rect(b: &Box, stride: f64) -> Result<CellRect> {
    if stride <= 0.0 {
        return Err(Error::invalid(format!("stride must be positive, got {stride}")));
    }
    let col0 = (b.x / stride).floor() as i64;
    let row0 = (b.y / stride).floor() as i64;
    let mut col1 = (b.right() / stride).ceil() as i64;
    let mut row1 = (b.bottom() / stride).ceil() as i64;
    if col1 <= col0 {
        col1 = col0 + 1;
    }
    if row1 <= row0 {
        row1 = row0 + 1;
    }
    Ok(CellRect { col0, row0, col1, row1 })
}

/// How severely two boxes collide on a feature map at the given stride.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ambiguity {
    /// True iff both boxes project onto exactly the same cell rectangle.
    pub identical_rect: bool,
    /// Jaccard index of the two cell rectangles, in [0, 1].
    pub jaccard_of_cell_rects: f64,
}

/// Measures the cell-level overlap of two boxes at a stride. Distinct image
/// regions mapping to the same cells is what confuses a classifier at a
/// too-coarse stride.
pub fn ambiguity(a: &Box, b: &Box, stride: f64) -> Result<Ambiguity> {
    let ra = roi_cell_rect(a, stride)?;
    let rb = roi_cell_rect(b, stride)?;
    let inter = ra.intersection_count(&rb);
    let union = ra.cell_count() + rb.cell_count() - inter;
    Ok(Ambiguity {
        identical_rect: ra == rb,
        jaccard_of_cell_rects: if union > 0 { inter as f64 / union as f64 } else { 0.0 },
    })
}

/// Ratio of the projected box height to the ROI template size; 1.0 means the
/// projected region exactly fills the template.
pub fn scale_match(box_height: f64, stride: f64, template: RoiTemplate) -> Result<f64> {
    if box_height <= 0.0 || stride <= 0.0 {
        return Err(Error::invalid("scale_match arguments must be positive"));
    }
    Ok(box_height / stride / template.size_cells as f64)
}

/// One convolution-like layer for receptive-field accumulation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerDesc {
    pub kernel: u32,
    pub stride: u32,
    pub dilation: u32,
}

impl LayerDesc {
    pub fn new(kernel: u32, stride: u32) -> Self {
        LayerDesc { kernel, stride, dilation: 1 }
    }
}

/// Receptive field (in input pixels) after applying the layer chain, together
/// with the cumulative stride. Standard recursion: rf += (k - 1) * dilation * jump,
/// jump *= stride.
pub fn receptive_field_chain(layers: &[LayerDesc]) -> Result<(u32, u32)> {
    if layers.is_empty() {
        return Err(Error::invalid("receptive field chain requires at least one layer"));
    }
    let mut rf: u64 = 1;
    let mut jump: u64 = 1;
    for l in layers {
        if l.stride < 1 || l.kernel < 1 || l.dilation < 1 {
            return Err(Error::invalid("layer kernel, stride, and dilation must be >= 1"));
        }
        rf += u64::from(l.kernel - 1) * u64::from(l.dilation) * jump;
        jump *= u64::from(l.stride);
    }
    Ok((rf as u32, jump as u32))
}

/// Intersection-over-union of two boxes.
pub fn iou(a: &Box, b: &Box) -> f64 {
    let x0 = a.x.max(b.x);
    let y0 = a.y.max(b.y);
    let x1 = a.right().min(b.right());
    let y1 = a.bottom().min(b.bottom());
    if x1 <= x0 || y1 <= y0 {
        return 0.0;
    }
    let inter = (x1 - x0) * (y1 - y0);
    inter / (a.area() + b.area() - inter)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x: f64, y: f64, w: f64, h: f64) -> Box {
        Box::new(x, y, w, h)
    }

    #[test]
    fn projected_extent_examples() {
        assert_eq!(projected_extent(&b(0.0, 0.0, 40.0, 40.0), 8.0).unwrap(), 5.0);
        // 10..40px heights at stride 8 project to 1.25..5.0 cells; the
        // discrete cell rect spans ceil of that, i.e. 2..5 cells.
        let lo = projected_extent(&b(0.0, 0.0, 10.0, 10.0), 8.0).unwrap();
        let hi = projected_extent(&b(0.0, 0.0, 40.0, 40.0), 8.0).unwrap();
        assert_eq!((lo, hi), (1.25, 5.0));
        assert_eq!(lo.ceil() as i64, 2);
        assert_eq!(hi.ceil() as i64, 5);
        assert_eq!(projected_extent(&b(0.0, 0.0, 32.0, 32.0), 32.0).unwrap(), 1.0);
        assert!(projected_extent(&b(0.0, 0.0, 1.0, 1.0), 0.0).is_err());
        assert!(projected_extent(&b(0.0, 0.0, 1.0, 1.0), -4.0).is_err());
    }

    #[test]
    fn roi_cell_rect_examples() {
        let r = roi_cell_rect(&b(0.0, 0.0, 8.0, 8.0), 16.0).unwrap();
        assert_eq!(r, CellRect { col0: 0, row0: 0, col1: 1, row1: 1 });

        let r = roi_cell_rect(&b(0.0, 0.0, 40.0, 40.0), 8.0).unwrap();
        assert_eq!((r.cols(), r.rows()), (5, 5));

        // floor(3/4)=0, ceil(13/4)=4 on both axes.
        let r = roi_cell_rect(&b(3.0, 3.0, 10.0, 10.0), 4.0).unwrap();
        assert_eq!(r, CellRect { col0: 0, row0: 0, col1: 4, row1: 4 });
    }

    #[test]
    fn ambiguity_examples() {
        let a = b(0.0, 0.0, 8.0, 8.0);
        let c = b(4.0, 4.0, 8.0, 8.0);
        let amb = ambiguity(&a, &c, 16.0).unwrap();
        assert!(amb.identical_rect);
        assert_eq!(amb.jaccard_of_cell_rects, 1.0);

        let amb = ambiguity(&a, &c, 4.0).unwrap();
        assert!(!amb.identical_rect);
        // a covers cells [0,2)x[0,2), c covers [1,3)x[1,3): 1 shared of 7.
        assert!((amb.jaccard_of_cell_rects - 1.0 / 7.0).abs() < 1e-12);

        for stride in [1.0, 3.0, 8.0, 32.0] {
            assert!(ambiguity(&a, &a, stride).unwrap().identical_rect);
        }
    }

    #[test]
    fn scale_match_examples() {
        let t = RoiTemplate::new(5).unwrap();
        assert_eq!(scale_match(40.0, 8.0, t).unwrap(), 1.0);
        assert_eq!(scale_match(160.0, 32.0, t).unwrap(), 1.0);
        assert_eq!(scale_match(10.0, 32.0, t).unwrap(), 0.0625);
        assert!(RoiTemplate::new(0).is_err());
    }

    #[test]
    fn receptive_field_examples() {
        let (rf, _) = receptive_field_chain(&[LayerDesc::new(3, 1)]).unwrap();
        assert_eq!(rf, 3);
        let (rf, _) = receptive_field_chain(&[LayerDesc::new(3, 1), LayerDesc::new(3, 1)]).unwrap();
        assert_eq!(rf, 5);
        let (rf, jump) = receptive_field_chain(&[LayerDesc::new(3, 2), LayerDesc::new(3, 1)]).unwrap();
        assert_eq!(rf, 7);
        assert_eq!(jump, 2);
        assert!(receptive_field_chain(&[]).is_err());
    }

    #[test]
    fn iou_basics() {
        let a = b(0.0, 0.0, 10.0, 10.0);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &b(20.0, 20.0, 5.0, 5.0)), 0.0);
        assert!((iou(&a, &b(5.0, 0.0, 10.0, 10.0)) - 1.0 / 3.0).abs() < 1e-12);
    }

    proptest! {
        // Shifting a box by whole multiples of the stride shifts its cell
        // rect by the same number of cells.
        #[test]
        fn cell_rect_translation_covariant(
            x in 0..500i64, y in 0..500i64, w in 1..200i64, h in 1..200i64,
            stride in 1..32i64, k in -8..8i64,
        ) {
            let base = b(x as f64, y as f64, w as f64, h as f64);
            let shifted = b((x + k * stride) as f64, (y + k * stride) as f64, w as f64, h as f64);
            let r0 = roi_cell_rect(&base, stride as f64).unwrap();
            let r1 = roi_cell_rect(&shifted, stride as f64).unwrap();
            prop_assert_eq!(r1.col0, r0.col0 + k);
            prop_assert_eq!(r1.row0, r0.row0 + k);
            prop_assert_eq!(r1.col1, r0.col1 + k);
            prop_assert_eq!(r1.row1, r0.row1 + k);
        }

        // Two disjoint boxes that both fit inside one stride cell still land
        // on the identical cell rect: the collision of a too-coarse stride.
        #[test]
        fn sub_cell_boxes_collide(
            cell_col in 0..40i64, cell_row in 0..40i64,
            stride in 4..64i64,
            fx in 0.0f64..0.45, fy in 0.0f64..0.45,
            fw in 0.01f64..0.05, fh in 0.01f64..0.05,
        ) {
            let s = stride as f64;
            let a = b(cell_col as f64 * s + fx * s, cell_row as f64 * s + fy * s, fw * s, fh * s);
            // Second box placed in the far quadrant of the same cell, disjoint from a.
            let c = b(cell_col as f64 * s + (0.5 + fx) * s, cell_row as f64 * s + (0.5 + fy) * s, fw * s, fh * s);
            prop_assert_eq!(iou(&a, &c), 0.0);
            let amb = ambiguity(&a, &c, s).unwrap();
            prop_assert!(amb.identical_rect);
        }

        #[test]
        fn projected_extent_homogeneous(
            h in 1.0f64..500.0, stride in 1.0f64..64.0, factor in 0.1f64..10.0,
        ) {
            let e0 = projected_extent(&b(0.0, 0.0, h, h), stride).unwrap();
            let e1 = projected_extent(&b(0.0, 0.0, h * factor, h * factor), stride * factor).unwrap();
            prop_assert!((e0 - e1).abs() <= 1e-9 * e0.abs().max(1.0));
        }

        #[test]
        fn receptive_field_monotone_in_depth(
            kernels in proptest::collection::vec((1u32..7, 1u32..3), 1..8),
        ) {
            let layers: Vec<LayerDesc> = kernels.iter().map(|&(k, s)| LayerDesc::new(k, s)).collect();
            let mut prev = 0;
            for depth in 1..=layers.len() {
                let (rf, _) = receptive_field_chain(&layers[..depth]).unwrap();
                prop_assert!(rf >= prev);
                prev = rf;
            }
        }

        #[test]
        fn iou_symmetric_bounded(
            ax in 0.0f64..100.0, ay in 0.0f64..100.0, aw in 1.0f64..50.0, ah in 1.0f64..50.0,
            bx in 0.0f64..100.0, by in 0.0f64..100.0, bw in 1.0f64..50.0, bh in 1.0f64..50.0,
        ) {
            let a = b(ax, ay, aw, ah);
            let c = b(bx, by, bw, bh);
            let v = iou(&a, &c);
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v, iou(&c, &a));
        }
    }
}
