//! Scale-range partitioning schemes and their stage assignments.
//!
//! A split scheme covers a target height range `[lo, hi]` with contiguous
//! sub-ranges. Each sub-range is owned by one detector, bound to a pair of
//! adjacent backbone stages (the previous stage has half the stride of the
//! current one). Boundary ownership is lower-inclusive, upper-exclusive,
//! with the terminal range also owning its upper bound, so every in-range
//! height routes to exactly one detector.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{RoiTemplate, StageSpec};

/// Contiguous height range in pixels. `lo` is inclusive; whether `hi` is
/// owned depends on the range's position in a scheme (see [`SplitScheme::route`]).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleRange {
    pub lo: f64,
    pub hi: f64,
}

impl ScaleRange {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo >= 0.0 && lo < hi) {
            return Err(Error::invalid(format!(
                "scale range requires 0 <= lo < hi, got [{lo}, {hi}]"
            )));
        }
        Ok(ScaleRange { lo, hi })
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }
}

/// An ordered, contiguous cover of a target scale range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitScheme {
    pub name: String,
    pub ranges: Vec<ScaleRange>,
}

impl SplitScheme {
    pub fn new(name: impl Into<String>, ranges: Vec<ScaleRange>) -> Result<Self> {
        if ranges.is_empty() {
            return Err(Error::invalid("split scheme needs at least one range"));
        }
        for r in &ranges {
            ScaleRange::new(r.lo, r.hi)?;
        }
        for pair in ranges.windows(2) {
            if pair[0].hi != pair[1].lo {
                return Err(Error::invalid(format!(
                    "ranges must share boundaries: [{}, {}] then [{}, {}]",
                    pair[0].lo, pair[0].hi, pair[1].lo, pair[1].hi
                )));
            }
        }
        Ok(SplitScheme { name: name.into(), ranges })
    }

    pub fn target(&self) -> ScaleRange {
        ScaleRange {
            lo: self.ranges[0].lo,
            hi: self.ranges[self.ranges.len() - 1].hi,
        }
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }

    /// Index of the unique range owning `height`: lower-inclusive,
    /// upper-exclusive, terminal range inclusive at its upper bound.
    /// `None` for heights outside the target range.
    pub fn route(&self, height: f64) -> Option<usize> {
        let last = self.ranges.len() - 1;
        for (i, r) in self.ranges.iter().enumerate() {
            if height >= r.lo && (height < r.hi || (i == last && height == r.hi)) {
                return Some(i);
            }
        }
        None
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("scheme serialization cannot fail")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let scheme: SplitScheme = serde_json::from_str(text)?;
        SplitScheme::new(scheme.name, scheme.ranges)
    }
}

/// Routes a height through a scheme. Free-function form of [`SplitScheme::route`].
pub fn route_range(height: f64, scheme: &SplitScheme) -> Option<usize> {
    scheme.route(height)
}

/// The seven reference partitioning schemes of the full-scale study, with
/// their published boundary values kept verbatim (the even variants use the
/// study's irregular roundings, not exact arithmetic).
pub fn named_schemes() -> Vec<SplitScheme> {
    let mk = |name: &str, bounds: &[f64]| {
        let ranges = bounds
            .windows(2)
            .map(|w| ScaleRange { lo: w[0], hi: w[1] })
            .collect();
        SplitScheme::new(name, ranges).expect("reference scheme is valid")
    };
    vec![
        mk("one-split", &[10.0, 1300.0]),
        mk("two-splits", &[10.0, 140.0, 1300.0]),
        mk("two-evenly-splits", &[10.0, 650.0, 1300.0]),
        mk("three-splits", &[10.0, 40.0, 140.0, 1300.0]),
        mk("three-evenly-splits", &[10.0, 450.0, 900.0, 1300.0]),
        mk("four-splits", &[10.0, 25.0, 60.0, 140.0, 1300.0]),
        mk("four-evenly-splits", &[10.0, 300.0, 600.0, 900.0, 1300.0]),
    ]
}

/// Looks up one of the [`named_schemes`] by name.
pub fn named_scheme(name: &str) -> Option<SplitScheme> {
    named_schemes().into_iter().find(|s| s.name == name)
}

/// Splits `target` into `k` contiguous ranges of equal width. Boundaries are
/// exact `lo + i*(hi-lo)/k`, rounded to the nearest integer pixel.
pub fn even_split(target: ScaleRange, k: usize) -> Result<SplitScheme> {
    if k == 0 {
        return Err(Error::invalid("even split requires k >= 1"));
    }
    let mut bounds = Vec::with_capacity(k + 1);
    for i in 0..=k {
        let b = target.lo + i as f64 * target.width() / k as f64;
        bounds.push(b.round());
    }
    let ranges = bounds.windows(2).map(|w| ScaleRange { lo: w[0], hi: w[1] }).collect();
    SplitScheme::new(format!("even-{k}"), ranges)
}

/// Splits `target` at the given interior boundaries, which must be strictly
/// increasing and strictly inside the target.
pub fn boundary_split(target: ScaleRange, boundaries: &[f64]) -> Result<SplitScheme> {
    let mut bounds = Vec::with_capacity(boundaries.len() + 2);
    bounds.push(target.lo);
    for &b in boundaries {
        if b <= target.lo || b >= target.hi {
            return Err(Error::invalid(format!(
                "boundary {b} lies outside the open target ({}, {})",
                target.lo, target.hi
            )));
        }
        if *bounds.last().unwrap() >= b {
            return Err(Error::invalid("boundaries must be strictly increasing"));
        }
        bounds.push(b);
    }
    bounds.push(target.hi);
    let ranges = bounds.windows(2).map(|w| ScaleRange { lo: w[0], hi: w[1] }).collect();
    SplitScheme::new(format!("bounds-{}", boundaries.len() + 1), ranges)
}

/// One detector's binding: a scale range served by hypercolumn features from
/// `(prev_stage, curr_stage)`, where the previous stage has half the stride.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StagePair {
    pub range: ScaleRange,
    pub prev_stage: StageSpec,
    pub curr_stage: StageSpec,
}

impl StagePair {
    /// The detector operates at the current stage's stride.
    pub fn stride(&self) -> u32 {
        self.curr_stage.cumulative_stride
    }
}

/// The full range-to-stage binding for a scheme.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageAssignment {
    pub pairs: Vec<StagePair>,
}

/// Assigns the k ranges of a scheme, in order, to the k deepest stage pairs
/// of the ladder. Stages must be ordered shallow-to-deep with each stride
/// double the previous, and there must be at least k+1 of them since every
/// detector consumes its stage plus the one before it.
pub fn assign_stages(
    scheme: &SplitScheme,
    stages: &[StageSpec],
    _template: RoiTemplate,
) -> Result<StageAssignment> {
    let k = scheme.ranges.len();
    if stages.len() < k + 1 {
        return Err(Error::invalid(format!(
            "need at least {} stages for {} splits, got {}",
            k + 1,
            k,
            stages.len()
        )));
    }
    for pair in stages.windows(2) {
        if pair[1].cumulative_stride != pair[0].cumulative_stride * 2 {
            return Err(Error::invalid(format!(
                "stage strides must double at each step: {} then {}",
                pair[0].cumulative_stride, pair[1].cumulative_stride
            )));
        }
    }
    // Deepest k pairs: range i (smallest scales first) takes the pair ending
    // at stage stages.len() - k + i.
    let first_curr = stages.len() - k;
    let pairs = scheme
        .ranges
        .iter()
        .enumerate()
        .map(|(i, &range)| StagePair {
            range,
            prev_stage: stages[first_curr + i - 1].clone(),
            curr_stage: stages[first_curr + i].clone(),
        })
        .collect();
    Ok(StageAssignment { pairs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn paper_stages() -> Vec<StageSpec> {
        vec![
            StageSpec::new("conv1", 2, 7, 64),
            StageSpec::new("c2", 4, 35, 256),
            StageSpec::new("c3", 8, 99, 512),
            StageSpec::new("c4", 16, 291, 1024),
            StageSpec::new("c5", 32, 483, 2048),
        ]
    }

    fn ranges(s: &SplitScheme) -> Vec<(f64, f64)> {
        s.ranges.iter().map(|r| (r.lo, r.hi)).collect()
    }

    #[test]
    fn named_schemes_boundaries() {
        let all = named_schemes();
        assert_eq!(all.len(), 7);
        let get = |n: &str| named_scheme(n).unwrap();
        assert_eq!(ranges(&get("one-split")), vec![(10.0, 1300.0)]);
        assert_eq!(ranges(&get("two-splits")), vec![(10.0, 140.0), (140.0, 1300.0)]);
        assert_eq!(ranges(&get("two-evenly-splits")), vec![(10.0, 650.0), (650.0, 1300.0)]);
        assert_eq!(
            ranges(&get("three-splits")),
            vec![(10.0, 40.0), (40.0, 140.0), (140.0, 1300.0)]
        );
        assert_eq!(
            ranges(&get("three-evenly-splits")),
            vec![(10.0, 450.0), (450.0, 900.0), (900.0, 1300.0)]
        );
        assert_eq!(
            ranges(&get("four-splits")),
            vec![(10.0, 25.0), (25.0, 60.0), (60.0, 140.0), (140.0, 1300.0)]
        );
        assert_eq!(
            ranges(&get("four-evenly-splits")),
            vec![(10.0, 300.0), (300.0, 600.0), (600.0, 900.0), (900.0, 1300.0)]
        );
    }

    #[test]
    fn even_split_examples() {
        let t = ScaleRange::new(10.0, 1300.0).unwrap();
        assert_eq!(ranges(&even_split(t, 2).unwrap()), vec![(10.0, 655.0), (655.0, 1300.0)]);
        assert_eq!(ranges(&even_split(t, 1).unwrap()), vec![(10.0, 1300.0)]);
        let t0 = ScaleRange::new(0.0, 90.0).unwrap();
        assert_eq!(
            ranges(&even_split(t0, 3).unwrap()),
            vec![(0.0, 30.0), (30.0, 60.0), (60.0, 90.0)]
        );
        assert!(even_split(t, 0).is_err());
    }

    #[test]
    fn boundary_split_examples() {
        let t = ScaleRange::new(10.0, 1300.0).unwrap();
        let three = boundary_split(t, &[40.0, 140.0]).unwrap();
        assert_eq!(ranges(&three), ranges(&named_scheme("three-splits").unwrap()));
        assert_eq!(ranges(&boundary_split(t, &[]).unwrap()), vec![(10.0, 1300.0)]);
        assert_eq!(
            ranges(&boundary_split(t, &[140.0]).unwrap()),
            vec![(10.0, 140.0), (140.0, 1300.0)]
        );
        assert!(boundary_split(t, &[140.0, 40.0]).is_err());
        assert!(boundary_split(t, &[5.0]).is_err());
        assert!(boundary_split(t, &[1300.0]).is_err());
    }

    #[test]
    fn assign_stages_checkmark_pattern() {
        let stages = paper_stages();
        let t = RoiTemplate::new(5).unwrap();
        let strides = |scheme: &str| -> Vec<u32> {
            assign_stages(&named_scheme(scheme).unwrap(), &stages, t)
                .unwrap()
                .pairs
                .iter()
                .map(|p| p.stride())
                .collect()
        };
        assert_eq!(strides("one-split"), vec![32]);
        assert_eq!(strides("two-splits"), vec![16, 32]);
        assert_eq!(strides("three-splits"), vec![8, 16, 32]);
        assert_eq!(strides("four-splits"), vec![4, 8, 16, 32]);

        // Previous stage has half the stride of the current one.
        let a = assign_stages(&named_scheme("three-splits").unwrap(), &stages, t).unwrap();
        for p in &a.pairs {
            assert_eq!(p.prev_stage.cumulative_stride * 2, p.curr_stage.cumulative_stride);
        }

        // Too few stages for the number of splits.
        let short = &stages[..2];
        assert!(assign_stages(&named_scheme("two-splits").unwrap(), short, t).is_err());
    }

    #[test]
    fn route_examples() {
        let three = named_scheme("three-splits").unwrap();
        assert_eq!(three.route(40.0), Some(1));
        assert_eq!(three.route(9.0), None);
        assert_eq!(three.route(1300.0), Some(2));
        assert_eq!(three.route(1300.1), None);
        assert_eq!(three.route(10.0), Some(0));
        assert_eq!(route_range(139.999, &three), Some(1));
    }

    #[test]
    fn named_schemes_serialization_round_trip_is_byte_identical() {
        for scheme in named_schemes() {
            let text = scheme.to_json();
            let back = SplitScheme::from_json(&text).unwrap();
            assert_eq!(back, scheme);
            assert_eq!(back.to_json(), text);
        }
    }

    proptest! {
        // Every scheme produced by even_split covers its target contiguously,
        // and each in-range height routes to exactly one range.
        #[test]
        fn even_split_contiguous_and_total(
            lo in 1.0f64..100.0, width in 10.0f64..2000.0, k in 1usize..8,
            sample in 0.0f64..1.0,
        ) {
            let lo = lo.round();
            let target = ScaleRange::new(lo, lo + width.round()).unwrap();
            let scheme = even_split(target, k).unwrap();
            prop_assert_eq!(scheme.ranges[0].lo, target.lo);
            prop_assert_eq!(scheme.ranges[scheme.len() - 1].hi, target.hi);
            for pair in scheme.ranges.windows(2) {
                prop_assert_eq!(pair[0].hi, pair[1].lo);
            }
            let h = target.lo + sample * target.width();
            let hits = scheme
                .ranges
                .iter()
                .enumerate()
                .filter(|(i, r)| h >= r.lo && (h < r.hi || (*i == scheme.len() - 1 && h == r.hi)))
                .count();
            prop_assert_eq!(hits, 1);
            prop_assert!(scheme.route(h).is_some());
            prop_assert_eq!(scheme.route(target.lo - 1.0), None);
            prop_assert_eq!(scheme.route(target.hi + 1.0), None);
        }

        // Larger ranges never map to smaller strides within one assignment.
        #[test]
        fn assignment_monotone_in_stride(k in 1usize..5) {
            let stages = paper_stages();
            let target = ScaleRange::new(10.0, 1300.0).unwrap();
            let scheme = even_split(target, k).unwrap();
            let t = RoiTemplate::new(5).unwrap();
            let a = assign_stages(&scheme, &stages, t).unwrap();
            for pair in a.pairs.windows(2) {
                prop_assert!(pair[0].range.lo <= pair[1].range.lo);
                prop_assert!(pair[0].stride() <= pair[1].stride());
            }
        }
    }
}
