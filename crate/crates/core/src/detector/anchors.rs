//! Anchor grids, box geometry, anchor matching and the offset encoding.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(ymin, xmin, ymax, xmax)` in normalized image coordinates.
pub type BBox = [f64; 4];

/// Positive-match IoU threshold.
pub const POSITIVE_IOU: f64 = 0.5;
/// Anchors below this IoU with every box are negatives.
pub const NEGATIVE_IOU: f64 = 0.4;

/// A prior box, center form, normalized coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub cy: f64,
    pub cx: f64,
    pub h: f64,
    pub w: f64,
}

impl Anchor {
    pub fn to_box(&self) -> BBox {
        [
            self.cy - 0.5 * self.h,
            self.cx - 0.5 * self.w,
            self.cy + 0.5 * self.h,
            self.cx + 0.5 * self.w,
        ]
    }
}

/// Anchors of one pyramid level, ordered by row, column, then ratio.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorLevel {
    pub stride: usize,
    pub rows: usize,
    pub cols: usize,
    pub anchors: Vec<Anchor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorGrid {
    pub image_size: usize,
    pub ratios: Vec<f64>,
    pub levels: Vec<AnchorLevel>,
}

impl AnchorGrid {
    pub fn per_location(&self) -> usize {
        self.ratios.len()
    }

    pub fn len(&self) -> usize {
        self.levels.iter().map(|l| l.anchors.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// All anchors, level by level.
    pub fn all(&self) -> impl Iterator<Item = &Anchor> {
        self.levels.iter().flat_map(|l| l.anchors.iter())
    }
}

/// One anchor per location and ratio at each stride. The anchor side is
/// twice the stride; `ratio` is height over width at constant area.
pub fn build_anchors(image_size: usize, strides: &[usize], ratios: &[f64]) -> Result<AnchorGrid> {
    if strides.is_empty() || ratios.is_empty() {
        return Err(Error::InvalidArgument("anchors need at least one stride and one ratio".into()));
    }
    if let Some(&r) = ratios.iter().find(|r| !(r.is_finite() && **r > 0.0)) {
        return Err(Error::InvalidArgument(format!("anchor ratio must be positive, got {r}")));
    }
    let max_stride = *strides.iter().max().expect("non-empty");
    if max_stride == 0 || image_size == 0 || image_size % max_stride != 0 {
        return Err(Error::InvalidArgument(format!(
            "image size {image_size} is not divisible by stride {max_stride}"
        )));
    }
    let size = image_size as f64;
    let levels = strides
        .iter()
        .map(|&stride| {
            let n = image_size / stride;
            let side = 2.0 * stride as f64 / size;
            let mut anchors = Vec::with_capacity(n * n * ratios.len());
            for i in 0..n {
                for j in 0..n {
                    let cy = (i as f64 + 0.5) * stride as f64 / size;
                    let cx = (j as f64 + 0.5) * stride as f64 / size;
                    for &r in ratios {
                        anchors.push(Anchor {
                            cy,
                            cx,
                            h: side * r.sqrt(),
                            w: side / r.sqrt(),
                        });
                    }
                }
            }
            AnchorLevel {
                stride,
                rows: n,
                cols: n,
                anchors,
            }
        })
        .collect();
    Ok(AnchorGrid {
        image_size,
        ratios: ratios.to_vec(),
        levels,
    })
}

pub fn area(b: &BBox) -> f64 {
    (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ih = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iw = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ih * iw;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = area(a) + area(b) - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Offsets of `b` relative to anchor `a`: `(dy, dx, dh, dw)`.
pub fn encode(a: &Anchor, b: &BBox) -> [f64; 4] {
    let (h, w) = (b[2] - b[0], b[3] - b[1]);
    let (cy, cx) = (b[0] + 0.5 * h, b[1] + 0.5 * w);
    [(cy - a.cy) / a.h, (cx - a.cx) / a.w, (h / a.h).ln(), (w / a.w).ln()]
}

/// Inverse of [`encode`].
pub fn decode(a: &Anchor, d: &[f64; 4]) -> BBox {
    let cy = a.cy + d[0] * a.h;
    let cx = a.cx + d[1] * a.w;
    let h = a.h * d[2].exp();
    let w = a.w * d[3].exp();
    [cy - 0.5 * h, cx - 0.5 * w, cy + 0.5 * h, cx + 0.5 * w]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Assignment {
    Positive(usize),
    Negative,
    Ignore,
}

/// Per-anchor training targets for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchTargets {
    pub assignments: Vec<Assignment>,
    /// Encoded offsets; zero for anything but positives.
    pub box_targets: Vec<[f64; 4]>,
    /// Class of the matched box for positives.
    pub classes: Vec<Option<usize>>,
}

impl MatchTargets {
    pub fn num_positive(&self) -> usize {
        self.assignments
            .iter()
            .filter(|a| matches!(a, Assignment::Positive(_)))
            .count()
    }
}

/// Assign anchors to ground-truth boxes by IoU: positive at `>= 0.5`,
/// negative below `0.4`, ignored in between. Each box additionally claims
/// its best anchor when that overlap is nonzero.
pub fn match_anchors(grid: &AnchorGrid, boxes: &[BBox], classes: &[usize]) -> Result<MatchTargets> {
    if boxes.len() != classes.len() {
        return Err(Error::InvalidArgument(format!(
            "{} boxes but {} classes",
            boxes.len(),
            classes.len()
        )));
    }
    if let Some(b) = boxes.iter().find(|b| !(b[2] > b[0] && b[3] > b[1])) {
        return Err(Error::InvalidArgument(format!("degenerate ground-truth box {b:?}")));
    }
    let anchors: Vec<Anchor> = grid.all().copied().collect();
    let anchor_boxes: Vec<BBox> = anchors.iter().map(Anchor::to_box).collect();
    let mut best: Vec<(f64, Option<usize>)> = vec![(0.0, None); anchors.len()];
    let mut claims: Vec<(usize, f64)> = Vec::with_capacity(boxes.len());
    for (g, gt) in boxes.iter().enumerate() {
        let mut claim = (0, 0.0);
        for (a, ab) in anchor_boxes.iter().enumerate() {
            let o = iou(ab, gt);
            if o > best[a].0 {
                best[a] = (o, Some(g));
            }
            if o > claim.1 {
                claim = (a, o);
            }
        }
        claims.push(claim);
    }
    let mut assignments: Vec<Assignment> = best
        .iter()
        .map(|&(o, g)| match g {
            Some(g) if o >= POSITIVE_IOU => Assignment::Positive(g),
            _ if o < NEGATIVE_IOU => Assignment::Negative,
            _ => Assignment::Ignore,
        })
        .collect();
    for (g, &(a, o)) in claims.iter().enumerate() {
        if o > 0.0 {
            assignments[a] = Assignment::Positive(g);
        }
    }
    let box_targets = assignments
        .iter()
        .zip(&anchors)
        .map(|(asg, anchor)| match asg {
            Assignment::Positive(g) => encode(anchor, &boxes[*g]),
            _ => [0.0; 4],
        })
        .collect();
    let cls = assignments
        .iter()
        .map(|asg| match asg {
            Assignment::Positive(g) => Some(classes[*g]),
            _ => None,
        })
        .collect();
    Ok(MatchTargets {
        assignments,
        box_targets,
        classes: cls,
    })
}
