//! Independent reference implementations used as test oracles. Each one is
//! written as plain loops over the definition, sharing no code with the
//! library beyond its data types.
#![allow(dead_code)]

use retinagan::detector::{AnchorGrid, Assignment, BBox};

pub fn ce(y: f64, p: f64) -> f64 {
    let p = p.clamp(1e-7, 1.0 - 1e-7);
    -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
}

pub fn bce(y: f64, p: f64, alpha: f64) -> f64 {
    let p = p.clamp(1e-7, 1.0 - 1e-7);
    (alpha * p + (1.0 - alpha) * (1.0 - p)) * ce(y, p)
}

pub fn fcl(y: f64, p: f64, gamma: f64, alpha: f64) -> f64 {
    let p = p.clamp(1e-7, 1.0 - 1e-7);
    let d = (y - p).abs();
    let f = if gamma == 0.0 { 1.0 } else { d.powf(gamma) };
    f * bce(y, p, alpha)
}

pub fn huber(d: f64, delta: f64) -> f64 {
    let a = d.abs();
    if a <= delta {
        0.5 * a * a / delta
    } else {
        a - 0.5 * delta
    }
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `cls_ref`, `cls_cmp` are `[n][a][k]` probabilities.
pub fn fcl_class_term(cls_ref: &[Vec<Vec<f64>>], cls_cmp: &[Vec<Vec<f64>>], gamma: f64, alpha: f64) -> f64 {
    let mut total = 0.0;
    for (r, c) in cls_ref.iter().zip(cls_cmp) {
        let mut num = 0.0;
        let mut mass = 0.0;
        for (ra, ca) in r.iter().zip(c) {
            for (&y, &p) in ra.iter().zip(ca) {
                num += fcl(y, p, gamma, alpha);
                mass += y;
            }
        }
        total += num / mass.max(1.0);
    }
    total / cls_ref.len() as f64
}

/// `boxes_*` are `[n][a][4]`, `w` is `[n][a]`.
pub fn huber_box(box_ref: &[Vec<[f64; 4]>], box_cmp: &[Vec<[f64; 4]>], w: &[Vec<f64>], delta: f64) -> f64 {
    let mut total = 0.0;
    for n in 0..box_ref.len() {
        let mut num = 0.0;
        let mut mass = 0.0;
        for a in 0..box_ref[n].len() {
            let mut s = 0.0;
            for c in 0..4 {
                s += huber(box_ref[n][a][c] - box_cmp[n][a][c], delta);
            }
            num += w[n][a] * s;
            mass += w[n][a];
        }
        total += num / mass.max(1.0);
    }
    total / box_ref.len() as f64
}

/// Area of intersection over union by counting cells of a `res x res` grid
/// whose centers fall inside each box.
pub fn iou_by_counting(a: &BBox, b: &BBox, lo: f64, hi: f64, res: usize) -> f64 {
    let step = (hi - lo) / res as f64;
    let inside = |bx: &BBox, y: f64, x: f64| y >= bx[0] && y < bx[2] && x >= bx[1] && x < bx[3];
    let (mut inter, mut uni) = (0usize, 0usize);
    for i in 0..res {
        let y = lo + (i as f64 + 0.5) * step;
        for j in 0..res {
            let x = lo + (j as f64 + 0.5) * step;
            let (ia, ib) = (inside(a, y, x), inside(b, y, x));
            inter += (ia && ib) as usize;
            uni += (ia || ib) as usize;
        }
    }
    if uni == 0 {
        0.0
    } else {
        inter as f64 / uni as f64
    }
}

pub fn iou_exact(a: &BBox, b: &BBox) -> f64 {
    let h = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let w = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = h * w;
    let area = |r: &BBox| (r[2] - r[0]) * (r[3] - r[1]);
    let u = area(a) + area(b) - inter;
    if u <= 0.0 {
        0.0
    } else {
        inter / u
    }
}

/// Quadratic greedy NMS: repeatedly keep the best remaining box and drop
/// everything overlapping it at or above the threshold.
pub fn nms(boxes: &[BBox], scores: &[f64], threshold: f64) -> Vec<usize> {
    let mut alive: Vec<bool> = vec![true; boxes.len()];
    let mut kept = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..boxes.len() {
            if alive[i] && best.is_none_or(|b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        kept.push(b);
        alive[b] = false;
        for i in 0..boxes.len() {
            if alive[i] && iou_exact(&boxes[b], &boxes[i]) >= threshold {
                alive[i] = false;
            }
        }
    }
    kept
}

/// Exhaustive anchor assignment: per-anchor best gt by IoU (>= 0.5
/// positive, < 0.4 negative), then each gt in order forces its own best
/// anchor positive.
pub fn match_anchors(grid: &AnchorGrid, boxes: &[BBox]) -> Vec<Assignment> {
    let anchors: Vec<BBox> = grid.all().map(|a| a.to_box()).collect();
    let table: Vec<Vec<f64>> = anchors.iter().map(|a| boxes.iter().map(|b| iou_exact(a, b)).collect()).collect();
    let mut out: Vec<Assignment> = table
        .iter()
        .map(|row| {
            let mut best = (0.0, None);
            for (g, &v) in row.iter().enumerate() {
                if v > best.0 {
                    best = (v, Some(g));
                }
            }
            match best {
                (v, Some(g)) if v >= 0.5 => Assignment::Positive(g),
                (v, _) if v < 0.4 => Assignment::Negative,
                _ => Assignment::Ignore,
            }
        })
        .collect();
    for g in 0..boxes.len() {
        let mut best = (0.0, 0);
        for (a, row) in table.iter().enumerate() {
            if row[g] > best.0 {
                best = (row[g], a);
            }
        }
        if best.0 > 0.0 {
            out[best.1] = Assignment::Positive(g);
        }
    }
    out
}

/// One detection for the mAP oracle.
#[derive(Clone, Debug)]
pub struct Det {
    pub image: usize,
    pub bbox: BBox,
    pub score: f64,
    pub class: usize,
}

/// Average precision per class as the mean, over ground-truth objects, of
/// the precision at the rank where each true positive is found.
pub fn mean_ap(dets: &[Det], gt: &[Vec<(BBox, usize)>], num_classes: usize, iou_thr: f64) -> f64 {
    let mut aps = Vec::new();
    for c in 0..num_classes {
        let n_gt: usize = gt.iter().map(|g| g.iter().filter(|o| o.1 == c).count()).sum();
        if n_gt == 0 {
            continue;
        }
        let mut ds: Vec<&Det> = dets.iter().filter(|d| d.class == c).collect();
        ds.sort_by(|a, b| b.score.total_cmp(&a.score));
        let mut used: Vec<Vec<bool>> = gt.iter().map(|g| vec![false; g.len()]).collect();
        let mut tp = 0usize;
        let mut sum_prec = 0.0;
        for (rank, d) in ds.iter().enumerate() {
            let mut best = (iou_thr, None);
            for (j, (b, cls)) in gt[d.image].iter().enumerate() {
                if *cls != c || used[d.image][j] {
                    continue;
                }
                let v = iou_exact(&d.bbox, b);
                if v >= best.0 {
                    best = (v, Some(j));
                }
            }
            if let (_, Some(j)) = best {
                used[d.image][j] = true;
                tp += 1;
                sum_prec += tp as f64 / (rank + 1) as f64;
            }
        }
        aps.push(sum_prec / n_gt as f64);
    }
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

/// Scalar Adam; the decoupled decay `x -= lr * wd * x` follows the step.
pub struct ScalarAdam {
    pub lr: f64,
    pub b1: f64,
    pub b2: f64,
    pub eps: f64,
    pub wd: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl ScalarAdam {
    pub fn new(lr: f64, b1: f64, b2: f64, eps: f64, wd: f64, n: usize) -> Self {
        ScalarAdam {
            lr,
            b1,
            b2,
            eps,
            wd,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, x: &mut [f64], g: &[f64]) {
        self.t += 1;
        for i in 0..x.len() {
            self.m[i] = self.b1 * self.m[i] + (1.0 - self.b1) * g[i];
            self.v[i] = self.b2 * self.v[i] + (1.0 - self.b2) * g[i] * g[i];
            let mh = self.m[i] / (1.0 - self.b1.powi(self.t));
            let vh = self.v[i] / (1.0 - self.b2.powi(self.t));
            x[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            x[i] -= self.lr * self.wd * x[i];
        }
    }
}

/// Largest singular value of a row-major `rows x cols` matrix via cyclic
/// Jacobi diagonalization of `W^T W`.
pub fn sigma_max(w: &[f64], rows: usize, cols: usize) -> f64 {
    let mut a = vec![0.0; cols * cols];
    for i in 0..cols {
        for j in 0..cols {
            a[i * cols + j] = (0..rows).map(|r| w[r * cols + i] * w[r * cols + j]).sum();
        }
    }
    for _ in 0..100 {
        let mut off = 0.0;
        for p in 0..cols {
            for q in p + 1..cols {
                let apq = a[p * cols + q];
                off += apq * apq;
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * cols + q] - a[p * cols + p]) / (2.0 * apq);
                let t = if theta == 0.0 {
                    1.0
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..cols {
                    let (akp, akq) = (a[k * cols + p], a[k * cols + q]);
                    a[k * cols + p] = c * akp - s * akq;
                    a[k * cols + q] = s * akp + c * akq;
                }
                for k in 0..cols {
                    let (apk, aqk) = (a[p * cols + k], a[q * cols + k]);
                    a[p * cols + k] = c * apk - s * aqk;
                    a[q * cols + k] = s * apk + c * aqk;
                }
            }
        }
        if off < 1e-28 {
            break;
        }
    }
    (0..cols).map(|i| a[i * cols + i]).fold(0.0, f64::max).max(0.0).sqrt()
}

pub fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
