//! Evaluation metrics: depth accuracy, cross-patch consistency, depth-boundary
//! localization, and surface-normal angular statistics.

use crate::error::{Error, Result};
use crate::grid::PatchSpec;
use crate::tensor::Tensor;

/// A prediction counts as accurate when max(pred/gt, gt/pred) stays below this.
pub const DELTA1_THRESHOLD: f64 = 1.25;
/// Boundary-distance truncation radius in pixels.
pub const PDBE_TRUNCATION: f64 = 10.0;
pub const CANNY_SIGMA: f64 = 1.0;
pub const CANNY_LOW: f64 = 0.1;
pub const CANNY_HIGH: f64 = 0.2;
/// Angular-accuracy thresholds in degrees.
pub const NORMAL_THRESHOLDS_DEG: [f64; 3] = [5.0, 11.25, 30.0];

/// Boundary-band width for consistency checks: 270 px at the 540-px reference
/// patch height, scaled proportionally for other patch sizes.
pub fn ce_band(patch_h: usize) -> usize {
    (270.0 * patch_h as f64 / 540.0).round() as usize
}

/// Mean absolute-relative error, threshold accuracy, and RMSE over valid
/// pixels. Ground truth must be strictly positive where valid; non-positive
/// predictions never count toward the threshold accuracy.
pub fn depth_metrics(
    pred: &Tensor,
    gt: &Tensor,
    mask: Option<&Tensor>,
) -> Result<(f64, f64, f64)> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape {
            op: "depth_metrics",
            lhs: pred.shape().to_vec(),
            rhs: gt.shape().to_vec(),
        });
    }
    if let Some(m) = mask {
        if m.shape() != gt.shape() {
            return Err(Error::Shape {
                op: "depth_metrics mask",
                lhs: m.shape().to_vec(),
                rhs: gt.shape().to_vec(),
            });
        }
    }
    let mut n = 0usize;
    let mut absrel = 0.0;
    let mut se = 0.0;
    let mut hits = 0usize;
    for i in 0..gt.len() {
        if mask.is_some_and(|m| m.data()[i] == 0.0) {
            continue;
        }
        let (p, g) = (pred.data()[i], gt.data()[i]);
        if !(g.is_finite() && g > 0.0) {
            return Err(Error::Config(format!(
                "depth_metrics needs positive finite ground truth, got {g}"
            )));
        }
        n += 1;
        absrel += (p - g).abs() / g;
        se += (p - g) * (p - g);
        if p > 0.0 && (p / g).max(g / p) < DELTA1_THRESHOLD {
            hits += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask("depth_metrics"));
    }
    Ok((absrel / n as f64, hits as f64 / n as f64, (se / n as f64).sqrt()))
}

/// Mean absolute disagreement between overlapping tile predictions.
///
/// Each tile carries its global placement; every pair of tiles whose
/// rectangles intersect contributes the mean absolute difference over the
/// intersection (the boundary band of an overlapped tiling), and the result
/// averages over contributing pairs. No overlapping pairs reads as 0.
pub fn consistency_error(tiles: &[(PatchSpec, Tensor)], band: usize) -> Result<f64> {
    if band == 0 {
        return Err(Error::Config("consistency band must be at least 1".into()));
    }
    for (spec, t) in tiles {
        if t.shape() != [spec.h, spec.w] {
            return Err(Error::Shape {
                op: "consistency_error",
                lhs: t.shape().to_vec(),
                rhs: vec![spec.h, spec.w],
            });
        }
        if band > spec.h || band > spec.w {
            return Err(Error::Config(format!(
                "consistency band {band} exceeds a {}x{} patch",
                spec.h, spec.w
            )));
        }
    }
    let mut pair_sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..tiles.len() {
        for j in i + 1..tiles.len() {
            let (a, ta) = &tiles[i];
            let (b, tb) = &tiles[j];
            let x0 = a.x.max(b.x);
            let x1 = (a.x + a.w).min(b.x + b.w);
            let y0 = a.y.max(b.y);
            let y1 = (a.y + a.h).min(b.y + b.h);
            if x1 <= x0 || y1 <= y0 {
                continue;
            }
            let mut sum = 0.0;
            for gy in y0..y1 {
                for gx in x0..x1 {
                    let va = ta.get2(gy - a.y, gx - a.x);
                    let vb = tb.get2(gy - b.y, gx - b.x);
                    sum += (va - vb).abs();
                }
            }
            pair_sum += sum / ((x1 - x0) * (y1 - y0)) as f64;
            pairs += 1;
        }
    }
    Ok(if pairs == 0 { 0.0 } else { pair_sum / pairs as f64 })
}

/// Binary edge raster.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<bool>,
}

impl EdgeMap {
    pub fn new(h: usize, w: usize) -> EdgeMap {
        EdgeMap { h, w, data: vec![false; h * w] }
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&e| e).count()
    }

    pub fn union(&self, other: &EdgeMap) -> Result<EdgeMap> {
        if (self.h, self.w) != (other.h, other.w) {
            return Err(Error::Shape {
                op: "edge union",
                lhs: vec![self.h, self.w],
                rhs: vec![other.h, other.w],
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| a || b)
            .collect();
        Ok(EdgeMap { h: self.h, w: self.w, data })
    }
}

/// Per-pixel Euclidean distance to the nearest edge pixel, truncated.
#[derive(Clone, Debug)]
pub struct DistanceField {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl DistanceField {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }
}

// Stand-in for +infinity that survives squared-distance arithmetic.
const DT_FAR: f64 = 1e20;

/// 1-D squared-distance transform by lower envelope of parabolas:
/// d[q] = min_p (q-p)^2 + f[p], exact for integer-valued inputs.
fn dt1d(f: &[f64], d: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let sep = |p: usize| {
            ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2 * (q - p)) as f64
        };
        let mut s = sep(v[k]);
        while s <= z[k] {
            k -= 1;
            s = sep(v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for (q, dq) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let delta = q.abs_diff(p);
        *dq = (delta * delta) as f64 + f[p];
    }
}

/// Exact Euclidean distance field: a column pass then a row pass of the 1-D
/// transform, then sqrt and truncation. An edge-free map reads as the
/// truncation value everywhere.
pub fn distance_field(edges: &EdgeMap, truncation: f64) -> DistanceField {
    let (h, w) = (edges.h, edges.w);
    let n = h.max(w);
    let mut f = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0; n + 1];
    let mut colsq = vec![0.0; h * w];
    for x in 0..w {
        for y in 0..h {
            f[y] = if edges.data[y * w + x] { 0.0 } else { DT_FAR };
        }
        dt1d(&f[..h], &mut d[..h], &mut v[..h], &mut z[..h + 1]);
        for y in 0..h {
            colsq[y * w + x] = d[y];
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        f[..w].copy_from_slice(&colsq[y * w..(y + 1) * w]);
        dt1d(&f[..w], &mut d[..w], &mut v[..w], &mut z[..w + 1]);
        for x in 0..w {
            out[y * w + x] = d[x].sqrt().min(truncation);
        }
    }
    DistanceField { h, w, data: out }
}

fn gaussian_blur(x: &Tensor, sigma: f64) -> Tensor {
    let (h, w) = (x.rows(), x.cols());
    let r = (3.0 * sigma).ceil() as isize;
    let mut kernel = Vec::with_capacity((2 * r + 1) as usize);
    for i in -r..=r {
        kernel.push((-(i as f64 * i as f64) / (2.0 * sigma * sigma)).exp());
    }
    let total: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= total;
    }
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for xx in 0..w {
            let mut acc = 0.0;
            for (j, k) in kernel.iter().enumerate() {
                acc += k * x.get2(y, clampi(xx as isize + j as isize - r, w));
            }
            tmp[y * w + xx] = acc;
        }
    }
    Tensor::from_fn(&[h, w], |i| {
        let (y, xx) = (i / w, i % w);
        let mut acc = 0.0;
        for (j, k) in kernel.iter().enumerate() {
            acc += k * tmp[clampi(y as isize + j as isize - r, h) * w + xx];
        }
        acc
    })
}

/// Classic edge detector: Gaussian blur, Sobel gradients, non-maximum
/// suppression along the quantized gradient axis, then double-threshold
/// hysteresis with `t_low`/`t_high` as fractions of the peak gradient
/// magnitude. The suppression axis ignores gradient sign, so an affine
/// re-scaling of the raster (even a negative one) leaves the edges alone.
pub fn canny(raster: &Tensor, sigma: f64, t_low: f64, t_high: f64) -> Result<EdgeMap> {
    if raster.shape().len() != 2 {
        return Err(Error::Shape {
            op: "canny",
            lhs: raster.shape().to_vec(),
            rhs: vec![0, 0],
        });
    }
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::Config(format!("canny sigma must be positive, got {sigma}")));
    }
    if !(0.0 <= t_low && t_low < t_high) {
        return Err(Error::Config(format!(
            "canny thresholds need 0 <= low < high, got {t_low}/{t_high}"
        )));
    }
    let (h, w) = (raster.rows(), raster.cols());
    let blurred = gaussian_blur(raster, sigma);
    let at = |y: isize, x: isize| {
        blurred.get2(y.clamp(0, h as isize - 1) as usize, x.clamp(0, w as isize - 1) as usize)
    };
    let mut mag = vec![0.0; h * w];
    let mut axis = vec![0u8; h * w];
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = -at(y - 1, x - 1) + at(y - 1, x + 1) - 2.0 * at(y, x - 1)
                + 2.0 * at(y, x + 1)
                - at(y + 1, x - 1)
                + at(y + 1, x + 1);
            let gy = -at(y - 1, x - 1) - 2.0 * at(y - 1, x) - at(y - 1, x + 1)
                + at(y + 1, x - 1)
                + 2.0 * at(y + 1, x)
                + at(y + 1, x + 1);
            let i = y as usize * w + x as usize;
            mag[i] = gx.hypot(gy);
            let mut a = gy.atan2(gx);
            if a < 0.0 {
                a += std::f64::consts::PI;
            }
            axis[i] = ((a / std::f64::consts::FRAC_PI_4).round() as usize % 4) as u8;
        }
    }
    let peak = mag.iter().fold(0.0f64, |m, &v| m.max(v));
    if peak == 0.0 {
        return Ok(EdgeMap::new(h, w));
    }
    // One canonical offset per axis; ties keep the pixel on the negative side
    // so a two-pixel plateau thins to a single line.
    const OFFSETS: [(isize, isize); 4] = [(1, 0), (1, 1), (0, 1), (-1, 1)];
    let mag_at = |y: isize, x: isize| {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            mag[y as usize * w + x as usize]
        }
    };
    let (low, high) = (t_low * peak, t_high * peak);
    let mut weak = vec![false; h * w];
    let mut stack = Vec::new();
    let mut out = EdgeMap::new(h, w);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let i = y as usize * w + x as usize;
            let g = mag[i];
            let (dx, dy) = OFFSETS[axis[i] as usize];
            if !(g > mag_at(y - dy, x - dx) && g >= mag_at(y + dy, x + dx)) {
                continue;
            }
            if g > 0.0 && g >= low {
                weak[i] = true;
                if g >= high {
                    out.data[i] = true;
                    stack.push((y, x));
                }
            }
        }
    }
    while let Some((y, x)) = stack.pop() {
        for dy in -1..=1isize {
            for dx in -1..=1isize {
                let (ny, nx) = (y + dy, x + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let i = ny as usize * w + nx as usize;
                if weak[i] && !out.data[i] {
                    out.data[i] = true;
                    stack.push((ny, nx));
                }
            }
        }
    }
    Ok(out)
}

fn normalize01(x: &Tensor) -> Tensor {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in x.data() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi <= lo {
        return Tensor::zeros(x.shape());
    }
    Tensor::from_fn(x.shape(), |i| (x.data()[i] - lo) / (hi - lo))
}

/// Union of edges found in the normalized depth and normalized disparity.
pub fn depth_edges(depth: &Tensor) -> Result<EdgeMap> {
    let direct = canny(&normalize01(depth), CANNY_SIGMA, CANNY_LOW, CANNY_HIGH)?;
    let disparity = Tensor::from_fn(depth.shape(), |i| 1.0 / depth.data()[i]);
    let inverted = canny(&normalize01(&disparity), CANNY_SIGMA, CANNY_LOW, CANNY_HIGH)?;
    direct.union(&inverted)
}

#[derive(Clone, Copy, Debug)]
pub struct PdbeResult {
    /// Mean distance from a ground-truth edge pixel to the nearest predicted
    /// edge; 0 when the ground truth has no edges (see `gt_no_edges`).
    pub acc: f64,
    /// Mean distance from a predicted edge pixel to the nearest ground-truth
    /// edge; 0 when the prediction has no edges (see `pred_no_edges`).
    pub compl: f64,
    pub pred_no_edges: bool,
    pub gt_no_edges: bool,
}

/// Boundary localization: how far predicted depth edges sit from ground-truth
/// ones and vice versa, both truncated at `PDBE_TRUNCATION`. Lower is better.
pub fn pdbe(pred: &Tensor, gt: &Tensor) -> Result<PdbeResult> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape {
            op: "pdbe",
            lhs: pred.shape().to_vec(),
            rhs: gt.shape().to_vec(),
        });
    }
    for (name, map) in [("predicted", pred), ("ground-truth", gt)] {
        if map.data().iter().any(|&v| !(v.is_finite() && v > 0.0)) {
            return Err(Error::Config(format!("pdbe needs positive finite {name} depth")));
        }
    }
    let e_pred = depth_edges(pred)?;
    let e_gt = depth_edges(gt)?;
    let t_pred = distance_field(&e_pred, PDBE_TRUNCATION);
    let t_gt = distance_field(&e_gt, PDBE_TRUNCATION);
    let ratio = |field: &DistanceField, edges: &EdgeMap| {
        let count = edges.count();
        if count == 0 {
            return (0.0, true);
        }
        let sum: f64 = edges
            .data
            .iter()
            .zip(&field.data)
            .filter_map(|(&e, &t)| e.then_some(t))
            .sum();
        (sum / count as f64, false)
    };
    let (acc, gt_no_edges) = ratio(&t_pred, &e_gt);
    let (compl, pred_no_edges) = ratio(&t_gt, &e_pred);
    Ok(PdbeResult { acc, compl, pred_no_edges, gt_no_edges })
}

/// Angular-error statistics in degrees, with threshold accuracies as
/// fractions in [0, 1].
#[derive(Clone, Copy, Debug)]
pub struct NormalStats {
    pub mean: f64,
    pub median: f64,
    pub rms: f64,
    pub pct_5: f64,
    pub pct_11_25: f64,
    pub pct_30: f64,
}

/// Per-pixel angle between unit normal fields ([3, H, W]) over valid pixels.
pub fn normal_metrics(
    pred: &Tensor,
    gt: &Tensor,
    mask: Option<&Tensor>,
) -> Result<NormalStats> {
    if pred.shape() != gt.shape() || pred.shape().len() != 3 || pred.shape()[0] != 3 {
        return Err(Error::Shape {
            op: "normal_metrics",
            lhs: pred.shape().to_vec(),
            rhs: gt.shape().to_vec(),
        });
    }
    let (h, w) = (pred.shape()[1], pred.shape()[2]);
    if let Some(m) = mask {
        if m.shape() != [h, w] {
            return Err(Error::Shape {
                op: "normal_metrics mask",
                lhs: m.shape().to_vec(),
                rhs: vec![h, w],
            });
        }
    }
    let mut angles = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            if mask.is_some_and(|m| m.get2(y, x) == 0.0) {
                continue;
            }
            let dot: f64 = (0..3).map(|c| pred.get3(c, y, x) * gt.get3(c, y, x)).sum();
            angles.push(dot.clamp(-1.0, 1.0).acos().to_degrees());
        }
    }
    if angles.is_empty() {
        return Err(Error::EmptyMask("normal_metrics"));
    }
    let n = angles.len() as f64;
    let mean = angles.iter().sum::<f64>() / n;
    let rms = (angles.iter().map(|a| a * a).sum::<f64>() / n).sqrt();
    let mut sorted = angles.clone();
    sorted.sort_by(f64::total_cmp);
    let median = if sorted.len() % 2 == 1 {
        sorted[sorted.len() / 2]
    } else {
        (sorted[sorted.len() / 2 - 1] + sorted[sorted.len() / 2]) / 2.0
    };
    let frac_below = |t: f64| angles.iter().filter(|&&a| a < t).count() as f64 / n;
    Ok(NormalStats {
        mean,
        median,
        rms,
        pct_5: frac_below(NORMAL_THRESHOLDS_DEG[0]),
        pct_11_25: frac_below(NORMAL_THRESHOLDS_DEG[1]),
        pct_30: frac_below(NORMAL_THRESHOLDS_DEG[2]),
    })
}

/// One evaluation row. Ratio-valued fields (`delta1`, `pct_*`) are stored as
/// fractions in [0, 1] and serialized as percentages.
#[derive(Clone, Copy, Debug, Default)]
pub struct MetricReport {
    pub absrel: f64,
    pub delta1: f64,
    pub rmse: f64,
    pub ce: f64,
    pub pdbe_acc: f64,
    pub pdbe_compl: f64,
    pub normal_mean: f64,
    pub normal_median: f64,
    pub normal_rms: f64,
    pub pct_5: f64,
    pub pct_11_25: f64,
    pub pct_30: f64,
}

impl MetricReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (key, value) in [
            ("absrel", self.absrel),
            ("delta1", self.delta1 * 100.0),
            ("rmse", self.rmse),
            ("ce", self.ce),
            ("pdbe_acc", self.pdbe_acc),
            ("pdbe_compl", self.pdbe_compl),
            ("normal_mean", self.normal_mean),
            ("normal_median", self.normal_median),
            ("normal_rms", self.normal_rms),
            ("pct_5", self.pct_5 * 100.0),
            ("pct_11_25", self.pct_11_25 * 100.0),
            ("pct_30", self.pct_30 * 100.0),
        ] {
            s.push_str(&format!("{key} = {value}\n"));
        }
        s
    }
}
