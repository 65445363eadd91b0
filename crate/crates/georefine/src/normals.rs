//! Pseudo ground-truth surface normals from depth: local least-squares
//! plane fits over back-projected 3D neighborhoods.

use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::tensor::{snap_unit3, Tensor};
use nalgebra::Matrix3;
use rayon::prelude::*;

/// Default plane-fit window side.
pub const NORMAL_WINDOW: usize = 5;

/// Fits with a mid eigenvalue at or below this fraction of the largest are
/// treated as collinear (rank < 2) and masked invalid.
const DEGENERATE_RATIO: f64 = 1e-18;

/// Unit normals per pixel plus a validity mask; border pixels (window
/// leaving the image) and degenerate fits are invalid.
#[derive(Clone, Debug)]
pub struct PseudoNormalField {
    /// [3, H, W]; invalid pixels hold (0, 0, 1).
    pub normals: Tensor,
    /// Row-major H*W validity flags.
    pub mask: Vec<bool>,
}

impl PseudoNormalField {
    pub fn valid_count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }

    /// Mask as a 0/1 [H, W] tensor (loss plumbing).
    pub fn mask_tensor(&self) -> Tensor {
        let (h, w) = (self.normals.shape()[1], self.normals.shape()[2]);
        Tensor::from_fn(&[h, w], |i| if self.mask[i] { 1.0 } else { 0.0 })
    }
}

/// Smallest-eigenvector plane normal of a 3D point set, or None when the
/// centered covariance has rank < 2 (points collinear or coincident).
pub fn fit_plane_normal(points: &[[f64; 3]]) -> Option<[f64; 3]> {
    let n = points.len() as f64;
    let mut mean = [0.0f64; 3];
    for p in points {
        for c in 0..3 {
            mean[c] += p[c];
        }
    }
    for m in mean.iter_mut() {
        *m /= n;
    }
    let mut cov = [[0.0f64; 3]; 3];
    for p in points {
        let d = [p[0] - mean[0], p[1] - mean[1], p[2] - mean[2]];
        for i in 0..3 {
            for j in 0..3 {
                cov[i][j] += d[i] * d[j];
            }
        }
    }
    let m = Matrix3::new(
        cov[0][0], cov[0][1], cov[0][2],
        cov[1][0], cov[1][1], cov[1][2],
        cov[2][0], cov[2][1], cov[2][2],
    );
    let eig = m.symmetric_eigen();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let (lo, mid, hi) = (order[0], order[1], order[2]);
    if eig.eigenvalues[hi] <= 0.0 || eig.eigenvalues[mid] <= DEGENERATE_RATIO * eig.eigenvalues[hi]
    {
        return None;
    }
    let v = eig.eigenvectors.column(lo);
    Some([v[0], v[1], v[2]])
}

/// Plane-fit normals for every pixel whose w x w neighborhood stays inside
/// the image. The neighborhood is back-projected through the camera, the
/// plane is the smallest-eigenvector fit, and normals are oriented
/// camera-facing (positive z) and snapped to exact unit norm.
pub fn pseudo_normals(
    depth: &Tensor,
    camera: &CameraModel,
    window: usize,
) -> Result<PseudoNormalField> {
    if window % 2 == 0 || window < 3 {
        return Err(Error::Config(format!(
            "plane-fit window must be odd and at least 3, got {window}"
        )));
    }
    camera.validate()?;
    if depth.shape().len() != 2 {
        return Err(Error::Shape {
            op: "pseudo_normals",
            lhs: depth.shape().to_vec(),
            rhs: vec![],
        });
    }
    if !depth.data().iter().all(|&d| d.is_finite() && d > 0.0) {
        return Err(Error::Config(
            "pseudo_normals requires strictly positive finite depth".into(),
        ));
    }
    let (h, w) = (depth.rows(), depth.cols());
    let r = window / 2;

    let rows: Vec<Vec<([f64; 3], bool)>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = Vec::with_capacity(w);
            let mut points = Vec::with_capacity(window * window);
            for x in 0..w {
                if y < r || y + r >= h || x < r || x + r >= w {
                    row.push(([0.0, 0.0, 1.0], false));
                    continue;
                }
                points.clear();
                for dy in 0..window {
                    for dx in 0..window {
                        let (py, px) = (y + dy - r, x + dx - r);
                        points.push(camera.backproject(
                            px as f64,
                            py as f64,
                            depth.get2(py, px),
                        ));
                    }
                }
                match fit_plane_normal(&points) {
                    Some(n) => {
                        let oriented = if n[2] < 0.0 { [-n[0], -n[1], -n[2]] } else { n };
                        row.push((snap_unit3(oriented), true));
                    }
                    None => row.push(([0.0, 0.0, 1.0], false)),
                }
            }
            row
        })
        .collect();

    let mut normals = Tensor::zeros(&[3, h, w]);
    let mut mask = vec![false; h * w];
    for (y, row) in rows.iter().enumerate() {
        for (x, (n, valid)) in row.iter().enumerate() {
            for c in 0..3 {
                normals.set3(c, y, x, n[c]);
            }
            mask[y * w + x] = *valid;
        }
    }
    Ok(PseudoNormalField { normals, mask })
}

/// Angle between two directions in degrees (assumes non-zero inputs).
pub fn angle_degrees(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dot = a[0] * b[0] + a[1] * b[1] + a[2] * b[2];
    let na = (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt();
    let nb = (b[0] * b[0] + b[1] * b[1] + b[2] * b[2]).sqrt();
    (dot / (na * nb)).clamp(-1.0, 1.0).acos().to_degrees()
}
