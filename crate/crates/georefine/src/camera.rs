//! Camera models used to lift depth maps into 3D point clouds.
//!
//! Points live in a frame where x follows image columns (u), y follows rows
//! (v), and stored depth grows with distance from the camera. Camera-facing
//! surface normals are stored with positive z.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CameraModel {
    /// Rays are parallel; a pixel (u, v) with depth d lifts to (u, v, d).
    Orthographic,
    /// Perspective projection with focal lengths and principal point in
    /// pixels; (u, v, d) lifts to d * ((u-cx)/fx, (v-cy)/fy, 1).
    Pinhole { fx: f64, fy: f64, cx: f64, cy: f64 },
}

impl CameraModel {
    pub fn validate(&self) -> Result<()> {
        if let CameraModel::Pinhole { fx, fy, .. } = self {
            if !(fx.is_finite() && fy.is_finite() && *fx > 0.0 && *fy > 0.0) {
                return Err(Error::Config(format!(
                    "pinhole focal lengths must be positive, got fx={fx} fy={fy}"
                )));
            }
        }
        Ok(())
    }

    pub fn backproject(&self, u: f64, v: f64, d: f64) -> [f64; 3] {
        match *self {
            CameraModel::Orthographic => [u, v, d],
            CameraModel::Pinhole { fx, fy, cx, cy } => {
                [d * (u - cx) / fx, d * (v - cy) / fy, d]
            }
        }
    }

    /// Compact text form used by dataset manifests.
    pub fn to_params_string(&self) -> String {
        match *self {
            CameraModel::Orthographic => "ortho".into(),
            CameraModel::Pinhole { fx, fy, cx, cy } => {
                format!("pinhole {fx} {fy} {cx} {cy}")
            }
        }
    }

    pub fn from_params_string(s: &str) -> Result<Self> {
        let fields: Vec<&str> = s.split_whitespace().collect();
        let parse = |f: &str| -> Result<f64> {
            f.parse::<f64>()
                .map_err(|_| Error::Config(format!("bad camera parameter {f:?} in {s:?}")))
        };
        match fields.as_slice() {
            ["ortho"] => Ok(CameraModel::Orthographic),
            ["pinhole", fx, fy, cx, cy] => {
                let cam = CameraModel::Pinhole {
                    fx: parse(fx)?,
                    fy: parse(fy)?,
                    cx: parse(cx)?,
                    cy: parse(cy)?,
                };
                cam.validate()?;
                Ok(cam)
            }
            _ => Err(Error::Config(format!("unrecognized camera spec {s:?}"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthographic_lift_is_the_identity_on_coordinates() {
        assert_eq!(CameraModel::Orthographic.backproject(3.0, 7.0, 2.5), [3.0, 7.0, 2.5]);
    }

    #[test]
    fn pinhole_principal_ray_lifts_straight_ahead() {
        let cam = CameraModel::Pinhole { fx: 100.0, fy: 100.0, cx: 32.0, cy: 24.0 };
        assert_eq!(cam.backproject(32.0, 24.0, 5.0), [0.0, 0.0, 5.0]);
        let p = cam.backproject(132.0, 24.0, 5.0);
        assert!((p[0] - 5.0).abs() < 1e-12); // one focal length off-axis
    }

    #[test]
    fn non_positive_focal_is_rejected() {
        let cam = CameraModel::Pinhole { fx: 0.0, fy: 10.0, cx: 0.0, cy: 0.0 };
        assert!(cam.validate().is_err());
    }

    #[test]
    fn params_string_roundtrips() {
        for cam in [
            CameraModel::Orthographic,
            CameraModel::Pinhole { fx: 120.5, fy: 121.0, cx: 36.0, cy: 27.25 },
        ] {
            let s = cam.to_params_string();
            assert_eq!(CameraModel::from_params_string(&s).unwrap(), cam);
        }
        assert!(CameraModel::from_params_string("fisheye 1 2 3 4").is_err());
    }
}
