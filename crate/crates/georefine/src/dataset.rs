//! On-disk dataset access: a tab-separated manifest naming per-frame PFM
//! rasters (ground truth plus coarse inputs) and the camera that produced
//! them.

use std::fs;
use std::path::{Path, PathBuf};

use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::grid::ImageExtent;
use crate::pfm::read_pfm;
use crate::scene::GeometryFrame;
use crate::tensor::{snap_unit3, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// One manifest line; paths are resolved against the manifest's directory.
#[derive(Clone, Debug)]
pub struct FrameRecord {
    pub id: String,
    pub split: Split,
    pub rgb: PathBuf,
    pub depth: PathBuf,
    pub normal: PathBuf,
    pub coarse_depth: PathBuf,
    pub coarse_normal: PathBuf,
    pub camera: CameraModel,
}

/// A fully materialized frame: validated ground truth plus the coarse
/// depth/normal pair the refiner takes as input.
#[derive(Clone, Debug)]
pub struct LoadedFrame {
    pub id: String,
    pub gt: GeometryFrame,
    pub coarse_depth: Tensor,
    pub coarse_normal: Tensor,
}

impl LoadedFrame {
    pub fn extent(&self) -> ImageExtent {
        self.gt.extent
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub dir: PathBuf,
    pub records: Vec<FrameRecord>,
}

/// Renormalize every pixel of a [3, H, W] field so stored unit vectors
/// survive the f32 round trip bit-exactly (norm == 1.0, not merely close).
fn snap_field(field: &mut Tensor) {
    let (h, w) = (field.shape()[1], field.shape()[2]);
    for y in 0..h {
        for x in 0..w {
            let n = snap_unit3([field.get3(0, y, x), field.get3(1, y, x), field.get3(2, y, x)]);
            for c in 0..3 {
                field.set3(c, y, x, n[c]);
            }
        }
    }
}

impl Dataset {
    /// Parses a manifest of tab-separated lines:
    /// `id  split  rgb  depth  normal  coarse_depth  coarse_normal  camera`.
    pub fn load(manifest: &Path) -> Result<Dataset> {
        let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
        let dir = manifest.parent().unwrap_or(Path::new(".")).to_path_buf();
        let parse_err = |offset: usize, msg: String| Error::Parse {
            path: manifest.display().to_string(),
            offset,
            msg,
        };
        let mut records: Vec<FrameRecord> = Vec::new();
        let mut offset = 0usize;
        for line in text.lines() {
            let at = offset;
            offset += line.len() + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 8 {
                return Err(parse_err(
                    at,
                    format!("expected 8 tab-separated fields, got {}", fields.len()),
                ));
            }
            let split = Split::parse(fields[1])
                .ok_or_else(|| parse_err(at, format!("unknown split {:?}", fields[1])))?;
            let camera = CameraModel::from_params_string(fields[7])
                .map_err(|e| parse_err(at, e.to_string()))?;
            if records.iter().any(|r| r.id == fields[0]) {
                return Err(parse_err(at, format!("duplicate frame id {:?}", fields[0])));
            }
            records.push(FrameRecord {
                id: fields[0].to_string(),
                split,
                rgb: dir.join(fields[2]),
                depth: dir.join(fields[3]),
                normal: dir.join(fields[4]),
                coarse_depth: dir.join(fields[5]),
                coarse_normal: dir.join(fields[6]),
                camera,
            });
        }
        if records.is_empty() {
            return Err(Error::Config(format!(
                "{}: manifest lists no frames",
                manifest.display()
            )));
        }
        Ok(Dataset { dir, records })
    }

    /// Record indices belonging to one split, in manifest order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.records.len()).filter(|&i| self.records[i].split == split).collect()
    }

    /// Reads and validates all five rasters for one record. Normal fields
    /// are snapped back to exact unit length.
    pub fn load_frame(&self, index: usize) -> Result<LoadedFrame> {
        let r = &self.records[index];
        let rgb = read_pfm(&r.rgb)?;
        let depth = read_pfm(&r.depth)?;
        let mut normal = read_pfm(&r.normal)?;
        let coarse_depth = read_pfm(&r.coarse_depth)?;
        let mut coarse_normal = read_pfm(&r.coarse_normal)?;
        if depth.shape().len() != 2 {
            return Err(Error::Shape {
                op: "frame depth",
                lhs: depth.shape().to_vec(),
                rhs: vec![],
            });
        }
        let extent = ImageExtent { h: depth.rows(), w: depth.cols() };
        if normal.shape() != [3, extent.h, extent.w]
            || coarse_normal.shape() != [3, extent.h, extent.w]
        {
            return Err(Error::Shape {
                op: "frame normal",
                lhs: normal.shape().to_vec(),
                rhs: vec![3, extent.h, extent.w],
            });
        }
        snap_field(&mut normal);
        snap_field(&mut coarse_normal);
        let gt = GeometryFrame { rgb, depth, normal, extent, camera: r.camera };
        gt.validate()?;
        if coarse_depth.shape() != [extent.h, extent.w] {
            return Err(Error::Shape {
                op: "coarse depth",
                lhs: coarse_depth.shape().to_vec(),
                rhs: vec![extent.h, extent.w],
            });
        }
        for &d in coarse_depth.data() {
            if !(d.is_finite() && d > 0.0) {
                return Err(Error::NonFinite(format!("coarse depth {d} in {}", r.id)));
            }
        }
        Ok(LoadedFrame { id: r.id.clone(), gt, coarse_depth, coarse_normal })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{make_dataset, DatasetParams};

    fn tiny_dataset(scenes: usize, seed: u64) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let params = DatasetParams {
            scenes,
            extent: ImageExtent { h: 16, w: 16 },
            seed,
            downsample: 4,
            blur: 1.5,
            bias: 0.05,
        };
        let manifest = make_dataset(&params, dir.path()).unwrap();
        (dir, manifest)
    }

    #[test]
    fn manifest_round_trips_records_and_splits() {
        let (_dir, manifest) = tiny_dataset(10, 5);
        let ds = Dataset::load(&manifest).unwrap();
        assert_eq!(ds.records.len(), 10);
        assert_eq!(ds.split_indices(Split::Train), (0..8).collect::<Vec<_>>());
        assert_eq!(ds.split_indices(Split::Val), vec![8]);
        assert_eq!(ds.split_indices(Split::Test), vec![9]);
        assert_eq!(ds.records[0].id, "scene_0000");
        assert_eq!(ds.records[0].camera, CameraModel::Orthographic);
        assert!(matches!(ds.records[1].camera, CameraModel::Pinhole { .. }));
    }

    #[test]
    fn loaded_frames_validate_and_normals_are_exactly_unit() {
        let (_dir, manifest) = tiny_dataset(2, 5);
        let ds = Dataset::load(&manifest).unwrap();
        for i in 0..2 {
            let frame = ds.load_frame(i).unwrap();
            assert_eq!(frame.extent(), ImageExtent { h: 16, w: 16 });
            for field in [&frame.gt.normal, &frame.coarse_normal] {
                for y in 0..16 {
                    for x in 0..16 {
                        let n2: f64 =
                            (0..3).map(|c| field.get3(c, y, x).powi(2)).sum();
                        assert_eq!(n2.sqrt(), 1.0);
                    }
                }
            }
        }
    }

    #[test]
    fn malformed_lines_report_their_byte_offset() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("manifest.tsv");
        let good = "a\ttrain\tr\td\tn\tcd\tcn\tortho\n";
        std::fs::write(&manifest, format!("{good}b\ttrain\tmissing-fields\n")).unwrap();
        match Dataset::load(&manifest) {
            Err(Error::Parse { offset, msg, .. }) => {
                assert_eq!(offset, good.len());
                assert!(msg.contains("8"), "{msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn bad_split_duplicate_id_and_empty_manifest_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("manifest.tsv");

        std::fs::write(&manifest, "a\tdev\tr\td\tn\tcd\tcn\tortho\n").unwrap();
        assert!(matches!(Dataset::load(&manifest), Err(Error::Parse { .. })));

        std::fs::write(
            &manifest,
            "a\ttrain\tr\td\tn\tcd\tcn\tortho\na\tval\tr\td\tn\tcd\tcn\tortho\n",
        )
        .unwrap();
        let err = Dataset::load(&manifest).unwrap_err();
        assert!(err.to_string().contains("duplicate"), "{err}");

        std::fs::write(&manifest, "\n\n").unwrap();
        assert!(matches!(Dataset::load(&manifest), Err(Error::Config(_))));
    }

    #[test]
    fn missing_raster_files_surface_as_io_errors() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = dir.path().join("manifest.tsv");
        std::fs::write(&manifest, "a\ttrain\tr\td\tn\tcd\tcn\tortho\n").unwrap();
        let ds = Dataset::load(&manifest).unwrap();
        assert!(matches!(ds.load_frame(0), Err(Error::Io { .. })));
    }
}
