//! Tiled inference at any cell-divisible resolution, and the evaluation
//! driver that scores a checkpoint against a dataset split.

use rayon::prelude::*;

use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::grid::{assemble, crop2, crop3, ImageExtent, PatchCrops, PatchSpec};
use crate::metrics::{
    ce_band, consistency_error, depth_metrics, normal_metrics, pdbe, MetricReport,
};
use crate::model::{refine_patches, ModelParams, Variant};
use crate::tape::Tape;
use crate::tensor::{snap_unit3, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct InferOptions {
    /// Tile height/width in pixels; 0 means a quarter of the extent, the
    /// training-time patch size.
    pub patch_h: usize,
    pub patch_w: usize,
    /// Tile step per axis; 0 means the patch size (non-overlapping cover).
    pub stride_y: usize,
    pub stride_x: usize,
    /// Max tokens in one forward pass; larger covers fall back to row bands.
    pub token_budget: usize,
    pub variant: Variant,
}

impl Default for InferOptions {
    fn default() -> Self {
        InferOptions {
            patch_h: 0,
            patch_w: 0,
            stride_y: 0,
            stride_x: 0,
            token_budget: 16384,
            variant: Variant::full(),
        }
    }
}

#[derive(Debug)]
pub struct InferResult {
    /// [H, W] refined depth.
    pub depth: Tensor,
    /// [3, H, W] refined unit normals.
    pub normal: Tensor,
    /// Per-tile refined depth, for seam diagnostics.
    pub tiles: Vec<(PatchSpec, Tensor)>,
    /// True when the cover exceeded the token budget and was processed in
    /// row bands; cross-attention then does not span the whole image.
    pub row_banded: bool,
}

/// Tile origins along one axis: step by `stride`, clamping the last tile to
/// end exactly at the border.
fn origins(len: usize, patch: usize, stride: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut at = 0usize;
    loop {
        if at + patch >= len {
            out.push(len - patch);
            break;
        }
        out.push(at);
        at += stride;
    }
    out.dedup();
    out
}

fn run_cover(
    params: &ModelParams,
    rgb: &Tensor,
    coarse_depth: &Tensor,
    coarse_normal: &Tensor,
    specs: &[PatchSpec],
    variant: Variant,
) -> Result<Vec<(PatchSpec, Tensor, Tensor)>> {
    let crops: Vec<PatchCrops> = specs
        .iter()
        .map(|s| PatchCrops {
            spec: *s,
            rgb: crop3(rgb, s.x, s.y, s.h, s.w),
            depth: crop2(coarse_depth, s.x, s.y, s.h, s.w),
            normal: crop3(coarse_normal, s.x, s.y, s.h, s.w),
        })
        .collect();
    let mut tape = Tape::new();
    let tape_model = params.register(&mut tape);
    let refined = refine_patches(&mut tape, &tape_model, &crops, variant)?;
    Ok(specs
        .iter()
        .zip(refined)
        .map(|(s, r)| (*s, tape.value(r.depth).clone(), tape.value(r.normal).clone()))
        .collect())
}

pub fn infer(
    params: &ModelParams,
    rgb: &Tensor,
    coarse_depth: &Tensor,
    coarse_normal: &Tensor,
    opts: &InferOptions,
) -> Result<InferResult> {
    if coarse_depth.shape().len() != 2 {
        return Err(Error::Shape {
            op: "infer coarse depth",
            lhs: coarse_depth.shape().to_vec(),
            rhs: vec![],
        });
    }
    let extent = ImageExtent { h: coarse_depth.rows(), w: coarse_depth.cols() };
    let (h, w) = (extent.h, extent.w);
    for (op, t, want) in [
        ("infer rgb", rgb, [3, h, w]),
        ("infer coarse normal", coarse_normal, [3, h, w]),
    ] {
        if t.shape() != want {
            return Err(Error::Shape { op, lhs: t.shape().to_vec(), rhs: want.to_vec() });
        }
    }
    let cell = params.dims.cell;
    if h % cell != 0 || w % cell != 0 {
        return Err(Error::Config(format!(
            "extent {h}x{w} is not divisible by the token cell {cell}; \
             pad the frame to a multiple of {cell}"
        )));
    }
    let patch_h = if opts.patch_h == 0 { h / 4 } else { opts.patch_h };
    let patch_w = if opts.patch_w == 0 { w / 4 } else { opts.patch_w };
    for (name, patch, limit) in [("height", patch_h, h), ("width", patch_w, w)] {
        if patch == 0 || patch % cell != 0 || patch > limit {
            return Err(Error::Config(format!(
                "tile {name} {patch} must be a positive multiple of the cell \
                 {cell} and fit the {h}x{w} extent (pad the frame or pass an \
                 explicit tile size)"
            )));
        }
    }
    let stride_y = if opts.stride_y == 0 { patch_h } else { opts.stride_y };
    let stride_x = if opts.stride_x == 0 { patch_w } else { opts.stride_x };
    if stride_y > patch_h || stride_x > patch_w {
        return Err(Error::Config(format!(
            "stride {stride_y}x{stride_x} exceeds the tile {patch_h}x{patch_w}; \
             the cover would leave holes"
        )));
    }

    let tokens_per_tile = (patch_h / cell) * (patch_w / cell);
    if tokens_per_tile > opts.token_budget {
        return Err(Error::Config(format!(
            "one {patch_h}x{patch_w} tile needs {tokens_per_tile} tokens, over \
             the budget {}",
            opts.token_budget
        )));
    }
    let ys = origins(h, patch_h, stride_y);
    let xs = origins(w, patch_w, stride_x);
    let mut specs = Vec::with_capacity(ys.len() * xs.len());
    for &y in &ys {
        for &x in &xs {
            let index = specs.len();
            specs.push(PatchSpec { index, x, y, h: patch_h, w: patch_w });
        }
    }

    let row_tokens = xs.len() * tokens_per_tile;
    let total_tokens = specs.len() * tokens_per_tile;
    let row_banded = total_tokens > opts.token_budget;
    let mut outputs = Vec::with_capacity(specs.len());
    if !row_banded {
        outputs = run_cover(params, rgb, coarse_depth, coarse_normal, &specs, opts.variant)?;
    } else {
        // Row-band fallback: bundle as many whole tile rows as fit the
        // budget; tiles keep their global coordinates, but attention does
        // not cross band boundaries.
        let rows_per_band = (opts.token_budget / row_tokens).max(1);
        for band in specs.chunks(rows_per_band * xs.len()) {
            outputs.extend(run_cover(
                params,
                rgb,
                coarse_depth,
                coarse_normal,
                band,
                opts.variant,
            )?);
        }
    }

    let depth_tiles: Vec<(PatchSpec, Tensor)> =
        outputs.iter().map(|(s, d, _)| (*s, d.clone())).collect();
    let normal_tiles: Vec<(PatchSpec, Tensor)> =
        outputs.into_iter().map(|(s, _, n)| (s, n)).collect();
    let depth = assemble(extent, &depth_tiles)?;
    let mut normal = assemble(extent, &normal_tiles)?;
    // Overlap averaging can shrink normals (or cancel them outright);
    // renormalize, falling back to the coarse input where degenerate.
    for y in 0..h {
        for x in 0..w {
            let v = [normal.get3(0, y, x), normal.get3(1, y, x), normal.get3(2, y, x)];
            let len = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
            let out = if len.is_finite() && len > 1e-8 {
                snap_unit3(v)
            } else {
                [
                    coarse_normal.get3(0, y, x),
                    coarse_normal.get3(1, y, x),
                    coarse_normal.get3(2, y, x),
                ]
            };
            for c in 0..3 {
                normal.set3(c, y, x, out[c]);
            }
        }
    }
    Ok(InferResult { depth, normal, tiles: depth_tiles, row_banded })
}

/// Unweighted field-wise mean of per-frame (or per-seed) reports.
pub fn mean_reports(reports: &[MetricReport]) -> MetricReport {
    let n = reports.len() as f64;
    let mut sum = MetricReport::default();
    for r in reports {
        sum.absrel += r.absrel;
        sum.delta1 += r.delta1;
        sum.rmse += r.rmse;
        sum.ce += r.ce;
        sum.pdbe_acc += r.pdbe_acc;
        sum.pdbe_compl += r.pdbe_compl;
        sum.normal_mean += r.normal_mean;
        sum.normal_median += r.normal_median;
        sum.normal_rms += r.normal_rms;
        sum.pct_5 += r.pct_5;
        sum.pct_11_25 += r.pct_11_25;
        sum.pct_30 += r.pct_30;
    }
    MetricReport {
        absrel: sum.absrel / n,
        delta1: sum.delta1 / n,
        rmse: sum.rmse / n,
        ce: sum.ce / n,
        pdbe_acc: sum.pdbe_acc / n,
        pdbe_compl: sum.pdbe_compl / n,
        normal_mean: sum.normal_mean / n,
        normal_median: sum.normal_median / n,
        normal_rms: sum.normal_rms / n,
        pct_5: sum.pct_5 / n,
        pct_11_25: sum.pct_11_25 / n,
        pct_30: sum.pct_30 / n,
    }
}

fn score_frame(
    pred_depth: &Tensor,
    pred_normal: &Tensor,
    gt_depth: &Tensor,
    gt_normal: &Tensor,
    ce: f64,
) -> Result<MetricReport> {
    let (absrel, delta1, rmse) = depth_metrics(pred_depth, gt_depth, None)?;
    let boundary = pdbe(pred_depth, gt_depth)?;
    let stats = normal_metrics(pred_normal, gt_normal, None)?;
    Ok(MetricReport {
        absrel,
        delta1,
        rmse,
        ce,
        pdbe_acc: boundary.acc,
        pdbe_compl: boundary.compl,
        normal_mean: stats.mean,
        normal_median: stats.median,
        normal_rms: stats.rms,
        pct_5: stats.pct_5,
        pct_11_25: stats.pct_11_25,
        pct_30: stats.pct_30,
    })
}

/// Seam-overlap geometry for the consistency metric: tiles stepped by
/// patch − band so neighbors share a band-wide strip.
fn ce_options(opts: &InferOptions, extent: ImageExtent) -> (InferOptions, usize) {
    let patch_h = if opts.patch_h == 0 { extent.h / 4 } else { opts.patch_h };
    let patch_w = if opts.patch_w == 0 { extent.w / 4 } else { opts.patch_w };
    let band = ce_band(patch_h).max(1);
    let mut second = *opts;
    second.patch_h = patch_h;
    second.patch_w = patch_w;
    second.stride_y = (patch_h - band.min(patch_h - 1)).max(1);
    second.stride_x = (patch_w - band.min(patch_w - 1)).max(1);
    (second, band)
}

/// Scores a model on one split: non-overlapping inference for the depth and
/// normal metrics, plus an overlapped second pass for the consistency error.
/// Aggregation is an unweighted mean over frames.
pub fn evaluate(
    params: &ModelParams,
    dataset: &Dataset,
    split: Split,
    opts: &InferOptions,
) -> Result<MetricReport> {
    let indices = dataset.split_indices(split);
    if indices.is_empty() {
        return Err(Error::Config(format!("split {} is empty", split.name())));
    }
    let reports: Vec<MetricReport> = indices
        .par_iter()
        .map(|&i| {
            let frame = dataset.load_frame(i)?;
            let result =
                infer(params, &frame.gt.rgb, &frame.coarse_depth, &frame.coarse_normal, opts)?;
            let (second_opts, band) = ce_options(opts, frame.extent());
            let second = infer(
                params,
                &frame.gt.rgb,
                &frame.coarse_depth,
                &frame.coarse_normal,
                &second_opts,
            )?;
            let ce = consistency_error(&second.tiles, band)?;
            score_frame(&result.depth, &result.normal, &frame.gt.depth, &frame.gt.normal, ce)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_reports(&reports))
}

/// Baseline row: scores the coarse inputs themselves. The consistency pass
/// cuts tiles from the coarse raster, so its CE is zero by construction.
pub fn evaluate_coarse(
    dataset: &Dataset,
    split: Split,
    opts: &InferOptions,
) -> Result<MetricReport> {
    let indices = dataset.split_indices(split);
    if indices.is_empty() {
        return Err(Error::Config(format!("split {} is empty", split.name())));
    }
    let reports: Vec<MetricReport> = indices
        .par_iter()
        .map(|&i| {
            let frame = dataset.load_frame(i)?;
            let extent = frame.extent();
            let (second_opts, band) = ce_options(opts, extent);
            let ys = origins(extent.h, second_opts.patch_h, second_opts.stride_y);
            let xs = origins(extent.w, second_opts.patch_w, second_opts.stride_x);
            let mut tiles = Vec::with_capacity(ys.len() * xs.len());
            for &y in &ys {
                for &x in &xs {
                    let spec = PatchSpec {
                        index: tiles.len(),
                        x,
                        y,
                        h: second_opts.patch_h,
                        w: second_opts.patch_w,
                    };
                    tiles.push((
                        spec,
                        crop2(&frame.coarse_depth, x, y, spec.h, spec.w),
                    ));
                }
            }
            let ce = consistency_error(&tiles, band)?;
            score_frame(
                &frame.coarse_depth,
                &frame.coarse_normal,
                &frame.gt.depth,
                &frame.gt.normal,
                ce,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(mean_reports(&reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelDims;
    use crate::pfm::write_pfm;
    use crate::scene::{make_dataset, render, DatasetParams, SceneSpec};
    use crate::camera::CameraModel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::path::PathBuf;

    fn tiny_dims() -> ModelDims {
        ModelDims { blocks: 1, width: 8, heads: 2, cell: 2 }
    }

    fn tiny_params(seed: u64) -> ModelParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ModelParams::init(tiny_dims(), &mut rng).unwrap()
    }

    fn tiny_dataset(scenes: usize) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let params = DatasetParams {
            scenes,
            extent: ImageExtent { h: 16, w: 16 },
            seed: 21,
            downsample: 4,
            blur: 1.5,
            bias: 0.05,
        };
        let manifest = make_dataset(&params, dir.path()).unwrap();
        (dir, manifest)
    }

    fn bits(t: &Tensor) -> Vec<u64> {
        t.data().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn fresh_initialization_is_the_identity_refiner() {
        let (_dir, manifest) = tiny_dataset(2);
        let ds = Dataset::load(&manifest).unwrap();
        let frame = ds.load_frame(0).unwrap();
        let params = tiny_params(5);
        let out = infer(
            &params,
            &frame.gt.rgb,
            &frame.coarse_depth,
            &frame.coarse_normal,
            &InferOptions::default(),
        )
        .unwrap();
        assert!(!out.row_banded);
        assert_eq!(bits(&out.depth), bits(&frame.coarse_depth));
        assert_eq!(bits(&out.normal), bits(&frame.coarse_normal));
    }

    #[test]
    fn default_cover_is_the_four_by_four_training_grid() {
        let (_dir, manifest) = tiny_dataset(1);
        let ds = Dataset::load(&manifest).unwrap();
        let frame = ds.load_frame(0).unwrap();
        let out = infer(
            &tiny_params(5),
            &frame.gt.rgb,
            &frame.coarse_depth,
            &frame.coarse_normal,
            &InferOptions::default(),
        )
        .unwrap();
        assert_eq!(out.tiles.len(), 16);
        let mut origins: Vec<(usize, usize)> =
            out.tiles.iter().map(|(s, _)| (s.y, s.x)).collect();
        origins.sort();
        let want: Vec<(usize, usize)> = (0..4)
            .flat_map(|y| (0..4).map(move |x| (y * 4, x * 4)))
            .collect();
        assert_eq!(origins, want);
        assert!(out.tiles.iter().all(|(s, _)| s.h == 4 && s.w == 4));
    }

    #[test]
    fn half_stride_averaging_keeps_constant_scenes_constant() {
        let h = 16;
        let rgb = Tensor::full(&[3, h, h], 0.5);
        let depth = Tensor::full(&[h, h], 2.0);
        let normal = Tensor::from_fn(&[3, h, h], |i| f64::from(i >= 2 * h * h));
        let opts = InferOptions { stride_y: 2, stride_x: 2, ..InferOptions::default() };
        let out = infer(&tiny_params(9), &rgb, &depth, &normal, &opts).unwrap();
        assert_eq!(bits(&out.depth), bits(&depth));
        assert_eq!(bits(&out.normal), bits(&normal));
        assert!(out.tiles.len() > 16, "half stride must overlap tiles");
    }

    #[test]
    fn row_banding_flags_and_still_matches_the_identity() {
        let (_dir, manifest) = tiny_dataset(1);
        let ds = Dataset::load(&manifest).unwrap();
        let frame = ds.load_frame(0).unwrap();
        // One tile row is 4 tiles x 4 tokens; a budget of 16 forces bands.
        let opts = InferOptions { token_budget: 16, ..InferOptions::default() };
        let out = infer(
            &tiny_params(5),
            &frame.gt.rgb,
            &frame.coarse_depth,
            &frame.coarse_normal,
            &opts,
        )
        .unwrap();
        assert!(out.row_banded);
        assert_eq!(bits(&out.depth), bits(&frame.coarse_depth));
        assert_eq!(bits(&out.normal), bits(&frame.coarse_normal));
    }

    #[test]
    fn non_divisible_extents_suggest_padding() {
        let h = 17;
        let rgb = Tensor::full(&[3, h, h], 0.5);
        let depth = Tensor::full(&[h, h], 2.0);
        let normal = Tensor::from_fn(&[3, h, h], |i| f64::from(i >= 2 * h * h));
        let err =
            infer(&tiny_params(5), &rgb, &depth, &normal, &InferOptions::default()).unwrap_err();
        assert!(err.to_string().contains("multiple"), "{err}");
    }

    #[test]
    fn evaluating_ground_truth_against_itself_is_perfect() {
        // Manifest whose coarse columns point at the ground-truth files.
        let dir = tempfile::tempdir().unwrap();
        let mut lines = String::new();
        for (i, camera) in [
            CameraModel::Orthographic,
            CameraModel::Pinhole { fx: 24.0, fy: 24.0, cx: 7.5, cy: 7.5 },
        ]
        .iter()
        .enumerate()
        {
            let mut rng = ChaCha8Rng::seed_from_u64(31 + i as u64);
            let spec = SceneSpec {
                camera: *camera,
                ..crate::scene::random_scene(ImageExtent { h: 16, w: 16 }, *camera, &mut rng)
            };
            let frame = render(&spec, ImageExtent { h: 16, w: 16 }).unwrap();
            for (name, raster) in [
                (format!("f{i}_rgb.pfm"), &frame.rgb),
                (format!("f{i}_depth.pfm"), &frame.depth),
                (format!("f{i}_normal.pfm"), &frame.normal),
            ] {
                write_pfm(&dir.path().join(name), raster).unwrap();
            }
            lines.push_str(&format!(
                "f{i}\ttest\tf{i}_rgb.pfm\tf{i}_depth.pfm\tf{i}_normal.pfm\t\
                 f{i}_depth.pfm\tf{i}_normal.pfm\t{}\n",
                camera.to_params_string()
            ));
        }
        let manifest = dir.path().join("manifest.tsv");
        std::fs::write(&manifest, lines).unwrap();
        let ds = Dataset::load(&manifest).unwrap();
        let report =
            evaluate(&tiny_params(5), &ds, Split::Test, &InferOptions::default()).unwrap();
        assert_eq!(report.absrel, 0.0);
        assert_eq!(report.delta1, 1.0);
        assert_eq!(report.rmse, 0.0);
        assert_eq!(report.ce, 0.0);
        assert_eq!(report.pdbe_acc, 0.0);
        assert_eq!(report.pdbe_compl, 0.0);
        assert!(report.normal_mean < 1e-5, "mean {}", report.normal_mean);
        assert_eq!(report.pct_5, 1.0);
    }

    #[test]
    fn coarse_baseline_equals_the_untrained_model() {
        let (_dir, manifest) = tiny_dataset(3);
        let ds = Dataset::load(&manifest).unwrap();
        let opts = InferOptions::default();
        // At n=3 the split is two train frames plus one test frame.
        let with_model = evaluate(&tiny_params(5), &ds, Split::Train, &opts).unwrap();
        let baseline = evaluate_coarse(&ds, Split::Train, &opts).unwrap();
        for (name, a, b) in [
            ("absrel", with_model.absrel, baseline.absrel),
            ("delta1", with_model.delta1, baseline.delta1),
            ("rmse", with_model.rmse, baseline.rmse),
            ("ce", with_model.ce, baseline.ce),
            ("pdbe_acc", with_model.pdbe_acc, baseline.pdbe_acc),
            ("pdbe_compl", with_model.pdbe_compl, baseline.pdbe_compl),
            ("normal_mean", with_model.normal_mean, baseline.normal_mean),
            ("normal_median", with_model.normal_median, baseline.normal_median),
            ("normal_rms", with_model.normal_rms, baseline.normal_rms),
            ("pct_5", with_model.pct_5, baseline.pct_5),
            ("pct_11_25", with_model.pct_11_25, baseline.pct_11_25),
            ("pct_30", with_model.pct_30, baseline.pct_30),
        ] {
            assert_eq!(a, b, "{name}: identity model {a} vs coarse baseline {b}");
            assert!(a.is_finite(), "{name} not finite");
        }
    }
}
