//! Patch-grid geometry: grid-size sampling, patch placement, crop
//! extraction, global token coordinates, and reassembly of per-patch
//! outputs into full-resolution maps.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::{Rng, RngExt};

/// Training patches are a quarter of the image per side.
pub const PATCH_DIV: usize = 4;

const PROB_SUM_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ImageExtent {
    pub h: usize,
    pub w: usize,
}

impl ImageExtent {
    pub fn new(h: usize, w: usize) -> Self {
        ImageExtent { h, w }
    }

    /// Both sides must split into quarter patches made of whole cells.
    pub fn validate(&self, cell: usize) -> Result<()> {
        for (name, n) in [("height", self.h), ("width", self.w)] {
            if n == 0 || n % PATCH_DIV != 0 || (n / PATCH_DIV) % cell != 0 {
                return Err(Error::Config(format!(
                    "{name} {n} not divisible into {PATCH_DIV} patches of whole {cell}px cells"
                )));
            }
        }
        Ok(())
    }

    pub fn patch_h(&self) -> usize {
        self.h / PATCH_DIV
    }

    pub fn patch_w(&self) -> usize {
        self.w / PATCH_DIV
    }
}

/// Probability of drawing each grid side 1..=4.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridProbs {
    pub rho: [f64; 4],
}

impl GridProbs {
    /// Mix used for training: biased towards larger grids.
    pub fn default_mix() -> Self {
        GridProbs {
            rho: [0.1, 0.2, 0.3, 0.4],
        }
    }
}

/// Draws a grid side M in 1..=4 with probability rho[M-1].
pub fn choose_config<R: Rng>(probs: &GridProbs, rng: &mut R) -> Result<usize> {
    if probs.rho.iter().any(|&p| p < 0.0) {
        return Err(Error::Config(format!(
            "grid probabilities must be non-negative, got {:?}",
            probs.rho
        )));
    }
    let sum: f64 = probs.rho.iter().sum();
    if (sum - 1.0).abs() > PROB_SUM_TOL {
        return Err(Error::Config(format!(
            "grid probabilities sum to {sum}, expected 1"
        )));
    }
    let x = rng.random::<f64>();
    let mut cum = 0.0;
    for (i, &p) in probs.rho.iter().enumerate() {
        cum += p;
        if x < cum {
            return Ok(i + 1);
        }
    }
    Ok(4)
}

/// One patch window: `index` within its set, top-left `(x, y)` in source
/// pixels, size `(h, w)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchSpec {
    pub index: usize,
    pub x: usize,
    pub y: usize,
    pub h: usize,
    pub w: usize,
}

impl PatchSpec {
    pub fn contains(&self, extent: ImageExtent) -> bool {
        self.x + self.w <= extent.w && self.y + self.h <= extent.h
    }
}

/// An M x M block of contiguous patches sharing one grid origin.
#[derive(Clone, Debug)]
pub struct PatchSet {
    pub m: usize,
    pub extent: ImageExtent,
    pub patches: Vec<PatchSpec>,
}

/// Places an M x M patch grid fully inside the image. The origin is drawn
/// uniformly over cell-aligned positions so token lattices never straddle
/// cells; M=4 tiles the image exactly from (0, 0).
pub fn sample_grid<R: Rng>(
    extent: ImageExtent,
    m: usize,
    cell: usize,
    rng: &mut R,
) -> Result<PatchSet> {
    if !(1..=4).contains(&m) {
        return Err(Error::Config(format!("grid side {m} outside 1..=4")));
    }
    extent.validate(cell)?;
    let (h_p, w_p) = (extent.patch_h(), extent.patch_w());
    let (ox, oy) = if m == PATCH_DIV {
        (0, 0)
    } else {
        let max_x = (extent.w - m * w_p) / cell;
        let max_y = (extent.h - m * h_p) / cell;
        (
            rng.random_range(0..=max_x) * cell,
            rng.random_range(0..=max_y) * cell,
        )
    };
    let mut patches = Vec::with_capacity(m * m);
    for gy in 0..m {
        for gx in 0..m {
            patches.push(PatchSpec {
                index: gy * m + gx,
                x: ox + gx * w_p,
                y: oy + gy * h_p,
                h: h_p,
                w: w_p,
            });
        }
    }
    Ok(PatchSet { m, extent, patches })
}

/// Local pixel (u, v) of a patch mapped into source-image coordinates.
pub fn global_coords(spec: &PatchSpec, u: usize, v: usize) -> (usize, usize) {
    debug_assert!(u < spec.w && v < spec.h, "local pixel outside patch");
    (u + spec.x, v + spec.y)
}

/// Pixel-exact window copy from an [h, w] map.
pub fn crop2(map: &Tensor, x: usize, y: usize, h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[h, w], |i| map.get2(y + i / w, x + i % w))
}

/// Pixel-exact window copy from a [C, h, w] map.
pub fn crop3(map: &Tensor, x: usize, y: usize, h: usize, w: usize) -> Tensor {
    let ch = map.shape()[0];
    Tensor::from_fn(&[ch, h, w], |i| {
        let (c, rest) = (i / (h * w), i % (h * w));
        map.get3(c, y + rest / w, x + rest % w)
    })
}

/// The aligned inputs the model sees for one patch.
#[derive(Clone, Debug)]
pub struct PatchCrops {
    pub spec: PatchSpec,
    pub rgb: Tensor,
    pub depth: Tensor,
    pub normal: Tensor,
}

/// Cuts rgb [3,H,W], coarse depth [H,W], and coarse normal [3,H,W] windows
/// for every patch of the set. No resampling: crops are exact windows.
pub fn extract(
    rgb: &Tensor,
    depth: &Tensor,
    normal: &Tensor,
    set: &PatchSet,
) -> Result<Vec<PatchCrops>> {
    let (h, w) = (set.extent.h, set.extent.w);
    for (name, t, want) in [
        ("rgb", rgb, vec![3, h, w]),
        ("coarse depth", depth, vec![h, w]),
        ("coarse normal", normal, vec![3, h, w]),
    ] {
        if t.shape() != want.as_slice() {
            return Err(Error::Shape {
                op: "extract",
                lhs: t.shape().to_vec(),
                rhs: want,
            });
        }
        let _ = name;
    }
    Ok(set
        .patches
        .iter()
        .map(|p| PatchCrops {
            spec: *p,
            rgb: crop3(rgb, p.x, p.y, p.h, p.w),
            depth: crop2(depth, p.x, p.y, p.h, p.w),
            normal: crop3(normal, p.x, p.y, p.h, p.w),
        })
        .collect())
}

/// Writes per-patch maps back into a full-resolution canvas. Tiles may be
/// [h, w] or [C, h, w]; overlapping pixels are averaged with uniform
/// weights, and any pixel no tile covers is an error naming the first hole.
pub fn assemble(extent: ImageExtent, tiles: &[(PatchSpec, Tensor)]) -> Result<Tensor> {
    let channels = match tiles.first() {
        Some((_, t)) if t.shape().len() == 3 => t.shape()[0],
        _ => 1,
    };
    for (spec, t) in tiles {
        let want: Vec<usize> = if t.shape().len() == 3 {
            vec![channels, spec.h, spec.w]
        } else {
            vec![spec.h, spec.w]
        };
        if t.shape() != want.as_slice() {
            return Err(Error::Shape {
                op: "assemble",
                lhs: t.shape().to_vec(),
                rhs: want,
            });
        }
        if !spec.contains(extent) {
            return Err(Error::Config(format!(
                "tile at ({}, {}) size {}x{} leaves the {}x{} canvas",
                spec.x, spec.y, spec.h, spec.w, extent.h, extent.w
            )));
        }
    }

    let (h, w) = (extent.h, extent.w);
    let mut acc = vec![0.0f64; channels * h * w];
    let mut count = vec![0u32; h * w];
    for (spec, t) in tiles {
        for dy in 0..spec.h {
            for dx in 0..spec.w {
                let (gy, gx) = (spec.y + dy, spec.x + dx);
                count[gy * w + gx] += 1;
                for c in 0..channels {
                    let v = if t.shape().len() == 3 {
                        t.get3(c, dy, dx)
                    } else {
                        t.get2(dy, dx)
                    };
                    acc[c * h * w + gy * w + gx] += v;
                }
            }
        }
    }

    let holes = count.iter().filter(|&&c| c == 0).count();
    if holes > 0 {
        let first = count.iter().position(|&c| c == 0).unwrap();
        return Err(Error::Coverage {
            count: holes,
            x: first % w,
            y: first / w,
        });
    }

    for (p, &n) in count.iter().enumerate() {
        for c in 0..channels {
            acc[c * h * w + p] /= n as f64;
        }
    }
    let shape: Vec<usize> = if channels == 1 {
        vec![h, w]
    } else {
        vec![channels, h, w]
    };
    Tensor::new(&shape, acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const CELL: usize = 4;

    #[test]
    fn degenerate_distributions_are_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let all4 = GridProbs { rho: [0.0, 0.0, 0.0, 1.0] };
        let all1 = GridProbs { rho: [1.0, 0.0, 0.0, 0.0] };
        for _ in 0..100 {
            assert_eq!(choose_config(&all4, &mut rng).unwrap(), 4);
            assert_eq!(choose_config(&all1, &mut rng).unwrap(), 1);
        }
    }

    #[test]
    fn bad_probabilities_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let short = GridProbs { rho: [0.2, 0.2, 0.2, 0.2] };
        assert!(matches!(choose_config(&short, &mut rng), Err(Error::Config(_))));
        let neg = GridProbs { rho: [-0.5, 0.5, 0.5, 0.5] };
        assert!(matches!(choose_config(&neg, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn frequencies_match_mix_within_3_sigma() {
        let probs = GridProbs::default_mix();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let n = 10_000usize;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[choose_config(&probs, &mut rng).unwrap() - 1] += 1;
        }
        for (i, &c) in counts.iter().enumerate() {
            let p = probs.rho[i];
            let sigma = (n as f64 * p * (1.0 - p)).sqrt();
            let dev = (c as f64 - n as f64 * p).abs();
            assert!(dev <= 3.0 * sigma, "M={} count {c} dev {dev} > 3σ {sigma}", i + 1);
        }
    }

    #[test]
    fn total_variation_converges_over_1e5_draws() {
        let probs = GridProbs::default_mix();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let n = 100_000usize;
        let mut counts = [0usize; 4];
        for _ in 0..n {
            counts[choose_config(&probs, &mut rng).unwrap() - 1] += 1;
        }
        let tv: f64 = counts
            .iter()
            .zip(&probs.rho)
            .map(|(&c, &p)| (c as f64 / n as f64 - p).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.01, "tv distance {tv}");
    }

    #[test]
    fn full_grid_tiles_the_image_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let set = sample_grid(ImageExtent::new(64, 64), 4, CELL, &mut rng).unwrap();
        assert_eq!(set.patches.len(), 16);
        let origins: Vec<(usize, usize)> = set.patches.iter().map(|p| (p.x, p.y)).collect();
        for gy in 0..4 {
            for gx in 0..4 {
                assert_eq!(origins[gy * 4 + gx], (gx * 16, gy * 16));
            }
        }
        // partition: every pixel covered exactly once
        let mut hits = vec![0u32; 64 * 64];
        for p in &set.patches {
            assert_eq!((p.h, p.w), (16, 16));
            for dy in 0..p.h {
                for dx in 0..p.w {
                    hits[(p.y + dy) * 64 + p.x + dx] += 1;
                }
            }
        }
        assert!(hits.iter().all(|&h| h == 1));
    }

    #[test]
    fn single_patch_origin_spans_the_containment_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (mut seen_zero, mut seen_max) = (false, false);
        for _ in 0..2000 {
            let set = sample_grid(ImageExtent::new(64, 64), 1, CELL, &mut rng).unwrap();
            let p = &set.patches[0];
            assert!(p.x <= 48 && p.y <= 48);
            assert_eq!(p.x % CELL, 0);
            assert_eq!(p.y % CELL, 0);
            seen_zero |= p.x == 0;
            seen_max |= p.x == 48;
        }
        assert!(seen_zero && seen_max, "uniform origin should reach both ends");
    }

    #[test]
    fn three_grid_origin_respects_derived_bound() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let set = sample_grid(ImageExtent::new(64, 64), 3, CELL, &mut rng).unwrap();
            assert_eq!(set.patches.len(), 9);
            let (ox, oy) = (set.patches[0].x, set.patches[0].y);
            assert!(ox <= 16 && oy <= 16, "origin ({ox},{oy}) beyond 64 - 3*16");
        }
    }

    #[test]
    fn containment_holds_for_1e5_draws_across_all_m() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let extent = ImageExtent::new(96, 128);
        for i in 0..100_000 {
            let m = i % 4 + 1;
            let set = sample_grid(extent, m, CELL, &mut rng).unwrap();
            for p in &set.patches {
                assert!(p.contains(extent), "draw {i} m {m} spec {p:?}");
            }
        }
    }

    fn random_frame(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (Tensor, Tensor, Tensor) {
        let rgb = Tensor::from_fn(&[3, h, w], |_| rng.random::<f64>());
        let depth = Tensor::from_fn(&[h, w], |_| rng.random::<f64>() + 0.5);
        let normal = Tensor::from_fn(&[3, h, w], |_| rng.random::<f64>() - 0.5);
        (rgb, depth, normal)
    }

    #[test]
    fn constant_frame_gives_constant_crops() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let set = sample_grid(ImageExtent::new(32, 32), 2, CELL, &mut rng).unwrap();
        let rgb = Tensor::full(&[3, 32, 32], 0.25);
        let depth = Tensor::full(&[32, 32], 2.0);
        let normal = Tensor::full(&[3, 32, 32], 0.5);
        for crops in extract(&rgb, &depth, &normal, &set).unwrap() {
            assert!(crops.rgb.data().iter().all(|&v| v == 0.25));
            assert!(crops.depth.data().iter().all(|&v| v == 2.0));
            assert!(crops.normal.data().iter().all(|&v| v == 0.5));
        }
    }

    #[test]
    fn ramp_depth_crop_starts_at_patch_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let set = sample_grid(ImageExtent::new(64, 64), 1, CELL, &mut rng).unwrap();
        let rgb = Tensor::zeros(&[3, 64, 64]);
        let depth = Tensor::from_fn(&[64, 64], |i| (i % 64) as f64 + 1.0);
        let normal = Tensor::zeros(&[3, 64, 64]);
        let crops = extract(&rgb, &depth, &normal, &set).unwrap();
        let p = crops[0].spec;
        assert_eq!(crops[0].depth.get2(0, 0), p.x as f64 + 1.0);
    }

    #[test]
    fn crops_equal_direct_indexing() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (rgb, depth, normal) = random_frame(&mut rng, 64, 64);
        for m in 1..=4 {
            let set = sample_grid(ImageExtent::new(64, 64), m, CELL, &mut rng).unwrap();
            for crops in extract(&rgb, &depth, &normal, &set).unwrap() {
                let p = crops.spec;
                for dy in 0..p.h {
                    for dx in 0..p.w {
                        assert_eq!(crops.depth.get2(dy, dx), depth.get2(p.y + dy, p.x + dx));
                        for c in 0..3 {
                            assert_eq!(
                                crops.rgb.get3(c, dy, dx),
                                rgb.get3(c, p.y + dy, p.x + dx)
                            );
                            assert_eq!(
                                crops.normal.get3(c, dy, dx),
                                normal.get3(c, p.y + dy, p.x + dx)
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn extract_rejects_mismatched_extent() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let set = sample_grid(ImageExtent::new(64, 64), 2, CELL, &mut rng).unwrap();
        let rgb = Tensor::zeros(&[3, 32, 32]);
        let depth = Tensor::zeros(&[64, 64]);
        let normal = Tensor::zeros(&[3, 64, 64]);
        assert!(matches!(
            extract(&rgb, &depth, &normal, &set),
            Err(Error::Shape { op: "extract", .. })
        ));
    }

    #[test]
    fn global_coords_adds_the_origin() {
        let at_zero = PatchSpec { index: 0, x: 0, y: 0, h: 16, w: 16 };
        assert_eq!(global_coords(&at_zero, 5, 7), (5, 7));
        let shifted = PatchSpec { index: 0, x: 32, y: 16, h: 16, w: 16 };
        assert_eq!(global_coords(&shifted, 5, 7), (37, 23));
    }

    #[test]
    fn full_tiling_cell_coords_are_a_bijection() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let set = sample_grid(ImageExtent::new(64, 64), 4, CELL, &mut rng).unwrap();
        let mut seen = vec![false; (64 / CELL) * (64 / CELL)];
        for p in &set.patches {
            for cv in (0..p.h).step_by(CELL) {
                for cu in (0..p.w).step_by(CELL) {
                    let (gu, gv) = global_coords(p, cu, cv);
                    assert_eq!(gu % CELL, 0);
                    assert_eq!(gv % CELL, 0);
                    let idx = (gv / CELL) * (64 / CELL) + gu / CELL;
                    assert!(!seen[idx], "cell ({gu},{gv}) produced twice");
                    seen[idx] = true;
                }
            }
        }
        assert!(seen.iter().all(|&s| s), "some cell coordinate never produced");
    }

    #[test]
    fn full_tiling_of_ones_assembles_to_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let set = sample_grid(ImageExtent::new(64, 64), 4, CELL, &mut rng).unwrap();
        let tiles: Vec<(PatchSpec, Tensor)> = set
            .patches
            .iter()
            .map(|p| (*p, Tensor::full(&[p.h, p.w], 1.0)))
            .collect();
        let out = assemble(set.extent, &tiles).unwrap();
        assert!(out.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn overlap_band_averages_uniformly() {
        let extent = ImageExtent::new(16, 24);
        let a = PatchSpec { index: 0, x: 0, y: 0, h: 16, w: 16 };
        let b = PatchSpec { index: 1, x: 8, y: 0, h: 16, w: 16 };
        let tiles = vec![
            (a, Tensor::full(&[16, 16], 0.0)),
            (b, Tensor::full(&[16, 16], 2.0)),
        ];
        let out = assemble(extent, &tiles).unwrap();
        for y in 0..16 {
            for x in 0..24 {
                let want = if x < 8 {
                    0.0
                } else if x < 16 {
                    1.0
                } else {
                    2.0
                };
                assert_eq!(out.get2(y, x), want, "pixel ({x},{y})");
            }
        }
    }

    #[test]
    fn assemble_matches_scatter_accumulate_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let extent = ImageExtent::new(32, 32);
        // random overlapped cover: full tiling plus extra random tiles
        let mut tiles: Vec<(PatchSpec, Tensor)> = Vec::new();
        let set = sample_grid(extent, 4, CELL, &mut rng).unwrap();
        for p in &set.patches {
            tiles.push((*p, Tensor::from_fn(&[p.h, p.w], |_| rng.random::<f64>())));
        }
        for i in 0..5 {
            let spec = PatchSpec {
                index: 16 + i,
                x: rng.random_range(0..=24),
                y: rng.random_range(0..=24),
                h: 8,
                w: 8,
            };
            tiles.push((spec, Tensor::from_fn(&[8, 8], |_| rng.random::<f64>())));
        }
        let out = assemble(extent, &tiles).unwrap();

        let mut acc = vec![0.0f64; 32 * 32];
        let mut cnt = vec![0u32; 32 * 32];
        for (spec, t) in &tiles {
            for dy in 0..spec.h {
                for dx in 0..spec.w {
                    acc[(spec.y + dy) * 32 + spec.x + dx] += t.get2(dy, dx);
                    cnt[(spec.y + dy) * 32 + spec.x + dx] += 1;
                }
            }
        }
        for p in 0..32 * 32 {
            assert_eq!(out.data()[p], acc[p] / cnt[p] as f64);
        }
    }

    #[test]
    fn uncovered_pixels_raise_a_coverage_error() {
        let extent = ImageExtent::new(16, 16);
        let spec = PatchSpec { index: 0, x: 0, y: 0, h: 8, w: 8 };
        let tiles = vec![(spec, Tensor::full(&[8, 8], 1.0))];
        match assemble(extent, &tiles) {
            Err(Error::Coverage { count, x, y }) => {
                assert_eq!(count, 16 * 16 - 8 * 8);
                assert_eq!((x, y), (8, 0), "first hole scans row-major");
            }
            other => panic!("expected coverage error, got {other:?}"),
        }
    }

    #[test]
    fn extract_then_assemble_is_identity_on_a_tiling() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (rgb, depth, normal) = random_frame(&mut rng, 64, 64);
        let set = sample_grid(ImageExtent::new(64, 64), 4, CELL, &mut rng).unwrap();
        let crops = extract(&rgb, &depth, &normal, &set).unwrap();
        let d_tiles: Vec<(PatchSpec, Tensor)> =
            crops.iter().map(|c| (c.spec, c.depth.clone())).collect();
        let n_tiles: Vec<(PatchSpec, Tensor)> =
            crops.iter().map(|c| (c.spec, c.normal.clone())).collect();
        assert_eq!(assemble(set.extent, &d_tiles).unwrap(), depth);
        assert_eq!(assemble(set.extent, &n_tiles).unwrap(), normal);
    }
}
