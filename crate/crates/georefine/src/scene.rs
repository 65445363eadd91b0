//! Synthetic desk-scale scenes: ray-cast ground truth (depth, analytic
//! normals, shaded rgb) plus a controlled degradation that fakes the coarse
//! prior the refiner is trained to correct.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::camera::CameraModel;
use crate::error::{Error, Result};
use crate::grid::ImageExtent;
use crate::normals::{pseudo_normals, NORMAL_WINDOW};
use crate::pfm::write_pfm;
use crate::tensor::{snap_unit3, Tensor};

#[derive(Clone, Copy, Debug)]
pub enum Primitive {
    Sphere {
        center: [f64; 3],
        radius: f64,
    },
    /// Axis-aligned box.
    Box {
        center: [f64; 3],
        half: [f64; 3],
    },
    /// World plane z = d0 + a*x + b*y, visible only inside an image-space
    /// window (u0, v0, u1, v1) — a floating rectangular decal with crisp
    /// silhouette edges.
    PlanePatch {
        region: [f64; 4],
        plane: [f64; 3],
    },
}

/// Everything needed to render one frame deterministically.
#[derive(Clone, Debug)]
pub struct SceneSpec {
    pub camera: CameraModel,
    /// Background world plane z = d0 + a*x + b*y as [d0, a, b].
    pub background: [f64; 3],
    pub primitives: Vec<Primitive>,
    pub albedo_seed: u64,
}

/// One rendered frame with its ground truth.
#[derive(Clone, Debug)]
pub struct GeometryFrame {
    /// [3, H, W] in [0, 1].
    pub rgb: Tensor,
    /// [H, W], strictly positive.
    pub depth: Tensor,
    /// [3, H, W], unit length, camera-facing (n_z >= 0).
    pub normal: Tensor,
    pub extent: ImageExtent,
    pub camera: CameraModel,
}

impl GeometryFrame {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.extent.h, self.extent.w);
        if self.depth.shape() != [h, w]
            || self.rgb.shape() != [3, h, w]
            || self.normal.shape() != [3, h, w]
        {
            return Err(Error::Shape {
                op: "geometry frame",
                lhs: self.depth.shape().to_vec(),
                rhs: vec![h, w],
            });
        }
        for &d in self.depth.data() {
            if !(d.is_finite() && d > 0.0) {
                return Err(Error::NonFinite(format!("frame depth {d}")));
            }
        }
        for &v in self.rgb.data() {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::NonFinite(format!("frame rgb {v} outside [0, 1]")));
            }
        }
        for y in 0..h {
            for x in 0..w {
                let n2: f64 = (0..3).map(|c| self.normal.get3(c, y, x).powi(2)).sum();
                if (n2.sqrt() - 1.0).abs() > 1e-6 {
                    return Err(Error::NonFinite(format!(
                        "frame normal at ({y}, {x}) has norm {}",
                        n2.sqrt()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Ray through a pixel, parameterized by z-depth: point(z) = o + z * dir
/// with dir_z = 1, so the intersection parameter IS the stored depth.
fn pixel_ray(camera: &CameraModel, u: f64, v: f64) -> ([f64; 3], [f64; 3]) {
    match camera {
        CameraModel::Orthographic => ([u, v, 0.0], [0.0, 0.0, 1.0]),
        CameraModel::Pinhole { fx, fy, cx, cy } => {
            ([0.0, 0.0, 0.0], [(u - cx) / fx, (v - cy) / fy, 1.0])
        }
    }
}

/// World-units-per-pixel at depth z; used to size primitives consistently
/// across camera models.
fn world_scale(camera: &CameraModel, z: f64) -> f64 {
    match camera {
        CameraModel::Orthographic => 1.0,
        CameraModel::Pinhole { fx, .. } => z / fx,
    }
}

fn orient(n: [f64; 3]) -> [f64; 3] {
    if n[2] < 0.0 {
        [-n[0], -n[1], -n[2]]
    } else {
        n
    }
}

/// Intersection with the world plane z = d0 + a*x + b*y; the plane's stored
/// normal is (-a, -b, 1) normalized.
fn plane_hit(plane: &[f64; 3], o: &[f64; 3], dir: &[f64; 3]) -> Option<(f64, [f64; 3])> {
    let [d0, a, b] = *plane;
    let den = dir[2] - a * dir[0] - b * dir[1];
    if den.abs() < 1e-12 {
        return None;
    }
    let z = (d0 + a * o[0] + b * o[1] - o[2]) / den;
    (z > 0.0).then(|| (z, snap_unit3([-a, -b, 1.0])))
}

fn sphere_hit(
    center: &[f64; 3],
    radius: f64,
    o: &[f64; 3],
    dir: &[f64; 3],
) -> Option<(f64, [f64; 3])> {
    let oc = [o[0] - center[0], o[1] - center[1], o[2] - center[2]];
    let a = dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2];
    let b = 2.0 * (dir[0] * oc[0] + dir[1] * oc[1] + dir[2] * oc[2]);
    let c = oc[0] * oc[0] + oc[1] * oc[1] + oc[2] * oc[2] - radius * radius;
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let z = (-b - disc.sqrt()) / (2.0 * a);
    if z <= 0.0 {
        return None;
    }
    let p = [o[0] + z * dir[0], o[1] + z * dir[1], o[2] + z * dir[2]];
    let n = [
        (p[0] - center[0]) / radius,
        (p[1] - center[1]) / radius,
        (p[2] - center[2]) / radius,
    ];
    Some((z, snap_unit3(orient(n))))
}

fn box_hit(
    center: &[f64; 3],
    half: &[f64; 3],
    o: &[f64; 3],
    dir: &[f64; 3],
) -> Option<(f64, [f64; 3])> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    let mut axis = 0usize;
    let mut sign = 1.0;
    for i in 0..3 {
        let (lo, hi) = (center[i] - half[i], center[i] + half[i]);
        if dir[i].abs() < 1e-12 {
            if o[i] < lo || o[i] > hi {
                return None;
            }
            continue;
        }
        let mut t1 = (lo - o[i]) / dir[i];
        let mut t2 = (hi - o[i]) / dir[i];
        let mut s = -1.0;
        if t1 > t2 {
            std::mem::swap(&mut t1, &mut t2);
            s = 1.0;
        }
        if t1 > t_near {
            t_near = t1;
            axis = i;
            sign = s;
        }
        t_far = t_far.min(t2);
    }
    if t_near > t_far || t_near <= 0.0 {
        return None;
    }
    let mut n = [0.0; 3];
    n[axis] = sign;
    Some((t_near, orient(n)))
}

fn primitive_hit(
    prim: &Primitive,
    u: f64,
    v: f64,
    o: &[f64; 3],
    dir: &[f64; 3],
) -> Option<(f64, [f64; 3])> {
    match prim {
        Primitive::Sphere { center, radius } => sphere_hit(center, *radius, o, dir),
        Primitive::Box { center, half } => box_hit(center, half, o, dir),
        Primitive::PlanePatch { region, plane } => {
            let [u0, v0, u1, v1] = *region;
            if u < u0 || u > u1 || v < v0 || v > v1 {
                return None;
            }
            plane_hit(plane, o, dir)
        }
    }
}

/// Smooth three-wave procedural texture in [0, 1], one parameter set per
/// color channel, fully determined by the seed.
struct Albedo {
    waves: [[f64; 6]; 3],
}

impl Albedo {
    fn new(seed: u64) -> Albedo {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let waves = std::array::from_fn(|_| {
            std::array::from_fn(|i| {
                if i < 3 {
                    // Frequencies in radians per pixel, kept low.
                    0.04 + 0.22 * rng.random::<f64>()
                } else {
                    std::f64::consts::TAU * rng.random::<f64>()
                }
            })
        });
        Albedo { waves }
    }

    fn at(&self, channel: usize, u: f64, v: f64) -> f64 {
        let [fu, fv, fd, p1, p2, p3] = self.waves[channel];
        0.5 + 0.18 * (fu * u + p1).sin() + 0.16 * (fv * v + p2).cos()
            + 0.12 * (fd * (u + v) + p3).sin()
    }
}

/// Per-pixel ray cast against the background plane and every primitive;
/// nearest hit wins. Shading is Lambertian under one fixed light, modulated
/// by the procedural albedo. Pure function of the spec.
pub fn render(spec: &SceneSpec, extent: ImageExtent) -> Result<GeometryFrame> {
    spec.camera.validate()?;
    let (h, w) = (extent.h, extent.w);
    if h == 0 || w == 0 {
        return Err(Error::Config(format!("render extent {h}x{w} is empty")));
    }
    let albedo = Albedo::new(spec.albedo_seed);
    let light = snap_unit3([0.3, 0.4, 0.87]);

    let rows: Vec<Result<(Vec<f64>, Vec<[f64; 3]>, Vec<[f64; 3]>)>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut depth_row = vec![0.0; w];
            let mut normal_row = vec![[0.0; 3]; w];
            let mut rgb_row = vec![[0.0; 3]; w];
            for x in 0..w {
                let (u, v) = (x as f64, y as f64);
                let (o, dir) = pixel_ray(&spec.camera, u, v);
                let mut best = plane_hit(&spec.background, &o, &dir).ok_or_else(|| {
                    Error::Config(format!(
                        "background plane does not cover pixel ({y}, {x})"
                    ))
                })?;
                for prim in &spec.primitives {
                    if let Some(hit) = primitive_hit(prim, u, v, &o, &dir) {
                        if hit.0 < best.0 {
                            best = hit;
                        }
                    }
                }
                let (z, n) = best;
                let shade = (n[0] * light[0] + n[1] * light[1] + n[2] * light[2]).max(0.0);
                depth_row[x] = z;
                normal_row[x] = n;
                rgb_row[x] =
                    std::array::from_fn(|c| (albedo.at(c, u, v) * shade).clamp(0.0, 1.0));
            }
            Ok((depth_row, normal_row, rgb_row))
        })
        .collect();

    let mut depth = Tensor::zeros(&[h, w]);
    let mut normal = Tensor::zeros(&[3, h, w]);
    let mut rgb = Tensor::zeros(&[3, h, w]);
    for (y, row) in rows.into_iter().enumerate() {
        let (depth_row, normal_row, rgb_row) = row?;
        for x in 0..w {
            depth.set2(y, x, depth_row[x]);
            for c in 0..3 {
                normal.set3(c, y, x, normal_row[x][c]);
                rgb.set3(c, y, x, rgb_row[x][c]);
            }
        }
    }
    Ok(GeometryFrame { rgb, depth, normal, extent, camera: spec.camera.clone() })
}

fn area_downsample(map: &Tensor, s: usize) -> Tensor {
    let (h, w) = (map.rows() / s, map.cols() / s);
    Tensor::from_fn(&[h, w], |i| {
        let (by, bx) = (i / w, i % w);
        let mut sum = 0.0;
        for dy in 0..s {
            for dx in 0..s {
                sum += map.get2(by * s + dy, bx * s + dx);
            }
        }
        sum / (s * s) as f64
    })
}

/// Bilinear upsample treating coarse samples as block centers; off-grid
/// output positions past the first/last center extrapolate linearly, so
/// affine ramps survive the round trip.
fn bilinear_upsample(map: &Tensor, s: usize, h: usize, w: usize) -> Tensor {
    let (ch, cw) = (map.rows(), map.cols());
    let place = |out: usize, n: usize| -> (usize, f64) {
        if n == 1 {
            return (0, 0.0);
        }
        let p = (out as f64 + 0.5) / s as f64 - 0.5;
        let i = (p.floor() as isize).clamp(0, n as isize - 2) as usize;
        (i, p - i as f64)
    };
    Tensor::from_fn(&[h, w], |idx| {
        let (y, x) = (idx / w, idx % w);
        let (iy, wy) = place(y, ch);
        let (ix, wx) = place(x, cw);
        let lerp = |a: f64, b: f64, t: f64| a + t * (b - a);
        let jy = (iy + 1).min(ch - 1);
        let jx = (ix + 1).min(cw - 1);
        let top = lerp(map.get2(iy, ix), map.get2(iy, jx), wx);
        let bottom = lerp(map.get2(jy, ix), map.get2(jy, jx), wx);
        lerp(top, bottom, wy)
    })
}

/// Separable truncated-Gaussian blur with per-pixel weight renormalization:
/// the kernel crops at the border instead of replicating it, and a constant
/// input passes through unchanged.
fn blur_renormalized(map: &Tensor, sigma: f64) -> Tensor {
    let (h, w) = (map.rows(), map.cols());
    let r = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-r..=r)
        .map(|i| (-(i as f64 * i as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (mut acc, mut wsum) = (0.0, 0.0);
            for (j, k) in kernel.iter().enumerate() {
                let sx = x as isize + j as isize - r;
                if sx < 0 || sx >= w as isize {
                    continue;
                }
                acc += k * map.get2(y, sx as usize);
                wsum += k;
            }
            tmp[y * w + x] = acc / wsum;
        }
    }
    Tensor::from_fn(&[h, w], |i| {
        let (y, x) = (i / w, i % w);
        let (mut acc, mut wsum) = (0.0, 0.0);
        for (j, k) in kernel.iter().enumerate() {
            let sy = y as isize + j as isize - r;
            if sy < 0 || sy >= h as isize {
                continue;
            }
            acc += k * tmp[sy as usize * w + x];
            wsum += k;
        }
        acc / wsum
    })
}

/// Fakes a coarse prior: area-downsample by `s`, bilinear-upsample back,
/// Gaussian-blur with `sigma`, then multiply by a smooth low-frequency bias
/// field (1 + beta * noise). Coarse normals come from plane fitting on the
/// degraded depth. Returns (coarse depth, coarse normal).
pub fn degrade<R: Rng>(
    frame: &GeometryFrame,
    s: usize,
    sigma: f64,
    beta: f64,
    rng: &mut R,
) -> Result<(Tensor, Tensor)> {
    let (h, w) = (frame.extent.h, frame.extent.w);
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(Error::Config(format!(
            "downsample factor {s} must divide the {h}x{w} extent"
        )));
    }
    let mut coarse = bilinear_upsample(&area_downsample(&frame.depth, s), s, h, w);
    if sigma > 0.0 {
        coarse = blur_renormalized(&coarse, sigma);
    }
    // Three low-frequency waves; drawn unconditionally so the rng stream does
    // not depend on beta.
    let span = h.min(w) as f64;
    let waves: [[f64; 3]; 3] = std::array::from_fn(|_| {
        let angle = std::f64::consts::TAU * rng.random::<f64>();
        let cycles = 0.5 + 1.5 * rng.random::<f64>();
        let freq = std::f64::consts::TAU * cycles / span;
        [freq * angle.cos(), freq * angle.sin(), std::f64::consts::TAU * rng.random::<f64>()]
    });
    if beta != 0.0 {
        coarse = Tensor::from_fn(&[h, w], |i| {
            let (y, x) = ((i / w) as f64, (i % w) as f64);
            let noise: f64 = waves
                .iter()
                .map(|[wx, wy, p]| (wx * x + wy * y + p).sin())
                .sum::<f64>()
                / 3.0;
            coarse.data()[i] * (1.0 + beta * noise)
        });
    }
    let field = pseudo_normals(&coarse, &frame.camera, NORMAL_WINDOW)?;
    Ok((coarse, field.normals))
}

/// Draws a scene with 2..=6 primitives placed in view, in front of a gently
/// tilted background plane.
pub fn random_scene<R: Rng>(
    extent: ImageExtent,
    camera: CameraModel,
    rng: &mut R,
) -> SceneSpec {
    let (h, w) = (extent.h as f64, extent.w as f64);
    let background = [
        4.0 + rng.random::<f64>(),
        0.016 * (rng.random::<f64>() - 0.5),
        0.016 * (rng.random::<f64>() - 0.5),
    ];
    let count = rng.random_range(2..=6);
    let mut primitives = Vec::with_capacity(count);
    for _ in 0..count {
        let u = w * (0.15 + 0.7 * rng.random::<f64>());
        let v = h * (0.15 + 0.7 * rng.random::<f64>());
        let z = 1.8 + 1.5 * rng.random::<f64>();
        let center = camera.backproject(u, v, z);
        let scale = world_scale(&camera, z);
        primitives.push(match rng.random_range(0..3u32) {
            0 => Primitive::Sphere {
                center,
                radius: ((8.0 + 10.0 * rng.random::<f64>()) * scale).min(z - 1.0),
            },
            1 => Primitive::Box {
                center,
                half: [
                    (6.0 + 10.0 * rng.random::<f64>()) * scale,
                    (6.0 + 10.0 * rng.random::<f64>()) * scale,
                    0.25 + 0.5 * rng.random::<f64>(),
                ],
            },
            _ => {
                let hu = 8.0 + 12.0 * rng.random::<f64>();
                let hv = 8.0 + 12.0 * rng.random::<f64>();
                let a = 0.04 * (rng.random::<f64>() - 0.5);
                let b = 0.04 * (rng.random::<f64>() - 0.5);
                Primitive::PlanePatch {
                    region: [
                        (u - hu).max(0.0),
                        (v - hv).max(0.0),
                        (u + hu).min(w - 1.0),
                        (v + hv).min(h - 1.0),
                    ],
                    plane: [z - a * center[0] - b * center[1], a, b],
                }
            }
        });
    }
    SceneSpec { camera, background, primitives, albedo_seed: rng.random::<u64>() }
}

#[derive(Clone, Copy, Debug)]
pub struct DatasetParams {
    pub scenes: usize,
    pub extent: ImageExtent,
    pub seed: u64,
    /// Degradation knobs; see `degrade`.
    pub downsample: usize,
    pub blur: f64,
    pub bias: f64,
}

impl DatasetParams {
    pub fn desk(scenes: usize, seed: u64) -> DatasetParams {
        DatasetParams {
            scenes,
            extent: ImageExtent { h: 96, w: 96 },
            seed,
            downsample: 4,
            blur: 1.5,
            bias: 0.05,
        }
    }
}

pub fn split_of(index: usize, total: usize) -> &'static str {
    if index < total * 8 / 10 {
        "train"
    } else if index < total * 9 / 10 {
        "val"
    } else {
        "test"
    }
}

/// Renders `scenes` deterministic frames with coarse inputs into `dir` and
/// writes a tab-separated manifest. Scenes alternate camera models. Returns
/// the manifest path.
pub fn make_dataset(params: &DatasetParams, dir: &Path) -> Result<PathBuf> {
    if params.scenes == 0 {
        return Err(Error::Config("dataset needs at least one scene".into()));
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let extent = params.extent;
    let lines: Vec<String> = (0..params.scenes)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(
                params.seed ^ 0x9E37_79B9_7F4A_7C15u64.wrapping_mul(i as u64 + 1),
            );
            let camera = if i % 2 == 0 {
                CameraModel::Orthographic
            } else {
                CameraModel::Pinhole {
                    fx: 1.5 * extent.w as f64,
                    fy: 1.5 * extent.w as f64,
                    cx: (extent.w - 1) as f64 / 2.0,
                    cy: (extent.h - 1) as f64 / 2.0,
                }
            };
            let spec = random_scene(extent, camera, &mut rng);
            let frame = render(&spec, extent)?;
            let (coarse_depth, coarse_normal) =
                degrade(&frame, params.downsample, params.blur, params.bias, &mut rng)?;
            let id = format!("scene_{i:04}");
            let files = [
                (format!("{id}_rgb.pfm"), &frame.rgb),
                (format!("{id}_depth.pfm"), &frame.depth),
                (format!("{id}_normal.pfm"), &frame.normal),
                (format!("{id}_coarse_depth.pfm"), &coarse_depth),
                (format!("{id}_coarse_normal.pfm"), &coarse_normal),
            ];
            for (name, raster) in &files {
                write_pfm(&dir.join(name), raster)?;
            }
            Ok(format!(
                "{id}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                split_of(i, params.scenes),
                files[0].0,
                files[1].0,
                files[2].0,
                files[3].0,
                files[4].0,
                frame.camera.to_params_string(),
            ))
        })
        .collect::<Result<Vec<String>>>()?;
    let manifest = dir.join("manifest.tsv");
    fs::write(&manifest, lines.join("\n") + "\n").map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}
