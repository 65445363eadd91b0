//! The multi-patch geometry transformer: joint cell embedding, rotary
//! position encoding on global pixel coordinates, alternating intra-/cross-
//! patch attention blocks, and project-and-unshuffle offset heads that
//! refine coarse depth and normal crops.

use crate::error::{Error, Result};
use crate::grid::PatchCrops;
use crate::tape::{AttnSpec, Tape, Var, ROPE_BASE};
use crate::tensor::Tensor;
use rand::{Rng, RngExt};

pub use crate::tape::rope_apply;

const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    /// Number of transformer blocks (attention + MLP each).
    pub blocks: usize,
    /// Token width d.
    pub width: usize,
    pub heads: usize,
    /// Cell side in pixels; one token per c x c cell.
    pub cell: usize,
}

impl ModelDims {
    pub fn desk() -> Self {
        ModelDims { blocks: 4, width: 64, heads: 4, cell: 4 }
    }

    pub fn head_width(&self) -> usize {
        self.width / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.cell == 0 {
            return Err(Error::Config("model dims must be positive".into()));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.head_width() % 4 != 0 {
            return Err(Error::Config(format!(
                "head width {} not divisible by 4 (axial rotary pairs)",
                self.head_width()
            )));
        }
        Ok(())
    }
}

/// Whether rotary angles use source-image or patch-local coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RopeCoords {
    Global,
    PatchLocal,
}

/// Whether blocks alternate intra/cross attention or stay intra-only.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnPattern {
    Alternating,
    IntraOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Variant {
    pub rope: RopeCoords,
    pub pattern: AttnPattern,
}

impl Variant {
    pub fn full() -> Self {
        Variant { rope: RopeCoords::Global, pattern: AttnPattern::Alternating }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "full" => Ok(Self::full()),
            "no-cross" => Ok(Variant {
                rope: RopeCoords::Global,
                pattern: AttnPattern::IntraOnly,
            }),
            "local-rope" => Ok(Variant {
                rope: RopeCoords::PatchLocal,
                pattern: AttnPattern::Alternating,
            }),
            other => Err(Error::Config(format!(
                "unknown variant {other:?} (expected full, no-cross, or local-rope)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match (self.rope, self.pattern) {
            (RopeCoords::Global, AttnPattern::Alternating) => "full",
            (RopeCoords::Global, AttnPattern::IntraOnly) => "no-cross",
            (RopeCoords::PatchLocal, AttnPattern::Alternating) => "local-rope",
            (RopeCoords::PatchLocal, AttnPattern::IntraOnly) => "local-rope-no-cross",
        }
    }
}

#[derive(Clone, Debug)]
pub struct BlockParams {
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

/// All trainable tensors. `named_tensors` fixes one canonical order used by
/// the optimizer, the gradient tape, and the checkpoint format alike.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub w_rgb: Tensor,
    pub w_depth: Tensor,
    pub w_normal: Tensor,
    pub b_embed: Tensor,
    pub blocks: Vec<BlockParams>,
    pub head_depth_w: Tensor,
    pub head_depth_b: Tensor,
    pub head_normal_w: Tensor,
    pub head_normal_b: Tensor,
}

fn trunc_normal<R: Rng>(rng: &mut R, std: f64) -> f64 {
    // Box-Muller, rejecting draws beyond two standard deviations.
    loop {
        let u1: f64 = rng.random::<f64>().max(1e-300);
        let u2: f64 = rng.random();
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

fn init_tensor<R: Rng>(rng: &mut R, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| trunc_normal(rng, INIT_STD))
}

impl ModelParams {
    /// All-zero parameter set with the right shapes (shape reference only).
    fn skeleton(dims: ModelDims) -> Self {
        let (d, c) = (dims.width, dims.cell);
        let cc = c * c;
        ModelParams {
            dims,
            w_rgb: Tensor::zeros(&[3 * cc, d]),
            w_depth: Tensor::zeros(&[cc, d]),
            w_normal: Tensor::zeros(&[3 * cc, d]),
            b_embed: Tensor::zeros(&[d]),
            blocks: (0..dims.blocks)
                .map(|_| BlockParams {
                    ln1_gain: Tensor::zeros(&[d]),
                    ln1_bias: Tensor::zeros(&[d]),
                    wq: Tensor::zeros(&[d, d]),
                    wk: Tensor::zeros(&[d, d]),
                    wv: Tensor::zeros(&[d, d]),
                    wo: Tensor::zeros(&[d, d]),
                    ln2_gain: Tensor::zeros(&[d]),
                    ln2_bias: Tensor::zeros(&[d]),
                    w1: Tensor::zeros(&[d, 4 * d]),
                    b1: Tensor::zeros(&[4 * d]),
                    w2: Tensor::zeros(&[4 * d, d]),
                    b2: Tensor::zeros(&[d]),
                })
                .collect(),
            head_depth_w: Tensor::zeros(&[d, cc]),
            head_depth_b: Tensor::zeros(&[cc]),
            head_normal_w: Tensor::zeros(&[d, 3 * cc]),
            head_normal_b: Tensor::zeros(&[3 * cc]),
        }
    }

    /// Fresh parameters. Residual output projections, MLP second layers, and
    /// both heads start at zero, so the untrained model is the identity
    /// refiner: refined depth and normals equal the coarse inputs.
    pub fn init<R: Rng>(dims: ModelDims, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let (d, c) = (dims.width, dims.cell);
        let cc = c * c;
        let blocks = (0..dims.blocks)
            .map(|_| BlockParams {
                ln1_gain: Tensor::full(&[d], 1.0),
                ln1_bias: Tensor::zeros(&[d]),
                wq: init_tensor(rng, &[d, d]),
                wk: init_tensor(rng, &[d, d]),
                wv: init_tensor(rng, &[d, d]),
                wo: Tensor::zeros(&[d, d]),
                ln2_gain: Tensor::full(&[d], 1.0),
                ln2_bias: Tensor::zeros(&[d]),
                w1: init_tensor(rng, &[d, 4 * d]),
                b1: Tensor::zeros(&[4 * d]),
                w2: Tensor::zeros(&[4 * d, d]),
                b2: Tensor::zeros(&[d]),
            })
            .collect();
        Ok(ModelParams {
            dims,
            w_rgb: init_tensor(rng, &[3 * cc, d]),
            w_depth: init_tensor(rng, &[cc, d]),
            w_normal: init_tensor(rng, &[3 * cc, d]),
            b_embed: Tensor::zeros(&[d]),
            blocks,
            head_depth_w: Tensor::zeros(&[d, cc]),
            head_depth_b: Tensor::zeros(&[cc]),
            head_normal_w: Tensor::zeros(&[d, 3 * cc]),
            head_normal_b: Tensor::zeros(&[3 * cc]),
        })
    }

    /// Expected parameter names for an architecture, in storage order.
    pub fn init_names(dims: ModelDims) -> Vec<String> {
        let skeleton = ModelParams::skeleton(dims);
        let names = skeleton.named_tensors().into_iter().map(|(name, _)| name);
        names.collect()
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("embed.rgb".into(), &self.w_rgb),
            ("embed.depth".into(), &self.w_depth),
            ("embed.normal".into(), &self.w_normal),
            ("embed.bias".into(), &self.b_embed),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (suffix, t) in [
                ("ln1.gain", &b.ln1_gain),
                ("ln1.bias", &b.ln1_bias),
                ("attn.wq", &b.wq),
                ("attn.wk", &b.wk),
                ("attn.wv", &b.wv),
                ("attn.wo", &b.wo),
                ("ln2.gain", &b.ln2_gain),
                ("ln2.bias", &b.ln2_bias),
                ("mlp.w1", &b.w1),
                ("mlp.b1", &b.b1),
                ("mlp.w2", &b.w2),
                ("mlp.b2", &b.b2),
            ] {
                out.push((format!("block{i}.{suffix}"), t));
            }
        }
        out.push(("head.depth.w".into(), &self.head_depth_w));
        out.push(("head.depth.b".into(), &self.head_depth_b));
        out.push(("head.normal.w".into(), &self.head_normal_w));
        out.push(("head.normal.b".into(), &self.head_normal_b));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![
            &mut self.w_rgb,
            &mut self.w_depth,
            &mut self.w_normal,
            &mut self.b_embed,
        ];
        for b in &mut self.blocks {
            out.push(&mut b.ln1_gain);
            out.push(&mut b.ln1_bias);
            out.push(&mut b.wq);
            out.push(&mut b.wk);
            out.push(&mut b.wv);
            out.push(&mut b.wo);
            out.push(&mut b.ln2_gain);
            out.push(&mut b.ln2_bias);
            out.push(&mut b.w1);
            out.push(&mut b.b1);
            out.push(&mut b.w2);
            out.push(&mut b.b2);
        }
        out.push(&mut self.head_depth_w);
        out.push(&mut self.head_depth_b);
        out.push(&mut self.head_normal_w);
        out.push(&mut self.head_normal_b);
        out
    }

    /// Rebuilds parameters from tensors in `named_tensors` order.
    pub fn from_tensors(dims: ModelDims, tensors: Vec<Tensor>) -> Result<Self> {
        dims.validate()?;
        let want = 4 + 12 * dims.blocks + 4;
        if tensors.len() != want {
            return Err(Error::Config(format!(
                "expected {want} parameter tensors for {} blocks, got {}",
                dims.blocks,
                tensors.len()
            )));
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().unwrap();
        let (w_rgb, w_depth, w_normal, b_embed) = (next(), next(), next(), next());
        let blocks = (0..dims.blocks)
            .map(|_| BlockParams {
                ln1_gain: next(),
                ln1_bias: next(),
                wq: next(),
                wk: next(),
                wv: next(),
                wo: next(),
                ln2_gain: next(),
                ln2_bias: next(),
                w1: next(),
                b1: next(),
                w2: next(),
                b2: next(),
            })
            .collect();
        let mut model = ModelParams {
            dims,
            w_rgb,
            w_depth,
            w_normal,
            b_embed,
            blocks,
            head_depth_w: next(),
            head_depth_b: next(),
            head_normal_w: next(),
            head_normal_b: next(),
        };
        // shape check against a freshly-dimensioned skeleton
        let reference = ModelParams::skeleton(dims);
        for ((name, have), (_, want)) in model
            .named_tensors()
            .iter()
            .zip(reference.named_tensors().iter())
        {
            if have.shape() != want.shape() {
                return Err(Error::Config(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    have.shape(),
                    want.shape()
                )));
            }
        }
        for t in model.tensors_mut() {
            t.check_finite("model parameter")?;
        }
        Ok(model)
    }

    /// Registers every tensor on a tape, in `named_tensors` order.
    pub fn register(&self, tape: &mut Tape) -> TapeModel {
        let vars: Vec<Var> = self
            .named_tensors()
            .into_iter()
            .map(|(_, t)| tape.param(t.clone()))
            .collect();
        TapeModel::from_vars(self.dims, &vars)
    }
}

#[derive(Clone)]
pub struct TapeBlock {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// The parameter set as tape variables, mirroring `ModelParams`.
#[derive(Clone)]
pub struct TapeModel {
    pub dims: ModelDims,
    pub w_rgb: Var,
    pub w_depth: Var,
    pub w_normal: Var,
    pub b_embed: Var,
    pub blocks: Vec<TapeBlock>,
    pub head_depth_w: Var,
    pub head_depth_b: Var,
    pub head_normal_w: Var,
    pub head_normal_b: Var,
}

impl TapeModel {
    /// Vars must follow `named_tensors` order.
    pub fn from_vars(dims: ModelDims, vars: &[Var]) -> Self {
        assert_eq!(vars.len(), 4 + 12 * dims.blocks + 4, "parameter var count");
        let blocks = (0..dims.blocks)
            .map(|i| {
                let o = 4 + 12 * i;
                TapeBlock {
                    ln1_gain: vars[o],
                    ln1_bias: vars[o + 1],
                    wq: vars[o + 2],
                    wk: vars[o + 3],
                    wv: vars[o + 4],
                    wo: vars[o + 5],
                    ln2_gain: vars[o + 6],
                    ln2_bias: vars[o + 7],
                    w1: vars[o + 8],
                    b1: vars[o + 9],
                    w2: vars[o + 10],
                    b2: vars[o + 11],
                }
            })
            .collect();
        let tail = 4 + 12 * dims.blocks;
        TapeModel {
            dims,
            w_rgb: vars[0],
            w_depth: vars[1],
            w_normal: vars[2],
            b_embed: vars[3],
            blocks,
            head_depth_w: vars[tail],
            head_depth_b: vars[tail + 1],
            head_normal_w: vars[tail + 2],
            head_normal_b: vars[tail + 3],
        }
    }
}

/// Joint tokens for P patches: one row per c x c cell, patch-major, cells
/// row-major within their patch. Coordinates are each cell's top-left pixel.
pub struct TokenBatch {
    pub tokens: Var,
    /// Source-image coordinates, one per token row.
    pub coords_global: Vec<(f64, f64)>,
    /// Patch-relative coordinates (ablation input).
    pub coords_local: Vec<(f64, f64)>,
    pub patches: usize,
    pub tokens_per_patch: usize,
    pub cells_h: usize,
    pub cells_w: usize,
}

impl TokenBatch {
    pub fn coords(&self, mode: RopeCoords) -> &[(f64, f64)] {
        match mode {
            RopeCoords::Global => &self.coords_global,
            RopeCoords::PatchLocal => &self.coords_local,
        }
    }
}

/// Gathers the pixels of each c x c cell into one matrix row. Channel-major
/// within a row: value (ch, dy, dx) lands at column ch*c*c + dy*c + dx.
fn cell_matrix(map: &Tensor, channels: usize, cell: usize) -> Tensor {
    let (h, w) = if channels == 1 {
        (map.rows(), map.cols())
    } else {
        (map.shape()[1], map.shape()[2])
    };
    let (ch_cells, cw_cells) = (h / cell, w / cell);
    Tensor::from_fn(&[ch_cells * cw_cells, channels * cell * cell], |i| {
        let row = i / (channels * cell * cell);
        let col = i % (channels * cell * cell);
        let (cv, cu) = (row / cw_cells, row % cw_cells);
        let ch = col / (cell * cell);
        let (dy, dx) = ((col / cell) % cell, col % cell);
        if channels == 1 {
            map.get2(cv * cell + dy, cu * cell + dx)
        } else {
            map.get3(ch, cv * cell + dy, cu * cell + dx)
        }
    })
}

/// Embeds patch crops into joint tokens: per cell, the rgb, coarse-depth,
/// and coarse-normal projections are summed, plus a shared bias.
pub fn embed_patches(
    tape: &mut Tape,
    model: &TapeModel,
    crops: &[PatchCrops],
) -> Result<TokenBatch> {
    let c = model.dims.cell;
    let first = crops.first().ok_or(Error::Config("no patches to embed".into()))?;
    let (h_p, w_p) = (first.spec.h, first.spec.w);
    if h_p % c != 0 || w_p % c != 0 {
        return Err(Error::Config(format!(
            "patch {h_p}x{w_p} not divisible into {c}px cells"
        )));
    }
    let (cells_h, cells_w) = (h_p / c, w_p / c);
    let t_per = cells_h * cells_w;
    let p = crops.len();

    let mut rgb_rows = Vec::with_capacity(p * t_per * 3 * c * c);
    let mut depth_rows = Vec::with_capacity(p * t_per * c * c);
    let mut normal_rows = Vec::with_capacity(p * t_per * 3 * c * c);
    let mut coords_global = Vec::with_capacity(p * t_per);
    let mut coords_local = Vec::with_capacity(p * t_per);
    for crop in crops {
        if crop.spec.h != h_p || crop.spec.w != w_p {
            return Err(Error::Config("patches in one batch must share extent".into()));
        }
        rgb_rows.extend_from_slice(cell_matrix(&crop.rgb, 3, c).data());
        depth_rows.extend_from_slice(cell_matrix(&crop.depth, 1, c).data());
        normal_rows.extend_from_slice(cell_matrix(&crop.normal, 3, c).data());
        for cv in 0..cells_h {
            for cu in 0..cells_w {
                coords_global.push((
                    (crop.spec.x + cu * c) as f64,
                    (crop.spec.y + cv * c) as f64,
                ));
                coords_local.push(((cu * c) as f64, (cv * c) as f64));
            }
        }
    }
    let n = p * t_per;
    let x_rgb = tape.constant(Tensor::new(&[n, 3 * c * c], rgb_rows)?);
    let x_depth = tape.constant(Tensor::new(&[n, c * c], depth_rows)?);
    let x_normal = tape.constant(Tensor::new(&[n, 3 * c * c], normal_rows)?);

    let t_rgb = tape.matmul(x_rgb, model.w_rgb);
    let t_depth = tape.matmul(x_depth, model.w_depth);
    let t_normal = tape.matmul(x_normal, model.w_normal);
    let sum = tape.add(t_rgb, t_depth);
    let sum = tape.add(sum, t_normal);
    let tokens = tape.add_row(sum, model.b_embed);

    Ok(TokenBatch {
        tokens,
        coords_global,
        coords_local,
        patches: p,
        tokens_per_patch: t_per,
        cells_h,
        cells_w,
    })
}

fn attention_layer(
    tape: &mut Tape,
    block: &TapeBlock,
    dims: ModelDims,
    x: Var,
    groups: Vec<(usize, usize)>,
    coords: &[(f64, f64)],
) -> Var {
    let h = tape.layer_norm(x, block.ln1_gain, block.ln1_bias);
    let q = tape.matmul(h, block.wq);
    let k = tape.matmul(h, block.wk);
    let v = tape.matmul(h, block.wv);
    let att = tape.attention(
        q,
        k,
        v,
        AttnSpec {
            n_heads: dims.heads,
            groups,
            coords: coords.to_vec(),
            rope_base: ROPE_BASE,
        },
    );
    let o = tape.matmul(att, block.wo);
    tape.add(x, o)
}

fn intra_groups(batch: &TokenBatch) -> Vec<(usize, usize)> {
    (0..batch.patches)
        .map(|k| (k * batch.tokens_per_patch, batch.tokens_per_patch))
        .collect()
}

/// Pre-norm multi-head attention restricted to each patch's own tokens,
/// with residual add.
pub fn intra_attention(
    tape: &mut Tape,
    block: &TapeBlock,
    dims: ModelDims,
    batch: &TokenBatch,
    x: Var,
    rope: RopeCoords,
) -> Var {
    attention_layer(tape, block, dims, x, intra_groups(batch), batch.coords(rope))
}

/// Pre-norm multi-head attention over the full concatenated token sequence,
/// with residual add.
pub fn cross_attention(
    tape: &mut Tape,
    block: &TapeBlock,
    dims: ModelDims,
    batch: &TokenBatch,
    x: Var,
    rope: RopeCoords,
) -> Var {
    let n = batch.patches * batch.tokens_per_patch;
    attention_layer(tape, block, dims, x, vec![(0, n)], batch.coords(rope))
}

fn mlp_layer(tape: &mut Tape, block: &TapeBlock, x: Var) -> Var {
    let h = tape.layer_norm(x, block.ln2_gain, block.ln2_bias);
    let a = tape.matmul(h, block.w1);
    let a = tape.add_row(a, block.b1);
    let g = tape.gelu(a);
    let o = tape.matmul(g, block.w2);
    let o = tape.add_row(o, block.b2);
    tape.add(x, o)
}

/// Runs all blocks. Attention strictly alternates intra, cross, intra, ...
/// unless the variant pins every block to intra.
pub fn forward(
    tape: &mut Tape,
    model: &TapeModel,
    batch: &TokenBatch,
    variant: Variant,
) -> Var {
    let mut x = batch.tokens;
    for (l, block) in model.blocks.iter().enumerate() {
        let cross = match variant.pattern {
            AttnPattern::Alternating => l % 2 == 1,
            AttnPattern::IntraOnly => false,
        };
        x = if cross {
            cross_attention(tape, block, model.dims, batch, x, variant.rope)
        } else {
            intra_attention(tape, block, model.dims, batch, x, variant.rope)
        };
        x = mlp_layer(tape, block, x);
    }
    x
}

/// Per-patch offset maps decoded from features.
pub struct PatchOffsets {
    /// [h_p, w_p]
    pub depth: Var,
    /// [3, h_p, w_p]
    pub normal: Var,
}

/// Projects each patch's tokens to per-cell pixel offsets and unshuffles
/// them back to crop resolution.
pub fn predict_offsets(
    tape: &mut Tape,
    model: &TapeModel,
    batch: &TokenBatch,
    features: Var,
) -> Vec<PatchOffsets> {
    let c = model.dims.cell;
    let (gh, gw) = (batch.cells_h, batch.cells_w);
    let t = batch.tokens_per_patch;
    (0..batch.patches)
        .map(|k| {
            let rows = tape.slice_rows(features, k * t, t);
            let d_cells = tape.matmul(rows, model.head_depth_w);
            let d_cells = tape.add_row(d_cells, model.head_depth_b);
            let d_map = tape.pixel_unshuffle(d_cells, gh, gw, c, 1);
            let depth = tape.reshape(d_map, &[gh * c, gw * c]);
            let n_cells = tape.matmul(rows, model.head_normal_w);
            let n_cells = tape.add_row(n_cells, model.head_normal_b);
            let normal = tape.pixel_unshuffle(n_cells, gh, gw, c, 3);
            PatchOffsets { depth, normal }
        })
        .collect()
}

/// One refined patch, still on the tape.
pub struct RefinedPatch {
    /// [h_p, w_p]
    pub depth: Var,
    /// [3, h_p, w_p], unit length per pixel
    pub normal: Var,
    /// [3, h_p, w_p], the coarse+offset sum before renormalization (the
    /// normal loss penalizes this raw field's deviation too)
    pub normal_raw: Var,
}

/// Adds offsets to the coarse crops: depth is a plain sum, normals are
/// summed then renormalized per pixel (coarse normal kept where the sum
/// collapses below the norm floor).
pub fn refine(
    tape: &mut Tape,
    coarse_depth: Var,
    coarse_normal: Var,
    offsets: &PatchOffsets,
) -> RefinedPatch {
    let depth = tape.add(coarse_depth, offsets.depth);
    let shape = tape.value(coarse_normal).shape().to_vec();
    let n = shape[1] * shape[2];
    let flat_coarse = tape.reshape(coarse_normal, &[3, n]);
    let flat_off = tape.reshape(offsets.normal, &[3, n]);
    let sum = tape.add(flat_coarse, flat_off);
    let unit = tape.unit3_or(sum, flat_coarse);
    let normal = tape.reshape(unit, &shape);
    let normal_raw = tape.reshape(sum, &shape);
    RefinedPatch { depth, normal, normal_raw }
}

/// Embed, run the trunk, decode offsets, and refine every crop. The coarse
/// crops enter the tape as constants.
pub fn refine_patches(
    tape: &mut Tape,
    model: &TapeModel,
    crops: &[PatchCrops],
    variant: Variant,
) -> Result<Vec<RefinedPatch>> {
    let batch = embed_patches(tape, model, crops)?;
    let features = forward(tape, model, &batch, variant);
    let offsets = predict_offsets(tape, model, &batch, features);
    Ok(crops
        .iter()
        .zip(offsets.iter())
        .map(|(crop, off)| {
            let cd = tape.constant(crop.depth.clone());
            let cn = tape.constant(crop.normal.clone());
            refine(tape, cd, cn, off)
        })
        .collect())
}
