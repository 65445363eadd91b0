//! Training loop: one frame and one sampled patch grid per iteration,
//! forward/backward on the tape, global-norm gradient clipping, and a
//! decoupled-weight-decay adaptive-moment update. Single-threaded at the
//! step level and bit-deterministic given config and seed.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{AdamState, TrainState};
use crate::config::TrainConfig;
use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::grid::{choose_config, crop2, crop3, extract, sample_grid, PatchSpec};
use crate::loss::total_loss_on;
use crate::model::{refine_patches, ModelParams, Variant};
use crate::normals::{pseudo_normals, PseudoNormalField, NORMAL_WINDOW};
use crate::tape::Tape;
use crate::tensor::Tensor;

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// One line of the loss trace, logged every iteration.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub iteration: u64,
    pub total: f64,
    pub depth_mse: f64,
    pub depth_grad: f64,
    pub normal_angle: f64,
    pub normal_mse: f64,
    pub pre_clip_norm: f64,
    pub post_clip_norm: f64,
}

pub const TRACE_HEADER: &str =
    "iter,total,depth_mse,depth_grad,normal_angle,normal_mse,pre_clip_norm,post_clip_norm";

impl TraceRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.iteration,
            self.total,
            self.depth_mse,
            self.depth_grad,
            self.normal_angle,
            self.normal_mse,
            self.pre_clip_norm,
            self.post_clip_norm
        )
    }
}

pub fn write_trace(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut text = String::from(TRACE_HEADER);
    text.push('\n');
    for row in trace {
        text.push_str(&row.to_csv());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub trace: Vec<TraceRow>,
    pub wall_seconds: f64,
    /// Cadence checkpoints, then the final checkpoint last.
    pub checkpoints: Vec<PathBuf>,
}

/// Image-window view of a pseudo-normal field.
fn crop_field(field: &PseudoNormalField, spec: &PatchSpec, image_w: usize) -> PseudoNormalField {
    let normals = crop3(&field.normals, spec.x, spec.y, spec.h, spec.w);
    let mut mask = Vec::with_capacity(spec.h * spec.w);
    for y in 0..spec.h {
        for x in 0..spec.w {
            mask.push(field.mask[(spec.y + y) * image_w + (spec.x + x)]);
        }
    }
    PseudoNormalField { normals, mask }
}

fn grad_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
}

pub fn train(config: &TrainConfig, variant: Variant, out_dir: &Path) -> Result<TrainOutcome> {
    config.validate()?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let started = Instant::now();

    let dataset = Dataset::load(&config.dataset)?;
    let train_frames = dataset.split_indices(Split::Train);
    if train_frames.is_empty() {
        return Err(Error::Config("train split is empty".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let rng_seed = rng.get_seed();
    let mut params = ModelParams::init(config.dims, &mut rng)?;
    let mut adam = AdamState::zeros(&params);
    let mut trace = Vec::with_capacity(config.iterations);
    let mut checkpoints = Vec::new();

    for iteration in 0..config.iterations as u64 {
        let frame = dataset.load_frame(train_frames[rng.random_range(0..train_frames.len())])?;
        let extent = frame.extent();
        let m = choose_config(&config.probs, &mut rng)?;
        let set = sample_grid(extent, m, config.dims.cell, &mut rng)?;
        let crops = extract(&frame.gt.rgb, &frame.coarse_depth, &frame.coarse_normal, &set)?;
        let field = pseudo_normals(&frame.gt.depth, &frame.gt.camera, NORMAL_WINDOW)?;

        let mut tape = Tape::new();
        let tape_model = params.register(&mut tape);
        let refined = refine_patches(&mut tape, &tape_model, &crops, variant)?;

        let mut terms = Vec::with_capacity(refined.len());
        for (patch, crop) in refined.iter().zip(crops.iter()) {
            let spec = crop.spec;
            let d_gt = crop2(&frame.gt.depth, spec.x, spec.y, spec.h, spec.w);
            let pseudo = crop_field(&field, &spec, extent.w);
            terms.push(total_loss_on(
                &mut tape,
                patch.depth,
                patch.normal_raw,
                &d_gt,
                &pseudo,
                None,
                &config.weights,
            )?);
        }
        let scale = 1.0 / terms.len() as f64;
        let mut acc = terms[0].total;
        for t in &terms[1..] {
            acc = tape.add(acc, t.total);
        }
        let total = tape.scale(acc, scale);

        let mean_of = |tape: &Tape, pick: fn(&crate::loss::LossTerms) -> crate::tape::Var| {
            terms.iter().map(|t| tape.value_scalar(pick(t))).sum::<f64>() * scale
        };
        let row_values = [
            ("total", tape.value_scalar(total)),
            ("depth_mse", mean_of(&tape, |t| t.depth_mse)),
            ("depth_grad", mean_of(&tape, |t| t.depth_grad)),
            ("normal_angle", mean_of(&tape, |t| t.normal_angle)),
            ("normal_mse", mean_of(&tape, |t| t.normal_mse)),
        ];
        for (term, value) in row_values {
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { iteration, term: term.to_string() });
            }
        }

        let mut grads = tape.backward(total)?.into_vec();
        let pre_clip_norm = grad_norm(&grads);
        if !pre_clip_norm.is_finite() {
            return Err(Error::NonFiniteLoss { iteration, term: "gradient norm".into() });
        }
        let post_clip_norm = if pre_clip_norm > config.clip_norm {
            let s = config.clip_norm / pre_clip_norm;
            for g in &mut grads {
                for v in g.data_mut() {
                    *v *= s;
                }
            }
            grad_norm(&grads)
        } else {
            pre_clip_norm
        };

        adam.t += 1;
        let bias1 = 1.0 - BETA1.powi(adam.t as i32);
        let bias2 = 1.0 - BETA2.powi(adam.t as i32);
        let (lr, wd) = (config.learning_rate, config.weight_decay);
        for (i, tensor) in params.tensors_mut().into_iter().enumerate() {
            let g = grads[i].data();
            let data = tensor.data_mut();
            for j in 0..data.len() {
                adam.m[i][j] = BETA1 * adam.m[i][j] + (1.0 - BETA1) * g[j];
                adam.v[i][j] = BETA2 * adam.v[i][j] + (1.0 - BETA2) * g[j] * g[j];
                let m_hat = adam.m[i][j] / bias1;
                let v_hat = adam.v[i][j] / bias2;
                data[j] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS) + lr * wd * data[j];
            }
        }

        trace.push(TraceRow {
            iteration,
            total: row_values[0].1,
            depth_mse: row_values[1].1,
            depth_grad: row_values[2].1,
            normal_angle: row_values[3].1,
            normal_mse: row_values[4].1,
            pre_clip_norm,
            post_clip_norm,
        });

        let done = iteration + 1;
        if config.checkpoint_every > 0 && done % config.checkpoint_every as u64 == 0 {
            let path = out_dir.join(format!("ckpt_{done:06}.ckpt"));
            snapshot(&params, done, &adam, rng_seed, &rng).save(&path)?;
            checkpoints.push(path);
        }
    }

    let state = snapshot(&params, config.iterations as u64, &adam, rng_seed, &rng);
    let final_path = out_dir.join("ckpt_final.ckpt");
    state.save(&final_path)?;
    checkpoints.push(final_path);

    Ok(TrainOutcome { state, trace, wall_seconds: started.elapsed().as_secs_f64(), checkpoints })
}

fn snapshot(
    params: &ModelParams,
    iteration: u64,
    adam: &AdamState,
    rng_seed: [u8; 32],
    rng: &ChaCha8Rng,
) -> TrainState {
    TrainState {
        params: params.clone(),
        iteration,
        adam: Some(adam.clone()),
        rng_seed,
        rng_word_pos: rng.get_word_pos(),
    }
}
