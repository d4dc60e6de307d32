//! Training over the masked-diffusion objective and the inference-time
//! inpainting loop (reverse chain from the masked latent with known tokens
//! clamped after every step).

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{apply_mask, decode, downsample_mask, encode, LatentMask, Palette, TokenGrid};
use crate::diffusion::{
    forward_marginal, forward_sample, reverse_jump_distribution, total_loss, vlb_loss, z0_loss,
    CategoricalField,
};
use crate::error::{Error, Result};
use crate::model::{
    denoise, encode_sketch, init_params, read_checkpoint, write_checkpoint, DenoiserParams,
    ModelConfig, SketchImage,
};
use crate::netpbm::{GrayImage, RgbImage};
use crate::schedule::{make_schedule, NoiseSchedule};
use crate::shapeworld::Example;
use crate::substrate::{
    adam_step, sample_categorical, stream_hash, AdamHyper, AdamState, Rng, Tape,
};

const STREAM_T_DRAW: u64 = 0x74647277; // "tdrw"
const STREAM_FORWARD: u64 = 0x66777264; // "fwrd"
const STREAM_SHUFFLE: u64 = 0x73686c66; // "shlf"

/// Everything a training run needs; serialized verbatim into checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Diffusion timesteps.
    pub t: usize,
    /// Codebook size.
    pub c: usize,
    /// Codec downsample factor.
    pub f: usize,
    /// Transformer width.
    pub d: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    /// Weight of the auxiliary clean-token loss.
    pub lambda: f64,
    /// Uniform-leak fraction of the noise schedule.
    pub eta: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub seed: u64,
    pub data_dir: PathBuf,
    pub ckpt_dir: PathBuf,
    pub ckpt_interval: u64,
}

impl TrainConfig {
    pub fn model_config(&self, image_size: usize) -> Result<ModelConfig> {
        if self.f == 0 || image_size % self.f != 0 {
            return Err(Error::Config(format!(
                "image size {image_size} not divisible by f={}",
                self.f
            )));
        }
        let side = image_size / self.f;
        let cfg = ModelConfig {
            d: self.d,
            d_s: (self.d / 2).max(1),
            n_blocks: self.n_blocks,
            n_heads: self.n_heads,
            c: self.c,
            k: side * side,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn adam_hyper(&self) -> AdamHyper {
        AdamHyper {
            lr: self.lr,
            ..AdamHyper::default()
        }
    }
}

/// Checkpoint config block: training config, progress, and the palette so
/// inference is self-contained.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    pub step: u64,
    pub adam_t: u64,
    pub palette_colors: Vec<[u8; 3]>,
    pub palette_seed: u64,
}

impl CheckpointMeta {
    pub fn palette(&self) -> Palette {
        Palette {
            colors: self.palette_colors.clone(),
            seed: self.palette_seed,
            sample_count: 0,
            padded: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub vlb: f64,
    pub lz0: f64,
}

/// Example with codec work done once up front.
#[derive(Debug, Clone)]
pub struct PreparedExample {
    pub id: usize,
    pub z0: TokenGrid,
    pub mask: LatentMask,
    pub sketch: SketchImage,
}

pub fn prepare_example(
    id: usize,
    example: &Example,
    palette: &Palette,
    f: usize,
) -> Result<PreparedExample> {
    Ok(PreparedExample {
        id,
        z0: encode(&example.image, palette, f)?,
        mask: downsample_mask(&example.mask, f)?,
        sketch: example.sketch.clone(),
    })
}

/// Per-example loss + gradients. The timestep is drawn from a stream keyed
/// by (step, slot); the corruption draw is keyed by (example id, t).
fn example_grads(
    ex: &PreparedExample,
    params: &DenoiserParams<f32>,
    model_cfg: &ModelConfig,
    step: u64,
    slot: usize,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
) -> Result<(Vec<Vec<f32>>, LossBreakdown)> {
    if !ex.mask.any() {
        return Err(Error::Data {
            index: ex.id,
            msg: "example has an empty latent mask".into(),
        });
    }
    let mut t_rng = Rng::new(cfg.seed, stream_hash(&[STREAM_T_DRAW, step, slot as u64]));
    let t = 1 + t_rng.below(cfg.t as u64) as usize;
    let mut fwd_rng = Rng::new(
        cfg.seed,
        stream_hash(&[STREAM_FORWARD, ex.id as u64, t as u64]),
    );
    let z_t = forward_sample(&ex.z0, &ex.mask, t, sched, &mut fwd_rng)?;

    let mut tape: Tape<f32> = Tape::new();
    let nodes = params.insert_into(&mut tape, true);
    let sk = encode_sketch(&mut tape, &nodes, &ex.sketch)?;
    let logits = denoise(&mut tape, &nodes, model_cfg, &z_t, t, sk)?;
    let vlb = vlb_loss(&mut tape, logits, &ex.z0, &z_t, t, &ex.mask, sched)?;
    let (lz0, _) = z0_loss(&mut tape, logits, &ex.z0, &ex.mask)?;
    let loss = total_loss(&mut tape, vlb, lz0, cfg.lambda)?;
    tape.backward(loss)?;

    let breakdown = LossBreakdown {
        total: tape.scalar_value(loss) as f64,
        vlb: tape.scalar_value(vlb) as f64,
        lz0: tape.scalar_value(lz0) as f64,
    };
    let sizes = params.param_sizes();
    let grads = nodes
        .ordered()
        .iter()
        .zip(sizes.iter())
        .map(|(&id, &n)| {
            tape.grad(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; n])
        })
        .collect();
    Ok((grads, breakdown))
}

/// One optimizer step over a batch: per-example gradients are computed in
/// parallel, then reduced in slot order so results do not depend on thread
/// scheduling.
pub fn train_step(
    batch: &[&PreparedExample],
    params: &mut DenoiserParams<f32>,
    opt: &mut AdamState<f32>,
    step: u64,
    cfg: &TrainConfig,
    model_cfg: &ModelConfig,
    sched: &NoiseSchedule,
) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::contract("train_step needs a non-empty batch"));
    }
    let results: Vec<Result<(Vec<Vec<f32>>, LossBreakdown)>> = batch
        .par_iter()
        .enumerate()
        .map(|(slot, ex)| example_grads(ex, params, model_cfg, step, slot, cfg, sched))
        .collect();

    let sizes = params.param_sizes();
    let mut grad_mean: Vec<Vec<f32>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
    let mut sum = LossBreakdown {
        total: 0.0,
        vlb: 0.0,
        lz0: 0.0,
    };
    let inv = 1.0 / batch.len() as f32;
    for res in results {
        let (grads, breakdown) = res?;
        for (acc, g) in grad_mean.iter_mut().zip(grads.iter()) {
            for (a, &v) in acc.iter_mut().zip(g.iter()) {
                *a += v * inv;
            }
        }
        sum.total += breakdown.total;
        sum.vlb += breakdown.vlb;
        sum.lz0 += breakdown.lz0;
    }
    let n = batch.len() as f64;
    let mean = LossBreakdown {
        total: sum.total / n,
        vlb: sum.vlb / n,
        lz0: sum.lz0 / n,
    };
    if !mean.total.is_finite() {
        return Err(Error::Numeric {
            step,
            msg: format!("non-finite loss {mean:?}"),
        });
    }

    let mut named = params.named_mut();
    let mut slices: Vec<&mut [f32]> = named
        .iter_mut()
        .map(|(_, t)| t.data.as_mut_slice())
        .collect();
    let grad_refs: Vec<&[f32]> = grad_mean.iter().map(|g| g.as_slice()).collect();
    adam_step(&mut slices, &grad_refs, opt, &cfg.adam_hyper())?;
    Ok(mean)
}

/// Deterministic shuffled batching: a fresh Fisher-Yates permutation per
/// epoch keyed by (seed, epoch), consumed in fixed-size chunks. Stateless in
/// the step index, so resumed runs replay the identical batch sequence.
pub fn batch_for_step(train_ids: &[usize], step: u64, batch_size: usize, seed: u64) -> Vec<usize> {
    let n = train_ids.len();
    let per_epoch = (n / batch_size).max(1) as u64;
    let epoch = step / per_epoch;
    let pos = (step % per_epoch) as usize;
    let mut perm = train_ids.to_vec();
    let mut rng = Rng::new(seed, stream_hash(&[STREAM_SHUFFLE, epoch]));
    for i in (1..perm.len()).rev() {
        let j = rng.below(i as u64 + 1) as usize;
        perm.swap(i, j);
    }
    perm.into_iter()
        .cycle()
        .skip(pos * batch_size)
        .take(batch_size)
        .collect()
}

pub fn save_checkpoint(
    path: &Path,
    cfg: &TrainConfig,
    step: u64,
    params: &DenoiserParams<f32>,
    opt: &AdamState<f32>,
    palette: &Palette,
) -> Result<()> {
    let meta = CheckpointMeta {
        config: cfg.clone(),
        step,
        adam_t: opt.t,
        palette_colors: palette.colors.clone(),
        palette_seed: palette.seed,
    };
    let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
    for (name, t) in params.named() {
        tensors.push((format!("param.{name}"), t.shape.clone(), t.data.clone()));
    }
    for (i, (name, t)) in params.named().iter().enumerate() {
        tensors.push((format!("adam.m.{name}"), t.shape.clone(), opt.m[i].clone()));
        tensors.push((format!("adam.v.{name}"), t.shape.clone(), opt.v[i].clone()));
    }
    write_checkpoint(path, &serde_json::to_string(&meta)?, &tensors)
}

pub fn load_checkpoint(
    path: &Path,
) -> Result<(CheckpointMeta, DenoiserParams<f32>, AdamState<f32>)> {
    let (config_json, tensors) = read_checkpoint(path)?;
    let meta: CheckpointMeta = serde_json::from_str(&config_json)?;
    let model_cfg = meta.config.model_config(crate::shapeworld::IMG_SIZE)?;

    let param_tensors: Vec<(String, Vec<usize>, Vec<f32>)> = tensors
        .iter()
        .filter_map(|(n, s, d)| {
            n.strip_prefix("param.")
                .map(|base| (base.to_string(), s.clone(), d.clone()))
        })
        .collect();
    let params = DenoiserParams::from_named_tensors(model_cfg, &param_tensors)?;

    let mut opt = AdamState::new(&params.param_sizes());
    opt.t = meta.adam_t;
    for (i, (name, t)) in params.named().iter().enumerate() {
        let find = |prefix: &str| -> Result<Vec<f32>> {
            tensors
                .iter()
                .find(|(n, _, _)| n == &format!("{prefix}.{name}"))
                .map(|(_, _, d)| d.clone())
                .ok_or_else(|| Error::format(format!("checkpoint missing {prefix}.{name}")))
        };
        let m = find("adam.m")?;
        let v = find("adam.v")?;
        if m.len() != t.numel() || v.len() != t.numel() {
            return Err(Error::format(format!("optimizer state size mismatch for {name}")));
        }
        opt.m[i] = m;
        opt.v[i] = v;
    }
    Ok((meta, params, opt))
}

/// Full training loop. Loads the dataset and palette from `cfg.data_dir`,
/// optionally resumes from a checkpoint, writes periodic checkpoints plus a
/// metrics CSV, and returns the final checkpoint path.
pub fn train(cfg: &TrainConfig, resume: Option<&Path>) -> Result<PathBuf> {
    let dataset = crate::shapeworld::read_dataset(&cfg.data_dir)?;
    let palette = Palette::load(&cfg.data_dir.join("palette.pal"))?;
    if palette.c() != cfg.c {
        return Err(Error::Config(format!(
            "palette has {} colors but config says C={}",
            palette.c(),
            cfg.c
        )));
    }
    let model_cfg = cfg.model_config(crate::shapeworld::IMG_SIZE)?;
    let sched = make_schedule(cfg.t, cfg.c, cfg.eta)?;

    let train_ids = dataset.train_ids();
    if train_ids.is_empty() {
        return Err(Error::Config("dataset has no training examples".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch_size must be positive".into()));
    }

    // Preload and pre-encode the training set.
    let mut prepared: Vec<PreparedExample> = Vec::with_capacity(train_ids.len());
    for &id in &train_ids {
        let ex = dataset.load_example(id)?;
        prepared.push(prepare_example(id, &ex, &palette, cfg.f)?);
    }
    let by_id: std::collections::BTreeMap<usize, usize> = train_ids
        .iter()
        .enumerate()
        .map(|(slot, &id)| (id, slot))
        .collect();

    let (mut params, mut opt, start_step) = match resume {
        Some(path) => {
            let (meta, params, opt) = load_checkpoint(path)?;
            if meta.config != *cfg {
                return Err(Error::Config(
                    "resume checkpoint was trained with a different config".into(),
                ));
            }
            (params, opt, meta.step)
        }
        None => {
            let params = init_params::<f32>(cfg.seed, model_cfg)?;
            let opt = AdamState::new(&params.param_sizes());
            (params, opt, 0)
        }
    };

    std::fs::create_dir_all(&cfg.ckpt_dir)?;
    let metrics_path = cfg.ckpt_dir.join("metrics.csv");
    let mut metrics = if start_step == 0 {
        let mut f = std::fs::File::create(&metrics_path)?;
        writeln!(f, "step,total,vlb,lz0,wall_time")?;
        f
    } else {
        std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&metrics_path)?
    };

    if start_step == 0 {
        save_checkpoint(
            &cfg.ckpt_dir.join("ckpt_000000.pddp"),
            cfg,
            0,
            &params,
            &opt,
            &palette,
        )?;
    }

    let started = Instant::now();
    for step in start_step..cfg.steps {
        let ids = batch_for_step(&train_ids, step, cfg.batch_size, cfg.seed);
        let batch: Vec<&PreparedExample> = ids.iter().map(|id| &prepared[by_id[id]]).collect();
        let loss = train_step(&batch, &mut params, &mut opt, step, cfg, &model_cfg, &sched)?;
        writeln!(
            metrics,
            "{},{:.6},{:.6},{:.6},{:.3}",
            step + 1,
            loss.total,
            loss.vlb,
            loss.lz0,
            started.elapsed().as_secs_f64()
        )?;
        let done = step + 1;
        if cfg.ckpt_interval > 0 && done % cfg.ckpt_interval == 0 && done != cfg.steps {
            save_checkpoint(
                &cfg.ckpt_dir.join(format!("ckpt_{done:06}.pddp")),
                cfg,
                done,
                &params,
                &opt,
                &palette,
            )?;
        }
    }
    let final_path = cfg.ckpt_dir.join("ckpt_final.pddp");
    save_checkpoint(&final_path, cfg, cfg.steps, &params, &opt, &palette)?;
    Ok(final_path)
}

/// Chain record: (t, z_t) from the masked latent down to the clean grid.
#[derive(Debug, Clone)]
pub struct SampleTrace {
    pub steps: Vec<(usize, TokenGrid)>,
    pub final_z0: TokenGrid,
    pub decoded: RgbImage,
    /// Clean-token distribution predicted at the last reverse step; eval
    /// reads its masked NLL.
    pub final_p0: CategoricalField,
}

/// Evenly spaced decreasing timesteps of length `t_inf` ending at 1.
/// `t_inf == 1` degenerates to a single step at T.
pub fn inference_steps(t_max: usize, t_inf: usize) -> Vec<usize> {
    if t_inf <= 1 {
        return vec![t_max];
    }
    let mut steps = Vec::with_capacity(t_inf);
    let mut prev = t_max + 1;
    for i in 0..t_inf {
        let raw = t_max as f64 - (t_max as f64 - 1.0) * i as f64 / (t_inf as f64 - 1.0);
        let mut t = raw.round() as usize;
        if t >= prev {
            t = prev - 1;
        }
        steps.push(t.max(1));
        prev = t.max(1);
    }
    steps
}

/// Reverse chain with an arbitrary clean-token predictor; `predict` sees
/// the current grid and timestep and returns a C-class field. Known tokens
/// are clamped after every step. The chain ends with a jump to t=0 whose
/// posterior support excludes MASK, so the result is always decodable.
pub fn reverse_chain<F>(
    z0_known: &TokenGrid,
    mask: &LatentMask,
    sched: &NoiseSchedule,
    t_inf: usize,
    rng: &mut Rng,
    greedy: bool,
    mut predict: F,
) -> Result<(TokenGrid, Vec<(usize, TokenGrid)>, CategoricalField)>
where
    F: FnMut(&TokenGrid, usize) -> Result<CategoricalField>,
{
    if t_inf < 1 || t_inf > sched.t_max() {
        return Err(Error::contract(format!(
            "t_inf={t_inf} out of 1..={}",
            sched.t_max()
        )));
    }
    let mut z = apply_mask(z0_known, mask)?;
    let mut trace = vec![(sched.t_max(), z.clone())];
    let plan = inference_steps(sched.t_max(), t_inf);
    let mut last_p0: Option<CategoricalField> = None;

    for (i, &t_hi) in plan.iter().enumerate() {
        let t_lo = plan.get(i + 1).copied().unwrap_or(0);
        let p0 = predict(&z, t_hi)?;
        let dist = reverse_jump_distribution(&z, &p0, t_hi, t_lo, mask, sched)?;
        let mut ids = Vec::with_capacity(z.k());
        for pos in 0..z.k() {
            if mask.bits[pos] {
                let row = dist.row(pos);
                let pick = if greedy {
                    row.iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .map(|(j, _)| j)
                        .unwrap()
                } else {
                    sample_categorical(row, rng)?
                };
                ids.push(pick as u16);
            } else {
                // Clamp known tokens.
                ids.push(z0_known.ids[pos]);
            }
        }
        z = TokenGrid::new(z.h, z.w, z.c, ids)?;
        trace.push((t_lo, z.clone()));
        last_p0 = Some(p0);
    }
    if z.contains_mask() {
        return Err(Error::contract(
            "internal: MASK survived the reverse chain (final step must end at t=1)",
        ));
    }
    Ok((z, trace, last_p0.unwrap()))
}

/// Sketch-guided inpainting: encode, mask, reverse-diffuse with the
/// denoiser, decode, and composite so pixels outside the mask are copied
/// from the input verbatim.
#[allow(clippy::too_many_arguments)]
pub fn inpaint(
    image: &RgbImage,
    pixel_mask: &GrayImage,
    sketch: &SketchImage,
    params: &DenoiserParams<f32>,
    palette: &Palette,
    cfg: &TrainConfig,
    t_inf: usize,
    rng: &mut Rng,
    greedy: bool,
) -> Result<(RgbImage, SampleTrace)> {
    let model_cfg = cfg.model_config(image.width.max(image.height))?;
    let z0_known = encode(image, palette, cfg.f)?;
    let mask = downsample_mask(pixel_mask, cfg.f)?;
    let sched = make_schedule(cfg.t, cfg.c, cfg.eta)?;

    let (z_final, steps, final_p0) = reverse_chain(
        &z0_known,
        &mask,
        &sched,
        t_inf,
        rng,
        greedy,
        |z_t, t| {
            let mut tape: Tape<f32> = Tape::new();
            let nodes = params.insert_into(&mut tape, false);
            let sk = encode_sketch(&mut tape, &nodes, sketch)?;
            let logits = denoise(&mut tape, &nodes, &model_cfg, z_t, t, sk)?;
            let probs = tape.softmax_rows(logits);
            let vals: Vec<f64> = tape.value(probs).iter().map(|&v| v as f64).collect();
            CategoricalField::new(z_t.k(), model_cfg.c, false, vals)
        },
    )?;

    let decoded = decode(&z_final, palette, cfg.f)?;
    let mut output = image.clone();
    for y in 0..image.height {
        for x in 0..image.width {
            if pixel_mask.get(x, y) > 0 {
                output.set(x, y, decoded.get(x, y));
            }
        }
    }
    Ok((
        output,
        SampleTrace {
            steps,
            final_z0: z_final,
            decoded,
            final_p0,
        },
    ))
}

/// Verification harness: run the reverse chain with the oracle predictor
/// (one-hot at the true z0) many times and report the maximum total
/// variation between empirical per-step marginals and the exact forward
/// marginals. Errors if any chain fails to terminate at exactly z0.
pub fn oracle_reverse_check(
    z0: &TokenGrid,
    mask: &LatentMask,
    sched: &NoiseSchedule,
    n_samples: usize,
    rng: &mut Rng,
) -> Result<f64> {
    let t_max = sched.t_max();
    let k = z0.k();
    let classes = sched.c() + 1;
    let hots: Vec<usize> = z0.ids.iter().map(|&id| id as usize).collect();
    // counts[t-1][pos][class] over intermediate states z_t, t in 1..t_max.
    let mut counts = vec![vec![vec![0u64; classes]; k]; t_max];

    for _ in 0..n_samples {
        let (z_final, trace, _) = reverse_chain(z0, mask, sched, t_max, rng, false, |z, _| {
            let _ = z;
            Ok(CategoricalField::one_hot(k, sched.c(), false, &hots))
        })?;
        if z_final != *z0 {
            return Err(Error::contract(
                "oracle reverse chain did not terminate at z0",
            ));
        }
        for &(t, ref z) in &trace {
            if t >= 1 && t <= t_max {
                for pos in 0..k {
                    counts[t - 1][pos][z.ids[pos] as usize] += 1;
                }
            }
        }
    }

    let mut max_tv: f64 = 0.0;
    for t in 1..=t_max {
        let exact = forward_marginal(z0, mask, t, sched)?;
        for pos in 0..k {
            let total: u64 = counts[t - 1][pos].iter().sum();
            if total == 0 {
                continue;
            }
            let tv: f64 = counts[t - 1][pos]
                .iter()
                .zip(exact.row(pos).iter())
                .map(|(&c, &p)| (c as f64 / total as f64 - p).abs())
                .sum::<f64>()
                / 2.0;
            max_tv = max_tv.max(tv);
        }
    }
    Ok(max_tv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::fit_palette;
    use crate::shapeworld::{make_example, write_dataset};

    fn tiny_config(data_dir: PathBuf, ckpt_dir: PathBuf) -> TrainConfig {
        TrainConfig {
            t: 8,
            c: 16,
            f: 4,
            d: 16,
            n_blocks: 1,
            n_heads: 2,
            lambda: 0.001,
            eta: 0.05,
            lr: 1e-3,
            batch_size: 2,
            steps: 3,
            seed: 11,
            data_dir,
            ckpt_dir,
            ckpt_interval: 2,
        }
    }

    fn fit_dataset_palette(ds: &crate::shapeworld::Dataset, c: usize) -> Palette {
        let mut pixels = Vec::new();
        for ex in ds.iter_examples().take(50) {
            pixels.extend(ex.unwrap().image.pixels);
        }
        fit_palette(&pixels, c, 3).unwrap()
    }

    fn tmp(name: &str) -> PathBuf {
        std::env::temp_dir().join(format!("pddp-engine-{name}-{}", std::process::id()))
    }

    #[test]
    fn inference_steps_shapes() {
        assert_eq!(inference_steps(50, 1), vec![50]);
        let full = inference_steps(50, 50);
        assert_eq!(full, (1..=50).rev().collect::<Vec<_>>());
        let five = inference_steps(50, 5);
        assert_eq!(five.first(), Some(&50));
        assert_eq!(five.last(), Some(&1));
        assert_eq!(five.len(), 5);
        for w in five.windows(2) {
            assert!(w[0] > w[1]);
        }
    }

    #[test]
    fn batching_is_deterministic_and_stateless() {
        let ids: Vec<usize> = (0..23).filter(|i| i % 10 != 0).collect();
        for step in 0..40u64 {
            let a = batch_for_step(&ids, step, 4, 7);
            let b = batch_for_step(&ids, step, 4, 7);
            assert_eq!(a, b);
            assert_eq!(a.len(), 4);
            assert!(a.iter().all(|id| ids.contains(id)));
        }
        // Within one epoch the batches partition the permutation.
        let per_epoch = ids.len() / 4;
        let mut seen = Vec::new();
        for step in 0..per_epoch as u64 {
            seen.extend(batch_for_step(&ids, step, 4, 7));
        }
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), per_epoch * 4);
    }

    #[test]
    fn train_smoke_and_determinism() {
        let data = tmp("data");
        std::fs::remove_dir_all(&data).ok();
        let ds = write_dataset(30, 5, &data).unwrap();
        let palette = fit_dataset_palette(&ds, 16);
        palette.save(&data.join("palette.pal")).unwrap();

        let ck1 = tmp("ck1");
        let ck2 = tmp("ck2");
        std::fs::remove_dir_all(&ck1).ok();
        std::fs::remove_dir_all(&ck2).ok();
        let cfg1 = tiny_config(data.clone(), ck1.clone());
        let cfg2 = tiny_config(data.clone(), ck2.clone());
        let p1 = train(&cfg1, None).unwrap();
        let p2 = train(&cfg2, None).unwrap();
        assert_eq!(
            std::fs::read(&p1).unwrap(),
            std::fs::read(&p2).unwrap(),
            "identical seeds must give byte-identical checkpoints"
        );
        // Metrics CSV: header + one row per step.
        let metrics = std::fs::read_to_string(ck1.join("metrics.csv")).unwrap();
        assert_eq!(metrics.lines().count(), 1 + cfg1.steps as usize);
        assert!(metrics.starts_with("step,total,vlb,lz0,wall_time"));

        for d in [&data, &ck1, &ck2] {
            std::fs::remove_dir_all(d).ok();
        }
    }

    #[test]
    fn resume_replays_exactly() {
        let data = tmp("resume-data");
        std::fs::remove_dir_all(&data).ok();
        let ds = write_dataset(30, 6, &data).unwrap();
        let palette = fit_dataset_palette(&ds, 16);
        palette.save(&data.join("palette.pal")).unwrap();

        let full_dir = tmp("resume-full");
        let part_dir = tmp("resume-part");
        std::fs::remove_dir_all(&full_dir).ok();
        std::fs::remove_dir_all(&part_dir).ok();

        let mut full_cfg = tiny_config(data.clone(), full_dir.clone());
        full_cfg.steps = 4;
        full_cfg.ckpt_interval = 100;
        let full = train(&full_cfg, None).unwrap();

        let mut part_cfg = tiny_config(data.clone(), part_dir.clone());
        part_cfg.steps = 2;
        part_cfg.ckpt_interval = 100;
        train(&part_cfg, None).unwrap();
        // Continue from the 2-step checkpoint to 4 steps.
        let mut cont_cfg = part_cfg.clone();
        cont_cfg.steps = 4;
        let resumed = train(&cont_cfg, Some(&part_dir.join("ckpt_final.pddp"))).unwrap();

        let full_bytes = std::fs::read(&full).unwrap();
        let resumed_bytes = std::fs::read(&resumed).unwrap();
        // The config block differs (steps=2 vs steps=4 is not stored; both
        // final metas record their own cfg), so compare the tensor payload
        // through a parsed load instead of raw bytes.
        let (_, p_full, o_full) = load_checkpoint(&full).unwrap();
        let (_, p_res, o_res) = load_checkpoint(&resumed).unwrap();
        assert_eq!(p_full, p_res, "resumed params must match uninterrupted run");
        assert_eq!(o_full.m, o_res.m);
        assert_eq!(o_full.v, o_res.v);
        // With identical configs the bytes agree too.
        assert_eq!(full_bytes.len(), resumed_bytes.len());

        for d in [&data, &full_dir, &part_dir] {
            std::fs::remove_dir_all(d).ok();
        }
    }

    #[test]
    fn lambda_changes_total_by_scaled_lz0() {
        let data = tmp("lambda-data");
        std::fs::remove_dir_all(&data).ok();
        let ds = write_dataset(10, 9, &data).unwrap();
        let palette = fit_dataset_palette(&ds, 16);

        let cfg0 = TrainConfig {
            lambda: 0.0,
            ..tiny_config(data.clone(), tmp("lambda-ck"))
        };
        let cfg1 = TrainConfig {
            lambda: 0.001,
            ..cfg0.clone()
        };
        let model_cfg = cfg0.model_config(32).unwrap();
        let sched = make_schedule(cfg0.t, cfg0.c, cfg0.eta).unwrap();
        let ex0 = prepare_example(1, &ds.load_example(1).unwrap(), &palette, 4).unwrap();
        let ex1 = prepare_example(2, &ds.load_example(2).unwrap(), &palette, 4).unwrap();
        let batch = vec![&ex0, &ex1];

        let run = |cfg: &TrainConfig| -> LossBreakdown {
            let mut params = init_params::<f32>(cfg.seed, model_cfg).unwrap();
            let mut opt = AdamState::new(&params.param_sizes());
            train_step(&batch, &mut params, &mut opt, 0, cfg, &model_cfg, &sched).unwrap()
        };
        let l0 = run(&cfg0);
        let l1 = run(&cfg1);
        assert!((l1.total - (l0.total + 0.001 * l0.lz0)).abs() < 1e-6);
        assert!((l0.vlb - l1.vlb).abs() < 1e-12);
        std::fs::remove_dir_all(&data).ok();
    }

    #[test]
    fn overfits_single_example() {
        let data = tmp("overfit-data");
        std::fs::remove_dir_all(&data).ok();
        let ds = write_dataset(10, 2, &data).unwrap();
        let palette = fit_dataset_palette(&ds, 16);
        let cfg = TrainConfig {
            steps: 200,
            batch_size: 1,
            lr: 3e-3,
            d: 32,
            ..tiny_config(data.clone(), tmp("overfit-ck"))
        };
        let model_cfg = cfg.model_config(32).unwrap();
        let sched = make_schedule(cfg.t, cfg.c, cfg.eta).unwrap();
        let ex = prepare_example(1, &ds.load_example(1).unwrap(), &palette, 4).unwrap();
        let batch = vec![&ex];

        let mut params = init_params::<f32>(cfg.seed, model_cfg).unwrap();
        let mut opt = AdamState::new(&params.param_sizes());
        let mut first = None;
        let mut last = None;
        for step in 0..cfg.steps {
            let loss =
                train_step(&batch, &mut params, &mut opt, step, &cfg, &model_cfg, &sched).unwrap();
            if step == 0 {
                first = Some(loss.total);
            }
            last = Some(loss.total);
        }
        let (first, last) = (first.unwrap(), last.unwrap());
        assert!(
            last < 0.5 * first,
            "overfit sanity: step-200 loss {last} vs step-1 loss {first}"
        );
        std::fs::remove_dir_all(&data).ok();
    }

    #[test]
    fn inpaint_preserves_unmasked_pixels() {
        let ex = make_example(31337);
        let palette = fit_palette(&ex.image.pixels, 8, 1).unwrap();
        let cfg = TrainConfig {
            c: 8,
            ..tiny_config(PathBuf::new(), PathBuf::new())
        };
        let model_cfg = cfg.model_config(32).unwrap();
        let params = init_params::<f32>(0, model_cfg).unwrap();

        for (t_inf, seed) in [(1usize, 4u64), (3, 9), (8, 5)] {
            let mut rng = Rng::new(seed, 0);
            let (out, trace) = inpaint(
                &ex.image, &ex.mask, &ex.sketch, &params, &palette, &cfg, t_inf, &mut rng, false,
            )
            .unwrap();
            for y in 0..32 {
                for x in 0..32 {
                    if ex.mask.get(x, y) == 0 {
                        assert_eq!(out.get(x, y), ex.image.get(x, y));
                    }
                }
            }
            assert_eq!(trace.steps.len(), t_inf + 1);
            assert!(!trace.final_z0.contains_mask());
            // Unmasked latent tokens identical across all trace entries.
            let z0 = encode(&ex.image, &palette, cfg.f).unwrap();
            let mask = downsample_mask(&ex.mask, cfg.f).unwrap();
            for (_, z) in &trace.steps {
                for pos in 0..z.k() {
                    if !mask.bits[pos] {
                        assert_eq!(z.ids[pos], z0.ids[pos]);
                    }
                }
            }
        }
    }

    #[test]
    fn inpaint_all_clear_mask_returns_input() {
        let ex = make_example(77);
        let palette = fit_palette(&ex.image.pixels, 8, 1).unwrap();
        let cfg = TrainConfig {
            c: 8,
            ..tiny_config(PathBuf::new(), PathBuf::new())
        };
        let params = init_params::<f32>(0, cfg.model_config(32).unwrap()).unwrap();
        let empty = GrayImage::filled(32, 32, 0);
        let mut rng = Rng::new(1, 1);
        let (out, _) = inpaint(
            &ex.image, &empty, &ex.sketch, &params, &palette, &cfg, 4, &mut rng, false,
        )
        .unwrap();
        assert_eq!(out, ex.image, "compositing must return the input byte-exactly");
    }

    #[test]
    fn oracle_chain_small_instance() {
        let z0 = TokenGrid::new(2, 2, 4, vec![0, 3, 2, 1]).unwrap();
        let mask = LatentMask {
            h: 2,
            w: 2,
            bits: vec![true, true, false, true],
        };
        let sched = make_schedule(5, 4, 0.05).unwrap();
        let mut rng = Rng::new(13, 0);
        let tv = oracle_reverse_check(&z0, &mask, &sched, 20_000, &mut rng).unwrap();
        assert!(tv < 0.03, "max TV {tv}");
    }
}
