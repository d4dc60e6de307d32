//! Evaluation: masked-token accuracy and NLL against the ground-truth
//! latent, plus a fill-ratio silhouette probe as the sketch-consistency
//! proxy metric.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{downsample_mask, encode, Palette};
use crate::diffusion::{nll_from_p0, CategoricalField};
use crate::engine::{inpaint, reverse_chain, SampleTrace, TrainConfig};
use crate::error::{Error, Result};
use crate::model::DenoiserParams;
use crate::netpbm::{GrayImage, RgbImage};
use crate::schedule::make_schedule;
use crate::shapeworld::{rasterize_edgemap, Dataset, Rect, ShapeClass};
use crate::substrate::{stream_hash, Rng};

const STREAM_EVAL: u64 = 0x6576616c; // "eval"

/// Padded palettes contain near-duplicate colors; indices whose colors sit
/// within this L-inf radius of the border color count as background.
const BG_COLOR_TOLERANCE: i32 = 2;

const SQUARE_THRESHOLD: f64 = 0.87;
const CIRCLE_THRESHOLD: f64 = 0.65;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbeClass {
    Circle,
    Square,
    Triangle,
    None,
}

impl ProbeClass {
    pub fn matches(&self, class: ShapeClass) -> bool {
        matches!(
            (self, class),
            (ProbeClass::Circle, ShapeClass::Circle)
                | (ProbeClass::Square, ShapeClass::Square)
                | (ProbeClass::Triangle, ShapeClass::Triangle)
        )
    }
}

/// Fill-ratio silhouette probe over a decoded masked region.
///
/// Background is the modal palette index on the ring just outside the mask
/// rectangle; foreground is every region pixel whose palette color differs
/// from the background color beyond the padding tolerance. The fill ratio
/// of the foreground inside its own bounding box classifies the shape:
/// squares fill ~1.0, circles ~pi/4, triangles ~0.5.
pub fn silhouette_probe(image: &RgbImage, region: Rect, palette: &Palette) -> ProbeClass {
    let idx_of = |x: i32, y: i32| -> usize {
        let p = image.get(x as usize, y as usize);
        palette.nearest([p[0] as f64, p[1] as f64, p[2] as f64])
    };

    // Modal palette index on the border ring (falls back to the region
    // perimeter when the mask touches the canvas edge on all sides).
    let ring = region.expand(1);
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    let w = image.width as i32;
    let h = image.height as i32;
    for y in ring.y0..=ring.y1 {
        for x in ring.x0..=ring.x1 {
            let on_ring = x == ring.x0 || x == ring.x1 || y == ring.y0 || y == ring.y1;
            if !on_ring || x < 0 || y < 0 || x >= w || y >= h {
                continue;
            }
            *counts.entry(idx_of(x, y)).or_insert(0) += 1;
        }
    }
    if counts.is_empty() {
        for y in region.y0..=region.y1 {
            for x in region.x0..=region.x1 {
                let on_edge =
                    x == region.x0 || x == region.x1 || y == region.y0 || y == region.y1;
                if on_edge {
                    *counts.entry(idx_of(x, y)).or_insert(0) += 1;
                }
            }
        }
    }
    let bg_idx = counts
        .iter()
        .max_by_key(|(idx, n)| (**n, usize::MAX - **idx))
        .map(|(idx, _)| *idx)
        .unwrap_or(0);
    let bg_color = palette.colors[bg_idx];

    let is_bg = |idx: usize| -> bool {
        let c = palette.colors[idx];
        (0..3).all(|ch| (c[ch] as i32 - bg_color[ch] as i32).abs() <= BG_COLOR_TOLERANCE)
    };

    let mut fg = 0usize;
    let mut bbox: Option<Rect> = None;
    for y in region.y0.max(0)..=region.y1.min(h - 1) {
        for x in region.x0.max(0)..=region.x1.min(w - 1) {
            if !is_bg(idx_of(x, y)) {
                fg += 1;
                bbox = Some(match bbox {
                    None => Rect { x0: x, y0: y, x1: x, y1: y },
                    Some(b) => Rect {
                        x0: b.x0.min(x),
                        y0: b.y0.min(y),
                        x1: b.x1.max(x),
                        y1: b.y1.max(y),
                    },
                });
            }
        }
    }
    let Some(bbox) = bbox else {
        return ProbeClass::None;
    };
    let ratio = fg as f64 / (bbox.width() as f64 * bbox.height() as f64);
    if ratio >= SQUARE_THRESHOLD {
        ProbeClass::Square
    } else if ratio >= CIRCLE_THRESHOLD {
        ProbeClass::Circle
    } else {
        ProbeClass::Triangle
    }
}

/// Bounding rectangle of the nonzero pixels of a mask image.
pub fn mask_bbox(mask: &GrayImage) -> Option<Rect> {
    let mut r: Option<Rect> = None;
    for y in 0..mask.height as i32 {
        for x in 0..mask.width as i32 {
            if mask.get(x as usize, y as usize) > 0 {
                r = Some(match r {
                    None => Rect { x0: x, y0: y, x1: x, y1: y },
                    Some(b) => Rect {
                        x0: b.x0.min(x),
                        y0: b.y0.min(y),
                        x1: b.x1.max(x),
                        y1: b.y1.max(y),
                    },
                });
            }
        }
    }
    r
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassStats {
    pub n: usize,
    pub agreement: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub t_inf: usize,
    pub edge_map: bool,
    /// Fraction of masked latent positions where the sampled clean token
    /// equals the ground-truth token.
    pub accuracy: f64,
    /// Mean masked NLL of the ground-truth tokens under the final p0.
    pub nll: f64,
    /// Fraction of examples whose probed shape matches the target class.
    pub shape_agreement: f64,
    pub per_class: BTreeMap<String, ClassStats>,
    pub config: TrainConfig,
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub t_inf: usize,
    pub seed: u64,
    pub edge_map: bool,
    /// Evaluate at most this many examples (0 = all).
    pub limit: usize,
    pub greedy: bool,
}

/// The predictor under evaluation: the trained denoiser, or an oracle that
/// returns one-hot true tokens (harness self-test upper bound).
pub enum EvalModel<'a> {
    Denoiser(&'a DenoiserParams<f32>),
    OracleTrueTokens,
}

struct ExampleOutcome {
    class: ShapeClass,
    masked: usize,
    correct: usize,
    nll_sum: f64,
    agreed: bool,
}

/// Evaluate on the given dataset ids. Inpainting uses a fixed per-example
/// seed stream, so reports are deterministic.
pub fn eval(
    model: &EvalModel,
    cfg: &TrainConfig,
    palette: &Palette,
    dataset: &Dataset,
    ids: &[usize],
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if ids.is_empty() {
        return Err(Error::contract("evaluation split is empty"));
    }
    if palette.c() != cfg.c {
        return Err(Error::Config(format!(
            "palette C={} vs config C={}",
            palette.c(),
            cfg.c
        )));
    }
    if let EvalModel::Denoiser(params) = model {
        let model_cfg = cfg.model_config(crate::shapeworld::IMG_SIZE)?;
        if params.config != model_cfg {
            return Err(Error::Config(format!(
                "checkpoint model {:?} does not match eval config {:?}",
                params.config, model_cfg
            )));
        }
    }
    let take = if opts.limit == 0 {
        ids.len()
    } else {
        opts.limit.min(ids.len())
    };
    let ids = &ids[..take];

    let outcomes: Vec<Result<ExampleOutcome>> = ids
        .par_iter()
        .map(|&id| eval_one(model, cfg, palette, dataset, id, opts))
        .collect();

    let mut per_class: BTreeMap<String, (usize, usize, usize, usize)> = BTreeMap::new();
    let mut masked_total = 0usize;
    let mut correct_total = 0usize;
    let mut nll_total = 0.0;
    let mut agreed_total = 0usize;
    for outcome in outcomes {
        let o = outcome?;
        masked_total += o.masked;
        correct_total += o.correct;
        nll_total += o.nll_sum;
        agreed_total += o.agreed as usize;
        let entry = per_class.entry(o.class.name().to_string()).or_insert((0, 0, 0, 0));
        entry.0 += 1;
        entry.1 += o.agreed as usize;
        entry.2 += o.masked;
        entry.3 += o.correct;
    }

    Ok(EvalReport {
        n: ids.len(),
        t_inf: opts.t_inf,
        edge_map: opts.edge_map,
        accuracy: correct_total as f64 / masked_total.max(1) as f64,
        nll: nll_total / masked_total.max(1) as f64,
        shape_agreement: agreed_total as f64 / ids.len() as f64,
        per_class: per_class
            .into_iter()
            .map(|(name, (n, agreed, masked, correct))| {
                (
                    name,
                    ClassStats {
                        n,
                        agreement: agreed as f64 / n.max(1) as f64,
                        accuracy: correct as f64 / masked.max(1) as f64,
                    },
                )
            })
            .collect(),
        config: cfg.clone(),
    })
}

fn eval_one(
    model: &EvalModel,
    cfg: &TrainConfig,
    palette: &Palette,
    dataset: &Dataset,
    id: usize,
    opts: &EvalOptions,
) -> Result<ExampleOutcome> {
    let ex = dataset.load_example(id)?;
    let sketch = if opts.edge_map {
        rasterize_edgemap(&ex.image, &ex.mask)
    } else {
        ex.sketch.clone()
    };
    let mut rng = Rng::new(opts.seed, stream_hash(&[STREAM_EVAL, id as u64]));

    let z0_gt = encode(&ex.image, palette, cfg.f)?;
    let latent_mask = downsample_mask(&ex.mask, cfg.f)?;

    let (output, trace): (RgbImage, SampleTrace) = match model {
        EvalModel::Denoiser(params) => inpaint(
            &ex.image,
            &ex.mask,
            &sketch,
            params,
            palette,
            cfg,
            opts.t_inf,
            &mut rng,
            opts.greedy,
        )?,
        EvalModel::OracleTrueTokens => {
            let sched = make_schedule(cfg.t, cfg.c, cfg.eta)?;
            let hots: Vec<usize> = z0_gt.ids.iter().map(|&v| v as usize).collect();
            let (z_final, steps, final_p0) = reverse_chain(
                &z0_gt,
                &latent_mask,
                &sched,
                opts.t_inf,
                &mut rng,
                opts.greedy,
                |_, _| Ok(CategoricalField::one_hot(z0_gt.k(), cfg.c, false, &hots)),
            )?;
            let decoded = crate::codec::decode(&z_final, palette, cfg.f)?;
            let mut out = ex.image.clone();
            for y in 0..out.height {
                for x in 0..out.width {
                    if ex.mask.get(x, y) > 0 {
                        out.set(x, y, decoded.get(x, y));
                    }
                }
            }
            (
                out,
                SampleTrace {
                    steps,
                    final_z0: z_final,
                    decoded,
                    final_p0,
                },
            )
        }
    };

    let masked_ids = latent_mask.masked_indices();
    let correct = masked_ids
        .iter()
        .filter(|&&pos| trace.final_z0.ids[pos] == z0_gt.ids[pos])
        .count();
    let nll_sum = nll_from_p0(&trace.final_p0, &z0_gt, &latent_mask) * masked_ids.len() as f64;

    let region = mask_bbox(&ex.mask).ok_or_else(|| Error::Data {
        index: id,
        msg: "example mask is empty".into(),
    })?;
    let probe = silhouette_probe(&output, region, palette);
    Ok(ExampleOutcome {
        class: ex.meta.target_object().class,
        masked: masked_ids.len(),
        correct,
        nll_sum,
        agreed: probe.matches(ex.meta.target_object().class),
    })
}

/// Run eval at several inference-step settings.
pub fn sweep(
    model: &EvalModel,
    cfg: &TrainConfig,
    palette: &Palette,
    dataset: &Dataset,
    ids: &[usize],
    t_infs: &[usize],
    opts: &EvalOptions,
) -> Result<Vec<EvalReport>> {
    t_infs
        .iter()
        .map(|&t_inf| {
            eval(
                model,
                cfg,
                palette,
                dataset,
                ids,
                &EvalOptions { t_inf, ..*opts },
            )
        })
        .collect()
}

pub fn sweep_csv(reports: &[EvalReport]) -> String {
    let mut out = String::from("T_inf,accuracy,nll,agreement,n\n");
    for r in reports {
        out.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{}\n",
            r.t_inf, r.accuracy, r.nll, r.shape_agreement, r.n
        ));
    }
    out
}
