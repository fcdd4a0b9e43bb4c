//! Evaluation metrics for edited images: pixel distances, embedding
//! similarities (main and auxiliary towers), directional agreement, and
//! region-mask IoU with a matched-area random baseline.

use crate::diffusion::{edit_sample, Codec, Denoiser, DiffusionSchedule, EpsMode};
use crate::encoders::VisionEncoder;
use crate::error::{Error, Result};
use crate::objectives::EditorExample;
use crate::region::{harden, FusionWeights, RegionPrediction};
use crate::rng;
use crate::tensor::{tape::Tape, Tensor};
use rand::Rng;

// ------------------------------------------------------------- scalar bits

/// Cosine similarity of two equally shaped tensors, flattened.
pub fn cosine_sim(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Dim("cosine_sim: shape mismatch".into()));
    }
    let (na, nb) = (a.l2_norm(), b.l2_norm());
    if na < 1e-12 || nb < 1e-12 {
        return Err(Error::DegenerateInput("cosine_sim: zero-norm input".into()));
    }
    let dot: f64 = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
    Ok(dot / (na * nb))
}

/// Mean absolute per-component pixel distance.
pub fn pixel_l1(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Dim("pixel_l1: shape mismatch".into()));
    }
    let n = a.numel() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>() / n)
}

/// Root-mean-square per-component pixel distance.
pub fn pixel_l2(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::Dim("pixel_l2: shape mismatch".into()));
    }
    let n = a.numel() as f64;
    Ok((a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n).sqrt())
}

/// Mean absolute distance restricted to pixels whose mask value equals
/// `keep` (mask is per-pixel, images are [h, w, c]).
pub fn masked_l1(a: &Tensor, b: &Tensor, pixel_mask: &[u8], keep: u8) -> Result<f64> {
    if a.shape() != b.shape() || a.shape().len() != 3 {
        return Err(Error::Dim("masked_l1: need matching [h,w,c] images".into()));
    }
    let c = a.shape()[2];
    if pixel_mask.len() * c != a.numel() {
        return Err(Error::Dim("masked_l1: mask length mismatch".into()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, &m) in pixel_mask.iter().enumerate() {
        if m == keep {
            for ch in 0..c {
                let i = p * c + ch;
                sum += (a.data()[i] - b.data()[i]).abs();
                n += 1;
            }
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Intersection-over-union of two binary masks. Two empty masks agree
/// perfectly (IoU 1).
pub fn iou(a: &[u8], b: &[u8]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dim("iou: mask length mismatch".into()));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x != 0, y != 0);
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// A uniformly random patch-grid mask with exactly `active` cells out of
/// grid*grid, expanded to a pixel mask. Used as the matched-area baseline
/// against which predicted-region IoU is compared.
pub fn matched_area_random_mask(
    grid: usize,
    patch: usize,
    active: usize,
    rng: &mut rng::Prng,
) -> Result<Vec<u8>> {
    let n = grid * grid;
    if active > n {
        return Err(Error::Contract(format!("mask area {active} exceeds {n} cells")));
    }
    // Partial Fisher-Yates: the first `active` slots are a uniform subset.
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..active {
        let j = i + rng.gen_range(0..n - i);
        idx.swap(i, j);
    }
    let mut cells = vec![0u8; n];
    for &i in &idx[..active] {
        cells[i] = 1;
    }
    let side = grid * patch;
    let mut pixels = vec![0u8; side * side];
    for y in 0..side {
        for x in 0..side {
            pixels[y * side + x] = cells[(y / patch) * grid + (x / patch)];
        }
    }
    Ok(pixels)
}

// ------------------------------------------------------------- region infer

/// Inference-time region prediction: run the fusion module without
/// gradients and harden at `threshold`.
pub fn infer_region(
    fusion: &FusionWeights,
    f_img: &Tensor,
    f_ins: &Tensor,
    ins_pad: &[bool],
    threshold: f64,
    patch: usize,
) -> Result<RegionPrediction> {
    let mut tape = Tape::new();
    let bf = fusion.bind(&mut tape, false);
    let fi = tape.leaf(f_img.clone(), false);
    let fs = tape.leaf(f_ins.clone(), false);
    let (_, p) = bf.forward(&mut tape, fi, fs, ins_pad)?;
    let probs = tape.value(p).data().to_vec();
    harden(&probs, threshold, patch)
}

// --------------------------------------------------------------- evaluation

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct MetricReport {
    /// Whole-image pixel distances between result and source.
    pub l1: f64,
    pub l2: f64,
    /// Result-vs-source CLS cosine under the main and auxiliary towers.
    pub clip_i: f64,
    pub aux_i: f64,
    /// Result-vs-edited-caption cosine.
    pub clip_out: f64,
    /// Cosine between the image delta and the text delta.
    pub clip_dir: f64,
    /// Predicted mask vs oracle mask.
    pub iou: f64,
    pub mask_area: f64,
    /// Mean |result - source| outside the predicted mask (0 for hard masks
    /// with the identity codec).
    pub unmasked_l1: f64,
}

/// One evaluation example: the frozen features plus the oracle region.
#[derive(Debug, Clone)]
pub struct EvalExample {
    pub features: EditorExample,
    /// Ground-truth pixel mask, length side*side.
    pub oracle_pixel_mask: Vec<u8>,
}

#[derive(Debug, Clone, Default)]
pub struct EvalSummary {
    pub mean: MetricReport,
    /// Mean IoU of matched-area uniformly random masks vs the oracle.
    pub baseline_iou: f64,
    pub count: usize,
    /// Examples whose directional cosine was degenerate (excluded from the
    /// clip_dir mean only).
    pub dir_skipped: usize,
}

/// Run the full inference path on every example and average the metrics.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    examples: &[EvalExample],
    fusion: &FusionWeights,
    vision: &VisionEncoder,
    aux_vision: &VisionEncoder,
    denoiser: &Denoiser,
    codec: &Codec,
    sch: &DiffusionSchedule,
    c_null: &Tensor,
    threshold: f64,
    w_cfg: f64,
    eps_mode: EpsMode,
    seed: u64,
) -> Result<EvalSummary> {
    if examples.is_empty() {
        return Err(Error::Contract("evaluate: empty example list".into()));
    }
    let grid = (vision.num_patches() as f64).sqrt() as usize;
    let mut sum = MetricReport::default();
    let mut baseline_sum = 0.0;
    let mut dir_sum = 0.0;
    let mut dir_n = 0usize;
    let mut base_rng = rng::substream(seed, "eval-baseline");

    for ex in examples {
        let f = &ex.features;
        let region = infer_region(fusion, &f.f_img, &f.f_ins, &f.ins_pad, threshold, vision.patch)?;
        let pm = region.pixel_mask_tensor();
        let out = edit_sample(
            denoiser, codec, sch, &f.pixels, &pm, &f.t_e, c_null, w_cfg, eps_mode,
            f.noise_seed, false,
        )?;
        let x_res = &out.x_res;

        let (i_res, _) = vision.encode_image(x_res)?;
        let (aux_res, _) = aux_vision.encode_image(x_res)?;
        let (aux_src, _) = aux_vision.encode_image(&f.pixels)?;

        sum.l1 += pixel_l1(x_res, &f.pixels)?;
        sum.l2 += pixel_l2(x_res, &f.pixels)?;
        sum.clip_i += cosine_sim(&i_res, &f.i_ori)?;
        sum.aux_i += cosine_sim(&aux_res, &aux_src)?;
        sum.clip_out += cosine_sim(&i_res, &f.t_e)?;
        sum.iou += iou(&region.pixel_mask, &ex.oracle_pixel_mask)?;
        sum.mask_area += region.mask_area_fraction();
        sum.unmasked_l1 += masked_l1(x_res, &f.pixels, &region.pixel_mask, 0)?;

        let di = sub(&i_res, &f.i_ori)?;
        let dt = sub(&f.t_e, &f.t_o)?;
        match cosine_sim(&di, &dt) {
            Ok(c) => {
                dir_sum += c;
                dir_n += 1;
            }
            Err(Error::DegenerateInput(_)) => {}
            Err(e) => return Err(e),
        }

        let active = region.m_region.iter().filter(|&&b| b != 0).count();
        let rand_mask = matched_area_random_mask(grid, vision.patch, active, &mut base_rng)?;
        baseline_sum += iou(&rand_mask, &ex.oracle_pixel_mask)?;
    }

    let n = examples.len() as f64;
    let mut mean = MetricReport {
        l1: sum.l1 / n,
        l2: sum.l2 / n,
        clip_i: sum.clip_i / n,
        aux_i: sum.aux_i / n,
        clip_out: sum.clip_out / n,
        clip_dir: 0.0,
        iou: sum.iou / n,
        mask_area: sum.mask_area / n,
        unmasked_l1: sum.unmasked_l1 / n,
    };
    if dir_n > 0 {
        mean.clip_dir = dir_sum / dir_n as f64;
    }
    Ok(EvalSummary {
        mean,
        baseline_iou: baseline_sum / n,
        count: examples.len(),
        dir_skipped: examples.len() - dir_n,
    })
}

fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect(),
    )
}
