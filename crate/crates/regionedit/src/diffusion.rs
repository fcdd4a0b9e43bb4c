//! Latent diffusion: noise schedule, forward process, inpainting denoiser,
//! classifier-free guidance, and the region-conditioned DDIM sampler with
//! per-step re-noising and blending.
//!
//! Conventions: latents are [h, w, c] tensors, masks are rank-2 [h, w] with
//! 1 marking the region to edit. Timesteps run 1..=T with the cumulative
//! product following the convention alpha_bar[0] = 1, which makes the final
//! blend at t = 1 substitute the *clean* source latent outside the mask —
//! the source of the bit-exact preservation guarantee under the identity
//! codec.

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::rng::{self, Prng};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{adam::AdamState, Tensor};

// ----------------------------------------------------------------- schedule

#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionSchedule {
    pub t_steps: usize,
    /// beta[t-1] is the variance added at step t.
    betas: Vec<f64>,
    /// alpha_bar[t] for t in 0..=T; alpha_bar[0] = 1.
    alpha_bar: Vec<f64>,
    /// Per-step stochasticity; all zero in deterministic mode.
    sigmas: Vec<f64>,
}

impl DiffusionSchedule {
    pub fn linear(t_steps: usize, beta_min: f64, beta_max: f64) -> Result<Self> {
        if t_steps == 0 || beta_min <= 0.0 || beta_max >= 1.0 || beta_min > beta_max {
            return Err(Error::Contract(format!(
                "schedule: need T >= 1 and 0 < beta_min <= beta_max < 1, got T={t_steps}, [{beta_min}, {beta_max}]"
            )));
        }
        let betas: Vec<f64> = (0..t_steps)
            .map(|i| {
                if t_steps == 1 {
                    beta_min
                } else {
                    beta_min + (beta_max - beta_min) * i as f64 / (t_steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bar = vec![1.0];
        for &b in &betas {
            alpha_bar.push(alpha_bar.last().unwrap() * (1.0 - b));
        }
        Ok(Self {
            t_steps,
            betas,
            alpha_bar,
            sigmas: vec![0.0; t_steps + 1],
        })
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// alpha_bar at t in 0..=T (alpha_bar(0) = 1).
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t]
    }

    fn check_t(&self, t: usize, lo: usize) -> Result<()> {
        if t < lo || t > self.t_steps {
            return Err(Error::Contract(format!(
                "timestep {t} outside [{lo}, {}]",
                self.t_steps
            )));
        }
        Ok(())
    }
}

// -------------------------------------------------------------------- codec

/// Pixel <-> latent codec. The default is the identity (downsampling
/// factor 1, 3 channels), which makes decode(encode(x)) == x bit-exact and
/// turns the blending guarantee into a bit-level test.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Codec {
    Identity,
}

impl Codec {
    pub fn encode(&self, pixels: &Tensor) -> Result<Tensor> {
        match self {
            Codec::Identity => Ok(pixels.clone()),
        }
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        match self {
            Codec::Identity => Ok(z.clone()),
        }
    }

    pub fn factor(&self) -> usize {
        1
    }
}

// --------------------------------------------------------------- plain math

fn elementwise3(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(Error::Dim(format!(
            "shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Tensor::new(
        a.shape().to_vec(),
        a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
    )
}

/// z_t = sqrt(alpha_bar_t) z_0 + sqrt(1 - alpha_bar_t) eps, t in 1..=T.
pub fn forward_sample(sch: &DiffusionSchedule, z0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
    sch.check_t(t, 1)?;
    let (a, b) = (sch.alpha_bar(t).sqrt(), (1.0 - sch.alpha_bar(t)).sqrt());
    elementwise3(z0, eps, |z, e| a * z + b * e)
}

/// zhat_{0|t} = (z_t - sqrt(1 - alpha_bar_t) eps_pred) / sqrt(alpha_bar_t).
pub fn estimate_z0(sch: &DiffusionSchedule, z_t: &Tensor, eps_pred: &Tensor, t: usize) -> Result<Tensor> {
    sch.check_t(t, 1)?;
    let (a, b) = (sch.alpha_bar(t).sqrt(), (1.0 - sch.alpha_bar(t)).sqrt());
    elementwise3(z_t, eps_pred, |z, e| (z - b * e) / a)
}

/// Deterministic-DDIM jump from t to t_prev < t:
/// z_prev = sqrt(ab_prev) zhat0 + sqrt(1 - ab_prev - sigma^2) eps_pred
/// (the sigma * fresh-noise term is zero in deterministic mode).
pub fn ddim_step(
    sch: &DiffusionSchedule,
    z_t: &Tensor,
    eps_pred: &Tensor,
    t: usize,
    t_prev: usize,
) -> Result<Tensor> {
    sch.check_t(t, 1)?;
    if t_prev >= t {
        return Err(Error::Contract(format!("ddim_step: t_prev {t_prev} >= t {t}")));
    }
    let sigma = sch.sigma(t);
    let coeff_sq = 1.0 - sch.alpha_bar(t_prev) - sigma * sigma;
    if coeff_sq < 0.0 {
        return Err(Error::InvalidSigma(format!(
            "sigma {sigma} exceeds the step-{t}->{t_prev} noise budget"
        )));
    }
    let zhat0 = estimate_z0(sch, z_t, eps_pred, t)?;
    let (a, b) = (sch.alpha_bar(t_prev).sqrt(), coeff_sq.sqrt());
    elementwise3(&zhat0, eps_pred, |z, e| a * z + b * e)
}

/// Noise the clean source latent to level t_prev (0 allowed: identity).
pub fn renoise_source(
    sch: &DiffusionSchedule,
    z0_src: &Tensor,
    t_prev: usize,
    eps: &Tensor,
) -> Result<Tensor> {
    sch.check_t(t_prev, 0)?;
    let (a, b) = (sch.alpha_bar(t_prev).sqrt(), (1.0 - sch.alpha_bar(t_prev)).sqrt());
    elementwise3(z0_src, eps, |z, e| a * z + b * e)
}

/// m * model + (1 - m) * src, with the rank-2 mask broadcast over channels.
pub fn blend(model: &Tensor, src: &Tensor, mask: &Tensor) -> Result<Tensor> {
    if model.shape() != src.shape()
        || model.shape().len() != 3
        || mask.shape() != &model.shape()[..2]
    {
        return Err(Error::Dim(format!(
            "blend: model {:?}, src {:?}, mask {:?}",
            model.shape(),
            src.shape(),
            mask.shape()
        )));
    }
    let c = model.shape()[2];
    let data = model
        .data()
        .iter()
        .zip(src.data())
        .enumerate()
        .map(|(i, (&zm, &zs))| {
            let m = mask.data()[i / c];
            m * zm + (1.0 - m) * zs
        })
        .collect();
    Tensor::new(model.shape().to_vec(), data)
}

// ---------------------------------------------------------------- denoisers

const TIME_EMB_DIM: usize = 8;

/// Fixed sinusoidal timestep embedding in [1, TIME_EMB_DIM].
pub fn time_embedding(t: usize, t_steps: usize) -> Tensor {
    let pos = t as f64 / t_steps as f64;
    let mut data = Vec::with_capacity(TIME_EMB_DIM);
    for k in 0..TIME_EMB_DIM / 2 {
        let freq = (2.0f64).powi(k as i32) * std::f64::consts::PI;
        data.push((pos * freq).sin());
        data.push((pos * freq).cos());
    }
    Tensor::new(vec![1, TIME_EMB_DIM], data).expect("fixed-size embedding")
}

/// Small convolutional inpainting denoiser. Input is the channel stack
/// concat(z_t, m, (1 - m) * z0) = 7 channels; conditioning enters through
/// feature-wise scale/shift from the timestep embedding (after conv 1) and
/// the caption CLS embedding (after conv 2).
#[derive(Debug, Clone, PartialEq)]
pub struct TinyNet {
    pub channels: usize,
    pub d_text: usize,
    conv1_w: Tensor,
    conv1_b: Tensor,
    t_scale: Tensor,
    t_shift: Tensor,
    conv2_w: Tensor,
    conv2_b: Tensor,
    c_scale: Tensor,
    c_shift: Tensor,
    conv3_w: Tensor,
    conv3_b: Tensor,
}

pub struct BoundTinyNet {
    conv1_w: Var,
    conv1_b: Var,
    t_scale: Var,
    t_shift: Var,
    conv2_w: Var,
    conv2_b: Var,
    c_scale: Var,
    c_shift: Var,
    conv3_w: Var,
    conv3_b: Var,
}

const TINY_FIELDS: [&str; 10] = [
    "conv1_w", "conv1_b", "t_scale", "t_shift", "conv2_w", "conv2_b", "c_scale", "c_shift",
    "conv3_w", "conv3_b",
];

impl TinyNet {
    pub fn init(rng: &mut Prng, channels: usize, d_text: usize) -> Self {
        let c = channels;
        Self {
            channels: c,
            d_text,
            conv1_w: rng::init_tensor(rng, vec![c, 7, 3, 3], 7 * 9),
            conv1_b: Tensor::zeros(vec![c]),
            t_scale: rng::init_tensor(rng, vec![TIME_EMB_DIM, c], TIME_EMB_DIM),
            t_shift: Tensor::zeros(vec![TIME_EMB_DIM, c]),
            conv2_w: rng::init_tensor(rng, vec![c, c, 3, 3], c * 9),
            conv2_b: Tensor::zeros(vec![c]),
            c_scale: rng::init_tensor(rng, vec![d_text, c], d_text),
            c_shift: Tensor::zeros(vec![d_text, c]),
            conv3_w: rng::init_tensor(rng, vec![3, c, 3, 3], c * 9),
            conv3_b: Tensor::zeros(vec![3]),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.conv1_w, &self.conv1_b, &self.t_scale, &self.t_shift, &self.conv2_w,
            &self.conv2_b, &self.c_scale, &self.c_shift, &self.conv3_w, &self.conv3_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.t_scale,
            &mut self.t_shift,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.c_scale,
            &mut self.c_shift,
            &mut self.conv3_w,
            &mut self.conv3_b,
        ]
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundTinyNet {
        let mut vs = self
            .tensors()
            .into_iter()
            .map(|t| tape.leaf(t.clone(), trainable));
        BoundTinyNet {
            conv1_w: vs.next().unwrap(),
            conv1_b: vs.next().unwrap(),
            t_scale: vs.next().unwrap(),
            t_shift: vs.next().unwrap(),
            conv2_w: vs.next().unwrap(),
            conv2_b: vs.next().unwrap(),
            c_scale: vs.next().unwrap(),
            c_shift: vs.next().unwrap(),
            conv3_w: vs.next().unwrap(),
            conv3_b: vs.next().unwrap(),
        }
    }

    pub fn save_into(&self, prefix: &str, ck: &mut Checkpoint) -> Result<()> {
        ck.insert(
            &format!("{prefix}.meta"),
            Tensor::from_vec(vec![self.channels as f64, self.d_text as f64]),
        )?;
        for (name, t) in TINY_FIELDS.iter().zip(self.tensors()) {
            ck.insert(&format!("{prefix}.{name}"), t.clone())?;
        }
        Ok(())
    }

    pub fn load_from(prefix: &str, ck: &Checkpoint) -> Result<Self> {
        let meta = ck.get_shaped(&format!("{prefix}.meta"), &[2])?;
        let mut r = rng::seeded(0);
        let mut net = Self::init(&mut r, meta.data()[0] as usize, meta.data()[1] as usize);
        for (name, t) in TINY_FIELDS.iter().zip(net.tensors_mut()) {
            *t = ck.get(&format!("{prefix}.{name}"))?.clone();
        }
        Ok(net)
    }
}

impl BoundTinyNet {
    pub fn vars(&self) -> Vec<Var> {
        vec![
            self.conv1_w, self.conv1_b, self.t_scale, self.t_shift, self.conv2_w, self.conv2_b,
            self.c_scale, self.c_shift, self.conv3_w, self.conv3_b,
        ]
    }

    /// `z_t` [h,w,3], `mask` [h,w], `context` [h,w,3], caption CLS [1,d].
    /// Everything differentiable, weights included when bound trainable.
    pub fn forward(
        &self,
        tape: &mut Tape,
        z_t: Var,
        mask: Var,
        context: Var,
        t: usize,
        t_steps: usize,
        caption_cls: Var,
    ) -> Result<Var> {
        let mask3 = {
            let m = tape.value(mask).clone();
            let (h, w) = (m.shape()[0], m.shape()[1]);
            let mv = tape.reshape(mask, vec![h, w, 1])?;
            let _ = m;
            mv
        };
        let x = tape.concat_channels(z_t, mask3)?;
        let x = tape.concat_channels(x, context)?;

        let x = tape.conv2d(x, self.conv1_w, self.conv1_b)?;
        let temb = tape.leaf(time_embedding(t, t_steps), false);
        let ts = tape.matmul(temb, self.t_scale)?;
        let tb = tape.matmul(temb, self.t_shift)?;
        let ones = tape.leaf(Tensor::full(vec![1, tape.value(ts).numel()], 1.0), false);
        let ts1 = tape.add(ts, ones)?;
        let x = tape.mul_channels(x, ts1)?;
        let x = tape.add_channels(x, tb)?;
        let x = tape.gelu(x)?;

        let x = tape.conv2d(x, self.conv2_w, self.conv2_b)?;
        let cs = tape.matmul(caption_cls, self.c_scale)?;
        let cb = tape.matmul(caption_cls, self.c_shift)?;
        let ones2 = tape.leaf(Tensor::full(vec![1, tape.value(cs).numel()], 1.0), false);
        let cs1 = tape.add(cs, ones2)?;
        let x = tape.mul_channels(x, cs1)?;
        let x = tape.add_channels(x, cb)?;
        let x = tape.gelu(x)?;

        tape.conv2d(x, self.conv3_w, self.conv3_b)
    }
}

/// Analytic optimal denoiser for data z_0 ~ N(mu, s^2 I): the posterior
/// mean of eps given z_t is affine in z_t, which yields a closed-form DDIM
/// trajectory used to verify the sampler independently.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianOracle {
    pub mu: Tensor,
    pub s: f64,
}

impl GaussianOracle {
    /// eps_hat = sqrt(1-ab_t) (z_t - sqrt(ab_t) mu) / (ab_t s^2 + 1 - ab_t).
    pub fn predict(&self, sch: &DiffusionSchedule, z_t: &Tensor, t: usize) -> Result<Tensor> {
        sch.check_t(t, 1)?;
        if z_t.shape() != self.mu.shape() {
            return Err(Error::Dim("oracle: z_t shape differs from mu".into()));
        }
        let ab = sch.alpha_bar(t);
        let denom = ab * self.s * self.s + 1.0 - ab;
        let scale = (1.0 - ab).sqrt() / denom;
        let root_ab = ab.sqrt();
        elementwise3(z_t, &self.mu, |z, m| scale * (z - root_ab * m))
    }
}

/// The denoiser used by the sampler: the trained network or the analytic
/// verification oracle (which ignores mask, context, and caption).
#[derive(Debug, Clone, PartialEq)]
pub enum Denoiser {
    Tiny(TinyNet),
    Oracle(GaussianOracle),
}

impl Denoiser {
    /// Plain-tensor prediction for the frozen inference path.
    pub fn predict(
        &self,
        sch: &DiffusionSchedule,
        z_t: &Tensor,
        mask: &Tensor,
        context: &Tensor,
        t: usize,
        caption_cls: &Tensor,
    ) -> Result<Tensor> {
        match self {
            Denoiser::Oracle(o) => o.predict(sch, z_t, t),
            Denoiser::Tiny(net) => {
                let mut tape = Tape::new();
                let b = net.bind(&mut tape, false);
                let zv = tape.leaf(z_t.clone(), false);
                let mv = tape.leaf(mask.clone(), false);
                let cv = tape.leaf(context.clone(), false);
                let cap = tape.leaf(caption_cls.clone(), false);
                let out = b.forward(&mut tape, zv, mv, cv, t, sch.t_steps, cap)?;
                Ok(tape.value(out).clone())
            }
        }
    }
}

// ------------------------------------------------------------------ guidance

/// Classifier-free guidance: eps_uncond + w * (eps_cond - eps_uncond).
/// At w = 1 the unconditional pass is skipped entirely.
#[allow(clippy::too_many_arguments)]
pub fn cfg_predict(
    denoiser: &Denoiser,
    sch: &DiffusionSchedule,
    z_t: &Tensor,
    mask: &Tensor,
    context: &Tensor,
    t: usize,
    c_e: &Tensor,
    c_null: &Tensor,
    w_cfg: f64,
) -> Result<Tensor> {
    if w_cfg < 0.0 {
        return Err(Error::Contract(format!("w_cfg must be >= 0, got {w_cfg}")));
    }
    if (w_cfg - 1.0).abs() == 0.0 {
        return denoiser.predict(sch, z_t, mask, context, t, c_e);
    }
    let uncond = denoiser.predict(sch, z_t, mask, context, t, c_null)?;
    if w_cfg == 0.0 {
        return Ok(uncond);
    }
    let cond = denoiser.predict(sch, z_t, mask, context, t, c_e)?;
    elementwise3(&uncond, &cond, |u, c| u + w_cfg * (c - u))
}

// ------------------------------------------------------------------- sampler

/// How the step-(t-1) source-re-noising noise eps' is chosen when sigma = 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EpsMode {
    /// eps' = eps_pred (noise derived consistently from the prediction).
    Reuse,
    /// eps' drawn fresh from the run's stream each step.
    Fresh,
}

impl EpsMode {
    pub fn from_str(s: &str) -> Result<Self> {
        match s {
            "reuse" => Ok(EpsMode::Reuse),
            "fresh" => Ok(EpsMode::Fresh),
            _ => Err(Error::Contract(format!("unknown eps mode {s:?}"))),
        }
    }
}

pub struct EditOutcome {
    pub x_res: Tensor,
    pub z0: Tensor,
    /// z_t after each blend, newest last, when trajectory logging is on.
    pub trajectory: Option<Vec<Tensor>>,
}

/// The full region-conditioned editing sampler: start from pure noise and
/// iteratively denoise with guidance, re-noising the source outside the
/// mask at every step. Deterministic given (inputs, seed).
#[allow(clippy::too_many_arguments)]
pub fn edit_sample(
    denoiser: &Denoiser,
    codec: &Codec,
    sch: &DiffusionSchedule,
    x_src: &Tensor,
    pixel_mask: &Tensor,
    c_e: &Tensor,
    c_null: &Tensor,
    w_cfg: f64,
    eps_mode: EpsMode,
    seed: u64,
    log_trajectory: bool,
) -> Result<EditOutcome> {
    let z0_src = codec.encode(x_src)?;
    if pixel_mask.shape() != &z0_src.shape()[..2] {
        return Err(Error::Dim(format!(
            "edit_sample: mask {:?} does not match latent {:?}",
            pixel_mask.shape(),
            z0_src.shape()
        )));
    }
    let c = z0_src.shape()[2];
    // Clean context for the inpainting channels: (1 - m) * z0_src.
    let context = Tensor::new(
        z0_src.shape().to_vec(),
        z0_src
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| (1.0 - pixel_mask.data()[i / c]) * v)
            .collect(),
    )?;

    let mut noise_rng = rng::substream(seed, "edit-sample");
    let mut z_t = rng::normal_tensor(&mut noise_rng, z0_src.shape().to_vec());
    let mut trajectory = log_trajectory.then(Vec::new);

    for t in (1..=sch.t_steps).rev() {
        let eps_pred = cfg_predict(denoiser, sch, &z_t, pixel_mask, &context, t, c_e, c_null, w_cfg)?;
        let z_model = ddim_step(sch, &z_t, &eps_pred, t, t - 1)?;
        let eps_src = match eps_mode {
            EpsMode::Reuse => eps_pred,
            EpsMode::Fresh => rng::normal_tensor(&mut noise_rng, z0_src.shape().to_vec()),
        };
        let z_src = renoise_source(sch, &z0_src, t - 1, &eps_src)?;
        z_t = blend(&z_model, &z_src, pixel_mask)?;
        if let Some(tr) = trajectory.as_mut() {
            tr.push(z_t.clone());
        }
    }
    let x_res = codec.decode(&z_t)?;
    Ok(EditOutcome {
        x_res,
        z0: z_t,
        trajectory,
    })
}

// ------------------------------------------------------------------ training

/// One denoiser-training example: a clean latent, its caption CLS
/// embedding, and optionally an oracle edit mask to mix with random
/// rectangles.
pub struct DenoiserExample {
    pub z0: Tensor,
    pub caption_cls: Tensor,
    pub oracle_mask: Option<Tensor>,
}

pub struct DenoiserTraining {
    pub net: TinyNet,
    /// Mean per-example sum-of-squares loss for each epoch.
    pub epoch_losses: Vec<f64>,
}

/// Random axis-aligned rectangle mask covering 1/16 .. 9/16 of the canvas.
fn random_rect_mask(rng: &mut Prng, h: usize, w: usize) -> Tensor {
    use rand::Rng;
    let rh = rng.gen_range(h / 4..=3 * h / 4);
    let rw = rng.gen_range(w / 4..=3 * w / 4);
    let y0 = rng.gen_range(0..=h - rh);
    let x0 = rng.gen_range(0..=w - rw);
    let mut data = vec![0.0; h * w];
    for y in y0..y0 + rh {
        for x in x0..x0 + rw {
            data[y * w + x] = 1.0;
        }
    }
    Tensor::new(vec![h, w], data).expect("mask buffer")
}

/// Train the inpainting denoiser: per step, draw (t, eps, mask), form
/// z_t and the masked context, and regress the added noise with a
/// sum-of-squares objective. Caption conditioning is dropped to the null
/// embedding with probability `cond_dropout` so guidance has an
/// unconditional branch.
#[allow(clippy::too_many_arguments)]
pub fn train_denoiser(
    examples: &[DenoiserExample],
    c_null: &Tensor,
    sch: &DiffusionSchedule,
    channels: usize,
    epochs: usize,
    batch: usize,
    lr: f64,
    cond_dropout: f64,
    seed: u64,
) -> Result<DenoiserTraining> {
    use rand::seq::SliceRandom;
    use rand::Rng;
    if examples.is_empty() {
        return Err(Error::Contract("train_denoiser: empty corpus".into()));
    }
    let d_text = c_null.numel();
    let mut init_rng = rng::substream(seed, "denoiser-init");
    let mut net = TinyNet::init(&mut init_rng, channels, d_text);
    let mut adam = AdamState::for_params(lr, &net.tensors());
    let mut step_rng = rng::substream(seed, "denoiser-steps");

    let mut epoch_losses = Vec::with_capacity(epochs);
    for _epoch in 0..epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut step_rng);
        let mut total = 0.0;
        let mut count = 0usize;
        for chunk in order.chunks(batch) {
            let mut tape = Tape::new();
            let bound = net.bind(&mut tape, true);
            let mut loss_acc: Option<Var> = None;
            for &i in chunk {
                let ex = &examples[i];
                let (h, w) = (ex.z0.shape()[0], ex.z0.shape()[1]);
                let t = step_rng.gen_range(1..=sch.t_steps);
                let eps = rng::normal_tensor(&mut step_rng, ex.z0.shape().to_vec());
                let mask = match (&ex.oracle_mask, step_rng.gen_bool(0.5)) {
                    (Some(m), true) => m.clone(),
                    _ => random_rect_mask(&mut step_rng, h, w),
                };
                let z_t = forward_sample(sch, &ex.z0, t, &eps)?;
                let context = blend(&Tensor::zeros(ex.z0.shape().to_vec()), &ex.z0, &mask)?;
                let caption = if step_rng.gen_bool(cond_dropout) {
                    c_null.clone()
                } else {
                    ex.caption_cls.clone()
                };

                let zv = tape.leaf(z_t, false);
                let mv = tape.leaf(mask, false);
                let cv = tape.leaf(context, false);
                let cap = tape.leaf(caption, false);
                let pred = bound.forward(&mut tape, zv, mv, cv, t, sch.t_steps, cap)?;
                let target = tape.leaf(eps, false);
                let diff = tape.sub(pred, target)?;
                let sq = tape.mul(diff, diff)?;
                let l = tape.sum(sq)?;
                loss_acc = Some(match loss_acc {
                    None => l,
                    Some(acc) => tape.add(acc, l)?,
                });
            }
            let loss = tape.scale(loss_acc.unwrap(), 1.0 / chunk.len() as f64)?;
            total += tape.value(loss).item();
            count += 1;
            tape.backward(loss)?;
            let vars = bound.vars();
            let grads: Vec<Tensor> = vars
                .iter()
                .map(|&v| {
                    tape.grad(v)
                        .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape().to_vec()))
                })
                .collect();
            adam.step(&mut net.tensors_mut(), &grads)?;
        }
        epoch_losses.push(total / count as f64);
    }
    Ok(DenoiserTraining { net, epoch_losses })
}
