//! Dual image/text encoders, the instruction encoder, the semantic
//! projector, and contrastive pretraining.
//!
//! Both encoders are tiny pre-norm transformers (single-head attention,
//! GELU MLP, no layer-norm affine parameters) with width `d`. After
//! contrastive pretraining they are frozen; the editing pipeline refuses to
//! run on unfrozen encoders. The instruction encoder shares the text
//! encoder's architecture but returns the full token sequence instead of a
//! pooled embedding.

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::rng::{self, Prng};
use crate::tensor::tape::{Tape, Var};
use crate::tensor::{adam::AdamState, Tensor};
use crate::text::{Vocab, MAX_TOKENS};
use rand::seq::SliceRandom;

/// One pre-norm transformer block: x += attn(ln(x)); x += mlp(ln(x)).
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    wq: Tensor,
    wk: Tensor,
    wv: Tensor,
    wo: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

pub struct BoundBlock {
    wq: Var,
    wk: Var,
    wv: Var,
    wo: Var,
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
    d: usize,
}

impl Block {
    fn init(rng: &mut Prng, d: usize) -> Self {
        let h = 2 * d;
        Self {
            wq: rng::init_tensor(rng, vec![d, d], d),
            wk: rng::init_tensor(rng, vec![d, d], d),
            wv: rng::init_tensor(rng, vec![d, d], d),
            wo: rng::init_tensor(rng, vec![d, d], d),
            w1: rng::init_tensor(rng, vec![d, h], d),
            b1: Tensor::zeros(vec![h]),
            w2: rng::init_tensor(rng, vec![h, d], h),
            b2: Tensor::zeros(vec![d]),
        }
    }

    fn tensors(&self) -> Vec<&Tensor> {
        vec![
            &self.wq, &self.wk, &self.wv, &self.wo, &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
        ]
    }

    const FIELD_NAMES: [&'static str; 8] = ["wq", "wk", "wv", "wo", "w1", "b1", "w2", "b2"];

    fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundBlock {
        let mut vs = self
            .tensors()
            .into_iter()
            .map(|t| tape.leaf(t.clone(), trainable));
        BoundBlock {
            wq: vs.next().unwrap(),
            wk: vs.next().unwrap(),
            wv: vs.next().unwrap(),
            wo: vs.next().unwrap(),
            w1: vs.next().unwrap(),
            b1: vs.next().unwrap(),
            w2: vs.next().unwrap(),
            b2: vs.next().unwrap(),
            d: self.wq.shape()[0],
        }
    }
}

impl BoundBlock {
    fn vars(&self) -> Vec<Var> {
        vec![
            self.wq, self.wk, self.wv, self.wo, self.w1, self.b1, self.w2, self.b2,
        ]
    }

    /// `key_mask[j] = true` removes token `j` from every attention softmax.
    pub fn forward(&self, tape: &mut Tape, x: Var, key_mask: Option<&[bool]>) -> Result<Var> {
        let h = tape.layernorm_rows(x)?;
        let q = tape.matmul(h, self.wq)?;
        let k = tape.matmul(h, self.wk)?;
        let v = tape.matmul(h, self.wv)?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (self.d as f64).sqrt())?;
        let att = tape.softmax_rows_masked(scores, key_mask)?;
        let ctx = tape.matmul(att, v)?;
        let proj = tape.matmul(ctx, self.wo)?;
        let x = tape.add(x, proj)?;

        let h2 = tape.layernorm_rows(x)?;
        let a = tape.matmul(h2, self.w1)?;
        let a = tape.add_row(a, self.b1)?;
        let a = tape.gelu(a)?;
        let b = tape.matmul(a, self.w2)?;
        let b = tape.add_row(b, self.b2)?;
        tape.add(x, b)
    }
}

// ---------------------------------------------------------------- vision

/// Patch-token vision encoder: linear patch embedding, learned CLS token,
/// learned position embeddings, `n_blocks` transformer blocks, final
/// layer norm. Emits CLS in R^d and the N patch tokens in R^{N x d}.
#[derive(Debug, Clone, PartialEq)]
pub struct VisionEncoder {
    pub d: usize,
    pub patch: usize,
    pub side: usize,
    patch_w: Tensor,
    patch_b: Tensor,
    cls: Tensor,
    blocks: Vec<Block>,
    frozen: bool,
}

pub struct BoundVision {
    patch_w: Var,
    patch_b: Var,
    cls: Var,
    blocks: Vec<BoundBlock>,
    patch: usize,
}

impl VisionEncoder {
    /// `side` is the square image side in pixels; `patch` must divide it.
    pub fn init(rng: &mut Prng, side: usize, patch: usize, d: usize, n_blocks: usize) -> Result<Self> {
        if patch == 0 || side % patch != 0 {
            return Err(Error::Contract(format!(
                "vision encoder: patch {patch} must divide side {side}"
            )));
        }
        let in_dim = patch * patch * 3;
        Ok(Self {
            d,
            patch,
            side,
            patch_w: rng::init_tensor(rng, vec![in_dim, d], in_dim),
            patch_b: Tensor::zeros(vec![d]),
            cls: rng::init_tensor(rng, vec![1, d], d),
            blocks: (0..n_blocks).map(|_| Block::init(rng, d)).collect(),
            frozen: false,
        })
    }

    pub fn num_patches(&self) -> usize {
        (self.side / self.patch) * (self.side / self.patch)
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundVision {
        BoundVision {
            patch_w: tape.leaf(self.patch_w.clone(), trainable),
            patch_b: tape.leaf(self.patch_b.clone(), trainable),
            cls: tape.leaf(self.cls.clone(), trainable),
            blocks: self.blocks.iter().map(|b| b.bind(tape, trainable)).collect(),
            patch: self.patch,
        }
    }

    /// Frozen-path encoding for the editing pipeline; plain tensors out.
    pub fn encode_image(&self, pixels: &Tensor) -> Result<(Tensor, Tensor)> {
        if !self.frozen {
            return Err(Error::Contract(
                "vision encoder must be frozen before pipeline use".into(),
            ));
        }
        let mut tape = Tape::new();
        let x = tape.leaf(pixels.clone(), false);
        let bound = self.bind(&mut tape, false);
        let (cls, patches) = bound.forward(&mut tape, x)?;
        Ok((tape.value(cls).clone(), tape.value(patches).clone()))
    }

    fn param_iter(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.patch_w, &self.patch_b, &self.cls];
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        out
    }

    fn param_iter_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.patch_w, &mut self.patch_b, &mut self.cls];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out
    }

    pub fn save_into(&self, prefix: &str, ck: &mut Checkpoint) -> Result<()> {
        ck.insert(
            &format!("{prefix}.meta"),
            Tensor::from_vec(vec![
                self.d as f64,
                self.patch as f64,
                self.side as f64,
                self.blocks.len() as f64,
            ]),
        )?;
        for (name, t) in self.named_params() {
            ck.insert(&format!("{prefix}.{name}"), t.clone())?;
        }
        Ok(())
    }

    pub fn load_from(prefix: &str, ck: &Checkpoint) -> Result<Self> {
        let meta = ck.get_shaped(&format!("{prefix}.meta"), &[4])?;
        let (d, patch, side, n_blocks) = (
            meta.data()[0] as usize,
            meta.data()[1] as usize,
            meta.data()[2] as usize,
            meta.data()[3] as usize,
        );
        let mut rng = rng::seeded(0);
        let mut enc = Self::init(&mut rng, side, patch, d, n_blocks)?;
        for (name, t) in enc.named_params_mut() {
            *t = ck.get(&format!("{prefix}.{name}"))?.clone();
        }
        enc.frozen = true;
        Ok(enc)
    }

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        named(
            &["patch_w", "patch_b", "cls"],
            self.blocks.len(),
            self.param_iter(),
        )
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let n = self.blocks.len();
        named(&["patch_w", "patch_b", "cls"], n, self.param_iter_mut())
    }
}

impl BoundVision {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.patch_w, self.patch_b, self.cls];
        for b in &self.blocks {
            out.extend(b.vars());
        }
        out
    }

    /// `x` is a [side, side, 3] image on the tape. Returns (CLS [1,d],
    /// patches [N,d]); gradients flow through `x` regardless of whether the
    /// weights themselves are trainable.
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
        let tokens = tape.patchify(x, self.patch)?;
        let emb = tape.matmul(tokens, self.patch_w)?;
        let emb = tape.add_row(emb, self.patch_b)?;
        let mut seq = tape.concat_rows(self.cls, emb)?;
        for b in &self.blocks {
            seq = b.forward(tape, seq, None)?;
        }
        let seq = tape.layernorm_rows(seq)?;
        let n_plus_1 = tape.value(seq).rows();
        let cls = tape.slice_rows(seq, 0, 1)?;
        let patches = tape.slice_rows(seq, 1, n_plus_1)?;
        Ok((cls, patches))
    }
}

// ------------------------------------------------------------------ text

/// Token-embedding transformer over the closed vocabulary. PAD positions
/// are excluded from every attention softmax. Row 0 (the start sentinel)
/// is the CLS readout; `encode_sequence` returns all MAX_TOKENS rows and
/// doubles as the instruction encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    pub d: usize,
    emb: Tensor,
    pos: Tensor,
    blocks: Vec<Block>,
    frozen: bool,
}

pub struct BoundText {
    emb: Var,
    pos: Var,
    blocks: Vec<BoundBlock>,
}

impl TextEncoder {
    pub fn init(rng: &mut Prng, vocab_size: usize, d: usize, n_blocks: usize) -> Self {
        Self {
            d,
            emb: rng::init_tensor(rng, vec![vocab_size, d], d),
            pos: rng::init_tensor(rng, vec![MAX_TOKENS, d], d),
            blocks: (0..n_blocks).map(|_| Block::init(rng, d)).collect(),
            frozen: false,
        }
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundText {
        BoundText {
            emb: tape.leaf(self.emb.clone(), trainable),
            pos: tape.leaf(self.pos.clone(), trainable),
            blocks: self.blocks.iter().map(|b| b.bind(tape, trainable)).collect(),
        }
    }

    /// Pooled caption embedding T in R^{1 x d} (frozen path).
    pub fn encode_caption(&self, ids: &[usize], pad_mask: &[bool]) -> Result<Tensor> {
        if !self.frozen {
            return Err(Error::Contract(
                "text encoder must be frozen before pipeline use".into(),
            ));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let cls = bound.forward_cls(&mut tape, ids, pad_mask)?;
        Ok(tape.value(cls).clone())
    }

    /// Full token sequence F in R^{MAX_TOKENS x d}, PAD rows included
    /// (instruction-encoder role; frozen path).
    pub fn encode_sequence(&self, ids: &[usize], pad_mask: &[bool]) -> Result<Tensor> {
        if !self.frozen {
            return Err(Error::Contract(
                "text encoder must be frozen before pipeline use".into(),
            ));
        }
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let seq = bound.forward_seq(&mut tape, ids, pad_mask)?;
        Ok(tape.value(seq).clone())
    }

    fn param_iter(&self) -> Vec<&Tensor> {
        let mut out = vec![&self.emb, &self.pos];
        for b in &self.blocks {
            out.extend(b.tensors());
        }
        out
    }

    fn param_iter_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.emb, &mut self.pos];
        for b in &mut self.blocks {
            out.extend(b.tensors_mut());
        }
        out
    }

    pub fn save_into(&self, prefix: &str, ck: &mut Checkpoint) -> Result<()> {
        ck.insert(
            &format!("{prefix}.meta"),
            Tensor::from_vec(vec![
                self.d as f64,
                self.emb.shape()[0] as f64,
                self.blocks.len() as f64,
            ]),
        )?;
        for (name, t) in self.named_params() {
            ck.insert(&format!("{prefix}.{name}"), t.clone())?;
        }
        Ok(())
    }

    pub fn load_from(prefix: &str, ck: &Checkpoint) -> Result<Self> {
        let meta = ck.get_shaped(&format!("{prefix}.meta"), &[3])?;
        let (d, vocab, n_blocks) = (
            meta.data()[0] as usize,
            meta.data()[1] as usize,
            meta.data()[2] as usize,
        );
        let mut rng = rng::seeded(0);
        let mut enc = Self::init(&mut rng, vocab, d, n_blocks);
        for (name, t) in enc.named_params_mut() {
            *t = ck.get(&format!("{prefix}.{name}"))?.clone();
        }
        enc.frozen = true;
        Ok(enc)
    }

    fn named_params(&self) -> Vec<(String, &Tensor)> {
        named(&["emb", "pos"], self.blocks.len(), self.param_iter())
    }

    fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let n = self.blocks.len();
        named(&["emb", "pos"], n, self.param_iter_mut())
    }
}

impl BoundText {
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.emb, self.pos];
        for b in &self.blocks {
            out.extend(b.vars());
        }
        out
    }

    pub fn forward_seq(&self, tape: &mut Tape, ids: &[usize], pad_mask: &[bool]) -> Result<Var> {
        if ids.len() != MAX_TOKENS || pad_mask.len() != MAX_TOKENS {
            return Err(Error::Dim(format!(
                "text encoder expects {MAX_TOKENS} padded tokens, got {}",
                ids.len()
            )));
        }
        let e = tape.embedding(self.emb, ids)?;
        let mut seq = tape.add(e, self.pos)?;
        for b in &self.blocks {
            seq = b.forward(tape, seq, Some(pad_mask))?;
        }
        tape.layernorm_rows(seq)
    }

    pub fn forward_cls(&self, tape: &mut Tape, ids: &[usize], pad_mask: &[bool]) -> Result<Var> {
        let seq = self.forward_seq(tape, ids, pad_mask)?;
        tape.slice_rows(seq, 0, 1)
    }
}

fn named<T>(head: &[&str], n_blocks: usize, flat: Vec<T>) -> Vec<(String, T)> {
    let mut names: Vec<String> = head.iter().map(|s| s.to_string()).collect();
    for i in 0..n_blocks {
        for f in Block::FIELD_NAMES {
            names.push(format!("block{i}.{f}"));
        }
    }
    assert_eq!(names.len(), flat.len());
    names.into_iter().zip(flat).collect()
}

// ----------------------------------------------------------- projector

/// Permutation-invariant token-set projector: mean-pool over rows, then a
/// two-layer GELU MLP d -> 2d -> d. The one trainable piece of the
/// semantic-alignment loss.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticProjector {
    pub d: usize,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

pub struct BoundProjector {
    w1: Var,
    b1: Var,
    w2: Var,
    b2: Var,
}

impl SemanticProjector {
    pub fn init(rng: &mut Prng, d: usize) -> Self {
        Self {
            d,
            w1: rng::init_tensor(rng, vec![d, 2 * d], d),
            b1: Tensor::zeros(vec![2 * d]),
            w2: rng::init_tensor(rng, vec![2 * d, d], 2 * d),
            b2: Tensor::zeros(vec![d]),
        }
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundProjector {
        BoundProjector {
            w1: tape.leaf(self.w1.clone(), trainable),
            b1: tape.leaf(self.b1.clone(), trainable),
            w2: tape.leaf(self.w2.clone(), trainable),
            b2: tape.leaf(self.b2.clone(), trainable),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.w1, &self.b1, &self.w2, &self.b2]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn save_into(&self, prefix: &str, ck: &mut Checkpoint) -> Result<()> {
        ck.insert(&format!("{prefix}.meta"), Tensor::from_vec(vec![self.d as f64]))?;
        for (name, t) in ["w1", "b1", "w2", "b2"].iter().zip(self.tensors()) {
            ck.insert(&format!("{prefix}.{name}"), t.clone())?;
        }
        Ok(())
    }

    pub fn load_from(prefix: &str, ck: &Checkpoint) -> Result<Self> {
        let meta = ck.get_shaped(&format!("{prefix}.meta"), &[1])?;
        let d = meta.data()[0] as usize;
        let mut rng = rng::seeded(0);
        let mut p = Self::init(&mut rng, d);
        for (name, t) in ["w1", "b1", "w2", "b2"].iter().zip(p.tensors_mut()) {
            *t = ck.get(&format!("{prefix}.{name}"))?.clone();
        }
        Ok(p)
    }
}

impl BoundProjector {
    pub fn vars(&self) -> Vec<Var> {
        vec![self.w1, self.b1, self.w2, self.b2]
    }

    /// Any [K, d] token matrix -> [1, d].
    pub fn forward(&self, tape: &mut Tape, tokens: Var) -> Result<Var> {
        let pooled = tape.mean_pool_rows(tokens)?;
        let h = tape.matmul(pooled, self.w1)?;
        let h = tape.add_row(h, self.b1)?;
        let h = tape.gelu(h)?;
        let o = tape.matmul(h, self.w2)?;
        tape.add_row(o, self.b2)
    }
}

// ----------------------------------------------------- contrastive stage

/// A caption already tokenized and padded for the text encoder.
#[derive(Debug, Clone)]
pub struct PaddedCaption {
    pub ids: Vec<usize>,
    pub pad_mask: Vec<bool>,
}

impl PaddedCaption {
    pub fn from_text(vocab: &Vocab, text: &str) -> Result<Self> {
        let (ids, pad_mask) = vocab.pad(vocab.tokenize(text)?)?;
        Ok(Self { ids, pad_mask })
    }
}

pub struct PretrainOutcome {
    pub vision: VisionEncoder,
    pub text: TextEncoder,
    /// Mean symmetric InfoNCE loss per epoch.
    pub epoch_losses: Vec<f64>,
    /// Final learnable log-temperature.
    pub log_temp: f64,
}

/// Symmetric InfoNCE on one batch of images and captions already encoded
/// to CLS rows stacked as [B, d]. Returns the scalar loss var.
pub fn info_nce(tape: &mut Tape, img_cls: Var, txt_cls: Var, log_temp: Var) -> Result<Var> {
    let b = tape.value(img_cls).rows();
    if tape.value(txt_cls).rows() != b || b == 0 {
        return Err(Error::Contract("info_nce: batch shapes disagree".into()));
    }
    let i_n = tape.l2_normalize_rows(img_cls)?;
    let t_n = tape.l2_normalize_rows(txt_cls)?;
    let t_nt = tape.transpose(t_n)?;
    let logits = tape.matmul(i_n, t_nt)?;
    let temp = tape.exp(log_temp)?;
    let logits = tape.scale_var(logits, temp)?;
    let l_i2t = tape.xent_diag(logits)?;
    let logits_t = tape.transpose(logits)?;
    let l_t2i = tape.xent_diag(logits_t)?;
    let s = tape.add(l_i2t, l_t2i)?;
    tape.scale(s, 0.5)
}

/// Train a fresh dual encoder on (image, caption) pairs with symmetric
/// InfoNCE and a learnable temperature, then freeze both towers.
pub fn pretrain_contrastive(
    images: &[Tensor],
    captions: &[PaddedCaption],
    vocab_size: usize,
    side: usize,
    patch: usize,
    d: usize,
    n_blocks: usize,
    epochs: usize,
    batch: usize,
    lr: f64,
    seed: u64,
) -> Result<PretrainOutcome> {
    if images.is_empty() || images.len() != captions.len() {
        return Err(Error::Contract(format!(
            "pretrain: need matching non-empty image/caption lists, got {}/{}",
            images.len(),
            captions.len()
        )));
    }
    let mut init_rng = rng::substream(seed, "pretrain-init");
    let mut vision = VisionEncoder::init(&mut init_rng, side, patch, d, n_blocks)?;
    let mut text = TextEncoder::init(&mut init_rng, vocab_size, d, n_blocks);
    // Start at temperature 1 (log_temp = 0). Initial CLS embeddings of this
    // mostly-background world are near-parallel, and a sharp starting
    // temperature drives the contrastive loss into a constant-embedding
    // collapse it never escapes; a soft start learns reliably and the scale
    // parameter rises on its own during training.
    let mut log_temp = Tensor::scalar(0.0);

    let (mut adam, n_params) = {
        let mut ps: Vec<&Tensor> = vision.param_iter();
        ps.extend(text.param_iter());
        ps.push(&log_temp);
        (AdamState::for_params(lr, &ps), ps.len())
    };

    let mut order_rng = rng::substream(seed, "pretrain-order");
    let mut epoch_losses = Vec::with_capacity(epochs);
    for _epoch in 0..epochs {
        let mut order: Vec<usize> = (0..images.len()).collect();
        order.shuffle(&mut order_rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(batch) {
            if chunk.len() < 2 {
                continue; // a singleton batch has loss exactly 0 and no signal
            }
            let mut tape = Tape::new();
            let bv = vision.bind(&mut tape, true);
            let bt = text.bind(&mut tape, true);
            let lt = tape.leaf(log_temp.clone(), true);

            let mut img_rows: Option<Var> = None;
            let mut txt_rows: Option<Var> = None;
            for &i in chunk {
                let x = tape.leaf(images[i].clone(), false);
                let (cls, _) = bv.forward(&mut tape, x)?;
                let t = bt.forward_cls(&mut tape, &captions[i].ids, &captions[i].pad_mask)?;
                img_rows = Some(match img_rows {
                    None => cls,
                    Some(acc) => tape.concat_rows(acc, cls)?,
                });
                txt_rows = Some(match txt_rows {
                    None => t,
                    Some(acc) => tape.concat_rows(acc, t)?,
                });
            }
            let loss = info_nce(&mut tape, img_rows.unwrap(), txt_rows.unwrap(), lt)?;
            total += tape.value(loss).item();
            batches += 1;
            tape.backward(loss)?;

            let mut vars = bv.vars();
            vars.extend(bt.vars());
            vars.push(lt);
            let grads: Vec<Tensor> = vars
                .iter()
                .map(|&v| {
                    tape.grad(v).unwrap_or_else(|| {
                        Tensor::zeros(tape.value(v).shape().to_vec())
                    })
                })
                .collect();
            let mut params: Vec<&mut Tensor> = vision.param_iter_mut();
            params.extend(text.param_iter_mut());
            params.push(&mut log_temp);
            debug_assert_eq!(params.len(), n_params);
            adam.step(&mut params, &grads)?;
        }
        epoch_losses.push(if batches == 0 { 0.0 } else { total / batches as f64 });
    }
    vision.freeze();
    text.freeze();
    Ok(PretrainOutcome {
        vision,
        text,
        epoch_losses,
        log_temp: log_temp.item(),
    })
}

/// Fraction of pairs whose image retrieves its own caption (in-batch
/// top-1 over the whole provided set). Ties on distinct indices count as
/// misses; identical caption texts are credited via text equality.
pub fn retrieval_top1(
    vision: &VisionEncoder,
    text: &TextEncoder,
    images: &[Tensor],
    captions: &[PaddedCaption],
) -> Result<f64> {
    if images.is_empty() || images.len() != captions.len() {
        return Err(Error::Contract("retrieval: matching non-empty lists required".into()));
    }
    let embed = |t: &Tensor| {
        let norm = t.l2_norm();
        t.data().iter().map(|v| v / norm).collect::<Vec<f64>>()
    };
    let img_emb: Vec<Vec<f64>> = images
        .iter()
        .map(|x| Ok(embed(&vision.encode_image(x)?.0)))
        .collect::<Result<_>>()?;
    let txt_emb: Vec<Vec<f64>> = captions
        .iter()
        .map(|c| Ok(embed(&text.encode_caption(&c.ids, &c.pad_mask)?)))
        .collect::<Result<_>>()?;
    let mut hits = 0usize;
    for (i, ie) in img_emb.iter().enumerate() {
        let mut best = 0usize;
        let mut best_s = f64::NEG_INFINITY;
        for (j, te) in txt_emb.iter().enumerate() {
            let s: f64 = ie.iter().zip(te).map(|(a, b)| a * b).sum();
            if s > best_s {
                best_s = s;
                best = j;
            }
        }
        // Duplicate captions (identical scenes) are equally correct answers.
        if best == i || captions[best].ids == captions[i].ids {
            hits += 1;
        }
    }
    Ok(hits as f64 / images.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff, max_rel_error};
    use crate::synth;
    use crate::text::{self, Vocab};

    fn tiny_vision() -> VisionEncoder {
        let mut r = rng::seeded(3);
        VisionEncoder::init(&mut r, 64, 8, 32, 2).unwrap()
    }

    #[test]
    fn vision_shapes_and_determinism() {
        let mut enc = tiny_vision();
        enc.freeze();
        let img = synth::rasterize(&synth::SceneGraph::empty());
        let (cls, patches) = enc.encode_image(&img).unwrap();
        assert_eq!(cls.shape(), &[1, 32]);
        assert_eq!(patches.shape(), &[64, 32]);
        let (cls2, patches2) = enc.encode_image(&img).unwrap();
        assert_eq!(cls, cls2);
        assert_eq!(patches, patches2);
    }

    #[test]
    fn unfrozen_encoder_is_rejected_by_pipeline_path() {
        let enc = tiny_vision();
        let img = synth::rasterize(&synth::SceneGraph::empty());
        assert!(matches!(
            enc.encode_image(&img),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn uniform_background_patches_are_nearly_identical() {
        let mut enc = tiny_vision();
        enc.freeze();
        let img = synth::rasterize(&synth::SceneGraph::empty());
        let (_, patches) = enc.encode_image(&img).unwrap();
        let d = patches.cols();
        for i in 0..patches.rows() {
            for j in (i + 1)..patches.rows() {
                let a = &patches.data()[i * d..(i + 1) * d];
                let b = &patches.data()[j * d..(j + 1) * d];
                let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
                let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                assert!(dot / (na * nb) > 0.99, "patches {i},{j}");
            }
        }
    }

    #[test]
    fn text_encoder_shapes_and_pad_rows_present() {
        let vocab = Vocab::default();
        let mut r = rng::seeded(5);
        let mut enc = TextEncoder::init(&mut r, vocab.len(), 32, 2);
        enc.freeze();
        let c = PaddedCaption::from_text(&vocab, "add a small red circle").unwrap();
        let seq = enc.encode_sequence(&c.ids, &c.pad_mask).unwrap();
        assert_eq!(seq.shape(), &[text::MAX_TOKENS, 32]);
        let cls = enc.encode_caption(&c.ids, &c.pad_mask).unwrap();
        assert_eq!(cls.shape(), &[1, 32]);
    }

    #[test]
    fn pad_tokens_do_not_influence_the_cls_embedding() {
        // Same caption, but scribble different ids into PAD slots: the
        // encoding must not change because PAD keys are masked out and the
        // CLS readout sits at a non-PAD position.
        let vocab = Vocab::default();
        let mut r = rng::seeded(6);
        let mut enc = TextEncoder::init(&mut r, vocab.len(), 32, 2);
        enc.freeze();
        let c = PaddedCaption::from_text(&vocab, "a small red circle").unwrap();
        let mut ids2 = c.ids.clone();
        for (i, pad) in c.pad_mask.iter().enumerate() {
            if *pad {
                ids2[i] = (ids2[i] + 7) % vocab.len();
            }
        }
        let a = enc.encode_caption(&c.ids, &c.pad_mask).unwrap();
        let b = enc.encode_caption(&ids2, &c.pad_mask).unwrap();
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn projector_is_permutation_invariant_and_matches_single_token() {
        let mut r = rng::seeded(9);
        let proj = SemanticProjector::init(&mut r, 8);
        let tokens = rng::normal_tensor(&mut r, vec![5, 8]);
        let run = |t: &Tensor| {
            let mut tape = Tape::new();
            let b = proj.bind(&mut tape, false);
            let x = tape.leaf(t.clone(), false);
            let o = b.forward(&mut tape, x).unwrap();
            tape.value(o).clone()
        };
        let base = run(&tokens);
        // Reverse the token rows.
        let mut rev = Vec::new();
        for i in (0..5).rev() {
            rev.extend_from_slice(&tokens.data()[i * 8..(i + 1) * 8]);
        }
        let out_rev = run(&Tensor::new(vec![5, 8], rev).unwrap());
        for (a, b) in base.data().iter().zip(out_rev.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        // Single token: pooling is the identity.
        let single = Tensor::new(vec![1, 8], tokens.data()[..8].to_vec()).unwrap();
        let o = run(&single);
        assert_eq!(o.shape(), &[1, 8]);
    }

    #[test]
    fn projector_gradient_matches_finite_differences() {
        let mut r = rng::seeded(11);
        let proj = SemanticProjector::init(&mut r, 6);
        let tokens = rng::normal_tensor(&mut r, vec![4, 6]);
        let dir = rng::normal_tensor(&mut r, vec![1, 6]);

        let flat: Vec<f64> = proj.tensors().iter().flat_map(|t| t.data().to_vec()).collect();
        let shapes: Vec<Vec<usize>> = proj.tensors().iter().map(|t| t.shape().to_vec()).collect();
        let eval = |p: &[f64]| {
            let mut q = proj.clone();
            let mut off = 0;
            for t in q.tensors_mut() {
                let n = t.numel();
                *t = Tensor::new(t.shape().to_vec(), p[off..off + n].to_vec()).unwrap();
                off += n;
            }
            let mut tape = Tape::new();
            let b = q.bind(&mut tape, false);
            let x = tape.leaf(tokens.clone(), false);
            let o = b.forward(&mut tape, x).unwrap();
            let w = tape.leaf(dir.clone(), false);
            let prod = tape.mul(o, w).unwrap();
            let s = tape.sum(prod).unwrap();
            tape.value(s).item()
        };
        let numeric = finite_diff(eval, &flat, 1e-5);

        let mut tape = Tape::new();
        let b = proj.bind(&mut tape, true);
        let x = tape.leaf(tokens.clone(), false);
        let o = b.forward(&mut tape, x).unwrap();
        let w = tape.leaf(dir.clone(), false);
        let prod = tape.mul(o, w).unwrap();
        let s = tape.sum(prod).unwrap();
        tape.backward(s).unwrap();
        let analytic: Vec<f64> = b
            .vars()
            .iter()
            .flat_map(|&v| tape.grad(v).unwrap().data().to_vec())
            .collect();
        assert_eq!(
            shapes.iter().map(|s| s.iter().product::<usize>()).sum::<usize>(),
            analytic.len()
        );
        assert!(max_rel_error(&analytic, &numeric) < 1e-4);
    }

    #[test]
    fn info_nce_singleton_batch_is_exactly_zero() {
        let mut tape = Tape::new();
        let i = tape.leaf(Tensor::new(vec![1, 4], vec![1.0, 0.0, 2.0, -1.0]).unwrap(), false);
        let t = tape.leaf(Tensor::new(vec![1, 4], vec![0.5, 1.0, 0.0, 3.0]).unwrap(), false);
        let lt = tape.leaf(Tensor::scalar(0.3), false);
        let loss = info_nce(&mut tape, i, t, lt).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
    }

    #[test]
    fn info_nce_at_random_init_is_near_ln_batch() {
        // Uniform-ish logits: expected loss is ln(B).
        let b = 64;
        let mut r = rng::seeded(21);
        let img = rng::normal_tensor(&mut r, vec![b, 16]);
        let txt = rng::normal_tensor(&mut r, vec![b, 16]);
        let mut tape = Tape::new();
        let i = tape.leaf(img, false);
        let t = tape.leaf(txt, false);
        let lt = tape.leaf(Tensor::scalar(0.0), false);
        let loss = info_nce(&mut tape, i, t, lt).unwrap();
        let expected = (b as f64).ln();
        assert!(
            (tape.value(loss).item() - expected).abs() < 0.2,
            "loss {} vs ln {b} = {expected}",
            tape.value(loss).item()
        );
    }

    #[test]
    fn encoder_checkpoints_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("enc.rged");
        let mut r = rng::seeded(13);
        let mut v = VisionEncoder::init(&mut r, 64, 8, 16, 1).unwrap();
        let mut t = TextEncoder::init(&mut r, 31, 16, 1);
        v.freeze();
        t.freeze();
        let p = SemanticProjector::init(&mut r, 16);
        let mut ck = Checkpoint::new();
        v.save_into("vision", &mut ck).unwrap();
        t.save_into("text", &mut ck).unwrap();
        p.save_into("fsem", &mut ck).unwrap();
        ck.save(&path).unwrap();
        let ck2 = Checkpoint::load(&path).unwrap();
        let v2 = VisionEncoder::load_from("vision", &ck2).unwrap();
        let t2 = TextEncoder::load_from("text", &ck2).unwrap();
        let p2 = SemanticProjector::load_from("fsem", &ck2).unwrap();
        assert_eq!(v, v2);
        assert_eq!(t, t2);
        assert_eq!(p, p2);
    }

    #[test]
    fn two_pretrain_steps_reduce_loss_on_a_toy_batch() {
        // Minimal smoke check that the contrastive stage optimizes at all;
        // the full retrieval gate lives in the acceptance suite.
        let vocab = Vocab::default();
        let samples = synth::generate_corpus(24, 400).unwrap();
        let images: Vec<Tensor> = samples.iter().map(|s| s.pixels.clone()).collect();
        let caps: Vec<PaddedCaption> = samples
            .iter()
            .map(|s| {
                let c = text::describe(&vocab, &s.scene).unwrap();
                let (ids, pad) = vocab.pad(c.ids.clone()).unwrap();
                PaddedCaption { ids, pad_mask: pad }
            })
            .collect();
        let out = pretrain_contrastive(
            &images, &caps, vocab.len(), 64, 8, 16, 1, 3, 12, 3e-3, 99,
        )
        .unwrap();
        assert!(out.vision.is_frozen() && out.text.is_frozen());
        assert_eq!(out.epoch_losses.len(), 3);
        assert!(
            out.epoch_losses[2] < out.epoch_losses[0],
            "losses: {:?}",
            out.epoch_losses
        );
    }
}
