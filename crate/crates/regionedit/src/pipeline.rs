//! Stage orchestration: corpus generation, contrastive pretraining, the
//! denoiser and region-predictor training loops, single edits, held-out
//! evaluation, and the loss-term ablation sweep. Each stage reads its
//! prerequisites from disk and fails with a dependency error naming the
//! stage that should have produced them.

use std::fs;
use std::path::{Path, PathBuf};

use crate::checkpoint::Checkpoint;
use crate::config::Config;
use crate::diffusion::{
    edit_sample, train_denoiser, Codec, Denoiser, DenoiserExample, DiffusionSchedule, EpsMode,
    TinyNet,
};
use crate::encoders::{
    pretrain_contrastive, PaddedCaption, SemanticProjector, TextEncoder, VisionEncoder,
};
use crate::error::{Error, Result};
use crate::img_io;
use crate::metrics::{evaluate, infer_region, EvalExample, EvalSummary};
use crate::objectives::{train_editor, EditorExample, EditorTraining, LossWeights};
use crate::region::FusionWeights;
use crate::synth::{
    generate_corpus, load_corpus, oracle_from_edit, save_corpus, ImageSample, CANVAS,
};
use crate::tensor::Tensor;
use crate::text::{apply_instruction, describe, parse_instruction, propose_instruction, Vocab};
use crate::rng;

/// Image side and patch size of the fixed world geometry.
pub const SIDE: usize = CANVAS;
pub const PATCH: usize = 8;
/// Internal convolution width of the denoiser.
pub const DENOISER_CHANNELS: usize = 8;

// ------------------------------------------------------------------- layout

/// On-disk artifact layout derived from the config.
pub struct Paths {
    pub train_dir: PathBuf,
    pub eval_dir: PathBuf,
    pub encoders_ckpt: PathBuf,
    pub aux_ckpt: PathBuf,
    pub denoiser_ckpt: PathBuf,
    pub editor_ckpt: PathBuf,
    pub pretrain_log: PathBuf,
    pub denoiser_log: PathBuf,
    pub editor_log: PathBuf,
    pub edits_log: PathBuf,
    pub eval_report: PathBuf,
    pub ablate_report: PathBuf,
}

impl Paths {
    pub fn new(cfg: &Config) -> Self {
        let corpus = PathBuf::from(&cfg.corpus_dir);
        let out = PathBuf::from(&cfg.out_dir);
        Self {
            train_dir: corpus.join("train"),
            eval_dir: corpus.join("eval"),
            encoders_ckpt: out.join("encoders.ckpt"),
            aux_ckpt: out.join("aux_encoder.ckpt"),
            denoiser_ckpt: out.join("denoiser.ckpt"),
            editor_ckpt: out.join("editor.ckpt"),
            pretrain_log: out.join("pretrain_log.csv"),
            denoiser_log: out.join("denoiser_log.csv"),
            editor_log: out.join("editor_log.csv"),
            edits_log: out.join("edits.jsonl"),
            eval_report: out.join("eval_report.csv"),
            ablate_report: out.join("ablate.csv"),
        }
    }
}

fn require(path: &Path, produced_by: &str, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Dependency(format!(
            "missing {what} at {}; run the `{produced_by}` stage first",
            path.display()
        )))
    }
}

fn schedule(cfg: &Config) -> Result<DiffusionSchedule> {
    DiffusionSchedule::linear(cfg.t_steps, cfg.beta_min, cfg.beta_max)
}

fn loss_weights(cfg: &Config) -> LossWeights {
    LossWeights {
        lambda_g: cfg.lambda_g,
        lambda_d: cfg.lambda_d,
        lambda_s: cfg.lambda_s,
        alpha: cfg.alpha,
        beta: cfg.beta,
    }
}

fn c_null(d: usize) -> Tensor {
    Tensor::zeros(vec![1, d])
}

// ----------------------------------------------------------------- data-gen

/// Generate the train and eval splits. The eval split additionally stores
/// one oracle edit per sample (instruction text, ground-truth region mask,
/// and the edited raster) for metric computation; the train split carries
/// no oracle information. Refuses to overwrite an existing corpus unless
/// `force` is set.
pub fn data_gen(cfg: &Config, force: bool) -> Result<()> {
    let paths = Paths::new(cfg);
    for dir in [&paths.train_dir, &paths.eval_dir] {
        if dir.join("corpus.idx").exists() && !force {
            return Err(Error::Contract(format!(
                "corpus already exists at {}; pass --force to regenerate",
                dir.display()
            )));
        }
    }
    let train = generate_corpus(cfg.train_size, cfg.seed)?;
    save_corpus(&paths.train_dir, &train)?;

    let eval = generate_corpus(cfg.eval_size, cfg.seed ^ 0x6576616c_73706c69)?;
    save_corpus(&paths.eval_dir, &eval)?;
    for s in &eval {
        let oracle = eval_oracle(s)?;
        fs::write(
            paths.eval_dir.join(format!("{}.instruction.txt", s.id)),
            format!("{}\n", oracle.instruction),
        )?;
        img_io::write_pbm(&paths.eval_dir.join(format!("{}.mask.pbm", s.id)), &oracle.mask)?;
        img_io::write_ppm(
            &paths.eval_dir.join(format!("{}.edited.ppm", s.id)),
            &oracle.edited_pixels,
        )?;
    }
    Ok(())
}

struct EvalOracle {
    instruction: String,
    mask: Tensor,
    edited_pixels: Tensor,
}

/// The deterministic oracle edit attached to an eval sample. Drawn through
/// the instruction proposer so the edited caption is guaranteed to fit the
/// token budget.
fn eval_oracle(sample: &ImageSample) -> Result<EvalOracle> {
    let mut r = rng::substream(sample.id, "eval-oracle");
    let instruction = crate::text::propose_instruction_with(&sample.scene, &mut r)?;
    let oracle = oracle_from_edit(sample, instruction.parsed.clone())?;
    Ok(EvalOracle {
        instruction: instruction.text,
        mask: oracle.mask,
        edited_pixels: oracle.edited_pixels,
    })
}

// ----------------------------------------------------------------- pretrain

#[derive(Debug)]
pub struct PretrainSummary {
    pub epoch_losses: Vec<f64>,
    pub aux_epoch_losses: Vec<f64>,
    pub log_temp: f64,
}

/// Contrastively pretrain the dual encoders on the train split, then a
/// second, independently seeded vision tower used only as an auxiliary
/// similarity metric. Both are frozen and checkpointed.
pub fn pretrain(cfg: &Config) -> Result<PretrainSummary> {
    let paths = Paths::new(cfg);
    require(&paths.train_dir.join("corpus.idx"), "data-gen", "training corpus")?;
    let samples = load_corpus(&paths.train_dir)?;
    let vocab = Vocab::default();
    let images: Vec<Tensor> = samples.iter().map(|s| s.pixels.clone()).collect();
    let captions: Vec<PaddedCaption> = samples
        .iter()
        .map(|s| {
            let c = describe(&vocab, &s.scene)?;
            PaddedCaption::from_text(&vocab, &c.text)
        })
        .collect::<Result<_>>()?;

    let main = pretrain_contrastive(
        &images,
        &captions,
        vocab.len(),
        SIDE,
        PATCH,
        cfg.d_model,
        cfg.n_blocks,
        cfg.pretrain_epochs,
        cfg.pretrain_batch,
        cfg.lr_pretrain,
        cfg.seed,
    )?;
    let aux = pretrain_contrastive(
        &images,
        &captions,
        vocab.len(),
        SIDE,
        PATCH,
        cfg.d_model,
        cfg.n_blocks,
        cfg.pretrain_epochs,
        cfg.pretrain_batch,
        cfg.lr_pretrain,
        cfg.seed ^ 0x6175785f_746f7765,
    )?;

    fs::create_dir_all(PathBuf::from(&cfg.out_dir))?;
    let mut ck = Checkpoint::new();
    main.vision.save_into("vision.", &mut ck)?;
    main.text.save_into("text.", &mut ck)?;
    ck.insert("log_temp", Tensor::scalar(main.log_temp))?;
    ck.save(&paths.encoders_ckpt)?;

    let mut ack = Checkpoint::new();
    aux.vision.save_into("vision.", &mut ack)?;
    ack.save(&paths.aux_ckpt)?;

    let mut csv = String::from("epoch,loss,aux_loss\n");
    for (i, (a, b)) in main.epoch_losses.iter().zip(&aux.epoch_losses).enumerate() {
        csv.push_str(&format!("{i},{a},{b}\n"));
    }
    fs::write(&paths.pretrain_log, csv)?;

    Ok(PretrainSummary {
        epoch_losses: main.epoch_losses,
        aux_epoch_losses: aux.epoch_losses,
        log_temp: main.log_temp,
    })
}

fn load_encoders(paths: &Paths) -> Result<(VisionEncoder, TextEncoder)> {
    require(&paths.encoders_ckpt, "pretrain", "encoder checkpoint")?;
    let ck = Checkpoint::load(&paths.encoders_ckpt)?;
    let vision = VisionEncoder::load_from("vision.", &ck)?;
    let text = TextEncoder::load_from("text.", &ck)?;
    Ok((vision, text))
}

fn load_aux(paths: &Paths) -> Result<VisionEncoder> {
    require(&paths.aux_ckpt, "pretrain", "auxiliary encoder checkpoint")?;
    let ck = Checkpoint::load(&paths.aux_ckpt)?;
    VisionEncoder::load_from("vision.", &ck)
}

fn load_denoiser(paths: &Paths) -> Result<TinyNet> {
    require(&paths.denoiser_ckpt, "train-denoiser", "denoiser checkpoint")?;
    let ck = Checkpoint::load(&paths.denoiser_ckpt)?;
    TinyNet::load_from("denoiser.", &ck)
}

fn load_editor(paths: &Paths) -> Result<(FusionWeights, SemanticProjector)> {
    require(&paths.editor_ckpt, "train-editor", "editor checkpoint")?;
    let ck = Checkpoint::load(&paths.editor_ckpt)?;
    let fusion = FusionWeights::load_from("fusion.", &ck)?;
    let projector = SemanticProjector::load_from("projector.", &ck)?;
    Ok((fusion, projector))
}

// ----------------------------------------------------------- train-denoiser

/// Train the inpainting denoiser on the train split, conditioned on frozen
/// caption embeddings, with random rectangle masks (the train split has no
/// oracle regions).
pub fn train_denoiser_stage(cfg: &Config) -> Result<Vec<f64>> {
    let paths = Paths::new(cfg);
    require(&paths.train_dir.join("corpus.idx"), "data-gen", "training corpus")?;
    let (_, text) = load_encoders(&paths)?;
    let samples = load_corpus(&paths.train_dir)?;
    let vocab = Vocab::default();

    let examples: Vec<DenoiserExample> = samples
        .iter()
        .map(|s| {
            let c = describe(&vocab, &s.scene)?;
            let padded = PaddedCaption::from_text(&vocab, &c.text)?;
            Ok(DenoiserExample {
                z0: s.pixels.clone(),
                caption_cls: text.encode_caption(&padded.ids, &padded.pad_mask)?,
                oracle_mask: None,
            })
        })
        .collect::<Result<_>>()?;

    let sch = schedule(cfg)?;
    let trained = train_denoiser(
        &examples,
        &c_null(cfg.d_model),
        &sch,
        DENOISER_CHANNELS,
        cfg.denoiser_epochs,
        cfg.pretrain_batch,
        cfg.lr_denoiser,
        cfg.cond_dropout,
        cfg.seed,
    )?;

    let mut ck = Checkpoint::new();
    trained.net.save_into("denoiser.", &mut ck)?;
    ck.save(&paths.denoiser_ckpt)?;
    let mut csv = String::from("epoch,loss\n");
    for (i, l) in trained.epoch_losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    fs::write(&paths.denoiser_log, csv)?;
    Ok(trained.epoch_losses)
}

// -------------------------------------------------------------- train-editor

/// Frozen per-example features for every train-split sample with a
/// feasible instruction. Returns the examples and how many samples were
/// skipped as infeasible.
pub fn prepare_editor_examples(
    samples: &[ImageSample],
    vision: &VisionEncoder,
    text: &TextEncoder,
    vocab: &Vocab,
    seed: u64,
) -> Result<(Vec<EditorExample>, usize)> {
    let mut out = Vec::with_capacity(samples.len());
    let mut skipped = 0usize;
    for s in samples {
        match build_example(s, None, vision, text, vocab, seed) {
            Ok(ex) => out.push(ex),
            Err(Error::InfeasibleEdit(_)) | Err(Error::UnresolvedTarget(_)) => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    if out.is_empty() {
        return Err(Error::Data("no sample admitted a feasible instruction".into()));
    }
    Ok((out, skipped))
}

/// One sample's frozen features. When `instruction_text` is given it is
/// parsed from the grammar; otherwise a feasible instruction is proposed
/// deterministically from (sample id, seed).
fn build_example(
    s: &ImageSample,
    instruction_text: Option<&str>,
    vision: &VisionEncoder,
    text: &TextEncoder,
    vocab: &Vocab,
    seed: u64,
) -> Result<EditorExample> {
    let caption = describe(vocab, &s.scene)?;
    let instruction = match instruction_text {
        Some(t) => parse_instruction(t)?,
        None => propose_instruction(&s.scene, s.id ^ seed)?,
    };
    let edited = apply_instruction(vocab, &caption, &instruction)?;

    let (i_ori, f_img) = vision.encode_image(&s.pixels)?;
    let p_o = PaddedCaption::from_text(vocab, &caption.text)?;
    let p_e = PaddedCaption::from_text(vocab, &edited.text)?;
    let p_i = PaddedCaption::from_text(vocab, &instruction.text)?;
    Ok(EditorExample {
        pixels: s.pixels.clone(),
        f_img,
        i_ori,
        t_o: text.encode_caption(&p_o.ids, &p_o.pad_mask)?,
        t_e: text.encode_caption(&p_e.ids, &p_e.pad_mask)?,
        f_ins: text.encode_sequence(&p_i.ids, &p_i.pad_mask)?,
        ins_pad: p_i.pad_mask,
        noise_seed: s.id,
    })
}

/// Checksum over every frozen tensor, used to prove the editor stage never
/// touches the encoders or the denoiser.
fn frozen_checksum(vision: &VisionEncoder, text: &TextEncoder, net: &TinyNet) -> Result<u64> {
    let mut ck = Checkpoint::new();
    vision.save_into("vision.", &mut ck)?;
    text.save_into("text.", &mut ck)?;
    net.save_into("denoiser.", &mut ck)?;
    Ok(ck.checksum())
}

/// Train the region predictor and the semantic projector against the
/// frozen towers; checkpoints the result and logs per-epoch loss means.
pub fn train_editor_stage(cfg: &Config) -> Result<EditorTraining> {
    let paths = Paths::new(cfg);
    require(&paths.train_dir.join("corpus.idx"), "data-gen", "training corpus")?;
    let (vision, text) = load_encoders(&paths)?;
    let denoiser = load_denoiser(&paths)?;
    let samples = load_corpus(&paths.train_dir)?;
    let vocab = Vocab::default();
    let (examples, _) = prepare_editor_examples(&samples, &vision, &text, &vocab, cfg.seed)?;

    let before = frozen_checksum(&vision, &text, &denoiser)?;
    let sch = schedule(cfg)?;
    let trained = train_editor(
        &examples,
        &vision,
        &denoiser,
        &c_null(cfg.d_model),
        &sch,
        &loss_weights(cfg),
        cfg.k_steps,
        cfg.w_cfg,
        cfg.epochs,
        cfg.lr_editor,
        cfg.seed,
    )?;
    let after = frozen_checksum(&vision, &text, &denoiser)?;
    if before != after {
        return Err(Error::Contract(
            "frozen parameters changed during editor training".into(),
        ));
    }

    let mut ck = Checkpoint::new();
    trained.fusion.save_into("fusion.", &mut ck)?;
    trained.projector.save_into("projector.", &mut ck)?;
    ck.save(&paths.editor_ckpt)?;

    let mut csv = String::from(crate::objectives::EpochReport::csv_header());
    csv.push('\n');
    for (i, r) in trained.epochs.iter().enumerate() {
        csv.push_str(&r.csv_row(i));
        csv.push('\n');
    }
    fs::write(&paths.editor_log, csv)?;
    Ok(trained)
}

// --------------------------------------------------------------------- edit

pub struct EditRecord {
    pub image: String,
    pub caption: String,
    pub instruction: String,
    pub edited_caption: String,
    pub mask_area: f64,
    pub result_path: String,
    pub mask_path: String,
}

impl EditRecord {
    /// One JSON object per line, hand-escaped (closed-vocabulary strings
    /// plus file paths; only quotes and backslashes need care).
    pub fn to_json_line(&self) -> String {
        let esc = |s: &str| s.replace('\\', "\\\\").replace('"', "\\\"");
        format!(
            "{{\"image\":\"{}\",\"caption\":\"{}\",\"instruction\":\"{}\",\"edited_caption\":\"{}\",\"mask_area\":{},\"result\":\"{}\",\"mask\":\"{}\"}}",
            esc(&self.image),
            esc(&self.caption),
            esc(&self.instruction),
            esc(&self.edited_caption),
            self.mask_area,
            esc(&self.result_path),
            esc(&self.mask_path),
        )
    }
}

/// Edit one image. The caption is the grammar-conformant description of
/// the source (the corpus stores it; external images must supply one).
/// Writes result/mask/overlay images next to the run's other artifacts and
/// appends a JSON-lines record.
pub fn edit(cfg: &Config, image_path: &Path, caption_text: &str, instruction_text: &str) -> Result<EditRecord> {
    let paths = Paths::new(cfg);
    let (vision, text) = load_encoders(&paths)?;
    let denoiser = load_denoiser(&paths)?;
    let (fusion, _) = load_editor(&paths)?;
    let vocab = Vocab::default();

    let pixels = img_io::read_ppm(image_path)?;
    if pixels.shape() != [SIDE, SIDE, 3] {
        return Err(Error::Data(format!(
            "edit: expected a {SIDE}x{SIDE} image, got {:?}",
            pixels.shape()
        )));
    }
    let caption = crate::text::Caption {
        text: caption_text.to_string(),
        ids: vocab.tokenize(caption_text)?,
    };
    let instruction = parse_instruction(instruction_text)?;
    let edited = apply_instruction(&vocab, &caption, &instruction)?;

    let (_, f_img) = vision.encode_image(&pixels)?;
    let p_i = PaddedCaption::from_text(&vocab, &instruction.text)?;
    let f_ins = text.encode_sequence(&p_i.ids, &p_i.pad_mask)?;
    let region = infer_region(&fusion, &f_img, &f_ins, &p_i.pad_mask, cfg.threshold, PATCH)?;

    let p_e = PaddedCaption::from_text(&vocab, &edited.text)?;
    let t_e = text.encode_caption(&p_e.ids, &p_e.pad_mask)?;
    let sch = schedule(cfg)?;
    let outcome = edit_sample(
        &Denoiser::Tiny(denoiser),
        &Codec::Identity,
        &sch,
        &pixels,
        &region.pixel_mask_tensor(),
        &t_e,
        &c_null(cfg.d_model),
        cfg.w_cfg,
        EpsMode::from_str(&cfg.eps_mode)?,
        cfg.seed,
        false,
    )?;

    let stem = image_path
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("edit");
    let out_dir = PathBuf::from(&cfg.out_dir);
    fs::create_dir_all(&out_dir)?;
    let result_path = out_dir.join(format!("{stem}.result.ppm"));
    let mask_path = out_dir.join(format!("{stem}.mask.pbm"));
    let overlay_path = out_dir.join(format!("{stem}.overlay.ppm"));
    img_io::write_ppm(&result_path, &outcome.x_res)?;
    img_io::write_pbm(&mask_path, &region.pixel_mask_tensor())?;
    img_io::write_ppm(&overlay_path, &img_io::mask_overlay(&pixels, &region.pixel_mask_tensor())?)?;

    let record = EditRecord {
        image: image_path.display().to_string(),
        caption: caption.text,
        instruction: instruction.text,
        edited_caption: edited.text,
        mask_area: region.mask_area_fraction(),
        result_path: result_path.display().to_string(),
        mask_path: mask_path.display().to_string(),
    };
    let mut log = fs::read_to_string(&paths.edits_log).unwrap_or_default();
    log.push_str(&record.to_json_line());
    log.push('\n');
    fs::write(&paths.edits_log, log)?;
    Ok(record)
}

// --------------------------------------------------------------------- eval

/// Load the eval split together with its stored oracle edits.
pub fn load_eval_examples(
    cfg: &Config,
    vision: &VisionEncoder,
    text: &TextEncoder,
) -> Result<Vec<EvalExample>> {
    let paths = Paths::new(cfg);
    require(&paths.eval_dir.join("corpus.idx"), "data-gen", "evaluation corpus")?;
    let samples = load_corpus(&paths.eval_dir)?;
    let vocab = Vocab::default();
    let mut out = Vec::with_capacity(samples.len());
    for s in &samples {
        let ins_path = paths.eval_dir.join(format!("{}.instruction.txt", s.id));
        let mask_path = paths.eval_dir.join(format!("{}.mask.pbm", s.id));
        require(&ins_path, "data-gen", "oracle instruction")?;
        let instruction = fs::read_to_string(&ins_path)?.trim().to_string();
        let mask = img_io::read_pbm(&mask_path)?;
        let oracle_pixel_mask: Vec<u8> = mask.data().iter().map(|&v| (v != 0.0) as u8).collect();
        let features = build_example(s, Some(&instruction), vision, text, &vocab, cfg.seed)?;
        out.push(EvalExample {
            features,
            oracle_pixel_mask,
        });
    }
    Ok(out)
}

/// Evaluate the trained editor on the held-out split; writes a one-row CSV
/// report and returns the summary.
pub fn eval_stage(cfg: &Config) -> Result<EvalSummary> {
    let paths = Paths::new(cfg);
    let (vision, text) = load_encoders(&paths)?;
    let aux = load_aux(&paths)?;
    let denoiser = Denoiser::Tiny(load_denoiser(&paths)?);
    let (fusion, _) = load_editor(&paths)?;
    let examples = load_eval_examples(cfg, &vision, &text)?;
    let sch = schedule(cfg)?;
    let summary = evaluate(
        &examples,
        &fusion,
        &vision,
        &aux,
        &denoiser,
        &Codec::Identity,
        &sch,
        &c_null(cfg.d_model),
        cfg.threshold,
        cfg.w_cfg,
        EpsMode::from_str(&cfg.eps_mode)?,
        cfg.seed,
    )?;
    fs::write(&paths.eval_report, eval_csv(&[("full", &summary)]))?;
    Ok(summary)
}

fn eval_csv(rows: &[(&str, &EvalSummary)]) -> String {
    let mut s = String::from(
        "variant,l1,l2,clip_i,aux_i,clip_out,clip_dir,iou,mask_area,unmasked_l1,baseline_iou,count,dir_skipped\n",
    );
    for (name, r) in rows {
        let m = &r.mean;
        s.push_str(&format!(
            "{name},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            m.l1,
            m.l2,
            m.clip_i,
            m.aux_i,
            m.clip_out,
            m.clip_dir,
            m.iou,
            m.mask_area,
            m.unmasked_l1,
            r.baseline_iou,
            r.count,
            r.dir_skipped
        ));
    }
    s
}

// ------------------------------------------------------------------- ablate

pub struct AblationRow {
    pub name: String,
    pub final_train_loss: f64,
    pub summary: EvalSummary,
}

/// The five loss configurations: the full objective and each guidance /
/// alignment term removed in turn.
pub fn ablation_variants(base: &LossWeights) -> Vec<(String, LossWeights)> {
    let mut v = vec![("full".to_string(), *base)];
    v.push(("no_sem_align".into(), LossWeights { alpha: 0.0, ..*base }));
    v.push(("no_global".into(), LossWeights { lambda_g: 0.0, ..*base }));
    v.push(("no_directional".into(), LossWeights { lambda_d: 0.0, ..*base }));
    v.push(("no_structural".into(), LossWeights { lambda_s: 0.0, ..*base }));
    v
}

/// Everything the editor-training and evaluation stages consume, loaded
/// once and shared across loss variants and seeds. All fields are plain
/// data, so the stack can sit behind an `Arc` and serve worker threads.
pub struct AblationStack {
    pub vision: VisionEncoder,
    pub aux: VisionEncoder,
    pub tiny: TinyNet,
    pub examples: Vec<EditorExample>,
    pub eval_examples: Vec<EvalExample>,
    sch: DiffusionSchedule,
    null: Tensor,
}

impl AblationStack {
    /// Load the frozen towers and both corpora, and precompute the training
    /// and evaluation feature sets under `cfg.seed`.
    pub fn load(cfg: &Config) -> Result<Self> {
        let paths = Paths::new(cfg);
        require(&paths.train_dir.join("corpus.idx"), "data-gen", "training corpus")?;
        let (vision, text) = load_encoders(&paths)?;
        let aux = load_aux(&paths)?;
        let tiny = load_denoiser(&paths)?;
        let samples = load_corpus(&paths.train_dir)?;
        let vocab = Vocab::default();
        let (examples, _) = prepare_editor_examples(&samples, &vision, &text, &vocab, cfg.seed)?;
        let eval_examples = load_eval_examples(cfg, &vision, &text)?;
        Ok(AblationStack {
            vision,
            aux,
            tiny,
            examples,
            eval_examples,
            sch: schedule(cfg)?,
            null: c_null(cfg.d_model),
        })
    }

    /// Train a fresh editor under `weights` with `cfg.seed`, then evaluate
    /// it on the held-out split. The shared features stay fixed; only the
    /// objective and the seed vary between calls.
    pub fn train_and_eval(&self, cfg: &Config, weights: &LossWeights) -> Result<EvalSummary> {
        self.train_and_eval_full(cfg, weights).map(|(_, summary)| summary)
    }

    fn train_and_eval_full(
        &self,
        cfg: &Config,
        weights: &LossWeights,
    ) -> Result<(EditorTraining, EvalSummary)> {
        let trained = train_editor(
            &self.examples,
            &self.vision,
            &self.tiny,
            &self.null,
            &self.sch,
            weights,
            cfg.k_steps,
            cfg.w_cfg,
            cfg.epochs,
            cfg.lr_editor,
            cfg.seed,
        )?;
        let summary = evaluate(
            &self.eval_examples,
            &trained.fusion,
            &self.vision,
            &self.aux,
            &Denoiser::Tiny(self.tiny.clone()),
            &Codec::Identity,
            &self.sch,
            &self.null,
            cfg.threshold,
            cfg.w_cfg,
            EpsMode::from_str(&cfg.eps_mode)?,
            cfg.seed,
        )?;
        Ok((trained, summary))
    }
}

/// Retrain the editor under each loss variant and evaluate each result on
/// the held-out split. Every variant shares the same frozen towers, data,
/// and seed, so rows differ only by the objective.
pub fn ablate(cfg: &Config) -> Result<Vec<AblationRow>> {
    let stack = AblationStack::load(cfg)?;
    let paths = Paths::new(cfg);
    let mut rows = Vec::new();
    for (name, weights) in ablation_variants(&loss_weights(cfg)) {
        let (trained, summary) = stack.train_and_eval_full(cfg, &weights)?;
        let final_train_loss = trained.epochs.last().map(|e| e.mean.l_total).unwrap_or(f64::NAN);
        rows.push(AblationRow {
            name,
            final_train_loss,
            summary,
        });
    }

    let named: Vec<(&str, &EvalSummary)> =
        rows.iter().map(|r| (r.name.as_str(), &r.summary)).collect();
    fs::write(&paths.ablate_report, eval_csv(&named))?;
    Ok(rows)
}
