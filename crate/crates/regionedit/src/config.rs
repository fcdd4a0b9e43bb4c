//! Flat `key = value` run configuration.
//!
//! Every knob has a documented default; unknown keys are a hard error so a
//! typo in a config file or override can never be silently ignored. Files
//! allow blank lines and `#` comments. CLI overrides arrive as
//! `--key value` pairs and go through the same setter.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    /// Master seed; every stage derives its own substream from this.
    pub seed: u64,
    /// Directory holding corpus.idx and the sample images.
    pub corpus_dir: String,
    /// Directory where checkpoints, logs, and edit outputs are written.
    pub out_dir: String,
    /// Training-split size for the editor / denoiser stages.
    pub train_size: usize,
    /// Held-out evaluation split size.
    pub eval_size: usize,

    /// Shared embedding width of every encoder.
    pub d_model: usize,
    /// Transformer blocks per encoder.
    pub n_blocks: usize,
    /// Contrastive pretraining epochs over the training split.
    pub pretrain_epochs: usize,
    /// Contrastive batch size (images paired with their captions).
    pub pretrain_batch: usize,
    /// Adam learning rate for contrastive pretraining.
    pub lr_pretrain: f64,

    /// Diffusion steps.
    pub t_steps: usize,
    /// Linear noise-schedule endpoints.
    pub beta_min: f64,
    pub beta_max: f64,
    /// Classifier-free guidance weight at edit time.
    pub w_cfg: f64,
    /// Probability of dropping the caption condition while training the
    /// denoiser (enables unconditional predictions for guidance).
    pub cond_dropout: f64,
    /// Denoiser training epochs and Adam learning rate.
    pub denoiser_epochs: usize,
    pub lr_denoiser: f64,
    /// How the step-consistent noise is chosen when sigma_t = 0:
    /// "reuse" feeds the predicted noise back in; "fresh" draws new noise.
    pub eps_mode: String,

    /// Loss weights: total = alpha * semantic-alignment + beta * guidance,
    /// guidance = lambda_g * global + lambda_d * directional + lambda_s * structural.
    pub alpha: f64,
    pub beta: f64,
    pub lambda_g: f64,
    pub lambda_d: f64,
    pub lambda_s: f64,
    /// Hard-mask threshold applied to the predicted region at edit time.
    pub threshold: f64,
    /// Sampler steps unrolled on the tape while training the region predictor.
    pub k_steps: usize,
    /// Region-predictor training epochs and Adam learning rate.
    pub epochs: usize,
    pub lr_editor: f64,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 17,
            corpus_dir: "data/corpus".into(),
            out_dir: "runs/default".into(),
            train_size: 2000,
            eval_size: 200,
            d_model: 32,
            n_blocks: 2,
            pretrain_epochs: 6,
            pretrain_batch: 16,
            lr_pretrain: 3e-3,
            t_steps: 50,
            beta_min: 1e-4,
            beta_max: 0.02,
            w_cfg: 3.0,
            cond_dropout: 0.1,
            denoiser_epochs: 2,
            lr_denoiser: 3e-3,
            eps_mode: "reuse".into(),
            alpha: 1.0,
            beta: 1.0,
            lambda_g: 1.0,
            lambda_d: 1.0,
            lambda_s: 1.0,
            threshold: 0.5,
            k_steps: 8,
            epochs: 3,
            lr_editor: 1e-2,
        }
    }
}

impl Config {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Contract(format!(
                    "{}:{}: expected `key = value`, got {raw:?}",
                    path.display(),
                    lineno + 1
                ))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply one `key = value` assignment. Unknown keys and unparsable
    /// values are contract errors. Cross-field constraints are checked by
    /// `validate` once every assignment is in, so override order does not
    /// matter.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "corpus_dir" => self.corpus_dir = value.to_string(),
            "out_dir" => self.out_dir = value.to_string(),
            "train_size" => self.train_size = parse(key, value)?,
            "eval_size" => self.eval_size = parse(key, value)?,
            "d_model" => self.d_model = parse(key, value)?,
            "n_blocks" => self.n_blocks = parse(key, value)?,
            "pretrain_epochs" => self.pretrain_epochs = parse(key, value)?,
            "pretrain_batch" => self.pretrain_batch = parse(key, value)?,
            "lr_pretrain" => self.lr_pretrain = parse(key, value)?,
            "t_steps" => self.t_steps = parse(key, value)?,
            "beta_min" => self.beta_min = parse(key, value)?,
            "beta_max" => self.beta_max = parse(key, value)?,
            "w_cfg" => self.w_cfg = parse(key, value)?,
            "cond_dropout" => self.cond_dropout = parse(key, value)?,
            "denoiser_epochs" => self.denoiser_epochs = parse(key, value)?,
            "lr_denoiser" => self.lr_denoiser = parse(key, value)?,
            "eps_mode" => match value {
                "reuse" | "fresh" => self.eps_mode = value.to_string(),
                _ => {
                    return Err(Error::Contract(format!(
                        "eps_mode must be `reuse` or `fresh`, got {value:?}"
                    )))
                }
            },
            "alpha" => self.alpha = parse(key, value)?,
            "beta" => self.beta = parse(key, value)?,
            "lambda_g" => self.lambda_g = parse(key, value)?,
            "lambda_d" => self.lambda_d = parse(key, value)?,
            "lambda_s" => self.lambda_s = parse(key, value)?,
            "threshold" => self.threshold = parse(key, value)?,
            "k_steps" => self.k_steps = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "lr_editor" => self.lr_editor = parse(key, value)?,
            _ => return Err(Error::Contract(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Contract(msg));
        if self.t_steps == 0 {
            return bad("t_steps must be >= 1".into());
        }
        if !(self.beta_min > 0.0 && self.beta_max < 1.0 && self.beta_min <= self.beta_max) {
            return bad(format!(
                "noise schedule needs 0 < beta_min <= beta_max < 1, got [{}, {}]",
                self.beta_min, self.beta_max
            ));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad(format!("threshold must lie in [0, 1], got {}", self.threshold));
        }
        if !(0.0..=1.0).contains(&self.cond_dropout) {
            return bad(format!(
                "cond_dropout must lie in [0, 1], got {}",
                self.cond_dropout
            ));
        }
        if self.k_steps == 0 || self.k_steps > self.t_steps {
            return bad(format!(
                "k_steps must lie in 1..={}, got {}",
                self.t_steps, self.k_steps
            ));
        }
        if self.d_model == 0 || self.pretrain_batch < 2 {
            return bad("d_model >= 1 and pretrain_batch >= 2 required".into());
        }
        if self.w_cfg < 0.0 {
            return bad(format!("w_cfg must be >= 0, got {}", self.w_cfg));
        }
        Ok(())
    }

    /// Serialize back to the same flat format (used to record the exact
    /// configuration next to every run's outputs).
    pub fn to_file_string(&self) -> String {
        let c = self;
        format!(
            "seed = {}\ncorpus_dir = {}\nout_dir = {}\ntrain_size = {}\neval_size = {}\n\
             d_model = {}\nn_blocks = {}\npretrain_epochs = {}\npretrain_batch = {}\nlr_pretrain = {}\n\
             t_steps = {}\nbeta_min = {}\nbeta_max = {}\nw_cfg = {}\ncond_dropout = {}\n\
             denoiser_epochs = {}\nlr_denoiser = {}\neps_mode = {}\n\
             alpha = {}\nbeta = {}\nlambda_g = {}\nlambda_d = {}\nlambda_s = {}\n\
             threshold = {}\nk_steps = {}\nepochs = {}\nlr_editor = {}\n",
            c.seed, c.corpus_dir, c.out_dir, c.train_size, c.eval_size,
            c.d_model, c.n_blocks, c.pretrain_epochs, c.pretrain_batch, c.lr_pretrain,
            c.t_steps, c.beta_min, c.beta_max, c.w_cfg, c.cond_dropout,
            c.denoiser_epochs, c.lr_denoiser, c.eps_mode,
            c.alpha, c.beta, c.lambda_g, c.lambda_d, c.lambda_s,
            c.threshold, c.k_steps, c.epochs, c.lr_editor,
        )
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Contract(format!("config key {key:?}: cannot parse {value:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_file_format() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        let cfg = Config::default();
        std::fs::write(&path, cfg.to_file_string()).unwrap();
        assert_eq!(Config::from_file(&path).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_is_fatal() {
        let mut cfg = Config::default();
        assert!(matches!(cfg.set("learnig_rate", "0.1"), Err(Error::Contract(_))));
    }

    #[test]
    fn comments_and_blank_lines_are_ignored() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.cfg");
        std::fs::write(&path, "# header\n\nseed = 99 # trailing\n").unwrap();
        assert_eq!(Config::from_file(&path).unwrap().seed, 99);
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut cfg = Config::default();
        // Parse failures surface at set(); range violations at validate().
        assert!(cfg.set("seed", "abc").is_err());
        assert!(cfg.set("eps_mode", "maybe").is_err());
        for (key, value) in [("threshold", "1.5"), ("beta_min", "0"), ("k_steps", "0")] {
            let mut c = Config::default();
            c.set(key, value).unwrap();
            assert!(c.validate().is_err(), "{key}={value} should fail validation");
        }
    }
}
