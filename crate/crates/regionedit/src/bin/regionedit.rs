//! Command-line driver for the region-editing pipeline.
//!
//! Exit codes: 0 success, 2 contract/dependency error, 3 data error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use regionedit::config::Config;
use regionedit::error::Error;
use regionedit::pipeline;

#[derive(Parser)]
#[command(name = "regionedit", version, about = "Instruction-driven image editing with learnable regions")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Config file (flat key=value lines); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override individual config keys, e.g. --set seed=3 --set epochs=1.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the train and eval corpus splits (eval gets oracle edits).
    DataGen {
        /// Overwrite an existing corpus.
        #[arg(long)]
        force: bool,
    },
    /// Contrastively pretrain the dual encoders and the auxiliary tower.
    Pretrain,
    /// Train the inpainting denoiser against the frozen encoders.
    TrainDenoiser,
    /// Train the region predictor and semantic projector.
    TrainEditor,
    /// Edit a single image.
    Edit {
        /// Source image (PPM, canvas-sized).
        #[arg(long)]
        image: PathBuf,
        /// Grammar-conformant description of the source image.
        #[arg(long)]
        caption: String,
        /// Edit instruction.
        #[arg(long)]
        instruction: String,
    },
    /// Evaluate the trained editor on the held-out split.
    Eval,
    /// Retrain under each loss ablation and evaluate every variant.
    Ablate,
}

fn load_config(common: &Common) -> regionedit::Result<Config> {
    let mut cfg = match &common.config {
        Some(path) => Config::from_file(path)?,
        None => Config::default(),
    };
    for kv in &common.overrides {
        let (k, v) = kv.split_once('=').ok_or_else(|| {
            Error::Contract(format!("override `{kv}` is not of the form key=value"))
        })?;
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> regionedit::Result<()> {
    let cfg = load_config(&cli.common)?;
    match &cli.command {
        Command::DataGen { force } => {
            pipeline::data_gen(&cfg, *force)?;
            println!(
                "wrote {} train and {} eval samples under {}",
                cfg.train_size, cfg.eval_size, cfg.corpus_dir
            );
        }
        Command::Pretrain => {
            let s = pipeline::pretrain(&cfg)?;
            for (i, (a, b)) in s.epoch_losses.iter().zip(&s.aux_epoch_losses).enumerate() {
                println!("epoch {i}: loss {a:.4} (aux {b:.4})");
            }
            println!("final log-temperature {:.4}", s.log_temp);
        }
        Command::TrainDenoiser => {
            let losses = pipeline::train_denoiser_stage(&cfg)?;
            for (i, l) in losses.iter().enumerate() {
                println!("epoch {i}: loss {l:.4}");
            }
        }
        Command::TrainEditor => {
            let t = pipeline::train_editor_stage(&cfg)?;
            for (i, r) in t.epochs.iter().enumerate() {
                println!(
                    "epoch {i}: total {:.4} (align {:.4}, guidance {:.4}), mask area {:.3}, {} examples, {} skipped",
                    r.mean.l_total, r.mean.l_sem_align, r.mean.l_clip, r.mean.mask_area, r.count, r.skipped
                );
            }
        }
        Command::Edit {
            image,
            caption,
            instruction,
        } => {
            let rec = pipeline::edit(&cfg, image, caption, instruction)?;
            println!("{}", rec.to_json_line());
        }
        Command::Eval => {
            let s = pipeline::eval_stage(&cfg)?;
            let m = &s.mean;
            println!(
                "n={} | L1 {:.4} L2 {:.4} | sim(main) {:.4} sim(aux) {:.4} | out {:.4} dir {:.4} | IoU {:.4} (random baseline {:.4}) | mask area {:.3} | unmasked L1 {:.6}",
                s.count, m.l1, m.l2, m.clip_i, m.aux_i, m.clip_out, m.clip_dir, m.iou,
                s.baseline_iou, m.mask_area, m.unmasked_l1
            );
        }
        Command::Ablate => {
            let rows = pipeline::ablate(&cfg)?;
            for r in rows {
                let m = &r.summary.mean;
                println!(
                    "{:<16} train loss {:.4} | IoU {:.4} dir {:.4} out {:.4} mask area {:.3}",
                    r.name, r.final_train_loss, m.iou, m.clip_dir, m.clip_out, m.mask_area
                );
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Data(_) | Error::Io(_) => ExitCode::from(3),
                _ => ExitCode::from(2),
            }
        }
    }
}
