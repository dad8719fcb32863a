//! Command line for the structural inpainting pipeline.
//!
//! Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical
//! abort.

mod settings;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use settings::Settings;
use sinp_core::data::{load_image, mask_center, write_image, FillMode, ImageRgb, MaskSpec};
use sinp_core::error::Error;
use sinp_core::metrics;
use sinp_core::nets::checkpoint::{load_checkpoint, load_featnet};
use sinp_core::nets::ce_predict;
use sinp_core::refine::{refine_multiscale, HoleGeometry};
use sinp_core::train::{curriculum, RunOptions, Trainer};
use sinp_core::Tensor;

#[derive(Parser)]
#[command(
    name = "sinp",
    version,
    about = "Structural image inpainting: context-encoder training, prediction, patch-based refinement, and evaluation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a context encoder (structural phase, then adversarial phase).
    Train(CommonArgs),
    /// Mask the center of an image and fill it with the model prediction.
    Inpaint(CommonArgs),
    /// Inpaint, then refine the hole by patch-correspondence optimization.
    Refine(CommonArgs),
    /// Score a model on a dataset (l1 %, l2 %, PSNR).
    Eval(CommonArgs),
    /// Evaluate with the visible context limited to each distance in --k.
    Ablate(CommonArgs),
}

impl Command {
    fn args(&self) -> &CommonArgs {
        match self {
            Command::Train(a)
            | Command::Inpaint(a)
            | Command::Refine(a)
            | Command::Eval(a)
            | Command::Ablate(a) => a,
        }
    }
}

#[derive(Args)]
struct CommonArgs {
    /// Flat key=value config file; flags override its entries.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Geometry/schedule preset: desk or paper [default: desk].
    #[arg(long)]
    preset: Option<String>,
    /// Dataset: synth:KINDS (stripes,checker,wedge,junction or mixed) or a
    /// manifest file of image paths [default: synth:mixed].
    #[arg(long)]
    data: Option<String>,
    /// Phase-1 training steps [default: 200 (desk preset)].
    #[arg(long)]
    steps: Option<u64>,
    /// Phase-2 (adversarial) training steps [default: 40 (desk preset)].
    #[arg(long = "phase2-steps")]
    phase2_steps: Option<u64>,
    /// Seed for initialization, batching and synthetic data [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint path (written by train, read by the other commands).
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Input image (inpaint/refine).
    #[arg(long = "in")]
    input: Option<PathBuf>,
    /// Output image (inpaint/refine).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Context distances for ablate, comma separated (e.g. 2,4,8).
    #[arg(long)]
    k: Option<String>,
    /// Directory for CSV/text reports and traces [default: none].
    #[arg(long = "report-dir")]
    report_dir: Option<PathBuf>,
    /// Extra key=value override (repeatable); keys as in the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl CommonArgs {
    fn to_settings(&self) -> Result<Settings, Error> {
        let mut pairs: Vec<(String, String)> = Vec::new();
        let mut push = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                pairs.push((k.to_string(), v));
            }
        };
        push("preset", self.preset.clone());
        push("data", self.data.clone());
        push("steps", self.steps.map(|v| v.to_string()));
        push("phase2_steps", self.phase2_steps.map(|v| v.to_string()));
        push("seed", self.seed.map(|v| v.to_string()));
        push(
            "checkpoint",
            self.checkpoint.as_ref().map(|p| p.display().to_string()),
        );
        push("in", self.input.as_ref().map(|p| p.display().to_string()));
        push("out", self.out.as_ref().map(|p| p.display().to_string()));
        push("k", self.k.clone());
        push(
            "report_dir",
            self.report_dir.as_ref().map(|p| p.display().to_string()),
        );
        for kv in &self.set {
            let (k, v) = kv.split_once('=').ok_or_else(|| {
                Error::Config(format!("--set {kv:?} is not of the form key=value"))
            })?;
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        Settings::resolve(self.config.as_deref(), &pairs)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let settings = match cli.command.args().to_settings() {
        Ok(s) => s,
        Err(e) => return fail(&e),
    };
    let result = match &cli.command {
        Command::Train(_) => cmd_train(&settings),
        Command::Inpaint(_) => cmd_inpaint(&settings),
        Command::Refine(_) => cmd_refine(&settings),
        Command::Eval(_) => cmd_eval(&settings),
        Command::Ablate(_) => cmd_ablate(&settings),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(exit_code(e))
}

/// 1 = configuration/geometry, 2 = data/files, 3 = numerical abort.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Shape(_) => 1,
        Error::Format { .. } | Error::Data(_) | Error::Io(_) | Error::Checkpoint(_) => 2,
        Error::Numeric(_) => 3,
    }
}

fn cmd_train(s: &Settings) -> Result<(), Error> {
    let dataset = s.dataset()?;
    let ckpt_path = s.require_path("checkpoint", "--checkpoint")?;
    let weights = s.loss_weights()?;
    let config = s.train_config()?;
    let mut opts = RunOptions {
        checkpoint_path: Some(&ckpt_path),
        on_eval: None,
    };

    let (trace, final_step) = if s.resume()? && ckpt_path.exists() {
        let ckpt = load_checkpoint(&ckpt_path)?;
        let mut trainer = Trainer::from_checkpoint(ckpt, weights, config)?;
        let trace = trainer.run(&dataset, &mut opts)?;
        sinp_core::nets::checkpoint::save_checkpoint(&ckpt_path, &trainer.checkpoint())?;
        (trace, trainer.step)
    } else {
        let ce_config = s.ce_config()?;
        let fn_config = s.featnet_config()?;
        if let Some(fpath) = s.featnet_file() {
            // Fixed feature weights supplied from a file.
            let featnet = load_featnet(&fpath)?;
            let ce = sinp_core::nets::CeParams::init(&ce_config, config.seed ^ 0xCE)?;
            let mut trainer = Trainer::new(ce, featnet, weights, config)?;
            let trace = trainer.run(&dataset, &mut opts)?;
            sinp_core::nets::checkpoint::save_checkpoint(&ckpt_path, &trainer.checkpoint())?;
            (trace, trainer.step)
        } else {
            let (ckpt, trace) =
                curriculum(&dataset, &ce_config, &fn_config, weights, config, &mut opts)?;
            sinp_core::nets::checkpoint::save_checkpoint(&ckpt_path, &ckpt)?;
            (trace, ckpt.train.as_ref().map(|t| t.step).unwrap_or(0))
        }
    };

    for w in &trace.warnings {
        eprintln!("warning: {w}");
    }
    if let Some(dir) = s.path("report_dir") {
        std::fs::create_dir_all(&dir)?;
        trace.write_csv(&dir.join("train_trace.csv"))?;
    }
    if let Some(last) = trace.rows.last() {
        println!(
            "trained to step {final_step}: l_total {:.6} (l_pix {:.6}, l_feat {:.6})",
            last.l_total, last.l_pix, last.l_feat_total
        );
    } else {
        println!("nothing to do: checkpoint already at step {final_step}");
    }
    println!("checkpoint written to {}", ckpt_path.display());
    Ok(())
}

/// Load the checkpoint and input image, mask the center, and predict.
fn prepare_prediction(
    s: &Settings,
) -> Result<(sinp_core::nets::checkpoint::Checkpoint, ImageRgb, MaskSpec, Tensor), Error> {
    let ckpt_path = s.require_path("checkpoint", "--checkpoint")?;
    let in_path = s.require_path("in", "--in")?;
    let ckpt = load_checkpoint(&ckpt_path)?;
    let img = load_image(&in_path)?;
    let m = ckpt.ce.config.input_size;
    if img.height != m || img.width != m {
        return Err(Error::Shape(format!(
            "input image is {}x{} but the checkpoint expects {m}x{m}",
            img.height, img.width
        )));
    }
    let spec = MaskSpec::new(
        m,
        ckpt.ce.config.prediction_size,
        ckpt.ce.config.hole_size,
        FillMode::ContextMean,
    )?;
    let sample = mask_center(&img, &spec)?;
    let y = ce_predict(&ckpt.ce, &sample.masked.to_tensor())?;
    Ok((ckpt, img, spec, y))
}

/// Write `img` with the hole region replaced by the prediction's hole part.
fn paste_hole_and_write(
    img: &ImageRgb,
    prediction: &Tensor,
    spec: &MaskSpec,
    out: &Path,
) -> Result<(), Error> {
    let mut result = img.clone();
    let hole_in_pred = (spec.prediction_size - spec.hole_size) / 2;
    let o = spec.hole_offset();
    for y in 0..spec.hole_size {
        for x in 0..spec.hole_size {
            for c in 0..3 {
                result.set(
                    o + y,
                    o + x,
                    c,
                    prediction.at3(hole_in_pred + y, hole_in_pred + x, c),
                );
            }
        }
    }
    write_image(out, &result)
}

fn cmd_inpaint(s: &Settings) -> Result<(), Error> {
    let out = s.require_path("out", "--out")?;
    let (_, img, spec, y) = prepare_prediction(s)?;
    paste_hole_and_write(&img, &y, &spec, &out)?;
    println!("inpainted image written to {}", out.display());
    Ok(())
}

fn cmd_refine(s: &Settings) -> Result<(), Error> {
    let out = s.require_path("out", "--out")?;
    let config = s.refine_config()?;
    let (ckpt, img, spec, y) = prepare_prediction(s)?;
    let sample = mask_center(&img, &spec)?;
    let geom = HoleGeometry::centered(spec.input_size, spec.hole_size)?;
    let (refined, trace) = refine_multiscale(
        &sample.masked.to_tensor(),
        &y,
        &ckpt.featnet,
        &config,
        geom,
    )?;
    // The refined image equals the masked input outside the hole; paste its
    // hole back into the original input.
    let mut result = img.clone();
    let o = spec.hole_offset();
    for yy in 0..spec.hole_size {
        for xx in 0..spec.hole_size {
            for c in 0..3 {
                result.set(o + yy, o + xx, c, refined.at3(o + yy, o + xx, c));
            }
        }
    }
    write_image(&out, &result)?;
    if let Some(dir) = s.path("report_dir") {
        std::fs::create_dir_all(&dir)?;
        trace.write_csv(&dir.join("refine_trace.csv"))?;
    }
    println!("refined image written to {}", out.display());
    Ok(())
}

fn cmd_eval(s: &Settings) -> Result<(), Error> {
    let ckpt_path = s.require_path("checkpoint", "--checkpoint")?;
    let ckpt = load_checkpoint(&ckpt_path)?;
    let dataset = s.dataset()?;
    let report = metrics::evaluate_model(&ckpt.ce, &dataset, None)?;
    print!("{}", report.to_table());
    if let Some(dir) = s.path("report_dir") {
        metrics::write_report(&dir, &report)?;
        println!("reports written to {}", dir.display());
    }
    Ok(())
}

fn cmd_ablate(s: &Settings) -> Result<(), Error> {
    let ckpt_path = s.require_path("checkpoint", "--checkpoint")?;
    let ckpt = load_checkpoint(&ckpt_path)?;
    let dataset = s.dataset()?;
    let k_list = s.k_list()?;
    let rows = metrics::context_ablation(&ckpt.ce, &dataset, &k_list)?;
    print!("{}", metrics::ablation_to_table(&rows));
    if let Some(dir) = s.path("report_dir") {
        metrics::write_ablation(&dir, &rows)?;
        println!("reports written to {}", dir.display());
    }
    Ok(())
}
