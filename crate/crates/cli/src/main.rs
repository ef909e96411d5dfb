use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use unshadow::augmentation::{bank_from_masks, illumination_variants, inpaint_shadow};
use unshadow::candle_core::Device;
use unshadow::config::PipelineConfig;
use unshadow::datasets::{load_split, SplitName};
use unshadow::evaluation::{evaluate, Aggregation, GroundTruthEcho, LabError, PipelineRemover, ShadowRemover};
use unshadow::imaging::{embed_region, extract_region, ImageTensor};
use unshadow::io::{load_image, load_mask, save_image};
use unshadow::training::{fit, load_networks, perceptual_extractor, to_resolution, FitOptions, Mode, Trainer};
use unshadow::{Error, Result};

/// Shadow removal: train, evaluate, run inference and preview augmentations.
#[derive(Parser, Debug)]
#[command(name = "unshadow", version)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set train.epochs=2`. Repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Overrides `train.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Pin the compute pool to one thread.
    #[arg(long, global = true)]
    deterministic: bool,
    #[arg(long, default_value = "cpu", global = true)]
    device: String,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train from scratch or resume a checkpoint.
    Train {
        #[arg(long)]
        mode: Option<Mode>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score a checkpoint on a dataset split.
    Eval {
        #[arg(long, required_unless_present = "gt_self_test")]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        /// Directory for metrics.csv and metrics.json.
        #[arg(long, default_value = "report")]
        report: PathBuf,
        /// Score the ground truth against itself.
        #[arg(long)]
        gt_self_test: bool,
        #[arg(long)]
        bypass_refine: bool,
        /// Pool pixels across samples instead of averaging per sample.
        #[arg(long)]
        pooled: bool,
        /// Root-mean-square LAB error instead of mean absolute.
        #[arg(long)]
        rms: bool,
    },
    /// Remove the shadow from one image given its mask.
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        mask: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Also write the extracted, shadow-removed and embedded stages.
        #[arg(long)]
        all_stages: bool,
        #[arg(long)]
        bypass_refine: bool,
    },
    /// Render original / inpainted / illumination-variant samples as a grid.
    AugmentPreview {
        #[arg(long, default_value_t = 4)]
        samples: usize,
        #[arg(long, default_value = "augment_preview.png")]
        output: PathBuf,
        #[arg(long, default_value = "train")]
        split: String,
    },
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::NonFinite { .. } => 3,
        Error::Config { .. }
        | Error::Contract(_)
        | Error::Shape(_)
        | Error::Layout { .. }
        | Error::MissingWeights { .. } => 2,
        _ => 1,
    }
}

fn device(name: &str) -> Result<Device> {
    match name {
        "cpu" => Ok(Device::Cpu),
        other => Err(Error::Config {
            key: "--device".into(),
            reason: format!("unsupported device `{other}` (this build supports `cpu`)"),
        }),
    }
}

fn split_name(s: &str) -> Result<SplitName> {
    match s {
        "train" => Ok(SplitName::Train),
        "test" => Ok(SplitName::Test),
        other => Err(Error::Config {
            key: "--split".into(),
            reason: format!("unknown split `{other}`"),
        }),
    }
}

fn load_config(g: &Global, extra: &[String]) -> Result<PipelineConfig> {
    let mut overrides = g.overrides.clone();
    if let Some(seed) = g.seed {
        overrides.push(format!("train.seed={seed}"));
    }
    overrides.extend_from_slice(extra);
    PipelineConfig::load(g.config.as_deref(), &overrides)
}

fn train(g: &Global, mode: Option<Mode>, resume: Option<&Path>) -> Result<()> {
    let extra: Vec<String> = mode.map(|m| format!("train.mode=\"{m}\"")).into_iter().collect();
    let cfg = load_config(g, &extra)?;
    let root = cfg.dataset_root()?;
    let dev = device(&g.device)?;
    log::info!("effective config:\n{}", cfg.to_toml()?);
    let supervised = cfg.train.mode == Mode::Supervised;
    let split = Arc::new(load_split(root, cfg.dataset.layout, SplitName::Train, supervised)?);
    log::info!("{} training samples ({} rejected)", split.len(), split.rejected.len());
    std::fs::create_dir_all(&cfg.paths.log_dir)?;
    split.write_rejection_report(&cfg.paths.log_dir.join("rejected.txt"))?;
    std::fs::write(cfg.paths.log_dir.join("config.toml"), cfg.to_toml()?)?;
    let weights = cfg.perceptual_weights();
    let vgg = perceptual_extractor(&cfg.networks, weights.as_deref(), cfg.train.seed, &dev)?;
    let mut trainer = match resume {
        Some(p) => {
            let t = Trainer::resume(p, vgg, &dev)?;
            if t.config() != &cfg.run_config() {
                log::warn!("resuming with the checkpoint's stored config; file/overrides are ignored");
            }
            t
        }
        None => Trainer::new(cfg.run_config(), vgg, &dev)?,
    };
    let opts = FitOptions {
        checkpoint_dir: cfg.paths.checkpoint_dir.clone(),
        log_dir: cfg.paths.log_dir.clone(),
    };
    let last = fit(&mut trainer, split, &opts)?;
    println!("{}", last.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn eval(
    g: &Global,
    checkpoint: Option<&Path>,
    split: &str,
    report_dir: &Path,
    gt_self_test: bool,
    bypass_refine: bool,
    pooled: bool,
    rms: bool,
) -> Result<()> {
    let cfg = load_config(g, &[])?;
    let root = cfg.dataset_root()?;
    let dev = device(&g.device)?;
    let data = load_split(root, cfg.dataset.layout, split_name(split)?, false)?;
    let mut eval_cfg = cfg.eval.clone();
    if pooled {
        eval_cfg.aggregation = Aggregation::PixelPooled;
    }
    if rms {
        eval_cfg.lab_error = LabError::Rms;
    }
    let report = if gt_self_test {
        evaluate(&GroundTruthEcho, &data, &eval_cfg)?
    } else {
        let path = checkpoint.ok_or_else(|| Error::Config {
            key: "--checkpoint".into(),
            reason: "required unless --gt-self-test".into(),
        })?;
        let (_, nets) = load_networks(path, &dev)?;
        let remover = PipelineRemover {
            networks: &nets,
            bypass_refine,
        };
        evaluate(&remover as &dyn ShadowRemover, &data, &eval_cfg)?
    };
    std::fs::create_dir_all(report_dir)?;
    report.write_csv(&report_dir.join("metrics.csv"))?;
    report.write_json(&report_dir.join("metrics.json"))?;
    print!("{}", report.table());
    Ok(())
}

fn stage_path(output: &Path, stage: &str) -> PathBuf {
    let stem = output.file_stem().and_then(|s| s.to_str()).unwrap_or("output");
    let ext = output.extension().and_then(|s| s.to_str()).unwrap_or("png");
    output.with_file_name(format!("{stem}_{stage}.{ext}"))
}

fn infer(g: &Global, checkpoint: &Path, input: &Path, mask: &Path, output: &Path, all: bool, bypass: bool) -> Result<()> {
    let dev = device(&g.device)?;
    let (_, nets) = load_networks(checkpoint, &dev)?;
    let image = load_image(input)?;
    let mask = load_mask(mask)?;
    if image.dims() != mask.dims() {
        return Err(Error::Config {
            key: "--mask".into(),
            reason: format!("mask is {:?} but image is {:?}", mask.dims(), image.dims()),
        });
    }
    let stages = nets.remove_shadow(&image, &mask, bypass)?;
    if let Some(dir) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_image(&stages.output, output)?;
    if all {
        save_image(&stages.shadow_region.to_image(), &stage_path(output, "shadow_region"))?;
        save_image(&stages.removed_region.to_image(), &stage_path(output, "removed_region"))?;
        save_image(&stages.embedded, &stage_path(output, "embedded"))?;
    }
    Ok(())
}

fn grid(rows: &[Vec<ImageTensor>], side: usize) -> ImageTensor {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(1);
    ImageTensor::from_fn(rows.len() * side, cols * side, |y, x, c| {
        rows[y / side]
            .get(x / side)
            .map(|cell| cell.data()[[y % side, x % side, c]])
            .unwrap_or(0.0)
    })
}

fn augment_preview(g: &Global, samples: usize, output: &Path, split: &str) -> Result<()> {
    let cfg = load_config(g, &[])?;
    let root = cfg.dataset_root()?;
    let data = load_split(root, cfg.dataset.layout, split_name(split)?, false)?;
    let side = cfg.train.train_resolution;
    let order: Vec<usize> = (0..data.len()).collect();
    let all = data
        .iterate(&order)?
        .map(|t| to_resolution(&t?, side))
        .collect::<Result<Vec<_>>>()?;
    let bank = bank_from_masks(all.iter().map(|t| &t.mask));
    let inpaint = cfg.train.inpaint && cfg.augment.inpaint_enabled;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut rows = Vec::new();
    for t in all.iter().take(samples) {
        let mut row = vec![t.shadow.clone()];
        if inpaint {
            row.push(if t.mask.is_empty() {
                t.shadow.clone()
            } else {
                inpaint_shadow(t, &bank, &cfg.augment, &mut rng)?.shadow
            });
        }
        if !t.mask.is_empty() {
            for v in illumination_variants(&extract_region(&t.shadow, &t.mask)?, cfg.augment.mu)? {
                row.push(embed_region(&t.shadow, &t.mask, &v)?);
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Contract("no samples to preview".into()));
    }
    if let Some(dir) = output.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_image(&grid(&rows, side), output)?;
    println!("{}", output.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Train { mode, resume } => train(g, *mode, resume.as_deref()),
        Command::Eval {
            checkpoint,
            split,
            report,
            gt_self_test,
            bypass_refine,
            pooled,
            rms,
        } => eval(
            g,
            checkpoint.as_deref(),
            split,
            report,
            *gt_self_test,
            *bypass_refine,
            *pooled,
            *rms,
        ),
        Command::Infer {
            checkpoint,
            input,
            mask,
            output,
            all_stages,
            bypass_refine,
        } => infer(g, checkpoint, input, mask, output, *all_stages, *bypass_refine),
        Command::AugmentPreview { samples, output, split } => augment_preview(g, *samples, output, split),
    }
}

/// Moves every `--set` ahead of the subcommand. clap replaces, rather than
/// extends, a global list given on both sides of the subcommand.
fn hoist_overrides(args: Vec<String>) -> Vec<String> {
    let mut head = Vec::new();
    let mut rest = Vec::new();
    let mut it = args.into_iter();
    head.extend(it.next());
    while let Some(a) = it.next() {
        if a == "--" {
            rest.push(a);
            rest.extend(it.by_ref());
        } else if a == "--set" {
            head.push(a);
            head.extend(it.next());
        } else if a.starts_with("--set=") {
            head.push(a);
        } else {
            rest.push(a);
        }
    }
    head.extend(rest);
    head
}

fn main() -> ExitCode {
    let cli = Cli::parse_from(hoist_overrides(std::env::args().collect()));
    if cli.global.deterministic {
        std::env::set_var("RAYON_NUM_THREADS", "1");
    }
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
