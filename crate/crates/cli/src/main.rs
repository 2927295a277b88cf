//! Command-line entry points: train on normal samples, evaluate a
//! checkpoint against a test split, score single images, preview the
//! noise augmentation, export the reference extractor, and run the
//! gradient checker.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use hlgfa::augment::{inject_point_noise, inject_stripe_noise};
use hlgfa::backbone::{make_dual_views, Backbone, BackboneSpec};
use hlgfa::config::RunConfig;
use hlgfa::data::{load_sample, scan_dataset, scan_manifest};
use hlgfa::gradcheck::GradCheckConfig;
use hlgfa::guidance::{GuidanceParameters, DEFAULT_STRUCTURE_KERNELS};
use hlgfa::objective::gradcheck_composite;
use hlgfa::pipeline::{self, Checkpoint};
use hlgfa::rng::XorShift64Star;
use hlgfa::scoring::HeatmapNorm;
use hlgfa::synthetic;

#[derive(Parser)]
#[command(
    name = "hlgfa",
    about = "Cross-resolution guided feature alignment for anomaly detection",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// Configuration file (TOML, or JSON with a .json extension).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Restrict to one dataset category.
    #[arg(long)]
    category: Option<String>,
    /// Category-agnostic training: one model over all categories.
    #[arg(long)]
    unified: bool,
    /// Override the optimizer/augmentation seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Compute device; only "cpu" is available.
    #[arg(long, default_value = "cpu")]
    device: String,
    /// Bit-reproducible single-threaded execution.
    #[arg(long)]
    strict_determinism: bool,
}

impl CommonArgs {
    fn load_config(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)
                .with_context(|| format!("loading config {}", path.display()))?,
            None => RunConfig::default(),
        };
        if let Some(category) = &self.category {
            config.dataset.categories = vec![category.clone()];
        }
        if self.unified {
            config.dataset.unified = true;
        }
        if let Some(seed) = self.seed {
            config.optimizer.seed = seed;
            config.augment.seed = seed;
        }
        if self.strict_determinism {
            config.strict_determinism = true;
        }
        if self.device != "cpu" {
            bail!(
                "device `{}` is not available; this build is CPU-only",
                self.device
            );
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train guidance parameters on the normal samples of a dataset.
    Train {
        #[command(flatten)]
        common: CommonArgs,
    },
    /// Evaluate a trained checkpoint over a dataset's test split.
    Eval {
        #[command(flatten)]
        common: CommonArgs,
        /// Checkpoint directory (containing params.hlgw and meta.json).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset root override; defaults to the checkpoint's dataset.
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// JSON manifest instead of a directory tree.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Score one image and write its heatmap.
    Predict {
        /// Checkpoint directory.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input image.
        #[arg(long)]
        image: PathBuf,
        /// Output directory (created if absent); defaults to
        /// `<output_dir>/heatmaps` of the checkpoint's run.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also dump the raw float map as an HLGW archive.
        #[arg(long)]
        raw: bool,
        /// Global normalization bounds "lo,hi" instead of per-image.
        #[arg(long)]
        norm: Option<String>,
    },
    /// Augmentation utilities.
    #[command(subcommand)]
    Augment(AugmentCommand),
    /// Export the seeded reference extractor as an HLGW archive.
    ExportBackbone {
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify analytic gradients against central finite differences.
    Gradcheck {
        #[command(flatten)]
        common: CommonArgs,
        /// Central-difference step.
        #[arg(long, default_value_t = 1e-4)]
        step: f64,
        /// Maximum tolerated relative error.
        #[arg(long, default_value_t = 1e-3)]
        tolerance: f64,
        /// Probes per parameter tensor.
        #[arg(long, default_value_t = 8)]
        samples: usize,
    },
    /// Generate a synthetic textured dataset (for demos and smoke tests).
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "synthtex")]
        category: String,
        #[arg(long, default_value_t = 60)]
        train: usize,
        #[arg(long, default_value_t = 10)]
        test_good: usize,
        #[arg(long, default_value_t = 10)]
        test_defect: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

#[derive(Subcommand)]
enum AugmentCommand {
    /// Write before/after PNGs of the noise augmentation for visual audit.
    Preview {
        #[command(flatten)]
        common: CommonArgs,
        /// Input image.
        #[arg(long)]
        image: PathBuf,
        /// Output directory.
        #[arg(long, default_value = "augment_preview")]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { common } => {
            let config = common.load_config()?;
            let index = scan_dataset(&config.dataset.root, &config.dataset.categories)?;
            for cat in &index.categories {
                println!(
                    "category `{}`: {} train normal, {} test items",
                    cat.name,
                    cat.train_normal.len(),
                    cat.test_items.len()
                );
            }
            let backbone = Backbone::from_spec(&config.backbone.to_spec())?;
            let summary = backbone.summary();
            println!(
                "backbone `{}`: {} tensors, {} parameters (frozen)",
                config.backbone.id, summary.tensor_count, summary.parameter_count
            );
            let outcomes = pipeline::train(&config)?;
            for outcome in outcomes {
                println!(
                    "trained `{}`: final epoch mean loss {:.6}, checkpoint {}",
                    outcome.group,
                    outcome.final_epoch_mean_loss,
                    outcome.checkpoint_dir.display()
                );
            }
            Ok(())
        }
        Command::Eval {
            common,
            checkpoint,
            dataset,
            manifest,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)
                .with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
            let root = dataset.unwrap_or_else(|| ckpt.config.dataset.root.clone());
            let categories = match &common.category {
                Some(c) => vec![c.clone()],
                None => ckpt.config.dataset.categories.clone(),
            };
            let index = match manifest {
                Some(path) => scan_manifest(&path)?,
                None => scan_dataset(&root, &categories)?,
            };
            let report_dir = ckpt.config.output_dir.join("reports");
            let report = pipeline::evaluate(&ckpt, &index, Some(&report_dir))?;
            println!("category,AUC-I,AP-I,F1-I,AUC-P,AP-P,PRO-P,F1-P");
            for row in report.categories.iter().chain([&report.average]) {
                println!(
                    "{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}",
                    row.category,
                    row.auc_i,
                    row.ap_i,
                    row.f1_i,
                    row.auc_p,
                    row.ap_p,
                    row.pro_p,
                    row.f1_p
                );
            }
            println!("reports written under {}", report_dir.display());
            Ok(())
        }
        Command::Predict {
            checkpoint,
            image,
            out,
            raw,
            norm,
        } => {
            let ckpt = Checkpoint::load(&checkpoint)?;
            let out = out.unwrap_or_else(|| ckpt.config.output_dir.join("heatmaps"));
            let norm = match norm {
                Some(spec) => {
                    let parts: Vec<&str> = spec.split(',').collect();
                    if parts.len() != 2 {
                        bail!("--norm expects \"lo,hi\"");
                    }
                    HeatmapNorm::Global {
                        lo: parts[0].trim().parse()?,
                        hi: parts[1].trim().parse()?,
                    }
                }
                None => HeatmapNorm::PerImage,
            };
            let prediction = pipeline::predict(&ckpt, &image, &out, norm, raw)?;
            println!("image_score {:.9}", prediction.image_score);
            println!("heatmap {}", prediction.heatmap_path.display());
            if let Some(raw_path) = prediction.raw_path {
                println!("raw {}", raw_path.display());
            }
            Ok(())
        }
        Command::Augment(AugmentCommand::Preview { common, image, out }) => {
            let config = common.load_config()?;
            let input = load_sample(&image, config.dataset.target_size)?;
            let spec = config.augment;
            let mut rng = XorShift64Star::new(spec.seed);
            let pointed = inject_point_noise(&input, &spec, &mut rng)?;
            let striped = inject_stripe_noise(&pointed, &spec, &mut rng)?;
            std::fs::create_dir_all(&out)?;
            synthetic::save_image_png(&out.join("before.png"), &input)?;
            synthetic::save_image_png(&out.join("after.png"), &striped)?;
            let (_, low) = make_dual_views(&striped, config.lr_factor)?;
            synthetic::save_image_png(&out.join("after_low.png"), &low)?;
            println!("wrote before/after previews to {}", out.display());
            Ok(())
        }
        Command::ExportBackbone { seed, out } => {
            pipeline::export_reference_backbone(seed, &out)?;
            let backbone = Backbone::from_spec(&BackboneSpec::reference(seed))?;
            let summary = backbone.summary();
            println!(
                "exported {} tensors ({} parameters) to {}",
                summary.tensor_count,
                summary.parameter_count,
                out.display()
            );
            Ok(())
        }
        Command::Gradcheck {
            common,
            step,
            tolerance,
            samples,
        } => {
            let config = common.load_config()?;
            let backbone = Backbone::from_spec(&config.backbone.to_spec())?;
            // A fixed 32x32-per-stage desk-scale probe keeps the check fast.
            let image =
                synthetic::texture_image(64.max(config.backbone.to_spec().max_stride() * 4), 23);
            let (high, low) = make_dual_views(&image, config.lr_factor)?;
            let hr = pipeline::select_stages(backbone.extract(&high)?, &config.stages)?;
            let lr = pipeline::select_stages(backbone.extract(&low)?, &config.stages)?;
            let mut params = GuidanceParameters::init(
                &config.selected_channels(),
                &DEFAULT_STRUCTURE_KERNELS,
                config.optimizer.seed,
            );
            // perturb off the identity initialization so every branch is live
            let mut named = params.to_named();
            let mut rng = XorShift64Star::new(config.optimizer.seed ^ 0xABCD);
            for tensor in named.0.values_mut() {
                for v in tensor.data_mut() {
                    *v += rng.uniform(-0.05, 0.05);
                }
            }
            params.apply_named(&named)?;
            let weights = config.loss.weights()?;
            let gc = GradCheckConfig {
                step,
                tolerance,
                samples_per_tensor: samples,
                seed: config.optimizer.seed,
            };
            let report = gradcheck_composite(&lr, &hr, &params, &weights, &gc)?;
            println!(
                "checked {} entries, max relative error {:.3e} at {}",
                report.checked, report.max_rel_err, report.worst_param
            );
            if report.passed() {
                println!("gradcheck PASS (tolerance {tolerance:.1e})");
                Ok(())
            } else {
                for f in report.failures.iter().take(10) {
                    eprintln!(
                        "FAIL {}[{}]: analytic {:.6e} vs numeric {:.6e} (rel {:.3e})",
                        f.name, f.index, f.analytic, f.numeric, f.rel_err
                    );
                }
                bail!(
                    "gradcheck failed: {} entries above tolerance",
                    report.failures.len()
                );
            }
        }
        Command::Synth {
            out,
            category,
            train,
            test_good,
            test_defect,
            size,
            seed,
        } => {
            let dir = synthetic::write_synthetic_tree(
                &out,
                &category,
                train,
                test_good,
                test_defect,
                size,
                seed,
            )?;
            println!("wrote synthetic dataset to {}", dir.display());
            Ok(())
        }
    }
}
