//! `apn`: build, verify, train, evaluate, count, dedup, reconcile, and
//! export-masks over one JSON run configuration.
//!
//! Exit codes: 0 success, 1 verification failure, 2 configuration error,
//! 3 i/o error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use apn_core::complexity;
use apn_core::config::{arch_spec, variant_from_flag, DataConfig, RunConfig};
use apn_core::corpus;
use apn_core::error::Error;
use apn_core::gradcheck::suite::verification_suite;
use apn_core::model::{load_checkpoint, save_checkpoint, Apn};
use apn_core::param::{Mode, ParamStore, Session};
use apn_core::pnm;
use apn_core::synth;
use apn_core::tensor::Tensor;
use apn_core::train::{evaluate, train};

#[derive(Parser)]
#[command(name = "apn", version, about = "Attentional pyramid network toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Validate a config, build the model deterministically, and save the
    /// initial checkpoint.
    Build {
        #[arg(long)]
        config: PathBuf,
        /// Override the config seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the gradient verification suite (alias: gradcheck).
    #[command(alias = "gradcheck")]
    Verify {
        /// Deliberately corrupt one entry to exercise failure reporting.
        #[arg(long, hide = true)]
        break_op: Option<String>,
    },
    /// Report parameters and multiply-adds of a named architecture.
    Count {
        #[arg(long)]
        arch: String,
        /// Square input extent.
        #[arg(long, default_value_t = 224)]
        input: usize,
        /// Also write report.json into this directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train on the configured dataset; writes metrics.jsonl and best.ckpt.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Attention variant override: none, ca, sca, csca, csca-theta,
        /// csca-theta-plus.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on the configured dataset split.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        variant: Option<String>,
    },
    /// Export spatial attention masks as PGM files and channel gates as TSV.
    ExportMasks {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Deduplicate images by perceptual hash (greedy, input order).
    Dedup {
        /// PGM/PPM image files, scanned in the given order.
        images: Vec<PathBuf>,
        #[arg(long, default_value_t = 5)]
        threshold: u32,
        /// Write kept.txt and duplicates.tsv here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reconcile multi-annotator labels from a TSV (image_id, 2-3 labels).
    Reconcile {
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Io(_) => 3,
                Error::NanLoss { .. } => 1,
                _ => 2,
            };
            ExitCode::from(code)
        }
    }
}

fn threads_from_env() -> usize {
    std::env::var("APN_THREADS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(1)
}

fn load_config(
    path: &Path,
    seed: Option<u64>,
    variant: Option<&str>,
    out: Option<&Path>,
) -> Result<RunConfig, Error> {
    let mut config = RunConfig::from_path(path)?;
    if let Some(seed) = seed {
        config.seed = seed;
    }
    if let Some(flag) = variant {
        config.model.attention.variant = variant_from_flag(flag)?;
        config.validate()?;
    }
    if let Some(out) = out {
        config.out_dir = out.to_string_lossy().into_owned();
    }
    for warning in config
        .model
        .attention
        .warnings(config.model.backbone.lateral_width)
    {
        eprintln!("warning: {warning}");
    }
    Ok(config)
}

fn datasets(config: &RunConfig) -> Result<(synth::Dataset, synth::Dataset), Error> {
    match &config.data {
        DataConfig::Synthetic(spec) => synth::generate(spec, config.seed),
        DataConfig::Dir(dir) => {
            let train = synth::load_dataset(&Path::new(dir).join("train"))?;
            let val = synth::load_dataset(&Path::new(dir).join("val"))?;
            Ok((train, val))
        }
    }
}

fn run(command: Command) -> Result<ExitCode, Error> {
    match command {
        Command::Build { config, seed, out } => {
            let config = load_config(&config, seed, None, out.as_deref())?;
            let mut store = ParamStore::<f32>::new();
            let model = Apn::build(&mut store, config.seed, &config.model)?;
            let out_dir = PathBuf::from(&config.out_dir);
            std::fs::create_dir_all(&out_dir)?;
            let ckpt = out_dir.join("init.ckpt");
            save_checkpoint(&store, &ckpt)?;
            println!(
                "built model: {} parameters, checkpoint {}",
                model.weight_scalars(),
                ckpt.display()
            );
            Ok(ExitCode::SUCCESS)
        }

        Command::Verify { break_op } => {
            let entries = verification_suite(break_op.as_deref())?;
            let mut worst_failure: Option<&apn_core::gradcheck::SuiteEntry> = None;
            for entry in &entries {
                println!(
                    "{:<32} max rel err {:>12.3e}  (tolerance {:.0e})  {}",
                    entry.name,
                    entry.max_rel_err,
                    entry.tolerance,
                    if entry.passed() { "ok" } else { "FAIL" }
                );
                if !entry.passed() {
                    let worse = worst_failure
                        .map(|w| entry.max_rel_err > w.max_rel_err)
                        .unwrap_or(true);
                    if worse {
                        worst_failure = Some(entry);
                    }
                }
            }
            match worst_failure {
                Some(worst) => {
                    println!(
                        "verification FAILED: worst op '{}' at rel err {:.3e}",
                        worst.name, worst.max_rel_err
                    );
                    Ok(ExitCode::from(1))
                }
                None => {
                    println!("verification passed: {} checks", entries.len());
                    Ok(ExitCode::SUCCESS)
                }
            }
        }

        Command::Count { arch, input, out } => {
            let spec = arch_spec(&arch)?;
            let report = complexity::complexity(&spec, &arch, input)?;
            print!("{}", report.to_text());
            let json = serde_json::to_string_pretty(&report).expect("serializable report");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("report.json"), &json)?;
            } else {
                println!("{json}");
            }
            Ok(ExitCode::SUCCESS)
        }

        Command::Train {
            config,
            seed,
            variant,
            out,
        } => {
            let config = load_config(&config, seed, variant.as_deref(), out.as_deref())?;
            let (train_set, val_set) = datasets(&config)?;
            let mut store = ParamStore::<f32>::new();
            let model = Apn::build(&mut store, config.seed, &config.model)?;
            let out_dir = PathBuf::from(&config.out_dir);
            let result = train(
                &model,
                &mut store,
                &train_set,
                &val_set,
                &config.train,
                config.seed,
                Some(&out_dir),
            )?;
            println!(
                "trained {} epochs; best val top1 {:.4} at epoch {}; artifacts in {}",
                result.log.len(),
                result.best_val_top1,
                result.best_epoch,
                out_dir.display()
            );
            Ok(ExitCode::SUCCESS)
        }

        Command::Eval {
            config,
            checkpoint: ckpt_path,
            split,
            seed,
            variant,
        } => {
            let config = load_config(&config, seed, variant.as_deref(), None)?;
            let (train_set, val_set) = datasets(&config)?;
            let dataset = match split.as_str() {
                "train" => &train_set,
                "val" => &val_set,
                other => {
                    return Err(Error::Config(format!(
                        "unknown split '{other}' (want train or val)"
                    )))
                }
            };
            let mut store = ParamStore::<f32>::new();
            let model = Apn::build(&mut store, config.seed, &config.model)?;
            load_checkpoint(&mut store, &ckpt_path)?;
            let eval = evaluate(&model, &mut store, dataset, config.train.batch_size)?;
            let summary = serde_json::json!({
                "split": split,
                "top1": eval.metrics.top1,
                "macro_precision": eval.metrics.macro_precision,
                "macro_recall": eval.metrics.macro_recall,
                "macro_f1": eval.metrics.macro_f1,
                "coarse_top1": eval.coarse_top1,
            });
            println!("{}", serde_json::to_string_pretty(&summary).expect("json"));
            Ok(ExitCode::SUCCESS)
        }

        Command::ExportMasks {
            config,
            checkpoint: ckpt_path,
            image,
            out,
            seed,
        } => {
            let config = load_config(&config, seed, None, None)?;
            let mut store = ParamStore::<f32>::new();
            let model = Apn::build(&mut store, config.seed, &config.model)?;
            load_checkpoint(&mut store, &ckpt_path)?;
            let img = pnm::read(&image)?;
            export_masks(&config, &model, &mut store, &img, &out)?;
            println!("masks written to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }

        Command::Dedup {
            images,
            threshold,
            out,
        } => {
            if images.is_empty() {
                return Err(Error::Config("dedup needs at least one image path".into()));
            }
            let mut records = Vec::with_capacity(images.len());
            for path in &images {
                let img = pnm::read(path)?;
                records.push(corpus::ImageRecord::new(
                    path.to_string_lossy(),
                    img.to_gray_f64(),
                    img.width,
                    img.height,
                )?);
            }
            let hashes = corpus::hash_records(&records, threads_from_env())?;
            let report = corpus::dedup(&records, &hashes, threshold)?;
            let tsv = corpus::dedup_report_tsv(&report);
            let kept = report.kept.join("\n");
            match out {
                Some(dir) => {
                    std::fs::create_dir_all(&dir)?;
                    std::fs::write(dir.join("duplicates.tsv"), &tsv)?;
                    std::fs::write(dir.join("kept.txt"), format!("{kept}\n"))?;
                    println!(
                        "kept {} of {} images; report in {}",
                        report.kept.len(),
                        records.len(),
                        dir.display()
                    );
                }
                None => {
                    print!("{tsv}");
                    println!("# kept {} of {} images", report.kept.len(), records.len());
                }
            }
            Ok(ExitCode::SUCCESS)
        }

        Command::Reconcile { input, out } => {
            let text = std::fs::read_to_string(&input)?;
            let mut lines_out = String::from("image_id\toutcome\tlabel\n");
            for (lineno, line) in text.lines().enumerate() {
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let parts: Vec<&str> = line.split('\t').collect();
                if parts.len() < 3 || parts.len() > 4 {
                    return Err(Error::Data(format!(
                        "line {}: expected image_id and 2-3 labels",
                        lineno + 1
                    )));
                }
                let record = corpus::AnnotationRecord {
                    image_id: parts[0].to_string(),
                    labels: parts[1..].iter().map(|s| s.to_string()).collect(),
                };
                let outcome = corpus::reconcile(&record)?;
                let (tag, label) = match &outcome {
                    corpus::ReconcileOutcome::Accepted(label) => ("accepted", label.as_str()),
                    corpus::ReconcileOutcome::NeedsThird => ("needs_third", "-"),
                    corpus::ReconcileOutcome::Dropped => ("dropped", "-"),
                };
                lines_out.push_str(&format!("{}\t{}\t{}\n", record.image_id, tag, label));
            }
            match out {
                Some(path) => std::fs::write(path, lines_out)?,
                None => print!("{lines_out}"),
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

/// Run one eval-mode forward and write the attention activations: spatial
/// masks as PGMs scaled `[0,1] -> [0,255]`, channel gates as TSV rows.
fn export_masks(
    config: &RunConfig,
    model: &Apn,
    store: &mut ParamStore<f32>,
    img: &pnm::PnmImage,
    out: &Path,
) -> Result<(), Error> {
    let size =
        config.model.backbone.total_stride() * (img.width / config.model.backbone.total_stride());
    if img.width != img.height || size != img.width || size == 0 {
        return Err(Error::Config(format!(
            "image must be square with extent divisible by {}, got {}x{}",
            config.model.backbone.total_stride(),
            img.width,
            img.height
        )));
    }
    let plane = img.width * img.height;
    let mut data = vec![0.0f32; 3 * plane];
    for i in 0..plane {
        let (r, g, b) = match img.channels {
            1 => (img.pixels[i], img.pixels[i], img.pixels[i]),
            _ => (
                img.pixels[3 * i],
                img.pixels[3 * i + 1],
                img.pixels[3 * i + 2],
            ),
        };
        data[i] = r as f32 / 255.0;
        data[plane + i] = g as f32 / 255.0;
        data[2 * plane + i] = b as f32 / 255.0;
    }
    let tensor = Tensor::new(vec![1, 3, img.height, img.width], data)?;

    let mut session = Session::new(store, Mode::Eval);
    let x = session.input(tensor);
    let art = model.forward(&mut session, x)?;

    std::fs::create_dir_all(out)?;
    let mut gates_tsv = String::from("level\tflow\tchannel\tvalue\n");
    let mut wrote_any = false;
    for (level, masks) in art.masks.iter().enumerate() {
        for (name, id) in [("xi_spa", masks.xi_spa), ("xi_sem", masks.xi_sem)] {
            let Some(id) = id else { continue };
            let value = session.tape.value(id);
            let (h, w) = (value.dims()[2], value.dims()[3]);
            let pixels: Vec<u8> = value
                .data()
                .iter()
                .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
                .collect();
            let pgm = pnm::PnmImage::gray(w, h, pixels)?;
            pnm::write(&pgm, &out.join(format!("{name}_level{level}.pgm")))?;
            wrote_any = true;
        }
        for (flow, id) in [("spa", masks.s_spa), ("sem", masks.s_sem)] {
            let Some(id) = id else { continue };
            let value = session.tape.value(id);
            for (channel, &v) in value.data().iter().enumerate() {
                gates_tsv.push_str(&format!("{level}\t{flow}\t{channel}\t{v}\n"));
            }
            wrote_any = true;
        }
    }
    if !wrote_any {
        return Err(Error::Config(
            "model has no attention activations to export (variant none)".into(),
        ));
    }
    std::fs::write(out.join("ca_gates.tsv"), gates_tsv)?;
    Ok(())
}
