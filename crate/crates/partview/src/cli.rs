//! The `partview` binary: one subcommand per pipeline stage.
//!
//! Exit codes: 0 success, 2 configuration error, 3 I/O error, 4 NaN abort
//! during training.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{AggMode, Config};
use crate::error::{Error, Result};
use crate::evalkit;
use crate::model::ModelState;
use crate::region::generate_anchors;
use crate::shapegen::{self, GenSpec, OmissionMeasure, OmissionRule, OmissionScope};
use crate::train;

#[derive(Parser)]
#[command(name = "partview", version, about = "Part detection over multi-view renders and attention-aggregated shape features")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Config JSON file; omitted fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed override applied on top of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory (or file, for single-file commands).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmarks: a classification set, plus a
    /// detection set when --phi-train/--phi-test are nonzero.
    GenData {
        /// Shape classes in the classification benchmark (max 6).
        #[arg(long, default_value_t = 4)]
        classes: usize,
        /// Training shapes in the classification benchmark.
        #[arg(long, default_value_t = 200)]
        train: usize,
        /// Test shapes in the classification benchmark.
        #[arg(long, default_value_t = 80)]
        test: usize,
        /// Training shapes in the detection benchmark (0 skips it).
        #[arg(long, default_value_t = 0)]
        phi_train: usize,
        /// Test shapes in the detection benchmark.
        #[arg(long, default_value_t = 0)]
        phi_test: usize,
        /// Rendered views per shape.
        #[arg(long, default_value_t = 6)]
        views: usize,
        /// View size in pixels (square).
        #[arg(long, default_value_t = 96)]
        size: usize,
        /// Part-box omission measure: area or side.
        #[arg(long, default_value = "area")]
        omission_measure: String,
        /// Omission scope: per_shape or per_view.
        #[arg(long, default_value = "per_shape")]
        omission_scope: String,
        /// Omission ratio threshold.
        #[arg(long, default_value_t = 0.45)]
        omission_threshold: f64,
    },
    /// Train on the detection and classification benchmarks.
    Train {
        /// Detection benchmark directory.
        #[arg(long)]
        phi: Option<PathBuf>,
        /// Classification benchmark directory.
        #[arg(long)]
        psi: Option<PathBuf>,
    },
    /// Evaluate a checkpoint: classification, detection mAP, retrieval.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        phi: Option<PathBuf>,
        #[arg(long)]
        psi: Option<PathBuf>,
    },
    /// Run part detection over a dataset split and write detections.json.
    Detect {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Detection score threshold.
        #[arg(long, default_value_t = 0.6)]
        threshold: f64,
        /// Which split to run on.
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Dump the attention matrices and selected regions for one shape.
    Inspect {
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory containing the shape.
        #[arg(long)]
        data: PathBuf,
        /// Shape id from the manifest.
        #[arg(long)]
        shape: String,
    },
    /// Train one aggregation variant and append its accuracy to ablation.csv.
    Ablate {
        /// maxpool | meanpool | netvlad | noatt | ptatt | pnatt | multiatt | no-l
        #[arg(long)]
        mode: String,
        #[arg(long)]
        phi: Option<PathBuf>,
        #[arg(long)]
        psi: Option<PathBuf>,
        /// Warm-start detection checkpoint; skips the detection phase.
        #[arg(long)]
        det_ckpt: Option<PathBuf>,
    },
    /// Verify every op and objective against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 1e-5)]
        tolerance: f64,
        #[arg(long, default_value_t = 1e-6)]
        step: f64,
    },
}

pub fn run() -> i32 {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(cli_config: &Option<PathBuf>, cli_seed: Option<u64>) -> Result<Config> {
    let mut cfg = match cli_config {
        Some(path) => Config::load(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli_seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.config, cli.seed)?;
    match cli.command {
        Command::GenData {
            classes,
            train,
            test,
            phi_train,
            phi_test,
            views,
            size,
            omission_measure,
            omission_scope,
            omission_threshold,
        } => {
            if classes == 0 || classes > shapegen::TEMPLATE_NAMES.len() {
                return Err(Error::invalid(
                    "gen-data",
                    format!("--classes must lie in 1..=6, got {classes}"),
                ));
            }
            if views == 0 {
                return Err(Error::invalid("gen-data", "--views must be at least 1"));
            }
            if size < 32 {
                return Err(Error::invalid("gen-data", "--size must be at least 32"));
            }
            let omission = OmissionRule {
                threshold: omission_threshold,
                measure: match omission_measure.as_str() {
                    "area" => OmissionMeasure::Area,
                    "side" => OmissionMeasure::Side,
                    other => {
                        return Err(Error::invalid(
                            "gen-data",
                            format!("--omission-measure must be area or side, got {other}"),
                        ))
                    }
                },
                scope: match omission_scope.as_str() {
                    "per_shape" => OmissionScope::PerShape,
                    "per_view" => OmissionScope::PerView,
                    other => {
                        return Err(Error::invalid(
                            "gen-data",
                            format!("--omission-scope must be per_shape or per_view, got {other}"),
                        ))
                    }
                },
            };
            let out = cli.out.unwrap_or_else(|| PathBuf::from("data"));

            // Classification benchmark: the first `classes` templates.
            let psi_spec = GenSpec {
                template_ids: (0..classes).collect(),
                train,
                test,
                views,
                image_size: size,
                seed: cfg.seed,
                omission,
            };
            let psi_dir = out.join("psi");
            let m = shapegen::generate_benchmark(&psi_dir, "psi", &psi_spec)?;
            println!(
                "psi: {} shapes ({} train / {} test), {} views each -> {}",
                m.shapes.len(),
                train,
                test,
                views,
                psi_dir.display()
            );

            // Detection benchmark: overlaps on two templates, differs on the
            // rest, so part knowledge must transfer.
            if phi_train + phi_test > 0 {
                let phi_templates: Vec<usize> = [0usize, 1, 4, 5, 2, 3][..classes].to_vec();
                let phi_spec = GenSpec {
                    template_ids: phi_templates,
                    train: phi_train,
                    test: phi_test,
                    views,
                    image_size: size,
                    seed: cfg.seed.wrapping_add(101),
                    omission,
                };
                let phi_dir = out.join("phi");
                let m = shapegen::generate_benchmark(&phi_dir, "phi", &phi_spec)?;
                println!(
                    "phi: {} shapes ({} train / {} test), {} views each -> {}",
                    m.shapes.len(),
                    phi_train,
                    phi_test,
                    views,
                    phi_dir.display()
                );
            }
            Ok(())
        }

        Command::Train { phi, psi } => {
            let mut cfg = cfg;
            if let Some(p) = phi {
                cfg.phi = Some(p);
            }
            if let Some(p) = psi {
                cfg.psi = Some(p);
            }
            let out = cli.out.unwrap_or_else(|| PathBuf::from("run"));
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            cfg.save(&out.join("config.json"))?;
            let outcome = train::train(&cfg, &out)?;
            println!(
                "trained: checkpoint {} (last det loss {:.4}, last cls loss {:.4}), log {}",
                outcome.checkpoint.display(),
                outcome.final_phi_loss.unwrap_or(f64::NAN),
                outcome.final_psi_loss.unwrap_or(f64::NAN),
                outcome.log.display()
            );
            Ok(())
        }

        Command::Eval { ckpt, phi, psi } => {
            let phi_dir = phi.or(cfg.phi.clone()).ok_or_else(|| {
                Error::invalid("eval", "detection benchmark path missing (--phi)")
            })?;
            let psi_dir = psi.or(cfg.psi.clone()).ok_or_else(|| {
                Error::invalid("eval", "classification benchmark path missing (--psi)")
            })?;
            let model = ModelState::load(&cfg, &ckpt)?;
            let out = cli.out.unwrap_or_else(|| PathBuf::from("eval"));
            let summary = evaluate_checkpoint(&model, &phi_dir, &psi_dir, &out)?;
            println!(
                "instance acc {:.4} | class acc {:.4} | det mAP@0.5 {:.4} | retrieval mAP {:.4} -> {}",
                summary.instance_acc,
                summary.class_acc,
                summary.det_map,
                summary.retrieval_map,
                out.display()
            );
            Ok(())
        }

        Command::Detect {
            ckpt,
            data,
            threshold,
            split,
        } => {
            let model = ModelState::load(&cfg, &ckpt)?;
            let shapes = evalkit::load_split(&data, &split)?;
            let mut all = Vec::new();
            let mut pairs = Vec::new();
            for vs in &shapes {
                let det = crate::detect::run_detection(&model, vs, threshold)?;
                all.extend(det.clone());
                pairs.push((det, vs));
            }
            let map = crate::detect::evaluate_map(&pairs, 0.5, model.cfg.views);
            let out = cli.out.unwrap_or_else(|| PathBuf::from("detections.json"));
            crate::detect::write_detections(&out, &all)?;
            println!(
                "{} detections over {} shapes (threshold {threshold}), mAP@0.5 {:.4} -> {}",
                all.len(),
                shapes.len(),
                map,
                out.display()
            );
            Ok(())
        }

        Command::Inspect { ckpt, data, shape } => {
            let model = ModelState::load(&cfg, &ckpt)?;
            let ds = shapegen::Dataset::open(&data)?;
            let vs = ds.load_shape(&shape)?;
            let grid = model.cfg.feature_grid();
            let anchors = generate_anchors(grid, grid, &model.cfg);
            let dump = crate::agg::attention_dump(&model, &anchors, &vs)?;
            let out = cli.out.unwrap_or_else(|| PathBuf::from("attention.json"));
            let json = serde_json::to_vec_pretty(&dump).map_err(|e| Error::json(&out, e))?;
            std::fs::write(&out, json).map_err(|e| Error::io(&out, e))?;
            println!(
                "attention for {shape}: alpha {}x{}, beta {} -> {}",
                dump.alpha.len(),
                dump.alpha.first().map_or(0, |r| r.len()),
                dump.beta.len(),
                out.display()
            );
            Ok(())
        }

        Command::Ablate {
            mode,
            phi,
            psi,
            det_ckpt,
        } => {
            let mut cfg = cfg;
            if let Some(p) = phi {
                cfg.phi = Some(p);
            }
            if let Some(p) = psi {
                cfg.psi = Some(p);
            }
            let out = cli.out.unwrap_or_else(|| PathBuf::from("ablation"));
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            let accuracy = run_ablation(&cfg, &mode, det_ckpt.as_deref(), &out)?;
            println!("ablation {mode}: accuracy {accuracy:.4} -> {}", out.join("ablation.csv").display());
            Ok(())
        }

        Command::Gradcheck { tolerance, step } => {
            let started = std::time::Instant::now();
            let report = crate::gradsuite::run_full_suite(step, tolerance)?;
            for item in &report.items {
                println!(
                    "{} {:<55} max rel err {:.3e}",
                    if item.passed { "PASS" } else { "FAIL" },
                    item.name,
                    item.max_rel_err
                );
            }
            let failed = report.items.iter().filter(|i| !i.passed).count();
            println!(
                "{}/{} checks passed (tolerance {:.1e}, step {:.1e}) in {:.1}s",
                report.items.len() - failed,
                report.items.len(),
                tolerance,
                step,
                started.elapsed().as_secs_f64()
            );
            if let Some(out) = cli.out {
                #[derive(serde::Serialize)]
                struct Row<'a> {
                    name: &'a str,
                    max_rel_err: f64,
                    passed: bool,
                }
                let rows: Vec<Row> = report
                    .items
                    .iter()
                    .map(|i| Row {
                        name: &i.name,
                        max_rel_err: i.max_rel_err,
                        passed: i.passed,
                    })
                    .collect();
                let json = serde_json::to_vec_pretty(&rows).map_err(|e| Error::json(&out, e))?;
                std::fs::write(&out, json).map_err(|e| Error::io(&out, e))?;
            }
            if failed > 0 {
                return Err(Error::invalid(
                    "gradcheck",
                    format!("{failed} checks exceeded the tolerance"),
                ));
            }
            Ok(())
        }
    }
}

pub struct EvalSummary {
    pub instance_acc: f64,
    pub class_acc: f64,
    pub det_map: f64,
    pub retrieval_map: f64,
}

/// Shared by `eval` and the ablation driver: classification + detection +
/// retrieval over the test splits, with reports written under `out`.
pub fn evaluate_checkpoint(
    model: &ModelState,
    phi_dir: &Path,
    psi_dir: &Path,
    out: &Path,
) -> Result<EvalSummary> {
    let grid = model.cfg.feature_grid();
    let anchors = generate_anchors(grid, grid, &model.cfg);

    let psi_test = evalkit::load_split(psi_dir, "test")?;
    let report = evalkit::classification_report(model, &anchors, &psi_test)?;
    let features = evalkit::extract_features(model, &anchors, &psi_test)?;
    let retrieval = evalkit::retrieval_report(&features)?;
    if retrieval.skipped_queries > 0 {
        eprintln!(
            "warning: {} retrieval queries skipped (singleton classes)",
            retrieval.skipped_queries
        );
    }

    let phi_test = evalkit::load_split(phi_dir, "test")?;
    let mut pairs = Vec::new();
    let mut all = Vec::new();
    for vs in &phi_test {
        let det = crate::detect::run_detection(model, vs, crate::train::EVAL_SCORE_FLOOR)?;
        all.extend(det.clone());
        pairs.push((det, vs));
    }
    let det_map = crate::detect::evaluate_map(&pairs, 0.5, model.cfg.views);

    let classes = shapegen::Dataset::open(psi_dir)?.manifest.classes;
    evalkit::emit_reports(
        out,
        &evalkit::Metrics {
            instance_acc: report.instance_accuracy,
            class_acc: report.class_accuracy,
            det_map,
            retrieval_map: retrieval.map,
        },
        &report.confusion,
        &classes,
        &retrieval.curve,
        &all,
    )?;
    Ok(EvalSummary {
        instance_acc: report.instance_accuracy,
        class_acc: report.class_accuracy,
        det_map,
        retrieval_map: retrieval.map,
    })
}

/// Trains one ablation variant and appends `mode,seed,accuracy` to
/// `ablation.csv` under `out`.
pub fn run_ablation(
    cfg: &Config,
    mode: &str,
    det_ckpt: Option<&Path>,
    out: &Path,
) -> Result<f64> {
    let mut cfg = cfg.clone();
    let mut warm_start_ok = true;
    match mode.to_ascii_lowercase().as_str() {
        "no-l" | "nol" | "no_l" => {
            // the point of this variant is a proposal module trained without
            // the local branch, so it never reuses a shared detection phase
            cfg.use_local_branch = false;
            cfg.aggregation = AggMode::MultiAtt;
            warm_start_ok = false;
        }
        other => {
            cfg.aggregation = other.parse()?;
        }
    }
    if let (Some(ckpt), true) = (det_ckpt, warm_start_ok) {
        cfg.init_ckpt = Some(ckpt.to_path_buf());
        cfg.phi_epochs = Some(0);
    }
    let run_dir = out.join(format!("{}_seed{}", mode.to_ascii_lowercase(), cfg.seed));
    let outcome = train::train(&cfg, &run_dir)?;

    let psi_dir = cfg.psi.clone().expect("train validated psi");
    let psi_test = evalkit::load_split(&psi_dir, "test")?;
    let grid = cfg.feature_grid();
    let anchors = generate_anchors(grid, grid, &cfg);
    let report = evalkit::classification_report(&outcome.model, &anchors, &psi_test)?;

    let csv = out.join("ablation.csv");
    let mut existing = if csv.exists() {
        std::fs::read_to_string(&csv).map_err(|e| Error::io(&csv, e))?
    } else {
        "mode,seed,accuracy\n".to_string()
    };
    existing.push_str(&format!("{},{},{:.4}\n", mode, cfg.seed, report.instance_accuracy));
    std::fs::write(&csv, existing).map_err(|e| Error::io(&csv, e))?;
    Ok(report.instance_accuracy)
}
