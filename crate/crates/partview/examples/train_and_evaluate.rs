//! Train the full pipeline on a small in-place dataset, then report
//! classification accuracy, detection mAP and retrieval mAP.
//!
//! This is a scaled-down run so the example finishes in a couple of minutes;
//! the `partview train` / `partview eval` subcommands expose the same flow
//! for full experiments.
//!
//! Run with: cargo run --release --example train_and_evaluate

use partview::cli::evaluate_checkpoint;
use partview::config::Config;
use partview::model::ModelState;
use partview::shapegen::{generate_benchmark, GenSpec, OmissionRule};
use partview::train::train;

fn main() -> Result<(), partview::Error> {
    let root = std::env::temp_dir().join("partview_example_train");
    let (phi_dir, psi_dir) = (root.join("phi"), root.join("psi"));

    generate_benchmark(
        &psi_dir,
        "psi",
        &GenSpec {
            template_ids: vec![0, 1, 2, 3],
            train: 32,
            test: 16,
            views: 4,
            image_size: 96,
            seed: 7,
            omission: OmissionRule::default(),
        },
    )?;
    generate_benchmark(
        &phi_dir,
        "phi",
        &GenSpec {
            template_ids: vec![0, 1, 4, 5],
            train: 24,
            test: 8,
            views: 4,
            image_size: 96,
            seed: 108,
            omission: OmissionRule::default(),
        },
    )?;

    let mut cfg = Config::default();
    cfg.views = 4;
    cfg.epochs = 4;
    cfg.phi = Some(phi_dir.clone());
    cfg.psi = Some(psi_dir.clone());

    let out = root.join("run");
    let outcome = train(&cfg, &out)?;
    println!(
        "training done: last det loss {:.4}, last cls loss {:.4}",
        outcome.final_phi_loss.unwrap_or(f64::NAN),
        outcome.final_psi_loss.unwrap_or(f64::NAN)
    );

    let model = ModelState::load(&cfg, &outcome.checkpoint)?;
    let summary = evaluate_checkpoint(&model, &phi_dir, &psi_dir, &out.join("eval"))?;
    println!(
        "instance acc {:.3} | class acc {:.3} | det mAP@0.5 {:.3} | retrieval mAP {:.3}",
        summary.instance_acc, summary.class_acc, summary.det_map, summary.retrieval_map
    );
    println!("reports under {}", out.join("eval").display());
    Ok(())
}
