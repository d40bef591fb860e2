//! Compare aggregation variants on one small dataset: pooling baselines
//! against the attention mechanism, plus the no-local-branch variant.
//! Detection training is shared across variants through a warm-start
//! checkpoint, the way the `partview ablate --det-ckpt` subcommand does it.
//!
//! Run with: cargo run --release --example ablation_study

use partview::cli::run_ablation;
use partview::config::Config;
use partview::shapegen::{generate_benchmark, GenSpec, OmissionRule};
use partview::train::train;

fn main() -> Result<(), partview::Error> {
    let root = std::env::temp_dir().join("partview_example_ablate");
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
            seed: 21,
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
            seed: 122,
            omission: OmissionRule::default(),
        },
    )?;

    let mut cfg = Config::default();
    cfg.views = 4;
    cfg.epochs = 3;
    cfg.phi = Some(phi_dir);
    cfg.psi = Some(psi_dir);

    // One shared detection phase.
    let mut det_cfg = cfg.clone();
    det_cfg.psi_epochs = Some(0);
    let det = train(&det_cfg, &root.join("det"))?;

    let out = root.join("ablation");
    for mode in ["maxpool", "meanpool", "noatt", "multiatt", "no-l"] {
        let acc = run_ablation(&cfg, mode, Some(&det.checkpoint), &out)?;
        println!("{mode:<10} accuracy {acc:.3}");
    }
    println!("rows appended to {}", out.join("ablation.csv").display());
    Ok(())
}
