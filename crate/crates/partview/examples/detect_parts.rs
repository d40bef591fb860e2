//! Train a small detector and print the parts it finds in unseen shapes,
//! next to the ground truth boxes.
//!
//! Run with: cargo run --release --example detect_parts

use partview::config::Config;
use partview::detect::{evaluate_map, run_detection};
use partview::shapegen::{generate_benchmark, Dataset, GenSpec, OmissionRule};
use partview::train::train;

fn main() -> Result<(), partview::Error> {
    let root = std::env::temp_dir().join("partview_example_detect");
    let phi_dir = root.join("phi");
    generate_benchmark(
        &phi_dir,
        "phi",
        &GenSpec {
            template_ids: vec![0, 1, 4, 5],
            train: 32,
            test: 8,
            views: 4,
            image_size: 96,
            seed: 5,
            omission: OmissionRule::default(),
        },
    )?;

    let mut cfg = Config::default();
    cfg.views = 4;
    cfg.epochs = 5;
    cfg.psi_epochs = Some(0); // detection only
    cfg.phi = Some(phi_dir.clone());
    cfg.psi = Some(phi_dir.clone()); // unused with zero epochs, must exist
    let outcome = train(&cfg, &root.join("run"))?;

    let ds = Dataset::open(&phi_dir)?;
    let mut pairs = Vec::new();
    let test: Vec<String> = ds
        .manifest
        .split_ids("test")
        .iter()
        .map(|e| e.id.clone())
        .collect();
    let shapes: Vec<_> = test.iter().map(|id| ds.load_shape(id)).collect::<Result<_, _>>()?;
    for vs in &shapes {
        let detections = run_detection(&outcome.model, vs, 0.6)?;
        println!("{} ({} detections):", vs.shape_id, detections.len());
        for d in detections.iter().take(4) {
            println!(
                "  view {} score {:.2} box {:?}",
                d.view,
                d.score,
                d.rect.map(|x| x.round() as i32)
            );
        }
        pairs.push((detections, vs));
    }
    println!("mAP@0.5 = {:.3}", evaluate_map(&pairs, 0.5, cfg.views));
    Ok(())
}
