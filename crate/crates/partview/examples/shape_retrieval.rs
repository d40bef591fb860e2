//! Use the learned global features for shape retrieval: every test shape
//! queries the rest, ranked by feature distance, and we report mAP and the
//! 11-point precision/recall curve.
//!
//! Run with: cargo run --release --example shape_retrieval

use partview::config::Config;
use partview::evalkit::{extract_features, load_split, retrieval_report};
use partview::region::generate_anchors;
use partview::shapegen::{generate_benchmark, GenSpec, OmissionRule};
use partview::train::train;

fn main() -> Result<(), partview::Error> {
    let root = std::env::temp_dir().join("partview_example_retrieval");
    let psi_dir = root.join("psi");
    generate_benchmark(
        &psi_dir,
        "psi",
        &GenSpec {
            template_ids: vec![0, 1, 2, 3],
            train: 32,
            test: 20,
            views: 4,
            image_size: 96,
            seed: 31,
            omission: OmissionRule::default(),
        },
    )?;

    let mut cfg = Config::default();
    cfg.views = 4;
    cfg.epochs = 3;
    cfg.phi = Some(psi_dir.clone());
    cfg.psi = Some(psi_dir.clone());
    let outcome = train(&cfg, &root.join("run"))?;

    let test = load_split(&psi_dir, "test")?;
    let grid = cfg.feature_grid();
    let anchors = generate_anchors(grid, grid, &cfg);
    let features = extract_features(&outcome.model, &anchors, &test)?;
    let report = retrieval_report(&features)?;

    println!("retrieval mAP over {} queries: {:.3}", test.len(), report.map);
    println!("precision at the 11 standard recall points:");
    for (r, p) in &report.curve.points {
        println!("  recall {r:.1} -> precision {p:.3}");
    }
    Ok(())
}
