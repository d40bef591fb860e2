//! Look at what the aggregation attends to: the region-over-pattern matrix,
//! the pattern weights, and the region boxes they refer to.
//!
//! Run with: cargo run --release --example inspect_attention

use partview::agg::attention_dump;
use partview::config::Config;
use partview::region::generate_anchors;
use partview::shapegen::{generate_benchmark, Dataset, GenSpec, OmissionRule};
use partview::train::train;

fn main() -> Result<(), partview::Error> {
    let root = std::env::temp_dir().join("partview_example_inspect");
    let psi_dir = root.join("psi");
    generate_benchmark(
        &psi_dir,
        "psi",
        &GenSpec {
            template_ids: vec![0, 1, 2, 3],
            train: 24,
            test: 8,
            views: 4,
            image_size: 96,
            seed: 11,
            omission: OmissionRule::default(),
        },
    )?;

    let mut cfg = Config::default();
    cfg.views = 4;
    cfg.patterns = 8;
    cfg.epochs = 3;
    cfg.phi = Some(psi_dir.clone()); // shared-benchmark training
    cfg.psi = Some(psi_dir.clone());
    let outcome = train(&cfg, &root.join("run"))?;

    let ds = Dataset::open(&psi_dir)?;
    let shape_id = ds.manifest.split_ids("test")[0].id.clone();
    let vs = ds.load_shape(&shape_id)?;
    let grid = cfg.feature_grid();
    let anchors = generate_anchors(grid, grid, &cfg);
    let dump = attention_dump(&outcome.model, &anchors, &vs)?;

    println!("shape {shape_id}");
    println!("beta over {} patterns:", dump.beta.len());
    let mut ranked: Vec<(usize, f64)> = dump.beta.iter().copied().enumerate().collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    for (n, w) in ranked.iter().take(4) {
        println!("  pattern {n}: {w:.3}");
    }
    println!("alpha row sums (should all be 1):");
    for row in dump.alpha.iter().take(3) {
        println!("  {:.6}", row.iter().sum::<f64>());
    }
    println!("top regions in view 0:");
    for b in dump.topk_boxes[0].iter().take(4) {
        println!("  {:?}", b.map(|x| x.round() as i32));
    }
    Ok(())
}
