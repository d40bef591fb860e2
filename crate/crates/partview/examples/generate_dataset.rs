//! Generate the two synthetic benchmarks: a classification set (`psi`) over
//! plane/chair/table/car and a detection set (`phi`) whose class list only
//! partly overlaps, so part detection has to transfer.
//!
//! Run with: cargo run --release --example generate_dataset

use partview::shapegen::{generate_benchmark, GenSpec, OmissionRule};

fn main() -> Result<(), partview::Error> {
    let out = std::path::PathBuf::from("data");

    let psi = GenSpec {
        template_ids: vec![0, 1, 2, 3], // plane, chair, table, car
        train: 40,
        test: 16,
        views: 6,
        image_size: 96,
        seed: 42,
        omission: OmissionRule::default(),
    };
    let manifest = generate_benchmark(&out.join("psi"), "psi", &psi)?;
    println!(
        "psi: {} shapes over classes {:?}",
        manifest.shapes.len(),
        manifest.classes
    );

    let phi = GenSpec {
        template_ids: vec![0, 1, 4, 5], // plane, chair, lamp, mug
        train: 24,
        test: 8,
        views: 6,
        image_size: 96,
        seed: 143,
        omission: OmissionRule::default(),
    };
    let manifest = generate_benchmark(&out.join("phi"), "phi", &phi)?;
    println!(
        "phi: {} shapes over classes {:?}",
        manifest.shapes.len(),
        manifest.classes
    );

    // peek at one shape's ground truth part boxes
    let ds = partview::shapegen::Dataset::open(&out.join("phi"))?;
    let first = ds.manifest.shapes[0].id.clone();
    let vs = ds.load_shape(&first)?;
    println!("{first}: per-view part box counts:");
    for (v, boxes) in vs.gsp.iter().enumerate() {
        println!(
            "  view {v}: {:?}",
            boxes
                .iter()
                .map(|b| (b.part_category, b.rect.map(|x| x as i32)))
                .collect::<Vec<_>>()
        );
    }
    Ok(())
}
