//! On-disk dataset layout and generation driver.
//!
//! ```text
//! <root>/
//!   manifest.json
//!   shapes/<id>/view_<i>.pgm   binary P5, shaded 8-bit views
//!   shapes/<id>/mask_<i>.pgm   binary P5, part category ids
//!   shapes/<id>/gsp.json       per-view part boxes, [x_min,y_min,x_max,y_max)
//! ```
//!
//! The manifest records the conventions so externally rendered data can be
//! dropped in with the same layout.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::parts::{part_boxes_from_masks, OmissionRule};
use super::render::{render_views, Raster, ViewSet};
use super::{generate_scene, TEMPLATE_NAMES};
use crate::error::{Error, Result};
use crate::geometry::Box2;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GspBox {
    pub part_category: u8,
    /// x_min, y_min, x_max, y_max in view pixels, half-open.
    pub rect: [f64; 4],
}

impl GspBox {
    pub fn rect(&self) -> Box2 {
        Box2::new(self.rect[0], self.rect[1], self.rect[2], self.rect[3])
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ShapeEntry {
    pub id: String,
    pub class_id: usize,
    pub split: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset: String,
    pub classes: Vec<String>,
    pub num_views: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub box_convention: String,
    pub mask_semantics: String,
    pub shapes: Vec<ShapeEntry>,
}

impl Manifest {
    pub fn split_ids(&self, split: &str) -> Vec<&ShapeEntry> {
        self.shapes.iter().filter(|s| s.split == split).collect()
    }
}

/// Binary P5 with maxval 255.
pub fn write_pgm(path: &Path, raster: &Raster) -> Result<()> {
    let mut buf = Vec::with_capacity(raster.data.len() + 32);
    write!(buf, "P5\n{} {}\n255\n", raster.width, raster.height)
        .expect("in-memory write");
    buf.extend_from_slice(&raster.data);
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_pgm(path: &Path) -> Result<Raster> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Checkpoint {
        path: path.to_path_buf(),
        msg: format!("not a binary PGM: {msg}"),
    };
    let mut pos = 0usize;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header not ascii"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("expected P5"));
    }
    let width: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    if fields[3] != "255" {
        return Err(bad("expected maxval 255"));
    }
    pos += 1; // single whitespace after maxval
    if bytes.len() < pos + width * height {
        return Err(bad("truncated payload"));
    }
    Ok(Raster {
        width,
        height,
        data: bytes[pos..pos + width * height].to_vec(),
    })
}

#[derive(Serialize, Deserialize)]
struct GspFile {
    views: Vec<Vec<GspBox>>,
}

/// Writes one benchmark directory and returns its manifest.
pub fn write_dataset(
    root: &Path,
    name: &str,
    classes: &[String],
    shapes: &[ViewSet],
    splits: &[String],
) -> Result<Manifest> {
    assert_eq!(shapes.len(), splits.len());
    let shapes_dir = root.join("shapes");
    std::fs::create_dir_all(&shapes_dir).map_err(|e| Error::io(&shapes_dir, e))?;

    let (h, w) = shapes
        .first()
        .map(|s| (s.views[0].height, s.views[0].width))
        .unwrap_or((0, 0));
    let num_views = shapes.first().map(|s| s.views.len()).unwrap_or(0);

    let mut entries = Vec::with_capacity(shapes.len());
    for (vs, split) in shapes.iter().zip(splits) {
        let dir = shapes_dir.join(&vs.shape_id);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (i, (view, mask)) in vs.views.iter().zip(&vs.masks).enumerate() {
            write_pgm(&dir.join(format!("view_{i}.pgm")), view)?;
            write_pgm(&dir.join(format!("mask_{i}.pgm")), mask)?;
        }
        let gsp_path = dir.join("gsp.json");
        let json = serde_json::to_vec_pretty(&GspFile {
            views: vs.gsp.clone(),
        })
        .map_err(|e| Error::json(&gsp_path, e))?;
        std::fs::write(&gsp_path, json).map_err(|e| Error::io(&gsp_path, e))?;
        entries.push(ShapeEntry {
            id: vs.shape_id.clone(),
            class_id: vs.class_id,
            split: split.clone(),
        });
    }

    let manifest = Manifest {
        dataset: name.to_string(),
        classes: classes.to_vec(),
        num_views,
        image_height: h,
        image_width: w,
        box_convention: "xyxy_half_open".into(),
        mask_semantics: "pixel=part_category_id,0=background".into(),
        shapes: entries,
    };
    let mpath = root.join("manifest.json");
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::json(&mpath, e))?;
    std::fs::write(&mpath, json).map_err(|e| Error::io(&mpath, e))?;
    Ok(manifest)
}

/// A benchmark directory opened for reading.
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Dataset> {
        let mpath = root.join("manifest.json");
        let bytes = std::fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let manifest: Manifest =
            serde_json::from_slice(&bytes).map_err(|e| Error::json(&mpath, e))?;
        Ok(Dataset {
            root: root.to_path_buf(),
            manifest,
        })
    }

    pub fn class_of(&self, shape_id: &str) -> Option<usize> {
        self.manifest
            .shapes
            .iter()
            .find(|s| s.id == shape_id)
            .map(|s| s.class_id)
    }

    /// Loads views, masks and part boxes for one shape.
    pub fn load_shape(&self, shape_id: &str) -> Result<ViewSet> {
        let dir = self.root.join("shapes").join(shape_id);
        let mut views = Vec::with_capacity(self.manifest.num_views);
        let mut masks = Vec::with_capacity(self.manifest.num_views);
        for i in 0..self.manifest.num_views {
            views.push(read_pgm(&dir.join(format!("view_{i}.pgm")))?);
            masks.push(read_pgm(&dir.join(format!("mask_{i}.pgm")))?);
        }
        let gsp_path = dir.join("gsp.json");
        let bytes = std::fs::read(&gsp_path).map_err(|e| Error::io(&gsp_path, e))?;
        let gsp: GspFile = serde_json::from_slice(&bytes).map_err(|e| Error::json(&gsp_path, e))?;
        Ok(ViewSet {
            shape_id: shape_id.to_string(),
            class_id: self.class_of(shape_id).unwrap_or(0),
            views,
            masks,
            gsp: gsp.views,
        })
    }
}

/// Generation settings for one benchmark directory.
#[derive(Debug, Clone)]
pub struct GenSpec {
    /// Indices into [`TEMPLATE_NAMES`].
    pub template_ids: Vec<usize>,
    pub train: usize,
    pub test: usize,
    pub views: usize,
    pub image_size: usize,
    pub seed: u64,
    pub omission: OmissionRule,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Renders a full benchmark (train + test) and writes it under `root`.
pub fn generate_benchmark(root: &Path, name: &str, spec: &GenSpec) -> Result<Manifest> {
    if spec.template_ids.is_empty() {
        return Err(Error::invalid("gen-data", "no classes selected"));
    }
    if spec.views == 0 {
        return Err(Error::invalid("gen-data", "--views must be at least 1"));
    }
    if spec.image_size < 32 {
        return Err(Error::invalid("gen-data", "--size must be at least 32"));
    }
    let classes: Vec<String> = spec
        .template_ids
        .iter()
        .map(|&t| TEMPLATE_NAMES[t].to_string())
        .collect();

    let mut shapes = Vec::new();
    let mut splits = Vec::new();
    for (split, count, tag) in [("train", spec.train, 1u64), ("test", spec.test, 2u64)] {
        for i in 0..count {
            let class_idx = i % spec.template_ids.len();
            let template = TEMPLATE_NAMES[spec.template_ids[class_idx]];
            let scene_seed = splitmix(spec.seed ^ splitmix(tag ^ ((i as u64) << 8)));
            let scene = generate_scene(template, scene_seed)?;
            let id = format!("{split}_{i:04}_{template}");
            let mut vs = render_views(&scene, &id, spec.views, spec.image_size, spec.image_size)?;
            vs.class_id = class_idx;
            vs.gsp = part_boxes_from_masks(&vs.masks, &spec.omission);
            shapes.push(vs);
            splits.push(split.to_string());
        }
    }
    write_dataset(root, name, &classes, &shapes, &splits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> GenSpec {
        GenSpec {
            template_ids: vec![0, 1],
            train: 2,
            test: 0,
            views: 3,
            image_size: 48,
            seed: 5,
            omission: OmissionRule::default(),
        }
    }

    #[test]
    fn file_counts_match_layout() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_benchmark(dir.path(), "phi", &tiny_spec()).unwrap();
        assert_eq!(m.shapes.len(), 2);
        let mut views = 0;
        let mut masks = 0;
        let mut gsp = 0;
        for entry in &m.shapes {
            let d = dir.path().join("shapes").join(&entry.id);
            for f in std::fs::read_dir(&d).unwrap() {
                let name = f.unwrap().file_name().into_string().unwrap();
                if name.starts_with("view_") {
                    views += 1;
                } else if name.starts_with("mask_") {
                    masks += 1;
                } else if name == "gsp.json" {
                    gsp += 1;
                }
            }
        }
        assert_eq!((views, masks, gsp), (6, 6, 2));
        assert!(dir.path().join("manifest.json").exists());
    }

    #[test]
    fn roundtrip_masks_and_boxes() {
        let dir = tempfile::tempdir().unwrap();
        let m = generate_benchmark(dir.path(), "phi", &tiny_spec()).unwrap();
        let ds = Dataset::open(dir.path()).unwrap();
        assert_eq!(ds.manifest.classes, m.classes);
        for entry in &m.shapes {
            let vs = ds.load_shape(&entry.id).unwrap();
            assert_eq!(vs.views.len(), 3);
            assert_eq!(vs.masks.len(), 3);
            assert_eq!(vs.gsp.len(), 3);
            for b in vs.gsp.iter().flatten() {
                assert!(b.rect().is_valid());
                assert!(b.rect[2] <= 48.0 && b.rect[3] <= 48.0);
            }
        }
    }

    #[test]
    fn pgm_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.pgm");
        let r = Raster {
            width: 3,
            height: 2,
            data: vec![0, 255, 13, 99, 1, 7],
        };
        write_pgm(&p, &r).unwrap();
        assert_eq!(read_pgm(&p).unwrap(), r);
    }

    #[test]
    fn generation_is_byte_deterministic() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_benchmark(d1.path(), "psi", &tiny_spec()).unwrap();
        generate_benchmark(d2.path(), "psi", &tiny_spec()).unwrap();
        let hash = |root: &Path| {
            let mut files = Vec::new();
            fn walk(dir: &Path, rel: &str, out: &mut Vec<(String, Vec<u8>)>) {
                let mut entries: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap()).collect();
                entries.sort_by_key(|e| e.file_name());
                for e in entries {
                    let name = format!("{rel}/{}", e.file_name().into_string().unwrap());
                    if e.path().is_dir() {
                        walk(&e.path(), &name, out);
                    } else {
                        out.push((name, std::fs::read(e.path()).unwrap()));
                    }
                }
            }
            walk(root, "", &mut files);
            files
        };
        assert_eq!(hash(d1.path()), hash(d2.path()));
    }

    #[test]
    fn manifest_classes_stable_order() {
        let dir = tempfile::tempdir().unwrap();
        let spec = GenSpec {
            template_ids: vec![0, 1, 2, 3],
            ..tiny_spec()
        };
        let m = generate_benchmark(dir.path(), "psi", &spec).unwrap();
        assert_eq!(m.classes, vec!["plane", "chair", "table", "car"]);
    }
}
