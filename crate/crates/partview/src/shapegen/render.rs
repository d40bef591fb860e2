//! Orthographic ray-cast rendering of labeled scenes.
//!
//! Cameras sit on a ring around the scene at equal azimuth steps and a fixed
//! elevation, looking at the origin. Each pixel casts one ray; the nearest
//! primitive wins, writing its part category into the mask and a Lambertian
//! intensity into the view. Background stays 0 in both rasters.

use super::{LabeledScene, Primitive};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize) -> Raster {
        Raster {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn at(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }
}

/// The rendered views of one shape: shaded rasters, label masks and (once
/// derived) per-view ground-truth part boxes.
#[derive(Debug, Clone)]
pub struct ViewSet {
    pub shape_id: String,
    pub class_id: usize,
    pub views: Vec<Raster>,
    pub masks: Vec<Raster>,
    pub gsp: Vec<Vec<super::GspBox>>,
}

/// Half-extent of the orthographic window in scene units.
const ORTHO_SPAN: f64 = 1.4;
const ELEVATION: f64 = 0.45; // radians
const AMBIENT: f64 = 70.0;
const DIFFUSE: f64 = 185.0;

fn normalize(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn axpy(p: [f64; 3], t: f64, d: [f64; 3]) -> [f64; 3] {
    [p[0] + t * d[0], p[1] + t * d[1], p[2] + t * d[2]]
}

/// Renders `v_views` views of `h x w` pixels. Masks hold part category ids
/// with occlusion respected (the nearer primitive wins).
pub fn render_views(
    scene: &LabeledScene,
    shape_id: &str,
    v_views: usize,
    height: usize,
    width: usize,
) -> Result<ViewSet> {
    if v_views == 0 {
        return Err(Error::invalid("render_views", "need at least one view"));
    }
    if height < 32 || width < 32 {
        return Err(Error::invalid(
            "render_views",
            format!("image dims {height}x{width} below the 32 px minimum"),
        ));
    }
    let mut views = Vec::with_capacity(v_views);
    let mut masks = Vec::with_capacity(v_views);
    for i in 0..v_views {
        let azimuth = 2.0 * std::f64::consts::PI * i as f64 / v_views as f64;
        let (view, mask) = render_one(scene, azimuth, height, width);
        views.push(view);
        masks.push(mask);
    }
    Ok(ViewSet {
        shape_id: shape_id.to_string(),
        class_id: scene.class_id,
        views,
        masks,
        gsp: Vec::new(),
    })
}

fn render_one(scene: &LabeledScene, azimuth: f64, height: usize, width: usize) -> (Raster, Raster) {
    let eye_dir = [
        ELEVATION.cos() * azimuth.cos(),
        ELEVATION.cos() * azimuth.sin(),
        ELEVATION.sin(),
    ];
    let forward = [-eye_dir[0], -eye_dir[1], -eye_dir[2]];
    let right = normalize(cross(forward, [0.0, 0.0, 1.0]));
    let up = cross(right, forward);
    let eye = [eye_dir[0] * 4.0, eye_dir[1] * 4.0, eye_dir[2] * 4.0];
    // Fixed light rigged to the camera: mostly headlight with a side tilt.
    let light = normalize([
        -forward[0] + 0.35 * right[0] + 0.45 * up[0],
        -forward[1] + 0.35 * right[1] + 0.45 * up[1],
        -forward[2] + 0.35 * right[2] + 0.45 * up[2],
    ]);

    let mut view = Raster::new(width, height);
    let mut mask = Raster::new(width, height);
    for py in 0..height {
        let v = ORTHO_SPAN - (py as f64 + 0.5) / height as f64 * 2.0 * ORTHO_SPAN;
        for px in 0..width {
            let u = (px as f64 + 0.5) / width as f64 * 2.0 * ORTHO_SPAN - ORTHO_SPAN;
            let origin = [
                eye[0] + u * right[0] + v * up[0],
                eye[1] + u * right[1] + v * up[1],
                eye[2] + u * right[2] + v * up[2],
            ];
            let mut best_t = f64::INFINITY;
            let mut best: Option<(u8, [f64; 3])> = None;
            for p in &scene.parts {
                if let Some((t, normal)) = intersect(&p.primitive, origin, forward) {
                    if t < best_t {
                        best_t = t;
                        best = Some((p.category, normal));
                    }
                }
            }
            if let Some((cat, normal)) = best {
                let shade = AMBIENT + DIFFUSE * dot(normal, light).max(0.0);
                view.data[py * width + px] = shade.round().clamp(1.0, 255.0) as u8;
                mask.data[py * width + px] = cat;
            }
        }
    }
    (view, mask)
}

/// Nearest positive intersection of an orthographic ray with a primitive,
/// returning (distance, outward surface normal).
fn intersect(p: &Primitive, o: [f64; 3], d: [f64; 3]) -> Option<(f64, [f64; 3])> {
    match *p {
        Primitive::Sphere { center, radius } => {
            let oc = [o[0] - center[0], o[1] - center[1], o[2] - center[2]];
            let b = dot(oc, d);
            let c = dot(oc, oc) - radius * radius;
            let disc = b * b - c;
            if disc < 0.0 {
                return None;
            }
            let t = -b - disc.sqrt();
            if t <= 1e-9 {
                return None;
            }
            let hit = axpy(o, t, d);
            let normal = normalize([
                hit[0] - center[0],
                hit[1] - center[1],
                hit[2] - center[2],
            ]);
            Some((t, normal))
        }
        Primitive::Cuboid { center, half } => {
            let mut t_near = f64::NEG_INFINITY;
            let mut t_far = f64::INFINITY;
            let mut near_axis = 0usize;
            let mut near_sign = 1.0f64;
            for a in 0..3 {
                let lo = center[a] - half[a];
                let hi = center[a] + half[a];
                if d[a].abs() < 1e-12 {
                    if o[a] < lo || o[a] > hi {
                        return None;
                    }
                    continue;
                }
                let mut t0 = (lo - o[a]) / d[a];
                let mut t1 = (hi - o[a]) / d[a];
                let mut sign = -1.0;
                if t0 > t1 {
                    std::mem::swap(&mut t0, &mut t1);
                    sign = 1.0;
                }
                if t0 > t_near {
                    t_near = t0;
                    near_axis = a;
                    near_sign = sign;
                }
                t_far = t_far.min(t1);
                if t_near > t_far {
                    return None;
                }
            }
            if t_near <= 1e-9 {
                return None;
            }
            let mut normal = [0.0; 3];
            normal[near_axis] = near_sign;
            Some((t_near, normal))
        }
        Primitive::Cylinder {
            center,
            radius,
            half_len,
            axis,
        } => {
            let (u, v) = match axis {
                0 => (1, 2),
                1 => (0, 2),
                _ => (0, 1),
            };
            let ou = o[u] - center[u];
            let ov = o[v] - center[v];
            let a2 = d[u] * d[u] + d[v] * d[v];
            let mut best: Option<(f64, [f64; 3])> = None;

            if a2 > 1e-12 {
                let b = ou * d[u] + ov * d[v];
                let c = ou * ou + ov * ov - radius * radius;
                let disc = b * b - a2 * c;
                if disc >= 0.0 {
                    let t = (-b - disc.sqrt()) / a2;
                    if t > 1e-9 {
                        let hit = axpy(o, t, d);
                        if (hit[axis] - center[axis]).abs() <= half_len {
                            let mut n = [0.0; 3];
                            n[u] = hit[u] - center[u];
                            n[v] = hit[v] - center[v];
                            best = Some((t, normalize(n)));
                        }
                    }
                }
            }
            // end caps
            if d[axis].abs() > 1e-12 {
                for sign in [-1.0, 1.0] {
                    let plane = center[axis] + sign * half_len;
                    let t = (plane - o[axis]) / d[axis];
                    if t > 1e-9 && best.map_or(true, |(bt, _)| t < bt) {
                        let hit = axpy(o, t, d);
                        let du = hit[u] - center[u];
                        let dv = hit[v] - center[v];
                        if du * du + dv * dv <= radius * radius {
                            let mut n = [0.0; 3];
                            n[axis] = sign;
                            best = Some((t, n));
                        }
                    }
                }
            }
            best
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::shapegen::{generate_scene, ScenePart};

    fn sphere_scene() -> LabeledScene {
        LabeledScene {
            class_id: 0,
            seed: 0,
            parts: vec![ScenePart {
                category: 1,
                primitive: Primitive::Sphere {
                    center: [0.0, 0.0, 0.0],
                    radius: 0.5,
                },
            }],
        }
    }

    #[test]
    fn centered_sphere_gives_identical_masks() {
        let vs = render_views(&sphere_scene(), "s", 4, 48, 48).unwrap();
        for m in &vs.masks[1..] {
            assert_eq!(m, &vs.masks[0]);
        }
        assert!(vs.masks[0].data.iter().any(|&v| v == 1));
    }

    #[test]
    fn mask_nonzero_iff_view_nonzero() {
        let scene = generate_scene("chair", 5).unwrap();
        let vs = render_views(&scene, "c", 3, 64, 64).unwrap();
        for (view, mask) in vs.views.iter().zip(&vs.masks) {
            for (a, b) in view.data.iter().zip(&mask.data) {
                assert_eq!(*a > 0, *b > 0);
            }
        }
    }

    #[test]
    fn mask_values_are_scene_categories_or_zero() {
        let scene = generate_scene("car", 2).unwrap();
        let cats = scene.categories();
        let vs = render_views(&scene, "v", 5, 48, 48).unwrap();
        for m in &vs.masks {
            for &v in &m.data {
                assert!(v == 0 || cats.contains(&v), "mask value {v}");
            }
        }
    }

    #[test]
    fn occluded_part_is_absent_from_mask() {
        // Two boxes stacked along the azimuth-0 depth axis (x). The camera is
        // elevated, so the rear box sits low and small enough that every ray
        // clearing the front box also clears it.
        let scene = LabeledScene {
            class_id: 0,
            seed: 0,
            parts: vec![
                ScenePart {
                    category: 1,
                    primitive: Primitive::Cuboid {
                        center: [0.5, 0.0, 0.0],
                        half: [0.2, 0.45, 0.6],
                    },
                },
                ScenePart {
                    category: 2,
                    primitive: Primitive::Cuboid {
                        center: [-0.5, 0.0, -0.2],
                        half: [0.2, 0.3, 0.22],
                    },
                },
            ],
        };
        let vs = render_views(&scene, "o", 1, 64, 64).unwrap();
        let mask = &vs.masks[0];
        assert!(mask.data.iter().any(|&v| v == 1));
        assert!(
            !mask.data.iter().any(|&v| v == 2),
            "hidden part leaked into the mask"
        );
    }

    #[test]
    fn rendering_is_deterministic() {
        let scene = generate_scene("lamp", 9).unwrap();
        let a = render_views(&scene, "l", 2, 48, 48).unwrap();
        let b = render_views(&scene, "l", 2, 48, 48).unwrap();
        assert_eq!(a.views, b.views);
        assert_eq!(a.masks, b.masks);
    }

    #[test]
    fn dims_below_minimum_rejected() {
        assert!(render_views(&sphere_scene(), "s", 1, 16, 64).is_err());
        assert!(render_views(&sphere_scene(), "s", 0, 64, 64).is_err());
    }
}
