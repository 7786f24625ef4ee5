use super::{CellFlag, FlagField, LatticeError};
use crate::scene::{BoundaryMode, ObjectKind, Scene, SceneObject, Shape};

/// Surface patches per manikin: angular sectors around its center, counted
/// counter-clockwise from +x.
pub const MANIKIN_PATCHES: u32 = 4;

/// Rasterize a scene onto an `nx × ny` flag field, sampling at cell centers.
///
/// Non-manikin objects become `Obstacle`. Manikin cells touching anything
/// outside the manikin (8-neighbourhood) become `ThermalActive`, the rest
/// `Obstacle`. Edge cells follow the scene's boundary convention and are never
/// overwritten by objects.
pub fn rasterize(scene: &Scene, nx: usize, ny: usize) -> Result<FlagField, LatticeError> {
    for obj in &scene.objects {
        if !obj.shape.is_positive() {
            return Err(LatticeError::DegenerateGeometry(obj.id.clone()));
        }
    }
    let mut field = FlagField::filled(nx, ny, CellFlag::Fluid);
    match scene.boundary {
        BoundaryMode::Channel => {
            for y in 0..ny {
                field.set(0, y, CellFlag::Inflow);
                field.set(nx - 1, y, CellFlag::Outflow);
            }
            for x in 0..nx {
                field.set(x, 0, CellFlag::Wall);
                field.set(x, ny - 1, CellFlag::Wall);
            }
        }
        BoundaryMode::PeriodicX => {
            field.periodic_x = true;
            for x in 0..nx {
                field.set(x, 0, CellFlag::Wall);
                field.set(x, ny - 1, CellFlag::Wall);
            }
        }
        BoundaryMode::Periodic => {
            field.periodic_x = true;
            field.periodic_y = true;
        }
    }
    let reserved = |x: usize, y: usize| match scene.boundary {
        BoundaryMode::Channel => x == 0 || x + 1 == nx || y == 0 || y + 1 == ny,
        BoundaryMode::PeriodicX => y == 0 || y + 1 == ny,
        BoundaryMode::Periodic => false,
    };
    let center = |x: usize, y: usize| [(x as f64 + 0.5) / nx as f64, (y as f64 + 0.5) / ny as f64];

    let mut manikin_ordinal = 0u32;
    for obj in scene.objects.iter().filter(|o| o.kind == ObjectKind::Manikin) {
        let inside = |x: i64, y: i64| {
            x >= 0 && y >= 0 && (x as usize) < nx && (y as usize) < ny && contains(obj, center(x as usize, y as usize))
        };
        for y in 0..ny {
            for x in 0..nx {
                if reserved(x, y) || !inside(x as i64, y as i64) {
                    continue;
                }
                let mut boundary = false;
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        if !inside(x as i64 + dx, y as i64 + dy) {
                            boundary = true;
                        }
                    }
                }
                let flag = if boundary {
                    let [cx, cy] = center(x, y);
                    let angle = (cy - obj.center[1]).atan2(cx - obj.center[0]).rem_euclid(std::f64::consts::TAU);
                    let sector = ((angle / std::f64::consts::TAU * MANIKIN_PATCHES as f64) as u32).min(MANIKIN_PATCHES - 1);
                    CellFlag::ThermalActive(manikin_ordinal * MANIKIN_PATCHES + sector)
                } else {
                    CellFlag::Obstacle
                };
                field.set(x, y, flag);
            }
        }
        manikin_ordinal += 1;
    }
    for obj in scene.objects.iter().filter(|o| o.kind == ObjectKind::Obstacle) {
        for y in 0..ny {
            for x in 0..nx {
                if !reserved(x, y) && contains(obj, center(x, y)) {
                    field.set(x, y, CellFlag::Obstacle);
                }
            }
        }
    }
    Ok(field)
}

fn contains(obj: &SceneObject, p: [f64; 2]) -> bool {
    let dx = p[0] - obj.center[0];
    let dy = p[1] - obj.center[1];
    match obj.shape {
        Shape::Circle { radius } => dx * dx + dy * dy <= radius * radius,
        Shape::Rect { width, height } => dx.abs() <= 0.5 * width && dy.abs() <= 0.5 * height,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::SceneObject;

    fn scene_with(objects: Vec<SceneObject>) -> Scene {
        Scene {
            objects,
            ..Scene::default()
        }
    }

    #[test]
    fn empty_scene_follows_channel_convention() {
        let f = rasterize(&Scene::default(), 8, 8).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let expected = if y == 0 || y == 7 {
                    CellFlag::Wall
                } else if x == 0 {
                    CellFlag::Inflow
                } else if x == 7 {
                    CellFlag::Outflow
                } else {
                    CellFlag::Fluid
                };
                assert_eq!(f.get(x, y), expected, "cell ({x},{y})");
            }
        }
        assert!(!f.periodic_x && !f.periodic_y);
    }

    #[test]
    fn circle_matches_brute_force_point_count() {
        let scene = scene_with(vec![SceneObject::circle("c", [0.5, 0.5], 0.25)]);
        let f = rasterize(&scene, 16, 16).unwrap();
        // Independent count over the 14×14 interior cell centers.
        let mut expected = 0;
        for j in 1..15 {
            for i in 1..15 {
                let x = (2 * i + 1) as f64 / 32.0 - 0.5;
                let y = (2 * j + 1) as f64 / 32.0 - 0.5;
                if x * x + y * y <= 0.0625 {
                    expected += 1;
                }
            }
        }
        assert_eq!(f.count(|c| c == CellFlag::Obstacle), expected);
        assert!(expected > 0);
    }

    #[test]
    fn full_domain_rect_fills_the_interior() {
        let scene = scene_with(vec![SceneObject::rect("r", [0.5, 0.5], [1.0, 1.0])]);
        let f = rasterize(&scene, 10, 6).unwrap();
        for y in 1..5 {
            for x in 1..9 {
                assert_eq!(f.get(x, y), CellFlag::Obstacle);
            }
        }
        assert_eq!(f.get(0, 3), CellFlag::Inflow);
    }

    #[test]
    fn degenerate_sizes_are_rejected() {
        let scene = scene_with(vec![SceneObject::circle("c", [0.5, 0.5], 0.0)]);
        assert_eq!(
            rasterize(&scene, 8, 8),
            Err(LatticeError::DegenerateGeometry("c".into()))
        );
    }

    #[test]
    fn manikin_boundary_is_thermally_active_and_surrounds_its_interior() {
        let scene = scene_with(vec![SceneObject::circle("m", [0.5, 0.5], 0.25).manikin()]);
        let f = rasterize(&scene, 32, 32).unwrap();
        let active = f.count(|c| matches!(c, CellFlag::ThermalActive(_)));
        assert!(active > 0);
        assert!(f.count(|c| c == CellFlag::Obstacle) > 0);
        // No fluid cell touches a plain obstacle cell.
        for y in 1..31 {
            for x in 1..31 {
                if f.get(x, y) != CellFlag::Fluid {
                    continue;
                }
                for dy in -1i32..=1 {
                    for dx in -1i32..=1 {
                        let n = f.get((x as i32 + dx) as usize, (y as i32 + dy) as usize);
                        assert_ne!(n, CellFlag::Obstacle);
                    }
                }
            }
        }
        let mut patches: Vec<u32> = f
            .cells
            .iter()
            .filter_map(|c| match c {
                CellFlag::ThermalActive(p) => Some(*p),
                _ => None,
            })
            .collect();
        patches.sort_unstable();
        patches.dedup();
        assert_eq!(patches, vec![0, 1, 2, 3]);
        // Re-rasterizing is deterministic.
        assert_eq!(rasterize(&scene, 32, 32).unwrap(), f);
    }

    #[test]
    fn periodic_x_mode_only_walls_top_and_bottom() {
        let scene = Scene {
            boundary: BoundaryMode::PeriodicX,
            ..Scene::default()
        };
        let f = rasterize(&scene, 6, 5).unwrap();
        assert!(f.periodic_x && !f.periodic_y);
        assert_eq!(f.get(0, 2), CellFlag::Fluid);
        assert_eq!(f.get(3, 0), CellFlag::Wall);
        assert_eq!(f.get(3, 4), CellFlag::Wall);
    }
}
