//! Marching squares over the dual grid of cell centres.

use super::{Polyline, PolylineKind, ScalarField};
use std::collections::HashMap;

/// One contour segment with the ids of the grid edges its ends lie on.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    pub a: [f64; 2],
    pub b: [f64; 2],
    pub edges: [usize; 2],
}

// Local edges: 0 bottom, 1 right, 2 top, 3 left. Corners bit 0 bottom-left,
// then counter-clockwise. Saddles (5, 10) are resolved separately.
const TABLE: [&[(usize, usize)]; 16] = [
    &[],
    &[(3, 0)],
    &[(0, 1)],
    &[(3, 1)],
    &[(1, 2)],
    &[],
    &[(0, 2)],
    &[(3, 2)],
    &[(2, 3)],
    &[(0, 2)],
    &[],
    &[(1, 2)],
    &[(3, 1)],
    &[(0, 1)],
    &[(3, 0)],
    &[],
];

fn centre(field: &ScalarField, i: usize, j: usize) -> [f64; 2] {
    [(i as f64 + 0.5) / field.nx as f64, (j as f64 + 0.5) / field.ny as f64]
}

/// Crossing on the edge from sample `(i, j)` to its right (`vertical =
/// false`) or upper neighbour, always interpolated from the lower sample so
/// both cells sharing the edge compute identical points.
fn crossing(field: &ScalarField, i: usize, j: usize, vertical: bool, level: f64) -> [f64; 2] {
    let (ib, jb) = if vertical { (i, j + 1) } else { (i + 1, j) };
    let (va, vb) = (field.at(i, j), field.at(ib, jb));
    let t = (level - va) / (vb - va);
    let pa = centre(field, i, j);
    let pb = centre(field, ib, jb);
    [pa[0] + t * (pb[0] - pa[0]), pa[1] + t * (pb[1] - pa[1])]
}

/// Segments of the `level` contour, cell by cell in row-major order.
pub fn iso_segments(field: &ScalarField, level: f64) -> Vec<Segment> {
    let mut out = Vec::new();
    if field.nx < 2 || field.ny < 2 || !level.is_finite() {
        return out;
    }
    let nx = field.nx;
    for j in 0..field.ny - 1 {
        for i in 0..nx - 1 {
            let v = [field.at(i, j), field.at(i + 1, j), field.at(i + 1, j + 1), field.at(i, j + 1)];
            let case = v
                .iter()
                .enumerate()
                .fold(0, |acc, (k, &x)| acc | (usize::from(x >= level) << k));
            let centre_inside = (v[0] + v[1] + v[2] + v[3]) / 4.0 >= level;
            let pairs: &[(usize, usize)] = match (case, centre_inside) {
                (5, true) => &[(0, 1), (2, 3)],
                (5, false) => &[(3, 0), (1, 2)],
                (10, true) => &[(3, 0), (1, 2)],
                (10, false) => &[(0, 1), (2, 3)],
                _ => TABLE[case],
            };
            // (sample i, sample j, vertical) per local edge.
            let edge = |e: usize| match e {
                0 => (i, j, false),
                1 => (i + 1, j, true),
                2 => (i, j + 1, false),
                _ => (i, j, true),
            };
            for &(ea, eb) in pairs {
                let (a, b) = (edge(ea), edge(eb));
                let id = |(si, sj, vert): (usize, usize, bool)| 2 * (sj * nx + si) + usize::from(vert);
                out.push(Segment {
                    a: crossing(field, a.0, a.1, a.2, level),
                    b: crossing(field, b.0, b.1, b.2, level),
                    edges: [id(a), id(b)],
                });
            }
        }
    }
    out
}

/// Contours at each level, segments chained into polylines through shared
/// grid edges. Closed contours repeat their first point at the end.
pub fn iso_lines(field: &ScalarField, levels: &[f64]) -> Vec<Polyline> {
    let mut out = Vec::new();
    for &level in levels {
        let segments = iso_segments(field, level);
        let mut by_edge: HashMap<usize, Vec<usize>> = HashMap::new();
        for (k, s) in segments.iter().enumerate() {
            for e in s.edges {
                by_edge.entry(e).or_default().push(k);
            }
        }
        let mut used = vec![false; segments.len()];
        let is_end = |e: usize| by_edge[&e].len() == 1;
        // Open chains first, each starting from a free end, then loops.
        let starts: Vec<(usize, usize)> = (0..segments.len())
            .flat_map(|k| segments[k].edges.map(|e| (k, e)))
            .filter(|&(_, e)| is_end(e))
            .chain((0..segments.len()).map(|k| (k, segments[k].edges[0])))
            .collect();
        for (first, start_edge) in starts {
            if used[first] {
                continue;
            }
            let point_on = |k: usize, e: usize| {
                if segments[k].edges[0] == e {
                    segments[k].a
                } else {
                    segments[k].b
                }
            };
            let mut points = vec![point_on(first, start_edge)];
            let (mut seg, mut entry) = (first, start_edge);
            loop {
                used[seg] = true;
                let exit = if segments[seg].edges[0] == entry {
                    segments[seg].edges[1]
                } else {
                    segments[seg].edges[0]
                };
                points.push(point_on(seg, exit));
                match by_edge[&exit].iter().find(|&&k| !used[k]) {
                    Some(&next) => {
                        seg = next;
                        entry = exit;
                    }
                    None => break,
                }
            }
            if points.len() >= 2 {
                out.push(Polyline {
                    kind: PolylineKind::Iso,
                    tag: level,
                    points,
                });
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        (*seed >> 11) as f64 / (1u64 << 53) as f64
    }

    #[test]
    fn uniform_field_has_no_contour() {
        let f = ScalarField::new(5, 5, vec![0.3; 25]);
        assert!(iso_lines(&f, &[0.5, 0.1]).is_empty());
    }

    #[test]
    fn linear_field_gives_one_straight_line() {
        let f = ScalarField::from_fn(10, 7, |x, _| x);
        let lines = iso_lines(&f, &[0.5]);
        assert_eq!(lines.len(), 1);
        assert_eq!(lines[0].points.len(), 7);
        for p in &lines[0].points {
            assert!((p[0] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn circle_contour_closes() {
        let f = ScalarField::from_fn(24, 24, |x, y| (x - 0.5).hypot(y - 0.5));
        let lines = iso_lines(&f, &[0.25]);
        assert_eq!(lines.len(), 1);
        let pts = &lines[0].points;
        assert_eq!(pts.first(), pts.last());
        for p in pts {
            assert!(((p[0] - 0.5).hypot(p[1] - 0.5) - 0.25).abs() < 0.01);
        }
    }

    #[test]
    fn random_field_matches_case_enumeration() {
        let mut seed = 7;
        let values: Vec<f64> = (0..64).map(|_| lcg(&mut seed)).collect();
        let f = ScalarField::new(8, 8, values);
        let level = 0.5;
        let segs = iso_segments(&f, level);
        // Every sign change on a dual-grid edge is hit by exactly the
        // segments of the cells sharing it.
        let mut crossings = 0;
        for j in 0..8 {
            for i in 0..8 {
                for (di, dj) in [(1, 0), (0, 1)] {
                    if i + di < 8 && j + dj < 8 {
                        let a = f.at(i, j) >= level;
                        let b = f.at(i + di, j + dj) >= level;
                        if a != b {
                            let interior = if di == 1 { j > 0 && j < 7 } else { i > 0 && i < 7 };
                            crossings += if interior { 2 } else { 1 };
                        }
                    }
                }
            }
        }
        assert_eq!(2 * segs.len(), crossings);
        for s in &segs {
            for p in [s.a, s.b] {
                // Reconstruct the sample edge and check the interpolant.
                let gx = p[0] * 8.0 - 0.5;
                let gy = p[1] * 8.0 - 0.5;
                let (i, j) = (gx.floor() as usize, gy.floor() as usize);
                let on_h = (gy - gy.round()).abs() < 1e-9;
                let value = if on_h {
                    let j = gy.round() as usize;
                    let t = gx - i as f64;
                    f.at(i, j) + t * (f.at((i + 1).min(7), j) - f.at(i, j))
                } else {
                    let i = gx.round() as usize;
                    let t = gy - j as f64;
                    f.at(i, j) + t * (f.at(i, (j + 1).min(7)) - f.at(i, j))
                };
                assert!((value - level).abs() < 1e-12, "{value}");
            }
        }
    }
}
