//! Streamlines, streambands and arrow glyphs.

use super::{Polyline, PolylineKind, VectorField};
use serde::{Deserialize, Serialize};

const STAGNATION: f64 = 1e-9;

impl VectorField {
    /// Bilinear interpolation between cell centres, clamped at the border.
    pub fn sample(&self, p: [f64; 2]) -> [f64; 2] {
        let axis = |v: f64, n: usize| {
            let g = (v * n as f64 - 0.5).clamp(0.0, (n - 1) as f64);
            let i0 = (g.floor() as usize).min(n.saturating_sub(2));
            let t = g - i0 as f64;
            (i0, (i0 + 1).min(n - 1), t)
        };
        let (i0, i1, tx) = axis(p[0], self.nx);
        let (j0, j1, ty) = axis(p[1], self.ny);
        let at = |i: usize, j: usize| self.u[j * self.nx + i];
        let mut out = [0.0; 2];
        for k in 0..2 {
            let bottom = at(i0, j0)[k] + tx * (at(i1, j0)[k] - at(i0, j0)[k]);
            let top = at(i0, j1)[k] + tx * (at(i1, j1)[k] - at(i0, j1)[k]);
            out[k] = bottom + ty * (top - bottom);
        }
        out
    }

    fn blocked(&self, p: [f64; 2]) -> bool {
        if !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1]) {
            return true;
        }
        let i = ((p[0] * self.nx as f64) as usize).min(self.nx - 1);
        let j = ((p[1] * self.ny as f64) as usize).min(self.ny - 1);
        self.solid[j * self.nx + i]
    }
}

fn rk4(u: &VectorField, p: [f64; 2], h: f64) -> [f64; 2] {
    let add = |p: [f64; 2], k: [f64; 2], s: f64| [p[0] + s * k[0], p[1] + s * k[1]];
    let k1 = u.sample(p);
    let k2 = u.sample(add(p, k1, h / 2.0));
    let k3 = u.sample(add(p, k2, h / 2.0));
    let k4 = u.sample(add(p, k3, h));
    [
        p[0] + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
        p[1] + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
    ]
}

fn trace(u: &VectorField, seed: [f64; 2], h: f64, max_steps: usize) -> Vec<[f64; 2]> {
    if u.blocked(seed) {
        return Vec::new();
    }
    let mut points = vec![seed];
    let mut p = seed;
    for _ in 0..max_steps {
        let v = u.sample(p);
        if v[0].hypot(v[1]) < STAGNATION {
            break;
        }
        let next = rk4(u, p, h);
        if u.blocked(next) || !next[0].is_finite() || !next[1].is_finite() {
            break;
        }
        points.push(next);
        p = next;
    }
    points
}

/// RK4 streamlines from each seed with step `h` in domain units per unit
/// velocity. Lines stop at the domain edge, at solid cells, at stagnation
/// or after `max_steps`; seeds yielding fewer than two points are dropped.
pub fn streamlines(u: &VectorField, seeds: &[[f64; 2]], h: f64, max_steps: usize) -> Vec<Polyline> {
    assert!(h > 0.0, "step must be positive");
    seeds
        .iter()
        .enumerate()
        .filter_map(|(k, &seed)| {
            let points = trace(u, seed, h, max_steps);
            (points.len() >= 2).then_some(Polyline {
                kind: PolylineKind::Streamline,
                tag: k as f64,
                points,
            })
        })
        .collect()
}

/// Each band is the pair of streamlines seeded `width / 2` to either side of
/// the seed, across the local flow direction.
pub fn streambands(u: &VectorField, seeds: &[[f64; 2]], width: f64, h: f64, max_steps: usize) -> Vec<Polyline> {
    assert!(h > 0.0, "step must be positive");
    let mut out = Vec::new();
    for (k, &seed) in seeds.iter().enumerate() {
        let v = u.sample(seed);
        let speed = v[0].hypot(v[1]);
        if speed < STAGNATION {
            continue;
        }
        let normal = [-v[1] / speed * width / 2.0, v[0] / speed * width / 2.0];
        for side in [1.0, -1.0] {
            let start = [seed[0] + side * normal[0], seed[1] + side * normal[1]];
            let points = trace(u, start, h, max_steps);
            if points.len() >= 2 {
                out.push(Polyline {
                    kind: PolylineKind::StreambandEdge,
                    tag: k as f64,
                    points,
                });
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Glyph {
    pub anchor: [f64; 2],
    pub direction: [f64; 2],
    pub magnitude: f64,
}

/// One glyph per `stride`-th cell in each direction that is not solid and
/// has nonzero velocity.
pub fn glyphs(u: &VectorField, stride: usize) -> Vec<Glyph> {
    assert!(stride >= 1, "stride must be at least 1");
    let mut out = Vec::new();
    for j in (0..u.ny).step_by(stride) {
        for i in (0..u.nx).step_by(stride) {
            let c = j * u.nx + i;
            let v = u.u[c];
            let magnitude = v[0].hypot(v[1]);
            if u.solid[c] || magnitude == 0.0 {
                continue;
            }
            out.push(Glyph {
                anchor: [(i as f64 + 0.5) / u.nx as f64, (j as f64 + 0.5) / u.ny as f64],
                direction: [v[0] / magnitude, v[1] / magnitude],
                magnitude,
            });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_flow_integrates_exactly() {
        let u = VectorField::from_fn(8, 8, |_, _| [1.0, 0.0]);
        let lines = streamlines(&u, &[[0.1, 0.5]], 0.01, 10);
        let end = lines[0].points.last().unwrap();
        assert!((end[0] - 0.2).abs() < 1e-12 && (end[1] - 0.5).abs() < 1e-12);
        assert_eq!(lines[0].points.len(), 11);
    }

    #[test]
    fn rigid_rotation_keeps_its_radius() {
        let u = VectorField::from_fn(16, 16, |x, y| [-(y - 0.5), x - 0.5]);
        let n = 2000;
        let h = std::f64::consts::TAU / n as f64;
        let lines = streamlines(&u, &[[0.7, 0.5]], h, n);
        let pts = &lines[0].points;
        assert_eq!(pts.len(), n + 1);
        let drift = pts
            .iter()
            .map(|p| ((p[0] - 0.5).hypot(p[1] - 0.5) - 0.2).abs())
            .fold(0.0, f64::max);
        assert!(drift <= 1e-6, "{drift}");
        let end = pts.last().unwrap();
        assert!((end[0] - 0.7).abs() < 1e-6 && (end[1] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn stops_at_obstacles_and_rejects_blocked_seeds() {
        let mut u = VectorField::from_fn(10, 10, |_, _| [1.0, 0.0]);
        for j in 0..10 {
            u.solid[j * 10 + 6] = true;
        }
        assert!(streamlines(&u, &[[0.65, 0.5]], 0.01, 10).is_empty());
        let line = &streamlines(&u, &[[0.1, 0.5]], 0.01, 1000)[0];
        assert!(line.points.iter().all(|p| p[0] < 0.6));
        let still = VectorField::from_fn(4, 4, |_, _| [0.0, 0.0]);
        assert!(streamlines(&still, &[[0.5, 0.5]], 0.1, 5).is_empty());
    }

    #[test]
    fn tangents_follow_the_flow() {
        let u = VectorField::from_fn(32, 32, |x, y| [1.0 + y, 0.3 * (3.0 * x).sin()]);
        let line = &streamlines(&u, &[[0.05, 0.3]], 0.002, 200)[0];
        for w in line.points.windows(2) {
            let d = [w[1][0] - w[0][0], w[1][1] - w[0][1]];
            let mid = u.sample([(w[0][0] + w[1][0]) / 2.0, (w[0][1] + w[1][1]) / 2.0]);
            let cos = (d[0] * mid[0] + d[1] * mid[1]) / (d[0].hypot(d[1]) * mid[0].hypot(mid[1]));
            assert!(cos.min(1.0).acos().to_degrees() <= 2.0);
        }
    }

    #[test]
    fn bands_come_in_pairs() {
        let u = VectorField::from_fn(8, 8, |_, _| [1.0, 0.0]);
        let bands = streambands(&u, &[[0.1, 0.5]], 0.1, 0.05, 4);
        assert_eq!(bands.len(), 2);
        assert!((bands[0].points[0][1] - 0.55).abs() < 1e-12);
        assert!((bands[1].points[0][1] - 0.45).abs() < 1e-12);
    }

    #[test]
    fn glyph_counts_and_magnitudes() {
        assert!(glyphs(&VectorField::from_fn(8, 8, |_, _| [0.0, 0.0]), 1).is_empty());
        let u = VectorField::from_fn(8, 8, |x, y| [x, y]);
        let g = glyphs(&u, 4);
        assert_eq!(g.len(), 4);
        for glyph in &g {
            let i = (glyph.anchor[0] * 8.0) as usize;
            let j = (glyph.anchor[1] * 8.0) as usize;
            let v = u.u[j * 8 + i];
            assert_eq!(glyph.magnitude, v[0].hypot(v[1]));
        }
    }
}
