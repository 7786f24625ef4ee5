//! Closed-form reference solutions used for validation.

use crate::lattice::{CellFlag, MacroFields};

/// Steady body-force-driven channel velocity at row `y` for a grid whose
/// first and last rows are no-slip walls. With half-way bounce-back the walls
/// sit half a cell inside the wall rows, so the channel width is `ny - 2`.
pub fn poiseuille_velocity(y: usize, ny: usize, force: f64, viscosity: f64) -> f64 {
    let yy = y as f64;
    let lo = 0.5;
    let hi = ny as f64 - 1.5;
    if yy <= lo || yy >= hi {
        return 0.0;
    }
    force / (2.0 * viscosity) * (yy - lo) * (hi - yy)
}

/// Centerline speed G·H²/(8ν).
pub fn poiseuille_peak(ny: usize, force: f64, viscosity: f64) -> f64 {
    let h = ny as f64 - 2.0;
    force * h * h / (8.0 * viscosity)
}

/// Relative L2 error of the streamwise velocity against the analytic
/// channel profile, over all fluid cells.
pub fn poiseuille_l2_error(fields: &MacroFields, force: f64, viscosity: f64) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for y in 0..fields.ny {
        let exact = poiseuille_velocity(y, fields.ny, force, viscosity);
        for x in 0..fields.nx {
            let c = fields.index(x, y);
            if fields.flags.cells[c] != CellFlag::Fluid {
                continue;
            }
            let d = fields.u[c][0] - exact;
            num += d * d;
            den += exact * exact;
        }
    }
    (num / den).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn profile_peaks_at_the_centerline() {
        let (ny, g, nu) = (34, 1e-5, 0.1);
        let peak = poiseuille_peak(ny, g, nu);
        // ny even: the centerline sits between rows 16 and 17.
        let center = g / (2.0 * nu) * 16.0 * 16.0;
        assert!((peak - center).abs() < 1e-15 + 1e-12 * peak);
        assert!(poiseuille_velocity(16, ny, g, nu) < peak);
        assert_eq!(poiseuille_velocity(0, ny, g, nu), 0.0);
        assert_eq!(poiseuille_velocity(ny - 1, ny, g, nu), 0.0);
    }
}
