//! Visual primitives extracted from macroscopic fields.
//!
//! Domain coordinates span `[0, 1]²` with cell `(i, j)` centred at
//! `((i + 0.5) / nx, (j + 0.5) / ny)`. Rasters put row 0 at the top, i.e.
//! the highest `y` row of the grid.

mod iso;
mod stream;

pub use iso::{iso_lines, iso_segments, Segment};
pub use stream::{glyphs, streambands, streamlines, Glyph};

use crate::lattice::{FieldId, MacroFields};
use crate::partition::Rect;
use serde::{Deserialize, Serialize};
use std::io::{self, Write};
use thiserror::Error;

pub const OBSTACLE_COLOR: [u8; 4] = [64, 64, 64, 255];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VizError {
    #[error("invalid colormap: {0}")]
    BadColormap(String),
    #[error("invalid range [{0}, {1}]")]
    BadRange(f64, f64),
}

/// Scalar samples at cell centres plus a solid-cell mask.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    pub nx: usize,
    pub ny: usize,
    pub values: Vec<f64>,
    pub solid: Vec<bool>,
}

impl ScalarField {
    pub fn new(nx: usize, ny: usize, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), nx * ny);
        Self {
            nx,
            ny,
            values,
            solid: vec![false; nx * ny],
        }
    }

    pub fn from_fn(nx: usize, ny: usize, f: impl Fn(f64, f64) -> f64) -> Self {
        let values = (0..ny)
            .flat_map(|j| (0..nx).map(move |i| (i, j)))
            .map(|(i, j)| f((i as f64 + 0.5) / nx as f64, (j as f64 + 0.5) / ny as f64))
            .collect();
        Self::new(nx, ny, values)
    }

    pub fn from_macro(fields: &MacroFields, id: FieldId) -> Self {
        Self {
            nx: fields.nx,
            ny: fields.ny,
            values: fields.field(id),
            solid: fields.flags.cells.iter().map(|f| f.is_solid()).collect(),
        }
    }

    #[inline]
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.nx + i]
    }

    /// Min and max over non-solid cells, widened when degenerate.
    pub fn auto_range(&self) -> (f64, f64) {
        let (lo, hi) = self
            .values
            .iter()
            .zip(&self.solid)
            .filter(|(v, s)| !**s && v.is_finite())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (&v, _)| (lo.min(v), hi.max(v)));
        if !(lo < hi) {
            let mid = if lo.is_finite() { lo } else { 0.0 };
            let pad = (mid.abs() * 1e-6).max(1e-12);
            return (mid - pad, mid + pad);
        }
        (lo, hi)
    }
}

/// Velocity samples at cell centres plus a solid-cell mask.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    pub nx: usize,
    pub ny: usize,
    pub u: Vec<[f64; 2]>,
    pub solid: Vec<bool>,
}

impl VectorField {
    pub fn from_fn(nx: usize, ny: usize, f: impl Fn(f64, f64) -> [f64; 2]) -> Self {
        let u = (0..ny)
            .flat_map(|j| (0..nx).map(move |i| (i, j)))
            .map(|(i, j)| f((i as f64 + 0.5) / nx as f64, (j as f64 + 0.5) / ny as f64))
            .collect();
        Self {
            nx,
            ny,
            u,
            solid: vec![false; nx * ny],
        }
    }

    pub fn from_macro(fields: &MacroFields) -> Self {
        Self {
            nx: fields.nx,
            ny: fields.ny,
            u: fields.u.clone(),
            solid: fields.flags.cells.iter().map(|f| f.is_solid()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Colormap {
    pub name: String,
    pub stops: Vec<(f64, [u8; 4])>,
}

impl Colormap {
    pub fn new(name: &str, stops: Vec<(f64, [u8; 4])>) -> Result<Self, VizError> {
        let map = Self {
            name: name.to_string(),
            stops,
        };
        map.validate()?;
        Ok(map)
    }

    pub fn validate(&self) -> Result<(), VizError> {
        let s = &self.stops;
        if s.len() < 2 {
            return Err(VizError::BadColormap("needs at least two stops".into()));
        }
        if s[0].0 != 0.0 || s[s.len() - 1].0 != 1.0 {
            return Err(VizError::BadColormap("anchors must run from 0 to 1".into()));
        }
        if s.windows(2).any(|w| !(w[0].0 < w[1].0)) {
            return Err(VizError::BadColormap("anchors must increase strictly".into()));
        }
        Ok(())
    }

    /// Blue, white, red.
    pub fn diverging() -> Self {
        Self {
            name: "diverging".into(),
            stops: vec![
                (0.0, [59, 76, 192, 255]),
                (0.5, [255, 255, 255, 255]),
                (1.0, [180, 4, 38, 255]),
            ],
        }
    }

    pub fn grayscale() -> Self {
        Self {
            name: "grayscale".into(),
            stops: vec![(0.0, [0, 0, 0, 255]), (1.0, [255, 255, 255, 255])],
        }
    }

    /// Color at normalized position `t`, clamped to `[0, 1]`.
    pub fn eval(&self, t: f64) -> [u8; 4] {
        let t = if t.is_nan() { 0.0 } else { t.clamp(0.0, 1.0) };
        let k = self
            .stops
            .windows(2)
            .position(|w| t <= w[1].0)
            .unwrap_or(self.stops.len() - 2);
        let (a, ca) = self.stops[k];
        let (b, cb) = self.stops[k + 1];
        let s = (t - a) / (b - a);
        let mut out = [0; 4];
        for ch in 0..4 {
            let v = ca[ch] as f64 + s * (cb[ch] as f64 - ca[ch] as f64);
            out[ch] = v.round().clamp(0.0, 255.0) as u8;
        }
        out
    }
}

/// RGBA8 tile placed at a screen rectangle.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubImage {
    /// Tree node the tile was rendered for.
    pub node: usize,
    pub x0: usize,
    pub y0: usize,
    pub w: usize,
    pub h: usize,
    pub pixels: Vec<u8>,
}

impl SubImage {
    pub fn blank(node: usize, x0: usize, y0: usize, w: usize, h: usize) -> Self {
        Self {
            node,
            x0,
            y0,
            w,
            h,
            pixels: vec![0; 4 * w * h],
        }
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 4] {
        let k = 4 * (y * self.w + x);
        self.pixels[k..k + 4].try_into().expect("four channels")
    }

    /// Copy `tile` into place; `tile` must lie inside `self`.
    pub fn blit(&mut self, tile: &SubImage) {
        assert!(
            tile.x0 >= self.x0
                && tile.y0 >= self.y0
                && tile.x0 + tile.w <= self.x0 + self.w
                && tile.y0 + tile.h <= self.y0 + self.h,
            "tile outside target"
        );
        let dx = tile.x0 - self.x0;
        for row in 0..tile.h {
            let dst = 4 * ((tile.y0 - self.y0 + row) * self.w + dx);
            let src = 4 * row * tile.w;
            self.pixels[dst..dst + 4 * tile.w].copy_from_slice(&tile.pixels[src..src + 4 * tile.w]);
        }
    }
}

/// Screen rectangle `(x0, y0, w, h)` of a cell rectangle.
pub fn screen_rect(rect: &Rect, ny: usize, px_per_cell: usize) -> (usize, usize, usize, usize) {
    (
        rect.x0 * px_per_cell,
        (ny - rect.y1()) * px_per_cell,
        rect.w * px_per_cell,
        rect.h * px_per_cell,
    )
}

/// Render the cells of `rect` as `px_per_cell²` blocks. Values are clamped
/// to `range`; solid cells get [`OBSTACLE_COLOR`].
pub fn color_map(
    field: &ScalarField,
    rect: &Rect,
    range: (f64, f64),
    map: &Colormap,
    px_per_cell: usize,
) -> Result<SubImage, VizError> {
    let (lo, hi) = range;
    if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
        return Err(VizError::BadRange(lo, hi));
    }
    map.validate()?;
    let ppc = px_per_cell.max(1);
    let (x0, y0, w, h) = screen_rect(rect, field.ny, ppc);
    let mut img = SubImage::blank(0, x0, y0, w, h);
    for row in 0..h {
        let j = rect.y1() - 1 - row / ppc;
        for col in 0..w {
            let i = rect.x0 + col / ppc;
            let c = j * field.nx + i;
            let rgba = if field.solid[c] {
                OBSTACLE_COLOR
            } else {
                map.eval((field.values[c] - lo) / (hi - lo))
            };
            let k = 4 * (row * w + col);
            img.pixels[k..k + 4].copy_from_slice(&rgba);
        }
    }
    Ok(img)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolylineKind {
    Iso,
    Streamline,
    StreambandEdge,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polyline {
    pub kind: PolylineKind,
    /// Iso value or seed index.
    pub tag: f64,
    pub points: Vec<[f64; 2]>,
}

pub fn polylines_to_json(lines: &[Polyline]) -> String {
    serde_json::to_string(lines).expect("polylines serialize")
}

/// Binary PPM (P6); alpha is dropped.
pub fn write_ppm(mut out: impl Write, w: usize, h: usize, rgba: &[u8]) -> io::Result<()> {
    assert_eq!(rgba.len(), 4 * w * h);
    write!(out, "P6\n{w} {h}\n255\n")?;
    let rgb: Vec<u8> = rgba.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect();
    out.write_all(&rgb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn colormap_validation() {
        assert!(Colormap::new("x", vec![(0.0, [0; 4])]).is_err());
        assert!(Colormap::new("x", vec![(0.1, [0; 4]), (1.0, [0; 4])]).is_err());
        assert!(Colormap::new("x", vec![(0.0, [0; 4]), (0.0, [0; 4]), (1.0, [0; 4])]).is_err());
        Colormap::diverging().validate().unwrap();
    }

    #[test]
    fn constant_fields_give_end_stops() {
        let map = Colormap::diverging();
        let rect = Rect::new(0, 0, 4, 3);
        let lo = color_map(&ScalarField::new(4, 3, vec![-1.0; 12]), &rect, (-1.0, 2.0), &map, 2).unwrap();
        assert_eq!((lo.w, lo.h), (8, 6));
        assert!(lo.pixels.chunks(4).all(|p| p == map.stops[0].1));
        let hi = color_map(&ScalarField::new(4, 3, vec![2.0; 12]), &rect, (-1.0, 2.0), &map, 2).unwrap();
        assert!(hi.pixels.chunks(4).all(|p| p == map.stops[2].1));
        assert!(color_map(&ScalarField::new(4, 3, vec![0.0; 12]), &rect, (1.0, 1.0), &map, 1).is_err());
    }

    #[test]
    fn ramp_matches_pixelwise_interpolation() {
        let map = Colormap::diverging();
        let field = ScalarField::from_fn(16, 4, |x, _| x);
        let img = color_map(&field, &Rect::new(0, 0, 16, 4), (0.0, 1.0), &map, 3).unwrap();
        for col in 0..img.w {
            let t = (col / 3) as f64 / 16.0 + 0.5 / 16.0;
            // Independent evaluation: find the segment by comparison.
            let (a, ca, b, cb) = if t <= 0.5 {
                (0.0, map.stops[0].1, 0.5, map.stops[1].1)
            } else {
                (0.5, map.stops[1].1, 1.0, map.stops[2].1)
            };
            let s = (t - a) / (b - a);
            let expect: Vec<u8> = (0..4)
                .map(|k| (ca[k] as f64 * (1.0 - s) + cb[k] as f64 * s).round() as u8)
                .collect();
            for row in 0..img.h {
                assert_eq!(img.pixel(col, row).to_vec(), expect, "col {col}");
            }
        }
    }

    #[test]
    fn grayscale_is_monotone_and_solids_are_gray() {
        let mut field = ScalarField::from_fn(32, 1, |x, _| x * x);
        field.solid[5] = true;
        let img = color_map(&field, &Rect::new(0, 0, 32, 1), (0.0, 1.0), &Colormap::grayscale(), 1).unwrap();
        assert_eq!(img.pixel(5, 0), OBSTACLE_COLOR);
        let reds: Vec<u8> = (0..32).filter(|&i| i != 5).map(|i| img.pixel(i, 0)[0]).collect();
        assert!(reds.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn tiles_are_crops_of_the_whole() {
        let field = ScalarField::from_fn(10, 6, |x, y| (7.0 * x).sin() + y);
        let map = Colormap::diverging();
        let whole = color_map(&field, &Rect::new(0, 0, 10, 6), (-1.0, 2.0), &map, 2).unwrap();
        let tile = color_map(&field, &Rect::new(3, 1, 4, 2), (-1.0, 2.0), &map, 2).unwrap();
        assert_eq!((tile.x0, tile.y0), (6, 6));
        for r in 0..tile.h {
            for c in 0..tile.w {
                assert_eq!(tile.pixel(c, r), whole.pixel(tile.x0 + c, tile.y0 + r));
            }
        }
    }

    #[test]
    fn ppm_header_and_size() {
        let mut buf = Vec::new();
        write_ppm(&mut buf, 2, 1, &[1, 2, 3, 255, 4, 5, 6, 255]).unwrap();
        assert_eq!(&buf[..11], b"P6\n2 1\n255\n");
        assert_eq!(&buf[11..], &[1, 2, 3, 4, 5, 6]);
    }

    #[test]
    fn polyline_json_layout() {
        let json = polylines_to_json(&[Polyline {
            kind: PolylineKind::StreambandEdge,
            tag: 1.0,
            points: vec![[0.0, 0.5], [1.0, 0.5]],
        }]);
        assert_eq!(json, r#"[{"kind":"streamband_edge","tag":1.0,"points":[[0.0,0.5],[1.0,0.5]]}]"#);
    }
}
