//! Deterministic 2-D rendering of symbolic panels.

use super::{ObjectSpec, SymbolicPanel, COLORS};
use crate::image::PanelImage;

/// Smallest supported panel edge.
pub const MIN_SIZE: usize = 48;

/// Object radius as a fraction of the cell edge for size codes 0..2.
pub const RADIUS: [f64; 3] = [0.25, 0.35, 0.45];

/// Gray level of a color code: evenly spaced from black to 0.8, stored at
/// byte precision so images survive serialisation unchanged.
pub fn gray(color: u8) -> f32 {
    let v = color as f64 * 0.8 / (COLORS - 1) as f64;
    ((v * 255.0).round() / 255.0) as f32
}

fn covers(o: &ObjectSpec, h: usize, w: usize, y: usize, x: usize) -> bool {
    let (ch, cw) = (h as f64 / 3.0, w as f64 / 3.0);
    let cy = (o.cell / 3) as f64 * ch + ch / 2.0;
    let cx = (o.cell % 3) as f64 * cw + cw / 2.0;
    let r = RADIUS[o.size as usize] * ch.min(cw);
    let dy = y as f64 + 0.5 - cy;
    let dx = x as f64 + 0.5 - cx;
    match o.shape {
        0 => dx.abs() <= 0.8 * r && dy.abs() <= 0.8 * r,
        1 => dx * dx + dy * dy <= r * r,
        // Upward triangle inscribed in the radius-r circle.
        _ => dy >= -r && dy <= r / 2.0 && dx.abs() <= (dy + r) / 3f64.sqrt(),
    }
}

/// Renders filled shapes on a white background.
pub fn rasterize(panel: &SymbolicPanel, h: usize, w: usize) -> PanelImage {
    let mut img = PanelImage::filled(h, w, 1, 1.0);
    for o in &panel.objects {
        let g = gray(o.color);
        for y in 0..h {
            for x in 0..w {
                if covers(o, h, w, y, x) {
                    img.set(0, y, x, g);
                }
            }
        }
    }
    img
}

/// Pixel coverage of each object, in the panel's object order.
pub fn object_masks(panel: &SymbolicPanel, h: usize, w: usize) -> Vec<Vec<bool>> {
    panel
        .objects
        .iter()
        .map(|o| (0..h * w).map(|p| covers(o, h, w, p / w, p % w)).collect())
        .collect()
}
