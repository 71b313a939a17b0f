//! Problem-level image augmentation.

use rand::Rng;

use crate::image::PanelImage;

/// One transform applied identically to every panel of a problem.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Augmentation {
    pub flip_h: bool,
    pub flip_v: bool,
    /// Counter-clockwise quarter turns, 0..=3.
    pub quarter_turns: u8,
    pub brightness: f32,
}

impl Augmentation {
    pub const IDENTITY: Augmentation = Augmentation { flip_h: false, flip_v: false, quarter_turns: 0, brightness: 1.0 };

    pub fn sample(rng: &mut impl Rng) -> Self {
        Self {
            flip_h: rng.random_bool(0.5),
            flip_v: rng.random_bool(0.5),
            quarter_turns: rng.random_range(0..4),
            brightness: rng.random_range(0.5..=1.5),
        }
    }

    /// Applies the transform to a square image.
    pub fn apply(&self, img: &PanelImage) -> PanelImage {
        let (h, w) = (img.height, img.width);
        let mut out = img.clone();
        for c in 0..img.channels {
            for y in 0..h {
                for x in 0..w {
                    // Source pixel for destination (y, x): undo rotation,
                    // then the flips.
                    let (mut sy, mut sx) = (y, x);
                    for _ in 0..self.quarter_turns {
                        // Inverse of a counter-clockwise quarter turn.
                        (sy, sx) = (sx, w - 1 - sy);
                    }
                    if self.flip_v {
                        sy = h - 1 - sy;
                    }
                    if self.flip_h {
                        sx = w - 1 - sx;
                    }
                    let p = img.get(c, sy, sx);
                    let v = p * self.brightness;
                    out.set(c, y, x, v.clamp(0.0, 1.0));
                }
            }
        }
        out
    }
}

/// Samples one transform and applies it to all panels. Non-square panels
/// are only flipped and brightness-shifted.
pub fn augment(images: &[PanelImage], rng: &mut impl Rng) -> Vec<PanelImage> {
    let mut t = Augmentation::sample(rng);
    if images.iter().any(|im| im.height != im.width) {
        t.quarter_turns = 0;
    }
    images.iter().map(|im| t.apply(im)).collect()
}
