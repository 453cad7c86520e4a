//! Fixed pre-mixing augmentation: random crop from a zero-padded image and horizontal flip.

use ndarray::{s, Array4, ArrayViewMut3};
use rand::Rng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimpleAugment {
    pub pad: usize,
    pub flip: bool,
}

impl Default for SimpleAugment {
    fn default() -> Self {
        SimpleAugment { pad: 4, flip: true }
    }
}

impl SimpleAugment {
    pub fn disabled() -> Self {
        SimpleAugment { pad: 0, flip: false }
    }

    pub fn is_identity(&self) -> bool {
        self.pad == 0 && !self.flip
    }

    /// Augment every image of an `(N, C, H, W)` batch in place.
    pub fn apply_batch<R: Rng + ?Sized>(&self, batch: &mut Array4<f32>, rng: &mut R) {
        if self.is_identity() {
            return;
        }
        for mut img in batch.outer_iter_mut() {
            self.apply(&mut img, rng);
        }
    }

    fn apply<R: Rng + ?Sized>(&self, img: &mut ArrayViewMut3<f32>, rng: &mut R) {
        let (_, h, w) = img.dim();
        if self.pad > 0 {
            let dy = rng.random_range(0..=2 * self.pad) as isize - self.pad as isize;
            let dx = rng.random_range(0..=2 * self.pad) as isize - self.pad as isize;
            if dx != 0 || dy != 0 {
                let src = img.to_owned();
                img.fill(0.0);
                // output (y, x) reads source (y + dy, x + dx); outside the source is padding
                let y0 = (-dy).max(0) as usize;
                let y1 = (h as isize - dy).min(h as isize).max(0) as usize;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                if y0 < y1 && x0 < x1 {
                    let sy0 = (y0 as isize + dy) as usize;
                    let sx0 = (x0 as isize + dx) as usize;
                    img.slice_mut(s![.., y0..y1, x0..x1])
                        .assign(&src.slice(s![.., sy0..sy0 + (y1 - y0), sx0..sx0 + (x1 - x0)]));
                }
            }
        }
        if self.flip && rng.random_bool(0.5) {
            let flipped = img.slice(s![.., .., ..;-1]).to_owned();
            img.assign(&flipped);
        }
    }
}
