use rand::Rng;

use crate::tensor::Tensor;

/// Border added on each side before a random crop.
pub const CROP_PAD: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Augmentation {
    /// Reflect-pad by [`CROP_PAD`] and crop back to the native size at a random offset.
    pub crop_pad4: bool,
    /// Mirror horizontally with probability one half.
    pub hflip: bool,
}

impl Augmentation {
    pub fn standard() -> Self {
        Self {
            crop_pad4: true,
            hflip: true,
        }
    }

    pub fn any(&self) -> bool {
        self.crop_pad4 || self.hflip
    }
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    r.clamp(0, n - 1) as usize
}

/// Crop of the reflect-padded image whose top-left corner sits at `(oy, ox)`
/// in padded coordinates; `(pad, pad)` is the identity.
pub fn reflect_crop(
    img: &[f64],
    channels: usize,
    height: usize,
    width: usize,
    oy: usize,
    ox: usize,
    pad: usize,
) -> Vec<f64> {
    let mut out = Vec::with_capacity(img.len());
    for c in 0..channels {
        let plane = &img[c * height * width..(c + 1) * height * width];
        for y in 0..height {
            let sy = reflect((y + oy) as isize - pad as isize, height);
            for x in 0..width {
                let sx = reflect((x + ox) as isize - pad as isize, width);
                out.push(plane[sy * width + sx]);
            }
        }
    }
    out
}

pub fn hflip_image(img: &mut [f64], channels: usize, height: usize, width: usize) {
    for row in img[..channels * height * width].chunks_mut(width) {
        row.reverse();
    }
}

/// Applies the enabled transforms to every image of a `[B, C, H, W]` batch.
/// Per image, the crop offset is drawn before the flip coin.
pub fn augment<R: Rng + ?Sized>(x: &Tensor, flags: Augmentation, rng: &mut R) -> Tensor {
    let s = x.shape();
    let (c, h, w) = (s[1], s[2], s[3]);
    let n = c * h * w;
    let mut data = Vec::with_capacity(x.len());
    for img in x.data().chunks(n) {
        let mut out = if flags.crop_pad4 {
            let oy = rng.random_range(0..=2 * CROP_PAD);
            let ox = rng.random_range(0..=2 * CROP_PAD);
            reflect_crop(img, c, h, w, oy, ox, CROP_PAD)
        } else {
            img.to_vec()
        };
        if flags.hflip && rng.random_bool(0.5) {
            hflip_image(&mut out, c, h, w);
        }
        data.extend(out);
    }
    Tensor::from_parts(s.to_vec(), data)
}
