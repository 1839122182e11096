use rand::Rng as _;

use crate::error::Result;
use crate::tensor::Tensor;
use crate::Rng;

/// Reflection padding used for random crops: 4, shrunk for maps too small to reflect that far.
pub fn crop_padding(h: usize, w: usize) -> usize {
    4.min(h.saturating_sub(1)).min(w.saturating_sub(1))
}

/// Mirror index into `0..n` without repeating the edge pixel.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * (n - 1) - i
    } else {
        i
    };
    r as usize
}

/// One C×H×W image, reflect-padded by `pad`, cropped at offset `(dy, dx)` of
/// the padded map and optionally mirrored left-right. `dy = dx = pad` without
/// a flip is the identity. `pad` must be below both `h` and `w`.
pub fn crop_flip(image: &[f32], shape: [usize; 3], pad: usize, dy: usize, dx: usize, flip: bool) -> Vec<f32> {
    let [c, h, w] = shape;
    let mut out = vec![0.0; image.len()];
    for ch in 0..c {
        let src = &image[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            let sy = reflect((y + dy) as isize - pad as isize, h);
            for x in 0..w {
                let cx = if flip { w - 1 - x } else { x };
                let sx = reflect((cx + dx) as isize - pad as isize, w);
                dst[y * w + x] = src[sy * w + sx];
            }
        }
    }
    out
}

/// Random crop and horizontal flip (p = 0.5) applied independently per image of a B×C×H×W batch.
pub fn augment(batch: &Tensor<f32>, rng: &mut Rng) -> Result<Tensor<f32>> {
    let (b, c, h, w) = batch.dims4()?;
    let pad = crop_padding(h, w);
    let per = c * h * w;
    let mut data = Vec::with_capacity(batch.numel());
    for i in 0..b {
        let dy = rng.random_range(0..=2 * pad);
        let dx = rng.random_range(0..=2 * pad);
        let flip = rng.random_bool(0.5);
        data.extend(crop_flip(&batch.data()[i * per..(i + 1) * per], [c, h, w], pad, dy, dx, flip));
    }
    Tensor::new(batch.shape().to_vec(), data)
}
