use super::{Real, Tensor};
use crate::error::{shape_err, Result};

/// Output extent of a convolution along one axis (floor semantics).
pub fn conv_output_size(size: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return shape_err("convolution stride must be positive");
    }
    if kernel == 0 || kernel > size + 2 * padding {
        return shape_err(format!(
            "kernel extent {kernel} does not fit input extent {size} with padding {padding}"
        ));
    }
    Ok((size + 2 * padding - kernel) / stride + 1)
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn new<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, stride: usize, pad: usize) -> Result<Self> {
        let (batch, cin, h, w) = input.dims4()?;
        let (cout, wcin, kh, kw) = weight.dims4()?;
        if wcin != cin {
            return shape_err(format!(
                "conv weight expects {wcin} input channels, input has {cin}"
            ));
        }
        let ho = conv_output_size(h, kh, stride, pad)?;
        let wo = conv_output_size(w, kw, stride, pad)?;
        Ok(Self { batch, cin, h, w, cout, kh, kw, stride, pad, ho, wo })
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.cout, self.ho, self.wo]
    }
}

fn im2col<T: Real>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let p = g.positions();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize { T::zero() } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.positions();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let line = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            line[ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation with zero padding, `input` B×Cin×H×W, `weight` Cout×Cin×Kh×Kw.
pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input, weight, stride, padding)?;
    Ok(conv2d_geom(input, weight, &g))
}

pub(crate) fn conv2d_geom<T: Real>(input: &Tensor<T>, weight: &Tensor<T>, g: &ConvGeom) -> Tensor<T> {
    let (k, p) = (g.patch(), g.positions());
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * p;
    let mut out = vec![T::zero(); g.batch * out_len];
    let mut cols = vec![T::zero(); k * p];
    for b in 0..g.batch {
        im2col(&input.data()[b * in_len..(b + 1) * in_len], g, &mut cols);
        T::gemm(
            g.cout,
            k,
            p,
            weight.data(),
            false,
            &cols,
            false,
            &mut out[b * out_len..(b + 1) * out_len],
            false,
        );
    }
    Tensor { shape: g.out_shape().to_vec(), data: out }
}

/// Returns `(d input, d weight)`; either may be skipped.
pub(crate) fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &[T],
    g: &ConvGeom,
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (k, p) = (g.patch(), g.positions());
    let in_len = g.cin * g.h * g.w;
    let out_len = g.cout * p;
    let mut dx = need_input.then(|| vec![T::zero(); input.numel()]);
    let mut dw = need_weight.then(|| vec![T::zero(); weight.numel()]);
    let mut cols = vec![T::zero(); k * p];
    for b in 0..g.batch {
        let go = &grad_out[b * out_len..(b + 1) * out_len];
        if let Some(dw) = dw.as_mut() {
            im2col(&input.data()[b * in_len..(b + 1) * in_len], g, &mut cols);
            // dW (Cout×K) += dY (Cout×P) · colsᵀ (P×K)
            T::gemm(g.cout, p, k, go, false, &cols, true, dw, true);
        }
        if let Some(dx) = dx.as_mut() {
            // dcols (K×P) = Wᵀ (K×Cout) · dY (Cout×P)
            T::gemm(k, g.cout, p, weight.data(), true, go, false, &mut cols, false);
            col2im(&cols, g, &mut dx[b * in_len..(b + 1) * in_len]);
        }
    }
    (dx, dw)
}
