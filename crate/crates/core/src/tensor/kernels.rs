//! Plain loops for the dense products and the im2col transform behind conv2d.
//! All reductions run in a fixed index order so results are bit-reproducible.

/// `out[m,n] += a[m,k] * b[k,n]`
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a[i * k + p];
            if aip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
}

/// `out[m,n] += a[m,k] * b[n,k]ᵀ`
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out[m,n] += a[k,m]ᵀ * b[k,n]`
pub fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], out: &mut [f64]) {
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let api = a[p * m + i];
            if api == 0.0 {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += api * bv;
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one `[C,H,W]` image into columns `[C*kh*kw, out_h*out_w]`.
pub fn im2col(img: &[f64], geo: &ConvGeometry, cols: &mut [f64]) {
    let ol = geo.out_len();
    for c in 0..geo.channels {
        for ki in 0..geo.kh {
            for kj in 0..geo.kw {
                let row = (c * geo.kh + ki) * geo.kw + kj;
                let dst = &mut cols[row * ol..(row + 1) * ol];
                for oy in 0..geo.out_h {
                    let iy = (oy * geo.stride + ki) as isize - geo.pad as isize;
                    for ox in 0..geo.out_w {
                        let ix = (ox * geo.stride + kj) as isize - geo.pad as isize;
                        dst[oy * geo.out_w + ox] = if iy >= 0
                            && ix >= 0
                            && (iy as usize) < geo.height
                            && (ix as usize) < geo.width
                        {
                            img[(c * geo.height + iy as usize) * geo.width + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the image.
pub fn col2im(cols: &[f64], geo: &ConvGeometry, img: &mut [f64]) {
    let ol = geo.out_len();
    for c in 0..geo.channels {
        for ki in 0..geo.kh {
            for kj in 0..geo.kw {
                let row = (c * geo.kh + ki) * geo.kw + kj;
                let src = &cols[row * ol..(row + 1) * ol];
                for oy in 0..geo.out_h {
                    let iy = (oy * geo.stride + ki) as isize - geo.pad as isize;
                    if iy < 0 || iy as usize >= geo.height {
                        continue;
                    }
                    for ox in 0..geo.out_w {
                        let ix = (ox * geo.stride + kj) as isize - geo.pad as isize;
                        if ix < 0 || ix as usize >= geo.width {
                            continue;
                        }
                        img[(c * geo.height + iy as usize) * geo.width + ix as usize] +=
                            src[oy * geo.out_w + ox];
                    }
                }
            }
        }
    }
}
