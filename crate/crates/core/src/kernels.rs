//! Slice-level kernels behind the graph operations.

use crate::scalar::Scalar;
use crate::tensor::strides;

/// Output extent of a 3x3, padding-1 convolution.
pub fn conv_out_extent(extent: usize, stride: usize) -> usize {
    (extent + 2 - 3) / stride + 1
}

/// Unfolds `x` (B, C, H, W) into rows of 3x3 patches.
///
/// Result is `[B * Ho * Wo, C * 9]`, one row per output position, columns
/// ordered `(c, ky, kx)`. Out-of-image taps read as zero.
pub fn im2col3x3<S: Scalar>(x: &[S], b: usize, c: usize, h: usize, w: usize, stride: usize) -> Vec<S> {
    let (ho, wo) = (conv_out_extent(h, stride), conv_out_extent(w, stride));
    let cols = c * 9;
    let mut out = vec![S::zero(); b * ho * wo * cols];
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((bi * ho + oy) * wo + ox) * cols;
                for ci in 0..c {
                    let plane = &x[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
                    for ky in 0..3 {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                        for kx in 0..3 {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                out[row + ci * 9 + ky * 3 + kx] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col3x3`]: scatter-adds patch rows back into `dx`.
pub fn col2im3x3<S: Scalar>(cols_grad: &[S], b: usize, c: usize, h: usize, w: usize, stride: usize, dx: &mut [S]) {
    let (ho, wo) = (conv_out_extent(h, stride), conv_out_extent(w, stride));
    let cols = c * 9;
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((bi * ho + oy) * wo + ox) * cols;
                for ci in 0..c {
                    let base = (bi * c + ci) * h * w;
                    for ky in 0..3 {
                        let iy = (oy * stride + ky) as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = (ox * stride + kx) as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                dx[base + iy as usize * w + ix as usize] += cols_grad[row + ci * 9 + ky * 3 + kx];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Per-channel 3x3 cross-correlation, stride 1, padding 1.
///
/// `x` is (B, C, H, W); `kernel` holds `C * groups` 3x3 filters and batch item
/// `b` uses the block of `C` filters starting at `(b % groups) * C`.
pub fn depthwise3x3<S: Scalar>(
    x: &[S],
    kernel: &[S],
    dims: [usize; 4],
    groups: usize,
    out: &mut [S],
) {
    let [b, c, h, w] = dims;
    for bi in 0..b {
        for ci in 0..c {
            let kc = ((bi % groups) * c + ci) * 9;
            let k = &kernel[kc..kc + 9];
            let base = (bi * c + ci) * h * w;
            for y in 0..h {
                for xx in 0..w {
                    let mut acc = S::zero();
                    for ky in 0..3 {
                        let iy = y as isize + ky as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = xx as isize + kx as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                acc += k[ky * 3 + kx] * x[base + iy as usize * w + ix as usize];
                            }
                        }
                    }
                    out[base + y * w + xx] = acc;
                }
            }
        }
    }
}

/// Adjoint of [`depthwise3x3`] with respect to input and/or kernel.
pub fn depthwise3x3_backward<S: Scalar>(
    x: &[S],
    kernel: &[S],
    grad: &[S],
    dims: [usize; 4],
    groups: usize,
    mut dx: Option<&mut [S]>,
    mut dk: Option<&mut [S]>,
) {
    let [b, c, h, w] = dims;
    for bi in 0..b {
        for ci in 0..c {
            let kc = ((bi % groups) * c + ci) * 9;
            let base = (bi * c + ci) * h * w;
            for y in 0..h {
                for xx in 0..w {
                    let g = grad[base + y * w + xx];
                    if g == S::zero() {
                        continue;
                    }
                    for ky in 0..3 {
                        let iy = y as isize + ky as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..3 {
                            let ix = xx as isize + kx as isize - 1;
                            if ix >= 0 && ix < w as isize {
                                let src = base + iy as usize * w + ix as usize;
                                if let Some(dx) = dx.as_deref_mut() {
                                    dx[src] += g * kernel[kc + ky * 3 + kx];
                                }
                                if let Some(dk) = dk.as_deref_mut() {
                                    dk[kc + ky * 3 + kx] += g * x[src];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Reorders axes: output axis `i` is input axis `axes[i]`.
pub fn permute<S: Copy>(data: &[S], shape: &[usize], axes: &[usize]) -> Vec<S> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    let inner = out_shape[rank - 1];
    let inner_step = step[rank - 1];
    'outer: loop {
        let mut o = offset;
        for _ in 0..inner {
            out.push(data[o]);
            o += inner_step;
        }
        let mut d = rank - 1;
        loop {
            if d == 0 {
                break 'outer;
            }
            d -= 1;
            idx[d] += 1;
            offset += step[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= step[d] * idx[d];
            idx[d] = 0;
        }
    }
    out
}

pub fn inverse_axes(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_matches_index_formula() {
        let shape = [2, 3, 4];
        let data: Vec<usize> = (0..24).collect();
        let out = permute(&data, &shape, &[2, 0, 1]);
        // out[k, i, j] = in[i, j, k]
        for k in 0..4 {
            for i in 0..2 {
                for j in 0..3 {
                    assert_eq!(out[(k * 2 + i) * 3 + j], data[(i * 3 + j) * 4 + k]);
                }
            }
        }
        let back = permute(&out, &[4, 2, 3], &inverse_axes(&[2, 0, 1]));
        assert_eq!(back, data);
    }

    #[test]
    fn permute_rank_one_is_copy() {
        assert_eq!(permute(&[1, 2, 3], &[3], &[0]), vec![1, 2, 3]);
    }

    #[test]
    fn conv_extent() {
        assert_eq!(conv_out_extent(32, 1), 32);
        assert_eq!(conv_out_extent(32, 2), 16);
        assert_eq!(conv_out_extent(16, 4), 4);
        assert_eq!(conv_out_extent(32, 8), 4);
        assert_eq!(conv_out_extent(1, 1), 1);
    }
}
