//! 3x3 same-padded stride-1 convolution on planar (`CHW`) buffers.

/// Row span `[lo, hi)` of output positions whose tap at offset `d` stays in bounds.
#[inline]
fn span(len: usize, d: isize) -> (usize, usize) {
    let lo = if d < 0 { (-d) as usize } else { 0 };
    let hi = if d > 0 { len - d as usize } else { len };
    (lo, hi)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn forward(
    input: &[f64],
    in_ch: usize,
    height: usize,
    width: usize,
    weight: &[f64],
    bias: &[f64],
    out_ch: usize,
    out: &mut [f64],
) {
    let hw = height * width;
    debug_assert_eq!(input.len(), in_ch * hw);
    debug_assert_eq!(out.len(), out_ch * hw);
    for o in 0..out_ch {
        let out_plane = &mut out[o * hw..(o + 1) * hw];
        out_plane.fill(bias[o]);
        for i in 0..in_ch {
            let in_plane = &input[i * hw..(i + 1) * hw];
            let kernel = &weight[(o * in_ch + i) * 9..(o * in_ch + i + 1) * 9];
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (y0, y1) = span(height, dy);
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let (x0, x1) = span(width, dx);
                    let wv = kernel[ky * 3 + kx];
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let sx0 = (x0 as isize + dx) as usize;
                        let dst = &mut out_plane[y * width + x0..y * width + x1];
                        let src = &in_plane[sy * width + sx0..sy * width + sx0 + (x1 - x0)];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates weight and bias gradients, and the input gradient when requested.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    input: &[f64],
    in_ch: usize,
    height: usize,
    width: usize,
    weight: &[f64],
    out_ch: usize,
    grad_out: &[f64],
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
    mut grad_input: Option<&mut [f64]>,
) {
    let hw = height * width;
    for o in 0..out_ch {
        let g_plane = &grad_out[o * hw..(o + 1) * hw];
        grad_bias[o] += g_plane.iter().sum::<f64>();
        for i in 0..in_ch {
            let in_plane = &input[i * hw..(i + 1) * hw];
            let k_base = (o * in_ch + i) * 9;
            for ky in 0..3 {
                let dy = ky as isize - 1;
                let (y0, y1) = span(height, dy);
                for kx in 0..3 {
                    let dx = kx as isize - 1;
                    let (x0, x1) = span(width, dx);
                    let n = x1 - x0;
                    let sx0 = (x0 as isize + dx) as usize;
                    let wv = weight[k_base + ky * 3 + kx];
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let g = &g_plane[y * width + x0..y * width + x1];
                        let src = &in_plane[sy * width + sx0..sy * width + sx0 + n];
                        acc += g.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                    }
                    grad_weight[k_base + ky * 3 + kx] += acc;
                    if let Some(gi) = grad_input.as_deref_mut() {
                        let gi_plane = &mut gi[i * hw..(i + 1) * hw];
                        for y in y0..y1 {
                            let sy = (y as isize + dy) as usize;
                            let g = &g_plane[y * width + x0..y * width + x1];
                            let dst = &mut gi_plane[sy * width + sx0..sy * width + sx0 + n];
                            for (d, gv) in dst.iter_mut().zip(g) {
                                *d += wv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
}
