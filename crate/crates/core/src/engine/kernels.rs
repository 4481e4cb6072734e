//! Raw forward/backward kernels over flat NCHW buffers.
//!
//! Everything here is shape-checked by the caller in `tape.rs`.

/// `c = alpha * op(a) * op(b) + beta * c` with explicit row/column strides.
///
/// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    a_strides: (usize, usize),
    b: &[f32],
    b_strides: (usize, usize),
    beta: f32,
    c: &mut [f32],
    c_strides: (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let span = |rows: usize, cols: usize, (rs, cs): (usize, usize)| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs + (cols - 1) * cs + 1
        }
    };
    assert!(a.len() >= span(m, k, a_strides), "gemm: lhs too short");
    assert!(b.len() >= span(k, n, b_strides), "gemm: rhs too short");
    assert!(c.len() >= span(m, n, c_strides), "gemm: output too short");
    // SAFETY: the asserts above bound every index touched by sgemm.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            c_strides.0 as isize,
            c_strides.1 as isize,
        );
    }
}

/// Unfolds one `(channels, h, w)` sample into a `(channels*k*k, h*w)` matrix
/// for a stride-1 convolution with zero padding `(k-1)/2`.
pub(crate) fn im2col(input: &[f32], channels: usize, h: usize, w: usize, k: usize, cols: &mut [f32]) {
    let pad = (k / 2) as isize;
    let plane = h * w;
    debug_assert_eq!(cols.len(), channels * k * k * plane);
    for c in 0..channels {
        let src = &input[c * plane..(c + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                // Valid output x-range for this tap: 0 <= x + dx < w.
                let x_lo = (-dx).max(0) as usize;
                let x_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out_row = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize || x_lo >= x_hi {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src_row = &src[sy as usize * w..(sy as usize + 1) * w];
                    out_row[..x_lo].fill(0.0);
                    out_row[x_hi..].fill(0.0);
                    let s0 = (x_lo as isize + dx) as usize;
                    out_row[x_lo..x_hi].copy_from_slice(&src_row[s0..s0 + (x_hi - x_lo)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a column matrix back onto the input grid.
pub(crate) fn col2im_add(cols: &[f32], channels: usize, h: usize, w: usize, k: usize, grad: &mut [f32]) {
    let pad = (k / 2) as isize;
    let plane = h * w;
    for c in 0..channels {
        let dst = &mut grad[c * plane..(c + 1) * plane];
        for ky in 0..k {
            for kx in 0..k {
                let row = (c * k + ky) * k + kx;
                let src = &cols[row * plane..(row + 1) * plane];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let x_lo = (-dx).max(0) as usize;
                let x_hi = ((w as isize - dx).min(w as isize)).max(0) as usize;
                if x_lo >= x_hi {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = (x_lo as isize + dx) as usize;
                    let d = &mut dst[sy as usize * w + s0..sy as usize * w + s0 + (x_hi - x_lo)];
                    let s = &src[y * w + x_lo..y * w + x_hi];
                    d.iter_mut().zip(s).for_each(|(a, b)| *a += b);
                }
            }
        }
    }
}

/// 2x2 stride-2 max pooling over `planes` planes of `h x w`. Records the flat
/// input index of each winner; ties go to the first element in scan order.
pub(crate) fn maxpool2_forward(input: &[f32], planes: usize, h: usize, w: usize, out: &mut [f32], argmax: &mut [u32]) {
    let (oh, ow) = (h / 2, w / 2);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let i0 = base + 2 * oy * w + 2 * ox;
                let candidates = [i0, i0 + 1, i0 + w, i0 + w + 1];
                let mut best = candidates[0];
                for &i in &candidates[1..] {
                    if input[i] > input[best] {
                        best = i;
                    }
                }
                let o = (p * oh + oy) * ow + ox;
                out[o] = input[best];
                argmax[o] = best as u32;
            }
        }
    }
}

/// Per-axis taps for 2x bilinear upsampling with half-pixel centers:
/// output `o` samples source coordinate `(o + 0.5) / 2 - 0.5`, clamped to the edge.
pub(crate) fn bilinear2_taps(len: usize) -> Vec<(usize, usize, f32)> {
    (0..2 * len)
        .map(|o| {
            let src = ((o as f32 + 0.5) * 0.5 - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            let frac = src - i0 as f32;
            (i0, i1, frac)
        })
        .collect()
}

pub(crate) fn upsample2_forward(input: &[f32], planes: usize, h: usize, w: usize, out: &mut [f32]) {
    let ty = bilinear2_taps(h);
    let tx = bilinear2_taps(w);
    let (oh, ow) = (2 * h, 2 * w);
    for p in 0..planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            let r0 = &src[y0 * w..(y0 + 1) * w];
            let r1 = &src[y1 * w..(y1 + 1) * w];
            let row = &mut dst[oy * ow..(oy + 1) * ow];
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = r0[x0] + fx * (r0[x1] - r0[x0]);
                let bottom = r1[x0] + fx * (r1[x1] - r1[x0]);
                row[ox] = top + fy * (bottom - top);
            }
        }
    }
}

/// Transpose of [`upsample2_forward`].
pub(crate) fn upsample2_backward(grad_out: &[f32], planes: usize, h: usize, w: usize, grad_in: &mut [f32]) {
    let ty = bilinear2_taps(h);
    let tx = bilinear2_taps(w);
    let (oh, ow) = (2 * h, 2 * w);
    for p in 0..planes {
        let g = &grad_out[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut grad_in[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = g[oy * ow + ox];
                let top = v * (1.0 - fy);
                let bottom = v * fy;
                dst[y0 * w + x0] += top * (1.0 - fx);
                dst[y0 * w + x1] += top * fx;
                dst[y1 * w + x0] += bottom * (1.0 - fx);
                dst[y1 * w + x1] += bottom * fx;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f32> = (0..m * k).map(|i| i as f32 * 0.5 - 1.0).collect();
        let b: Vec<f32> = (0..k * n).map(|i| (i % 7) as f32 - 2.0).collect();
        let mut c = vec![1.0; m * n];
        // a stored transposed (k x m), read with swapped strides.
        let mut at = vec![0.0; m * k];
        for i in 0..m {
            for j in 0..k {
                at[j * m + i] = a[i * k + j];
            }
        }
        gemm(m, k, n, 1.0, &at, (1, m), &b, (n, 1), 1.0, &mut c, (n, 1));
        for i in 0..m {
            for j in 0..n {
                let want: f32 = 1.0 + (0..k).map(|t| a[i * k + t] * b[t * n + j]).sum::<f32>();
                assert!((c[i * n + j] - want).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn im2col_and_col2im_are_adjoint() {
        let (ch, h, w, k) = (2, 4, 5, 3);
        let x: Vec<f32> = (0..ch * h * w).map(|i| ((i * 37) % 11) as f32 - 5.0).collect();
        let y: Vec<f32> = (0..ch * k * k * h * w).map(|i| ((i * 13) % 7) as f32 - 3.0).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, ch, h, w, k, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im_add(&y, ch, h, w, k, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        assert!((lhs - rhs).abs() < 1e-6);
    }

    #[test]
    fn upsample_backward_is_transpose() {
        let (h, w) = (3, 2);
        let x: Vec<f32> = (0..h * w).map(|i| i as f32 * 0.3 - 0.7).collect();
        let g: Vec<f32> = (0..4 * h * w).map(|i| ((i * 5) % 9) as f32 - 4.0).collect();
        let mut up = vec![0.0; 4 * h * w];
        upsample2_forward(&x, 1, h, w, &mut up);
        let mut back = vec![0.0; h * w];
        upsample2_backward(&g, 1, h, w, &mut back);
        let lhs: f64 = up.iter().zip(&g).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        assert!((lhs - rhs).abs() < 1e-5);
    }
}
