//! Direct 2-D convolution (cross-correlation) and its gradients.
//!
//! Loops are arranged so the innermost pass runs over contiguous row
//! slices; at desk-scale image sizes this is fast enough without any
//! FFT or im2col machinery.

use super::tensor::Tensor;
use crate::error::{Error, Result};

fn conv_dims(
    input: &Tensor,
    kernel: &Tensor,
    padding: usize,
) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    let (c_in, h, w) = input.dims3()?;
    let kshape = kernel.shape();
    if kshape.len() != 4 {
        return Err(Error::Dimension(format!(
            "kernel must be rank 4 [C_out, C_in, k, k], got {:?}",
            kshape
        )));
    }
    let (c_out, kc_in, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
    if kc_in != c_in {
        return Err(Error::ShapeMismatch(format!(
            "kernel expects {} input channels, input has {}",
            kc_in, c_in
        )));
    }
    if kh != kw {
        return Err(Error::Dimension(format!(
            "only square kernels supported, got {}x{}",
            kh, kw
        )));
    }
    if kh % 2 == 0 {
        return Err(Error::Dimension(format!("kernel size {} must be odd", kh)));
    }
    let out_h = (h + 2 * padding).checked_sub(kh - 1).unwrap_or(0);
    let out_w = (w + 2 * padding).checked_sub(kw - 1).unwrap_or(0);
    if out_h == 0 || out_w == 0 {
        return Err(Error::Dimension(format!(
            "kernel {}x{} with padding {} does not fit input {}x{}",
            kh, kw, padding, h, w
        )));
    }
    Ok((c_in, h, w, c_out, kh, out_h, out_w))
}

/// Convolve `input [C_in, H, W]` with `kernel [C_out, C_in, k, k]`.
///
/// With `padding = (k - 1) / 2` the spatial size is preserved. The
/// operation is linear in the input.
pub fn conv2d(input: &Tensor, kernel: &Tensor, padding: usize) -> Result<Tensor> {
    let (c_in, h, w, c_out, k, out_h, out_w) = conv_dims(input, kernel, padding)?;
    let inp = input.data();
    let ker = kernel.data();
    let mut out = vec![0.0; c_out * out_h * out_w];

    for oc in 0..c_out {
        for ic in 0..c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let wgt = ker[((oc * c_in + ic) * k + ky) * k + kx];
                    if wgt == 0.0 {
                        continue;
                    }
                    // ix = ox + kx - padding must land in [0, w)
                    let ox_start = padding.saturating_sub(kx);
                    let ox_end = (w + padding - kx).min(out_w);
                    if ox_start >= ox_end {
                        continue;
                    }
                    let len = ox_end - ox_start;
                    let ix_start = ox_start + kx - padding;
                    for oy in 0..out_h {
                        let iy = oy + ky;
                        if iy < padding || iy - padding >= h {
                            continue;
                        }
                        let iy = iy - padding;
                        let src = &inp[(ic * h + iy) * w + ix_start..][..len];
                        let dst = &mut out[(oc * out_h + oy) * out_w + ox_start..][..len];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wgt * s;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![c_out, out_h, out_w], out)
}

/// Gradients of `conv2d` with respect to the input and the kernel, given the
/// gradient of the loss with respect to the output.
pub fn conv2d_grads(
    input: &Tensor,
    kernel: &Tensor,
    padding: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (c_in, h, w, c_out, k, out_h, out_w) = conv_dims(input, kernel, padding)?;
    let go_shape = grad_out.shape();
    if go_shape != [c_out, out_h, out_w] {
        return Err(Error::ShapeMismatch(format!(
            "grad_out shape {:?}, expected {:?}",
            go_shape,
            [c_out, out_h, out_w]
        )));
    }
    let inp = input.data();
    let ker = kernel.data();
    let go = grad_out.data();
    let mut d_in = vec![0.0; c_in * h * w];
    let mut d_ker = vec![0.0; c_out * c_in * k * k];

    for oc in 0..c_out {
        for ic in 0..c_in {
            for ky in 0..k {
                for kx in 0..k {
                    let wgt = ker[((oc * c_in + ic) * k + ky) * k + kx];
                    let ox_start = padding.saturating_sub(kx);
                    let ox_end = (w + padding - kx).min(out_w);
                    if ox_start >= ox_end {
                        continue;
                    }
                    let len = ox_end - ox_start;
                    let ix_start = ox_start + kx - padding;
                    let mut acc = 0.0;
                    for oy in 0..out_h {
                        let iy = oy + ky;
                        if iy < padding || iy - padding >= h {
                            continue;
                        }
                        let iy = iy - padding;
                        let go_row = &go[(oc * out_h + oy) * out_w + ox_start..][..len];
                        let in_row = &inp[(ic * h + iy) * w + ix_start..][..len];
                        let din_row = &mut d_in[(ic * h + iy) * w + ix_start..][..len];
                        for ((di, g), x) in din_row.iter_mut().zip(go_row).zip(in_row) {
                            *di += wgt * g;
                            acc += g * x;
                        }
                    }
                    d_ker[((oc * c_in + ic) * k + ky) * k + kx] += acc;
                }
            }
        }
    }
    Ok((
        Tensor::new(vec![c_in, h, w], d_in)?,
        Tensor::new(vec![c_out, c_in, k, k], d_ker)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent sliding-window reference used as the test oracle.
    fn conv2d_naive(input: &Tensor, kernel: &Tensor, padding: usize) -> Tensor {
        let (c_in, h, w) = input.dims3().unwrap();
        let ks = kernel.shape();
        let (c_out, k) = (ks[0], ks[2]);
        let out_h = h + 2 * padding - k + 1;
        let out_w = w + 2 * padding - k + 1;
        let mut out = vec![0.0; c_out * out_h * out_w];
        for oc in 0..c_out {
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut acc = 0.0;
                    for ic in 0..c_in {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = oy as isize + ky as isize - padding as isize;
                                let ix = ox as isize + kx as isize - padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += input.at3(ic, iy as usize, ix as usize)
                                    * kernel.data()[((oc * c_in + ic) * k + ky) * k + kx];
                            }
                        }
                    }
                    out[(oc * out_h + oy) * out_w + ox] = acc;
                }
            }
        }
        Tensor::new(vec![c_out, out_h, out_w], out).unwrap()
    }

    fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
        // Small deterministic LCG; good enough for structural tests.
        let n: usize = shape.iter().product();
        let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        let data = (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn identity_kernel_passthrough() {
        let input = rand_tensor(&[1, 3, 3], 7);
        let kernel = Tensor::new(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let out = conv2d(&input, &kernel, 0).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn zero_kernel_zero_output() {
        let input = rand_tensor(&[2, 4, 4], 3);
        let kernel = Tensor::zeros(&[3, 2, 3, 3]);
        let out = conv2d(&input, &kernel, 1).unwrap();
        assert!(out.data().iter().all(|&x| x == 0.0));
        assert_eq!(out.shape(), &[3, 4, 4]);
    }

    #[test]
    fn averaging_kernel_matches_sliding_window_oracle() {
        let input = Tensor::new(vec![1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let kernel = Tensor::new(vec![1, 1, 3, 3], vec![1.0 / 9.0; 9]).unwrap();
        let got = conv2d(&input, &kernel, 1).unwrap();
        let want = conv2d_naive(&input, &kernel, 1);
        assert_eq!(got.shape(), &[1, 2, 2]);
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-12, "{} vs {}", g, w);
        }
        // Pinned values from the oracle: same-padded 3x3 average of
        // [[1,2],[3,4]] sums the in-bounds neighborhood / 9.
        let expect = [10.0 / 9.0, 10.0 / 9.0, 10.0 / 9.0, 10.0 / 9.0];
        for (g, e) in got.data().iter().zip(expect) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_oracle_on_random_shapes() {
        for (ci, co, k, h, w, p, seed) in [
            (1, 1, 3, 5, 5, 1, 1u64),
            (2, 3, 3, 6, 4, 1, 2),
            (3, 2, 5, 8, 8, 2, 3),
            (1, 4, 1, 4, 7, 0, 4),
        ] {
            let input = rand_tensor(&[ci, h, w], seed);
            let kernel = rand_tensor(&[co, ci, k, k], seed + 100);
            let got = conv2d(&input, &kernel, p).unwrap();
            let want = conv2d_naive(&input, &kernel, p);
            assert_eq!(got.shape(), want.shape());
            for (g, w) in got.data().iter().zip(want.data()) {
                assert!((g - w).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn conv_is_linear() {
        let u = rand_tensor(&[2, 6, 6], 10);
        let v = rand_tensor(&[2, 6, 6], 11);
        let kernel = rand_tensor(&[3, 2, 3, 3], 12);
        let (a, b) = (0.7, -1.3);
        let combo = u.zip_with(&v, |x, y| a * x + b * y).unwrap();
        let lhs = conv2d(&combo, &kernel, 1).unwrap();
        let rhs = conv2d(&u, &kernel, 1)
            .unwrap()
            .scale(a)
            .zip_with(&conv2d(&v, &kernel, 1).unwrap().scale(b), |x, y| x + y)
            .unwrap();
        for (l, r) in lhs.data().iter().zip(rhs.data()) {
            assert!((l - r).abs() < 1e-10);
        }
    }

    #[test]
    fn rejects_channel_mismatch() {
        let input = Tensor::zeros(&[2, 4, 4]);
        let kernel = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(conv2d(&input, &kernel, 1).is_err());
    }
}
