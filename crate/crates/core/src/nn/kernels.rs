//! Per-sample numeric kernels for the layer set.

/// `c = a * b + beta * c` where `a` is logically `m x k` and `b` is `k x n`,
/// each optionally stored transposed. All buffers are row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a stride-1, same-padded convolution.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
}

impl ConvGeom {
    fn pad(&self) -> isize {
        ((self.kernel - 1) / 2) as isize
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    /// Unfolds `input` (C x H x W) into `cols` (C*k*k x H*W).
    pub fn im2col(&self, input: &[f64], cols: &mut [f64]) {
        let (h, w, k, pad) = (self.height as isize, self.width as isize, self.kernel, self.pad());
        let hw = self.pixels();
        for c in 0..self.channels {
            let plane = &input[c * hw..(c + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((c * k + ky) * k + kx) * hw..][..hw];
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    for y in 0..h {
                        let sy = y + dy;
                        let out = &mut row[(y * w) as usize..((y + 1) * w) as usize];
                        if sy < 0 || sy >= h {
                            out.fill(0.0);
                            continue;
                        }
                        let src = &plane[(sy * w) as usize..((sy + 1) * w) as usize];
                        for x in 0..w {
                            let sx = x + dx;
                            out[x as usize] = if sx < 0 || sx >= w { 0.0 } else { src[sx as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`im2col`](Self::im2col): accumulates `cols` back into `grad`.
    pub fn col2im(&self, cols: &[f64], grad: &mut [f64]) {
        let (h, w, k, pad) = (self.height as isize, self.width as isize, self.kernel, self.pad());
        let hw = self.pixels();
        grad.fill(0.0);
        for c in 0..self.channels {
            let plane = &mut grad[c * hw..(c + 1) * hw];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((c * k + ky) * k + kx) * hw..][..hw];
                    let dy = ky as isize - pad;
                    let dx = kx as isize - pad;
                    for y in 0..h {
                        let sy = y + dy;
                        if sy < 0 || sy >= h {
                            continue;
                        }
                        let src = &row[(y * w) as usize..((y + 1) * w) as usize];
                        let dst = &mut plane[(sy * w) as usize..((sy + 1) * w) as usize];
                        for x in 0..w {
                            let sx = x + dx;
                            if sx >= 0 && sx < w {
                                dst[sx as usize] += src[x as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Non-overlapping max pooling; returns the argmax flat index per output cell.
pub(crate) fn maxpool_forward(
    input: &[f64],
    channels: usize,
    height: usize,
    width: usize,
    pool: usize,
    out: &mut [f64],
    argmax: &mut [usize],
) {
    let (oh, ow) = (height / pool, width / pool);
    for c in 0..channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best_idx = c * height * width + oy * pool * width + ox * pool;
                let mut best = input[best_idx];
                for py in 0..pool {
                    for px in 0..pool {
                        let idx = c * height * width + (oy * pool + py) * width + ox * pool + px;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                let o = (c * oh + oy) * ow + ox;
                out[o] = best;
                argmax[o] = best_idx;
            }
        }
    }
}

pub(crate) fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}
