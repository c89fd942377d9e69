//! Dense convolution kernels lowered onto GEMM through im2col / col2im.
//!
//! Everything works on volumes laid out as `[channels, depth, height, width]`;
//! 2D maps are volumes with depth 1.

/// Kernel, stride and zero-padding per spatial axis (depth, height, width).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
}

impl ConvGeom {
    /// Output extent of a forward convolution, `None` when the kernel does not fit.
    pub fn conv_out(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.padding[a];
            if self.stride[a] == 0 || self.kernel[a] == 0 || padded < self.kernel[a] {
                return None;
            }
            out[a] = (padded - self.kernel[a]) / self.stride[a] + 1;
        }
        Some(out)
    }

    pub fn kernel_volume(&self) -> usize {
        self.kernel.iter().product()
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` on dense row-major matrices.
///
/// `a` is `m x k` (or `k x m` when `trans_a`), `b` is `k x n` (or `n x k` when
/// `trans_b`), `c` is `m x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs size");
    assert_eq!(b.len(), k * n, "gemm: rhs size");
    assert_eq!(c.len(), m * n, "gemm: out size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    // SAFETY: slice lengths were checked above against the strides used here.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Unfolds `image` (`channels x image_dims`) into a `[channels * K, grid]` matrix,
/// where `grid` enumerates the sliding-window positions `grid_dims`.
pub fn im2col(
    image: &[f64],
    channels: usize,
    image_dims: [usize; 3],
    geom: &ConvGeom,
    grid_dims: [usize; 3],
) -> Vec<f64> {
    let [id, ih, iw] = image_dims;
    let [gd, gh, gw] = grid_dims;
    let [kd, kh, kw] = geom.kernel;
    let [sd, sh, sw] = geom.stride;
    let [pd, ph, pw] = geom.padding;
    let grid = gd * gh * gw;
    let mut cols = vec![0.0; channels * kd * kh * kw * grid];
    let mut row = 0;
    for c in 0..channels {
        let plane = &image[c * id * ih * iw..(c + 1) * id * ih * iw];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let out = &mut cols[row * grid..(row + 1) * grid];
                    for z in 0..gd {
                        let zi = (z * sd + a) as isize - pd as isize;
                        if zi < 0 || zi >= id as isize {
                            continue;
                        }
                        for y in 0..gh {
                            let yi = (y * sh + b) as isize - ph as isize;
                            if yi < 0 || yi >= ih as isize {
                                continue;
                            }
                            let src = (zi as usize * ih + yi as usize) * iw;
                            let dst = (z * gh + y) * gw;
                            for x in 0..gw {
                                let xi = (x * sw + e) as isize - pw as isize;
                                if xi >= 0 && xi < iw as isize {
                                    out[dst + x] = plane[src + xi as usize];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: accumulates a `[channels * K, grid]` matrix back into `image`.
pub fn col2im_add(
    cols: &[f64],
    channels: usize,
    image_dims: [usize; 3],
    geom: &ConvGeom,
    grid_dims: [usize; 3],
    image: &mut [f64],
) {
    let [id, ih, iw] = image_dims;
    let [gd, gh, gw] = grid_dims;
    let [kd, kh, kw] = geom.kernel;
    let [sd, sh, sw] = geom.stride;
    let [pd, ph, pw] = geom.padding;
    let grid = gd * gh * gw;
    let mut row = 0;
    for c in 0..channels {
        let plane = &mut image[c * id * ih * iw..(c + 1) * id * ih * iw];
        for a in 0..kd {
            for b in 0..kh {
                for e in 0..kw {
                    let src_row = &cols[row * grid..(row + 1) * grid];
                    for z in 0..gd {
                        let zi = (z * sd + a) as isize - pd as isize;
                        if zi < 0 || zi >= id as isize {
                            continue;
                        }
                        for y in 0..gh {
                            let yi = (y * sh + b) as isize - ph as isize;
                            if yi < 0 || yi >= ih as isize {
                                continue;
                            }
                            let dst = (zi as usize * ih + yi as usize) * iw;
                            let src = (z * gh + y) * gw;
                            for x in 0..gw {
                                let xi = (x * sw + e) as isize - pw as isize;
                                if xi >= 0 && xi < iw as isize {
                                    plane[dst + xi as usize] += src_row[src + x];
                                }
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}
