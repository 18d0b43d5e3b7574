//! Raw slice kernels behind the tape operations. Shapes are validated by the
//! caller; everything here assumes consistent dimensions.

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn col_cols(&self) -> usize {
        self.oh * self.ow
    }
}

/// `c[m×n] = alpha·a[m×k]·b[k×n] + beta·c`, each operand given with explicit
/// row/column strides so transposes need no copy.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    debug_assert!(c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserted bounds cover every index sgemm touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

fn im2col(g: &ConvGeometry, image: &[f32], cols: &mut [f32]) {
    let ncols = g.col_cols();
    for ch in 0..g.c {
        let plane = &image[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeometry, cols: &[f32], image: &mut [f32]) {
    let ncols = g.col_cols();
    for ch in 0..g.c {
        let plane = &mut image[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ch * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in src[oy * g.ow..(oy + 1) * g.ow].iter().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeometry, input: &[f32], kernel: &[f32], bias: &[f32]) -> Vec<f32> {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let mut out = vec![0.0f32; g.n * g.f * ncols];
    let mut cols = if g.is_pointwise() {
        Vec::new()
    } else {
        vec![0.0f32; rows * ncols]
    };
    for b in 0..g.n {
        let image = &input[b * g.c * g.h * g.w..(b + 1) * g.c * g.h * g.w];
        let dst = &mut out[b * g.f * ncols..(b + 1) * g.f * ncols];
        for (fi, chunk) in dst.chunks_mut(ncols).enumerate() {
            chunk.fill(bias[fi]);
        }
        let src: &[f32] = if g.is_pointwise() {
            image
        } else {
            im2col(g, image, &mut cols);
            &cols
        };
        gemm(g.f, rows, ncols, kernel, (rows, 1), src, (ncols, 1), 1.0, dst, (ncols, 1));
    }
    out
}

/// Returns `(d_input, d_kernel, d_bias)`; entries for operands that need no
/// gradient are left empty.
pub(crate) fn conv2d_backward(
    g: &ConvGeometry,
    input: &[f32],
    kernel: &[f32],
    d_out: &[f32],
    need_input: bool,
    need_kernel: bool,
    need_bias: bool,
) -> (Vec<f32>, Vec<f32>, Vec<f32>) {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let mut d_input = if need_input { vec![0.0f32; input.len()] } else { Vec::new() };
    let mut d_kernel = if need_kernel { vec![0.0f32; kernel.len()] } else { Vec::new() };
    let mut d_bias = if need_bias { vec![0.0f32; g.f] } else { Vec::new() };
    let pointwise = g.is_pointwise();
    let mut cols = if pointwise { Vec::new() } else { vec![0.0f32; rows * ncols] };
    let mut d_cols = if pointwise || !need_input { Vec::new() } else { vec![0.0f32; rows * ncols] };

    for b in 0..g.n {
        let image = &input[b * g.c * g.h * g.w..(b + 1) * g.c * g.h * g.w];
        let grad = &d_out[b * g.f * ncols..(b + 1) * g.f * ncols];
        if need_bias {
            for (fi, chunk) in grad.chunks(ncols).enumerate() {
                d_bias[fi] += chunk.iter().sum::<f32>();
            }
        }
        if need_kernel {
            let src: &[f32] = if pointwise {
                image
            } else {
                im2col(g, image, &mut cols);
                &cols
            };
            // d_kernel[F×rows] += grad[F×ncols] · src^T[ncols×rows]
            gemm(g.f, ncols, rows, grad, (ncols, 1), src, (1, ncols), 1.0, &mut d_kernel, (rows, 1));
        }
        if need_input {
            let dst = &mut d_input[b * g.c * g.h * g.w..(b + 1) * g.c * g.h * g.w];
            if pointwise {
                // d_image[C×HW] = kernel^T[C×F] · grad[F×HW]
                gemm(g.c, g.f, ncols, kernel, (1, rows), grad, (ncols, 1), 0.0, dst, (ncols, 1));
            } else {
                gemm(rows, g.f, ncols, kernel, (1, rows), grad, (ncols, 1), 0.0, &mut d_cols, (ncols, 1));
                col2im(g, &d_cols, dst);
            }
        }
    }
    (d_input, d_kernel, d_bias)
}

/// 2×2 max pooling; returns the pooled values and, per output, the flat input
/// index that won (first in row-major order on ties).
pub(crate) fn maxpool2_forward(dims: [usize; 4], input: &[f32]) -> (Vec<f32>, Vec<u32>) {
    let [n, c, h, w] = dims;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let first = base + 2 * oy * w + 2 * ox;
                let candidates = [first, first + 1, first + w, first + w + 1];
                let mut best = candidates[0];
                for &idx in &candidates[1..] {
                    if input[idx] > input[best] {
                        best = idx;
                    }
                }
                out.push(input[best]);
                arg.push(best as u32);
            }
        }
    }
    (out, arg)
}

pub(crate) fn upsample2_forward(dims: [usize; 4], input: &[f32]) -> Vec<f32> {
    let [n, c, h, w] = dims;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0f32; n * c * oh * ow];
    for plane in 0..n * c {
        let src = &input[plane * h * w..(plane + 1) * h * w];
        let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
        for y in 0..oh {
            let row = &src[(y / 2) * w..(y / 2 + 1) * w];
            for (x, v) in dst[y * ow..(y + 1) * ow].iter_mut().enumerate() {
                *v = row[x / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward(dims: [usize; 4], d_out: &[f32]) -> Vec<f32> {
    let [n, c, h, w] = dims;
    let ow = 2 * w;
    let mut d_in = vec![0.0f32; n * c * h * w];
    for plane in 0..n * c {
        let src = &d_out[plane * 4 * h * w..(plane + 1) * 4 * h * w];
        let dst = &mut d_in[plane * h * w..(plane + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let tl = 2 * y * ow + 2 * x;
                dst[y * w + x] = src[tl] + src[tl + 1] + src[tl + ow] + src[tl + ow + 1];
            }
        }
    }
    d_in
}

/// Concatenates two `[N, *, H, W]` buffers along the channel axis.
pub(crate) fn concat_channels(n: usize, plane: usize, a: &[f32], ca: usize, b: &[f32], cb: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(n * (ca + cb) * plane);
    for i in 0..n {
        out.extend_from_slice(&a[i * ca * plane..(i + 1) * ca * plane]);
        out.extend_from_slice(&b[i * cb * plane..(i + 1) * cb * plane]);
    }
    out
}

pub(crate) fn split_channels(n: usize, plane: usize, grad: &[f32], ca: usize, cb: usize) -> (Vec<f32>, Vec<f32>) {
    let mut ga = Vec::with_capacity(n * ca * plane);
    let mut gb = Vec::with_capacity(n * cb * plane);
    let stride = (ca + cb) * plane;
    for i in 0..n {
        let item = &grad[i * stride..(i + 1) * stride];
        ga.extend_from_slice(&item[..ca * plane]);
        gb.extend_from_slice(&item[ca * plane..]);
    }
    (ga, gb)
}

pub(crate) fn softmax_channels(dims: [usize; 4], input: &[f32]) -> Vec<f32> {
    let [n, c, h, w] = dims;
    let plane = h * w;
    let mut out = vec![0.0f32; input.len()];
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let mut max = f32::NEG_INFINITY;
            for ch in 0..c {
                max = max.max(input[base + ch * plane + p]);
            }
            let mut total = 0.0f32;
            for ch in 0..c {
                let e = (input[base + ch * plane + p] - max).exp();
                out[base + ch * plane + p] = e;
                total += e;
            }
            for ch in 0..c {
                out[base + ch * plane + p] /= total;
            }
        }
    }
    out
}

pub(crate) fn softmax_channels_backward(dims: [usize; 4], output: &[f32], d_out: &[f32]) -> Vec<f32> {
    let [n, c, h, w] = dims;
    let plane = h * w;
    let mut d_in = vec![0.0f32; output.len()];
    for b in 0..n {
        let base = b * c * plane;
        for p in 0..plane {
            let mut dot = 0.0f32;
            for ch in 0..c {
                let i = base + ch * plane + p;
                dot += output[i] * d_out[i];
            }
            for ch in 0..c {
                let i = base + ch * plane + p;
                d_in[i] = output[i] * (d_out[i] - dot);
            }
        }
    }
    d_in
}
