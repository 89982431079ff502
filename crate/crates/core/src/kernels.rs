//! Numeric forward/backward kernels over raw row-major buffers.
//!
//! Every routine is single-threaded with a fixed reduction order, so equal
//! inputs always produce bitwise-equal outputs. Stride-1 convolutions run
//! as direct shifted row updates, which keeps the working set of the
//! narrow channel counts used here in cache. Strided ones go through
//! im2col followed by a GEMM, in sample chunks whose size depends only on
//! the tensor geometry.

use crate::error::{Error, Result};

/// Upper bound on im2col buffer entries per chunk.
const COLS_BUDGET: usize = 1 << 21;

/// Resolved geometry of a 2-D convolution or pooling window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.c_out, self.h_out, self.w_out]
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.h_out * self.w_out
    }

    fn in_plane(&self) -> usize {
        self.h * self.w
    }

    fn chunk(&self) -> usize {
        let per_sample = self.patch_len() * self.out_plane();
        (COLS_BUDGET / per_sample.max(1)).clamp(1, self.n.max(1))
    }
}

fn out_extent(op: &'static str, dim: &str, extent: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::shape(op, "stride must be positive"));
    }
    let padded = extent + 2 * pad;
    if padded < k {
        return Err(Error::shape(
            op,
            format!("window {k} does not fit {dim} extent {extent} with padding {pad}"),
        ));
    }
    Ok((padded - k) / stride + 1)
}

/// Validates shapes of `conv2d(input, kernel, bias)` and resolves the output extents.
pub fn conv_geometry(
    input: &[usize],
    kernel: &[usize],
    bias: &[usize],
    stride: usize,
    pad: usize,
) -> Result<ConvGeom> {
    const OP: &str = "conv2d";
    if input.len() != 4 {
        return Err(Error::shape(OP, format!("input must be rank 4 [N,C,H,W], got {input:?}")));
    }
    if kernel.len() != 4 {
        return Err(Error::shape(OP, format!("kernel must be rank 4 [C_out,C_in,k,k], got {kernel:?}")));
    }
    if kernel[2] != kernel[3] {
        return Err(Error::shape(OP, format!("kernel must be square, got {}x{}", kernel[2], kernel[3])));
    }
    let k = kernel[2];
    if k % 2 == 0 {
        return Err(Error::shape(OP, format!("kernel extent k={k} must be odd")));
    }
    if kernel[1] != input[1] {
        return Err(Error::shape(
            OP,
            format!("C_in mismatch: input has {} channels, kernel expects {}", input[1], kernel[1]),
        ));
    }
    if bias != [kernel[0]] {
        return Err(Error::shape(
            OP,
            format!("C_out mismatch: bias shape {bias:?}, kernel has {} output channels", kernel[0]),
        ));
    }
    let h_out = out_extent(OP, "H", input[2], k, stride, pad)?;
    let w_out = out_extent(OP, "W", input[3], k, stride, pad)?;
    Ok(ConvGeom {
        n: input[0],
        c_in: input[1],
        h: input[2],
        w: input[3],
        c_out: kernel[0],
        k,
        stride,
        pad,
        h_out,
        w_out,
    })
}

/// Validates `avg_pool(input, k, stride, pad)` geometry.
pub fn pool_geometry(input: &[usize], k: usize, stride: usize, pad: usize) -> Result<ConvGeom> {
    const OP: &str = "avg_pool";
    if input.len() != 4 {
        return Err(Error::shape(OP, format!("input must be rank 4 [N,C,H,W], got {input:?}")));
    }
    if k == 0 {
        return Err(Error::shape(OP, "window k must be positive"));
    }
    let h_out = out_extent(OP, "H", input[2], k, stride, pad)?;
    let w_out = out_extent(OP, "W", input[3], k, stride, pad)?;
    Ok(ConvGeom {
        n: input[0],
        c_in: input[1],
        h: input[2],
        w: input[3],
        c_out: input[1],
        k,
        stride,
        pad,
        h_out,
        w_out,
    })
}

fn im2col(g: &ConvGeom, x: &[f64], n0: usize, nb: usize, cols: &mut [f64]) {
    let plane = g.out_plane();
    let l = nb * plane;
    let (k, s, pad) = (g.k, g.stride, g.pad as isize);
    for ci in 0..g.c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * l..(row + 1) * l];
                for nl in 0..nb {
                    let src = &x[((n0 + nl) * g.c_in + ci) * g.in_plane()..][..g.in_plane()];
                    for oy in 0..g.h_out {
                        let seg = &mut dst[nl * plane + oy * g.w_out..][..g.w_out];
                        let iy = (oy * s) as isize + ky as isize - pad;
                        if iy < 0 || iy >= g.h as isize {
                            seg.iter_mut().for_each(|v| *v = 0.0);
                            continue;
                        }
                        let src_row = &src[iy as usize * g.w..][..g.w];
                        for (ox, v) in seg.iter_mut().enumerate() {
                            let ix = (ox * s) as isize + kx as isize - pad;
                            *v = if ix < 0 || ix >= g.w as isize {
                                0.0
                            } else {
                                src_row[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &ConvGeom, cols: &[f64], n0: usize, nb: usize, dx: &mut [f64]) {
    let plane = g.out_plane();
    let l = nb * plane;
    let (k, s, pad) = (g.k, g.stride, g.pad as isize);
    let in_plane = g.in_plane();
    for ci in 0..g.c_in {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * l..(row + 1) * l];
                for nl in 0..nb {
                    let dst = &mut dx[((n0 + nl) * g.c_in + ci) * in_plane..][..in_plane];
                    for oy in 0..g.h_out {
                        let iy = (oy * s) as isize + ky as isize - pad;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let seg = &src[nl * plane + oy * g.w_out..][..g.w_out];
                        let dst_row = &mut dst[iy as usize * g.w..][..g.w];
                        for (ox, v) in seg.iter().enumerate() {
                            let ix = (ox * s) as isize + kx as isize - pad;
                            if ix >= 0 && ix < g.w as isize {
                                dst_row[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Row-major `c = alpha * op(a) * op(b) + beta * c` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(m == 0 || k == 0 || a.len() > (m - 1) * a_strides.0 + (k - 1) * a_strides.1);
    assert!(k == 0 || n == 0 || b.len() > (k - 1) * b_strides.0 + (n - 1) * b_strides.1);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index the routine touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv2d_forward(g: &ConvGeom, x: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
    if g.stride == 1 {
        direct_forward(g, x, kernel, bias)
    } else {
        im2col_forward(g, x, kernel, bias)
    }
}

/// Output block width of the direct kernels.
const LANES: usize = 32;

/// Zero-padded planes laid out so that output `(oy, ox)` of a stride-1
/// convolution reads input offset `oy * wp + ox + ky * wp + kx`. Output rows
/// are computed `wp` wide; the columns past `w_out` are discarded.
struct Padded {
    wp: usize,
    plane: usize,
    /// Wide output length rounded up to whole blocks.
    wide: usize,
}

impl Padded {
    fn new(g: &ConvGeom) -> Self {
        let wp = g.w + 2 * g.pad;
        let hp = g.h + 2 * g.pad;
        let wide = (g.h_out * wp).div_ceil(LANES) * LANES;
        let plane = (hp * wp).max(wide + (g.k - 1) * (wp + 1)).div_ceil(LANES) * LANES;
        Self { wp, plane, wide }
    }

    fn pad_sample(&self, g: &ConvGeom, x: &[f64], n: usize, buf: &mut [f64]) {
        buf.fill(0.0);
        for ci in 0..g.c_in {
            let src = &x[(n * g.c_in + ci) * g.in_plane()..][..g.in_plane()];
            let dst = &mut buf[ci * self.plane..][..self.plane];
            for (y, row) in src.chunks_exact(g.w).enumerate() {
                dst[(y + g.pad) * self.wp + g.pad..][..g.w].copy_from_slice(row);
            }
        }
    }
}

fn direct_forward(g: &ConvGeom, x: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx512f") {
            // SAFETY: the CPU supports the enabled feature.
            return unsafe { direct_forward_avx512(g, x, kernel, bias) };
        }
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: as above.
            return unsafe { direct_forward_avx2(g, x, kernel, bias) };
        }
    }
    direct_forward_impl(g, x, kernel, bias)
}

// Wider vectors only; no fused multiply-add, so every lane performs the
// same operations as the scalar build and results match bit for bit.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn direct_forward_avx512(g: &ConvGeom, x: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
    direct_forward_impl(g, x, kernel, bias)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx512f")]
unsafe fn direct_backward_avx512(
    g: &ConvGeom,
    x: &[f64],
    kernel: &[f64],
    dout: &[f64],
    dx: Option<&mut Vec<f64>>,
    dk: Option<&mut Vec<f64>>,
) {
    direct_backward_impl(g, x, kernel, dout, dx, dk)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn direct_forward_avx2(g: &ConvGeom, x: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
    direct_forward_impl(g, x, kernel, bias)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn direct_backward_avx2(
    g: &ConvGeom,
    x: &[f64],
    kernel: &[f64],
    dout: &[f64],
    dx: Option<&mut Vec<f64>>,
    dk: Option<&mut Vec<f64>>,
) {
    direct_backward_impl(g, x, kernel, dout, dx, dk)
}

fn direct_backward(g: &ConvGeom, x: &[f64], kernel: &[f64], dout: &[f64], dx: Option<&mut Vec<f64>>, dk: Option<&mut Vec<f64>>) {
    #[cfg(target_arch = "x86_64")]
    {
        if std::is_x86_feature_detected!("avx512f") {
            // SAFETY: the CPU supports the enabled feature.
            return unsafe { direct_backward_avx512(g, x, kernel, dout, dx, dk) };
        }
        if std::is_x86_feature_detected!("avx2") {
            // SAFETY: as above.
            return unsafe { direct_backward_avx2(g, x, kernel, dout, dx, dk) };
        }
    }
    direct_backward_impl(g, x, kernel, dout, dx, dk)
}

/// Dot product with sixteen interleaved partial sums.
#[inline(always)]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 16];
    let (ca, cb) = (a.chunks_exact(16), b.chunks_exact(16));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..16 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    let mut half = [0.0; 8];
    for i in 0..8 {
        half[i] = acc[i] + acc[i + 8];
    }
    ((half[0] + half[4]) + (half[2] + half[6])) + ((half[1] + half[5]) + (half[3] + half[7])) + tail
}

/// `acc += w * src[..LANES]` for each tap, with the taps given as
/// (weight, offset) pairs into `src`.
#[inline(always)]
fn accumulate_block(acc: &mut [f64; LANES], taps: &[(f64, usize)], src: &[f64], j: usize) {
    for &(wv, off) in taps {
        let s: &[f64; LANES] = src[j + off..j + off + LANES].try_into().expect("block in bounds");
        for t in 0..LANES {
            acc[t] += wv * s[t];
        }
    }
}

#[inline(always)]
fn direct_forward_impl(g: &ConvGeom, x: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
    let (plane, k) = (g.out_plane(), g.k);
    let pd = Padded::new(g);
    let mut xpad = vec![0.0; g.c_in * pd.plane];
    let mut wide = vec![0.0; pd.wide];
    let mut out = vec![0.0; g.n * g.c_out * plane];
    // Taps of output channel `co`: (weight, offset into the padded input).
    let taps: Vec<Vec<(f64, usize)>> = (0..g.c_out)
        .map(|co| {
            let mut t = Vec::with_capacity(g.c_in * k * k);
            for ci in 0..g.c_in {
                for ky in 0..k {
                    for kx in 0..k {
                        t.push((kernel[((co * g.c_in + ci) * k + ky) * k + kx], ci * pd.plane + ky * pd.wp + kx));
                    }
                }
            }
            t
        })
        .collect();
    for n in 0..g.n {
        pd.pad_sample(g, x, n, &mut xpad);
        for co in 0..g.c_out {
            for j in (0..pd.wide).step_by(LANES) {
                let mut acc = [bias[co]; LANES];
                accumulate_block(&mut acc, &taps[co], &xpad, j);
                wide[j..j + LANES].copy_from_slice(&acc);
            }
            let dst = &mut out[(n * g.c_out + co) * plane..][..plane];
            for (oy, row) in dst.chunks_exact_mut(g.w_out).enumerate() {
                row.copy_from_slice(&wide[oy * pd.wp..][..g.w_out]);
            }
        }
    }
    out
}

#[inline(always)]
fn direct_backward_impl(g: &ConvGeom, x: &[f64], kernel: &[f64], dout: &[f64], dx: Option<&mut Vec<f64>>, dk: Option<&mut Vec<f64>>) {
    let (plane, k) = (g.out_plane(), g.k);
    let pd = Padded::new(g);
    // Front margin so that every gather offset stays non-negative.
    let margin = ((k - 1) * (pd.wp + 1)).div_ceil(LANES) * LANES;
    // Only the unpadded interior of the input gradient is gathered.
    let start = g.pad * pd.wp + g.pad;
    let dx_len = ((g.h - 1) * pd.wp + g.w).div_ceil(LANES) * LANES;
    let span = (margin + start + dx_len + LANES).max(margin + pd.wide);
    // Wide, zero-padded copy of the output gradient for one sample.
    let mut dwide = vec![0.0; g.c_out * span];
    let mut xpad = vec![0.0; g.c_in * pd.plane];
    let mut dxpad = vec![0.0; dx_len];
    let taps: Vec<Vec<(f64, usize)>> = (0..g.c_in)
        .map(|ci| {
            let mut t = Vec::with_capacity(g.c_out * k * k);
            for co in 0..g.c_out {
                for ky in 0..k {
                    for kx in 0..k {
                        let w = kernel[((co * g.c_in + ci) * k + ky) * k + kx];
                        t.push((w, co * span + margin + start - ky * pd.wp - kx));
                    }
                }
            }
            t
        })
        .collect();
    let (mut dx, mut dk) = (dx, dk);
    for n in 0..g.n {
        for co in 0..g.c_out {
            let src = &dout[(n * g.c_out + co) * plane..][..plane];
            let dst = &mut dwide[co * span + margin..][..g.h_out * pd.wp];
            for (oy, row) in src.chunks_exact(g.w_out).enumerate() {
                dst[oy * pd.wp..][..g.w_out].copy_from_slice(row);
            }
        }
        if let Some(dk) = dk.as_deref_mut() {
            pd.pad_sample(g, x, n, &mut xpad);
            for co in 0..g.c_out {
                let d = &dwide[co * span + margin..][..pd.wide];
                for ci in 0..g.c_in {
                    for ky in 0..k {
                        for kx in 0..k {
                            let off = ci * pd.plane + ky * pd.wp + kx;
                            dk[((co * g.c_in + ci) * k + ky) * k + kx] += dot(d, &xpad[off..off + pd.wide]);
                        }
                    }
                }
            }
        }
        if let Some(dx) = dx.as_deref_mut() {
            for ci in 0..g.c_in {
                for j in (0..dxpad.len()).step_by(LANES) {
                    let mut acc = [0.0; LANES];
                    accumulate_block(&mut acc, &taps[ci], &dwide, j);
                    dxpad[j..j + LANES].copy_from_slice(&acc);
                }
                let dst = &mut dx[(n * g.c_in + ci) * g.in_plane()..][..g.in_plane()];
                for (y, row) in dst.chunks_exact_mut(g.w).enumerate() {
                    for (d, s) in row.iter_mut().zip(&dxpad[y * pd.wp..]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

/// Reference im2col + GEMM path, used for strided convolutions.
pub fn im2col_forward(g: &ConvGeom, x: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
    let plane = g.out_plane();
    let p = g.patch_len();
    let mut out = vec![0.0; g.n * g.c_out * plane];
    let chunk = g.chunk();
    let mut cols = vec![0.0; p * chunk * plane];
    let mut tmp = vec![0.0; g.c_out * chunk * plane];
    let mut n0 = 0;
    while n0 < g.n {
        let nb = chunk.min(g.n - n0);
        let l = nb * plane;
        im2col(g, x, n0, nb, &mut cols[..p * l]);
        gemm(g.c_out, p, l, kernel, (p, 1), &cols[..p * l], (l, 1), 0.0, &mut tmp[..g.c_out * l]);
        for nl in 0..nb {
            for co in 0..g.c_out {
                let dst = &mut out[((n0 + nl) * g.c_out + co) * plane..][..plane];
                let src = &tmp[co * l + nl * plane..][..plane];
                let b = bias[co];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d = s + b;
                }
            }
        }
        n0 += nb;
    }
    out
}

/// Gradients of a convolution; `dx`/`dkernel` are computed only when requested.
pub struct ConvGrads {
    pub dx: Option<Vec<f64>>,
    pub dkernel: Option<Vec<f64>>,
    pub dbias: Option<Vec<f64>>,
}

pub fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    kernel: &[f64],
    dout: &[f64],
    need: [bool; 3],
) -> ConvGrads {
    let [need_dx, need_dk, need_db] = need;
    let plane = g.out_plane();
    let dbias = need_db.then(|| {
        let mut db = vec![0.0; g.c_out];
        for n in 0..g.n {
            for (co, acc) in db.iter_mut().enumerate() {
                *acc += dout[(n * g.c_out + co) * plane..][..plane].iter().sum::<f64>();
            }
        }
        db
    });
    if !need_dx && !need_dk {
        return ConvGrads {
            dx: None,
            dkernel: None,
            dbias,
        };
    }
    let (dx, dk) = if g.stride == 1 {
        let mut dx = need_dx.then(|| vec![0.0; x.len()]);
        let mut dk = need_dk.then(|| vec![0.0; kernel.len()]);
        direct_backward(g, x, kernel, dout, dx.as_mut(), dk.as_mut());
        (dx, dk)
    } else {
        im2col_backward(g, x, kernel, dout, need_dx, need_dk)
    };
    ConvGrads {
        dx,
        dkernel: dk,
        dbias,
    }
}

/// Input and kernel gradients through im2col and GEMM.
pub fn im2col_backward(
    g: &ConvGeom,
    x: &[f64],
    kernel: &[f64],
    dout: &[f64],
    need_dx: bool,
    need_dk: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let (plane, p) = (g.out_plane(), g.patch_len());
    let mut dx = need_dx.then(|| vec![0.0; x.len()]);
    let mut dk = need_dk.then(|| vec![0.0; kernel.len()]);
    let chunk = g.chunk();
    let mut cols = vec![0.0; p * chunk * plane];
    let mut dmat = vec![0.0; g.c_out * chunk * plane];
    let mut n0 = 0;
    while n0 < g.n {
        let nb = chunk.min(g.n - n0);
        let l = nb * plane;
        for nl in 0..nb {
            for co in 0..g.c_out {
                dmat[co * l + nl * plane..][..plane]
                    .copy_from_slice(&dout[((n0 + nl) * g.c_out + co) * plane..][..plane]);
            }
        }
        let dmat = &dmat[..g.c_out * l];
        if let Some(dk) = dk.as_mut() {
            im2col(g, x, n0, nb, &mut cols[..p * l]);
            gemm(g.c_out, l, p, dmat, (l, 1), &cols[..p * l], (1, l), 1.0, dk);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(p, g.c_out, l, kernel, (1, p), dmat, (l, 1), 0.0, &mut cols[..p * l]);
            col2im_add(g, &cols[..p * l], n0, nb, dx);
        }
        n0 += nb;
    }
    (dx, dk)
}

/// Mean over each window, dividing by `k*k` including padded positions.
pub fn avg_pool_forward(g: &ConvGeom, x: &[f64]) -> Vec<f64> {
    let inv = 1.0 / (g.k * g.k) as f64;
    let mut out = vec![0.0; g.n * g.c_in * g.out_plane()];
    for nc in 0..g.n * g.c_in {
        let src = &x[nc * g.in_plane()..][..g.in_plane()];
        let dst = &mut out[nc * g.out_plane()..][..g.out_plane()];
        for oy in 0..g.h_out {
            for ox in 0..g.w_out {
                let mut acc = 0.0;
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            acc += src[iy as usize * g.w + ix as usize];
                        }
                    }
                }
                dst[oy * g.w_out + ox] = acc * inv;
            }
        }
    }
    out
}

pub fn avg_pool_backward(g: &ConvGeom, dout: &[f64]) -> Vec<f64> {
    let inv = 1.0 / (g.k * g.k) as f64;
    let mut dx = vec![0.0; g.n * g.c_in * g.in_plane()];
    for nc in 0..g.n * g.c_in {
        let src = &dout[nc * g.out_plane()..][..g.out_plane()];
        let dst = &mut dx[nc * g.in_plane()..][..g.in_plane()];
        for oy in 0..g.h_out {
            for ox in 0..g.w_out {
                let v = src[oy * g.w_out + ox] * inv;
                for ky in 0..g.k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[iy as usize * g.w + ix as usize] += v;
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Saved statistics of a batch-normalization forward pass.
#[derive(Debug, Clone)]
pub struct BnSaved {
    pub x_hat: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Per-channel standardization with batch statistics, then `scale * x_hat + shift`.
pub fn batch_norm_forward(
    shape: &[usize],
    x: &[f64],
    scale: Option<&[f64]>,
    shift: Option<&[f64]>,
    eps: f64,
) -> (Vec<f64>, BnSaved) {
    let (n, c) = (shape[0], shape[1]);
    let plane: usize = shape[2..].iter().product();
    let count = (n * plane) as f64;
    let mut x_hat = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; c];
    let mut y = vec![0.0; x.len()];
    for ch in 0..c {
        let mut mean = 0.0;
        for s in 0..n {
            mean += x[(s * c + ch) * plane..][..plane].iter().sum::<f64>();
        }
        mean /= count;
        let mut var = 0.0;
        for s in 0..n {
            var += x[(s * c + ch) * plane..][..plane]
                .iter()
                .map(|v| (v - mean) * (v - mean))
                .sum::<f64>();
        }
        var /= count;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std[ch] = istd;
        let a = scale.map_or(1.0, |s| s[ch]);
        let b = shift.map_or(0.0, |s| s[ch]);
        for s in 0..n {
            let off = (s * c + ch) * plane;
            for i in off..off + plane {
                let h = (x[i] - mean) * istd;
                x_hat[i] = h;
                y[i] = a * h + b;
            }
        }
    }
    (y, BnSaved { x_hat, inv_std })
}

/// Returns `(dx, dscale, dshift)`.
pub fn batch_norm_backward(
    shape: &[usize],
    saved: &BnSaved,
    scale: Option<&[f64]>,
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, c) = (shape[0], shape[1]);
    let plane: usize = shape[2..].iter().product();
    let count = (n * plane) as f64;
    let mut dx = vec![0.0; dy.len()];
    let mut dscale = vec![0.0; c];
    let mut dshift = vec![0.0; c];
    for ch in 0..c {
        let mut sum_dy = 0.0;
        let mut sum_dy_xhat = 0.0;
        for s in 0..n {
            let off = (s * c + ch) * plane;
            for i in off..off + plane {
                sum_dy += dy[i];
                sum_dy_xhat += dy[i] * saved.x_hat[i];
            }
        }
        dscale[ch] = sum_dy_xhat;
        dshift[ch] = sum_dy;
        let a = scale.map_or(1.0, |s| s[ch]);
        let k = a * saved.inv_std[ch] / count;
        for s in 0..n {
            let off = (s * c + ch) * plane;
            for i in off..off + plane {
                dx[i] = k * (count * dy[i] - sum_dy - saved.x_hat[i] * sum_dy_xhat);
            }
        }
    }
    (dx, dscale, dshift)
}

/// Global average pool over H,W followed by `pooled · weightᵀ + bias`.
/// Returns `(logits, pooled)`.
pub fn dense_forward(
    shape: &[usize],
    x: &[f64],
    weight: &[f64],
    bias: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let (n, c) = (shape[0], shape[1]);
    let plane: usize = shape[2..].iter().product();
    let k = bias.len();
    let inv = 1.0 / plane as f64;
    let pooled: Vec<f64> = (0..n * c)
        .map(|i| x[i * plane..][..plane].iter().sum::<f64>() * inv)
        .collect();
    let mut logits = vec![0.0; n * k];
    for s in 0..n {
        for j in 0..k {
            let row = &weight[j * c..][..c];
            let feat = &pooled[s * c..][..c];
            logits[s * k + j] = row.iter().zip(feat).map(|(a, b)| a * b).sum::<f64>() + bias[j];
        }
    }
    (logits, pooled)
}

/// Returns `(dx, dweight, dbias)`.
pub fn dense_backward(
    shape: &[usize],
    pooled: &[f64],
    weight: &[f64],
    dlogits: &[f64],
    num_classes: usize,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, c) = (shape[0], shape[1]);
    let plane: usize = shape[2..].iter().product();
    let k = num_classes;
    let inv = 1.0 / plane as f64;
    let mut dw = vec![0.0; k * c];
    let mut db = vec![0.0; k];
    let mut dx = vec![0.0; n * c * plane];
    for s in 0..n {
        for j in 0..k {
            let g = dlogits[s * k + j];
            db[j] += g;
            for ch in 0..c {
                dw[j * c + ch] += g * pooled[s * c + ch];
            }
        }
        for ch in 0..c {
            let mut dp = 0.0;
            for j in 0..k {
                dp += dlogits[s * k + j] * weight[j * c + ch];
            }
            let v = dp * inv;
            dx[(s * c + ch) * plane..][..plane]
                .iter_mut()
                .for_each(|d| *d = v);
        }
    }
    (dx, dw, db)
}

/// Mean negative log-softmax at the true label. Returns `(loss, softmax)`.
pub fn cross_entropy_forward(logits: &[f64], k: usize, labels: &[usize]) -> (f64, Vec<f64>) {
    let n = labels.len();
    let mut probs = vec![0.0; n * k];
    let mut total = 0.0;
    for (s, &y) in labels.iter().enumerate() {
        let row = &logits[s * k..][..k];
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (p, &v) in probs[s * k..][..k].iter_mut().zip(row) {
            *p = (v - m).exp();
            z += *p;
        }
        probs[s * k..][..k].iter_mut().for_each(|p| *p /= z);
        total += z.ln() + m - row[y];
    }
    (total / n as f64, probs)
}

pub fn cross_entropy_backward(probs: &[f64], k: usize, labels: &[usize], dloss: f64) -> Vec<f64> {
    let n = labels.len();
    let scale = dloss / n as f64;
    let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
    for (s, &y) in labels.iter().enumerate() {
        d[s * k + y] -= scale;
    }
    d
}
