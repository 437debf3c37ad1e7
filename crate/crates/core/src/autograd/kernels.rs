//! Dense numeric kernels behind the tape ops.
//!
//! Every reduction runs in a fixed order so results are bitwise reproducible
//! on a given platform.

use std::cell::RefCell;
use std::ops::{Deref, DerefMut};

const POOL_MIN_LEN: usize = 1 << 16;
const POOL_SLOTS: usize = 12;

thread_local! {
    static POOL: RefCell<Vec<Vec<f32>>> = const { RefCell::new(Vec::new()) };
}

/// A large zero-initialised buffer recycled through a per-thread pool, so
/// repeated training steps reuse already-mapped memory.
pub(crate) struct Scratch(Vec<f32>);

impl Scratch {
    pub fn zeroed(len: usize) -> Self {
        let mut buf = if len >= POOL_MIN_LEN {
            POOL.with(|p| {
                let mut p = p.borrow_mut();
                let best = (0..p.len())
                    .filter(|&i| p[i].capacity() >= len)
                    .min_by_key(|&i| p[i].capacity());
                best.map(|i| p.swap_remove(i))
            })
            .unwrap_or_default()
        } else {
            Vec::new()
        };
        buf.clear();
        buf.resize(len, 0.0);
        Scratch(buf)
    }

    pub fn empty() -> Self {
        Scratch(Vec::new())
    }
}

impl Drop for Scratch {
    fn drop(&mut self) {
        if self.0.capacity() < POOL_MIN_LEN {
            return;
        }
        let buf = std::mem::take(&mut self.0);
        // try_with: the pool may already be gone during thread teardown.
        let _ = POOL.try_with(|p| {
            let mut p = p.borrow_mut();
            if p.len() < POOL_SLOTS {
                p.push(buf);
            }
        });
    }
}

impl Deref for Scratch {
    type Target = [f32];
    fn deref(&self) -> &[f32] {
        &self.0
    }
}

impl DerefMut for Scratch {
    fn deref_mut(&mut self) -> &mut [f32] {
        &mut self.0
    }
}

impl std::fmt::Debug for Scratch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Scratch({})", self.0.len())
    }
}

/// Geometry of a 2-d convolution over one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub in_channels: usize,
    pub out_channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    pub fn out_positions(&self) -> usize {
        self.out_height * self.out_width
    }

    pub fn in_len(&self) -> usize {
        self.in_channels * self.height * self.width
    }

    pub fn out_len(&self) -> usize {
        self.out_channels * self.out_positions()
    }
}

/// Row-major matrix view: element (i, j) lives at `i * rs + j * cs`.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f32],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    pub fn rows(data: &'a [f32], cols: usize) -> Self {
        View {
            data,
            rs: cols,
            cs: 1,
        }
    }

    /// The transpose of a row-major `rows x cols` matrix.
    pub fn transposed(data: &'a [f32], cols: usize) -> Self {
        View {
            data,
            rs: 1,
            cs: cols,
        }
    }
}

/// `c (m x n, row-major) = a (m x k) * b (k x n) + beta * c`.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: View, b: View, beta: f32, c: &mut [f32]) {
    assert!(c.len() >= m * n, "gemm: output buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v *= beta);
        return;
    }
    assert!(
        (m - 1) * a.rs + (k - 1) * a.cs < a.data.len(),
        "gemm: lhs out of bounds"
    );
    assert!(
        (k - 1) * b.rs + (n - 1) * b.cs < b.data.len(),
        "gemm: rhs out of bounds"
    );
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Valid output-column range `[lo, hi)` for kernel offset `kj` along an axis
/// of length `len`, plus the input index of `lo`.
fn valid_span(out_len: usize, len: usize, kj: usize, stride: usize, pad: usize) -> (usize, usize) {
    // ix = ox * stride + kj - pad must lie in [0, len).
    let lo = if kj >= pad {
        0
    } else {
        (pad - kj).div_ceil(stride)
    };
    let hi = if len + pad > kj {
        ((len + pad - kj - 1) / stride + 1).min(out_len)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Unfolds a batch of `C x H x W` samples into a `(C*K*K) x (N*OH*OW)` patch
/// matrix; column `n * OH*OW + p` holds output position `p` of sample `n`.
pub(crate) fn im2col(x: &[f32], batch: usize, g: &ConvGeom, cols: &mut [f32]) {
    let k = g.kernel;
    let p = g.out_positions();
    let ld = batch * p;
    let plane = g.height * g.width;
    for c in 0..g.in_channels {
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let (lo, hi) = valid_span(g.out_width, g.width, kj, g.stride, g.padding);
                for n in 0..batch {
                    let src_plane =
                        &x[n * g.in_len() + c * plane..n * g.in_len() + (c + 1) * plane];
                    let dst = &mut cols[row * ld + n * p..row * ld + (n + 1) * p];
                    for oy in 0..g.out_height {
                        let out_row = &mut dst[oy * g.out_width..(oy + 1) * g.out_width];
                        let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.height as isize || lo >= hi {
                            out_row.fill(0.0);
                            continue;
                        }
                        let src = &src_plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                        out_row[..lo].fill(0.0);
                        out_row[hi..].fill(0.0);
                        let ix0 = lo * g.stride + kj - g.padding;
                        if g.stride == 1 {
                            out_row[lo..hi].copy_from_slice(&src[ix0..ix0 + (hi - lo)]);
                        } else {
                            for (t, slot) in out_row[lo..hi].iter_mut().enumerate() {
                                *slot = src[ix0 + t * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch-matrix gradients back onto the images.
pub(crate) fn col2im(cols: &[f32], batch: usize, g: &ConvGeom, dx: &mut [f32]) {
    let k = g.kernel;
    let p = g.out_positions();
    let ld = batch * p;
    let plane = g.height * g.width;
    for n in 0..batch {
        for c in 0..g.in_channels {
            let base = n * g.in_len() + c * plane;
            let dst_plane = &mut dx[base..base + plane];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k + ki) * k + kj;
                    let (lo, hi) = valid_span(g.out_width, g.width, kj, g.stride, g.padding);
                    if lo >= hi {
                        continue;
                    }
                    let src = &cols[row * ld + n * p..row * ld + (n + 1) * p];
                    for oy in 0..g.out_height {
                        let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let dst =
                            &mut dst_plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                        let seg = &src[oy * g.out_width + lo..oy * g.out_width + hi];
                        let ix0 = lo * g.stride + kj - g.padding;
                        if g.stride == 1 {
                            dst[ix0..ix0 + seg.len()]
                                .iter_mut()
                                .zip(seg)
                                .for_each(|(d, s)| *d += s);
                        } else {
                            for (t, s) in seg.iter().enumerate() {
                                dst[ix0 + t * g.stride] += s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution as one GEMM over the whole batch. Returns the
/// `N x O x OH x OW` output and the patch matrix (reused by backward).
pub(crate) fn conv_forward(
    x: &[f32],
    w: &[f32],
    b: &[f32],
    batch: usize,
    g: &ConvGeom,
) -> (Vec<f32>, Scratch) {
    let (kk, p) = (g.patch_len(), g.out_positions());
    let ld = batch * p;
    let mut cols = Scratch::zeroed(kk * ld);
    im2col(x, batch, g, &mut cols);
    let mut y = Scratch::zeroed(g.out_channels * ld);
    gemm(
        g.out_channels,
        kk,
        ld,
        View::rows(w, kk),
        View::rows(&cols, ld),
        0.0,
        &mut y,
    );
    let mut out = vec![0.0f32; batch * g.out_len()];
    for o in 0..g.out_channels {
        let bias = b[o];
        for n in 0..batch {
            let src = &y[o * ld + n * p..o * ld + (n + 1) * p];
            let dst = &mut out[n * g.out_len() + o * p..n * g.out_len() + (o + 1) * p];
            dst.iter_mut().zip(src).for_each(|(d, s)| *d = s + bias);
        }
    }
    (out, cols)
}

pub(crate) struct ConvGrads {
    pub input: Option<Vec<f32>>,
    pub weight: Option<Vec<f32>>,
    pub bias: Option<Vec<f32>>,
}

/// `cols` must be the patch matrix of the forward input when the weight
/// gradient is requested.
pub(crate) fn conv_backward(
    cols: &[f32],
    w: &[f32],
    dy: &[f32],
    batch: usize,
    g: &ConvGeom,
    want: [bool; 3],
) -> ConvGrads {
    let (kk, p) = (g.patch_len(), g.out_positions());
    let ld = batch * p;
    // Regroup dy as O x (N*P) to match the patch-matrix column order.
    let mut dy_all = Scratch::zeroed(g.out_channels * ld);
    for n in 0..batch {
        for o in 0..g.out_channels {
            let src = &dy[n * g.out_len() + o * p..n * g.out_len() + (o + 1) * p];
            dy_all[o * ld + n * p..o * ld + (n + 1) * p].copy_from_slice(src);
        }
    }
    let weight = want[1].then(|| {
        let mut dw = vec![0.0f32; g.out_channels * kk];
        gemm(
            g.out_channels,
            ld,
            kk,
            View::rows(&dy_all, ld),
            View::transposed(cols, ld),
            0.0,
            &mut dw,
        );
        dw
    });
    let bias = want[2].then(|| {
        dy_all
            .chunks_exact(ld.max(1))
            .map(|row| row.iter().sum::<f32>())
            .collect::<Vec<f32>>()
    });
    let input = want[0].then(|| {
        let mut dcols = Scratch::zeroed(kk * ld);
        gemm(
            kk,
            g.out_channels,
            ld,
            View::transposed(w, kk),
            View::rows(&dy_all, ld),
            0.0,
            &mut dcols,
        );
        let mut dx = vec![0.0f32; batch * g.in_len()];
        col2im(&dcols, batch, g, &mut dx);
        dx
    });
    ConvGrads {
        input,
        weight,
        bias,
    }
}

/// Max pooling over `planes` independent `h x w` planes. Returns the pooled
/// values and, per output, the flat index of the first maximal input.
pub(crate) fn max_pool_forward(
    x: &[f32],
    planes: usize,
    h: usize,
    w: usize,
    window: usize,
    stride: usize,
) -> (Vec<f32>, Vec<u32>, usize, usize) {
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    if window == 2 && stride == 2 {
        let (out, arg) = max_pool_2x2(x, planes, h, w, oh, ow);
        return (out, arg, oh, ow);
    }
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut arg = Vec::with_capacity(planes * oh * ow);
    for pl in 0..planes {
        let base = pl * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = base + oy * stride * w + ox * stride;
                let mut first = true;
                for ky in 0..window {
                    let row = base + (oy * stride + ky) * w + ox * stride;
                    for kx in 0..window {
                        let v = x[row + kx];
                        if first || v > best {
                            best = v;
                            best_idx = row + kx;
                            first = false;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx as u32);
            }
        }
    }
    (out, arg, oh, ow)
}

fn max_pool_2x2(
    x: &[f32],
    planes: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> (Vec<f32>, Vec<u32>) {
    let mut out = vec![0.0f32; planes * oh * ow];
    let mut arg = vec![0u32; planes * oh * ow];
    for pl in 0..planes {
        for oy in 0..oh {
            let r0 = pl * h * w + 2 * oy * w;
            let top = &x[r0..r0 + w];
            let bot = &x[r0 + w..r0 + 2 * w];
            let o = (pl * oh + oy) * ow;
            let out_row = &mut out[o..o + ow];
            let arg_row = &mut arg[o..o + ow];
            for ox in 0..ow {
                let c = 2 * ox;
                // Scan order: top-left, top-right, bottom-left, bottom-right.
                let (mut best, mut idx) = (top[c], r0 + c);
                if top[c + 1] > best {
                    (best, idx) = (top[c + 1], r0 + c + 1);
                }
                if bot[c] > best {
                    (best, idx) = (bot[c], r0 + w + c);
                }
                if bot[c + 1] > best {
                    (best, idx) = (bot[c + 1], r0 + w + c + 1);
                }
                out_row[ox] = best;
                arg_row[ox] = idx as u32;
            }
        }
    }
    (out, arg)
}
