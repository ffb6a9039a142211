//! "Same" zero-padded stride-1 convolution via im2col + GEMM.
//!
//! Weights are `[out, in, k, k]` row-major. Activations use a channel-major
//! batch layout `[c, n, h, w]`, so one GEMM covers a whole tile of image
//! rows across the batch. Tiles are whole image rows, capped so the column
//! buffer stays bounded for large inputs.

/// Upper bound on column-buffer entries per tile.
const COLS_CAP: usize = 1 << 20;

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub h: usize,
    pub w: usize,
}

impl ConvGeom {
    pub fn hw(&self) -> usize {
        self.h * self.w
    }

    pub fn patch(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn pad(&self) -> usize {
        self.k / 2
    }

    /// Row tiles `[r0, r1)` over the `n * h` image rows of a batch.
    fn tiles(&self, n: usize) -> impl Iterator<Item = (usize, usize)> {
        let rows = n * self.h;
        let per = (COLS_CAP / (self.patch() * self.w).max(1)).max(1);
        (0..rows).step_by(per).map(move |r0| (r0, (r0 + per).min(rows)))
    }
}

/// Horizontal extent `[x0, x1)` of output pixels whose tap `kj` lands
/// inside the image, and the matching input offset.
fn span(w: usize, pad: usize, kj: usize) -> (usize, usize, usize) {
    let x0 = pad.saturating_sub(kj);
    let x1 = (w + pad).saturating_sub(kj).min(w);
    (x0, x1, (x0 + kj).saturating_sub(pad))
}

/// Column matrix `[patch, (r1 - r0) * w]` for image rows `r0..r1`. Row
/// `(c, ki, kj)` holds input channel `c` shifted by `(ki - pad, kj - pad)`,
/// zero outside the image.
pub(crate) fn im2col(g: &ConvGeom, n: usize, input: &[f32], (r0, r1): (usize, usize), cols: &mut [f32]) {
    let (h, w, k, pad) = (g.h, g.w, g.k, g.pad());
    let hw = g.hw();
    let len = (r1 - r0) * w;
    debug_assert_eq!(input.len(), g.c_in * n * hw);
    debug_assert_eq!(cols.len(), g.patch() * len);
    for c in 0..g.c_in {
        let chan = &input[c * n * hw..(c + 1) * n * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * len..(row + 1) * len];
                let (x0, x1, ix0) = span(w, pad, kj);
                for r in r0..r1 {
                    let (img, oy) = (r / h, r % h);
                    let out_row = &mut dst[(r - r0) * w..(r - r0 + 1) * w];
                    let iy = oy as isize + ki as isize - pad as isize;
                    if iy < 0 || iy >= h as isize || x0 >= x1 {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &chan[img * hw + iy as usize * w..img * hw + (iy as usize + 1) * w];
                    out_row[..x0].fill(0.0);
                    out_row[x1..].fill(0.0);
                    out_row[x0..x1].copy_from_slice(&src[ix0..ix0 + (x1 - x0)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
pub(crate) fn col2im_add(g: &ConvGeom, n: usize, cols: &[f32], (r0, r1): (usize, usize), out: &mut [f32]) {
    let (h, w, k, pad) = (g.h, g.w, g.k, g.pad());
    let hw = g.hw();
    let len = (r1 - r0) * w;
    for c in 0..g.c_in {
        let chan = &mut out[c * n * hw..(c + 1) * n * hw];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * len..(row + 1) * len];
                let (x0, x1, ix0) = span(w, pad, kj);
                if x0 >= x1 {
                    continue;
                }
                for r in r0..r1 {
                    let (img, oy) = (r / h, r % h);
                    let iy = oy as isize + ki as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = img * hw + iy as usize * w + ix0;
                    let dst = &mut chan[base..base + (x1 - x0)];
                    let s = &src[(r - r0) * w + x0..(r - r0) * w + x1];
                    for (d, v) in dst.iter_mut().zip(s) {
                        *d += v;
                    }
                }
            }
        }
    }
}

/// `C = alpha * A B + beta * C` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    beta: f32,
    c: &mut [f32],
    rsc: usize,
    csc: usize,
) {
    assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    assert!(m == 0 || n == 0 || c.len() > (m - 1) * rsc + (n - 1) * csc);
    // SAFETY: the asserted extents keep every strided access inside the slices.
    unsafe {
        matrixmultiply::sgemm(
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
            rsc as isize,
            csc as isize,
        );
    }
}

/// Forward over a `[c_in, n, h, w]` batch into `[c_out, n, h, w]`.
pub(crate) fn forward(
    g: &ConvGeom,
    n: usize,
    input: &[f32],
    weight: &[f32],
    bias: Option<&[f32]>,
    out: &mut [f32],
) {
    let total = n * g.hw();
    let p = g.patch();
    let mut cols = Vec::new();
    for tile in g.tiles(n) {
        let start = tile.0 * g.w;
        let len = (tile.1 - tile.0) * g.w;
        cols.resize(p * len, 0.0);
        im2col(g, n, input, tile, &mut cols);
        gemm(g.c_out, p, len, 1.0, weight, p, 1, &cols, len, 1, 0.0, &mut out[start..], total, 1);
    }
    if let Some(b) = bias {
        for (o, &bv) in b.iter().enumerate() {
            for v in &mut out[o * total..(o + 1) * total] {
                *v += bv;
            }
        }
    }
}

/// Accumulates weight/bias gradients and, when `grad_input` is given,
/// writes the input gradient (overwriting it). Layouts as in [`forward`].
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    g: &ConvGeom,
    n: usize,
    input: &[f32],
    weight: &[f32],
    grad_out: &[f32],
    grad_weight: &mut [f32],
    grad_bias: Option<&mut [f32]>,
    mut grad_input: Option<&mut [f32]>,
) {
    let total = n * g.hw();
    let p = g.patch();
    if let Some(gb) = grad_bias {
        for (o, b) in gb.iter_mut().enumerate() {
            let s: f64 = grad_out[o * total..(o + 1) * total].iter().map(|&v| v as f64).sum();
            *b += s as f32;
        }
    }
    if let Some(gi) = grad_input.as_deref_mut() {
        gi.fill(0.0);
    }
    let mut cols = Vec::new();
    for tile in g.tiles(n) {
        let start = tile.0 * g.w;
        let len = (tile.1 - tile.0) * g.w;
        cols.resize(p * len, 0.0);
        let dy = &grad_out[start..];
        im2col(g, n, input, tile, &mut cols);
        // dW[o, q] += sum_j dY[o, j] * cols[q, j]
        gemm(g.c_out, len, p, 1.0, dy, total, 1, &cols, 1, len, 1.0, grad_weight, p, 1);
        if let Some(gi) = grad_input.as_deref_mut() {
            // dcols[q, j] = sum_o W[o, q] * dY[o, j]
            gemm(p, g.c_out, len, 1.0, weight, 1, p, dy, total, 1, 0.0, &mut cols, len, 1);
            col2im_add(g, n, &cols, tile, gi);
        }
    }
}
