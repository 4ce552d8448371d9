//! Dense kernels over row-major buffers.
//!
//! Every output element is accumulated in an order fixed by the loop
//! structure alone (never by batch position, block shape or thread), so a
//! sample gives bit-identical results whether it is evaluated alone or
//! inside a batch. Products are accumulated with fused multiply-add, which
//! rounds identically on every platform.

/// Columns handled per register block.
const COLS: usize = 16;

/// `z[s0 + j, c0..c0 + C] = sum_i x[s0 + j, i] * wt[i, c0..c0 + C] + bias`.
#[inline(always)]
fn forward_block<const S: usize, const C: usize>(
    wt: &[f64],
    bias: &[f64],
    x: &[f64],
    in_dim: usize,
    s0: usize,
    c0: usize,
    z: &mut [f64],
) {
    let out_dim = bias.len();
    let mut acc = [[0.0f64; C]; S];
    for i in 0..in_dim {
        let w: &[f64; C] = wt[i * out_dim + c0..i * out_dim + c0 + C].try_into().expect("block");
        for j in 0..S {
            let v = x[(s0 + j) * in_dim + i];
            for c in 0..C {
                acc[j][c] = v.mul_add(w[c], acc[j][c]);
            }
        }
    }
    for j in 0..S {
        let row = &mut z[(s0 + j) * out_dim + c0..(s0 + j) * out_dim + c0 + C];
        for c in 0..C {
            row[c] = acc[j][c] + bias[c0 + c];
        }
    }
}

fn forward_samples<const S: usize>(
    wt: &[f64],
    bias: &[f64],
    x: &[f64],
    in_dim: usize,
    s0: usize,
    z: &mut [f64],
) {
    let out_dim = bias.len();
    let mut c = 0;
    while c + COLS <= out_dim {
        forward_block::<S, COLS>(wt, bias, x, in_dim, s0, c, z);
        c += COLS;
    }
    while c < out_dim {
        forward_block::<S, 1>(wt, bias, x, in_dim, s0, c, z);
        c += 1;
    }
}

/// Row-major `rows x cols` to row-major `cols x rows`.
pub(crate) fn transpose(m: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    const TILE: usize = 32;
    let mut out = vec![0.0; m.len()];
    for r0 in (0..rows).step_by(TILE) {
        for c0 in (0..cols).step_by(TILE) {
            for r in r0..(r0 + TILE).min(rows) {
                for c in c0..(c0 + TILE).min(cols) {
                    out[c * rows + r] = m[r * cols + c];
                }
            }
        }
    }
    out
}

/// `z[s, o] = w[o, :] . x[s, :] + bias[o]` for every sample `s`, with the
/// weights given input-major (`wt[i, o] = w[o, i]`).
pub(crate) fn affine_forward(wt: &[f64], bias: &[f64], in_dim: usize, x: &[f64], z: &mut [f64]) {
    let batch = x.len() / in_dim;
    debug_assert_eq!(z.len(), batch * bias.len());
    let mut s = 0;
    while s + 4 <= batch {
        forward_samples::<4>(wt, bias, x, in_dim, s, z);
        s += 4;
    }
    while s < batch {
        forward_samples::<1>(wt, bias, x, in_dim, s, z);
        s += 1;
    }
}

/// `dw[o0 + r, c0..c0 + C] += sum_s dz[s, o0 + r] * x[s, c0..c0 + C]`.
#[inline(always)]
fn outer_block<const R: usize, const C: usize>(
    dz: &[f64],
    out_dim: usize,
    o0: usize,
    x: &[f64],
    in_dim: usize,
    c0: usize,
    dw: &mut [f64],
) {
    let batch = x.len() / in_dim;
    let mut acc = [[0.0f64; C]; R];
    for s in 0..batch {
        let xs: &[f64; C] = x[s * in_dim + c0..s * in_dim + c0 + C].try_into().expect("block");
        for r in 0..R {
            let g = dz[s * out_dim + o0 + r];
            for c in 0..C {
                acc[r][c] = g.mul_add(xs[c], acc[r][c]);
            }
        }
    }
    for r in 0..R {
        let row = &mut dw[(o0 + r) * in_dim + c0..(o0 + r) * in_dim + c0 + C];
        for c in 0..C {
            row[c] += acc[r][c];
        }
    }
}

fn param_grad_rows<const R: usize>(
    dz: &[f64],
    out_dim: usize,
    o0: usize,
    x: &[f64],
    in_dim: usize,
    dw: &mut [f64],
) {
    let mut c = 0;
    while c + COLS <= in_dim {
        outer_block::<R, COLS>(dz, out_dim, o0, x, in_dim, c, dw);
        c += COLS;
    }
    while c < in_dim {
        outer_block::<R, 1>(dz, out_dim, o0, x, in_dim, c, dw);
        c += 1;
    }
}

/// Accumulates `dw[o, :] += sum_s dz[s, o] * x[s, :]` and `db[o] += sum_s dz[s, o]`.
pub(crate) fn affine_param_grad(dz: &[f64], x: &[f64], in_dim: usize, dw: &mut [f64], db: &mut [f64]) {
    let out_dim = db.len();
    let batch = x.len() / in_dim;
    let mut o = 0;
    while o + 4 <= out_dim {
        param_grad_rows::<4>(dz, out_dim, o, x, in_dim, dw);
        o += 4;
    }
    while o < out_dim {
        param_grad_rows::<1>(dz, out_dim, o, x, in_dim, dw);
        o += 1;
    }
    for (o, b) in db.iter_mut().enumerate() {
        let mut acc = 0.0;
        for s in 0..batch {
            acc += dz[s * out_dim + o];
        }
        *b += acc;
    }
}

/// `dx[s0 + j, c0..c0 + C] = sum_o dz[s0 + j, o] * w[o, c0..c0 + C]`.
#[inline(always)]
fn transpose_block<const S: usize, const C: usize>(
    weights: &[f64],
    dz: &[f64],
    out_dim: usize,
    in_dim: usize,
    s0: usize,
    c0: usize,
    dx: &mut [f64],
) {
    let mut acc = [[0.0f64; C]; S];
    for o in 0..out_dim {
        let w: &[f64; C] = weights[o * in_dim + c0..o * in_dim + c0 + C].try_into().expect("block");
        for j in 0..S {
            let g = dz[(s0 + j) * out_dim + o];
            for c in 0..C {
                acc[j][c] = g.mul_add(w[c], acc[j][c]);
            }
        }
    }
    for j in 0..S {
        dx[(s0 + j) * in_dim + c0..(s0 + j) * in_dim + c0 + C].copy_from_slice(&acc[j]);
    }
}

fn input_grad_samples<const S: usize>(
    weights: &[f64],
    dz: &[f64],
    out_dim: usize,
    in_dim: usize,
    s0: usize,
    dx: &mut [f64],
) {
    let mut c = 0;
    while c + COLS <= in_dim {
        transpose_block::<S, COLS>(weights, dz, out_dim, in_dim, s0, c, dx);
        c += COLS;
    }
    while c < in_dim {
        transpose_block::<S, 1>(weights, dz, out_dim, in_dim, s0, c, dx);
        c += 1;
    }
}

/// Writes `dx[s, :] = sum_o dz[s, o] * w[o, :]`.
pub(crate) fn affine_input_grad(weights: &[f64], dz: &[f64], in_dim: usize, dx: &mut [f64]) {
    let batch = dx.len() / in_dim;
    if batch == 0 {
        return;
    }
    let out_dim = dz.len() / batch;
    let mut s = 0;
    while s + 4 <= batch {
        input_grad_samples::<4>(weights, dz, out_dim, in_dim, s, dx);
        s += 4;
    }
    while s < batch {
        input_grad_samples::<1>(weights, dz, out_dim, in_dim, s, dx);
        s += 1;
    }
}
