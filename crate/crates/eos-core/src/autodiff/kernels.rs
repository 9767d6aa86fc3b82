//! Raw compute kernels behind the tape primitives.
//!
//! Every kernel is deterministic: parallel loops partition the *output* into
//! fixed-size chunks and each element is produced by exactly one serial inner
//! loop, so results are bit-identical regardless of thread count. Reductions
//! with long inner sums accumulate in f64 before rounding back to f32.

use rayon::prelude::*;

/// Row chunk size for batch-parallel loops. Fixed so that summation order
/// never depends on the runtime thread count.
const PAR_CHUNK: usize = 64;

/// Work threshold below which parallel dispatch is not worth the overhead.
const PAR_MIN_FLOPS: usize = 1 << 16;

#[inline]
fn axpy(acc: &mut [f32], x: f32, row: &[f32]) {
    for (a, w) in acc.iter_mut().zip(row) {
        *a += x * w;
    }
}

/// One row of the product via repeated axpy; used for narrow outputs and
/// row tails. Skipping zeros pays off: ReLU activations and binary
/// observation patches are the common left operands.
#[inline]
fn mm_row_axpy(row_a: &[f32], row_out: &mut [f32], b: &[f32], n: usize) {
    for (i, &xi) in row_a.iter().enumerate() {
        if xi != 0.0 {
            axpy(row_out, xi, &b[i * n..(i + 1) * n]);
        }
    }
}

/// Register-blocked tile: 4 output rows × `W` columns held in accumulators
/// across the whole inner-product loop.
#[inline]
fn mm_tile4<const W: usize>(
    a0: &[f32],
    a1: &[f32],
    a2: &[f32],
    a3: &[f32],
    b: &[f32],
    n: usize,
    col: usize,
    k: usize,
) -> [[f32; W]; 4] {
    let mut acc = [[0.0f32; W]; 4];
    for p in 0..k {
        let (v0, v1, v2, v3) = (a0[p], a1[p], a2[p], a3[p]);
        if v0 == 0.0 && v1 == 0.0 && v2 == 0.0 && v3 == 0.0 {
            continue;
        }
        let brow = &b[p * n + col..p * n + col + W];
        for l in 0..W {
            let bv = brow[l];
            acc[0][l] += v0 * bv;
            acc[1][l] += v1 * bv;
            acc[2][l] += v2 * bv;
            acc[3][l] += v3 * bv;
        }
    }
    acc
}

/// Column blocks on the outside keep a 32-column stripe of `b` hot across
/// every row tile of the chunk.
fn mm_rows(a_chunk: &[f32], out_chunk: &mut [f32], b: &[f32], k: usize, n: usize) {
    let rows = a_chunk.len() / k;
    let r4 = rows - rows % 4;
    let mut col = 0;
    while col + 32 <= n {
        for r in (0..r4).step_by(4) {
            let acc = mm_tile4::<32>(
                &a_chunk[r * k..(r + 1) * k],
                &a_chunk[(r + 1) * k..(r + 2) * k],
                &a_chunk[(r + 2) * k..(r + 3) * k],
                &a_chunk[(r + 3) * k..(r + 4) * k],
                b,
                n,
                col,
                k,
            );
            for (rr, acc_row) in acc.iter().enumerate() {
                out_chunk[(r + rr) * n + col..(r + rr) * n + col + 32].copy_from_slice(acc_row);
            }
        }
        col += 32;
    }
    if col + 16 <= n {
        for r in (0..r4).step_by(4) {
            let acc = mm_tile4::<16>(
                &a_chunk[r * k..(r + 1) * k],
                &a_chunk[(r + 1) * k..(r + 2) * k],
                &a_chunk[(r + 2) * k..(r + 3) * k],
                &a_chunk[(r + 3) * k..(r + 4) * k],
                b,
                n,
                col,
                k,
            );
            for (rr, acc_row) in acc.iter().enumerate() {
                out_chunk[(r + rr) * n + col..(r + rr) * n + col + 16].copy_from_slice(acc_row);
            }
        }
        col += 16;
    }
    if col < n {
        // Narrow column tail: per-row accumulation.
        for rr in 0..r4 {
            let arow = &a_chunk[rr * k..(rr + 1) * k];
            let orow = &mut out_chunk[rr * n..(rr + 1) * n];
            for (p, &xi) in arow.iter().enumerate() {
                if xi != 0.0 {
                    axpy(&mut orow[col..], xi, &b[p * n + col..(p + 1) * n]);
                }
            }
        }
    }
    for rr in r4..rows {
        mm_row_axpy(&a_chunk[rr * k..(rr + 1) * k], &mut out_chunk[rr * n..(rr + 1) * n], b, n);
    }
}

/// out[m,n] = a[m,k] · b[k,n]
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; m * n];
    if n < 16 {
        // Narrow head layers: the blocked path has nothing to vectorize.
        if m * k * n < PAR_MIN_FLOPS {
            for (row_a, row_out) in a.chunks_exact(k).zip(out.chunks_exact_mut(n)) {
                mm_row_axpy(row_a, row_out, b, n);
            }
        } else {
            out.par_chunks_mut(PAR_CHUNK * n)
                .zip(a.par_chunks(PAR_CHUNK * k))
                .for_each(|(oc, ac)| {
                    for (row_a, row_out) in ac.chunks_exact(k).zip(oc.chunks_exact_mut(n)) {
                        mm_row_axpy(row_a, row_out, b, n);
                    }
                });
        }
    } else if m * k * n < PAR_MIN_FLOPS {
        mm_rows(a, &mut out, b, k, n);
    } else {
        out.par_chunks_mut(PAR_CHUNK * n)
            .zip(a.par_chunks(PAR_CHUNK * k))
            .for_each(|(oc, ac)| mm_rows(ac, oc, b, k, n));
    }
    out
}

/// out[c,r] = x[r,c]ᵀ
pub fn transpose(x: &[f32], r: usize, c: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = x[i * c + j];
        }
    }
    out
}

/// Valid 2-D cross-correlation, stride 1, NHWC input and HWIO kernel:
/// out[b,y,x,co] = Σ_{a,b',ci} x[b,y+a,x+b',ci] · k[a,b',ci,co]
///
/// Scatter form over nonzero input cells: binary observation grids are
/// ~90% zero, so each sample touches only a handful of kernel slices.
pub fn corr2d(
    x: &[f32],
    kern: &[f32],
    bsz: usize,
    h: usize,
    w: usize,
    ci: usize,
    kh: usize,
    kw: usize,
    co: usize,
) -> Vec<f32> {
    let ho = h - kh + 1;
    let wo = w - kw + 1;
    let mut out = vec![0.0f32; bsz * ho * wo * co];
    let in_stride = h * w * ci;
    let out_stride = ho * wo * co;
    let sample_job = |xs: &[f32], os: &mut [f32]| {
        for y in 0..h {
            let a_lo = (y + 1).saturating_sub(ho);
            let a_hi = kh.min(y + 1);
            for xpos in 0..w {
                let b_lo = (xpos + 1).saturating_sub(wo);
                let b_hi = kw.min(xpos + 1);
                for c in 0..ci {
                    let xv = xs[(y * w + xpos) * ci + c];
                    if xv == 0.0 {
                        continue;
                    }
                    for a in a_lo..a_hi {
                        let yo = y - a;
                        for bp in b_lo..b_hi {
                            let xo = xpos - bp;
                            let kidx = ((a * kw + bp) * ci + c) * co;
                            axpy(
                                &mut os[(yo * wo + xo) * co..(yo * wo + xo + 1) * co],
                                xv,
                                &kern[kidx..kidx + co],
                            );
                        }
                    }
                }
            }
        }
    };
    if bsz * out_stride * kh * kw * ci < PAR_MIN_FLOPS {
        for (xs, os) in x.chunks_exact(in_stride).zip(out.chunks_exact_mut(out_stride)) {
            sample_job(xs, os);
        }
    } else {
        out.par_chunks_mut(PAR_CHUNK * out_stride)
            .zip(x.par_chunks(PAR_CHUNK * in_stride))
            .for_each(|(oc, xc)| {
                for (xs, os) in xc.chunks_exact(in_stride).zip(oc.chunks_exact_mut(out_stride)) {
                    sample_job(xs, os);
                }
            });
    }
    out
}

/// Kernel-shaped gradient of a valid correlation:
/// out[a,b',ci,co] = Σ_{batch,y,x} x[batch,y+a,x+b',ci] · dy[batch,y,x,co]
///
/// Batch chunks produce partial sums that are reduced in chunk order with
/// f64 accumulators, keeping the result deterministic and accurate.
pub fn kernel_grad(
    x: &[f32],
    dy: &[f32],
    bsz: usize,
    h: usize,
    w: usize,
    ci: usize,
    kh: usize,
    kw: usize,
    co: usize,
) -> Vec<f32> {
    let ho = h - kh + 1;
    let wo = w - kw + 1;
    let in_stride = h * w * ci;
    let dy_stride = ho * wo * co;
    let ksize = kh * kw * ci * co;
    let chunk_job = |xc: &[f32], dyc: &[f32]| -> Vec<f32> {
        let mut part = vec![0.0f32; ksize];
        for (xs, dys) in xc.chunks_exact(in_stride).zip(dyc.chunks_exact(dy_stride)) {
            for y in 0..h {
                let a_lo = (y + 1).saturating_sub(ho);
                let a_hi = kh.min(y + 1);
                for xpos in 0..w {
                    let b_lo = (xpos + 1).saturating_sub(wo);
                    let b_hi = kw.min(xpos + 1);
                    for c in 0..ci {
                        let xv = xs[(y * w + xpos) * ci + c];
                        if xv == 0.0 {
                            continue;
                        }
                        for a in a_lo..a_hi {
                            let yo = y - a;
                            for bp in b_lo..b_hi {
                                let xo = xpos - bp;
                                let dyrow = &dys[(yo * wo + xo) * co..(yo * wo + xo + 1) * co];
                                let idx = ((a * kw + bp) * ci + c) * co;
                                axpy(&mut part[idx..idx + co], xv, dyrow);
                            }
                        }
                    }
                }
            }
        }
        part
    };
    let partials: Vec<Vec<f32>> = if bsz <= PAR_CHUNK {
        vec![chunk_job(x, dy)]
    } else {
        x.par_chunks(PAR_CHUNK * in_stride)
            .zip(dy.par_chunks(PAR_CHUNK * dy_stride))
            .map(|(xc, dyc)| chunk_job(xc, dyc))
            .collect()
    };
    let mut acc = vec![0.0f64; ksize];
    for part in &partials {
        for (a, &p) in acc.iter_mut().zip(part) {
            *a += p as f64;
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

/// out[m,n] = aᵀ·b for a[k,m], b[k,n], without materializing aᵀ.
/// Chunked over k with f64 partial reduction, like [`kernel_grad`].
pub fn matmul_atb(a: &[f32], b: &[f32], k: usize, m: usize, n: usize) -> Vec<f32> {
    let chunk_job = |ac: &[f32], bc: &[f32]| -> Vec<f32> {
        let mut part = vec![0.0f32; m * n];
        for (arow, brow) in ac.chunks_exact(m).zip(bc.chunks_exact(n)) {
            for (i, &v) in arow.iter().enumerate() {
                if v != 0.0 {
                    axpy(&mut part[i * n..(i + 1) * n], v, brow);
                }
            }
        }
        part
    };
    let partials: Vec<Vec<f32>> = if k <= PAR_CHUNK {
        vec![chunk_job(a, b)]
    } else {
        a.par_chunks(PAR_CHUNK * m)
            .zip(b.par_chunks(PAR_CHUNK * n))
            .map(|(ac, bc)| chunk_job(ac, bc))
            .collect()
    };
    if partials.len() == 1 {
        return partials.into_iter().next().unwrap();
    }
    let mut acc = vec![0.0f64; m * n];
    for part in &partials {
        for (av, &p) in acc.iter_mut().zip(part) {
            *av += p as f64;
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

/// Zero-pads the two spatial dims of an NHWC tensor by `ph`/`pw` on each side.
pub fn zero_pad2d(x: &[f32], bsz: usize, h: usize, w: usize, c: usize, ph: usize, pw: usize) -> Vec<f32> {
    let hp = h + 2 * ph;
    let wp = w + 2 * pw;
    let mut out = vec![0.0f32; bsz * hp * wp * c];
    for b in 0..bsz {
        for y in 0..h {
            let src = &x[(b * h + y) * w * c..(b * h + y + 1) * w * c];
            let dst_off = ((b * hp + y + ph) * wp + pw) * c;
            out[dst_off..dst_off + w * c].copy_from_slice(src);
        }
    }
    out
}

/// Inverse of [`zero_pad2d`]: crops `ph`/`pw` from each spatial side.
pub fn crop2d(x: &[f32], bsz: usize, hp: usize, wp: usize, c: usize, ph: usize, pw: usize) -> Vec<f32> {
    let h = hp - 2 * ph;
    let w = wp - 2 * pw;
    let mut out = vec![0.0f32; bsz * h * w * c];
    for b in 0..bsz {
        for y in 0..h {
            let src_off = ((b * hp + y + ph) * wp + pw) * c;
            let dst = &mut out[(b * h + y) * w * c..(b * h + y + 1) * w * c];
            dst.copy_from_slice(&x[src_off..src_off + w * c]);
        }
    }
    out
}

/// Flips a HWIO kernel spatially and swaps its channel axes:
/// out[a,b,o,i] = k[kh-1-a, kw-1-b, i, o]. Involutive.
pub fn flip_kernel(k: &[f32], kh: usize, kw: usize, ci: usize, co: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; kh * kw * ci * co];
    for a in 0..kh {
        for b in 0..kw {
            for i in 0..ci {
                for o in 0..co {
                    out[((a * kw + b) * co + o) * ci + i] =
                        k[(((kh - 1 - a) * kw + (kw - 1 - b)) * ci + i) * co + o];
                }
            }
        }
    }
    out
}

pub fn softmax_rows(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; rows * cols];
    out.chunks_exact_mut(cols)
        .zip(x.chunks_exact(cols))
        .for_each(|(o, r)| {
            let m = r.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f64;
            for (oi, &v) in o.iter_mut().zip(r) {
                let e = (v - m).exp();
                *oi = e;
                z += e as f64;
            }
            let inv = (1.0 / z) as f32;
            for oi in o.iter_mut() {
                *oi *= inv;
            }
        });
    out
}

pub fn logsumexp_rows(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; rows];
    for (o, r) in out.iter_mut().zip(x.chunks_exact(cols)) {
        let m = r.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let z: f64 = r.iter().map(|&v| ((v - m).exp()) as f64).sum();
        *o = m + z.ln() as f32;
    }
    out
}

/// Row-wise max with ties broken toward the lowest index.
pub fn max_rows(x: &[f32], rows: usize, cols: usize) -> (Vec<f32>, Vec<u32>) {
    let mut vals = vec![0.0f32; rows];
    let mut idx = vec![0u32; rows];
    for ((v, ix), r) in vals.iter_mut().zip(idx.iter_mut()).zip(x.chunks_exact(cols)) {
        let mut best = r[0];
        let mut best_i = 0u32;
        for (i, &c) in r.iter().enumerate().skip(1) {
            if c > best {
                best = c;
                best_i = i as u32;
            }
        }
        *v = best;
        *ix = best_i;
    }
    (vals, idx)
}

pub fn sum_all(x: &[f32]) -> f32 {
    x.iter().map(|&v| v as f64).sum::<f64>() as f32
}

pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum::<f64>() as f32
}

pub fn row_sum(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; rows];
    for (o, r) in out.iter_mut().zip(x.chunks_exact(cols)) {
        *o = r.iter().map(|&v| v as f64).sum::<f64>() as f32;
    }
    out
}

pub fn col_sum(x: &[f32], _rows: usize, cols: usize) -> Vec<f32> {
    let mut acc = vec![0.0f64; cols];
    for r in x.chunks_exact(cols) {
        for (a, &v) in acc.iter_mut().zip(r) {
            *a += v as f64;
        }
    }
    acc.into_iter().map(|v| v as f32).collect()
}

/// Huber with unit transition point: ½d² for d² ≤ 1, |d| − ½ otherwise.
#[inline]
pub fn huber(d: f32) -> f32 {
    if d * d <= 1.0 {
        0.5 * d * d
    } else {
        d.abs() - 0.5
    }
}

/// Derivative of [`huber`]: clamp(d, -1, 1).
#[inline]
pub fn huber_deriv(d: f32) -> f32 {
    d.clamp(-1.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small() {
        // [1,2;3,4] · [5,6;7,8] = [19,22;43,50]
        let out = matmul(&[1., 2., 3., 4.], &[5., 6., 7., 8.], 2, 2, 2);
        assert_eq!(out, vec![19., 22., 43., 50.]);
    }

    #[test]
    fn matmul_parallel_matches_serial() {
        // Force the parallel path and compare against a na\u{ef}ve triple loop.
        let m = 300;
        let k = 40;
        let n = 8;
        let a: Vec<f32> = (0..m * k).map(|i| ((i * 37 % 23) as f32 - 11.0) * 0.1).collect();
        let b: Vec<f32> = (0..k * n).map(|i| ((i * 53 % 29) as f32 - 14.0) * 0.1).collect();
        let got = matmul(&a, &b, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let want: f32 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((got[i * n + j] - want).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn corr2d_hand_traced() {
        // 1x3x3x1 input, 2x2x1x1 kernel.
        let x = [1., 2., 3., 4., 5., 6., 7., 8., 9.];
        let k = [1., 0., 0., 1.];
        let out = corr2d(&x, &k, 1, 3, 3, 1, 2, 2, 1);
        // out[y,x] = x[y,x] + x[y+1,x+1]
        assert_eq!(out, vec![6., 8., 12., 14.]);
    }

    #[test]
    fn kernel_grad_matches_definition() {
        let bsz = 2;
        let (h, w, ci, kh, kw, co) = (4, 4, 2, 2, 2, 3);
        let x: Vec<f32> = (0..bsz * h * w * ci).map(|i| (i % 7) as f32 - 3.0).collect();
        let ho = h - kh + 1;
        let wo = w - kw + 1;
        let dy: Vec<f32> = (0..bsz * ho * wo * co).map(|i| (i % 5) as f32 - 2.0).collect();
        let got = kernel_grad(&x, &dy, bsz, h, w, ci, kh, kw, co);
        for a in 0..kh {
            for b in 0..kw {
                for c in 0..ci {
                    for o in 0..co {
                        let mut want = 0.0f32;
                        for s in 0..bsz {
                            for y in 0..ho {
                                for xp in 0..wo {
                                    want += x[((s * h + y + a) * w + xp + b) * ci + c]
                                        * dy[((s * ho + y) * wo + xp) * co + o];
                                }
                            }
                        }
                        let gidx = ((a * kw + b) * ci + c) * co + o;
                        assert!((got[gidx] - want).abs() < 1e-4);
                    }
                }
            }
        }
    }

    #[test]
    fn pad_crop_roundtrip() {
        let x: Vec<f32> = (0..2 * 3 * 3 * 2).map(|i| i as f32).collect();
        let padded = zero_pad2d(&x, 2, 3, 3, 2, 2, 1);
        let back = crop2d(&padded, 2, 7, 5, 2, 2, 1);
        assert_eq!(back, x);
    }

    #[test]
    fn flip_kernel_involutive_after_axis_swap() {
        let k: Vec<f32> = (0..3 * 3 * 2 * 4).map(|i| i as f32).collect();
        let f = flip_kernel(&k, 3, 3, 2, 4);
        let ff = flip_kernel(&f, 3, 3, 4, 2);
        assert_eq!(ff, k);
    }

    #[test]
    fn softmax_rows_normalized() {
        let p = softmax_rows(&[1., 2., 3., -1., 0., 1.], 2, 3);
        for r in p.chunks_exact(3) {
            let s: f32 = r.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn max_rows_tie_breaks_low() {
        let (v, i) = max_rows(&[1., 3., 3., 0., 0., 0.], 2, 3);
        assert_eq!(v, vec![3., 0.]);
        assert_eq!(i, vec![1, 0]);
    }

    #[test]
    fn huber_branches() {
        assert_eq!(huber(0.5), 0.125);
        assert_eq!(huber(2.0), 1.5);
        assert_eq!(huber(1.0), 0.5);
        assert_eq!(huber(-1.0), 0.5);
        assert_eq!(huber_deriv(2.0), 1.0);
        assert_eq!(huber_deriv(0.5), 0.5);
    }
}
