//! Pure numeric kernels behind the tape ops.
//!
//! Everything here is f64 on flat row-major buffers. The convolution family
//! is written as shift-accumulate / shift-dot loops over contiguous rows so
//! the inner loops auto-vectorize; these three kernels carry nearly all of
//! the training cost.

/// Output length of one convolution axis.
pub fn conv_out_len(in_len: usize, k_len: usize, stride: usize, pad: usize) -> usize {
    (in_len + 2 * pad - k_len) / stride + 1
}

/// Range [lo, hi) of output coordinates with 0 <= o*stride + k_off - pad < in_len.
fn valid_range(in_len: usize, k_off: usize, stride: usize, pad: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > k_off { (pad - k_off).div_ceil(stride) } else { 0 };
    let hi_raw = in_len + pad - k_off; // exclusive bound on o*stride
    let hi = ((hi_raw - 1) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

/// out[o,oy,ox] = sum_{c,ky,kx} x[c, oy*s+ky-p, ox*s+kx-p] * k[o,c,ky,kx]
///
/// Stride-1 path: one hot accumulator row per output row, written back once;
/// each (channel, tap) contributes a contiguous shifted axpy, which the
/// compiler turns into fused multiply-add lanes.
pub fn conv2d(
    x: &[f64],
    k: &[f64],
    (ci, h, w): (usize, usize, usize),
    (co, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let mut out = vec![0.0; co * oh * ow];
    if stride == 1 {
        let mut acc = vec![0.0; ow];
        for o in 0..co {
            for oy in 0..oh {
                acc.fill(0.0);
                for c in 0..ci {
                    let x_c = &x[c * h * w..(c + 1) * h * w];
                    let k_oc = &k[(o * ci + c) * kh * kw..(o * ci + c + 1) * kh * kw];
                    for ky in 0..kh {
                        let iy = oy + ky;
                        if iy < pad || iy - pad >= h {
                            continue;
                        }
                        let xrow = &x_c[(iy - pad) * w..(iy - pad) * w + w];
                        let taps = &k_oc[ky * kw..(ky + 1) * kw];
                        if kw == 3 {
                            stencil3(&mut acc, xrow, taps, pad, w, ow);
                        } else {
                            for (kx, &coef) in taps.iter().enumerate() {
                                let (lo, hi) = valid_range(w, kx, 1, pad, ow);
                                if lo >= hi {
                                    continue;
                                }
                                let xs = &xrow[lo + kx - pad..hi + kx - pad];
                                for (a, &xv) in acc[lo..hi].iter_mut().zip(xs) {
                                    *a = coef.mul_add(xv, *a);
                                }
                            }
                        }
                    }
                }
                out[(o * oh + oy) * ow..(o * oh + oy + 1) * ow].copy_from_slice(&acc);
            }
        }
        return out;
    }
    for o in 0..co {
        let out_o = &mut out[o * oh * ow..(o + 1) * oh * ow];
        for c in 0..ci {
            let x_c = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..kh {
                let (oy_lo, oy_hi) = valid_range(h, ky, stride, pad, oh);
                for kx in 0..kw {
                    let coef = k[((o * ci + c) * kh + ky) * kw + kx];
                    let (ox_lo, ox_hi) = valid_range(w, kx, stride, pad, ow);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - pad;
                        let orow = &mut out_o[oy * ow + ox_lo..oy * ow + ox_hi];
                        for (i, ov) in orow.iter_mut().enumerate() {
                            let ix = (ox_lo + i) * stride + kx - pad;
                            *ov += coef * x_c[iy * w + ix];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Fused 3-tap row update: acc[o] += sum_kx taps[kx] * xrow[o + kx - pad],
/// skipping out-of-range source columns. One pass over the row does all
/// three multiplies, so the accumulator is loaded and stored once.
fn stencil3(acc: &mut [f64], xrow: &[f64], taps: &[f64], pad: usize, w: usize, ow: usize) {
    let (c0, c1, c2) = (taps[0], taps[1], taps[2]);
    // All three taps in range: o + 0 - pad >= 0 and o + 2 - pad < w.
    let ilo = pad; // o >= pad
    let ihi = (w + pad - 2).min(ow);
    if ilo < ihi {
        let n = ihi - ilo;
        let x0 = &xrow[ilo - pad..ilo - pad + n];
        let x1 = &xrow[ilo + 1 - pad..ilo + 1 - pad + n];
        let x2 = &xrow[ilo + 2 - pad..ilo + 2 - pad + n];
        let a = &mut acc[ilo..ihi];
        for i in 0..n {
            // mul_add lowers to hardware fused multiply-add under the
            // target-cpu flag this workspace builds with; it halves the
            // floating-point port pressure of the hottest loop.
            a[i] = c0.mul_add(x0[i], c1.mul_add(x1[i], c2.mul_add(x2[i], a[i])));
        }
    }
    // Edge columns where some tap falls outside the row.
    for o in (0..ilo.min(ow)).chain(ihi.max(ilo)..ow) {
        let mut s = 0.0;
        for (kx, &coef) in taps.iter().enumerate() {
            let ix = o + kx;
            if ix >= pad && ix - pad < w {
                s += coef * xrow[ix - pad];
            }
        }
        acc[o] += s;
    }
}

/// Adjoint of conv2d w.r.t. its input: scatters g back through the kernel.
/// xbar[c, oy*s+ky-p, ox*s+kx-p] += g[o,oy,ox] * k[o,c,ky,kx]
pub fn conv2d_grad_input(
    g: &[f64],
    k: &[f64],
    (ci, h, w): (usize, usize, usize),
    (co, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let mut xbar = vec![0.0; ci * h * w];
    if stride == 1 {
        // Gather form: each input row accumulates shifted g-row axpys.
        // For iy = oy + ky - pad, ix = ox + kx - pad (all stride 1).
        let mut acc = vec![0.0; w];
        for c in 0..ci {
            for iy in 0..h {
                acc.fill(0.0);
                for o in 0..co {
                    let g_o = &g[o * oh * ow..(o + 1) * oh * ow];
                    let k_oc = &k[(o * ci + c) * kh * kw..(o * ci + c + 1) * kh * kw];
                    for ky in 0..kh {
                        let oy = iy + pad;
                        if oy < ky || oy - ky >= oh {
                            continue;
                        }
                        let grow = &g_o[(oy - ky) * ow..(oy - ky) * ow + ow];
                        let taps = &k_oc[ky * kw..(ky + 1) * kw];
                        if kw == 3 && pad <= 2 {
                            // acc[ix] += sum_kx taps[kx] * grow[ix + pad - kx]
                            // is the same stencil with taps reversed and the
                            // padding mirrored to 2 - pad.
                            let rev = [taps[2], taps[1], taps[0]];
                            stencil3(&mut acc, grow, &rev, 2 - pad, ow, w);
                        } else {
                            for (kx, &coef) in taps.iter().enumerate() {
                                // ix valid iff 0 <= ix + pad - kx < ow
                                let lo = kx.saturating_sub(pad);
                                let hi = (ow + kx).saturating_sub(pad).min(w);
                                if lo >= hi {
                                    continue;
                                }
                                let gs = &grow[lo + pad - kx..hi + pad - kx];
                                for (a, &gv) in acc[lo..hi].iter_mut().zip(gs) {
                                    *a = coef.mul_add(gv, *a);
                                }
                            }
                        }
                    }
                }
                xbar[(c * h + iy) * w..(c * h + iy + 1) * w].copy_from_slice(&acc);
            }
        }
        return xbar;
    }
    for o in 0..co {
        let g_o = &g[o * oh * ow..(o + 1) * oh * ow];
        for c in 0..ci {
            let x_c = &mut xbar[c * h * w..(c + 1) * h * w];
            for ky in 0..kh {
                let (oy_lo, oy_hi) = valid_range(h, ky, stride, pad, oh);
                for kx in 0..kw {
                    let coef = k[((o * ci + c) * kh + ky) * kw + kx];
                    let (ox_lo, ox_hi) = valid_range(w, kx, stride, pad, ow);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - pad;
                        let grow = &g_o[oy * ow + ox_lo..oy * ow + ox_hi];
                        for (i, &gv) in grow.iter().enumerate() {
                            let ix = (ox_lo + i) * stride + kx - pad;
                            x_c[iy * w + ix] += coef * gv;
                        }
                    }
                }
            }
        }
    }
    xbar
}

/// Adjoint of conv2d w.r.t. its kernel.
/// kbar[o,c,ky,kx] = sum_{oy,ox} g[o,oy,ox] * x[c, oy*s+ky-p, ox*s+kx-p]
pub fn conv2d_grad_kernel(
    x: &[f64],
    g: &[f64],
    (ci, h, w): (usize, usize, usize),
    (co, kh, kw): (usize, usize, usize),
    stride: usize,
    pad: usize,
) -> Vec<f64> {
    let oh = conv_out_len(h, kh, stride, pad);
    let ow = conv_out_len(w, kw, stride, pad);
    let mut kbar = vec![0.0; co * ci * kh * kw];
    for o in 0..co {
        let g_o = &g[o * oh * ow..(o + 1) * oh * ow];
        for c in 0..ci {
            let x_c = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..kh {
                let (oy_lo, oy_hi) = valid_range(h, ky, stride, pad, oh);
                for kx in 0..kw {
                    let (ox_lo, ox_hi) = valid_range(w, kx, stride, pad, ow);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let mut acc = 0.0;
                    for oy in oy_lo..oy_hi {
                        let iy = oy * stride + ky - pad;
                        let grow = &g_o[oy * ow + ox_lo..oy * ow + ox_hi];
                        if stride == 1 {
                            let ix0 = ox_lo + kx - pad;
                            let xrow = &x_c[iy * w + ix0..iy * w + ix0 + grow.len()];
                            acc += dot(grow, xrow);
                        } else {
                            for (i, &gv) in grow.iter().enumerate() {
                                let ix = (ox_lo + i) * stride + kx - pad;
                                acc += gv * x_c[iy * w + ix];
                            }
                        }
                    }
                    kbar[((o * ci + c) * kh + ky) * kw + kx] = acc;
                }
            }
        }
    }
    kbar
}

/// Dot product with eight parallel accumulators. A single-accumulator loop
/// is a serial dependency chain the compiler may not reassociate; splitting
/// the sum lets it use fused multiply-add lanes.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut lanes = [0.0f64; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let (ai, bi) = (&a[i * 8..i * 8 + 8], &b[i * 8..i * 8 + 8]);
        for j in 0..8 {
            lanes[j] = ai[j].mul_add(bi[j], lanes[j]);
        }
    }
    let mut tail = 0.0;
    for i in chunks * 8..a.len() {
        tail = a[i].mul_add(b[i], tail);
    }
    lanes.iter().sum::<f64>() + tail
}

/// 2x2 max pooling with stride 2. Returns pooled values and the flat index
/// of each window maximum (first maximum in row-major window order on ties).
pub fn max_pool2(x: &[f64], (c, h, w): (usize, usize, usize)) -> (Vec<f64>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    let mut idx = vec![0u32; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = ch * h * w + 2 * oy * w + 2 * ox;
                let cands = [base, base + 1, base + w, base + w + 1];
                let mut best = cands[0];
                for &cand in &cands[1..] {
                    if x[cand] > x[best] {
                        best = cand;
                    }
                }
                let o = (ch * oh + oy) * ow + ox;
                out[o] = x[best];
                idx[o] = best as u32;
            }
        }
    }
    (out, idx)
}

/// out[idx[i]] += src[i]; the scatter half of the max-pool adjoint pair.
pub fn select_scatter(src: &[f64], idx: &[u32], out_len: usize) -> Vec<f64> {
    let mut out = vec![0.0; out_len];
    for (&v, &i) in src.iter().zip(idx) {
        out[i as usize] += v;
    }
    out
}

/// out[i] = src[idx[i]]; the gather half.
pub fn select_gather(src: &[f64], idx: &[u32]) -> Vec<f64> {
    idx.iter().map(|&i| src[i as usize]).collect()
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2(x: &[f64], (c, h, w): (usize, usize, usize)) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            let xrow = &x[ch * h * w + (y / 2) * w..ch * h * w + (y / 2) * w + w];
            let orow = &mut out[ch * oh * ow + y * ow..ch * oh * ow + y * ow + ow];
            for (i, ov) in orow.iter_mut().enumerate() {
                *ov = xrow[i / 2];
            }
        }
    }
    out
}

/// 2x2 block sums with stride 2; adjoint of upsample2.
pub fn sum_pool2(x: &[f64], (c, h, w): (usize, usize, usize)) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let base = ch * h * w + 2 * oy * w + 2 * ox;
                out[(ch * oh + oy) * ow + ox] = x[base] + x[base + 1] + x[base + w] + x[base + w + 1];
            }
        }
    }
    out
}

/// Channelwise softmax over the leading axis of [K,H,W], log-sum-exp based.
pub fn softmax(logits: &[f64], (k, h, w): (usize, usize, usize)) -> Vec<f64> {
    let hw = h * w;
    let mut out = vec![0.0; k * hw];
    for p in 0..hw {
        let mut m = f64::NEG_INFINITY;
        for c in 0..k {
            m = m.max(logits[c * hw + p]);
        }
        let mut z = 0.0;
        for c in 0..k {
            let e = (logits[c * hw + p] - m).exp();
            out[c * hw + p] = e;
            z += e;
        }
        for c in 0..k {
            out[c * hw + p] /= z;
        }
    }
    out
}

/// Mean over pixels of -log softmax(logits)[label], via log-sum-exp.
pub fn softmax_xent(logits: &[f64], labels: &[u8], (k, h, w): (usize, usize, usize)) -> f64 {
    let hw = h * w;
    let mut total = 0.0;
    for p in 0..hw {
        let mut m = f64::NEG_INFINITY;
        for c in 0..k {
            m = m.max(logits[c * hw + p]);
        }
        let mut z = 0.0;
        for c in 0..k {
            z += (logits[c * hw + p] - m).exp();
        }
        let lse = m + z.ln();
        total += lse - logits[labels[p] as usize * hw + p];
    }
    total / hw as f64
}

/// Plain [m,k] x [k,n] matrix product.
pub fn matmul(a: &[f64], b: &[f64], (m, kd, n): (usize, usize, usize)) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for kk in 0..kd {
            let av = a[i * kd + kk];
            let brow = &b[kk * n..kk * n + n];
            let orow = &mut out[i * n..i * n + n];
            for (ov, &bv) in orow.iter_mut().zip(brow) {
                *ov = av.mul_add(bv, *ov);
            }
        }
    }
    out
}

pub fn transpose(a: &[f64], (m, n): (usize, usize)) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv2d_ones_sums_window() {
        // 1x3x3 ones against 1x1x3x3 ones, stride 1, pad 0 -> [[9.0]]
        let out = conv2d(&[1.0; 9], &[1.0; 9], (1, 3, 3), (1, 3, 3), 1, 0);
        assert_eq!(out, vec![9.0]);
    }

    #[test]
    fn conv2d_padding_preserves_size() {
        let x: Vec<f64> = (0..16).map(|v| v as f64).collect();
        let k = vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]; // identity 3x3
        let out = conv2d(&x, &k, (1, 4, 4), (1, 3, 3), 1, 1);
        assert_eq!(out, x);
    }

    #[test]
    fn conv2d_stride_two() {
        let x: Vec<f64> = (1..=16).map(|v| v as f64).collect();
        let k = vec![1.0]; // 1x1 kernel
        let out = conv2d(&x, &k, (1, 4, 4), (1, 1, 1), 2, 0);
        assert_eq!(out, vec![1.0, 3.0, 9.0, 11.0]);
    }

    #[test]
    fn grad_input_matches_hand_example() {
        // y = conv(x, k), pad 0, 1x2x2 input, 1x1x2x2 kernel -> scalar y.
        // dy/dx = k itself.
        let k = vec![1.0, 2.0, 3.0, 4.0];
        let g = vec![1.0];
        let xbar = conv2d_grad_input(&g, &k, (1, 2, 2), (1, 2, 2), 1, 0);
        assert_eq!(xbar, k);
    }

    #[test]
    fn grad_kernel_matches_hand_example() {
        let x = vec![5.0, 6.0, 7.0, 8.0];
        let g = vec![1.0];
        let kbar = conv2d_grad_kernel(&x, &g, (1, 2, 2), (1, 2, 2), 1, 0);
        assert_eq!(kbar, x);
    }

    #[test]
    fn max_pool_picks_first_max_on_ties(){
        let x = vec![
            1.0, 1.0, //
            1.0, 1.0, //
        ];
        let (out, idx) = max_pool2(&x, (1, 2, 2));
        assert_eq!(out, vec![1.0]);
        assert_eq!(idx, vec![0]);
    }

    #[test]
    fn scatter_gather_are_adjoint_shapes() {
        let (_, idx) = max_pool2(&[1.0, 2.0, 3.0, 4.0], (1, 2, 2));
        let scattered = select_scatter(&[5.0], &idx, 4);
        assert_eq!(scattered, vec![0.0, 0.0, 0.0, 5.0]);
        assert_eq!(select_gather(&scattered, &idx), vec![5.0]);
    }

    #[test]
    fn upsample_then_sum_pool_scales_by_four() {
        let x = vec![1.0, 2.0, 3.0, 4.0];
        let up = upsample2(&x, (1, 2, 2));
        assert_eq!(up.len(), 16);
        let back = sum_pool2(&up, (1, 4, 4));
        assert_eq!(back, vec![4.0, 8.0, 12.0, 16.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let p = softmax(&[0.3, -1.0, 2.0, 0.5, 0.1, -0.7], (3, 1, 2));
        let s0 = p[0] + p[2] + p[4];
        let s1 = p[1] + p[3] + p[5];
        assert!((s0 - 1.0).abs() < 1e-12 && (s1 - 1.0).abs() < 1e-12);
    }

    #[test]
    fn xent_of_zero_logits_is_ln_k() {
        let loss = softmax_xent(&[0.0; 16], &[0, 1, 2, 3], (4, 2, 2));
        assert!((loss - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn matmul_and_transpose_basics() {
        // [1 2; 3 4] x [5; 6] = [17; 39]
        let out = matmul(&[1.0, 2.0, 3.0, 4.0], &[5.0, 6.0], (2, 2, 1));
        assert_eq!(out, vec![17.0, 39.0]);
        assert_eq!(transpose(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], (2, 3)), vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }
}
