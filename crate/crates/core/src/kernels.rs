//! Scalar/row kernels shared by the no-grad forward pass and the tape.
//!
//! Keeping one implementation of each nonlinearity guarantees the cached
//! forward and the differentiable forward agree bit-for-bit.

pub(crate) fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

pub(crate) fn silu(x: f32) -> f32 {
    x * sigmoid(x)
}

/// y = x / rms(x) * w, rms computed in f64.
pub(crate) fn rms_norm_row(x: &[f32], w: &[f32], eps: f32, out: &mut [f32]) {
    let ms: f64 = x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + eps as f64).sqrt();
    for ((o, &xi), &wi) in out.iter_mut().zip(x).zip(w) {
        *o = ((xi as f64) * inv) as f32 * wi;
    }
}

/// Numerically stable softmax over `row[..n]` in place.
pub(crate) fn softmax_inplace(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        let e = ((*v - max) as f64).exp();
        *v = e as f32;
        sum += e;
    }
    let inv = (1.0 / sum) as f32;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// log(sum(exp(row))) in f64.
pub(crate) fn log_sum_exp(row: &[f32]) -> f64 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let sum: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
    max + sum.ln()
}

/// Rotary position embedding over interleaved pairs within each head.
///
/// Row `t` is rotated by position `start_pos + t`; `inverse` applies the
/// transpose rotation (used by the backward pass). The per-(position,
/// frequency) trig table is shared across heads.
pub(crate) fn rope_apply(
    data: &mut [f32],
    rows: usize,
    d_model: usize,
    n_heads: usize,
    start_pos: usize,
    theta: f32,
    inverse: bool,
) {
    rope_apply_mode(data, rows, d_model, n_heads, start_pos, None, theta, inverse)
}

/// `period` folds row indices: position(t) = start_pos + t mod period.
/// Used when several equal-length sequences are stacked in one matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn rope_apply_mode(
    data: &mut [f32],
    rows: usize,
    d_model: usize,
    n_heads: usize,
    start_pos: usize,
    period: Option<usize>,
    theta: f32,
    inverse: bool,
) {
    let d_head = d_model / n_heads;
    debug_assert_eq!(d_head % 2, 0, "rope needs an even head dim");
    let half = d_head / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| (theta as f64).powf(-2.0 * i as f64 / d_head as f64))
        .collect();
    let mut trig = vec![(0.0f64, 0.0f64); half];
    for t in 0..rows {
        let local = period.map_or(t, |p| t % p);
        let pos = (start_pos + local) as f64;
        for (slot, &freq) in trig.iter_mut().zip(&freqs) {
            let ang = if inverse { -pos * freq } else { pos * freq };
            *slot = ang.sin_cos();
        }
        let row = &mut data[t * d_model..(t + 1) * d_model];
        for h in 0..n_heads {
            let head = &mut row[h * d_head..(h + 1) * d_head];
            for (i, &(sin, cos)) in trig.iter().enumerate() {
                let (a, b) = (head[2 * i] as f64, head[2 * i + 1] as f64);
                head[2 * i] = (a * cos - b * sin) as f32;
                head[2 * i + 1] = (a * sin + b * cos) as f32;
            }
        }
    }
}
