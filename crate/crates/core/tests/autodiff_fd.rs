//! Finite-difference oracle for every tape primitive.
//!
//! Each case rebuilds the same composite twice: once on the tape (f32),
//! once as an independent f64 shadow closure. Central differences with
//! step 1e-3 on the shadow must match the tape gradient within 1e-4
//! relative error. The shadow implementations are written from the math,
//! not from the tape code.

use lab_core::autodiff::{Tape, Var};
use lab_core::rng::{rng_from_seed, LabRng};
use lab_core::tensor::Tensor;

const FD_STEP: f64 = 1e-3;
const REL_TOL: f64 = 1e-4;

fn randn(shape: &[usize], rng: &mut LabRng) -> Tensor {
    Tensor::randn(shape, 1.0, rng)
}

/// Reduce any tape node to a scalar via sum(C .* y) with a fixed probe C.
fn probe_loss(tape: &mut Tape, y: Var, probe: &Tensor) -> Var {
    let c = tape.constant(probe.clone());
    let weighted = tape.mul(y, c).unwrap();
    let ones_row = tape.constant(Tensor::new(vec![1, probe.rows()], vec![1.0; probe.rows()]).unwrap());
    let ones_col = tape.constant(Tensor::new(vec![probe.cols(), 1], vec![1.0; probe.cols()]).unwrap());
    let partial = tape.matmul(ones_row, weighted).unwrap();
    tape.matmul(partial, ones_col).unwrap()
}

fn probe_sum(y: &[Vec<f64>], probe: &Tensor) -> f64 {
    let cols = probe.cols();
    y.iter()
        .enumerate()
        .map(|(i, row)| {
            row.iter().enumerate().map(|(j, &v)| v * probe.data()[i * cols + j] as f64).sum::<f64>()
        })
        .sum()
}

/// Compare the tape gradient of `build` against central differences of
/// `shadow` with respect to one parameter.
fn fd_check(
    name: &str,
    param: &Tensor,
    build: impl Fn(&mut Tape, Var) -> Var,
    shadow: impl Fn(&[f64]) -> f64,
) {
    let mut tape = Tape::new();
    let p = tape.param(param.clone());
    let loss = build(&mut tape, p);
    assert_eq!(tape.value(loss).numel(), 1, "{name}: composite must be scalar");
    let grads = tape.backward(loss).unwrap();
    let g = grads.grad_or_zero(p);

    let base: Vec<f64> = param.data().iter().map(|&v| v as f64).collect();
    let mut worst: f64 = 0.0;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += FD_STEP;
        let mut minus = base.clone();
        minus[i] -= FD_STEP;
        let fd = (shadow(&plus) - shadow(&minus)) / (2.0 * FD_STEP);
        let ad = g.data()[i] as f64;
        let rel = (ad - fd).abs() / fd.abs().max(1e-2);
        worst = worst.max(rel);
        assert!(
            rel < REL_TOL,
            "{name}: grad[{i}] autodiff {ad} vs finite-diff {fd} (rel {rel:.2e})"
        );
    }
    eprintln!("{name}: worst relative error {worst:.2e}");
}

// ── f64 shadow math, independent of the tape ────────────────────────────

fn mat64(data: &[f64], rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows).map(|i| data[i * cols..(i + 1) * cols].to_vec()).collect()
}

fn tensor64(t: &Tensor) -> Vec<Vec<f64>> {
    let cols = t.cols();
    (0..t.rows()).map(|i| t.row(i).iter().map(|&v| v as f64).collect()).collect::<Vec<_>>()
        .iter()
        .map(|r: &Vec<f64>| r[..cols].to_vec())
        .collect()
}

fn matmul64(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (m, k, n) = (a.len(), b.len(), b[0].len());
    let mut out = vec![vec![0.0; n]; m];
    for i in 0..m {
        for kk in 0..k {
            for j in 0..n {
                out[i][j] += a[i][kk] * b[kk][j];
            }
        }
    }
    out
}

fn silu64(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn softmax64(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

fn rms_norm64(row: &[f64], w: &[f64], eps: f64) -> Vec<f64> {
    let ms = row.iter().map(|&v| v * v).sum::<f64>() / row.len() as f64;
    let inv = 1.0 / (ms + eps).sqrt();
    row.iter().zip(w).map(|(&x, &g)| x * inv * g).collect()
}

fn cross_entropy64(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let mut total = 0.0;
    for (row, &label) in logits.iter().zip(labels) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[label];
    }
    total / labels.len() as f64
}

fn rope64(x: &[Vec<f64>], n_heads: usize, start: usize, theta: f64) -> Vec<Vec<f64>> {
    let d = x[0].len();
    let dh = d / n_heads;
    let mut out = x.to_vec();
    for (t, row) in out.iter_mut().enumerate() {
        let pos = (start + t) as f64;
        for h in 0..n_heads {
            for i in 0..dh / 2 {
                let freq = theta.powf(-2.0 * i as f64 / dh as f64);
                let (s, c) = (pos * freq).sin_cos();
                let (a, b) = (row[h * dh + 2 * i], row[h * dh + 2 * i + 1]);
                row[h * dh + 2 * i] = a * c - b * s;
                row[h * dh + 2 * i + 1] = a * s + b * c;
            }
        }
    }
    out
}

// ── the primitive checks ────────────────────────────────────────────────

#[test]
fn fd_matmul() {
    let mut rng = rng_from_seed(101);
    let a = randn(&[3, 4], &mut rng);
    let b = randn(&[4, 2], &mut rng);
    let probe = randn(&[3, 2], &mut rng);
    let b64 = tensor64(&b);
    fd_check(
        "matmul",
        &a,
        |tape, p| {
            let bc = tape.constant(b.clone());
            let y = tape.matmul(p, bc).unwrap();
            probe_loss(tape, y, &probe)
        },
        |pa| probe_sum(&matmul64(&mat64(pa, 3, 4), &b64), &probe),
    );
}

#[test]
fn fd_elementwise_product() {
    let mut rng = rng_from_seed(102);
    let a = randn(&[3, 5], &mut rng);
    let b = randn(&[3, 5], &mut rng);
    let probe = randn(&[3, 5], &mut rng);
    let b64 = tensor64(&b);
    fd_check(
        "elementwise product",
        &a,
        |tape, p| {
            let bc = tape.constant(b.clone());
            let y = tape.mul(p, bc).unwrap();
            probe_loss(tape, y, &probe)
        },
        |pa| {
            let am = mat64(pa, 3, 5);
            let y: Vec<Vec<f64>> = am
                .iter()
                .zip(&b64)
                .map(|(r1, r2)| r1.iter().zip(r2).map(|(&x, &y)| x * y).collect())
                .collect();
            probe_sum(&y, &probe)
        },
    );
}

#[test]
fn fd_silu() {
    let mut rng = rng_from_seed(103);
    let a = randn(&[4, 3], &mut rng);
    let probe = randn(&[4, 3], &mut rng);
    fd_check(
        "silu",
        &a,
        |tape, p| {
            let y = tape.silu(p);
            probe_loss(tape, y, &probe)
        },
        |pa| {
            let y: Vec<Vec<f64>> = mat64(pa, 4, 3)
                .iter()
                .map(|r| r.iter().map(|&x| silu64(x)).collect())
                .collect();
            probe_sum(&y, &probe)
        },
    );
}

#[test]
fn fd_softmax() {
    let mut rng = rng_from_seed(104);
    let a = randn(&[3, 6], &mut rng);
    let probe = randn(&[3, 6], &mut rng);
    fd_check(
        "softmax",
        &a,
        |tape, p| {
            let y = tape.softmax(p).unwrap();
            probe_loss(tape, y, &probe)
        },
        |pa| {
            let y: Vec<Vec<f64>> =
                mat64(pa, 3, 6).iter().map(|r| softmax64(r)).collect();
            probe_sum(&y, &probe)
        },
    );
}

#[test]
fn fd_causal_softmax() {
    let mut rng = rng_from_seed(105);
    let a = randn(&[5, 5], &mut rng);
    let probe = randn(&[5, 5], &mut rng);
    fd_check(
        "causal softmax",
        &a,
        |tape, p| {
            let y = tape.causal_softmax(p).unwrap();
            probe_loss(tape, y, &probe)
        },
        |pa| {
            let m = mat64(pa, 5, 5);
            let mut y = vec![vec![0.0; 5]; 5];
            for i in 0..5 {
                let sm = softmax64(&m[i][..=i]);
                y[i][..=i].copy_from_slice(&sm);
            }
            probe_sum(&y, &probe)
        },
    );
}

#[test]
fn fd_rms_norm() {
    let mut rng = rng_from_seed(106);
    let x = randn(&[3, 8], &mut rng);
    let w = randn(&[8], &mut rng);
    let probe = randn(&[3, 8], &mut rng);
    let eps = 1e-5f64;
    let w64: Vec<f64> = w.data().iter().map(|&v| v as f64).collect();

    // Gradient with respect to the input rows.
    fd_check(
        "rms_norm (input)",
        &x,
        |tape, p| {
            let wc = tape.constant(w.clone());
            let y = tape.rms_norm(p, wc, eps as f32).unwrap();
            probe_loss(tape, y, &probe)
        },
        |pa| {
            let y: Vec<Vec<f64>> =
                mat64(pa, 3, 8).iter().map(|r| rms_norm64(r, &w64, eps)).collect();
            probe_sum(&y, &probe)
        },
    );

    // Gradient with respect to the gain.
    let x64 = tensor64(&x);
    fd_check(
        "rms_norm (gain)",
        &w,
        |tape, p| {
            let xc = tape.constant(x.clone());
            let y = tape.rms_norm(xc, p, eps as f32).unwrap();
            probe_loss(tape, y, &probe)
        },
        |pw| {
            let y: Vec<Vec<f64>> = x64.iter().map(|r| rms_norm64(r, pw, eps)).collect();
            probe_sum(&y, &probe)
        },
    );
}

#[test]
fn fd_cross_entropy() {
    let mut rng = rng_from_seed(107);
    let logits = randn(&[4, 9], &mut rng);
    let labels = [2usize, 0, 8, 5];
    fd_check(
        "cross-entropy",
        &logits,
        |tape, p| tape.cross_entropy_mean(p, &labels).unwrap(),
        |pl| cross_entropy64(&mat64(pl, 4, 9), &labels),
    );
}

#[test]
fn fd_mse() {
    let mut rng = rng_from_seed(108);
    let pred = randn(&[3, 4], &mut rng);
    let target = randn(&[3, 4], &mut rng);
    let t64 = tensor64(&target);
    fd_check(
        "mse",
        &pred,
        |tape, p| tape.mse_mean(p, &target).unwrap(),
        |pp| {
            let pm = mat64(pp, 3, 4);
            let mut total = 0.0;
            for (r, tr) in pm.iter().zip(&t64) {
                for (&a, &b) in r.iter().zip(tr) {
                    total += (a - b) * (a - b);
                }
            }
            total / 12.0
        },
    );
}

#[test]
fn fd_rope() {
    let mut rng = rng_from_seed(109);
    let x = randn(&[3, 8], &mut rng); // 2 heads of dim 4
    let probe = randn(&[3, 8], &mut rng);
    fd_check(
        "rope",
        &x,
        |tape, p| {
            let y = tape.rope(p, 2, 1, 10_000.0).unwrap();
            probe_loss(tape, y, &probe)
        },
        |pa| probe_sum(&rope64(&mat64(pa, 3, 8), 2, 1, 10_000.0), &probe),
    );
}

#[test]
fn fd_structural_ops() {
    let mut rng = rng_from_seed(110);
    let x = randn(&[4, 6], &mut rng);
    let probe = randn(&[2, 5], &mut rng);
    // transpose -> slice_cols -> select_rows -> scale composition.
    fd_check(
        "transpose/slice/select/scale",
        &x,
        |tape, p| {
            let t = tape.transpose(p); // [6x4]
            let s = tape.slice_cols(t, 1, 4).unwrap(); // [6x3]
            let r = tape.select_rows(s, &[0, 2]).unwrap(); // [2x3]
            let sc = tape.scale(r, 1.5).unwrap();
            let more = tape.concat_cols(sc, r).unwrap(); // [2x6]
            let cut = tape.slice_cols(more, 0, 5).unwrap(); // [2x5]
            probe_loss(tape, cut, &probe)
        },
        |pa| {
            let m = mat64(pa, 4, 6);
            let mut t = vec![vec![0.0; 4]; 6];
            for i in 0..4 {
                for j in 0..6 {
                    t[j][i] = m[i][j];
                }
            }
            let rows = [0usize, 2];
            let mut out = vec![vec![0.0; 6]; 2];
            for (oi, &ri) in rows.iter().enumerate() {
                for j in 0..3 {
                    out[oi][j] = 1.5 * t[ri][j + 1];
                    out[oi][j + 3] = t[ri][j + 1];
                }
            }
            let cut: Vec<Vec<f64>> = out.iter().map(|r| r[..5].to_vec()).collect();
            probe_sum(&cut, &probe)
        },
    );
}

#[test]
fn fd_gather_rows() {
    let mut rng = rng_from_seed(111);
    let table = randn(&[5, 3], &mut rng);
    let ids = [4usize, 0, 4, 2];
    let probe = randn(&[4, 3], &mut rng);
    fd_check(
        "gather_rows",
        &table,
        |tape, p| {
            let y = tape.gather_rows(p, &ids).unwrap();
            probe_loss(tape, y, &probe)
        },
        |pt| {
            let m = mat64(pt, 5, 3);
            let y: Vec<Vec<f64>> = ids.iter().map(|&i| m[i].clone()).collect();
            probe_sum(&y, &probe)
        },
    );
}

#[test]
fn fd_two_layer_net() {
    let mut rng = rng_from_seed(112);
    let x = randn(&[4, 8], &mut rng);
    let w1 = randn(&[8, 16], &mut rng);
    let w2 = randn(&[16, 5], &mut rng);
    let labels = [0usize, 3, 1, 4];
    let x64 = tensor64(&x);
    let w2_64 = tensor64(&w2);
    let w1_64 = tensor64(&w1);

    let forward64 = |w1m: &[Vec<f64>], w2m: &[Vec<f64>]| {
        let h: Vec<Vec<f64>> = matmul64(&x64, w1m)
            .iter()
            .map(|r| r.iter().map(|&v| silu64(v)).collect())
            .collect();
        cross_entropy64(&matmul64(&h, w2m), &labels)
    };

    fd_check(
        "two-layer net (w1)",
        &w1,
        |tape, p| {
            let xc = tape.constant(x.clone());
            let w2c = tape.constant(w2.clone());
            let pre = tape.matmul(xc, p).unwrap();
            let h = tape.silu(pre);
            let logits = tape.matmul(h, w2c).unwrap();
            tape.cross_entropy_mean(logits, &labels).unwrap()
        },
        |pw| forward64(&mat64(pw, 8, 16), &w2_64),
    );

    fd_check(
        "two-layer net (w2)",
        &w2,
        |tape, p| {
            let xc = tape.constant(x.clone());
            let w1c = tape.constant(w1.clone());
            let pre = tape.matmul(xc, w1c).unwrap();
            let h = tape.silu(pre);
            let logits = tape.matmul(h, p).unwrap();
            tape.cross_entropy_mean(logits, &labels).unwrap()
        },
        |pw| forward64(&w1_64, &mat64(pw, 16, 5)),
    );
}
