//! Fourier probes and circular probes.
//!
//! Full-residual probes are affine sin/cos readouts per period, trained
//! with Adam on MSE; circular probes fit closed-form least squares on
//! PCA-reduced activations. The two stay distinct because they answer
//! different questions: "is the sum linearly readable anywhere in the
//! stream" versus "does a low-dimensional circle organize the concept".

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde_json::json;

use crate::autodiff::{Adam, Tape};
use crate::error::{Error, Result};
use crate::io::Artifact;
use crate::linalg::{least_squares, pca, projection_ratio, qr_orthonormalize};
use crate::model::{HookPoint, TransformerModel};
use crate::rng::{rng_from_seed, shuffled_indices};
use crate::tasks::Dataset;
use crate::tensor::Tensor;

pub const DEFAULT_PERIOD_RANGE: std::ops::RangeInclusive<usize> = 2..=150;

/// sin/cos targets for an integer sum at a period.
pub fn fourier_target(n: i64, period: usize) -> (f64, f64) {
    let ang = std::f64::consts::TAU * n as f64 / period as f64;
    (ang.sin(), ang.cos())
}

#[derive(Debug, Clone)]
pub struct FourierProbePair {
    pub period: usize,
    pub layer: usize,
    pub point: HookPoint,
    pub w_sin: Tensor,
    pub b_sin: f32,
    pub w_cos: Tensor,
    pub b_cos: f32,
    pub r2_sin: f64,
    pub r2_cos: f64,
}

impl FourierProbePair {
    pub fn readout(&self, h: &Tensor) -> (f64, f64) {
        let s = dot(self.w_sin.data(), h.data()) + self.b_sin as f64;
        let c = dot(self.w_cos.data(), h.data()) + self.b_cos as f64;
        (s, c)
    }

    pub fn mean_r2(&self) -> f64 {
        0.5 * (self.r2_sin + self.r2_cos)
    }

    /// Orthonormal basis of span{w_sin, w_cos}.
    pub fn plane_basis(&self) -> Result<Tensor> {
        let d = self.w_sin.numel();
        let m = Tensor::stack_rows(&[self.w_sin.clone(), self.w_cos.clone()])?.transpose();
        debug_assert_eq!(m.shape(), &[d, 2]);
        qr_orthonormalize(&m)
    }
}

fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum()
}

#[derive(Debug, Clone)]
pub struct ProbeTrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeTrainConfig {
    fn default() -> Self {
        ProbeTrainConfig { epochs: 500, lr: 1e-3, train_fraction: 0.8, seed: 0 }
    }
}

/// Train one affine probe with full-batch Adam; returns (w, b, held-out R^2).
fn train_affine_probe(
    x_train: &Tensor,
    y_train: &[f32],
    x_test: &Tensor,
    y_test: &[f32],
    cfg: &ProbeTrainConfig,
) -> Result<(Tensor, f32, f64)> {
    let d = x_train.cols();
    let mut w = Tensor::zeros(&[d, 1]);
    let mut b = Tensor::zeros(&[1]);
    let mut adam = Adam::new(cfg.lr, &[d, 1]);
    let targets = Tensor::new(vec![y_train.len(), 1], y_train.to_vec())?;
    for _ in 0..cfg.epochs {
        let mut tape = Tape::new();
        let xv = tape.constant(x_train.clone());
        let wv = tape.param(w.clone());
        let bv = tape.param(b.clone());
        let pred = tape.matmul(xv, wv)?;
        let pred = tape.add_scalar(pred, bv)?;
        let loss = tape.mse_mean(pred, &targets)?;
        let grads = tape.backward(loss)?;
        let gw = grads.grad_or_zero(wv);
        let gb = grads.grad_or_zero(bv);
        drop(tape);
        adam.step(&mut [w.data_mut(), b.data_mut()], &[gw.data(), gb.data()]);
    }
    let r2 = r_squared(x_test, y_test, &w, b.data()[0]);
    let w_flat = Tensor::new(vec![d], w.data().to_vec())?;
    Ok((w_flat, b.data()[0], r2))
}

/// 1 - SSE/SST on held-out data; can go negative.
fn r_squared(x: &Tensor, y: &[f32], w: &Tensor, b: f32) -> f64 {
    let n = y.len();
    let mean = y.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
    let mut sse = 0.0f64;
    let mut sst = 0.0f64;
    for (i, &target) in y.iter().enumerate() {
        let pred = dot(x.row(i), &w.data()[..w.numel().min(x.cols())]) + b as f64;
        sse += (pred - target as f64).powi(2);
        sst += (target as f64 - mean).powi(2);
    }
    // Near-constant targets (e.g. sin at T = 2 is identically zero):
    // score 1 when the constant is predicted, 0 otherwise.
    if sst < 1e-9 * n as f64 {
        return if sse < 1e-6 * n as f64 { 1.0 } else { 0.0 };
    }
    1.0 - sse / sst
}

fn split_rows(
    activations: &[(i64, Tensor)],
    cfg: &ProbeTrainConfig,
) -> Result<(Tensor, Vec<i64>, Tensor, Vec<i64>)> {
    if activations.len() < 4 {
        return Err(Error::Contract("probe training needs at least 4 activations".into()));
    }
    let mut rng = rng_from_seed(cfg.seed);
    let order = shuffled_indices(activations.len(), &mut rng);
    let n_train =
        ((activations.len() as f64 * cfg.train_fraction) as usize).clamp(2, activations.len() - 1);
    let gather = |ids: &[usize]| -> Result<(Tensor, Vec<i64>)> {
        let rows: Vec<Tensor> = ids.iter().map(|&i| activations[i].1.clone()).collect();
        let sums: Vec<i64> = ids.iter().map(|&i| activations[i].0).collect();
        Ok((Tensor::stack_rows(&rows)?, sums))
    };
    let (x_train, s_train) = gather(&order[..n_train])?;
    let (x_test, s_test) = gather(&order[n_train..])?;
    Ok((x_train, s_train, x_test, s_test))
}

/// Train sin and cos probes for each period against the activations'
/// integer labels (pre-modulo sums).
pub fn train_fourier_probes(
    activations: &[(i64, Tensor)],
    periods: &[usize],
    layer: usize,
    point: HookPoint,
    cfg: &ProbeTrainConfig,
) -> Result<Vec<FourierProbePair>> {
    let distinct: std::collections::HashSet<i64> =
        activations.iter().map(|&(n, _)| n).collect();
    if distinct.len() < 2 {
        return Err(Error::Training("probe training needs at least 2 distinct sums".into()));
    }
    let (x_train, s_train, x_test, s_test) = split_rows(activations, cfg)?;
    periods
        .par_iter()
        .map(|&period| {
            if period < 2 {
                return Err(Error::Contract(format!("degenerate probe period {period}")));
            }
            let targets = |sums: &[i64], sin: bool| -> Vec<f32> {
                sums.iter()
                    .map(|&n| {
                        let (s, c) = fourier_target(n, period);
                        (if sin { s } else { c }) as f32
                    })
                    .collect()
            };
            let (w_sin, b_sin, r2_sin) = train_affine_probe(
                &x_train,
                &targets(&s_train, true),
                &x_test,
                &targets(&s_test, true),
                cfg,
            )?;
            let (w_cos, b_cos, r2_cos) = train_affine_probe(
                &x_train,
                &targets(&s_train, false),
                &x_test,
                &targets(&s_test, false),
                cfg,
            )?;
            Ok(FourierProbePair {
                period,
                layer,
                point,
                w_sin,
                b_sin,
                w_cos,
                b_cos,
                r2_sin,
                r2_cos,
            })
        })
        .collect()
}

/// Mean held-out R^2 per (site, period).
#[derive(Debug, Clone)]
pub struct R2Grid {
    /// (layer, hook point) per row, in input order.
    pub sites: Vec<(usize, HookPoint)>,
    pub periods: Vec<usize>,
    /// rows x periods.
    pub values: Vec<Vec<f64>>,
}

pub fn r2_sweep(
    per_site: &[(usize, HookPoint, Vec<(i64, Tensor)>)],
    periods: &[usize],
    cfg: &ProbeTrainConfig,
) -> Result<R2Grid> {
    let mut sites = Vec::new();
    let mut values = Vec::new();
    for (layer, point, acts) in per_site {
        let probes = train_fourier_probes(acts, periods, *layer, *point, cfg)?;
        sites.push((*layer, *point));
        values.push(probes.iter().map(FourierProbePair::mean_r2).collect());
    }
    Ok(R2Grid { sites, periods: periods.to_vec(), values })
}

/// Residual activations at each prompt's answer position, labeled with
/// the pre-modulo sum.
pub fn collect_answer_activations(
    model: &TransformerModel,
    dataset: &Dataset,
    layer: usize,
    point: HookPoint,
) -> Result<Vec<(i64, Tensor)>> {
    dataset
        .prompts
        .par_iter()
        .map(|p| {
            let (_, cache) = model.forward_with_cache(&p.tokens)?;
            Ok((p.premod_sum, cache.resid_at(point, layer, p.final_pos)))
        })
        .collect()
}

/// Activations at the concept token position, labeled with the concept
/// value (for circular-probe input-geometry checks).
pub fn collect_concept_activations(
    model: &TransformerModel,
    dataset: &Dataset,
    layer: usize,
    point: HookPoint,
) -> Result<Vec<(i64, Tensor)>> {
    dataset
        .prompts
        .par_iter()
        .map(|p| {
            let (_, cache) = model.forward_with_cache(&p.tokens)?;
            Ok((p.concept_index, cache.resid_at(point, layer, p.concept_pos)))
        })
        .collect()
}

/// Phase/radius readout through a probe pair: r = sqrt(s^2 + c^2),
/// theta = atan2(s, c) so that ideал data gives theta(n) = 2 pi n / T.
pub fn project_to_plane(probes: &FourierProbePair, h: &Tensor) -> (f64, f64) {
    let (s, c) = probes.readout(h);
    (s.atan2(c), (s * s + c * c).sqrt())
}

// ── circular probes ─────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct CircularProbe {
    pub period: usize,
    pub d_pca: usize,
    pub pca_mean: Tensor,
    pub pca_components: Tensor, // [d x d_pca]
    pub w_sin: Tensor,          // [d_pca], no bias
    pub w_cos: Tensor,
    pub r2_sin: f64,
    pub r2_cos: f64,
    /// (sin readout, cos readout, concept value) per held-out example.
    pub scatter: Vec<(f64, f64, i64)>,
}

impl CircularProbe {
    pub fn mean_r2(&self) -> f64 {
        0.5 * (self.r2_sin + self.r2_cos)
    }

    pub fn readout(&self, h: &Tensor) -> (f64, f64) {
        let reduced = self.reduce(h);
        (dot(self.w_sin.data(), &reduced), dot(self.w_cos.data(), &reduced))
    }

    fn reduce(&self, h: &Tensor) -> Vec<f32> {
        let d = h.numel();
        let k = self.d_pca;
        let mut out = vec![0.0f32; k];
        for (j, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0f64;
            for i in 0..d {
                acc += (h.data()[i] as f64 - self.pca_mean.data()[i] as f64)
                    * self.pca_components.at(i, j) as f64;
            }
            *o = acc as f32;
        }
        out
    }
}

/// Fit a circular probe: PCA to `d_pca` dims, then bias-free least
/// squares against sin/cos(2 pi k / T) of the concept value k.
pub fn train_circular_probe(
    activations: &[(i64, Tensor)],
    period: usize,
    d_pca: usize,
    cfg: &ProbeTrainConfig,
) -> Result<CircularProbe> {
    if activations.len() < d_pca + 2 {
        return Err(Error::Contract(format!(
            "{} activations are too few for a {d_pca}-dim circular probe",
            activations.len()
        )));
    }
    let all_rows: Vec<Tensor> = activations.iter().map(|(_, t)| t.clone()).collect();
    let x_full = Tensor::stack_rows(&all_rows)?;
    let (components, _var) = pca(&x_full, d_pca)?;
    let mean = x_full.mean_rows();

    // Deterministic split after reduction.
    let mut rng = rng_from_seed(cfg.seed);
    let order = shuffled_indices(activations.len(), &mut rng);
    let n_train = ((activations.len() as f64 * cfg.train_fraction) as usize)
        .clamp(2, activations.len() - 1);

    let reduce = |idx: &[usize]| -> Result<(Tensor, Vec<i64>)> {
        let mut rows = Vec::with_capacity(idx.len());
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            let h = &activations[i].1;
            let mut row = vec![0.0f32; d_pca];
            for (j, r) in row.iter_mut().enumerate() {
                let mut acc = 0.0f64;
                for di in 0..h.numel() {
                    acc += (h.data()[di] as f64 - mean.data()[di] as f64)
                        * components.at(di, j) as f64;
                }
                *r = acc as f32;
            }
            rows.push(Tensor::new(vec![d_pca], row)?);
            labels.push(activations[i].0);
        }
        Ok((Tensor::stack_rows(&rows)?, labels))
    };
    let (x_train, l_train) = reduce(&order[..n_train])?;
    let (x_test, l_test) = reduce(&order[n_train..])?;

    let fit = |sin: bool| -> Result<(Tensor, f64)> {
        let y_train: Vec<f32> = l_train
            .iter()
            .map(|&k| {
                let (s, c) = fourier_target(k, period);
                (if sin { s } else { c }) as f32
            })
            .collect();
        let w = least_squares(&x_train, &Tensor::new(vec![y_train.len()], y_train)?)?;
        let y_test: Vec<f32> = l_test
            .iter()
            .map(|&k| {
                let (s, c) = fourier_target(k, period);
                (if sin { s } else { c }) as f32
            })
            .collect();
        let r2 = r_squared(&x_test, &y_test, &w, 0.0);
        Ok((w, r2))
    };
    let (w_sin, r2_sin) = fit(true)?;
    let (w_cos, r2_cos) = fit(false)?;

    let mut scatter = Vec::with_capacity(order.len() - n_train);
    for (row, &label) in (0..x_test.rows()).zip(&l_test) {
        let s = dot(x_test.row(row), w_sin.data());
        let c = dot(x_test.row(row), w_cos.data());
        scatter.push((s, c, label));
    }
    Ok(CircularProbe {
        period,
        d_pca,
        pca_mean: mean,
        pca_components: components,
        w_sin,
        w_cos,
        r2_sin,
        r2_cos,
        scatter,
    })
}

// ── probe/subspace overlap ──────────────────────────────────────────────

/// omega = |S S^T w| / |w|: the fraction of the probe direction lying in
/// the subspace.
pub fn probe_subspace_overlap(w: &Tensor, basis: &Tensor) -> Result<f64> {
    projection_ratio(w, basis)
}

/// Average the sin and cos probe overlaps per period.
pub fn period_overlap_profile(
    probes: &BTreeMap<usize, FourierProbePair>,
    basis: &Tensor,
) -> Result<Vec<(usize, f64)>> {
    probes
        .iter()
        .map(|(&t, p)| {
            let a = probe_subspace_overlap(&p.w_sin, basis)?;
            let b = probe_subspace_overlap(&p.w_cos, basis)?;
            Ok((t, 0.5 * (a + b)))
        })
        .collect()
}

/// Periods whose averaged overlap clears the threshold (the steering
/// period set). The flag is true when nothing qualified.
pub fn select_steering_periods(
    overlaps: &[(usize, f64)],
    threshold: f64,
) -> (Vec<usize>, bool) {
    let mut periods: Vec<usize> =
        overlaps.iter().filter(|&&(_, w)| w > threshold).map(|&(t, _)| t).collect();
    periods.sort_unstable();
    let empty = periods.is_empty();
    (periods, empty)
}

// ── persistence ─────────────────────────────────────────────────────────

pub fn save_fourier_probes(probes: &[FourierProbePair], path: &std::path::Path) -> Result<()> {
    if probes.is_empty() {
        return Err(Error::Contract("refusing to save an empty probe set".into()));
    }
    let meta: Vec<serde_json::Value> = probes
        .iter()
        .map(|p| {
            json!({
                "period": p.period,
                "b_sin": p.b_sin,
                "b_cos": p.b_cos,
                "r2_sin": p.r2_sin,
                "r2_cos": p.r2_cos,
            })
        })
        .collect();
    let manifest = json!({
        "kind": "fourier_probes",
        "layer": probes[0].layer,
        "hook_point": probes[0].point.name(),
        "probes": meta,
    });
    let mut art = Artifact::new(manifest);
    for p in probes {
        art.push(format!("w_sin_{}", p.period), p.w_sin.clone());
        art.push(format!("w_cos_{}", p.period), p.w_cos.clone());
    }
    art.save(path)
}

pub fn load_fourier_probes(path: &std::path::Path) -> Result<Vec<FourierProbePair>> {
    let art = Artifact::load(path)?;
    if art.manifest["kind"] != "fourier_probes" {
        return Err(Error::artifact(format!("{} is not a probe file", path.display())));
    }
    let layer = art.manifest["layer"].as_u64().unwrap_or(0) as usize;
    let point = HookPoint::parse(art.manifest["hook_point"].as_str().unwrap_or("resid_post_mlp"))?;
    let metas = art.manifest["probes"]
        .as_array()
        .ok_or_else(|| Error::artifact("probe manifest missing probe list"))?;
    let mut out = Vec::with_capacity(metas.len());
    for m in metas {
        let period = m["period"]
            .as_u64()
            .ok_or_else(|| Error::artifact("probe entry missing period"))? as usize;
        out.push(FourierProbePair {
            period,
            layer,
            point,
            w_sin: art.tensor(&format!("w_sin_{period}"))?.clone(),
            b_sin: m["b_sin"].as_f64().unwrap_or(0.0) as f32,
            w_cos: art.tensor(&format!("w_cos_{period}"))?.clone(),
            b_cos: m["b_cos"].as_f64().unwrap_or(0.0) as f32,
            r2_sin: m["r2_sin"].as_f64().unwrap_or(f64::NAN),
            r2_cos: m["r2_cos"].as_f64().unwrap_or(f64::NAN),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::planted_fourier_activations;
    use crate::rng::rng_from_seed;

    #[test]
    fn trig_targets_match_reference_values() {
        // n = 13, T = 10.
        let (s, c) = fourier_target(13, 10);
        assert!((s - 0.951057).abs() < 1e-5, "{s}");
        assert!((c - (-0.309017)).abs() < 1e-5, "{c}");
    }

    #[test]
    fn planted_features_are_recovered_with_high_r2() {
        let sums: Vec<i64> = (0..200).collect();
        let (_, acts) =
            planted_fourier_activations(64, &[5], &sums, 3.0, 0.01, 7).unwrap();
        let probes = train_fourier_probes(
            &acts,
            &[5],
            0,
            HookPoint::ResidPostMlp,
            &ProbeTrainConfig::default(),
        )
        .unwrap();
        assert!(probes[0].r2_sin > 0.99, "sin r2 {}", probes[0].r2_sin);
        assert!(probes[0].r2_cos > 0.99, "cos r2 {}", probes[0].r2_cos);
    }

    #[test]
    fn constant_activations_score_nonpositive_r2() {
        let acts: Vec<(i64, Tensor)> = (0..40)
            .map(|n| (n, Tensor::new(vec![8], vec![1.0; 8]).unwrap()))
            .collect();
        let probes = train_fourier_probes(
            &acts,
            &[7],
            0,
            HookPoint::ResidPostMlp,
            &ProbeTrainConfig::default(),
        )
        .unwrap();
        assert!(probes[0].r2_sin <= 0.0);
        assert!(probes[0].r2_cos <= 0.0);
    }

    #[test]
    fn one_distinct_sum_is_a_training_error() {
        let acts: Vec<(i64, Tensor)> =
            (0..10).map(|_| (3, Tensor::zeros(&[4]))).collect();
        let err = train_fourier_probes(
            &acts,
            &[5],
            0,
            HookPoint::ResidPostMlp,
            &ProbeTrainConfig::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::Training(_)));
    }

    #[test]
    fn probe_readout_is_affine() {
        let mut rng = rng_from_seed(3);
        let probe = FourierProbePair {
            period: 5,
            layer: 0,
            point: HookPoint::ResidPostMlp,
            w_sin: Tensor::randn(&[16], 1.0, &mut rng),
            b_sin: 0.3,
            w_cos: Tensor::randn(&[16], 1.0, &mut rng),
            b_cos: -0.2,
            r2_sin: 1.0,
            r2_cos: 1.0,
        };
        let h1 = Tensor::randn(&[16], 1.0, &mut rng);
        let h2 = Tensor::randn(&[16], 1.0, &mut rng);
        let alpha = 0.3f64;
        let blend = Tensor::new(
            vec![16],
            h1.data()
                .iter()
                .zip(h2.data())
                .map(|(&a, &b)| (alpha * a as f64 + (1.0 - alpha) * b as f64) as f32)
                .collect(),
        )
        .unwrap();
        let (s1, c1) = probe.readout(&h1);
        let (s2, c2) = probe.readout(&h2);
        let (sb, cb) = probe.readout(&blend);
        assert!((sb - (alpha * s1 + (1.0 - alpha) * s2)).abs() < 1e-5);
        assert!((cb - (alpha * c1 + (1.0 - alpha) * c2)).abs() < 1e-5);
    }

    #[test]
    fn plane_projection_conventions() {
        let w_sin = Tensor::new(vec![2], vec![1.0, 0.0]).unwrap();
        let w_cos = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
        let probe = FourierProbePair {
            period: 5,
            layer: 0,
            point: HookPoint::ResidPostMlp,
            w_sin,
            b_sin: 0.0,
            w_cos,
            b_cos: 0.0,
            r2_sin: 1.0,
            r2_cos: 1.0,
        };
        // (s, c) = (0, 1) -> theta 0, r 1.
        let (theta, r) = project_to_plane(&probe, &Tensor::new(vec![2], vec![0.0, 1.0]).unwrap());
        assert!(theta.abs() < 1e-6 && (r - 1.0).abs() < 1e-6);
        // (s, c) = (1, 0) -> theta pi/2, r 1.
        let (theta, r) = project_to_plane(&probe, &Tensor::new(vec![2], vec![1.0, 0.0]).unwrap());
        assert!((theta - std::f64::consts::FRAC_PI_2).abs() < 1e-6 && (r - 1.0).abs() < 1e-6);
    }

    #[test]
    fn planted_phase_is_recovered() {
        let sums: Vec<i64> = (0..200).collect();
        let (space, acts) =
            planted_fourier_activations(48, &[5], &sums, 3.0, 0.01, 9).unwrap();
        let probes = train_fourier_probes(
            &acts,
            &[5],
            0,
            HookPoint::ResidPostMlp,
            &ProbeTrainConfig::default(),
        )
        .unwrap();
        // Fresh ideal activation for n = 7.
        let mut rng = rng_from_seed(100);
        let h = space.encode(7, 3.0, 0.0, &mut rng);
        let (theta, _r) = project_to_plane(&probes[0], &h);
        let expect = (std::f64::consts::TAU * 7.0 / 5.0) % std::f64::consts::TAU;
        let diff = (theta.rem_euclid(std::f64::consts::TAU) - expect).abs();
        let diff = diff.min(std::f64::consts::TAU - diff);
        assert!(diff < 0.05, "phase error {diff}");
    }

    #[test]
    fn phase_equivariance_under_rotation() {
        let sums: Vec<i64> = (0..200).collect();
        let (space, acts) =
            planted_fourier_activations(48, &[8], &sums, 3.0, 0.0, 21).unwrap();
        let probes = train_fourier_probes(
            &acts,
            &[8],
            0,
            HookPoint::ResidPostMlp,
            &ProbeTrainConfig::default(),
        )
        .unwrap();
        let mut rng = rng_from_seed(5);
        let h0 = space.encode(3, 3.0, 0.0, &mut rng);
        let (t0, _) = project_to_plane(&probes[0], &h0);
        // Advance the planted angle by one step: delta = 2 pi / 8.
        let h1 = space.encode(4, 3.0, 0.0, &mut rng);
        let (t1, _) = project_to_plane(&probes[0], &h1);
        let delta = (t1 - t0).rem_euclid(std::f64::consts::TAU);
        let expect = std::f64::consts::TAU / 8.0;
        assert!((delta - expect).abs() < 0.02, "delta {delta} vs {expect}");
    }

    #[test]
    fn r2_sweep_peaks_at_planted_cells_only() {
        let sums: Vec<i64> = (0..200).collect();
        let (_, planted) =
            planted_fourier_activations(64, &[2, 5, 10], &sums, 3.0, 0.01, 31).unwrap();
        let mut rng = rng_from_seed(32);
        let noise_only: Vec<(i64, Tensor)> =
            sums.iter().map(|&n| (n, Tensor::randn(&[64], 1.0, &mut rng))).collect();
        let periods = [2usize, 3, 5, 7, 9, 10, 11, 13];
        let grid = r2_sweep(
            &[
                (0, HookPoint::ResidPostMlp, planted),
                (1, HookPoint::ResidPostMlp, noise_only),
            ],
            &periods,
            &ProbeTrainConfig::default(),
        )
        .unwrap();
        assert_eq!(grid.values.len(), 2);
        assert_eq!(grid.values[0].len(), periods.len());
        for (pi, &t) in periods.iter().enumerate() {
            let planted_cell = grid.values[0][pi];
            let noise_cell = grid.values[1][pi];
            if [2, 5, 10].contains(&t) {
                assert!(planted_cell >= 0.99, "T={t} planted cell {planted_cell}");
            } else {
                assert!(planted_cell <= 0.2, "T={t} control cell {planted_cell}");
            }
            assert!(noise_cell <= 0.5, "T={t} noise cell {noise_cell}");
        }
    }

    #[test]
    fn circular_probe_on_realizable_plane_is_exact() {
        // Activations that ARE sin/cos on a plane inside the top PCs.
        let d = 12;
        let concepts: Vec<i64> = (0..28).map(|i| i % 7).collect();
        let acts: Vec<(i64, Tensor)> = concepts
            .iter()
            .map(|&k| {
                let (s, c) = fourier_target(k, 7);
                let mut v = vec![0.0f32; d];
                v[0] = 3.0 * s as f32;
                v[1] = 3.0 * c as f32;
                (k, Tensor::new(vec![d], v).unwrap())
            })
            .collect();
        let probe =
            train_circular_probe(&acts, 7, 5, &ProbeTrainConfig::default()).unwrap();
        assert!(probe.r2_sin > 1.0 - 1e-6, "sin r2 {}", probe.r2_sin);
        assert!(probe.r2_cos > 1.0 - 1e-6, "cos r2 {}", probe.r2_cos);
    }

    #[test]
    fn circular_probe_misses_structure_outside_top_pcs() {
        // Five high-variance noise dims bury a faint circle in dims 5, 6.
        let mut rng = rng_from_seed(77);
        let concepts: Vec<i64> = (0..140).map(|i| i % 7).collect();
        let acts: Vec<(i64, Tensor)> = concepts
            .iter()
            .map(|&k| {
                let (s, c) = fourier_target(k, 7);
                let mut v = vec![0.0f32; 8];
                for vi in v.iter_mut().take(5) {
                    *vi = 20.0 * crate::rng::sample_normal(&mut rng) as f32;
                }
                v[5] = 0.05 * s as f32;
                v[6] = 0.05 * c as f32;
                (k, Tensor::new(vec![8], v).unwrap())
            })
            .collect();
        let probe =
            train_circular_probe(&acts, 7, 5, &ProbeTrainConfig::default()).unwrap();
        assert!(probe.mean_r2() < 0.5, "recovered despite PCA burial: {}", probe.mean_r2());
    }

    #[test]
    fn circular_probe_weekday_points_are_equally_spaced() {
        let concepts: Vec<i64> = (0..70).map(|i| i % 7 + 1).collect();
        let acts: Vec<(i64, Tensor)> = concepts
            .iter()
            .map(|&k| {
                let (s, c) = fourier_target(k, 7);
                let mut v = vec![0.0f32; 10];
                v[2] = 2.0 * s as f32;
                v[3] = 2.0 * c as f32;
                v[4] = 0.5; // constant direction, removed by centering
                (k, Tensor::new(vec![10], v).unwrap())
            })
            .collect();
        let probe =
            train_circular_probe(&acts, 7, 5, &ProbeTrainConfig::default()).unwrap();
        // Group scatter by concept and check angular spacing ~ 2 pi / 7.
        let mut angles: std::collections::BTreeMap<i64, f64> = Default::default();
        for &(s, c, k) in &probe.scatter {
            angles.entry(k).or_insert_with(|| s.atan2(c));
        }
        assert_eq!(angles.len(), 7);
        let spacing = std::f64::consts::TAU / 7.0;
        for (&k, &a) in &angles {
            let expect = (spacing * k as f64).rem_euclid(std::f64::consts::TAU);
            let diff = (a.rem_euclid(std::f64::consts::TAU) - expect).abs();
            let diff = diff.min(std::f64::consts::TAU - diff);
            assert!(diff < 0.05, "concept {k}: angle {a} vs {expect}");
        }
    }

    #[test]
    fn overlap_trivial_and_monte_carlo_cases() {
        let mut rng = rng_from_seed(55);
        let basis = qr_orthonormalize(&Tensor::randn(&[64, 8], 1.0, &mut rng)).unwrap();
        // w inside the span.
        let coeff = Tensor::randn(&[8, 1], 1.0, &mut rng);
        let inside = basis.matmul(&coeff).unwrap();
        let inside = Tensor::new(vec![64], inside.data().to_vec()).unwrap();
        assert!((probe_subspace_overlap(&inside, &basis).unwrap() - 1.0).abs() < 1e-5);
        // Random w concentrates near sqrt(k/d).
        let n = 400;
        let mean: f64 = (0..n)
            .map(|_| {
                let w = Tensor::randn(&[64], 1.0, &mut rng);
                probe_subspace_overlap(&w, &basis).unwrap()
            })
            .sum::<f64>()
            / n as f64;
        let expect = (8.0f64 / 64.0).sqrt();
        assert!((mean - expect).abs() < 0.08, "mean {mean} vs {expect}");
    }

    #[test]
    fn steering_period_selection() {
        let profile = vec![(2, 0.8), (3, 0.1), (5, 0.75), (7, 0.05), (10, 0.9)];
        let (periods, empty) = select_steering_periods(&profile, 0.4);
        assert_eq!(periods, vec![2, 5, 10]);
        assert!(!empty);
        let (all, _) = select_steering_periods(&profile, 0.0);
        assert_eq!(all.len(), 5);
        let (none, warn) = select_steering_periods(&profile, 2.0);
        assert!(none.is_empty() && warn);
    }

    #[test]
    fn probe_files_roundtrip() {
        let sums: Vec<i64> = (0..80).collect();
        let (_, acts) = planted_fourier_activations(16, &[4], &sums, 2.0, 0.05, 3).unwrap();
        let probes = train_fourier_probes(
            &acts,
            &[4, 6],
            2,
            HookPoint::ResidPostAttn,
            &ProbeTrainConfig { epochs: 50, ..Default::default() },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("probes.fp");
        save_fourier_probes(&probes, &path).unwrap();
        let back = load_fourier_probes(&path).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].period, 4);
        assert_eq!(back[0].layer, 2);
        assert_eq!(back[0].w_sin, probes[0].w_sin);
        assert!((back[1].b_cos - probes[1].b_cos).abs() < 1e-6);
    }
}
