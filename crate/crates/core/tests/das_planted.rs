//! DAS end-to-end against the planted-mechanism oracle.
//!
//! The network's output is fully determined by a known 4-dimensional
//! subspace of its 64-dimensional hidden state, so the search has exact
//! ground truth: held-out IIA must approach 1 and the recovered basis
//! must align with the planted planes.

use std::sync::Arc;
use std::time::Instant;

use lab_core::fixtures::{FourierFeatureSpace, PlantedFourierNet};
use lab_core::interventions::{
    dim_sweep, eval_iia, principal_angle_overlap, train_das, DasTrainConfig,
};
use lab_core::tensor::Tensor;

fn planted_net() -> PlantedFourierNet {
    let space = Arc::new(
        FourierFeatureSpace::random(64, &[3, 4, 5, 7, 9, 11, 13, 17, 19, 23], 42).unwrap(),
    );
    let sums: Vec<i64> = (0..480).collect();
    // Distractor planes and noise dominate the variance, so PCA init
    // cannot solve it alone and leaky bases pay a real accuracy cost.
    PlantedFourierNet::build(space, &[0, 1], &sums, 3.0, 0.4, 2.0, 43)
}

/// The large-model defaults undertrain at this scale; the fixture runs
/// hotter and longer.
fn fixture_cfg(k: usize, seed: u64) -> DasTrainConfig {
    DasTrainConfig { lr: 1e-3, epochs: 40, batch: 32, seed, ..DasTrainConfig::new(k) }
}

#[test]
fn das_recovers_the_planted_subspace() {
    let start = Instant::now();
    let net = planted_net();
    let pairs = net.make_pairs(4096, 7);
    let (test, train) = pairs.split_at(512);

    let outcome = train_das(&net, train, test, &fixture_cfg(4, 9)).unwrap();
    let cosine = principal_angle_overlap(&outcome.basis, &net.planted_subspace()).unwrap();
    eprintln!(
        "planted DAS: test IIA {:.4}, principal cosine {:.4}, losses {:?} ({:?})",
        outcome.test_iia,
        cosine,
        outcome.train_loss_per_epoch,
        start.elapsed()
    );
    assert!(outcome.test_iia >= 0.99, "IIA {}", outcome.test_iia);
    assert!(cosine >= 0.95, "principal cosine {cosine}");
    assert!(start.elapsed().as_secs() < 120, "took {:?}", start.elapsed());
}

#[test]
fn random_subspace_scores_near_base_rate() {
    let net = planted_net();
    let pairs = net.make_pairs(512, 11);
    let mut rng = lab_core::rng::rng_from_seed(5);
    let random = lab_core::linalg::qr_orthonormalize(&Tensor::randn(&[64, 4], 1.0, &mut rng))
        .unwrap();
    let iia = eval_iia(&net, &random, &pairs).unwrap();
    // A random 4-dim subspace barely moves the decoder: IIA stays near the
    // rate at which the original already matches the target (~1/24).
    assert!(iia < 0.2, "random-basis IIA {iia}");
}

#[test]
fn full_rank_das_equals_full_replacement_exactly() {
    let net = planted_net();
    let pairs = net.make_pairs(256, 13);
    let full = Tensor::eye(64);
    let das_iia = eval_iia(&net, &full, &pairs).unwrap();
    // Full replacement: patched state is exactly the counterfactual state.
    let hits = pairs
        .iter()
        .filter(|p| {
            let logits = net
                .logits_from_site(p.original, net.site_state(p.counterfactual))
                .unwrap();
            lab_core::model::argmax_row(logits.row(0)) == p.target
        })
        .count();
    let replace_iia = hits as f64 / pairs.len() as f64;
    assert_eq!(das_iia, replace_iia);
}

#[test]
fn dim_sweep_prefers_the_planted_dimension() {
    let net = planted_net();
    let pairs = net.make_pairs(2048, 17);
    let (test, train) = pairs.split_at(256);
    let sweep = dim_sweep(&net, train, test, &[1, 2, 4], &fixture_cfg(1, 21)).unwrap();
    eprintln!("dim sweep curve: {:?}", sweep.curve);
    assert_eq!(sweep.curve.len(), 3);
    assert_eq!(sweep.best_k, 4, "curve {:?}", sweep.curve);
}

use lab_core::interventions::SitePatchModel;
