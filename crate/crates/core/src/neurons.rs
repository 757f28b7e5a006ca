//! Addition-neuron identification and analysis.
//!
//! Neurons are selected by how much of their down-projection row lies in
//! a task's output subspace (the write score), then characterized by
//! ablation, Fourier-period assignment, gate/up read-score splitting,
//! and down-row clustering.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::projection_ratio;
use crate::model::{
    argmax_row, HookAction, HookPoint, HookSpec, Positions, TransformerModel,
};
use crate::probes::FourierProbePair;
use crate::tasks::{accuracy_breakdown, BreakdownReport, Dataset, TaskKind};
use crate::tensor::Tensor;

/// omega = |R^T d| / |d|: the fraction of a vector's norm inside the
/// subspace spanned by the orthonormal columns of `basis`.
pub fn write_score(d_i: &Tensor, basis: &Tensor) -> Result<f64> {
    if d_i.norm() == 0.0 {
        return Err(Error::Numeric("write score of a zero vector is undefined".into()));
    }
    projection_ratio(d_i, basis)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NeuronSelection {
    pub layer: usize,
    pub threshold: f64,
    /// Per task: all-neuron write scores (the histogram data).
    pub omegas: Vec<(TaskKind, Vec<f64>)>,
    /// Per task: indices with omega above the threshold.
    pub selected: Vec<(TaskKind, Vec<usize>)>,
    /// Pairwise Pearson correlation of the omega vectors.
    pub pearson: Vec<(TaskKind, TaskKind, f64)>,
}

impl NeuronSelection {
    pub fn set_for(&self, task: TaskKind) -> Option<&[usize]> {
        self.selected.iter().find(|(k, _)| *k == task).map(|(_, s)| s.as_slice())
    }
}

/// Score every neuron's down row against each task's output subspace and
/// select those above the threshold.
pub fn select_neurons(
    model: &TransformerModel,
    layer: usize,
    subspaces: &[(TaskKind, &Tensor)],
    threshold: f64,
) -> Result<NeuronSelection> {
    let neurons = model.mlp_weights(layer)?;
    let mut omegas = Vec::with_capacity(subspaces.len());
    let mut selected = Vec::with_capacity(subspaces.len());
    for (task, basis) in subspaces {
        let scores: Vec<f64> = neurons
            .par_iter()
            .map(|(_, _, d_i)| write_score(d_i, basis))
            .collect::<Result<_>>()?;
        let set: Vec<usize> = scores
            .iter()
            .enumerate()
            .filter(|(_, &w)| w > threshold)
            .map(|(i, _)| i)
            .collect();
        omegas.push((*task, scores));
        selected.push((*task, set));
    }
    let mut pearson = Vec::new();
    for i in 0..omegas.len() {
        for j in (i + 1)..omegas.len() {
            pearson.push((
                omegas[i].0,
                omegas[j].0,
                pearson_r(&omegas[i].1, &omegas[j].1),
            ));
        }
    }
    Ok(NeuronSelection { layer, threshold, omegas, selected, pearson })
}

fn pearson_r(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return f64::NAN;
    }
    cov / (va * vb).sqrt()
}

// ── ablation ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    Zero,
    Flip,
    OnlyKeep,
}

impl AblationMode {
    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Zero => "zero",
            AblationMode::Flip => "flip",
            AblationMode::OnlyKeep => "only_keep",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(AblationMode::Zero),
            "flip" => Ok(AblationMode::Flip),
            "only_keep" => Ok(AblationMode::OnlyKeep),
            other => Err(Error::Domain(format!("unknown ablation mode '{other}'"))),
        }
    }
}

fn ablation_hook(
    layer: usize,
    neurons: &[usize],
    mode: AblationMode,
    whole_sequence: bool,
) -> HookSpec {
    let action = match mode {
        AblationMode::Zero => HookAction::ZeroNeurons(neurons.to_vec()),
        AblationMode::Flip => HookAction::FlipNeurons(neurons.to_vec()),
        AblationMode::OnlyKeep => HookAction::KeepOnlyNeurons(neurons.to_vec()),
    };
    HookSpec {
        layer,
        point: HookPoint::MlpCombined,
        positions: if whole_sequence { Positions::All } else { Positions::Last },
        action,
    }
}

/// Run the dataset with the neuron intervention applied (final token
/// position by default) and break accuracy down as usual.
pub fn ablate(
    model: &TransformerModel,
    dataset: &Dataset,
    layer: usize,
    neurons: &[usize],
    mode: AblationMode,
    whole_sequence: bool,
) -> Result<BreakdownReport> {
    let predictions = ablate_predictions(model, dataset, layer, neurons, mode, whole_sequence)?;
    accuracy_breakdown(&predictions, dataset)
}

pub fn ablate_predictions(
    model: &TransformerModel,
    dataset: &Dataset,
    layer: usize,
    neurons: &[usize],
    mode: AblationMode,
    whole_sequence: bool,
) -> Result<Vec<u32>> {
    let hook = ablation_hook(layer, neurons, mode, whole_sequence);
    dataset
        .prompts
        .par_iter()
        .map(|p| {
            let (logits, _) = model.run_with_hooks(&p.tokens, std::slice::from_ref(&hook))?;
            Ok(argmax_row(logits.row(p.final_pos)))
        })
        .collect()
}

// ── Fourier period assignment ───────────────────────────────────────────

/// Alignment below this leaves a neuron unassigned (under the random
/// baseline band).
pub const UNASSIGNED_ALIGNMENT: f64 = 0.2;

/// Overlap of a down row with each probe plane; returns the best period
/// and its alignment, or None below the unassigned threshold.
pub fn assign_period(
    d_i: &Tensor,
    probes: &BTreeMap<usize, FourierProbePair>,
) -> Result<(Option<usize>, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (&t, probe) in probes {
        let plane = probe.plane_basis()?;
        let score = projection_ratio(d_i, &plane)?;
        if best.map_or(true, |(_, b)| score > b) {
            best = Some((t, score));
        }
    }
    let (t, score) = best.ok_or_else(|| Error::Contract("no probes supplied".into()))?;
    if score < UNASSIGNED_ALIGNMENT {
        Ok((None, score))
    } else {
        Ok((Some(t), score))
    }
}

/// Mean best-alignment across every neuron at the layer: the gray
/// baseline band for period-assignment plots.
pub fn period_alignment_baseline(
    model: &TransformerModel,
    layer: usize,
    probes: &BTreeMap<usize, FourierProbePair>,
) -> Result<f64> {
    let planes: Vec<Tensor> =
        probes.values().map(FourierProbePair::plane_basis).collect::<Result<_>>()?;
    let neurons = model.mlp_weights(layer)?;
    let scores: Vec<f64> = neurons
        .par_iter()
        .map(|(_, _, d_i)| {
            let mut best = 0.0f64;
            for plane in &planes {
                best = best.max(projection_ratio(d_i, plane)?);
            }
            Ok(best)
        })
        .collect::<Result<_>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len().max(1) as f64)
}

// ── activation structure ────────────────────────────────────────────────

/// Combined activations (SiLU(gate) * up) at the answer position,
/// averaged over prompts sharing a pre-modulo sum. Rows follow `neurons`,
/// columns the sorted sums.
pub fn mean_activation_by_sum(
    model: &TransformerModel,
    dataset: &Dataset,
    layer: usize,
    neurons: &[usize],
) -> Result<(Vec<i64>, Vec<Vec<f64>>)> {
    let per_prompt: Vec<(i64, Vec<f32>)> = dataset
        .prompts
        .par_iter()
        .map(|p| {
            let (_, cache) = model.forward_with_cache(&p.tokens)?;
            let acts = cache.mlp_combined_act[layer].row(p.final_pos).to_vec();
            Ok((p.premod_sum, acts))
        })
        .collect::<Result<_>>()?;
    let mut by_sum: BTreeMap<i64, (usize, Vec<f64>)> = BTreeMap::new();
    for (sum, acts) in per_prompt {
        let entry = by_sum.entry(sum).or_insert_with(|| (0, vec![0.0; neurons.len()]));
        entry.0 += 1;
        for (slot, &ni) in entry.1.iter_mut().zip(neurons) {
            *slot += acts[ni] as f64;
        }
    }
    let sums: Vec<i64> = by_sum.keys().copied().collect();
    let mut matrix = vec![vec![0.0f64; sums.len()]; neurons.len()];
    for (col, (_, (count, totals))) in by_sum.iter().enumerate() {
        for (row, &total) in totals.iter().enumerate() {
            matrix[row][col] = total / *count as f64;
        }
    }
    Ok((sums, matrix))
}

// ── split vs mixed ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActivationPattern {
    Split,
    Mixed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitScores {
    pub gate_concept: f64,
    pub gate_offset: f64,
    pub up_concept: f64,
    pub up_offset: f64,
    pub pattern: ActivationPattern,
}

/// A neuron is split when, for both its gate and up vectors, one input
/// subspace's read score beats the other by at least 50%.
pub fn split_mixed_classify(
    g_i: &Tensor,
    u_i: &Tensor,
    concept_subspace: &Tensor,
    offset_subspace: &Tensor,
) -> Result<SplitScores> {
    let gate_concept = projection_ratio(g_i, concept_subspace)?;
    let gate_offset = projection_ratio(g_i, offset_subspace)?;
    let up_concept = projection_ratio(u_i, concept_subspace)?;
    let up_offset = projection_ratio(u_i, offset_subspace)?;
    let dominated = |a: f64, b: f64| a.max(b) > 1.5 * a.min(b);
    let pattern = if dominated(gate_concept, gate_offset) && dominated(up_concept, up_offset) {
        ActivationPattern::Split
    } else {
        ActivationPattern::Mixed
    };
    Ok(SplitScores { gate_concept, gate_offset, up_concept, up_offset, pattern })
}

// ── clustering ──────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Clustering {
    /// Indices into the input set, merged pairs in order: (cluster a,
    /// cluster b, distance); new cluster ids count up from n.
    pub merges: Vec<(usize, usize, f64)>,
    pub n_items: usize,
}

impl Clustering {
    /// Flat clusters from cutting the dendrogram at `max_distance`.
    pub fn flat(&self, max_distance: f64) -> Vec<Vec<usize>> {
        let mut members: Vec<Option<Vec<usize>>> =
            (0..self.n_items).map(|i| Some(vec![i])).collect();
        for &(a, b, dist) in &self.merges {
            if dist > max_distance {
                break;
            }
            let mb = members[b].take().expect("cluster consumed twice");
            let ma = members[a].take().expect("cluster consumed twice");
            let mut merged = ma;
            merged.extend(mb);
            merged.sort_unstable();
            members.push(Some(merged));
        }
        let mut out: Vec<Vec<usize>> = members.into_iter().flatten().collect();
        out.sort();
        out
    }
}

/// Average-linkage agglomerative clustering with distance 1 - |cos|.
/// Sign-insensitive on purpose: anti-aligned down rows implement the
/// same feature written in opposite directions.
pub fn cluster_by_cosine(down_rows: &[Tensor]) -> Result<Clustering> {
    let n = down_rows.len();
    if n == 0 {
        return Err(Error::Contract("clustering needs at least one vector".into()));
    }
    // Pairwise distances between original items.
    let mut dist = vec![vec![0.0f64; n]; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let na = down_rows[i].norm();
            let nb = down_rows[j].norm();
            if na == 0.0 || nb == 0.0 {
                return Err(Error::Numeric("zero vector in clustering input".into()));
            }
            let cos = down_rows[i].dot(&down_rows[j])? / (na * nb);
            let d = 1.0 - cos.abs();
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    // Active clusters as member lists; average linkage over item pairs.
    let mut clusters: Vec<(usize, Vec<usize>)> = (0..n).map(|i| (i, vec![i])).collect();
    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    let mut next_id = n;
    while clusters.len() > 1 {
        let mut best = (0usize, 1usize, f64::INFINITY);
        for a in 0..clusters.len() {
            for b in (a + 1)..clusters.len() {
                let mut total = 0.0;
                for &i in &clusters[a].1 {
                    for &j in &clusters[b].1 {
                        total += dist[i][j];
                    }
                }
                let avg = total / (clusters[a].1.len() * clusters[b].1.len()) as f64;
                if avg < best.2 {
                    best = (a, b, avg);
                }
            }
        }
        let (a, b, d) = best;
        let (id_b, members_b) = clusters.remove(b);
        let (id_a, members_a) = clusters.remove(a);
        merges.push((id_a, id_b, d));
        let mut merged = members_a;
        merged.extend(members_b);
        clusters.push((next_id, merged));
        next_id += 1;
    }
    Ok(Clustering { merges, n_items: n })
}

// ── down-projection plane diagrams ──────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanePanel {
    pub period: usize,
    /// (neuron index, cos-coordinate, sin-coordinate) of the down row
    /// scaled by its activation on the prompt.
    pub arrows: Vec<(usize, f64, f64)>,
    pub vector_sum: (f64, f64),
    /// 2 pi (sum mod T) / T.
    pub truth_angle: f64,
}

/// One panel per period: member neurons' activation-scaled down rows
/// projected onto the period's probe plane (normalized, not
/// orthogonalized probe directions), their vector sum, and the
/// ground-truth angle for the prompt's pre-modulo sum.
pub fn downproj_plane_export(
    model: &TransformerModel,
    layer: usize,
    neurons: &[usize],
    probes: &BTreeMap<usize, FourierProbePair>,
    periods: &[usize],
    prompt: &crate::tasks::PromptInstance,
) -> Result<Vec<PlanePanel>> {
    let (_, cache) = model.forward_with_cache(&prompt.tokens)?;
    let acts = cache.mlp_combined_act[layer].row(prompt.final_pos).to_vec();
    let weights = model.mlp_weights(layer)?;
    let mut panels = Vec::with_capacity(periods.len());
    for &t in periods {
        let probe = probes
            .get(&t)
            .ok_or_else(|| Error::Contract(format!("no probe for period {t}")))?;
        let unit = |w: &Tensor| -> Vec<f64> {
            let n = w.norm().max(1e-30);
            w.data().iter().map(|&x| x as f64 / n).collect()
        };
        let sin_axis = unit(&probe.w_sin);
        let cos_axis = unit(&probe.w_cos);
        let mut arrows = Vec::with_capacity(neurons.len());
        let mut total = (0.0f64, 0.0f64);
        for &ni in neurons {
            let d_i = &weights[ni].2;
            let a = acts[ni] as f64;
            let c: f64 =
                d_i.data().iter().zip(&cos_axis).map(|(&x, &w)| x as f64 * w).sum::<f64>() * a;
            let s: f64 =
                d_i.data().iter().zip(&sin_axis).map(|(&x, &w)| x as f64 * w).sum::<f64>() * a;
            total.0 += c;
            total.1 += s;
            arrows.push((ni, c, s));
        }
        let truth_angle =
            std::f64::consts::TAU * (prompt.premod_sum.rem_euclid(t as i64)) as f64 / t as f64;
        panels.push(PlanePanel { period: t, arrows, vector_sum: total, truth_angle });
    }
    Ok(panels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::qr_orthonormalize;
    use crate::rng::rng_from_seed;

    fn basis_from_cols(cols: &[Vec<f32>]) -> Tensor {
        let d = cols[0].len();
        let mut data = vec![0.0f32; d * cols.len()];
        for (j, col) in cols.iter().enumerate() {
            for i in 0..d {
                data[i * cols.len() + j] = col[i];
            }
        }
        Tensor::new(vec![d, cols.len()], data).unwrap()
    }

    fn e(d: usize, i: usize) -> Vec<f32> {
        let mut v = vec![0.0f32; d];
        v[i] = 1.0;
        v
    }

    #[test]
    fn write_score_trivial_cases() {
        let basis = basis_from_cols(&[e(6, 0), e(6, 1)]);
        let inside = Tensor::new(vec![6], vec![0.6, -0.8, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((write_score(&inside, &basis).unwrap() - 1.0).abs() < 1e-6);
        let outside = Tensor::new(vec![6], e(6, 4)).unwrap();
        assert!(write_score(&outside, &basis).unwrap() < 1e-6);
        let zero = Tensor::zeros(&[6]);
        assert!(matches!(write_score(&zero, &basis), Err(Error::Numeric(_))));
    }

    #[test]
    fn write_score_is_scale_and_basis_invariant() {
        let mut rng = rng_from_seed(2);
        let basis = qr_orthonormalize(&Tensor::randn(&[32, 5], 1.0, &mut rng)).unwrap();
        let v = Tensor::randn(&[32], 1.0, &mut rng);
        let w1 = write_score(&v, &basis).unwrap();
        let w2 = write_score(&v.scale(-3.7).unwrap(), &basis).unwrap();
        assert!((w1 - w2).abs() < 1e-6);
        let mix = qr_orthonormalize(&Tensor::randn(&[5, 5], 1.0, &mut rng)).unwrap();
        let basis2 = basis.matmul(&mix).unwrap();
        let w3 = write_score(&v, &basis2).unwrap();
        assert!((w1 - w3).abs() < 1e-5);
    }

    #[test]
    fn random_write_scores_concentrate_near_sqrt_k_over_d() {
        let mut rng = rng_from_seed(3);
        let basis = qr_orthonormalize(&Tensor::randn(&[64, 8], 1.0, &mut rng)).unwrap();
        let n = 2000;
        let mean: f64 = (0..n)
            .map(|_| write_score(&Tensor::randn(&[64], 1.0, &mut rng), &basis).unwrap())
            .sum::<f64>()
            / n as f64;
        let expect = (8.0f64 / 64.0).sqrt();
        assert!((mean - expect).abs() < 0.08, "{mean} vs {expect}");
    }

    #[test]
    fn split_mixed_hand_cases() {
        let d = 8;
        let concept = basis_from_cols(&[e(d, 0)]);
        let offset = basis_from_cols(&[e(d, 1)]);
        // Gate reads the concept, up reads the offset: split.
        let g = Tensor::new(vec![d], e(d, 0)).unwrap();
        let u = Tensor::new(vec![d], e(d, 1)).unwrap();
        let s = split_mixed_classify(&g, &u, &concept, &offset).unwrap();
        assert_eq!(s.pattern, ActivationPattern::Split);
        // Equal overlaps: mixed.
        let both = Tensor::new(
            vec![d],
            vec![0.5, 0.5, 0.70710677, 0.0, 0.0, 0.0, 0.0, 0.0],
        )
        .unwrap();
        let s = split_mixed_classify(&both, &both, &concept, &offset).unwrap();
        assert_eq!(s.pattern, ActivationPattern::Mixed);
        // Gate ratio 2.0 but up ratio 1.2: both conditions required -> mixed.
        let gate = Tensor::new(vec![d], vec![2.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let up = Tensor::new(vec![d], vec![1.2, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let s = split_mixed_classify(&gate, &up, &concept, &offset).unwrap();
        assert!((s.gate_concept / s.gate_offset - 2.0).abs() < 1e-5);
        assert!((s.up_concept / s.up_offset - 1.2).abs() < 1e-5);
        assert_eq!(s.pattern, ActivationPattern::Mixed);
    }

    #[test]
    fn clustering_recovers_planted_groups_and_ignores_sign() {
        let d = 16;
        // Two orthogonal planes; group 1 lives in the first, group 2 in
        // the second, one vector flipped.
        let mk = |i: usize, j: usize, a: f32, b: f32| {
            let mut v = vec![0.0f32; d];
            v[i] = a;
            v[j] = b;
            Tensor::new(vec![d], v).unwrap()
        };
        let rows = vec![
            mk(0, 1, 1.0, 0.2),
            mk(0, 1, 0.9, 0.3),
            mk(0, 1, -1.0, -0.25), // sign-flipped member of group 1
            mk(4, 5, 0.1, 1.0),
            mk(4, 5, 0.2, 0.95),
        ];
        let clustering = cluster_by_cosine(&rows).unwrap();
        let flat = clustering.flat(0.3);
        assert_eq!(flat.len(), 2, "{flat:?}");
        assert!(flat.contains(&vec![0, 1, 2]));
        assert!(flat.contains(&vec![3, 4]));
        // Anti-aligned pair has distance ~0.
        let two = cluster_by_cosine(&[mk(0, 1, 1.0, 0.0), mk(0, 1, -1.0, 0.0)]).unwrap();
        assert!(two.merges[0].2 < 1e-6);
        // A single vector is one singleton cluster.
        let one = cluster_by_cosine(&rows[..1]).unwrap();
        assert_eq!(one.flat(0.5), vec![vec![0]]);
    }
}
