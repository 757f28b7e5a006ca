//! Interchange patching and distributed alignment search.
//!
//! A `SitePatchModel` is anything that exposes a residual state per
//! example and a (differentiable) continuation from that state to answer
//! logits. The transformer provides one via cached tail runs; planted
//! synthetic networks provide another, which is how the search machinery
//! is tested against known ground truth.

use std::collections::HashMap;

use rayon::prelude::*;
use serde_json::json;

use crate::autodiff::{Adam, Tape, Var};
use crate::error::{Error, Result};
use crate::io::Artifact;
use crate::linalg::{gram_deviation, pca, qr_orthonormalize, svd};
use crate::model::{
    argmax_row, ActivationCache, HookAction, HookPoint, HookSpec, Positions, TailContext,
    TransformerModel,
};
use crate::rng::{rng_from_seed, shuffled_indices};
use crate::tasks::{CausalVariable, CounterfactualPair, PromptInstance, TaskKind};
use crate::tensor::Tensor;

// ── Eq.-style subspace replacement ──────────────────────────────────────

/// h_o + R (R^T h_c - R^T h_o). At full rank this is exactly h_c.
pub fn das_patch(h_o: &Tensor, h_c: &Tensor, basis: &Tensor) -> Result<Tensor> {
    if h_o.shape() != h_c.shape() || basis.rank() != 2 || basis.rows() != h_o.numel() {
        return Err(Error::Dimension(format!(
            "das_patch on h {:?} / {:?} with basis {:?}",
            h_o.shape(),
            h_c.shape(),
            basis.shape()
        )));
    }
    let dev = gram_deviation(basis);
    if dev > 1e-4 {
        return Err(Error::Contract(format!(
            "subspace columns are not orthonormal (gram deviation {dev:.2e})"
        )));
    }
    let (d, k) = (basis.rows(), basis.cols());
    if k == d {
        return Ok(h_c.clone());
    }
    let mut out: Vec<f64> = h_o.data().iter().map(|&v| v as f64).collect();
    let mut coeff = vec![0.0f64; k];
    for j in 0..k {
        let mut c = 0.0f64;
        for i in 0..d {
            c += basis.at(i, j) as f64 * (h_c.data()[i] as f64 - h_o.data()[i] as f64);
        }
        coeff[j] = c;
    }
    for i in 0..d {
        for (j, &c) in coeff.iter().enumerate() {
            out[i] += basis.at(i, j) as f64 * c;
        }
    }
    Ok(Tensor::from_raw(
        h_o.shape().to_vec(),
        out.iter().map(|&v| v as f32).collect(),
    ))
}

// ── the patchable-model abstraction ─────────────────────────────────────

/// One example's (original, counterfactual, causal target) triple,
/// indexed into a `SitePatchModel`'s example table.
#[derive(Debug, Clone, Copy)]
pub struct PatchPair {
    pub original: usize,
    pub counterfactual: usize,
    pub target: u32,
}

pub trait SitePatchModel: Sync {
    fn d_model(&self) -> usize;
    fn n_examples(&self) -> usize;
    /// Residual state at the analysis site, shape [d].
    fn site_state(&self, ex: usize) -> &Tensor;
    /// Continuation from a (possibly patched) site state to logits [1 x V].
    fn logits_from_site(&self, ex: usize, h: &Tensor) -> Result<Tensor>;
    /// The same continuation on a tape, for optimization through it.
    fn logits_on_tape(&self, tape: &mut Tape, ex: usize, h: Var) -> Result<Var>;
}

/// Transformer adapter: caches per-prompt site states and the key/value
/// context needed to re-run only the final position downstream.
pub struct TransformerSiteRunner<'m> {
    pub model: &'m TransformerModel,
    pub layer: usize,
    pub point: HookPoint,
    pub prompts: Vec<PromptInstance>,
    states: Vec<Tensor>,
    tails: Vec<TailContext>,
}

impl<'m> TransformerSiteRunner<'m> {
    pub fn build(
        model: &'m TransformerModel,
        prompts: Vec<PromptInstance>,
        layer: usize,
        point: HookPoint,
    ) -> Result<Self> {
        let per_prompt: Vec<(Tensor, TailContext)> = prompts
            .par_iter()
            .map(|p| {
                let (_, cache) = model.forward_with_cache(&p.tokens)?;
                let h = cache.resid_at(point, layer, p.final_pos);
                let tail = TailContext::from_cache(model, &cache, layer, point)?;
                Ok((h, tail))
            })
            .collect::<Result<_>>()?;
        let (states, tails) = per_prompt.into_iter().unzip();
        Ok(TransformerSiteRunner { model, layer, point, prompts, states, tails })
    }
}

impl SitePatchModel for TransformerSiteRunner<'_> {
    fn d_model(&self) -> usize {
        self.model.config.d_model
    }

    fn n_examples(&self) -> usize {
        self.prompts.len()
    }

    fn site_state(&self, ex: usize) -> &Tensor {
        &self.states[ex]
    }

    fn logits_from_site(&self, ex: usize, h: &Tensor) -> Result<Tensor> {
        self.model.tail_logits(h, &self.tails[ex])
    }

    fn logits_on_tape(&self, tape: &mut Tape, ex: usize, h: Var) -> Result<Var> {
        self.model.tail_logits_on_tape(tape, h, &self.tails[ex])
    }
}

/// Deduplicate the prompts referenced by counterfactual pairs and build
/// a site runner plus index pairs over it.
pub fn build_site_pairs<'m>(
    model: &'m TransformerModel,
    pairs: &[CounterfactualPair],
    layer: usize,
    point: HookPoint,
) -> Result<(TransformerSiteRunner<'m>, Vec<PatchPair>)> {
    let mut index: HashMap<Vec<u32>, usize> = HashMap::new();
    let mut prompts: Vec<PromptInstance> = Vec::new();
    let mut intern = |p: &PromptInstance| -> usize {
        match index.get(&p.tokens) {
            Some(&i) => i,
            None => {
                let i = prompts.len();
                index.insert(p.tokens.clone(), i);
                prompts.push(p.clone());
                i
            }
        }
    };
    let idx_pairs: Vec<PatchPair> = pairs
        .iter()
        .map(|cp| PatchPair {
            original: intern(&cp.original),
            counterfactual: intern(&cp.counterfactual),
            target: cp.target_label,
        })
        .collect();
    let runner = TransformerSiteRunner::build(model, prompts, layer, point)?;
    Ok((runner, idx_pairs))
}

// ── residual-stream patching (coarse localization) ──────────────────────

/// Run the counterfactual, then re-run the original with the full
/// residual vector at (layer, point, position) replaced by the
/// counterfactual's. Returns the patched logits.
pub fn residual_patch(
    model: &TransformerModel,
    original: &PromptInstance,
    counterfactual: &PromptInstance,
    layer: usize,
    point: HookPoint,
    position: usize,
) -> Result<Tensor> {
    let (_, source_cache) = model.forward_with_cache(&counterfactual.tokens)?;
    residual_patch_from_cache(model, original, &source_cache, layer, point, position)
}

pub fn residual_patch_from_cache(
    model: &TransformerModel,
    original: &PromptInstance,
    source_cache: &ActivationCache,
    layer: usize,
    point: HookPoint,
    position: usize,
) -> Result<Tensor> {
    if position >= source_cache.seq_len() || position >= original.tokens.len() {
        return Err(Error::Hook(format!("patch position {position} out of range")));
    }
    let source = source_cache.resid_at(point, layer, position);
    let hooks = vec![HookSpec {
        layer,
        point,
        positions: Positions::These(vec![position]),
        action: HookAction::ReplaceFull(source),
    }];
    let (logits, _) = model.run_with_hooks(&original.tokens, &hooks)?;
    Ok(logits)
}

// ── subspaces ───────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct Subspace {
    /// [d_model x k], orthonormal columns.
    pub basis: Tensor,
    pub task: Option<TaskKind>,
    pub variable: Option<CausalVariable>,
    pub layer: usize,
    pub point: HookPoint,
    pub test_iia: f64,
    /// Set when PCA could not supply k components at the requested
    /// variance and the init fell back to the top-k PCs.
    pub pca_fallback: bool,
}

impl Subspace {
    pub fn k(&self) -> usize {
        self.basis.cols()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let manifest = json!({
            "kind": "subspace",
            "task": self.task.map(|t| t.name()),
            "variable": self.variable.map(|v| v.name()),
            "layer": self.layer,
            "hook_point": self.point.name(),
            "k": self.k(),
            "test_iia": self.test_iia,
            "pca_fallback": self.pca_fallback,
        });
        let mut art = Artifact::new(manifest);
        art.push("basis", self.basis.clone());
        art.save(path)
    }

    pub fn load(path: &std::path::Path) -> Result<Subspace> {
        let art = Artifact::load(path)?;
        if art.manifest["kind"] != "subspace" {
            return Err(Error::artifact(format!("{} is not a subspace file", path.display())));
        }
        let basis = art.tensor("basis")?.clone();
        let dev = gram_deviation(&basis);
        if dev > 1e-4 {
            return Err(Error::artifact(format!(
                "stored subspace basis is not orthonormal (gram deviation {dev:.2e})"
            )));
        }
        let task = art.manifest["task"].as_str().map(TaskKind::parse).transpose()?;
        let variable =
            art.manifest["variable"].as_str().map(CausalVariable::parse).transpose()?;
        Ok(Subspace {
            basis,
            task,
            variable,
            layer: art.manifest["layer"].as_u64().unwrap_or(0) as usize,
            point: HookPoint::parse(
                art.manifest["hook_point"].as_str().unwrap_or("resid_post_attn"),
            )?,
            test_iia: art.manifest["test_iia"].as_f64().unwrap_or(f64::NAN),
            pca_fallback: art.manifest["pca_fallback"].as_bool().unwrap_or(false),
        })
    }
}

/// Concatenate two bases and re-orthonormalize; rank-deficient columns
/// drop out, so the result spans span(a) + span(b).
pub fn union_subspace(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    qr_orthonormalize(&a.concat_cols(b)?)
}

/// Mean cosine of the principal angles between two subspaces: the mean
/// of the singular values of A^T B.
pub fn principal_angle_overlap(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.rows() != b.rows() {
        return Err(Error::Dimension("principal angles need equal ambient dimension".into()));
    }
    let product = a.transpose().matmul(b)?;
    let (_, s, _) = svd(&product)?;
    let k = a.cols().min(b.cols());
    Ok(s.data().iter().take(k).map(|&v| v as f64).sum::<f64>() / k as f64)
}

#[derive(Debug, Clone)]
pub struct OverlapBaseline {
    pub mean: f64,
    pub std: f64,
    pub samples: Vec<f64>,
}

/// Mean-cosine distribution over uniformly random orthonormal subspace
/// pairs; the null band subspace overlaps are compared against.
pub fn random_overlap_baseline(
    d: usize,
    k_a: usize,
    k_b: usize,
    n_pairs: usize,
    seed: u64,
) -> Result<OverlapBaseline> {
    let mut rng = rng_from_seed(seed);
    let mut samples = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let a = qr_orthonormalize(&Tensor::randn(&[d, k_a], 1.0, &mut rng))?;
        let b = qr_orthonormalize(&Tensor::randn(&[d, k_b], 1.0, &mut rng))?;
        samples.push(principal_angle_overlap(&a, &b)?);
    }
    let mean = samples.iter().sum::<f64>() / n_pairs as f64;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / n_pairs as f64;
    Ok(OverlapBaseline { mean, std: var.sqrt(), samples })
}

// ── DAS training ────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct DasTrainConfig {
    pub k: usize,
    pub epochs: usize,
    pub lr: f32,
    pub batch: usize,
    pub pca_init_variance: f64,
    pub seed: u64,
}

impl DasTrainConfig {
    pub fn new(k: usize) -> DasTrainConfig {
        DasTrainConfig { k, epochs: 8, lr: 1e-4, batch: 16, pca_init_variance: 0.90, seed: 0 }
    }
}

#[derive(Debug, Clone)]
pub struct DasOutcome {
    pub basis: Tensor,
    pub test_iia: f64,
    pub pca_fallback: bool,
    pub train_loss_per_epoch: Vec<f64>,
}

/// Interchange accuracy of a patched model: the fraction of pairs where
/// the argmax of the patched logits equals the causal target.
pub fn eval_iia(
    target: &dyn SitePatchModel,
    basis: &Tensor,
    pairs: &[PatchPair],
) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Contract("eval_iia on an empty pair set".into()));
    }
    let hits: Vec<bool> = pairs
        .par_iter()
        .map(|pair| {
            let patched = das_patch(
                target.site_state(pair.original),
                target.site_state(pair.counterfactual),
                basis,
            )?;
            let logits = target.logits_from_site(pair.original, &patched)?;
            Ok(argmax_row(logits.row(0)) == pair.target)
        })
        .collect::<Result<_>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / pairs.len() as f64)
}

/// Optimize an orthonormal basis so that patching within it realizes the
/// causal targets: Adam on interchange cross-entropy, PCA-span init, QR
/// retraction after every step.
pub fn train_das(
    target: &dyn SitePatchModel,
    train_pairs: &[PatchPair],
    test_pairs: &[PatchPair],
    cfg: &DasTrainConfig,
) -> Result<DasOutcome> {
    let d = target.d_model();
    if cfg.k == 0 || cfg.k > d {
        return Err(Error::Contract(format!("subspace dimension {} outside 1..={d}", cfg.k)));
    }
    if train_pairs.is_empty() {
        return Err(Error::Contract("train_das needs at least one pair".into()));
    }

    let (mut basis, pca_fallback) = init_basis(target, train_pairs, cfg)?;
    let mut adam = Adam::new(cfg.lr, &[d * cfg.k]);
    let mut rng = rng_from_seed(cfg.seed);
    let mut loss_curve = Vec::with_capacity(cfg.epochs);

    for _epoch in 0..cfg.epochs {
        let order = shuffled_indices(train_pairs.len(), &mut rng);
        let mut epoch_loss = 0.0f64;
        for chunk in order.chunks(cfg.batch) {
            let mut tape = Tape::new();
            let r = tape.param(basis.clone());
            let rt = tape.transpose(r);
            let mut losses = Vec::with_capacity(chunk.len());
            for &pi in chunk {
                let pair = &train_pairs[pi];
                let h_o = tape.constant(as_row(target.site_state(pair.original)));
                let h_c = tape.constant(as_row(target.site_state(pair.counterfactual)));
                let co = tape.matmul(h_o, r)?;
                let cc = tape.matmul(h_c, r)?;
                let diff = tape.sub(cc, co)?;
                let delta = tape.matmul(diff, rt)?;
                let patched = tape.add(h_o, delta)?;
                let logits = target.logits_on_tape(&mut tape, pair.original, patched)?;
                losses.push(tape.cross_entropy_mean(logits, &[pair.target as usize])?);
            }
            let mut total = losses[0];
            for &l in &losses[1..] {
                total = tape.add(total, l)?;
            }
            let loss = tape.scale(total, 1.0 / chunk.len() as f32)?;
            epoch_loss += tape.value(loss).data()[0] as f64 * chunk.len() as f64;
            let grads = tape.backward(loss)?;
            let grad = grads.grad_or_zero(r);
            drop(tape);

            adam.step(&mut [basis.data_mut()], &[grad.data()]);
            basis = qr_orthonormalize(&basis)?;
            if basis.cols() != cfg.k {
                return Err(Error::Numeric(format!(
                    "subspace rank collapsed to {} during optimization",
                    basis.cols()
                )));
            }
        }
        loss_curve.push(epoch_loss / train_pairs.len() as f64);
    }

    let test_iia = if test_pairs.is_empty() {
        f64::NAN
    } else {
        eval_iia(target, &basis, test_pairs)?
    };
    Ok(DasOutcome { basis, test_iia, pca_fallback, train_loss_per_epoch: loss_curve })
}

/// Initialize inside the span of the top principal components explaining
/// at least `pca_init_variance` of the site activations.
fn init_basis(
    target: &dyn SitePatchModel,
    train_pairs: &[PatchPair],
    cfg: &DasTrainConfig,
) -> Result<(Tensor, bool)> {
    let d = target.d_model();
    let mut seen = std::collections::HashSet::new();
    let mut rows: Vec<Tensor> = Vec::new();
    for pair in train_pairs {
        for ex in [pair.original, pair.counterfactual] {
            if seen.insert(ex) {
                rows.push(target.site_state(ex).clone());
            }
        }
    }
    // Cap the PCA input; the variance structure saturates quickly.
    const PCA_ROW_CAP: usize = 2048;
    if rows.len() > PCA_ROW_CAP {
        let stride = rows.len().div_ceil(PCA_ROW_CAP);
        rows = rows.into_iter().step_by(stride).collect();
    }
    let x = Tensor::stack_rows(&rows)?;
    let max_k = x.rows().min(x.cols()).saturating_sub(1).max(1);
    let (components, variance) = pca(&x, max_k)?;
    let total: f64 = variance.data().iter().map(|&v| v as f64).sum();
    let mut m = max_k;
    if total > 0.0 {
        let mut acc = 0.0f64;
        for (i, &v) in variance.data().iter().enumerate() {
            acc += v as f64;
            if acc / total >= cfg.pca_init_variance {
                m = i + 1;
                break;
            }
        }
    }
    let fallback = m < cfg.k;
    if fallback {
        m = cfg.k.min(max_k);
    }
    if m < cfg.k {
        // Degenerate data; fill out with random directions and let QR sort it out.
        let mut rng = rng_from_seed(cfg.seed ^ 0x9d5f);
        let r = qr_orthonormalize(&Tensor::randn(&[d, cfg.k], 1.0, &mut rng))?;
        return Ok((r, true));
    }
    // Random k-frame inside the span of the top-m components.
    let mut rng = rng_from_seed(cfg.seed);
    let mixer = qr_orthonormalize(&Tensor::randn(&[m, cfg.k], 1.0, &mut rng))?;
    let top = slice_cols(&components, m);
    let r = top.matmul(&mixer)?;
    Ok((qr_orthonormalize(&r)?, fallback))
}

fn slice_cols(m: &Tensor, k: usize) -> Tensor {
    let (rows, cols) = (m.rows(), m.cols());
    let mut data = Vec::with_capacity(rows * k);
    for i in 0..rows {
        data.extend_from_slice(&m.data()[i * cols..i * cols + k]);
    }
    Tensor::from_raw(vec![rows, k], data)
}

fn as_row(h: &Tensor) -> Tensor {
    Tensor::from_raw(vec![1, h.numel()], h.data().to_vec())
}

// ── dimension sweep ─────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct DimSweep {
    pub curve: Vec<(usize, f64)>,
    pub best_k: usize,
    pub best: DasOutcome,
}

/// Train one subspace per k and keep the best held-out IIA, breaking
/// exact ties toward smaller k.
pub fn dim_sweep(
    target: &dyn SitePatchModel,
    train_pairs: &[PatchPair],
    test_pairs: &[PatchPair],
    k_values: &[usize],
    base_cfg: &DasTrainConfig,
) -> Result<DimSweep> {
    if k_values.is_empty() {
        return Err(Error::Contract("dim_sweep needs at least one k".into()));
    }
    let outcomes: Vec<(usize, DasOutcome)> = k_values
        .par_iter()
        .map(|&k| {
            let cfg = DasTrainConfig {
                k,
                seed: crate::rng::derive_seed(base_cfg.seed, &format!("dim_sweep/k{k}")),
                ..base_cfg.clone()
            };
            Ok((k, train_das(target, train_pairs, test_pairs, &cfg)?))
        })
        .collect::<Result<_>>()?;
    let curve: Vec<(usize, f64)> = outcomes.iter().map(|(k, o)| (*k, o.test_iia)).collect();
    let (best_k, best) = outcomes
        .into_iter()
        .reduce(|best, cand| if cand.1.test_iia > best.1.test_iia { cand } else { best })
        .expect("non-empty");
    Ok(DimSweep { curve, best_k, best })
}

// ── cross-task patching ─────────────────────────────────────────────────

/// Patch a source-run site state into a target example within a shared
/// (union) subspace and return the target's patched logits.
pub fn cross_task_patch(
    target: &dyn SitePatchModel,
    target_ex: usize,
    source_state: &Tensor,
    union_basis: &Tensor,
) -> Result<Tensor> {
    let patched = das_patch(target.site_state(target_ex), source_state, union_basis)?;
    target.logits_from_site(target_ex, &patched)
}
