//! Decoder-only transformer with Llama-style gated MLPs.
//!
//! Pre-norm RMS blocks, rotary positions, and per-layer hook points on
//! the residual stream (`resid_post_attn`, `resid_post_mlp`) and on the
//! MLP's combined neuron activations. Three forward paths share the same
//! kernels: a caching no-grad pass, a hooked pass, and a tape pass for
//! training and subspace optimization.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::{Adam, Tape, Var};
use crate::error::{Error, Result};
use crate::io::Artifact;
use crate::kernels::{rms_norm_row, rope_apply, silu, softmax_inplace};
use crate::linalg::gram_deviation;
use crate::rng::rng_from_seed;
use crate::tasks::{Dataset, TaskKind};
use crate::tensor::{matmul_kernel, Tensor};

// ── configuration ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub rms_norm_epsilon: f32,
    pub rope_theta: f32,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale default: big enough for periodic structure to emerge,
    /// small enough for minutes-scale CPU training.
    pub fn desk_default(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            n_layers: 4,
            d_model: 128,
            n_heads: 4,
            d_mlp: 512,
            vocab_size,
            max_seq_len: 16,
            rms_norm_epsilon: 1e-5,
            rope_theta: 10_000.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if (self.d_model / self.n_heads) % 2 != 0 {
            return Err(Error::Config("head dimension must be even for rotary positions".into()));
        }
        if self.n_layers == 0 || self.vocab_size == 0 || self.max_seq_len == 0 {
            return Err(Error::Config("degenerate model extents".into()));
        }
        Ok(())
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub attn_norm: Arc<Tensor>, // [d]
    pub wq: Arc<Tensor>,        // [d x d]
    pub wk: Arc<Tensor>,
    pub wv: Arc<Tensor>,
    pub wo: Arc<Tensor>,
    pub mlp_norm: Arc<Tensor>, // [d]
    /// Column i is neuron i's gate vector g_i.
    pub w_gate: Arc<Tensor>, // [d x d_mlp]
    /// Column i is neuron i's up vector u_i.
    pub w_up: Arc<Tensor>, // [d x d_mlp]
    /// Row i is neuron i's down-projection row d_i.
    pub w_down: Arc<Tensor>, // [d_mlp x d]
}

#[derive(Debug, Clone)]
pub struct TransformerModel {
    pub config: ModelConfig,
    pub embed: Arc<Tensor>,      // [vocab x d]
    pub layers: Vec<LayerWeights>,
    pub final_norm: Arc<Tensor>, // [d]
    pub unembed: Arc<Tensor>,    // [d x vocab]
}

impl TransformerModel {
    pub fn init(config: ModelConfig) -> Result<TransformerModel> {
        config.validate()?;
        let mut rng = rng_from_seed(config.seed);
        let d = config.d_model;
        let std = 0.02f32;
        // Residual-writing projections get the usual depth-scaled init.
        let out_std = std / (2.0 * config.n_layers as f32).sqrt();
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerWeights {
                attn_norm: Arc::new(ones(d)),
                wq: Arc::new(Tensor::randn(&[d, d], std, &mut rng)),
                wk: Arc::new(Tensor::randn(&[d, d], std, &mut rng)),
                wv: Arc::new(Tensor::randn(&[d, d], std, &mut rng)),
                wo: Arc::new(Tensor::randn(&[d, d], out_std, &mut rng)),
                mlp_norm: Arc::new(ones(d)),
                w_gate: Arc::new(Tensor::randn(&[d, config.d_mlp], std, &mut rng)),
                w_up: Arc::new(Tensor::randn(&[d, config.d_mlp], std, &mut rng)),
                w_down: Arc::new(Tensor::randn(&[config.d_mlp, d], out_std, &mut rng)),
            });
        }
        Ok(TransformerModel {
            embed: Arc::new(Tensor::randn(&[config.vocab_size, d], std, &mut rng)),
            final_norm: Arc::new(ones(d)),
            // Zero-init head: answer-position loss starts at exactly ln(V).
            unembed: Arc::new(Tensor::zeros(&[d, config.vocab_size])),
            layers,
            config,
        })
    }

    /// Canonical parameter order (names align with checkpoint records).
    pub fn param_names(&self) -> Vec<String> {
        let mut names = vec!["embed".to_string()];
        for i in 0..self.config.n_layers {
            for f in ["attn_norm", "wq", "wk", "wv", "wo", "mlp_norm", "w_gate", "w_up", "w_down"]
            {
                names.push(format!("layer{i}.{f}"));
            }
        }
        names.push("final_norm".into());
        names.push("unembed".into());
        names
    }

    pub fn params(&self) -> Vec<Arc<Tensor>> {
        let mut ps = vec![self.embed.clone()];
        for l in &self.layers {
            ps.extend([
                l.attn_norm.clone(),
                l.wq.clone(),
                l.wk.clone(),
                l.wv.clone(),
                l.wo.clone(),
                l.mlp_norm.clone(),
                l.w_gate.clone(),
                l.w_up.clone(),
                l.w_down.clone(),
            ]);
        }
        ps.push(self.final_norm.clone());
        ps.push(self.unembed.clone());
        ps
    }

    fn params_mut(&mut self) -> Vec<&mut Arc<Tensor>> {
        let mut ps: Vec<&mut Arc<Tensor>> = vec![&mut self.embed];
        for l in &mut self.layers {
            ps.push(&mut l.attn_norm);
            ps.push(&mut l.wq);
            ps.push(&mut l.wk);
            ps.push(&mut l.wv);
            ps.push(&mut l.wo);
            ps.push(&mut l.mlp_norm);
            ps.push(&mut l.w_gate);
            ps.push(&mut l.w_up);
            ps.push(&mut l.w_down);
        }
        ps.push(&mut self.final_norm);
        ps.push(&mut self.unembed);
        ps
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    /// Per-neuron weight triples (g_i, u_i, d_i) at a layer.
    pub fn mlp_weights(&self, layer: usize) -> Result<Vec<(Tensor, Tensor, Tensor)>> {
        let lw = self
            .layers
            .get(layer)
            .ok_or_else(|| Error::Dimension(format!("layer {layer} out of range")))?;
        let mut out = Vec::with_capacity(self.config.d_mlp);
        for i in 0..self.config.d_mlp {
            out.push((lw.w_gate.column(i), lw.w_up.column(i), row_tensor(&lw.w_down, i)));
        }
        Ok(out)
    }
}

fn ones(n: usize) -> Tensor {
    Tensor::from_raw(vec![n], vec![1.0; n])
}

fn row_tensor(m: &Tensor, i: usize) -> Tensor {
    Tensor::from_raw(vec![m.cols()], m.row(i).to_vec())
}

// ── hooks ───────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HookPoint {
    ResidPostAttn,
    ResidPostMlp,
    /// The gate*up product before the down projection.
    MlpCombined,
}

impl HookPoint {
    pub fn name(self) -> &'static str {
        match self {
            HookPoint::ResidPostAttn => "resid_post_attn",
            HookPoint::ResidPostMlp => "resid_post_mlp",
            HookPoint::MlpCombined => "mlp_combined",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "resid_post_attn" | "post_attn" => Ok(HookPoint::ResidPostAttn),
            "resid_post_mlp" | "post_mlp" => Ok(HookPoint::ResidPostMlp),
            "mlp_combined" => Ok(HookPoint::MlpCombined),
            other => Err(Error::Domain(format!("unknown hook point '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Positions {
    All,
    Last,
    These(Vec<usize>),
}

impl Positions {
    fn resolve(&self, seq_len: usize) -> Result<Vec<usize>> {
        match self {
            Positions::All => Ok((0..seq_len).collect()),
            Positions::Last => Ok(vec![seq_len - 1]),
            Positions::These(v) => {
                if let Some(&bad) = v.iter().find(|&&p| p >= seq_len) {
                    return Err(Error::Hook(format!(
                        "position {bad} out of range for sequence length {seq_len}"
                    )));
                }
                Ok(v.clone())
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum HookAction {
    /// Replace the residual vector. Rank-1 [d] replaces every listed
    /// position; rank-2 [L x d] replaces position p with its row p.
    ReplaceFull(Tensor),
    /// Eq.-style subspace swap toward `source` within `basis` ([d x k],
    /// orthonormal columns).
    ReplaceSubspace { basis: Tensor, source: Tensor },
    AddVector(Tensor),
    SetNeurons { indices: Vec<usize>, values: Vec<f32> },
    ZeroNeurons(Vec<usize>),
    FlipNeurons(Vec<usize>),
    KeepOnlyNeurons(Vec<usize>),
}

impl HookAction {
    fn is_residual(&self) -> bool {
        matches!(
            self,
            HookAction::ReplaceFull(_)
                | HookAction::ReplaceSubspace { .. }
                | HookAction::AddVector(_)
        )
    }

    fn is_replacing(&self) -> bool {
        matches!(self, HookAction::ReplaceFull(_) | HookAction::ReplaceSubspace { .. })
    }
}

#[derive(Debug, Clone)]
pub struct HookSpec {
    pub layer: usize,
    pub point: HookPoint,
    pub positions: Positions,
    pub action: HookAction,
}

fn validate_hooks(model: &TransformerModel, hooks: &[HookSpec], seq_len: usize) -> Result<()> {
    let cfg = &model.config;
    let mut replaced: Vec<(usize, HookPoint, usize)> = Vec::new();
    for h in hooks {
        if h.layer >= cfg.n_layers {
            return Err(Error::Hook(format!("hook layer {} out of range", h.layer)));
        }
        let positions = h.positions.resolve(seq_len)?;
        match (&h.action, h.point) {
            (a, HookPoint::MlpCombined) if a.is_residual() => {
                return Err(Error::Hook("residual action attached to a neuron site".into()))
            }
            (a, HookPoint::ResidPostAttn | HookPoint::ResidPostMlp) if !a.is_residual() => {
                return Err(Error::Hook("neuron action attached to a residual site".into()))
            }
            _ => {}
        }
        match &h.action {
            HookAction::ReplaceFull(t) | HookAction::AddVector(t) => {
                let ok = (t.rank() == 1 && t.numel() == cfg.d_model)
                    || (t.rank() == 2 && t.cols() == cfg.d_model && t.rows() >= seq_len);
                if !ok {
                    return Err(Error::Hook(format!(
                        "residual hook tensor has shape {:?}, want [{}] or [>= {seq_len} x {}]",
                        t.shape(),
                        cfg.d_model,
                        cfg.d_model
                    )));
                }
            }
            HookAction::ReplaceSubspace { basis, source } => {
                if basis.rank() != 2 || basis.rows() != cfg.d_model {
                    return Err(Error::Hook(format!(
                        "subspace basis shape {:?} does not match d_model {}",
                        basis.shape(),
                        cfg.d_model
                    )));
                }
                if gram_deviation(basis) > 1e-4 {
                    return Err(Error::Contract(format!(
                        "subspace basis is not orthonormal (gram deviation {:.2e})",
                        gram_deviation(basis)
                    )));
                }
                let ok = (source.rank() == 1 && source.numel() == cfg.d_model)
                    || (source.rank() == 2 && source.cols() == cfg.d_model);
                if !ok {
                    return Err(Error::Hook("subspace source has the wrong shape".into()));
                }
            }
            HookAction::SetNeurons { indices, values } => {
                if indices.len() != values.len() {
                    return Err(Error::Hook("set_neurons index/value length mismatch".into()));
                }
                check_neuron_indices(indices, cfg.d_mlp)?;
            }
            HookAction::ZeroNeurons(ix)
            | HookAction::FlipNeurons(ix)
            | HookAction::KeepOnlyNeurons(ix) => check_neuron_indices(ix, cfg.d_mlp)?,
        }
        if h.action.is_replacing() {
            for &p in &positions {
                let site = (h.layer, h.point, p);
                if replaced.contains(&site) {
                    return Err(Error::Hook(format!(
                        "conflicting residual replacements at layer {} {} position {p}",
                        h.layer,
                        h.point.name()
                    )));
                }
                replaced.push(site);
            }
        }
    }
    Ok(())
}

fn check_neuron_indices(ix: &[usize], d_mlp: usize) -> Result<()> {
    if let Some(&bad) = ix.iter().find(|&&i| i >= d_mlp) {
        return Err(Error::Hook(format!("neuron index {bad} out of range {d_mlp}")));
    }
    Ok(())
}

// ── activation cache ────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ActivationCache {
    pub resid_post_attn: Vec<Tensor>, // per layer [L x d]
    pub resid_post_mlp: Vec<Tensor>,
    pub mlp_gate_act: Vec<Tensor>, // SiLU(gate pre-activation), [L x d_mlp]
    pub mlp_up_act: Vec<Tensor>,
    pub mlp_combined_act: Vec<Tensor>,
    /// Roped keys / values per layer, [L x d]; reused by tail runs.
    pub keys: Vec<Tensor>,
    pub values: Vec<Tensor>,
    pub logits: Tensor, // [L x vocab]
}

impl ActivationCache {
    pub fn resid(&self, point: HookPoint, layer: usize) -> &Tensor {
        match point {
            HookPoint::ResidPostAttn => &self.resid_post_attn[layer],
            HookPoint::ResidPostMlp => &self.resid_post_mlp[layer],
            HookPoint::MlpCombined => &self.mlp_combined_act[layer],
        }
    }

    /// Residual vector at one position.
    pub fn resid_at(&self, point: HookPoint, layer: usize, pos: usize) -> Tensor {
        row_tensor(self.resid(point, layer), pos)
    }

    pub fn seq_len(&self) -> usize {
        self.logits.rows()
    }
}

// ── forward passes ──────────────────────────────────────────────────────

impl TransformerModel {
    pub fn forward_with_cache(&self, tokens: &[u32]) -> Result<(Tensor, ActivationCache)> {
        self.run_with_hooks(tokens, &[])
    }

    /// Forward pass applying each hook at its site before downstream
    /// computation. The cache records post-hook activations.
    pub fn run_with_hooks(
        &self,
        tokens: &[u32],
        hooks: &[HookSpec],
    ) -> Result<(Tensor, ActivationCache)> {
        let cfg = &self.config;
        let l = tokens.len();
        if l == 0 || l > cfg.max_seq_len {
            return Err(Error::Dimension(format!(
                "sequence length {l} outside 1..={}",
                cfg.max_seq_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::Dimension(format!("token {bad} outside vocabulary")));
        }
        validate_hooks(self, hooks, l)?;
        let d = cfg.d_model;

        let mut resid = vec![0.0f32; l * d];
        for (t, &tok) in tokens.iter().enumerate() {
            resid[t * d..(t + 1) * d].copy_from_slice(self.embed.row(tok as usize));
        }

        let mut cache = ActivationCache {
            resid_post_attn: Vec::with_capacity(cfg.n_layers),
            resid_post_mlp: Vec::with_capacity(cfg.n_layers),
            mlp_gate_act: Vec::with_capacity(cfg.n_layers),
            mlp_up_act: Vec::with_capacity(cfg.n_layers),
            mlp_combined_act: Vec::with_capacity(cfg.n_layers),
            keys: Vec::with_capacity(cfg.n_layers),
            values: Vec::with_capacity(cfg.n_layers),
            logits: Tensor::zeros(&[1]),
        };

        for (layer_idx, lw) in self.layers.iter().enumerate() {
            // Attention sublayer.
            let mut normed = vec![0.0f32; l * d];
            for t in 0..l {
                rms_norm_row(
                    &resid[t * d..(t + 1) * d],
                    lw.attn_norm.data(),
                    cfg.rms_norm_epsilon,
                    &mut normed[t * d..(t + 1) * d],
                );
            }
            let mut q = vec![0.0f32; l * d];
            let mut k = vec![0.0f32; l * d];
            let mut v = vec![0.0f32; l * d];
            matmul_kernel(&normed, lw.wq.data(), l, d, d, &mut q);
            matmul_kernel(&normed, lw.wk.data(), l, d, d, &mut k);
            matmul_kernel(&normed, lw.wv.data(), l, d, d, &mut v);
            rope_apply(&mut q, l, d, cfg.n_heads, 0, cfg.rope_theta, false);
            rope_apply(&mut k, l, d, cfg.n_heads, 0, cfg.rope_theta, false);

            let mix = causal_attention_mix(&q, &k, &v, l, d, cfg.n_heads);
            let mut attn_out = vec![0.0f32; l * d];
            matmul_kernel(&mix, lw.wo.data(), l, d, d, &mut attn_out);
            for (r, a) in resid.iter_mut().zip(&attn_out) {
                *r += a;
            }

            apply_residual_hooks(hooks, layer_idx, HookPoint::ResidPostAttn, &mut resid, l, d)?;
            cache.resid_post_attn.push(Tensor::from_raw(vec![l, d], resid.clone()));
            cache.keys.push(Tensor::from_raw(vec![l, d], k));
            cache.values.push(Tensor::from_raw(vec![l, d], v));

            // Gated MLP sublayer.
            let mut normed = vec![0.0f32; l * d];
            for t in 0..l {
                rms_norm_row(
                    &resid[t * d..(t + 1) * d],
                    lw.mlp_norm.data(),
                    cfg.rms_norm_epsilon,
                    &mut normed[t * d..(t + 1) * d],
                );
            }
            let dm = cfg.d_mlp;
            let mut gate_pre = vec![0.0f32; l * dm];
            let mut up = vec![0.0f32; l * dm];
            matmul_kernel(&normed, lw.w_gate.data(), l, d, dm, &mut gate_pre);
            matmul_kernel(&normed, lw.w_up.data(), l, d, dm, &mut up);
            let gate_act: Vec<f32> = gate_pre.iter().map(|&x| silu(x)).collect();
            let mut combined: Vec<f32> =
                gate_act.iter().zip(&up).map(|(&g, &u)| g * u).collect();

            apply_neuron_hooks(hooks, layer_idx, &mut combined, l, dm)?;
            cache.mlp_gate_act.push(Tensor::from_raw(vec![l, dm], gate_act));
            cache.mlp_up_act.push(Tensor::from_raw(vec![l, dm], up));
            cache.mlp_combined_act.push(Tensor::from_raw(vec![l, dm], combined.clone()));

            let mut mlp_out = vec![0.0f32; l * d];
            matmul_kernel(&combined, lw.w_down.data(), l, dm, d, &mut mlp_out);
            for (r, m) in resid.iter_mut().zip(&mlp_out) {
                *r += m;
            }

            apply_residual_hooks(hooks, layer_idx, HookPoint::ResidPostMlp, &mut resid, l, d)?;
            cache.resid_post_mlp.push(Tensor::from_raw(vec![l, d], resid.clone()));
        }

        let mut normed = vec![0.0f32; l * d];
        for t in 0..l {
            rms_norm_row(
                &resid[t * d..(t + 1) * d],
                self.final_norm.data(),
                cfg.rms_norm_epsilon,
                &mut normed[t * d..(t + 1) * d],
            );
        }
        let mut logits = vec![0.0f32; l * cfg.vocab_size];
        matmul_kernel(&normed, self.unembed.data(), l, d, cfg.vocab_size, &mut logits);
        let logits = Tensor::from_raw(vec![l, cfg.vocab_size], logits);
        logits.check_finite()?;
        cache.logits = logits.clone();
        Ok((logits, cache))
    }

    /// Argmax prediction at each prompt's answer position.
    pub fn predict(&self, prompts: &[crate::tasks::PromptInstance]) -> Result<Vec<u32>> {
        use rayon::prelude::*;
        prompts
            .par_iter()
            .map(|p| {
                let (logits, _) = self.forward_with_cache(&p.tokens)?;
                Ok(argmax_row(logits.row(p.final_pos)))
            })
            .collect()
    }
}

fn causal_attention_mix(
    q: &[f32],
    k: &[f32],
    v: &[f32],
    l: usize,
    d: usize,
    n_heads: usize,
) -> Vec<f32> {
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut mix = vec![0.0f32; l * d];
    let mut scores = vec![0.0f32; l];
    let mut acc = vec![0.0f64; dh];
    for h in 0..n_heads {
        let off = h * dh;
        for t in 0..l {
            let qrow = &q[t * d + off..t * d + off + dh];
            for (s, srow) in scores.iter_mut().take(t + 1).enumerate() {
                let krow = &k[s * d + off..s * d + off + dh];
                *srow = (crate::tensor::dot_f64(qrow, krow) * scale) as f32;
            }
            softmax_inplace(&mut scores[..=t]);
            acc.iter_mut().for_each(|x| *x = 0.0);
            for s in 0..=t {
                let w = scores[s] as f64;
                let vrow = &v[s * d + off..s * d + off + dh];
                for (o, &vv) in acc.iter_mut().zip(vrow) {
                    *o += w * vv as f64;
                }
            }
            for (o, &a) in mix[t * d + off..t * d + off + dh].iter_mut().zip(&acc) {
                *o = a as f32;
            }
        }
    }
    mix
}

fn apply_residual_hooks(
    hooks: &[HookSpec],
    layer: usize,
    point: HookPoint,
    resid: &mut [f32],
    l: usize,
    d: usize,
) -> Result<()> {
    for h in hooks.iter().filter(|h| h.layer == layer && h.point == point) {
        let positions = h.positions.resolve(l)?;
        for &p in &positions {
            let row = &mut resid[p * d..(p + 1) * d];
            match &h.action {
                HookAction::ReplaceFull(src) => {
                    row.copy_from_slice(source_row(src, p));
                }
                HookAction::AddVector(src) => {
                    for (r, &s) in row.iter_mut().zip(source_row(src, p)) {
                        *r += s;
                    }
                }
                HookAction::ReplaceSubspace { basis, source } => {
                    subspace_patch_row(row, source_row(source, p), basis);
                }
                _ => unreachable!("validated residual-only"),
            }
        }
    }
    Ok(())
}

fn source_row<'a>(src: &'a Tensor, pos: usize) -> &'a [f32] {
    if src.rank() == 1 {
        src.data()
    } else {
        src.row(pos)
    }
}

/// row <- row + R (R^T src - R^T row), computed in f64.
fn subspace_patch_row(row: &mut [f32], src: &[f32], basis: &Tensor) {
    let (d, k) = (basis.rows(), basis.cols());
    debug_assert_eq!(row.len(), d);
    let mut coeff = vec![0.0f64; k];
    for j in 0..k {
        let mut c = 0.0f64;
        for i in 0..d {
            c += basis.at(i, j) as f64 * (src[i] as f64 - row[i] as f64);
        }
        coeff[j] = c;
    }
    for i in 0..d {
        let mut delta = 0.0f64;
        for (j, &c) in coeff.iter().enumerate() {
            delta += basis.at(i, j) as f64 * c;
        }
        row[i] = (row[i] as f64 + delta) as f32;
    }
}

fn apply_neuron_hooks(
    hooks: &[HookSpec],
    layer: usize,
    combined: &mut [f32],
    l: usize,
    d_mlp: usize,
) -> Result<()> {
    for h in hooks.iter().filter(|h| h.layer == layer && h.point == HookPoint::MlpCombined) {
        let positions = h.positions.resolve(l)?;
        for &p in &positions {
            let row = &mut combined[p * d_mlp..(p + 1) * d_mlp];
            match &h.action {
                HookAction::SetNeurons { indices, values } => {
                    for (&i, &v) in indices.iter().zip(values) {
                        row[i] = v;
                    }
                }
                HookAction::ZeroNeurons(ix) => {
                    for &i in ix {
                        row[i] = 0.0;
                    }
                }
                HookAction::FlipNeurons(ix) => {
                    for &i in ix {
                        row[i] = -row[i];
                    }
                }
                HookAction::KeepOnlyNeurons(keep) => {
                    let mut mask = vec![false; d_mlp];
                    for &i in keep {
                        mask[i] = true;
                    }
                    for (x, &m) in row.iter_mut().zip(&mask) {
                        if !m {
                            *x = 0.0;
                        }
                    }
                }
                _ => unreachable!("validated neuron-only"),
            }
        }
    }
    Ok(())
}

pub fn argmax_row(row: &[f32]) -> u32 {
    let mut best = 0usize;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

// ── tape forward (training) ─────────────────────────────────────────────

pub struct ParamVars {
    pub vars: Vec<Var>,
}

impl TransformerModel {
    /// Enter all parameters into a tape once, in canonical order.
    pub fn params_on_tape(&self, tape: &mut Tape) -> ParamVars {
        let vars = self.params().into_iter().map(|p| tape.param_shared(p)).collect();
        ParamVars { vars }
    }

    fn layer_vars<'a>(&self, pv: &'a ParamVars, layer: usize) -> &'a [Var] {
        &pv.vars[1 + layer * 9..1 + (layer + 1) * 9]
    }

    /// Full differentiable forward for one prompt; returns logits at the
    /// answer position, shape [1 x vocab].
    pub fn answer_logits_on_tape(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        tokens: &[u32],
        answer_pos: usize,
    ) -> Result<Var> {
        let cfg = &self.config;
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let embed = pv.vars[0];
        let mut resid = tape.gather_rows(embed, &ids)?;
        for layer in 0..cfg.n_layers {
            let lv = self.layer_vars(pv, layer);
            let (attn_norm, wq, wk, wv, wo) = (lv[0], lv[1], lv[2], lv[3], lv[4]);
            let (mlp_norm, w_gate, w_up, w_down) = (lv[5], lv[6], lv[7], lv[8]);

            let normed = tape.rms_norm(resid, attn_norm, cfg.rms_norm_epsilon)?;
            let q = tape.matmul(normed, wq)?;
            let k = tape.matmul(normed, wk)?;
            let v = tape.matmul(normed, wv)?;
            let q = tape.rope(q, cfg.n_heads, 0, cfg.rope_theta)?;
            let k = tape.rope(k, cfg.n_heads, 0, cfg.rope_theta)?;
            let mix = self.attention_on_tape(tape, q, k, v, None)?;
            let attn_out = tape.matmul(mix, wo)?;
            resid = tape.add(resid, attn_out)?;

            let normed = tape.rms_norm(resid, mlp_norm, cfg.rms_norm_epsilon)?;
            let gate = tape.matmul(normed, w_gate)?;
            let gate = tape.silu(gate);
            let up = tape.matmul(normed, w_up)?;
            let combined = tape.mul(gate, up)?;
            let mlp_out = tape.matmul(combined, w_down)?;
            resid = tape.add(resid, mlp_out)?;
        }
        let final_norm = pv.vars[pv.vars.len() - 2];
        let unembed = pv.vars[pv.vars.len() - 1];
        let answer = tape.select_rows(resid, &[answer_pos])?;
        let normed = tape.rms_norm(answer, final_norm, cfg.rms_norm_epsilon)?;
        tape.matmul(normed, unembed)
    }

    /// Sum of answer-position cross-entropies for a group of same-length
    /// prompts, computed with the big row-wise ops batched into single
    /// GEMMs. Attention still runs per sequence.
    pub fn group_loss_on_tape(
        &self,
        tape: &mut Tape,
        pv: &ParamVars,
        prompts: &[&crate::tasks::PromptInstance],
    ) -> Result<Var> {
        let cfg = &self.config;
        let seq_len = prompts
            .first()
            .map(|p| p.tokens.len())
            .ok_or_else(|| Error::Contract("empty prompt group".into()))?;
        if prompts.iter().any(|p| p.tokens.len() != seq_len) {
            return Err(Error::Contract("group prompts must share a length".into()));
        }
        let b = prompts.len();
        let ids: Vec<usize> =
            prompts.iter().flat_map(|p| p.tokens.iter().map(|&t| t as usize)).collect();
        let embed = pv.vars[0];
        let mut resid = tape.gather_rows(embed, &ids)?;
        let row_ranges: Vec<Vec<usize>> =
            (0..b).map(|i| (i * seq_len..(i + 1) * seq_len).collect()).collect();
        for layer in 0..cfg.n_layers {
            let lv = self.layer_vars(pv, layer);
            let (attn_norm, wq, wk, wv, wo) = (lv[0], lv[1], lv[2], lv[3], lv[4]);
            let (mlp_norm, w_gate, w_up, w_down) = (lv[5], lv[6], lv[7], lv[8]);

            let normed = tape.rms_norm(resid, attn_norm, cfg.rms_norm_epsilon)?;
            let q = tape.matmul(normed, wq)?;
            let k = tape.matmul(normed, wk)?;
            let v = tape.matmul(normed, wv)?;
            let q = tape.rope_periodic(q, cfg.n_heads, seq_len, cfg.rope_theta)?;
            let k = tape.rope_periodic(k, cfg.n_heads, seq_len, cfg.rope_theta)?;
            let mut mixes = Vec::with_capacity(b);
            for rows in &row_ranges {
                let qi = tape.select_rows(q, rows)?;
                let ki = tape.select_rows(k, rows)?;
                let vi = tape.select_rows(v, rows)?;
                mixes.push(self.attention_on_tape(tape, qi, ki, vi, None)?);
            }
            let mix = tape.concat_rows_many(&mixes)?;
            let attn_out = tape.matmul(mix, wo)?;
            resid = tape.add(resid, attn_out)?;

            let normed = tape.rms_norm(resid, mlp_norm, cfg.rms_norm_epsilon)?;
            let gate = tape.matmul(normed, w_gate)?;
            let gate = tape.silu(gate);
            let up = tape.matmul(normed, w_up)?;
            let combined = tape.mul(gate, up)?;
            let mlp_out = tape.matmul(combined, w_down)?;
            resid = tape.add(resid, mlp_out)?;
        }
        let final_norm = pv.vars[pv.vars.len() - 2];
        let unembed = pv.vars[pv.vars.len() - 1];
        let answer_rows: Vec<usize> =
            prompts.iter().enumerate().map(|(i, p)| i * seq_len + p.final_pos).collect();
        let answers = tape.select_rows(resid, &answer_rows)?;
        let normed = tape.rms_norm(answers, final_norm, cfg.rms_norm_epsilon)?;
        let logits = tape.matmul(normed, unembed)?;
        let labels: Vec<usize> = prompts.iter().map(|p| p.gold as usize).collect();
        let mean = tape.cross_entropy_mean(logits, &labels)?;
        tape.scale(mean, b as f32)
    }

    /// Multi-head attention on the tape. With `kv_prefix` set, `q` is a
    /// single row at absolute position `prefix_len` and the cached prefix
    /// rows are treated as constants (the tail-run fast path).
    fn attention_on_tape(
        &self,
        tape: &mut Tape,
        q: Var,
        k: Var,
        v: Var,
        kv_prefix: Option<(Var, Var)>,
    ) -> Result<Var> {
        let cfg = &self.config;
        let dh = cfg.d_head();
        let scale = 1.0 / (dh as f32).sqrt();
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = tape.slice_cols(q, lo, hi)?;
            let mut kh = tape.slice_cols(k, lo, hi)?;
            let mut vh = tape.slice_cols(v, lo, hi)?;
            if let Some((kp, vp)) = kv_prefix {
                let kph = tape.slice_cols(kp, lo, hi)?;
                let vph = tape.slice_cols(vp, lo, hi)?;
                kh = tape.concat_rows(kph, kh)?;
                vh = tape.concat_rows(vph, vh)?;
            }
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale)?;
            let probs = if kv_prefix.is_some() {
                // Single query at the final position attends everything.
                tape.softmax(scores)?
            } else {
                tape.causal_softmax(scores)?
            };
            heads.push(tape.matmul(probs, vh)?);
        }
        let mut mix = heads[0];
        for &h in &heads[1..] {
            mix = tape.concat_cols(mix, h)?;
        }
        Ok(mix)
    }
}

/// Cached context for re-running only the final position from a patch
/// site to the logits.
pub struct TailContext {
    pub layer: usize,
    pub point: HookPoint,
    /// Per downstream layer: roped keys / values for all positions
    /// before the last one.
    pub kv_prefix: Vec<(Arc<Tensor>, Arc<Tensor>)>,
    pub last_pos: usize,
}

impl TailContext {
    /// Capture everything a tail run needs from a cached forward pass.
    pub fn from_cache(
        model: &TransformerModel,
        cache: &ActivationCache,
        layer: usize,
        point: HookPoint,
    ) -> Result<TailContext> {
        if layer >= model.config.n_layers {
            return Err(Error::Dimension(format!("layer {layer} out of range")));
        }
        if point == HookPoint::MlpCombined {
            return Err(Error::Contract("tail runs start at a residual site".into()));
        }
        let l = cache.seq_len();
        let d = model.config.d_model;
        let first_attn_layer = layer + 1;
        let mut kv_prefix = Vec::new();
        for li in first_attn_layer..model.config.n_layers {
            let k = &cache.keys[li];
            let v = &cache.values[li];
            let kp = Tensor::from_raw(vec![l - 1, d], k.data()[..(l - 1) * d].to_vec());
            let vp = Tensor::from_raw(vec![l - 1, d], v.data()[..(l - 1) * d].to_vec());
            kv_prefix.push((Arc::new(kp), Arc::new(vp)));
        }
        Ok(TailContext { layer, point, kv_prefix, last_pos: l - 1 })
    }
}

impl TransformerModel {
    /// Differentiable continuation from a residual state `h` ([1 x d]) at
    /// (site.layer, site.point, last position) to answer logits.
    ///
    /// Model weights enter as constants; gradients flow only into `h`'s
    /// ancestors (e.g. a subspace basis being optimized).
    pub fn tail_logits_on_tape(
        &self,
        tape: &mut Tape,
        h: Var,
        site: &TailContext,
    ) -> Result<Var> {
        let cfg = &self.config;
        let mut resid = h;
        let mut prefix_idx = 0usize;

        // Finish the patched layer's MLP when starting pre-MLP.
        if site.point == HookPoint::ResidPostAttn {
            let lw = &self.layers[site.layer];
            resid = self.tail_mlp(tape, resid, lw)?;
        }
        for li in (site.layer + 1)..cfg.n_layers {
            let lw = &self.layers[li];
            let attn_norm = tape.constant_shared(lw.attn_norm.clone());
            let wq = tape.constant_shared(lw.wq.clone());
            let wk = tape.constant_shared(lw.wk.clone());
            let wv = tape.constant_shared(lw.wv.clone());
            let wo = tape.constant_shared(lw.wo.clone());
            let normed = tape.rms_norm(resid, attn_norm, cfg.rms_norm_epsilon)?;
            let q = tape.matmul(normed, wq)?;
            let k = tape.matmul(normed, wk)?;
            let v = tape.matmul(normed, wv)?;
            let q = tape.rope(q, cfg.n_heads, site.last_pos, cfg.rope_theta)?;
            let k = tape.rope(k, cfg.n_heads, site.last_pos, cfg.rope_theta)?;
            let (kp, vp) = &site.kv_prefix[prefix_idx];
            prefix_idx += 1;
            let kp = tape.constant_shared(kp.clone());
            let vp = tape.constant_shared(vp.clone());
            let mix = self.attention_on_tape(tape, q, k, v, Some((kp, vp)))?;
            let attn_out = tape.matmul(mix, wo)?;
            resid = tape.add(resid, attn_out)?;
            resid = self.tail_mlp(tape, resid, lw)?;
        }
        let final_norm = tape.constant_shared(self.final_norm.clone());
        let unembed = tape.constant_shared(self.unembed.clone());
        let normed = tape.rms_norm(resid, final_norm, cfg.rms_norm_epsilon)?;
        tape.matmul(normed, unembed)
    }

    fn tail_mlp(&self, tape: &mut Tape, resid: Var, lw: &LayerWeights) -> Result<Var> {
        let cfg = &self.config;
        let mlp_norm = tape.constant_shared(lw.mlp_norm.clone());
        let w_gate = tape.constant_shared(lw.w_gate.clone());
        let w_up = tape.constant_shared(lw.w_up.clone());
        let w_down = tape.constant_shared(lw.w_down.clone());
        let normed = tape.rms_norm(resid, mlp_norm, cfg.rms_norm_epsilon)?;
        let gate = tape.matmul(normed, w_gate)?;
        let gate = tape.silu(gate);
        let up = tape.matmul(normed, w_up)?;
        let combined = tape.mul(gate, up)?;
        let mlp_out = tape.matmul(combined, w_down)?;
        tape.add(resid, mlp_out)
    }

    /// No-grad tail run: logits row at the last position given a patched
    /// residual state at the site.
    pub fn tail_logits(&self, h: &Tensor, site: &TailContext) -> Result<Tensor> {
        let mut tape = Tape::new();
        let hvar = tape.constant(as_row(h));
        let logits = self.tail_logits_on_tape(&mut tape, hvar, site)?;
        Ok(tape.value(logits).clone())
    }
}

fn as_row(h: &Tensor) -> Tensor {
    if h.rank() == 2 {
        h.clone()
    } else {
        Tensor::from_raw(vec![1, h.numel()], h.data().to_vec())
    }
}

// ── training ────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub warmup_steps: usize,
    pub eval_interval: usize,
    pub seed: u64,
    /// Mixture weight per task; normalized internally.
    pub task_weights: Vec<(TaskKind, f64)>,
    /// Early-stop targets; training stops once every cyclic task's
    /// in-cycle accuracy and addition's small-sum accuracy clear these.
    pub target_in_cycle: f64,
    pub target_addition_small_sum: f64,
    /// Size of the per-eval addition subsample (full set at the end).
    pub eval_addition_subset: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            max_steps: 6000,
            batch_size: 64,
            lr: 1e-3,
            warmup_steps: 100,
            eval_interval: 250,
            seed: 0,
            task_weights: vec![
                (TaskKind::Months, 0.2),
                (TaskKind::Weekdays, 0.15),
                (TaskKind::Hours, 0.25),
                (TaskKind::Addition, 0.4),
            ],
            target_in_cycle: 0.99,
            target_addition_small_sum: 0.95,
            eval_addition_subset: 1500,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalSnapshot {
    pub step: usize,
    pub loss: f64,
    /// (task, headline accuracy) where headline = in-cycle accuracy for
    /// cyclic tasks, small-sum accuracy for addition.
    pub per_task: Vec<(TaskKind, f64)>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainLog {
    pub evals: Vec<EvalSnapshot>,
    pub steps_run: usize,
    pub reached_targets: bool,
    pub best_step: usize,
}

/// Train with Adam on answer-position cross-entropy over a task mixture.
/// Single-threaded by design so runs replay exactly.
pub fn train(
    model: &mut TransformerModel,
    datasets: &[Dataset],
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    use rand::Rng;
    if datasets.is_empty() {
        return Err(Error::Training("no datasets supplied".into()));
    }
    for ds in datasets {
        for p in &ds.prompts {
            if p.tokens.len() > model.config.max_seq_len {
                return Err(Error::Training(format!(
                    "{} prompt exceeds max_seq_len {}",
                    ds.spec.kind, model.config.max_seq_len
                )));
            }
        }
    }
    let weights: Vec<f64> = datasets
        .iter()
        .map(|ds| {
            cfg.task_weights
                .iter()
                .find(|(k, _)| *k == ds.spec.kind)
                .map_or(0.0, |(_, w)| *w)
        })
        .collect();
    let wsum: f64 = weights.iter().sum();
    if wsum <= 0.0 {
        return Err(Error::Training("task mixture has zero total weight".into()));
    }
    let cumulative: Vec<f64> = weights
        .iter()
        .scan(0.0, |acc, w| {
            *acc += w / wsum;
            Some(*acc)
        })
        .collect();

    // Deterministic eval subsets: full cyclic datasets, subsampled addition.
    let mut eval_rng = rng_from_seed(crate::rng::derive_seed(cfg.seed, "train/eval"));
    let eval_sets: Vec<Vec<usize>> = datasets
        .iter()
        .map(|ds| {
            if ds.spec.kind == TaskKind::Addition
                && ds.prompts.len() > cfg.eval_addition_subset
            {
                (0..cfg.eval_addition_subset)
                    .map(|_| eval_rng.gen_range(0..ds.prompts.len()))
                    .collect()
            } else {
                (0..ds.prompts.len()).collect()
            }
        })
        .collect();

    let sizes: Vec<usize> = model.params().iter().map(|p| p.numel()).collect();
    let mut adam = Adam::new(cfg.lr, &sizes);
    let mut rng = rng_from_seed(cfg.seed);
    let mut log = TrainLog { evals: Vec::new(), steps_run: 0, reached_targets: false, best_step: 0 };
    let mut best_score = f64::NEG_INFINITY;
    let mut best_params: Option<Vec<Tensor>> = None;

    for step in 0..cfg.max_steps {
        // Sample a batch from the mixture.
        let mut batch: Vec<(&Dataset, usize)> = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let r: f64 = rng.gen();
            let ti = cumulative.iter().position(|&c| r <= c).unwrap_or(datasets.len() - 1);
            let pi = rng.gen_range(0..datasets[ti].prompts.len());
            batch.push((&datasets[ti], pi));
        }

        // Group same-length prompts so the row-wise ops batch into single
        // GEMMs; the mean loss is unchanged.
        let mut groups: Vec<(usize, Vec<&crate::tasks::PromptInstance>)> = Vec::new();
        for (ds, pi) in &batch {
            let p = &ds.prompts[*pi];
            match groups.iter_mut().find(|(len, _)| *len == p.tokens.len()) {
                Some((_, g)) => g.push(p),
                None => groups.push((p.tokens.len(), vec![p])),
            }
        }
        let mut tape = Tape::new();
        let pv = model.params_on_tape(&mut tape);
        let mut losses = Vec::with_capacity(groups.len());
        for (_, group) in &groups {
            losses.push(model.group_loss_on_tape(&mut tape, &pv, group)?);
        }
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = tape.add(total, l)?;
        }
        let loss = tape.scale(total, 1.0 / cfg.batch_size as f32)?;
        let loss_val = tape.value(loss).data()[0] as f64;
        if !loss_val.is_finite() {
            if let Some(best) = best_params.take() {
                restore_params(model, best);
            }
            return Err(Error::Training(format!(
                "loss diverged to {loss_val} at step {step}; best checkpoint retained"
            )));
        }
        let grads = tape.backward(loss)?;
        let grad_tensors: Vec<Tensor> =
            pv.vars.iter().map(|&v| grads.grad_or_zero(v)).collect();
        drop(tape);

        let lr = schedule_lr(cfg, step);
        {
            let mut params = model.params_mut();
            let mut slices: Vec<&mut [f32]> = params
                .iter_mut()
                .map(|p| Arc::make_mut(p).data_mut())
                .collect();
            let gslices: Vec<&[f32]> = grad_tensors.iter().map(|g| g.data()).collect();
            let mut pslices: Vec<&mut [f32]> = slices.iter_mut().map(|s| &mut **s).collect();
            adam.step_with_lr(&mut pslices, &gslices, lr);
        }
        log.steps_run = step + 1;

        let last_step = step + 1 == cfg.max_steps;
        if (step + 1) % cfg.eval_interval == 0 || last_step {
            let snapshot = evaluate(model, datasets, &eval_sets, step + 1, loss_val)?;
            eprintln!(
                "[train] step {:5} loss {:.4} {}",
                snapshot.step,
                snapshot.loss,
                snapshot
                    .per_task
                    .iter()
                    .map(|(k, a)| format!("{k}={a:.3}"))
                    .collect::<Vec<_>>()
                    .join(" ")
            );
            let score: f64 =
                snapshot.per_task.iter().map(|(_, a)| a).sum::<f64>() / datasets.len() as f64;
            if score > best_score {
                best_score = score;
                best_params = Some(model.params().iter().map(|p| (**p).clone()).collect());
                log.best_step = step + 1;
            }
            let reached = snapshot.per_task.iter().all(|(k, a)| match k {
                TaskKind::Addition => *a >= cfg.target_addition_small_sum,
                _ => *a >= cfg.target_in_cycle,
            });
            log.evals.push(snapshot);
            if reached {
                log.reached_targets = true;
                break;
            }
        }
    }
    // Leave the best-scoring weights in the model.
    if let Some(best) = best_params {
        if !log.reached_targets {
            restore_params(model, best);
        }
    }
    Ok(log)
}

fn schedule_lr(cfg: &TrainConfig, step: usize) -> f32 {
    if step < cfg.warmup_steps {
        cfg.lr * (step + 1) as f32 / cfg.warmup_steps as f32
    } else {
        let t = (step - cfg.warmup_steps) as f32
            / (cfg.max_steps.saturating_sub(cfg.warmup_steps)).max(1) as f32;
        let floor = 0.1 * cfg.lr;
        floor + 0.5 * (cfg.lr - floor) * (1.0 + (std::f32::consts::PI * t).cos())
    }
}

fn restore_params(model: &mut TransformerModel, params: Vec<Tensor>) {
    for (slot, val) in model.params_mut().into_iter().zip(params) {
        *slot = Arc::new(val);
    }
}

fn evaluate(
    model: &TransformerModel,
    datasets: &[Dataset],
    eval_sets: &[Vec<usize>],
    step: usize,
    loss: f64,
) -> Result<EvalSnapshot> {
    use rayon::prelude::*;
    let mut per_task = Vec::new();
    for (ds, idx) in datasets.iter().zip(eval_sets) {
        let results: Vec<bool> = idx
            .par_iter()
            .map(|&i| {
                let p = &ds.prompts[i];
                let (logits, _) = model.forward_with_cache(&p.tokens)?;
                Ok(argmax_row(logits.row(p.final_pos)) == p.gold)
            })
            .collect::<Result<_>>()?;
        // Headline accuracy: in-cycle prompts for cyclic tasks, sums
        // within 100 for addition.
        let mut correct = 0usize;
        let mut total = 0usize;
        for (&i, &ok) in idx.iter().zip(&results) {
            let p = &ds.prompts[i];
            let counted = match ds.spec.period {
                Some(period) => p.offset <= period,
                None => p.premod_sum <= 100,
            };
            if counted {
                total += 1;
                if ok {
                    correct += 1;
                }
            }
        }
        per_task.push((ds.spec.kind, correct as f64 / total.max(1) as f64));
    }
    Ok(EvalSnapshot { step, loss, per_task })
}

// ── checkpoints ─────────────────────────────────────────────────────────

pub fn save_checkpoint(
    model: &TransformerModel,
    path: &std::path::Path,
    step: usize,
    per_task_accuracy: &[(TaskKind, f64)],
) -> Result<()> {
    let acc: serde_json::Map<String, serde_json::Value> = per_task_accuracy
        .iter()
        .map(|(k, a)| (k.name().to_string(), json!(a)))
        .collect();
    let manifest = json!({
        "kind": "checkpoint",
        "config": model.config,
        "step": step,
        "per_task_accuracy": acc,
    });
    let mut art = Artifact::new(manifest);
    for (name, p) in model.param_names().into_iter().zip(model.params()) {
        art.push(name, (*p).clone());
    }
    art.save(path)
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<(TransformerModel, serde_json::Value)> {
    let art = Artifact::load(path)?;
    if art.manifest["kind"] != "checkpoint" {
        return Err(Error::artifact(format!(
            "{} is not a checkpoint (kind={})",
            path.display(),
            art.manifest["kind"]
        )));
    }
    let config: ModelConfig = serde_json::from_value(art.manifest["config"].clone())?;
    let mut model = TransformerModel::init(config)?;
    let names = model.param_names();
    let mut new_params = Vec::with_capacity(names.len());
    for name in &names {
        let t = art.tensor(name)?;
        new_params.push(t.clone());
    }
    for ((slot, val), name) in model.params_mut().into_iter().zip(new_params).zip(&names) {
        if slot.shape() != val.shape() {
            return Err(Error::artifact(format!(
                "checkpoint tensor '{name}' has shape {:?}, model wants {:?}",
                val.shape(),
                slot.shape()
            )));
        }
        *slot = Arc::new(val);
    }
    Ok((model, art.manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{generate_dataset, TaskSpec, Vocab};

    fn tiny_model(seed: u64) -> TransformerModel {
        let vocab = Vocab::standard();
        let mut cfg = ModelConfig::desk_default(vocab.len());
        cfg.n_layers = 2;
        cfg.d_model = 32;
        cfg.n_heads = 2;
        cfg.d_mlp = 64;
        cfg.seed = seed;
        TransformerModel::init(cfg).unwrap()
    }

    fn sample_tokens() -> Vec<u32> {
        let vocab = Vocab::standard();
        let ds = generate_dataset(&TaskSpec::months(), &vocab).unwrap();
        ds.prompts[17].tokens.clone()
    }

    #[test]
    fn cache_is_consistent_with_residual_algebra() {
        let model = tiny_model(1);
        let tokens = sample_tokens();
        let (_, cache) = model.forward_with_cache(&tokens).unwrap();
        for layer in 0..model.config.n_layers {
            let mlp_out = cache.mlp_combined_act[layer]
                .matmul(&model.layers[layer].w_down)
                .unwrap();
            let expect = cache.resid_post_attn[layer].add(&mlp_out).unwrap();
            let got = &cache.resid_post_mlp[layer];
            for (a, b) in expect.data().iter().zip(got.data()) {
                assert!((a - b).abs() < 1e-5, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn forward_is_bit_deterministic() {
        let model = tiny_model(2);
        let tokens = sample_tokens();
        let (l1, _) = model.forward_with_cache(&tokens).unwrap();
        let (l2, _) = model.forward_with_cache(&tokens).unwrap();
        assert_eq!(l1, l2);
    }

    #[test]
    fn zeroed_gate_column_contributes_nothing() {
        let mut model = tiny_model(3);
        let tokens = sample_tokens();
        // Force neuron 5's gate pre-activation to zero: SiLU(0) = 0.
        {
            let lw = &mut model.layers[0];
            let wg = Arc::make_mut(&mut lw.w_gate);
            let cols = wg.cols();
            for r in 0..wg.rows() {
                wg.data_mut()[r * cols + 5] = 0.0;
            }
        }
        let (before, _) = model.forward_with_cache(&tokens).unwrap();
        // Changing that neuron's down row must not matter.
        {
            let lw = &mut model.layers[0];
            let wd = Arc::make_mut(&mut lw.w_down);
            let cols = wd.cols();
            for c in 0..cols {
                wd.data_mut()[5 * cols + c] = 7.0;
            }
        }
        let (after, _) = model.forward_with_cache(&tokens).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn empty_hooks_equal_plain_forward() {
        let model = tiny_model(4);
        let tokens = sample_tokens();
        let (a, _) = model.forward_with_cache(&tokens).unwrap();
        let (b, _) = model.run_with_hooks(&tokens, &[]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn self_patch_is_identity() {
        let model = tiny_model(5);
        let tokens = sample_tokens();
        let (clean, cache) = model.forward_with_cache(&tokens).unwrap();
        for point in [HookPoint::ResidPostAttn, HookPoint::ResidPostMlp] {
            let hooks = vec![HookSpec {
                layer: 1,
                point,
                positions: Positions::All,
                action: HookAction::ReplaceFull(cache.resid(point, 1).clone()),
            }];
            let (patched, _) = model.run_with_hooks(&tokens, &hooks).unwrap();
            assert_eq!(clean, patched, "self-patch at {point:?} changed logits");
        }
    }

    #[test]
    fn zeroing_all_neurons_removes_the_mlp() {
        let model = tiny_model(6);
        let tokens = sample_tokens();
        let all: Vec<usize> = (0..model.config.d_mlp).collect();
        let hooks = vec![HookSpec {
            layer: 0,
            point: HookPoint::MlpCombined,
            positions: Positions::All,
            action: HookAction::ZeroNeurons(all),
        }];
        let (_, cache) = model.run_with_hooks(&tokens, &hooks).unwrap();
        assert_eq!(cache.resid_post_attn[0], cache.resid_post_mlp[0]);
    }

    #[test]
    fn keep_then_zero_equals_zeroing_everything() {
        let model = tiny_model(7);
        let tokens = sample_tokens();
        let subset: Vec<usize> = vec![1, 5, 9];
        let all: Vec<usize> = (0..model.config.d_mlp).collect();
        let hooks_a = vec![
            HookSpec {
                layer: 1,
                point: HookPoint::MlpCombined,
                positions: Positions::All,
                action: HookAction::KeepOnlyNeurons(subset.clone()),
            },
            HookSpec {
                layer: 1,
                point: HookPoint::MlpCombined,
                positions: Positions::All,
                action: HookAction::ZeroNeurons(subset),
            },
        ];
        let hooks_b = vec![HookSpec {
            layer: 1,
            point: HookPoint::MlpCombined,
            positions: Positions::All,
            action: HookAction::ZeroNeurons(all),
        }];
        let (a, _) = model.run_with_hooks(&tokens, &hooks_a).unwrap();
        let (b, _) = model.run_with_hooks(&tokens, &hooks_b).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn conflicting_replacements_error() {
        let model = tiny_model(8);
        let tokens = sample_tokens();
        let v = Tensor::zeros(&[model.config.d_model]);
        let mk = || HookSpec {
            layer: 0,
            point: HookPoint::ResidPostMlp,
            positions: Positions::Last,
            action: HookAction::ReplaceFull(v.clone()),
        };
        let err = model.run_with_hooks(&tokens, &[mk(), mk()]).unwrap_err();
        assert!(matches!(err, Error::Hook(_)));
    }

    #[test]
    fn causal_masking_shields_earlier_positions() {
        let model = tiny_model(9);
        let mut tokens = sample_tokens();
        let (l1, _) = model.forward_with_cache(&tokens).unwrap();
        let last = tokens.len() - 1;
        tokens[last] = tokens[last].wrapping_add(1) % model.config.vocab_size as u32;
        let (l2, _) = model.forward_with_cache(&tokens).unwrap();
        for t in 0..last {
            assert_eq!(l1.row(t), l2.row(t), "position {t} leaked future tokens");
        }
    }

    #[test]
    fn mlp_decomposes_into_per_neuron_contributions() {
        let model = tiny_model(10);
        let tokens = sample_tokens();
        let (_, cache) = model.forward_with_cache(&tokens).unwrap();
        let layer = 1;
        let neurons = model.mlp_weights(layer).unwrap();
        let t = tokens.len() - 1;
        let acts = cache.mlp_combined_act[layer].row(t);
        let mut sum = vec![0.0f64; model.config.d_model];
        for (i, (_, _, d_i)) in neurons.iter().enumerate() {
            for (s, &dv) in sum.iter_mut().zip(d_i.data()) {
                *s += acts[i] as f64 * dv as f64;
            }
        }
        let expect = cache.resid_post_mlp[layer].sub(&cache.resid_post_attn[layer]).unwrap();
        for (a, &b) in sum.iter().zip(expect.row(t)) {
            assert!((a - b as f64).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn initial_answer_loss_is_near_uniform() {
        let vocab = Vocab::standard();
        let model =
            TransformerModel::init(ModelConfig::desk_default(vocab.len())).unwrap();
        let ds = generate_dataset(&TaskSpec::weekdays(), &vocab).unwrap();
        let mut total = 0.0f64;
        let n = 20usize;
        for p in ds.prompts.iter().take(n) {
            let (logits, _) = model.forward_with_cache(&p.tokens).unwrap();
            let row = logits.row(p.final_pos);
            total += crate::kernels::log_sum_exp(row) - row[p.gold as usize] as f64;
        }
        let mean = total / n as f64;
        let uniform = (vocab.len() as f64).ln();
        assert!((mean - uniform).abs() < 1e-4, "loss {mean} vs ln(V) {uniform}");
    }

    #[test]
    fn tape_forward_matches_cached_forward() {
        let model = tiny_model(11);
        let tokens = sample_tokens();
        let (cached, _) = model.forward_with_cache(&tokens).unwrap();
        let mut tape = Tape::new();
        let pv = model.params_on_tape(&mut tape);
        let out = model
            .answer_logits_on_tape(&mut tape, &pv, &tokens, tokens.len() - 1)
            .unwrap();
        let tape_logits = tape.value(out);
        for (a, b) in tape_logits.data().iter().zip(cached.row(tokens.len() - 1)) {
            assert!((a - b).abs() < 2e-4, "{a} vs {b}");
        }
    }

    #[test]
    fn tail_run_matches_full_forward() {
        let model = tiny_model(12);
        let tokens = sample_tokens();
        let (full, cache) = model.forward_with_cache(&tokens).unwrap();
        let last = tokens.len() - 1;
        for (layer, point) in
            [(0, HookPoint::ResidPostAttn), (0, HookPoint::ResidPostMlp), (1, HookPoint::ResidPostMlp)]
        {
            let site = TailContext::from_cache(&model, &cache, layer, point).unwrap();
            let h = cache.resid_at(point, layer, last);
            let tail = model.tail_logits(&h, &site).unwrap();
            for (a, b) in tail.row(0).iter().zip(full.row(last)) {
                assert!((a - b).abs() < 2e-4, "layer {layer} {point:?}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn overfits_a_ten_prompt_subset() {
        let vocab = Vocab::standard();
        let mut model = tiny_model(13);
        let full = generate_dataset(&TaskSpec::months(), &vocab).unwrap();
        let subset = Dataset {
            spec: full.spec.clone(),
            prompts: full.prompts.iter().step_by(29).take(10).cloned().collect(),
        };
        let cfg = TrainConfig {
            max_steps: 300,
            batch_size: 10,
            lr: 3e-3,
            warmup_steps: 10,
            eval_interval: 50,
            seed: 3,
            task_weights: vec![(TaskKind::Months, 1.0)],
            target_in_cycle: 1.0,
            target_addition_small_sum: 1.0,
            eval_addition_subset: 0,
        };
        let log = train(&mut model, std::slice::from_ref(&subset), &cfg).unwrap();
        let preds = model.predict(&subset.prompts).unwrap();
        let acc = preds
            .iter()
            .zip(&subset.prompts)
            .filter(|(p, q)| **p == q.gold)
            .count() as f64
            / 10.0;
        assert!(acc == 1.0, "subset accuracy {acc} after {} steps", log.steps_run);
    }

    #[test]
    fn checkpoint_roundtrip_preserves_logits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = tiny_model(14);
        let tokens = sample_tokens();
        let (before, _) = model.forward_with_cache(&tokens).unwrap();
        save_checkpoint(&model, &path, 42, &[(TaskKind::Months, 0.5)]).unwrap();
        let (loaded, manifest) = load_checkpoint(&path).unwrap();
        assert_eq!(manifest["step"], 42);
        let (after, _) = loaded.forward_with_cache(&tokens).unwrap();
        assert_eq!(before, after);
    }
}

impl TransformerModel {
    /// Bench-only access to mutable parameter slots.
    #[doc(hidden)]
    pub fn params_mut_for_bench(&mut self) -> Vec<&mut Arc<Tensor>> {
        self.params_mut()
    }
}

#[cfg(test)]
mod batched_tests {
    use super::*;
    use crate::tasks::{generate_dataset, TaskSpec, Vocab};

    #[test]
    fn group_loss_matches_per_prompt_losses() {
        let vocab = Vocab::standard();
        let mut cfg = ModelConfig::desk_default(vocab.len());
        cfg.n_layers = 2;
        cfg.d_model = 32;
        cfg.n_heads = 2;
        cfg.d_mlp = 48;
        cfg.seed = 5;
        let mut model = TransformerModel::init(cfg).unwrap();
        let mut rng = crate::rng::rng_from_seed(6);
        model.unembed =
            std::sync::Arc::new(Tensor::randn(&[32, model.config.vocab_size], 0.2, &mut rng));
        let ds = generate_dataset(&TaskSpec::months(), &vocab).unwrap();
        let group: Vec<&crate::tasks::PromptInstance> =
            ds.prompts.iter().step_by(37).take(5).collect();

        let mut tape = Tape::new();
        let pv = model.params_on_tape(&mut tape);
        let sum = model.group_loss_on_tape(&mut tape, &pv, &group).unwrap();
        let batched = tape.value(sum).data()[0] as f64;

        let mut individual = 0.0f64;
        for p in &group {
            let mut tape = Tape::new();
            let pv = model.params_on_tape(&mut tape);
            let logits = model
                .answer_logits_on_tape(&mut tape, &pv, &p.tokens, p.final_pos)
                .unwrap();
            let loss = tape.cross_entropy_mean(logits, &[p.gold as usize]).unwrap();
            individual += tape.value(loss).data()[0] as f64;
        }
        assert!(
            (batched - individual).abs() < 1e-4,
            "batched {batched} vs individual {individual}"
        );
    }
}
