//! Experiment orchestration: config, stages, artifacts, report bundle.
//!
//! A pipeline run owns an output directory. Stages execute in dependency
//! order (gen, train, patch, das, crosspatch, probe, steer, neurons,
//! report); each persists its artifacts so deleting a downstream file
//! and re-running regenerates it without re-training upstream stages.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::interventions::{
    build_site_pairs, cross_task_patch, dim_sweep, eval_iia, principal_angle_overlap,
    random_overlap_baseline, residual_patch_from_cache, train_das, DasTrainConfig, SitePatchModel,
    Subspace, TransformerSiteRunner,
};
use crate::model::{
    argmax_row, load_checkpoint, save_checkpoint, train, HookPoint, ModelConfig, TrainConfig,
    TransformerModel,
};
use crate::neurons::{
    ablate, assign_period, cluster_by_cosine, downproj_plane_export, mean_activation_by_sum,
    period_alignment_baseline, select_neurons, split_mixed_classify, AblationMode,
};
use crate::probes::{
    collect_answer_activations, collect_concept_activations, load_fourier_probes,
    period_overlap_profile, r2_sweep, save_fourier_probes, select_steering_periods,
    train_circular_probe, train_fourier_probes, FourierProbePair, ProbeTrainConfig,
};
use crate::report::{fmt_f64, sha256_hex, ReportBundle};
use crate::rng::derive_seed;
use crate::steering::{steering_matrix, SteeringConfig};
use crate::tasks::{
    accuracy_breakdown, generate_dataset, generate_explicit_mod, load_dataset,
    sample_counterfactual_pairs, save_dataset, CausalModel, CausalVariable, Dataset, TaskKind,
    TaskSpec, Vocab,
};
use crate::tensor::Tensor;

// ── configuration ───────────────────────────────────────────────────────

fn default_version() -> u32 {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_version")]
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    /// Stages to run, in this order. Missing upstream artifacts are an
    /// error naming the stage that would produce them.
    #[serde(default = "Stage::all")]
    pub stages: Vec<Stage>,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub patch: PatchSection,
    #[serde(default)]
    pub das: DasSection,
    #[serde(default)]
    pub crosspatch: CrossPatchSection,
    #[serde(default)]
    pub probe: ProbeSection,
    #[serde(default)]
    pub steer: SteerSection,
    #[serde(default)]
    pub neurons: NeuronSection,
    /// Fixed analysis layer; by default the layer where output-concept
    /// IIA peaks (chosen from the das stage's curves).
    #[serde(default)]
    pub analysis_layer: Option<usize>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            version: 1,
            seed: 0,
            stages: Stage::all(),
            model: ModelSection::default(),
            train: TrainSection::default(),
            patch: PatchSection::default(),
            das: DasSection::default(),
            crosspatch: CrossPatchSection::default(),
            probe: ProbeSection::default(),
            steer: SteerSection::default(),
            neurons: NeuronSection::default(),
            analysis_layer: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Gen,
    Train,
    Patch,
    Das,
    Crosspatch,
    Probe,
    Steer,
    Neurons,
    Report,
}

impl Stage {
    pub fn all() -> Vec<Stage> {
        vec![
            Stage::Gen,
            Stage::Train,
            Stage::Patch,
            Stage::Das,
            Stage::Crosspatch,
            Stage::Probe,
            Stage::Steer,
            Stage::Neurons,
            Stage::Report,
        ]
    }

    pub fn name(self) -> &'static str {
        match self {
            Stage::Gen => "gen",
            Stage::Train => "train",
            Stage::Patch => "patch",
            Stage::Das => "das",
            Stage::Crosspatch => "crosspatch",
            Stage::Probe => "probe",
            Stage::Steer => "steer",
            Stage::Neurons => "neurons",
            Stage::Report => "report",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub max_seq_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { n_layers: 4, d_model: 128, n_heads: 4, d_mlp: 512, max_seq_len: 16 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub max_steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub warmup_steps: usize,
    pub eval_interval: usize,
    pub target_in_cycle: f64,
    pub target_addition_small_sum: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSection {
            max_steps: t.max_steps,
            batch_size: t.batch_size,
            lr: t.lr,
            warmup_steps: t.warmup_steps,
            eval_interval: t.eval_interval,
            target_in_cycle: t.target_in_cycle,
            target_addition_small_sum: t.target_addition_small_sum,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchSection {
    /// Counterfactual pairs per (task, variable) for the residual sweep.
    pub n_pairs: usize,
    pub tasks: Vec<TaskKind>,
}

impl Default for PatchSection {
    fn default() -> Self {
        PatchSection { n_pairs: 96, tasks: vec![TaskKind::Weekdays, TaskKind::Months] }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DasSection {
    pub n_pairs: usize,
    pub n_test: usize,
    pub epochs: usize,
    pub lr: f32,
    pub batch: usize,
    /// k used for the per-site IIA curves.
    pub curve_k: usize,
    /// k values for the dimension sweep at the analysis sites.
    pub sweep_ks: Vec<usize>,
}

impl Default for DasSection {
    fn default() -> Self {
        DasSection {
            n_pairs: 4096,
            n_test: 512,
            epochs: 8,
            lr: 1e-4,
            batch: 16,
            curve_k: 8,
            sweep_ks: vec![1, 2, 4, 8],
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CrossPatchSection {
    /// Target prompts sampled per source sum.
    pub n_targets: usize,
    /// Source prompts sampled per (task pair).
    pub n_sources: usize,
}

impl Default for CrossPatchSection {
    fn default() -> Self {
        CrossPatchSection { n_targets: 24, n_sources: 96 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeSection {
    pub epochs: usize,
    pub lr: f32,
    pub period_min: usize,
    pub period_max: usize,
    /// Sites for the R^2 sweep in addition to the analysis site.
    pub extra_sweep_layers: Vec<usize>,
    /// Cap on addition activations used for probe training.
    pub max_activations: usize,
    /// Overlap threshold for steering-period selection.
    pub overlap_threshold: f64,
    pub circular_d_pca: usize,
}

impl Default for ProbeSection {
    fn default() -> Self {
        ProbeSection {
            epochs: 500,
            lr: 1e-3,
            period_min: 2,
            period_max: 150,
            extra_sweep_layers: Vec::new(),
            max_activations: 1200,
            overlap_threshold: 0.3,
            circular_d_pca: 5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SteerSection {
    pub alpha: f64,
    pub alpha_sweep: Vec<f64>,
    pub tasks: Vec<TaskKind>,
    /// Prompts steered per task (subsampled deterministically).
    pub max_prompts: usize,
}

impl Default for SteerSection {
    fn default() -> Self {
        SteerSection {
            alpha: 10.0,
            alpha_sweep: vec![1.0, 5.0, 10.0],
            tasks: vec![TaskKind::Months, TaskKind::Hours],
            max_prompts: 72,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NeuronSection {
    pub tau: f64,
    /// Ablate on a deterministic subsample of each dataset.
    pub max_prompts: usize,
    pub cluster_cut: f64,
}

impl Default for NeuronSection {
    fn default() -> Self {
        NeuronSection { tau: 0.4, max_prompts: 400, cluster_cut: 0.5 }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<ExperimentConfig> {
        let cfg: ExperimentConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != 1 {
            return Err(Error::Config(format!("unsupported config version {}", self.version)));
        }
        if self.das.n_test >= self.das.n_pairs {
            return Err(Error::Config("das.n_test must be below das.n_pairs".into()));
        }
        if self.probe.period_min < 2 || self.probe.period_min > self.probe.period_max {
            return Err(Error::Config("bad probe period range".into()));
        }
        if self.model.d_model % self.model.n_heads != 0 {
            return Err(Error::Config("d_model must be divisible by n_heads".into()));
        }
        Ok(())
    }

    pub fn config_hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serializes").as_bytes())
    }

    fn model_config(&self, vocab: &Vocab) -> ModelConfig {
        let mut mc = ModelConfig::desk_default(vocab.len());
        mc.n_layers = self.model.n_layers;
        mc.d_model = self.model.d_model;
        mc.n_heads = self.model.n_heads;
        mc.d_mlp = self.model.d_mlp;
        mc.max_seq_len = self.model.max_seq_len;
        mc.seed = self.seed;
        mc
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            max_steps: self.train.max_steps,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            warmup_steps: self.train.warmup_steps,
            eval_interval: self.train.eval_interval,
            seed: self.seed,
            target_in_cycle: self.train.target_in_cycle,
            target_addition_small_sum: self.train.target_addition_small_sum,
            ..TrainConfig::default()
        }
    }
}

// ── pipeline state ──────────────────────────────────────────────────────

pub struct Pipeline {
    pub config: ExperimentConfig,
    pub out_dir: PathBuf,
    vocab: Arc<Vocab>,
    datasets: BTreeMap<TaskKind, Dataset>,
    explicit_mod: Option<Dataset>,
    model: Option<TransformerModel>,
    /// Best subspace per (task, variable) at the analysis sites.
    subspaces: BTreeMap<(TaskKind, CausalVariable), Subspace>,
    probes: BTreeMap<usize, FourierProbePair>,
    steering_periods: BTreeMap<TaskKind, Vec<usize>>,
    analysis_layer: Option<usize>,
    correct_sets: BTreeMap<TaskKind, Vec<bool>>,
}

pub struct PipelineOutcome {
    pub bundle_hash: String,
    pub report_dir: PathBuf,
    pub analysis_layer: usize,
}

impl Pipeline {
    pub fn new(config: ExperimentConfig, out_dir: &Path) -> Result<Pipeline> {
        config.validate()?;
        std::fs::create_dir_all(out_dir)?;
        std::fs::create_dir_all(out_dir.join("datasets"))?;
        std::fs::create_dir_all(out_dir.join("das"))?;
        std::fs::create_dir_all(out_dir.join("reports"))?;
        Ok(Pipeline {
            config,
            out_dir: out_dir.to_path_buf(),
            vocab: Vocab::standard(),
            datasets: BTreeMap::new(),
            explicit_mod: None,
            model: None,
            subspaces: BTreeMap::new(),
            probes: BTreeMap::new(),
            steering_periods: BTreeMap::new(),
            analysis_layer: None,
            correct_sets: BTreeMap::new(),
        })
    }

    pub fn run(mut self) -> Result<PipelineOutcome> {
        let hash = self.config.config_hash();
        let report_dir = self.out_dir.join("reports");
        let mut bundle = ReportBundle::create(&report_dir, &hash, self.config.seed)?;
        let stages = self.config.stages.clone();
        for stage in &stages {
            eprintln!("[pipeline] stage {}", stage.name());
            match stage {
                Stage::Gen => self.stage_gen()?,
                Stage::Train => self.stage_train(&mut bundle)?,
                Stage::Patch => self.stage_patch(&mut bundle)?,
                Stage::Das => self.stage_das(&mut bundle)?,
                Stage::Crosspatch => self.stage_crosspatch(&mut bundle)?,
                Stage::Probe => self.stage_probe(&mut bundle)?,
                Stage::Steer => self.stage_steer(&mut bundle)?,
                Stage::Neurons => self.stage_neurons(&mut bundle)?,
                Stage::Report => self.stage_report(&mut bundle)?,
            }
        }
        let analysis_layer = self.analysis_layer.unwrap_or(0);
        let (_, bundle_hash) = bundle.finish()?;
        Ok(PipelineOutcome { bundle_hash, report_dir, analysis_layer })
    }

    // ── stage: gen ──────────────────────────────────────────────────────

    fn dataset_path(&self, kind: TaskKind) -> PathBuf {
        self.out_dir.join("datasets").join(format!("{}.ds", kind.name()))
    }

    fn stage_gen(&mut self) -> Result<()> {
        for kind in TaskKind::all_canonical() {
            let path = self.dataset_path(kind);
            let ds = if path.exists() {
                load_dataset(&path, &self.vocab)?
            } else {
                let ds = generate_dataset(&TaskSpec::canonical(kind), &self.vocab)?;
                save_dataset(&ds, &path)?;
                ds
            };
            self.datasets.insert(kind, ds);
        }
        let path = self.dataset_path(TaskKind::ExplicitMod);
        let em = if path.exists() {
            load_dataset(&path, &self.vocab)?
        } else {
            let em = generate_explicit_mod(
                (1, 200),
                (1, 200),
                (2, 100),
                1000,
                derive_seed(self.config.seed, "gen/explicit_mod"),
                false,
                &self.vocab,
            )?;
            save_dataset(&em, &path)?;
            em
        };
        self.explicit_mod = Some(em);
        Ok(())
    }

    fn require_datasets(&self) -> Result<()> {
        if self.datasets.is_empty() {
            return Err(Error::artifact(
                "datasets missing: run the `gen` stage first".to_string(),
            ));
        }
        Ok(())
    }

    // ── stage: train ────────────────────────────────────────────────────

    fn checkpoint_path(&self) -> PathBuf {
        self.out_dir.join("model.ckpt")
    }

    fn stage_train(&mut self, bundle: &mut ReportBundle) -> Result<()> {
        self.require_datasets()?;
        let path = self.checkpoint_path();
        if path.exists() {
            let (model, _) = load_checkpoint(&path)?;
            self.model = Some(model);
        } else {
            let mut model = TransformerModel::init(self.config.model_config(&self.vocab))?;
            let datasets: Vec<Dataset> = self.datasets.values().cloned().collect();
            let log = train(&mut model, &datasets, &self.config.train_config())?;
            let final_acc: Vec<(TaskKind, f64)> =
                log.evals.last().map(|e| e.per_task.clone()).unwrap_or_default();
            save_checkpoint(&model, &path, log.steps_run, &final_acc)?;
            let rows: Vec<Vec<String>> = log
                .evals
                .iter()
                .flat_map(|e| {
                    e.per_task.iter().map(move |(k, a)| {
                        vec![
                            e.step.to_string(),
                            fmt_f64(e.loss),
                            k.name().to_string(),
                            fmt_f64(*a),
                        ]
                    })
                })
                .collect();
            bundle.write_csv("train_log", &["step", "loss", "task", "headline_accuracy"], &rows)?;
            self.model = Some(model);
        }
        // Cache which prompts the model answers correctly (the sampling
        // predicate for counterfactual pairs).
        let model = self.model.as_ref().expect("just set");
        for (kind, ds) in &self.datasets {
            let preds = model.predict(&ds.prompts)?;
            let flags: Vec<bool> =
                preds.iter().zip(&ds.prompts).map(|(p, q)| *p == q.gold).collect();
            self.correct_sets.insert(*kind, flags);
        }
        Ok(())
    }

    fn require_model(&self) -> Result<&TransformerModel> {
        self.model.as_ref().ok_or_else(|| {
            Error::artifact("model missing: run the `train` stage first".to_string())
        })
    }

    fn correct_pairs(
        &self,
        kind: TaskKind,
        variable: CausalVariable,
        n_pairs: usize,
        n_test: usize,
        label: &str,
    ) -> Result<(Vec<crate::tasks::CounterfactualPair>, Vec<crate::tasks::CounterfactualPair>)>
    {
        let ds = &self.datasets[&kind];
        let flags = &self.correct_sets[&kind];
        let index: BTreeMap<(i64, i64), bool> = ds
            .prompts
            .iter()
            .zip(flags)
            .map(|(p, &ok)| ((p.concept_index, p.offset), ok))
            .collect();
        let keep = move |p: &crate::tasks::PromptInstance| {
            *index.get(&(p.concept_index, p.offset)).unwrap_or(&false)
        };
        sample_counterfactual_pairs(
            ds,
            variable,
            n_pairs,
            n_test,
            derive_seed(self.config.seed, label),
            &self.vocab,
            &keep,
        )
    }

    // ── stage: patch (coarse residual-stream sweep) ─────────────────────

    fn stage_patch(&mut self, bundle: &mut ReportBundle) -> Result<()> {
        use rayon::prelude::*;
        let model = self.require_model()?;
        let n_layers = model.config.n_layers;
        let mut rows = Vec::new();
        for &kind in &self.config.patch.tasks.clone() {
            for variable in CausalVariable::all() {
                let (pairs, _) = self.correct_pairs(
                    kind,
                    variable,
                    self.config.patch.n_pairs,
                    0,
                    &format!("patch/{}/{}", kind.name(), variable.name()),
                )?;
                let seq_len = pairs[0].original.tokens.len();
                for layer in 0..n_layers {
                    for position in 0..seq_len {
                        let hits: Vec<bool> = pairs
                            .par_iter()
                            .map(|pair| {
                                let (_, source_cache) = model
                                    .forward_with_cache(&pair.counterfactual.tokens)?;
                                let logits = residual_patch_from_cache(
                                    model,
                                    &pair.original,
                                    &source_cache,
                                    layer,
                                    HookPoint::ResidPostMlp,
                                    position,
                                )?;
                                let pred =
                                    argmax_row(logits.row(pair.original.final_pos));
                                Ok(pred == pair.target_label)
                            })
                            .collect::<Result<_>>()?;
                        let acc =
                            hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64;
                        rows.push(vec![
                            kind.name().to_string(),
                            variable.name().to_string(),
                            layer.to_string(),
                            position.to_string(),
                            fmt_f64(acc),
                        ]);
                    }
                }
            }
        }
        bundle.write_csv(
            "fig11_residual_patch",
            &["task", "variable", "layer", "position", "interchange_accuracy"],
            &rows,
        )?;
        Ok(())
    }

    // ── stage: das ──────────────────────────────────────────────────────

    fn subspace_path(&self, kind: TaskKind, variable: CausalVariable) -> PathBuf {
        self.out_dir
            .join("das")
            .join(format!("{}_{}.das", kind.name(), variable.name()))
    }

    fn stage_das(&mut self, bundle: &mut ReportBundle) -> Result<()> {
        let model = self.require_model()?.clone(); // weights are Arc-shared
        let model = &model;
        let n_layers = model.config.n_layers;
        let das_cfg = &self.config.das;
        let mut curve_rows: Vec<Vec<String>> = Vec::new();
        // (task, variable) -> per-site best outcomes for analysis-layer pick.
        let mut best_by_site: BTreeMap<(TaskKind, CausalVariable, usize, String), f64> =
            BTreeMap::new();
        let mut site_bases: BTreeMap<(TaskKind, CausalVariable, usize, String), Tensor> =
            BTreeMap::new();

        for (&kind, _) in &self.datasets.clone() {
            for variable in CausalVariable::all() {
                let (train_pairs, test_pairs) = self.correct_pairs(
                    kind,
                    variable,
                    das_cfg.n_pairs,
                    das_cfg.n_test,
                    &format!("das/{}/{}", kind.name(), variable.name()),
                )?;
                let all_pairs: Vec<crate::tasks::CounterfactualPair> =
                    train_pairs.iter().chain(&test_pairs).cloned().collect();
                for layer in 0..n_layers {
                    for point in [HookPoint::ResidPostAttn, HookPoint::ResidPostMlp] {
                        let (runner, idx_pairs) =
                            build_site_pairs(model, &all_pairs, layer, point)?;
                        let (test_idx, train_idx) = idx_pairs.split_at(test_pairs.len());
                        let cfg = DasTrainConfig {
                            k: das_cfg.curve_k,
                            epochs: das_cfg.epochs,
                            lr: das_cfg.lr,
                            batch: das_cfg.batch,
                            pca_init_variance: 0.90,
                            seed: derive_seed(
                                self.config.seed,
                                &format!(
                                    "das/{}/{}/{}/{}",
                                    kind.name(),
                                    variable.name(),
                                    layer,
                                    point.name()
                                ),
                            ),
                        };
                        let outcome = train_das(&runner, train_idx, test_idx, &cfg)?;
                        curve_rows.push(vec![
                            kind.name().to_string(),
                            variable.name().to_string(),
                            layer.to_string(),
                            point.name().to_string(),
                            cfg.k.to_string(),
                            fmt_f64(outcome.test_iia),
                        ]);
                        let key = (kind, variable, layer, point.name().to_string());
                        best_by_site.insert(key.clone(), outcome.test_iia);
                        site_bases.insert(key, outcome.basis);
                    }
                }
            }
        }
        bundle.write_csv(
            "fig2_iia_curves",
            &["task", "variable", "layer", "hook_point", "k", "test_iia"],
            &curve_rows,
        )?;

        // Analysis layer: maximize mean output-concept IIA at post-MLP.
        let analysis_layer = self.config.analysis_layer.unwrap_or_else(|| {
            let mut best = (0usize, f64::NEG_INFINITY);
            for layer in 0..n_layers {
                let mut total = 0.0;
                let mut count = 0;
                for ((_, var, l, point), iia) in &best_by_site {
                    if *var == CausalVariable::OutputConcept
                        && *l == layer
                        && point == "resid_post_mlp"
                    {
                        total += iia;
                        count += 1;
                    }
                }
                let mean = total / count.max(1) as f64;
                if mean > best.1 {
                    best = (layer, mean);
                }
            }
            best.0
        });
        self.analysis_layer = Some(analysis_layer);

        // Dimension sweep at the analysis sites; keep the best subspace
        // per (task, variable).
        let mut sweep_rows = Vec::new();
        for (&kind, _) in &self.datasets.clone() {
            for variable in CausalVariable::all() {
                let point = match variable {
                    CausalVariable::OutputConcept => HookPoint::ResidPostMlp,
                    _ => HookPoint::ResidPostAttn,
                };
                let (train_pairs, test_pairs) = self.correct_pairs(
                    kind,
                    variable,
                    das_cfg.n_pairs,
                    das_cfg.n_test,
                    &format!("das/{}/{}", kind.name(), variable.name()),
                )?;
                let all_pairs: Vec<crate::tasks::CounterfactualPair> =
                    train_pairs.iter().chain(&test_pairs).cloned().collect();
                let (runner, idx_pairs) =
                    build_site_pairs(model, &all_pairs, analysis_layer, point)?;
                let (test_idx, train_idx) = idx_pairs.split_at(test_pairs.len());
                let cfg = DasTrainConfig {
                    k: das_cfg.curve_k,
                    epochs: das_cfg.epochs,
                    lr: das_cfg.lr,
                    batch: das_cfg.batch,
                    pca_init_variance: 0.90,
                    seed: derive_seed(
                        self.config.seed,
                        &format!("das_sweep/{}/{}", kind.name(), variable.name()),
                    ),
                };
                let sweep = dim_sweep(&runner, train_idx, test_idx, &das_cfg.sweep_ks, &cfg)?;
                for (k, iia) in &sweep.curve {
                    sweep_rows.push(vec![
                        kind.name().to_string(),
                        variable.name().to_string(),
                        analysis_layer.to_string(),
                        point.name().to_string(),
                        k.to_string(),
                        fmt_f64(*iia),
                    ]);
                }
                let subspace = Subspace {
                    basis: sweep.best.basis.clone(),
                    task: Some(kind),
                    variable: Some(variable),
                    layer: analysis_layer,
                    point,
                    test_iia: sweep.best.test_iia,
                    pca_fallback: sweep.best.pca_fallback,
                };
                subspace.save(&self.subspace_path(kind, variable))?;
                self.subspaces.insert((kind, variable), subspace);
            }
        }
        bundle.write_csv(
            "fig12_dim_sweep",
            &["task", "variable", "layer", "hook_point", "k", "test_iia"],
            &sweep_rows,
        )?;

        // Principal-angle overlap between tasks, per variable and site.
        let mut angle_rows = Vec::new();
        let tasks: Vec<TaskKind> = self.datasets.keys().copied().collect();
        for variable in CausalVariable::all() {
            for layer in 0..n_layers {
                for point in ["resid_post_attn", "resid_post_mlp"] {
                    for i in 0..tasks.len() {
                        for j in (i + 1)..tasks.len() {
                            let a = site_bases
                                .get(&(tasks[i], variable, layer, point.to_string()));
                            let b = site_bases
                                .get(&(tasks[j], variable, layer, point.to_string()));
                            if let (Some(a), Some(b)) = (a, b) {
                                angle_rows.push(vec![
                                    variable.name().to_string(),
                                    layer.to_string(),
                                    point.to_string(),
                                    tasks[i].name().to_string(),
                                    tasks[j].name().to_string(),
                                    fmt_f64(principal_angle_overlap(a, b)?),
                                ]);
                            }
                        }
                    }
                }
            }
        }
        let d = model.config.d_model;
        let baseline = random_overlap_baseline(
            d,
            das_cfg.curve_k,
            das_cfg.curve_k,
            200,
            derive_seed(self.config.seed, "das/overlap_baseline"),
        )?;
        angle_rows.push(vec![
            "random_baseline".into(),
            "-".into(),
            "-".into(),
            "-".into(),
            "-".into(),
            fmt_f64(baseline.mean),
        ]);
        bundle.write_csv(
            "figd4_principal_angles",
            &["variable", "layer", "hook_point", "task_a", "task_b", "mean_cosine"],
            &angle_rows,
        )?;
        Ok(())
    }

    fn require_subspace(&self, kind: TaskKind, variable: CausalVariable) -> Result<&Subspace> {
        self.subspaces.get(&(kind, variable)).ok_or_else(|| {
            Error::artifact(format!(
                "subspace for {}/{} missing: run the `das` stage first",
                kind.name(),
                variable.name()
            ))
        })
    }

    // ── stage: crosspatch ───────────────────────────────────────────────

    fn stage_crosspatch(&mut self, bundle: &mut ReportBundle) -> Result<()> {
        use rand::Rng;
        let model = self.require_model()?;
        let layer = self.analysis_layer.ok_or_else(|| {
            Error::artifact("analysis layer unknown: run the `das` stage first".to_string())
        })?;
        let point = HookPoint::ResidPostMlp;
        let addition_sub = self.require_subspace(TaskKind::Addition, CausalVariable::OutputConcept)?;
        let cyclic = [TaskKind::Months, TaskKind::Weekdays, TaskKind::Hours];
        let mut fwd_rows = Vec::new();
        let mut rev_rows = Vec::new();
        let cp = self.config.crosspatch.clone();
        for kind in cyclic {
            let target_sub = self.require_subspace(kind, CausalVariable::OutputConcept)?;
            let union =
                crate::interventions::union_subspace(&addition_sub.basis, &target_sub.basis)?;
            let period = self.datasets[&kind].spec.period.unwrap();
            let causal = CausalModel::new(&self.datasets[&kind].spec);

            // addition -> cyclic: the sum should decode into a concept.
            let mut rng =
                crate::rng::rng_from_seed(derive_seed(self.config.seed, &format!("crosspatch/{kind}")));
            let add_ds = &self.datasets[&TaskKind::Addition];
            let add_flags = &self.correct_sets[&TaskKind::Addition];
            let sources: Vec<&crate::tasks::PromptInstance> = add_ds
                .prompts
                .iter()
                .zip(add_flags)
                .filter(|(p, &ok)| ok && p.premod_sum <= 2 * period)
                .map(|(p, _)| p)
                .collect();
            if sources.is_empty() {
                return Err(Error::Sampling("no usable addition source prompts".into()));
            }
            let tgt_ds = &self.datasets[&kind];
            let tgt_flags = &self.correct_sets[&kind];
            let targets_pool: Vec<&crate::tasks::PromptInstance> = tgt_ds
                .prompts
                .iter()
                .zip(tgt_flags)
                .filter(|(_, &ok)| ok)
                .map(|(p, _)| p)
                .collect();
            let target_sample: Vec<crate::tasks::PromptInstance> = (0..cp.n_targets)
                .map(|_| targets_pool[rng.gen_range(0..targets_pool.len())].clone())
                .collect();
            let runner = TransformerSiteRunner::build(model, target_sample, layer, point)?;
            let src_sample: Vec<&crate::tasks::PromptInstance> = (0..cp.n_sources)
                .map(|_| sources[rng.gen_range(0..sources.len())])
                .collect();
            let mut hits = 0usize;
            let mut total = 0usize;
            for src in &src_sample {
                let (_, cache) = model.forward_with_cache(&src.tokens)?;
                let h_src = cache.resid_at(point, layer, src.final_pos);
                let expected = self.vocab.id(&causal.num_to_con(src.premod_sum)?)?;
                for ex in 0..runner.n_examples() {
                    let logits = cross_task_patch(&runner, ex, &h_src, &union)?;
                    let pred = argmax_row(logits.row(0));
                    total += 1;
                    if pred == expected {
                        hits += 1;
                    }
                    fwd_rows.push(vec![
                        kind.name().to_string(),
                        src.premod_sum.to_string(),
                        self.vocab.token(expected).to_string(),
                        self.vocab.token(pred).to_string(),
                    ]);
                }
            }
            let acc = hits as f64 / total.max(1) as f64;
            eprintln!("[crosspatch] addition->{kind}: {acc:.3}");

            // cyclic -> addition: expose the pre-modulo sum.
            let add_targets: Vec<crate::tasks::PromptInstance> = (0..cp.n_targets)
                .map(|_| {
                    let pool: Vec<&crate::tasks::PromptInstance> = add_ds
                        .prompts
                        .iter()
                        .zip(add_flags)
                        .filter(|(_, &ok)| ok)
                        .map(|(p, _)| p)
                        .collect();
                    pool[rng.gen_range(0..pool.len())].clone()
                })
                .collect();
            let add_runner = TransformerSiteRunner::build(model, add_targets, layer, point)?;
            let cyc_sources: Vec<&crate::tasks::PromptInstance> = (0..cp.n_sources)
                .map(|_| targets_pool[rng.gen_range(0..targets_pool.len())])
                .collect();
            for src in &cyc_sources {
                let (_, cache) = model.forward_with_cache(&src.tokens)?;
                let h_src = cache.resid_at(point, layer, src.final_pos);
                let expected = self.vocab.numeral_id(src.premod_sum)?;
                let echo = if src.premod_sum + 100 <= crate::tasks::MAX_NUMERAL {
                    Some(self.vocab.numeral_id(src.premod_sum + 100)?)
                } else {
                    None
                };
                for ex in 0..add_runner.n_examples() {
                    let logits = cross_task_patch(&add_runner, ex, &h_src, &union)?;
                    let pred = argmax_row(logits.row(0));
                    let echo_hit = echo.map_or(false, |e| pred == e);
                    rev_rows.push(vec![
                        kind.name().to_string(),
                        src.premod_sum.to_string(),
                        self.vocab.token(expected).to_string(),
                        self.vocab.token(pred).to_string(),
                        (echo_hit as u8).to_string(),
                    ]);
                }
            }
        }
        bundle.write_csv(
            "fig5_cross_task",
            &["target_task", "source_sum", "expected", "predicted"],
            &fwd_rows,
        )?;
        bundle.write_csv(
            "fig6_cross_task_reverse",
            &["source_task", "source_sum", "expected", "predicted", "plus100_echo"],
            &rev_rows,
        )?;
        Ok(())
    }

    // ── stage: probe ────────────────────────────────────────────────────

    fn probes_path(&self) -> PathBuf {
        self.out_dir.join("probes.fp")
    }

    fn stage_probe(&mut self, bundle: &mut ReportBundle) -> Result<()> {
        let model = self.require_model()?.clone(); // weights are Arc-shared
        let model = &model;
        let layer = self.analysis_layer.ok_or_else(|| {
            Error::artifact("analysis layer unknown: run the `das` stage first".to_string())
        })?;
        let point = HookPoint::ResidPostMlp;
        let pcfg = ProbeTrainConfig {
            epochs: self.config.probe.epochs,
            lr: self.config.probe.lr,
            train_fraction: 0.8,
            seed: derive_seed(self.config.seed, "probe/split"),
        };
        let periods: Vec<usize> =
            (self.config.probe.period_min..=self.config.probe.period_max).collect();

        // Probes are trained on the addition task.
        let add_ds = &self.datasets[&TaskKind::Addition];
        let mut acts = collect_answer_activations(model, add_ds, layer, point)?;
        if acts.len() > self.config.probe.max_activations {
            let stride = acts.len().div_ceil(self.config.probe.max_activations);
            acts = acts.into_iter().step_by(stride).collect();
        }
        let probe_path = self.probes_path();
        let probes = if probe_path.exists() {
            load_fourier_probes(&probe_path)?
        } else {
            let probes = train_fourier_probes(&acts, &periods, layer, point, &pcfg)?;
            save_fourier_probes(&probes, &probe_path)?;
            probes
        };
        self.probes = probes.into_iter().map(|p| (p.period, p)).collect();

        // R^2 grid: analysis site plus any extra configured layers.
        let mut sweep_sites = vec![(layer, point, acts.clone())];
        for &extra in &self.config.probe.extra_sweep_layers {
            if extra != layer && extra < model.config.n_layers {
                let mut extra_acts =
                    collect_answer_activations(model, add_ds, extra, point)?;
                if extra_acts.len() > self.config.probe.max_activations {
                    let stride = extra_acts.len().div_ceil(self.config.probe.max_activations);
                    extra_acts = extra_acts.into_iter().step_by(stride).collect();
                }
                sweep_sites.push((extra, point, extra_acts));
            }
        }
        let grid = r2_sweep(&sweep_sites, &periods, &pcfg)?;
        let mut grid_rows = Vec::new();
        for (si, (l, p)) in grid.sites.iter().enumerate() {
            for (pi, &t) in grid.periods.iter().enumerate() {
                grid_rows.push(vec![
                    l.to_string(),
                    p.name().to_string(),
                    t.to_string(),
                    fmt_f64(grid.values[si][pi]),
                ]);
            }
        }
        bundle.write_csv("fig24_r2_sweep", &["layer", "hook_point", "period", "mean_r2"], &grid_rows)?;

        // Probe-subspace overlap and steering periods per task.
        let mut overlap_rows = Vec::new();
        let mut period_table = serde_json::Map::new();
        for (&kind, _) in &self.datasets.clone() {
            let sub = self.require_subspace(kind, CausalVariable::OutputConcept)?;
            let profile = period_overlap_profile(&self.probes, &sub.basis)?;
            for &(t, w) in &profile {
                overlap_rows.push(vec![
                    kind.name().to_string(),
                    t.to_string(),
                    fmt_f64(w),
                ]);
            }
            let (selected, empty) =
                select_steering_periods(&profile, self.config.probe.overlap_threshold);
            if empty {
                eprintln!("[probe] warning: no steering periods above threshold for {kind}");
            }
            period_table.insert(kind.name().to_string(), json!(selected));
            self.steering_periods.insert(kind, selected);
        }
        bundle.write_csv("fig23_probe_overlap", &["task", "period", "omega"], &overlap_rows)?;
        bundle.write_json("table6_steering_periods", serde_json::Value::Object(period_table))?;

        // Circular probes: concept geometry at the concept token position
        // and output geometry at the final position, per layer.
        let mut circ_rows = Vec::new();
        for kind in [TaskKind::Months, TaskKind::Weekdays, TaskKind::Hours] {
            let ds = &self.datasets[&kind];
            let period = ds.spec.period.unwrap() as usize;
            for l in 0..model.config.n_layers {
                let concept_acts = collect_concept_activations(model, ds, l, point)?;
                let concept_probe = train_circular_probe(
                    &concept_acts,
                    period,
                    self.config.probe.circular_d_pca,
                    &pcfg,
                )?;
                let output_acts = collect_answer_activations(model, ds, l, point)?;
                // Relabel with the output concept value: sum mod period.
                let output_acts: Vec<(i64, Tensor)> = output_acts
                    .into_iter()
                    .map(|(s, t)| (s.rem_euclid(period as i64), t))
                    .collect();
                let output_probe = train_circular_probe(
                    &output_acts,
                    period,
                    self.config.probe.circular_d_pca,
                    &pcfg,
                )?;
                circ_rows.push(vec![
                    kind.name().to_string(),
                    l.to_string(),
                    fmt_f64(concept_probe.mean_r2()),
                    fmt_f64(output_probe.mean_r2()),
                ]);
            }
        }
        bundle.write_csv(
            "fig3_circular_probes",
            &["task", "layer", "concept_position_r2", "final_position_r2"],
            &circ_rows,
        )?;
        Ok(())
    }

    // ── stage: steer ────────────────────────────────────────────────────

    fn stage_steer(&mut self, bundle: &mut ReportBundle) -> Result<()> {
        use rand::Rng;
        let model = self.require_model()?;
        let layer = self.analysis_layer.ok_or_else(|| {
            Error::artifact("analysis layer unknown: run the `das` stage first".to_string())
        })?;
        if self.probes.is_empty() {
            return Err(Error::artifact(
                "probes missing: run the `probe` stage first".to_string(),
            ));
        }
        let mut matrix_rows = Vec::new();
        let mut alpha_rows = Vec::new();
        let mut per_prompt_export = serde_json::Map::new();
        for &kind in &self.config.steer.tasks.clone() {
            let ds = &self.datasets[&kind];
            let periods = self
                .steering_periods
                .get(&kind)
                .filter(|p| !p.is_empty())
                .cloned()
                .unwrap_or_else(|| vec![2, 5, 10]);
            let spec_model = CausalModel::new(&ds.spec);
            // Steering targets: the task's concept values.
            let targets: Vec<i64> = match ds.spec.period {
                Some(p) => match kind {
                    TaskKind::Hours => (0..p).collect(),
                    _ => (1..=p).collect(),
                },
                None => (0..24).collect(),
            };
            let answer_tokens = ds.spec.answer_tokens(&self.vocab);
            let mut rng = crate::rng::rng_from_seed(derive_seed(
                self.config.seed,
                &format!("steer/{kind}"),
            ));
            let prompts: Vec<crate::tasks::PromptInstance> = (0..self
                .config
                .steer
                .max_prompts
                .min(ds.prompts.len()))
                .map(|_| ds.prompts[rng.gen_range(0..ds.prompts.len())].clone())
                .collect();
            let cfg = SteeringConfig {
                alpha: self.config.steer.alpha,
                layer,
                ..SteeringConfig::new(0, periods.clone(), layer)
            };
            let keep_pp = kind == TaskKind::Months;
            let report = steering_matrix(
                model,
                &prompts,
                &targets,
                &self.probes,
                &answer_tokens,
                &cfg,
                keep_pp,
            )?;
            for (ti, row) in report.matrix.iter().enumerate() {
                // Map target value to its own answer-token column.
                let target_tok = spec_model
                    .num_to_con(report.targets[ti])
                    .ok()
                    .and_then(|c| self.vocab.id(&c).ok());
                let diag = target_tok
                    .and_then(|tok| {
                        answer_tokens.iter().position(|&a| a == tok).map(|i| row[i])
                    })
                    .unwrap_or(f64::NAN);
                for (ci, v) in row.iter().enumerate() {
                    let col_name = if ci < answer_tokens.len() {
                        self.vocab.token(answer_tokens[ci]).to_string()
                    } else {
                        "other".to_string()
                    };
                    matrix_rows.push(vec![
                        kind.name().to_string(),
                        report.targets[ti].to_string(),
                        col_name,
                        fmt_f64(*v),
                        fmt_f64(diag),
                    ]);
                }
            }
            if let Some(pp) = report.per_prompt {
                per_prompt_export.insert(
                    kind.name().to_string(),
                    json!({
                        "targets": report.targets,
                        "prompts": prompts.iter().map(|p| (p.concept_index, p.offset)).collect::<Vec<_>>(),
                        "rows": pp,
                    }),
                );
            }
            // Alpha sweep: mean diagonal mass per alpha (bypass row = null).
            for &alpha in &self.config.steer.alpha_sweep.clone() {
                let cfg = SteeringConfig {
                    alpha,
                    layer,
                    ..SteeringConfig::new(0, periods.clone(), layer)
                };
                let rep = steering_matrix(
                    model,
                    &prompts[..prompts.len().min(24)],
                    &targets,
                    &self.probes,
                    &answer_tokens,
                    &cfg,
                    false,
                )?;
                let mut diag = 0.0;
                let mut count = 0usize;
                for (ti, row) in rep.matrix.iter().enumerate() {
                    if let Ok(c) = spec_model.num_to_con(rep.targets[ti]) {
                        if let Ok(tok) = self.vocab.id(&c) {
                            if let Some(i) = answer_tokens.iter().position(|&a| a == tok) {
                                diag += row[i];
                                count += 1;
                            }
                        }
                    }
                }
                alpha_rows.push(vec![
                    kind.name().to_string(),
                    fmt_f64(alpha),
                    fmt_f64(diag / count.max(1) as f64),
                ]);
            }
        }
        bundle.write_csv(
            "fig7_steering_matrix",
            &["task", "target", "answer", "mean_probability", "diagonal_mass"],
            &matrix_rows,
        )?;
        bundle.write_csv(
            "fig26_alpha_sweep",
            &["task", "alpha", "mean_diagonal_mass"],
            &alpha_rows,
        )?;
        bundle.write_json(
            "fig27_per_prompt_steering",
            serde_json::Value::Object(per_prompt_export),
        )?;
        Ok(())
    }

    // ── stage: neurons ──────────────────────────────────────────────────

    fn stage_neurons(&mut self, bundle: &mut ReportBundle) -> Result<()> {
        use rand::Rng;
        let model = self.require_model()?;
        let layer = self.analysis_layer.ok_or_else(|| {
            Error::artifact("analysis layer unknown: run the `das` stage first".to_string())
        })?;
        let tasks: Vec<TaskKind> = self.datasets.keys().copied().collect();
        let sub_refs: Vec<(TaskKind, Tensor)> = tasks
            .iter()
            .map(|&k| {
                Ok((k, self.require_subspace(k, CausalVariable::OutputConcept)?.basis.clone()))
            })
            .collect::<Result<_>>()?;
        let borrowed: Vec<(TaskKind, &Tensor)> =
            sub_refs.iter().map(|(k, b)| (*k, b)).collect();
        let selection = select_neurons(model, layer, &borrowed, self.config.neurons.tau)?;

        // Histogram data (all omegas) and the selected sets.
        let mut hist_rows = Vec::new();
        for (task, omegas) in &selection.omegas {
            for (i, w) in omegas.iter().enumerate() {
                hist_rows.push(vec![task.name().to_string(), i.to_string(), fmt_f64(*w)]);
            }
        }
        bundle.write_csv("fig18_write_score_hist", &["task", "neuron", "omega"], &hist_rows)?;
        let sets_json: serde_json::Map<String, serde_json::Value> = selection
            .selected
            .iter()
            .map(|(k, s)| (k.name().to_string(), json!(s)))
            .collect();
        bundle.write_json(
            "neuron_sets",
            json!({
                "layer": layer,
                "tau": self.config.neurons.tau,
                "sets": sets_json,
                "pearson": selection
                    .pearson
                    .iter()
                    .map(|(a, b, r)| json!([a.name(), b.name(), r]))
                    .collect::<Vec<_>>(),
            }),
        )?;

        let addition_set: Vec<usize> =
            selection.set_for(TaskKind::Addition).unwrap_or(&[]).to_vec();
        if addition_set.is_empty() {
            eprintln!("[neurons] warning: no addition neurons above tau; using top-8 by omega");
        }
        let addition_set = if addition_set.is_empty() {
            // Fall back to the top-8 so downstream tables still emit.
            let omegas = &selection
                .omegas
                .iter()
                .find(|(k, _)| *k == TaskKind::Addition)
                .expect("addition scored")
                .1;
            let mut idx: Vec<usize> = (0..omegas.len()).collect();
            idx.sort_by(|&a, &b| omegas[b].partial_cmp(&omegas[a]).unwrap());
            idx.truncate(8);
            idx.sort_unstable();
            idx
        } else {
            addition_set
        };

        // Ablation tables on deterministic subsamples.
        let mut ablation_rows = Vec::new();
        for &kind in &tasks {
            let ds = &self.datasets[&kind];
            let mut rng = crate::rng::rng_from_seed(derive_seed(
                self.config.seed,
                &format!("neurons/ablate/{kind}"),
            ));
            let sample: Vec<crate::tasks::PromptInstance> = (0..self
                .config
                .neurons
                .max_prompts
                .min(ds.prompts.len()))
                .map(|_| ds.prompts[rng.gen_range(0..ds.prompts.len())].clone())
                .collect();
            let sample_ds = Dataset { spec: ds.spec.clone(), prompts: sample };
            let clean_preds = model.predict(&sample_ds.prompts)?;
            let clean = accuracy_breakdown(&clean_preds, &sample_ds)?;
            let mut emit = |label: &str, report: &crate::tasks::BreakdownReport| {
                let bands: Vec<(String, Option<crate::tasks::Cell>)> = vec![
                    ("overall".into(), Some(report.overall)),
                    ("offset_in_cycle".into(), report.offset_in_cycle),
                    ("offset_beyond_cycle".into(), report.offset_beyond_cycle),
                ];
                for (band, cell) in bands {
                    if let Some(cell) = cell {
                        ablation_rows.push(vec![
                            kind.name().to_string(),
                            label.to_string(),
                            band,
                            fmt_f64(cell.accuracy()),
                            cell.total.to_string(),
                        ]);
                    }
                }
            };
            emit("clean", &clean);
            for mode in [AblationMode::OnlyKeep, AblationMode::Zero, AblationMode::Flip] {
                let report = ablate(model, &sample_ds, layer, &addition_set, mode, false)?;
                emit(mode.name(), &report);
            }
        }
        bundle.write_csv(
            "table4_ablation",
            &["task", "mode", "band", "accuracy", "n"],
            &ablation_rows,
        )?;

        // Ribbons: mean combined activation per sum.
        let add_ds = &self.datasets[&TaskKind::Addition];
        let mut rng =
            crate::rng::rng_from_seed(derive_seed(self.config.seed, "neurons/ribbons"));
        let ribbon_sample: Vec<crate::tasks::PromptInstance> = (0..800.min(add_ds.prompts.len()))
            .map(|_| add_ds.prompts[rng.gen_range(0..add_ds.prompts.len())].clone())
            .collect();
        let ribbon_ds = Dataset { spec: add_ds.spec.clone(), prompts: ribbon_sample };
        let (sums, matrix) =
            mean_activation_by_sum(model, &ribbon_ds, layer, &addition_set)?;
        let mut ribbon_rows = Vec::new();
        let mut ribbon_rows_clipped = Vec::new();
        for (ri, &ni) in addition_set.iter().enumerate() {
            for (ci, &s) in sums.iter().enumerate() {
                let v = matrix[ri][ci];
                ribbon_rows.push(vec![ni.to_string(), s.to_string(), fmt_f64(v)]);
                ribbon_rows_clipped.push(vec![
                    ni.to_string(),
                    s.to_string(),
                    fmt_f64(v.clamp(-2.0, 2.0)),
                ]);
            }
        }
        bundle.write_csv("fig13_ribbons_unclipped", &["neuron", "sum", "mean_activation"], &ribbon_rows)?;
        bundle.write_csv("fig8a_ribbons", &["neuron", "sum", "mean_activation_clipped"], &ribbon_rows_clipped)?;

        // Period assignment + baseline.
        if !self.probes.is_empty() {
            let weights = model.mlp_weights(layer)?;
            let baseline = period_alignment_baseline(model, layer, &self.probes)?;
            let mut period_rows = Vec::new();
            let mut assigned: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for &ni in &addition_set {
                let (t, align) = assign_period(&weights[ni].2, &self.probes)?;
                if let Some(t) = t {
                    assigned.entry(t).or_default().push(ni);
                }
                period_rows.push(vec![
                    ni.to_string(),
                    t.map_or("unassigned".to_string(), |t| t.to_string()),
                    fmt_f64(align),
                    fmt_f64(baseline),
                ]);
            }
            bundle.write_csv(
                "fig8b_period_alignment",
                &["neuron", "period", "alignment", "layer_baseline"],
                &period_rows,
            )?;

            // Split/mixed classification per cyclic task.
            let mut split_rows = Vec::new();
            for &kind in &tasks {
                let concept = self.require_subspace(kind, CausalVariable::InputConcept)?;
                let offset = self.require_subspace(kind, CausalVariable::Offset)?;
                for &ni in &addition_set {
                    let s = split_mixed_classify(
                        &weights[ni].0,
                        &weights[ni].1,
                        &concept.basis,
                        &offset.basis,
                    )?;
                    split_rows.push(vec![
                        kind.name().to_string(),
                        ni.to_string(),
                        format!("{:?}", s.pattern).to_lowercase(),
                        fmt_f64(s.gate_concept),
                        fmt_f64(s.gate_offset),
                        fmt_f64(s.up_concept),
                        fmt_f64(s.up_offset),
                    ]);
                }
            }
            bundle.write_csv(
                "table_split_mixed",
                &["task", "neuron", "pattern", "gate_concept", "gate_offset", "up_concept", "up_offset"],
                &split_rows,
            )?;

            // Clustering by |cosine| of down rows.
            let rows: Vec<Tensor> =
                addition_set.iter().map(|&ni| weights[ni].2.clone()).collect();
            let clustering = cluster_by_cosine(&rows)?;
            let flat = clustering.flat(self.config.neurons.cluster_cut);
            bundle.write_json(
                "fig14_clusters",
                json!({
                    "neurons": addition_set,
                    "merges": clustering.merges,
                    "flat_clusters": flat,
                    "cut": self.config.neurons.cluster_cut,
                }),
            )?;

            // Plane diagrams for one sample prompt per task.
            let mut panels_json = serde_json::Map::new();
            let plot_periods: Vec<usize> = assigned.keys().copied().collect();
            if !plot_periods.is_empty() {
                for &kind in &tasks {
                    let ds = &self.datasets[&kind];
                    let prompt = &ds.prompts[ds.prompts.len() / 2];
                    let panels = downproj_plane_export(
                        model,
                        layer,
                        &addition_set,
                        &self.probes,
                        &plot_periods,
                        prompt,
                    )?;
                    panels_json.insert(
                        kind.name().to_string(),
                        json!({
                            "concept_index": prompt.concept_index,
                            "offset": prompt.offset,
                            "premod_sum": prompt.premod_sum,
                            "panels": panels,
                        }),
                    );
                }
            }
            bundle.write_json("fig10_plane_diagrams", serde_json::Value::Object(panels_json))?;
        }
        Ok(())
    }

    // ── stage: report (accuracy tables + explicit mod) ──────────────────

    fn stage_report(&mut self, bundle: &mut ReportBundle) -> Result<()> {
        let model = self.require_model()?;
        let mut t2_rows = Vec::new();
        let mut t3_rows = Vec::new();
        let mut per_sum_rows = Vec::new();
        for (kind, ds) in &self.datasets {
            let preds = model.predict(&ds.prompts)?;
            let report = accuracy_breakdown(&preds, ds)?;
            let cell = |c: Option<crate::tasks::Cell>| c.map_or("-".into(), |c| fmt_f64(c.accuracy()));
            t2_rows.push(vec![
                kind.name().to_string(),
                cell(report.offset_in_cycle),
                cell(report.offset_beyond_cycle),
                fmt_f64(report.overall.accuracy()),
                cell(report.sum_within),
                cell(report.sum_beyond),
            ]);
            if !report.bands_separate.is_empty() {
                t3_rows.push(vec![
                    kind.name().to_string(),
                    fmt_f64(report.bands_separate[0].accuracy()),
                    fmt_f64(report.bands_separate[1].accuracy()),
                    fmt_f64(report.bands_separate[2].accuracy()),
                    fmt_f64(report.bands_cumulative[0].accuracy()),
                    fmt_f64(report.bands_cumulative[1].accuracy()),
                    fmt_f64(report.bands_cumulative[2].accuracy()),
                ]);
            }
            for (sum, cell) in &report.per_sum {
                per_sum_rows.push(vec![
                    kind.name().to_string(),
                    sum.to_string(),
                    fmt_f64(cell.accuracy()),
                    cell.total.to_string(),
                ]);
            }
        }
        bundle.write_csv(
            "table2_accuracy_breakdown",
            &["task", "offset_1_to_p", "offset_p_to_2p", "overall", "sum_within_p", "sum_beyond_p"],
            &t2_rows,
        )?;
        bundle.write_csv(
            "table3_sum_bands",
            &["task", "band_1p", "band_2p", "band_3p", "cum_1p", "cum_2p", "cum_3p"],
            &t3_rows,
        )?;
        bundle.write_csv("fig9_per_sum_accuracy", &["task", "sum", "accuracy", "n"], &per_sum_rows)?;

        if let Some(em) = &self.explicit_mod {
            let preds = model.predict(&em.prompts)?;
            let mut by_k: BTreeMap<i64, (usize, usize)> = BTreeMap::new();
            for (p, pred) in em.prompts.iter().zip(&preds) {
                let entry = by_k.entry(p.modulus.unwrap_or(0)).or_insert((0, 0));
                entry.1 += 1;
                if *pred == p.gold {
                    entry.0 += 1;
                }
            }
            let rows: Vec<Vec<String>> = by_k
                .iter()
                .map(|(k, (c, n))| {
                    vec![k.to_string(), fmt_f64(*c as f64 / *n as f64), n.to_string()]
                })
                .collect();
            bundle.write_csv("fig16_explicit_mod", &["modulus", "accuracy", "n"], &rows)?;
        }
        bundle.write_json(
            "run_summary",
            json!({
                "analysis_layer": self.analysis_layer,
                "steering_periods": self
                    .steering_periods
                    .iter()
                    .map(|(k, v)| (k.name().to_string(), json!(v)))
                    .collect::<serde_json::Map<String, serde_json::Value>>(),
            }),
        )?;
        Ok(())
    }
}

// ── artifact verification ───────────────────────────────────────────────

#[derive(Debug, Clone, Serialize)]
pub struct VerifyEntry {
    pub path: String,
    pub kind: String,
    pub ok: bool,
    pub message: String,
}

/// Integrity checks over persisted artifacts: serialization, subspace
/// orthonormality, probe manifest consistency.
pub fn verify_artifacts(paths: &[PathBuf]) -> Vec<VerifyEntry> {
    let vocab = Vocab::standard();
    paths
        .iter()
        .map(|path| {
            let name = path.display().to_string();
            match verify_one(path, &vocab) {
                Ok(kind) => VerifyEntry { path: name, kind, ok: true, message: "ok".into() },
                Err(e) => VerifyEntry {
                    path: name,
                    kind: "unknown".into(),
                    ok: false,
                    message: e.to_string(),
                },
            }
        })
        .collect()
}

fn verify_one(path: &Path, vocab: &Vocab) -> Result<String> {
    if path.extension().and_then(|e| e.to_str()) == Some("ds") {
        load_dataset(path, vocab)?;
        return Ok("dataset".into());
    }
    let art = crate::io::Artifact::load(path)?;
    let kind = art.manifest["kind"].as_str().unwrap_or("unknown").to_string();
    match kind.as_str() {
        "subspace" => {
            let sub = Subspace::load(path)?;
            let dev = crate::linalg::gram_deviation(&sub.basis);
            if dev > 1e-4 {
                return Err(Error::artifact(format!(
                    "subspace gram deviation {dev:.2e} exceeds 1e-4"
                )));
            }
        }
        "fourier_probes" => {
            load_fourier_probes(path)?;
        }
        "checkpoint" => {
            load_checkpoint(path)?;
        }
        _ => {
            return Err(Error::artifact(format!("unknown artifact kind '{kind}'")));
        }
    }
    Ok(kind)
}

/// Direct helper for the `eval_iia` of a full-rank patch used in tests.
pub fn full_replacement_iia(
    target: &dyn SitePatchModel,
    pairs: &[crate::interventions::PatchPair],
) -> Result<f64> {
    let d = target.d_model();
    eval_iia(target, &Tensor::eye(d), pairs)
}
