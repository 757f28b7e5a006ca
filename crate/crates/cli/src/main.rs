//! `lab`: train the toy model, then take it apart.
//!
//! Verbs map onto the pipeline stages; `report` runs a whole experiment
//! config end to end. Exit codes: 0 success, 2 config error, 3 artifact
//! error, 4 numeric error.

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use lab_core::error::Error;
use lab_core::interventions::{build_site_pairs, dim_sweep, residual_patch_from_cache, DasTrainConfig, Subspace};
use lab_core::model::{argmax_row, load_checkpoint, save_checkpoint, train, HookPoint, TransformerModel};
use lab_core::pipeline::{verify_artifacts, ExperimentConfig, Pipeline};
use lab_core::probes::{
    collect_answer_activations, collect_concept_activations, load_fourier_probes,
    period_overlap_profile, save_fourier_probes, select_steering_periods, train_circular_probe,
    train_fourier_probes, ProbeTrainConfig,
};
use lab_core::rng::derive_seed;
use lab_core::steering::{steering_matrix, SteeringConfig};
use lab_core::tasks::{
    generate_dataset, generate_explicit_mod, load_dataset, sample_counterfactual_pairs,
    CausalVariable, TaskKind, TaskSpec, Vocab,
};

#[derive(Parser)]
#[command(name = "lab", version, about = "cyclic-arithmetic interpretability lab")]
struct Cli {
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads for evaluation sweeps (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a task dataset.
    Gen(GenArgs),
    /// Train the toy model on the canonical task mixture.
    Train(TrainArgs),
    /// Full residual-stream patch sweep for one task/variable.
    Patch(PatchArgs),
    /// Train DAS subspaces over a dimension sweep.
    Das(DasArgs),
    /// Patch between tasks within a union subspace.
    Crosspatch(CrosspatchArgs),
    /// Train Fourier probes (or circular probes with `circular`).
    Probe(ProbeArgs),
    /// Steer prompts toward counterfactual sums via Fourier probes.
    Steer(SteerArgs),
    /// Select and analyze addition neurons.
    Neurons(NeuronArgs),
    /// Run a full experiment config and emit the report bundle.
    Report(ReportArgs),
    /// Check artifact integrity.
    Verify(VerifyArgs),
}

#[derive(Args)]
struct GenArgs {
    #[arg(long)]
    task: String,
    #[arg(long)]
    out: PathBuf,
    /// Samples for the explicit-mod task.
    #[arg(long, default_value_t = 1000)]
    samples: usize,
    /// Restrict explicit-mod prompts to a + b <= 3k.
    #[arg(long, default_value_t = false)]
    constrained: bool,
    /// Template variant index.
    #[arg(long, default_value_t = 0)]
    template: usize,
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config (JSON); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PatchArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    task: String,
    #[arg(long)]
    var: String,
    #[arg(long, default_value_t = 96)]
    pairs: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DasArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    task: String,
    #[arg(long)]
    var: String,
    #[arg(long)]
    layer: usize,
    /// post_attn or post_mlp.
    #[arg(long, default_value = "post_attn")]
    hook: String,
    /// Subspace dimensions, e.g. "1..8" or "1,2,4".
    #[arg(long, default_value = "1..8")]
    k: String,
    #[arg(long, default_value_t = 4096)]
    pairs: usize,
    #[arg(long, default_value_t = 512)]
    test: usize,
    #[arg(long, default_value_t = 8)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f32,
    #[arg(long, default_value_t = 16)]
    batch: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CrosspatchArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    source: String,
    #[arg(long)]
    target: String,
    /// Source-task output subspace file.
    #[arg(long)]
    source_sub: PathBuf,
    /// Target-task output subspace file.
    #[arg(long)]
    target_sub: PathBuf,
    #[arg(long, default_value_t = 64)]
    sources: usize,
    #[arg(long, default_value_t = 16)]
    targets: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProbeArgs {
    /// "circular" switches to PCA-reduced circular probes.
    #[arg(value_name = "MODE")]
    mode: Option<String>,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    layer: usize,
    /// Periods, e.g. "2..150".
    #[arg(long, default_value = "2..150")]
    periods: String,
    /// Task whose activations feed the probes (addition by default;
    /// circular probes require a cyclic task).
    #[arg(long, default_value = "addition")]
    task: String,
    #[arg(long, default_value_t = 5)]
    pca: usize,
    #[arg(long, default_value_t = 500)]
    epochs: usize,
    #[arg(long, default_value_t = 1200)]
    max_activations: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SteerArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    probes: PathBuf,
    #[arg(long)]
    task: String,
    /// Steering targets, e.g. "0..23".
    #[arg(long)]
    targets: String,
    #[arg(long, default_value_t = 10.0)]
    alpha: f64,
    /// "auto" (overlap with a subspace) or an explicit list "2,5,10".
    #[arg(long, default_value = "auto")]
    periods: String,
    /// Output-concept subspace for automatic period selection.
    #[arg(long)]
    subspace: Option<PathBuf>,
    #[arg(long, default_value_t = 0.3)]
    threshold: f64,
    #[arg(long, default_value_t = 48)]
    max_prompts: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct NeuronArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    layer: usize,
    #[arg(long, default_value_t = 0.4)]
    tau: f64,
    /// task=subspace.das pairs, comma separated.
    #[arg(long)]
    subspaces: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct VerifyArgs {
    paths: Vec<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global();
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn parse_range(text: &str) -> Result<Vec<usize>, Error> {
    let text = text.trim();
    if let Some((lo, hi)) = text.split_once("..") {
        let lo: usize =
            lo.parse().map_err(|_| Error::Config(format!("bad range '{text}'")))?;
        let hi: usize =
            hi.parse().map_err(|_| Error::Config(format!("bad range '{text}'")))?;
        if lo > hi {
            return Err(Error::Config(format!("empty range '{text}'")));
        }
        Ok((lo..=hi).collect())
    } else {
        text.split(',')
            .map(|t| t.trim().parse().map_err(|_| Error::Config(format!("bad list '{text}'"))))
            .collect()
    }
}

fn parse_targets(text: &str) -> Result<Vec<i64>, Error> {
    parse_range(text).map(|v| v.into_iter().map(|x| x as i64).collect())
}

fn load_config(path: &Option<PathBuf>, seed: u64) -> Result<ExperimentConfig, Error> {
    let mut cfg = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            ExperimentConfig::from_json(&text)?
        }
        None => ExperimentConfig::default(),
    };
    if cfg.seed == 0 {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn load_model(path: &PathBuf) -> Result<TransformerModel, Error> {
    Ok(load_checkpoint(path)?.0)
}

fn write_csv(path: &PathBuf, header: &[&str], rows: &[Vec<String>]) -> Result<(), Error> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{}", header.join(","))?;
    for row in rows {
        writeln!(f, "{}", row.join(","))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    let seed = cli.seed;
    let vocab = Vocab::standard();
    match cli.command {
        Command::Gen(args) => {
            let kind = TaskKind::parse(&args.task)?;
            let ds = if kind == TaskKind::ExplicitMod {
                generate_explicit_mod(
                    (1, 200),
                    (1, 200),
                    (2, 100),
                    args.samples,
                    derive_seed(seed, "gen/explicit_mod"),
                    args.constrained,
                    &vocab,
                )?
            } else {
                let mut spec = TaskSpec::canonical(kind);
                if args.template >= TaskSpec::template_count(kind) {
                    return Err(Error::Config(format!(
                        "task {kind} has {} template variants",
                        TaskSpec::template_count(kind)
                    )));
                }
                spec.template = args.template;
                generate_dataset(&spec, &vocab)?
            };
            lab_core::tasks::save_dataset(&ds, &args.out)?;
            println!("wrote {} prompts to {}", ds.prompts.len(), args.out.display());
        }
        Command::Train(args) => {
            let cfg = load_config(&args.config, seed)?;
            let datasets: Vec<_> = TaskKind::all_canonical()
                .iter()
                .map(|&k| generate_dataset(&TaskSpec::canonical(k), &vocab))
                .collect::<Result<_, _>>()?;
            let mut model = TransformerModel::init(cfg_model(&cfg, &vocab))?;
            let log = train(&mut model, &datasets, &cfg_train(&cfg))?;
            let final_acc = log.evals.last().map(|e| e.per_task.clone()).unwrap_or_default();
            save_checkpoint(&model, &args.out, log.steps_run, &final_acc)?;
            println!(
                "trained {} steps (targets reached: {}); checkpoint at {}",
                log.steps_run,
                log.reached_targets,
                args.out.display()
            );
        }
        Command::Patch(args) => {
            let model = load_model(&args.ckpt)?;
            let kind = TaskKind::parse(&args.task)?;
            let variable = CausalVariable::parse(&args.var)?;
            let ds = generate_dataset(&TaskSpec::canonical(kind), &vocab)?;
            let (pairs, _) = sample_counterfactual_pairs(
                &ds,
                variable,
                args.pairs,
                0,
                derive_seed(seed, "cli/patch"),
                &vocab,
                &|_| true,
            )?;
            let mut rows = Vec::new();
            let seq_len = pairs[0].original.tokens.len();
            for layer in 0..model.config.n_layers {
                for position in 0..seq_len {
                    let mut hits = 0usize;
                    for pair in &pairs {
                        let (_, cache) = model.forward_with_cache(&pair.counterfactual.tokens)?;
                        let logits = residual_patch_from_cache(
                            &model,
                            &pair.original,
                            &cache,
                            layer,
                            HookPoint::ResidPostMlp,
                            position,
                        )?;
                        if argmax_row(logits.row(pair.original.final_pos)) == pair.target_label
                        {
                            hits += 1;
                        }
                    }
                    rows.push(vec![
                        layer.to_string(),
                        position.to_string(),
                        format!("{:.6}", hits as f64 / pairs.len() as f64),
                    ]);
                }
            }
            write_csv(&args.out, &["layer", "position", "interchange_accuracy"], &rows)?;
            println!("wrote {}", args.out.display());
        }
        Command::Das(args) => {
            let model = load_model(&args.ckpt)?;
            let kind = TaskKind::parse(&args.task)?;
            let variable = CausalVariable::parse(&args.var)?;
            let point = HookPoint::parse(&args.hook)?;
            if args.layer >= model.config.n_layers {
                return Err(Error::Config(format!("layer {} out of range", args.layer)));
            }
            let ds = generate_dataset(&TaskSpec::canonical(kind), &vocab)?;
            let preds = model.predict(&ds.prompts)?;
            let correct: std::collections::HashSet<(i64, i64)> = ds
                .prompts
                .iter()
                .zip(&preds)
                .filter(|(p, &pred)| pred == p.gold)
                .map(|(p, _)| (p.concept_index, p.offset))
                .collect();
            let (train_pairs, test_pairs) = sample_counterfactual_pairs(
                &ds,
                variable,
                args.pairs,
                args.test,
                derive_seed(seed, "cli/das"),
                &vocab,
                &|p| correct.contains(&(p.concept_index, p.offset)),
            )?;
            let all: Vec<_> = train_pairs.iter().chain(&test_pairs).cloned().collect();
            let (runner, idx) = build_site_pairs(&model, &all, args.layer, point)?;
            let (test_idx, train_idx) = idx.split_at(test_pairs.len());
            let ks = parse_range(&args.k)?;
            let cfg = DasTrainConfig {
                epochs: args.epochs,
                lr: args.lr,
                batch: args.batch,
                seed: derive_seed(seed, "cli/das/train"),
                ..DasTrainConfig::new(1)
            };
            let sweep = dim_sweep(&runner, train_idx, test_idx, &ks, &cfg)?;
            for (k, iia) in &sweep.curve {
                println!("k={k}: test IIA {iia:.4}");
            }
            let subspace = Subspace {
                basis: sweep.best.basis.clone(),
                task: Some(kind),
                variable: Some(variable),
                layer: args.layer,
                point,
                test_iia: sweep.best.test_iia,
                pca_fallback: sweep.best.pca_fallback,
            };
            subspace.save(&args.out)?;
            println!(
                "best k={} (test IIA {:.4}) saved to {}",
                sweep.best_k,
                sweep.best.test_iia,
                args.out.display()
            );
        }
        Command::Crosspatch(args) => {
            use lab_core::rng::gen_index;
            let model = load_model(&args.ckpt)?;
            let source_kind = TaskKind::parse(&args.source)?;
            let target_kind = TaskKind::parse(&args.target)?;
            let source_sub = Subspace::load(&args.source_sub)?;
            let target_sub = Subspace::load(&args.target_sub)?;
            let union =
                lab_core::interventions::union_subspace(&source_sub.basis, &target_sub.basis)?;
            let src_ds = generate_dataset(&TaskSpec::canonical(source_kind), &vocab)?;
            let tgt_ds = generate_dataset(&TaskSpec::canonical(target_kind), &vocab)?;
            let causal = lab_core::tasks::CausalModel::new(&tgt_ds.spec);
            let mut rng = lab_core::rng::rng_from_seed(derive_seed(seed, "cli/crosspatch"));
            let targets: Vec<_> = (0..args.targets)
                .map(|_| tgt_ds.prompts[gen_index(&mut rng, tgt_ds.prompts.len())].clone())
                .collect();
            let runner = lab_core::interventions::TransformerSiteRunner::build(
                &model,
                targets,
                target_sub.layer,
                target_sub.point,
            )?;
            let mut rows = Vec::new();
            for _ in 0..args.sources {
                let src = &src_ds.prompts[gen_index(&mut rng, src_ds.prompts.len())];
                let (_, cache) = model.forward_with_cache(&src.tokens)?;
                let h = cache.resid_at(target_sub.point, target_sub.layer, src.final_pos);
                let expected = causal.num_to_con(src.premod_sum).ok();
                for ex in 0..args.targets {
                    let logits =
                        lab_core::interventions::cross_task_patch(&runner, ex, &h, &union)?;
                    let pred = vocab.token(argmax_row(logits.row(0))).to_string();
                    rows.push(vec![
                        src.premod_sum.to_string(),
                        expected.clone().unwrap_or_else(|| "-".into()),
                        pred,
                    ]);
                }
            }
            write_csv(&args.out, &["source_sum", "expected", "predicted"], &rows)?;
            println!("wrote {}", args.out.display());
        }
        Command::Probe(args) => {
            let model = load_model(&args.ckpt)?;
            let kind = TaskKind::parse(&args.task)?;
            let ds = generate_dataset(&TaskSpec::canonical(kind), &vocab)?;
            if args.layer >= model.config.n_layers {
                return Err(Error::Config(format!("layer {} out of range", args.layer)));
            }
            let pcfg = ProbeTrainConfig {
                epochs: args.epochs,
                seed: derive_seed(seed, "cli/probe"),
                ..Default::default()
            };
            match args.mode.as_deref() {
                Some("circular") => {
                    let period = ds.spec.period.ok_or_else(|| {
                        Error::Config("circular probes need a cyclic task".into())
                    })? as usize;
                    let acts = collect_concept_activations(
                        &model,
                        &ds,
                        args.layer,
                        HookPoint::ResidPostMlp,
                    )?;
                    let probe = train_circular_probe(&acts, period, args.pca, &pcfg)?;
                    let rows: Vec<Vec<String>> = probe
                        .scatter
                        .iter()
                        .map(|(s, c, k)| {
                            vec![k.to_string(), format!("{s:.6}"), format!("{c:.6}")]
                        })
                        .collect();
                    write_csv(&args.out, &["concept", "sin_readout", "cos_readout"], &rows)?;
                    println!(
                        "circular probe r2 sin {:.4} cos {:.4}; scatter at {}",
                        probe.r2_sin,
                        probe.r2_cos,
                        args.out.display()
                    );
                }
                Some(other) => {
                    return Err(Error::Config(format!("unknown probe mode '{other}'")));
                }
                None => {
                    let mut acts = collect_answer_activations(
                        &model,
                        &ds,
                        args.layer,
                        HookPoint::ResidPostMlp,
                    )?;
                    if acts.len() > args.max_activations {
                        let stride = acts.len().div_ceil(args.max_activations);
                        acts = acts.into_iter().step_by(stride).collect();
                    }
                    let periods = parse_range(&args.periods)?;
                    let probes = train_fourier_probes(
                        &acts,
                        &periods,
                        args.layer,
                        HookPoint::ResidPostMlp,
                        &pcfg,
                    )?;
                    save_fourier_probes(&probes, &args.out)?;
                    let best = probes
                        .iter()
                        .max_by(|a, b| a.mean_r2().partial_cmp(&b.mean_r2()).unwrap())
                        .expect("non-empty");
                    println!(
                        "trained {} probe pairs; best period T={} (r2 {:.4}); saved to {}",
                        probes.len(),
                        best.period,
                        best.mean_r2(),
                        args.out.display()
                    );
                }
            }
        }
        Command::Steer(args) => {
            use lab_core::rng::gen_index;
            let model = load_model(&args.ckpt)?;
            let kind = TaskKind::parse(&args.task)?;
            let ds = generate_dataset(&TaskSpec::canonical(kind), &vocab)?;
            let probes_list = load_fourier_probes(&args.probes)?;
            let layer = probes_list.first().map(|p| p.layer).unwrap_or(0);
            let probes: BTreeMap<usize, _> =
                probes_list.into_iter().map(|p| (p.period, p)).collect();
            let periods = if args.periods == "auto" {
                let sub_path = args.subspace.as_ref().ok_or_else(|| {
                    Error::Config("periods=auto needs --subspace".into())
                })?;
                let sub = Subspace::load(sub_path)?;
                let profile = period_overlap_profile(&probes, &sub.basis)?;
                let (selected, empty) = select_steering_periods(&profile, args.threshold);
                if empty {
                    return Err(Error::Numeric(
                        "no steering periods above the overlap threshold".into(),
                    ));
                }
                selected
            } else {
                parse_range(&args.periods)?
            };
            let targets = parse_targets(&args.targets)?;
            let mut rng = lab_core::rng::rng_from_seed(derive_seed(seed, "cli/steer"));
            let prompts: Vec<_> = (0..args.max_prompts.min(ds.prompts.len()))
                .map(|_| ds.prompts[gen_index(&mut rng, ds.prompts.len())].clone())
                .collect();
            let answer_tokens = ds.spec.answer_tokens(&vocab);
            let cfg = SteeringConfig {
                alpha: args.alpha,
                ..SteeringConfig::new(0, periods, layer)
            };
            let report =
                steering_matrix(&model, &prompts, &targets, &probes, &answer_tokens, &cfg, false)?;
            let mut rows = Vec::new();
            for (ti, row) in report.matrix.iter().enumerate() {
                for (ci, v) in row.iter().enumerate() {
                    let col = if ci < answer_tokens.len() {
                        vocab.token(answer_tokens[ci]).to_string()
                    } else {
                        "other".into()
                    };
                    rows.push(vec![
                        report.targets[ti].to_string(),
                        col,
                        format!("{v:.6}"),
                    ]);
                }
            }
            write_csv(&args.out, &["target", "answer", "mean_probability"], &rows)?;
            println!("wrote steering matrix to {}", args.out.display());
        }
        Command::Neurons(args) => {
            let model = load_model(&args.ckpt)?;
            if args.layer >= model.config.n_layers {
                return Err(Error::Config(format!("layer {} out of range", args.layer)));
            }
            let mut subs = Vec::new();
            for part in args.subspaces.split(',') {
                let (task, path) = part.split_once('=').ok_or_else(|| {
                    Error::Config("subspaces must be task=path pairs".into())
                })?;
                subs.push((TaskKind::parse(task.trim())?, Subspace::load(&PathBuf::from(path.trim()))?));
            }
            let borrowed: Vec<(TaskKind, &lab_core::Tensor)> =
                subs.iter().map(|(k, s)| (*k, &s.basis)).collect();
            let selection =
                lab_core::neurons::select_neurons(&model, args.layer, &borrowed, args.tau)?;
            let mut rows = Vec::new();
            for (task, set) in &selection.selected {
                println!("{task}: {} neurons above tau", set.len());
                for &i in set {
                    rows.push(vec![task.name().to_string(), i.to_string()]);
                }
            }
            write_csv(&args.out, &["task", "neuron"], &rows)?;
            println!("wrote {}", args.out.display());
        }
        Command::Report(args) => {
            let cfg = load_config(&args.config, seed)?;
            let outcome = Pipeline::new(cfg, &args.out)?.run()?;
            println!(
                "bundle {} (analysis layer {}) at {}",
                outcome.bundle_hash,
                outcome.analysis_layer,
                outcome.report_dir.display()
            );
        }
        Command::Verify(args) => {
            if args.paths.is_empty() {
                return Err(Error::Config("verify needs at least one path".into()));
            }
            let entries = verify_artifacts(&args.paths);
            let mut ok = true;
            for e in &entries {
                println!("{} [{}]: {}", e.path, e.kind, e.message);
                ok &= e.ok;
            }
            if !ok {
                return Ok(ExitCode::from(3));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cfg_model(cfg: &ExperimentConfig, vocab: &Vocab) -> lab_core::model::ModelConfig {
    let mut mc = lab_core::model::ModelConfig::desk_default(vocab.len());
    mc.n_layers = cfg.model.n_layers;
    mc.d_model = cfg.model.d_model;
    mc.n_heads = cfg.model.n_heads;
    mc.d_mlp = cfg.model.d_mlp;
    mc.max_seq_len = cfg.model.max_seq_len;
    mc.seed = cfg.seed;
    mc
}

fn cfg_train(cfg: &ExperimentConfig) -> lab_core::model::TrainConfig {
    lab_core::model::TrainConfig {
        max_steps: cfg.train.max_steps,
        batch_size: cfg.train.batch_size,
        lr: cfg.train.lr,
        warmup_steps: cfg.train.warmup_steps,
        eval_interval: cfg.train.eval_interval,
        seed: cfg.seed,
        target_in_cycle: cfg.train.target_in_cycle,
        target_addition_small_sum: cfg.train.target_addition_small_sum,
        ..Default::default()
    }
}
