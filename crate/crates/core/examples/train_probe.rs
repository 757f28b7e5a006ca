use lab_core::model::{train, ModelConfig, TrainConfig, TransformerModel};
use lab_core::tasks::{generate_dataset, TaskKind, TaskSpec, Vocab};
use std::time::Instant;

fn main() {
    let vocab = Vocab::standard();
    let datasets: Vec<_> = TaskKind::all_canonical()
        .iter()
        .map(|&k| generate_dataset(&TaskSpec::canonical(k), &vocab).unwrap())
        .collect();
    let mut cfg = ModelConfig::desk_default(vocab.len());
    cfg.seed = 1;
    let mut model = TransformerModel::init(cfg).unwrap();
    let steps: usize = std::env::args().nth(1).map(|s| s.parse().unwrap()).unwrap_or(20);
    let batch: usize = std::env::args().nth(2).map(|s| s.parse().unwrap()).unwrap_or(64);
    let evals: usize = std::env::args().nth(3).map(|s| s.parse().unwrap()).unwrap_or(steps + 1);
    let tc = TrainConfig { max_steps: steps, batch_size: batch, eval_interval: evals, seed: 1, ..Default::default() };
    let t0 = Instant::now();
    let log = train(&mut model, &datasets, &tc).unwrap();
    let dt = t0.elapsed();
    for e in &log.evals {
        eprintln!("step {:5} loss {:.4} {}", e.step, e.loss,
            e.per_task.iter().map(|(k, a)| format!("{k}={a:.3}")).collect::<Vec<_>>().join(" "));
    }
    eprintln!("{} steps batch {} in {:?} -> {:.1} ms/step (reached={})",
        log.steps_run, batch, dt, dt.as_secs_f64() * 1000.0 / log.steps_run as f64, log.reached_targets);
}
