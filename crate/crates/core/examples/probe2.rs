use lab_core::model::{train, ModelConfig, TrainConfig, TransformerModel};
use lab_core::tasks::{generate_dataset, TaskKind, TaskSpec, Vocab};
use lab_core::tensor::Tensor;
use std::sync::Arc;

fn main() {
    let vocab = Vocab::standard();
    let ds = generate_dataset(&TaskSpec::months(), &vocab).unwrap();
    for (name, head_std, lr) in [
        ("zero_head_lr3e-3", 0.0f32, 3e-3f32),
        ("rand_head_lr1e-3", 0.02, 1e-3),
        ("rand_head_lr3e-3", 0.02, 3e-3),
    ] {
        let mut cfg = ModelConfig::desk_default(vocab.len());
        cfg.seed = 2;
        let mut model = TransformerModel::init(cfg).unwrap();
        if head_std > 0.0 {
            let mut rng = lab_core::rng::rng_from_seed(99);
            model.unembed = Arc::new(Tensor::randn(&[128, vocab.len()], head_std, &mut rng));
        }
        let tc = TrainConfig {
            max_steps: 400, batch_size: 32, lr, warmup_steps: 50,
            eval_interval: 200, seed: 2,
            task_weights: vec![(TaskKind::Months, 1.0)],
            ..Default::default()
        };
        eprintln!("== {name}");
        let _ = train(&mut model, std::slice::from_ref(&ds), &tc).unwrap();
    }
}
