// scratch diagnostic, removed before release
use svlp::config::{ExperimentConfig, TrainMode};
use svlp::synthdata;
use svlp::trainer::{self, RunState};

fn main() {
    let mut cfg = ExperimentConfig::toy();
    cfg.train.iterations = std::env::args()
        .nth(1)
        .and_then(|s| s.parse().ok())
        .unwrap_or(200);
    cfg.train.learning_rate = std::env::args()
        .nth(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(1e-3);
    let dom: usize = std::env::args()
        .nth(3)
        .and_then(|s| s.parse().ok())
        .unwrap_or(0);
    let specs = synthdata::preset("protocol-synth-8").unwrap();
    let (mut train, mut test) = synthdata::generate(&specs[dom]).unwrap();
    train.domain_tag = 1;
    test.domain_tag = 1;

    let mut state = RunState::<f32>::new(&cfg).unwrap();
    state
        .bank
        .register_domain(
            &mut state.store,
            cfg.model.c,
            svlp::rng::derive_seed(cfg.train.seed, "prompts.1"),
            true,
        )
        .unwrap();
    let trace = trainer::train_domain(&mut state, &train, &cfg, TrainMode::Svlp, true).unwrap();
    for (i, v) in trace.iter().enumerate() {
        if i % 20 == 0 || i + 1 == trace.len() {
            println!("iter {i:4}  map_loss {v:.6}");
        }
    }
    println!(
        "logit_scale: {:?}",
        state.store.get("logit_scale").unwrap().data()
    );
    println!("alpha.1: {:?}", state.store.get("alpha.1").unwrap().data());
    // raw per-family cosine logits for a few samples
    for i in 0..4 {
        let (px, label) = train.sample(i);
        let probs =
            svlp::routing::infer_with_domain(px, &state.store, &state.encoder, &state.bank, 1)
                .unwrap();
        println!("sample {i} label {label} probs {probs:?}");
    }
    trainer::finalize_domain(&mut state, &train, &cfg, TrainMode::Svlp).unwrap();
    let (report, _) = trainer::evaluate(
        &state,
        std::slice::from_ref(&test),
        TrainMode::Svlp,
        &trainer::EvalOptions::default(),
        None,
    )
    .unwrap();
    println!("{}", report.render_text());
}
