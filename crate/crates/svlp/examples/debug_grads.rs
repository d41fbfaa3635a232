// scratch diagnostic, removed before release
use std::collections::BTreeSet;
use svlp::config::ExperimentConfig;
use svlp::encoders::Binding;
use svlp::map;
use svlp::numcore::Tape;
use svlp::synthdata;
use svlp::trainer::RunState;

fn main() {
    let cfg = ExperimentConfig::toy();
    let mut specs = synthdata::preset("protocol-synth-4").unwrap();
    specs.truncate(1);
    let (mut train, _) = synthdata::generate(&specs[0]).unwrap();
    train.domain_tag = 1;

    let mut state = RunState::<f64>::new(&cfg).unwrap();
    state
        .bank
        .register_domain(
            &mut state.store,
            cfg.model.c,
            svlp::rng::derive_seed(cfg.train.seed, "prompts.1"),
            true,
        )
        .unwrap();

    let mut trainable: BTreeSet<String> = state
        .store
        .entry_layout()
        .filter(|(_, _, _, p)| *p)
        .map(|(n, _, _, _)| n.to_string())
        .collect();
    trainable.extend(state.bank.trainable_names(1));

    let mut tape = Tape::<f64>::new();
    let mut binding = Binding::new(&state.store, trainable);
    let text = map::text_features(&mut tape, &mut binding, &state.encoder, &state.bank, 1).unwrap();
    // print raw per-family class-0/1 feature distance
    for (fam, feats) in &text.per_family {
        let a = tape.value(feats[0]).data().to_vec();
        let b = tape.value(feats[1]).data().to_vec();
        let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        let cos: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>() / (na * nb);
        println!("family {fam:?}: |f0|={na:.4} |f1|={nb:.4} cos={cos:.6}");
    }
    let mut acc = None;
    for i in 0..8 {
        let (px, label) = train.sample(i);
        let f_img =
            map::image_feature(&mut tape, &mut binding, &state.encoder, &state.bank, 1, px)
                .unwrap();
        if i < 3 {
            let v = tape.value(f_img).data().to_vec();
            let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            println!("img {i}: |f|={n:.4} first3={:?}", &v[..3]);
        }
        let agg =
            map::logits_from_features(&mut tape, &mut binding, &state.bank, 1, f_img, &text)
                .unwrap();
        if i < 3 {
            println!("  agg logits {:?}", tape.value(agg).data());
        }
        let loss = map::map_loss(&mut tape, agg, label).unwrap();
        acc = Some(match acc {
            Some(a) => tape.add(a, loss).unwrap(),
            None => loss,
        });
    }
    let total = tape.scale(acc.unwrap(), 1.0 / 8.0).unwrap();
    println!("loss {}", tape.value(total).scalar_value().unwrap());
    let grads = tape.backward(total, state.store.total_len()).unwrap();

    let mut norms: Vec<(String, f64)> = state
        .store
        .entry_layout()
        .map(|(n, o, l, _)| {
            let g: f64 = grads[o..o + l].iter().map(|v| v * v).sum::<f64>().sqrt();
            (n.to_string(), g / (l as f64).sqrt())
        })
        .collect();
    norms.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    println!("\nper-entry RMS gradient (top 25):");
    for (n, g) in norms.iter().take(25) {
        println!("  {n:<24} {g:.3e}");
    }
    println!("\nbottom 10:");
    for (n, g) in norms.iter().rev().take(10) {
        println!("  {n:<24} {g:.3e}");
    }
}
