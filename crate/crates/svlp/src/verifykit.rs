//! Oracle fixtures behind the `verify` command and the acceptance suite.
//!
//! Each routine here computes its expected values through an independent
//! route (finite differences, brute-force counting, exhaustive scans) and
//! compares the engine against it.

use std::collections::BTreeSet;
use std::path::Path;

use crate::config::ExperimentConfig;
use crate::encoders::Binding;
use crate::error::{Error, Result};
use crate::map;
use crate::metrics::{auc, eer_threshold, hter, ScoreSet, ScoredSample};
use crate::numcore::gradcheck::{finite_diff_check, FiniteDiffReport};
use crate::numcore::store::ParameterStore;
use crate::numcore::tape::Tape;
use crate::numcore::tensor::Tensor;
use crate::rng::SplitMix64;
use crate::sewc::PenaltyTerms;
use crate::synthdata::{self, DomainDataset};
use crate::trainer::{self, RunState};

/// Small config for verification models: two blocks per encoder, 64-bit run.
pub fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig::toy();
    cfg.model.c = 16;
    cfg.model.c_out = 16;
    cfg.model.depth = 2;
    cfg.model.heads = 2;
    cfg.model.patch = 16;
    cfg.model.image_side = 32;
    cfg.model.max_seq = 12;
    cfg.train.visual_prompt_len = 3;
    cfg.train.ctx_len = 3;
    cfg.train.batch_size = 4;
    cfg.train.iterations = 8;
    cfg.train.dtype = crate::config::RunDtype::F64;
    cfg.sewc.fisher_samples = 6;
    cfg.routing.k = 2;
    cfg
}

fn tiny_domains(n_train: usize, n_test: usize) -> Vec<synthdata::DomainSpec> {
    let mut specs = synthdata::preset("protocol-synth-4").expect("preset exists");
    specs.truncate(2);
    for s in &mut specs {
        s.n_train = n_train;
        s.n_test = n_test;
    }
    specs
}

/// A 64-bit toy model trained briefly on one domain, with an active selective
/// penalty, frozen at the start of its second domain. Exposes the combined
/// loss on a fixed batch for finite-difference sweeps.
pub struct TotalLossFixture {
    state: RunState<f64>,
    trainable: BTreeSet<String>,
    terms: PenaltyTerms<f64>,
    batch: DomainDataset,
}

impl TotalLossFixture {
    pub fn build() -> Result<Self> {
        let cfg = tiny_config();
        let specs = tiny_domains(12, 4);
        let (train_a, _) = synthdata::generate(&specs[0])?;
        let (mut train_b, _) = synthdata::generate(&specs[1])?;
        let mut train_a = train_a;
        train_a.domain_tag = 1;
        train_b.domain_tag = 2;

        let mut state = RunState::<f64>::new(&cfg)?;
        state.bank.register_domain(
            &mut state.store,
            cfg.model.c,
            crate::rng::derive_seed(cfg.train.seed, "prompts.1"),
            true,
        )?;
        trainer::train_domain(&mut state, &train_a, &cfg, crate::config::TrainMode::Svlp, true)?;
        trainer::finalize_domain(&mut state, &train_a, &cfg, crate::config::TrainMode::Svlp)?;
        state.bank.register_domain(
            &mut state.store,
            cfg.model.c,
            crate::rng::derive_seed(cfg.train.seed, "prompts.2"),
            true,
        )?;
        let terms = state.consolidation.penalty_terms(&state.store, false)?;
        if terms.is_empty() {
            return Err(Error::Numerical(
                "fixture penalty has no terms; fisher estimation degenerated".to_string(),
            ));
        }
        let mut trainable: BTreeSet<String> = state
            .store
            .entry_layout()
            .filter(|(_, _, _, pen)| *pen)
            .map(|(n, _, _, _)| n.to_string())
            .collect();
        trainable.extend(state.bank.trainable_names(2));
        Ok(TotalLossFixture {
            state,
            trainable,
            terms,
            batch: train_b,
        })
    }

    /// Combined prompting + consolidation loss of the fixed batch at the
    /// given parameter values.
    pub fn loss_at(&self, store: &ParameterStore<f64>) -> Result<f64> {
        let mut tape = Tape::<f64>::new();
        let mut binding = Binding::new(store, self.trainable.clone());
        let text = map::text_features(
            &mut tape,
            &mut binding,
            &self.state.encoder,
            &self.state.bank,
            2,
        )?;
        let mut acc = None;
        let batch_n = 4.min(self.batch.n);
        for i in 0..batch_n {
            let (pixels, label) = self.batch.sample(i);
            let f_img = map::image_feature(
                &mut tape,
                &mut binding,
                &self.state.encoder,
                &self.state.bank,
                2,
                pixels,
            )?;
            let agg = map::logits_from_features(&mut tape, &mut binding, &self.state.bank, 2, f_img, &text)?;
            let loss = map::map_loss(&mut tape, agg, label)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, loss)?,
                None => loss,
            });
        }
        let map_id = tape.scale(acc.expect("batch"), 1.0 / batch_n as f64)?;
        let total = match crate::sewc::sewc_penalty(&mut tape, &mut binding, &self.terms)? {
            Some(pen) => tape.add(map_id, pen)?,
            None => map_id,
        };
        tape.value(total).scalar_value()
    }

    fn analytic_grads(&self, store: &ParameterStore<f64>) -> Result<Vec<f64>> {
        let mut tape = Tape::<f64>::new();
        let mut binding = Binding::new(store, self.trainable.clone());
        let text = map::text_features(
            &mut tape,
            &mut binding,
            &self.state.encoder,
            &self.state.bank,
            2,
        )?;
        let mut acc = None;
        let batch_n = 4.min(self.batch.n);
        for i in 0..batch_n {
            let (pixels, label) = self.batch.sample(i);
            let f_img = map::image_feature(
                &mut tape,
                &mut binding,
                &self.state.encoder,
                &self.state.bank,
                2,
                pixels,
            )?;
            let agg = map::logits_from_features(&mut tape, &mut binding, &self.state.bank, 2, f_img, &text)?;
            let loss = map::map_loss(&mut tape, agg, label)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, loss)?,
                None => loss,
            });
        }
        let map_id = tape.scale(acc.expect("batch"), 1.0 / batch_n as f64)?;
        let total = match crate::sewc::sewc_penalty(&mut tape, &mut binding, &self.terms)? {
            Some(pen) => tape.add(map_id, pen)?,
            None => map_id,
        };
        tape.backward(total, store.total_len())
    }

    /// Sweep at least `min_coords` coordinates, stratified across trainable
    /// entries, preferring coordinates whose analytic gradient is large
    /// enough that finite-difference noise cannot dominate the comparison.
    /// Skipped near-zero coordinates are still guarded: their central
    /// difference must also be near zero.
    pub fn finite_diff(&self, min_coords: usize, eps: f64) -> Result<FiniteDiffReport> {
        let mut store = self.state.store.clone();
        let analytic = self.analytic_grads(&store)?;

        const FLOOR: f64 = 1e-4;
        let mut per_entry: Vec<Vec<usize>> = Vec::new();
        let layout: Vec<(String, usize, usize)> = store
            .entry_layout()
            .filter(|(name, _, _, _)| self.trainable.contains(*name))
            .map(|(n, o, l, _)| (n.to_string(), o, l))
            .collect();
        for (_, offset, len) in &layout {
            let mut idx: Vec<usize> = (*offset..offset + len)
                .filter(|i| analytic[*i].abs() >= FLOOR)
                .collect();
            idx.sort_by(|a, b| {
                analytic[*b]
                    .abs()
                    .partial_cmp(&analytic[*a].abs())
                    .expect("finite grads")
            });
            per_entry.push(idx);
        }
        let mut indices = Vec::new();
        let mut round = 0;
        while indices.len() < min_coords.max(200) {
            let mut advanced = false;
            for entry in &per_entry {
                if let Some(&i) = entry.get(round) {
                    indices.push(i);
                    advanced = true;
                }
            }
            if !advanced {
                break;
            }
            round += 1;
        }
        if indices.len() < min_coords {
            return Err(Error::Numerical(format!(
                "only {} coordinates exceed the gradient floor, need {min_coords}",
                indices.len()
            )));
        }

        // guard a handful of near-zero analytic coordinates: a silent
        // gradient bug would show up as a large central difference here
        let mut guarded = 0;
        for (_, offset, len) in &layout {
            if guarded >= 8 {
                break;
            }
            if let Some(i) = (*offset..offset + len).find(|i| analytic[*i].abs() < 1e-12) {
                let saved = store.get_flat(i)?;
                store.set_flat(i, saved + eps)?;
                let plus = self.loss_at(&store)?;
                store.set_flat(i, saved - eps)?;
                let minus = self.loss_at(&store)?;
                store.set_flat(i, saved)?;
                let fd = (plus - minus) / (2.0 * eps);
                if fd.abs() > 1e-6 {
                    return Err(Error::Numerical(format!(
                        "coordinate {i} has zero analytic gradient but finite difference {fd}"
                    )));
                }
                guarded += 1;
            }
        }

        finite_diff_check(&mut store, &indices, eps, &analytic, |s| self.loss_at(s))
    }
}

/// Brute-force Fisher oracle: a 10-parameter linear classifier on 5 samples,
/// each per-sample gradient re-derived by central finite differences and
/// squared by hand. Returns the largest absolute deviation.
pub fn fisher_oracle_error() -> Result<f64> {
    let mut rng = SplitMix64::new(914);
    let dim = 5;
    let weights: Vec<f64> = (0..2 * dim).map(|_| rng.normal() * 0.5).collect();
    let samples: Vec<(Vec<f64>, usize)> = (0..5)
        .map(|_| {
            (
                (0..dim).map(|_| rng.normal()).collect(),
                (rng.next_u64() % 2) as usize,
            )
        })
        .collect();

    let mut store = ParameterStore::<f64>::new();
    store.register("w", Tensor::new(vec![dim, 2], weights.clone())?, true)?;

    let loss_of = |params: &[f64], sample: &(Vec<f64>, usize)| -> f64 {
        // logits = x @ W, stable cross entropy
        let mut logits = [0.0f64; 2];
        for (c, logit) in logits.iter_mut().enumerate() {
            for (d, x) in sample.0.iter().enumerate() {
                *logit += x * params[d * 2 + c];
            }
        }
        let mx = logits[0].max(logits[1]);
        let lse = mx + ((logits[0] - mx).exp() + (logits[1] - mx).exp()).ln();
        lse - logits[sample.1]
    };

    // engine path: tape gradient per sample
    let tags = vec![1usize; samples.len()];
    let snapshot = crate::sewc::estimate_fisher(&store, &[0, 1, 2, 3, 4, 5, 6, 7, 8, 9], 1, &tags, 5, |i| {
        let mut tape = Tape::<f64>::new();
        let w = tape.param(&store, "w")?;
        let x = tape.constant(Tensor::new(vec![1, dim], samples[i].0.clone())?);
        let logits = tape.matmul(x, w)?;
        let loss = tape.cross_entropy(logits, samples[i].1)?;
        tape.backward(loss, store.total_len())
    })?;

    // oracle path: finite differences, squared, averaged
    let eps = 1e-5;
    let mut oracle = vec![0.0f64; 2 * dim];
    for sample in &samples {
        for (p, slot) in oracle.iter_mut().enumerate() {
            let mut plus = weights.clone();
            plus[p] += eps;
            let mut minus = weights.clone();
            minus[p] -= eps;
            let g = (loss_of(&plus, sample) - loss_of(&minus, sample)) / (2.0 * eps);
            *slot += g * g;
        }
    }
    for slot in oracle.iter_mut() {
        *slot /= samples.len() as f64;
    }

    let mut worst = 0.0f64;
    for (got, want) in snapshot.fisher.iter().zip(&oracle) {
        worst = worst.max((got - want).abs());
    }
    Ok(worst)
}

/// Exhaustive metric oracles over 100 random small score sets. Returns the
/// largest deviation seen (exact agreement expected).
pub fn metric_oracle_error() -> Result<f64> {
    let mut rng = SplitMix64::new(7119);
    let mut worst = 0.0f64;
    let mut checked = 0;
    while checked < 100 {
        let n = 6 + (rng.next_u64() % 20) as usize;
        let mut scores = ScoreSet::default();
        for _ in 0..n {
            scores.push(ScoredSample {
                score: (rng.next_f64() * 6.0).floor() / 6.0,
                label: (rng.next_u64() % 2) as usize,
                domain: 1,
                routed: Some(1),
            })?;
        }
        let n_real = scores.samples.iter().filter(|s| s.label == 1).count();
        if n_real == 0 || n_real == scores.samples.len() {
            continue;
        }
        checked += 1;

        // brute-force hter at several thresholds
        for thr in [0.0, 0.3, 0.5, 0.9] {
            let mut fa = 0.0;
            let mut fr = 0.0;
            let (mut ns, mut nr) = (0.0, 0.0);
            for s in &scores.samples {
                if s.label == 0 {
                    ns += 1.0;
                    if s.score >= thr {
                        fa += 1.0;
                    }
                } else {
                    nr += 1.0;
                    if s.score < thr {
                        fr += 1.0;
                    }
                }
            }
            worst = worst.max((hter(&scores, thr)? - 0.5 * (fa / ns + fr / nr)).abs());
        }

        // exhaustive threshold scan for the equal-error point
        let got_thr = eer_threshold(&scores)?;
        let mut vals: Vec<f64> = scores.samples.iter().map(|s| s.score).collect();
        vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
        vals.dedup();
        let mut cands = vec![f64::NEG_INFINITY, f64::INFINITY];
        for w in vals.windows(2) {
            cands.push(0.5 * (w[0] + w[1]));
        }
        cands.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let gap_at = |thr: f64| -> Result<f64> {
            let mut fa = 0.0f64;
            let mut fr = 0.0f64;
            let (mut ns, mut nr) = (0.0f64, 0.0f64);
            for s in &scores.samples {
                if s.label == 0 {
                    ns += 1.0;
                    if s.score >= thr {
                        fa += 1.0;
                    }
                } else {
                    nr += 1.0;
                    if s.score < thr {
                        fr += 1.0;
                    }
                }
            }
            Ok((fa / ns - fr / nr).abs())
        };
        let mut best_gap = f64::INFINITY;
        let mut best_thr = f64::NEG_INFINITY;
        for &thr in &cands {
            let g = gap_at(thr)?;
            if g < best_gap {
                best_gap = g;
                best_thr = thr;
            }
        }
        if got_thr != best_thr {
            worst = worst.max((gap_at(got_thr)? - best_gap).abs().max(1e-9));
        }

        // pairwise auc
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for a in scores.samples.iter().filter(|x| x.label == 1) {
            for b in scores.samples.iter().filter(|x| x.label == 0) {
                pairs += 1.0;
                wins += if a.score > b.score {
                    1.0
                } else if a.score == b.score {
                    0.5
                } else {
                    0.0
                };
            }
        }
        worst = worst.max((auc(&scores)? - wins / pairs).abs());
    }
    Ok(worst)
}

/// Convenience for tests: generate a miniature two-domain dataset directory.
pub fn write_tiny_dataset(dir: &Path, n_train: usize, n_test: usize) -> Result<()> {
    synthdata::write_dataset_dir(&tiny_domains(n_train, n_test), dir)
}
