//! Per-domain training orchestration: the incremental loop over the combined
//! prompting + consolidation loss, optimum snapshotting, Fisher estimation,
//! index selection, prototype building, cumulative evaluation, and the
//! fine-tuning / joint-training baseline modes.
//!
//! Determinism contract: identical (config, manifest, datasets) produce
//! bitwise-identical checkpoints and reports. Everything that iterates does so
//! in a fixed order; all randomness flows through tagged seed streams.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::config::{ExperimentConfig, RunDtype, TrainMode};
use crate::encoders::{Binding, DualEncoder, LOGIT_SCALE_ENTRY};
use crate::error::{Error, Result};
use crate::map::{self, Family, PromptBank};
use crate::metrics::{
    auc, delta_m, DomainRow, EvalReport, ScoreSet, ScoredSample, ThresholdRule,
};
use crate::numcore::checkpoint::{self, CkptEntry, TensorData};
use crate::numcore::store::{ParameterStore, PENALIZABLE_MASK_ENTRY};
use crate::numcore::tape::{BufId, Tape};
use crate::numcore::tensor::{Real, Tensor};
use crate::routing::{build_prototypes, route, routing_embedding, ProtoBank};
use crate::rng::{derive_seed, SplitMix64};
use crate::sewc::{self, ConsolidationState, PenaltyTerms};
use crate::synthdata::{load_domain, read_manifest, DomainDataset};

/// Counters for the rehearsal-free audit: every sample read on the training
/// path is checked against the active domain tag.
#[derive(Debug, Clone, Default)]
pub struct AuditCounters {
    pub samples_read: usize,
    pub cross_domain_reads: usize,
}

/// All mutable run state threaded through the incremental loop.
pub struct RunState<T: Real> {
    pub store: ParameterStore<T>,
    pub encoder: DualEncoder,
    pub bank: PromptBank,
    pub consolidation: ConsolidationState<T>,
    pub prototypes: Vec<ProtoBank<T>>,
    /// Domain names in training order.
    pub completed: Vec<String>,
    pub audit: AuditCounters,
    /// Per-domain prompting-loss traces, one value per iteration.
    pub loss_traces: Vec<Vec<f64>>,
}

impl<T: Real> RunState<T> {
    pub fn new(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParameterStore::new();
        let encoder = DualEncoder::init(&mut store, cfg.model.clone(), cfg.train.seed)?;
        let bank = PromptBank::new(
            cfg.train.visual_prompt_len,
            cfg.train.ctx_len,
            cfg.family_flags(),
        );
        let s_indices = store.penalizable_indices();
        let consolidation = ConsolidationState::new(s_indices, cfg.sewc.p)?;
        Ok(RunState {
            store,
            encoder,
            bank,
            consolidation,
            prototypes: Vec::new(),
            completed: Vec::new(),
            audit: AuditCounters::default(),
            loss_traces: Vec::new(),
        })
    }

    /// Domain whose prompts a forward pass should use: per-domain in the
    /// incremental mode, the single shared set otherwise.
    fn prompt_domain(&self, mode: TrainMode, t: usize) -> usize {
        match mode {
            TrainMode::Svlp => t,
            _ => 1,
        }
    }
}

fn trainable_names<T: Real>(
    state: &RunState<T>,
    prompt_domain: usize,
) -> BTreeSet<String> {
    let mut names: BTreeSet<String> = state
        .store
        .entry_layout()
        .filter(|(_, _, _, pen)| *pen)
        .map(|(n, _, _, _)| n.to_string())
        .collect();
    names.extend(state.bank.trainable_names(prompt_domain));
    names
}

/// Decoupled-weight-decay first-order adaptive optimizer over the trainable
/// flat ranges.
struct AdamW<T: Real> {
    m: Vec<T>,
    v: Vec<T>,
    step: usize,
    lr: T,
    wd: T,
    beta1: T,
    beta2: T,
    eps: T,
}

impl<T: Real> AdamW<T> {
    fn new(total: usize, lr: f64, wd: f64) -> Self {
        AdamW {
            m: vec![T::zero(); total],
            v: vec![T::zero(); total],
            step: 0,
            lr: T::from_f64(lr),
            wd: T::from_f64(wd),
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(1e-8),
        }
    }

    fn update(
        &mut self,
        store: &mut ParameterStore<T>,
        grads: &[T],
        ranges: &[(usize, usize)],
    ) -> Result<()> {
        self.step += 1;
        let one = T::one();
        let bc1 = one - self.beta1.powi(self.step as i32);
        let bc2 = one - self.beta2.powi(self.step as i32);
        for &(offset, len) in ranges {
            for i in offset..offset + len {
                let g = grads[i];
                self.m[i] = self.beta1 * self.m[i] + (one - self.beta1) * g;
                self.v[i] = self.beta2 * self.v[i] + (one - self.beta2) * g * g;
                let m_hat = self.m[i] / bc1;
                let v_hat = self.v[i] / bc2;
                let theta = store.get_flat(i)?;
                let next = theta - self.lr * (m_hat / (v_hat.sqrt() + self.eps) + self.wd * theta);
                store.set_flat(i, next)?;
            }
        }
        Ok(())
    }
}

/// Epoch-style batch sampler: seeded permutations, consumed sequentially,
/// reshuffled when exhausted.
struct BatchSampler {
    order: Vec<usize>,
    at: usize,
    rng: SplitMix64,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        BatchSampler { order, at: 0, rng }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(size);
        for _ in 0..size.min(self.order.len()) {
            if self.at >= self.order.len() {
                self.rng.shuffle(&mut self.order);
                self.at = 0;
            }
            batch.push(self.order[self.at]);
            self.at += 1;
        }
        batch
    }
}

fn batch_loss<T: Real>(
    state: &RunState<T>,
    trainable: &BTreeSet<String>,
    dataset: &DomainDataset,
    indices: &[usize],
    prompt_domain: usize,
    terms: Option<&PenaltyTerms<T>>,
    lambda: f64,
) -> Result<(f64, Vec<T>)> {
    let mut tape = Tape::new();
    let mut binding = Binding::new(&state.store, trainable.clone());
    let text = map::text_features(&mut tape, &mut binding, &state.encoder, &state.bank, prompt_domain)?;
    let mut acc: Option<BufId> = None;
    for &i in indices {
        let (pixels, label) = dataset.sample(i);
        let f_img = map::image_feature(
            &mut tape,
            &mut binding,
            &state.encoder,
            &state.bank,
            prompt_domain,
            pixels,
        )?;
        let agg = map::logits_from_features(&mut tape, &mut binding, &state.bank, prompt_domain, f_img, &text)?;
        let loss = map::map_loss(&mut tape, agg, label)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, loss)?,
            None => loss,
        });
    }
    let map_id = tape.scale(acc.expect("non-empty batch"), 1.0 / indices.len() as f64)?;
    let map_value = tape.value(map_id).scalar_value()?.to_f64();
    let mut total = map_id;
    if let Some(terms) = terms {
        if let Some(pen) = sewc::sewc_penalty(&mut tape, &mut binding, terms)? {
            let pen = if lambda != 1.0 {
                tape.scale(pen, lambda)?
            } else {
                pen
            };
            total = tape.add(total, pen)?;
        }
    }
    let grads = tape.backward(total, state.store.total_len())?;
    Ok((map_value, grads))
}

/// One domain's optimization loop. Returns the per-iteration prompting-loss
/// trace.
pub fn train_domain<T: Real>(
    state: &mut RunState<T>,
    dataset: &DomainDataset,
    cfg: &ExperimentConfig,
    mode: TrainMode,
    audit_tags: bool,
) -> Result<Vec<f64>> {
    if dataset.n == 0 {
        return Err(Error::Empty("training data"));
    }
    let t = state.completed.len() + 1;
    let prompt_domain = state.prompt_domain(mode, t);

    let trainable = trainable_names(state, prompt_domain);
    let ranges: Vec<(usize, usize)> = state
        .store
        .entry_layout()
        .filter(|(name, _, _, _)| trainable.contains(*name))
        .map(|(_, offset, len, _)| (offset, len))
        .collect();

    let use_penalty = mode == TrainMode::Svlp
        && t >= 2
        && !cfg.train.no_sewc
        && cfg.sewc.lambda != 0.0
        && !state.consolidation.cumulative.is_empty();
    let terms = if use_penalty {
        let terms = state
            .consolidation
            .penalty_terms(&state.store, cfg.sewc.sum_selected_only)?;
        if terms.is_empty() {
            None
        } else {
            Some(terms)
        }
    } else {
        None
    };

    let mut sampler = BatchSampler::new(
        dataset.n,
        derive_seed(cfg.train.seed, &format!("shuffle.{}", dataset.name)),
    );
    let mut optimizer = AdamW::<T>::new(
        state.store.total_len(),
        cfg.train.learning_rate,
        cfg.train.weight_decay,
    );

    let mut trace = Vec::with_capacity(cfg.train.iterations);
    for _ in 0..cfg.train.iterations {
        let batch = sampler.next_batch(cfg.train.batch_size);
        if audit_tags {
            for _ in &batch {
                state.audit.samples_read += 1;
                if dataset.domain_tag != t {
                    state.audit.cross_domain_reads += 1;
                    return Err(Error::RehearsalViolation {
                        expected: t,
                        found: dataset.domain_tag,
                    });
                }
            }
        }
        let (map_value, grads) = batch_loss(
            state,
            &trainable,
            dataset,
            &batch,
            prompt_domain,
            terms.as_ref(),
            cfg.sewc.lambda,
        )?;
        if !map_value.is_finite() {
            return Err(Error::Numerical(format!(
                "prompting loss became non-finite on domain `{}`",
                dataset.name
            )));
        }
        optimizer.update(&mut state.store, &grads, &ranges)?;
        trace.push(map_value);
    }
    Ok(trace)
}

/// Post-domain bookkeeping: snapshot the optimum, estimate the Fisher, select
/// the top-p set, grow the union, and build this domain's prototypes.
/// Baseline modes only record completion.
pub fn finalize_domain<T: Real>(
    state: &mut RunState<T>,
    dataset: &DomainDataset,
    cfg: &ExperimentConfig,
    mode: TrainMode,
) -> Result<()> {
    let t = state.completed.len() + 1;
    if mode == TrainMode::Svlp {
        let prompt_domain = t;
        let trainable = trainable_names(state, prompt_domain);
        let n = cfg.sewc.fisher_samples.min(dataset.n);
        let tags = dataset.tags();
        let snapshot = sewc::estimate_fisher(
            &state.store,
            &state.consolidation.s_indices,
            t,
            &tags,
            n,
            |i| {
                let (_, grads) = batch_loss(
                    state,
                    &trainable,
                    dataset,
                    &[i],
                    prompt_domain,
                    None,
                    0.0,
                )?;
                Ok(grads)
            },
        )?;
        state.consolidation.add_snapshot(snapshot)?;

        let mut features = Vec::with_capacity(dataset.n);
        for i in 0..dataset.n {
            let (pixels, _) = dataset.sample(i);
            features.push(routing_embedding(&state.encoder, &state.store, pixels)?);
        }
        let centroids = build_prototypes(
            &features,
            cfg.routing.k,
            derive_seed(cfg.train.seed, &format!("kmeans.{t}")),
        )?;
        let c_out = cfg.model.c_out;
        let flat: Vec<T> = centroids.into_iter().flatten().collect();
        state.prototypes.push(ProtoBank {
            domain: t,
            centroids: Tensor::new(vec![cfg.routing.k, c_out], flat)?,
        });
    }
    state.completed.push(dataset.name.clone());
    Ok(())
}

// ---- evaluation -------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EvalOptions {
    pub threshold: ThresholdRule,
    /// Force routing to the true domain (only meaningful for seen domains).
    pub oracle_routing: bool,
    /// Restrict evaluation to these domain names.
    pub domains: Option<Vec<String>>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            threshold: ThresholdRule::Eer,
            oracle_routing: false,
            domains: None,
        }
    }
}

type CachedText<T> = Vec<(Family, [Tensor<T>; 2])>;

/// Text features per seen domain, evaluated once and reused as constants for
/// every test sample routed there. Values are identical to a fresh in-tape
/// evaluation, so downstream logits are bitwise unchanged.
fn cached_text_features<T: Real>(state: &RunState<T>) -> Result<BTreeMap<usize, CachedText<T>>> {
    let mut cache = BTreeMap::new();
    for t in 1..=state.bank.domains {
        let mut tape = Tape::new();
        let mut binding = Binding::frozen(&state.store);
        let text = map::text_features(&mut tape, &mut binding, &state.encoder, &state.bank, t)?;
        let mut rows: CachedText<T> = Vec::with_capacity(text.per_family.len());
        for (family, feats) in &text.per_family {
            rows.push((
                *family,
                [
                    tape.value(feats[0]).clone(),
                    tape.value(feats[1]).clone(),
                ],
            ));
        }
        cache.insert(t, rows);
    }
    Ok(cache)
}

fn probs_with_cached<T: Real>(
    state: &RunState<T>,
    cache: &BTreeMap<usize, CachedText<T>>,
    domain: usize,
    pixels: &[f32],
) -> Result<[f64; 2]> {
    let text = cache
        .get(&domain)
        .ok_or(Error::UnknownDomain(domain))?;
    let mut tape = Tape::new();
    let mut binding = Binding::frozen(&state.store);
    let f_img = map::image_feature(&mut tape, &mut binding, &state.encoder, &state.bank, domain, pixels)?;
    let scale = binding.buf(&mut tape, LOGIT_SCALE_ENTRY)?;
    let mut family_logits = Vec::with_capacity(text.len());
    for (_, feats) in text {
        let t0 = tape.constant(feats[0].clone());
        let t1 = tape.constant(feats[1].clone());
        family_logits.push(map::family_logit(&mut tape, f_img, &[t0, t1], scale)?);
    }
    let alpha = binding.buf(&mut tape, &PromptBank::alpha_name(domain))?;
    let agg = map::aggregate(&mut tape, &family_logits, alpha)?;
    let probs = tape.softmax(agg)?;
    let data = tape.value(probs).data();
    Ok([data[0].to_f64(), data[1].to_f64()])
}

/// Evaluate test splits against the current state. Returns the report and the
/// per-sample score set (the audit log the report can be recomputed from).
pub fn evaluate<T: Real>(
    state: &RunState<T>,
    datasets: &[DomainDataset],
    mode: TrainMode,
    opts: &EvalOptions,
    jt_ref: Option<&BTreeMap<String, f64>>,
) -> Result<(EvalReport, ScoreSet)> {
    let cache = cached_text_features(state)?;
    let mut scores = ScoreSet::default();
    let mut rows = Vec::new();

    for ds in datasets {
        if let Some(filter) = &opts.domains {
            if !filter.contains(&ds.name) {
                continue;
            }
        }
        let seen_id = state.completed.iter().position(|n| n == &ds.name);
        let unseen = seen_id.is_none();
        let mut local = ScoreSet::default();
        for i in 0..ds.n {
            let (pixels, label) = ds.sample(i);
            let (routed, probs) = match mode {
                TrainMode::Svlp => {
                    let routed = if opts.oracle_routing && !unseen {
                        seen_id.unwrap() + 1
                    } else {
                        let emb = routing_embedding(&state.encoder, &state.store, pixels)?;
                        route(&emb, &state.prototypes)?
                    };
                    (Some(routed), probs_with_cached(state, &cache, routed, pixels)?)
                }
                _ => (None, probs_with_cached(state, &cache, 1, pixels)?),
            };
            let sample = ScoredSample {
                score: probs[1].clamp(0.0, 1.0),
                label,
                domain: ds.domain_tag,
                routed,
            };
            local.push(sample)?;
            scores.push(sample)?;
        }
        let threshold = opts.threshold.resolve(&local)?;
        let routing_acc = match mode {
            TrainMode::Svlp => {
                let correct = local
                    .samples
                    .iter()
                    .filter(|s| s.routed == seen_id.map(|x| x + 1))
                    .count();
                if unseen {
                    Some(0.0)
                } else {
                    Some(correct as f64 / local.samples.len() as f64)
                }
            }
            _ => None,
        };
        rows.push(DomainRow {
            domain_id: ds.domain_tag,
            domain: ds.name.clone(),
            n_real: local.samples.iter().filter(|s| s.label == 1).count(),
            n_spoof: local.samples.iter().filter(|s| s.label == 0).count(),
            threshold,
            hter: crate::metrics::hter(&local, threshold)?,
            auc: auc(&local)?,
            routing_acc,
            unseen,
        });
    }

    let mut report = EvalReport {
        rows,
        delta_m: None,
    };
    if let Some(reference) = jt_ref {
        let mut q = Vec::new();
        let mut b = Vec::new();
        for row in report.rows.iter().filter(|r| !r.unseen) {
            if let Some(b_val) = reference.get(&row.domain) {
                q.push(row.hter);
                b.push(*b_val);
            }
        }
        if !q.is_empty() {
            report.delta_m = Some(delta_m(&q, &b)?);
        }
    }
    Ok((report, scores))
}

// ---- checkpoints -------------------------------------------------------------

const RESERVED_PREFIXES: [&str; 5] = ["fisher.", "theta_star.", "important_set.", "proto.", "meta."];

fn is_param_entry(name: &str) -> bool {
    name == PENALIZABLE_MASK_ENTRY
        || !RESERVED_PREFIXES.iter().any(|p| name.starts_with(p))
}

pub fn save_checkpoint<T: Real>(
    state: &RunState<T>,
    mode: TrainMode,
    config_text: &str,
    path: &Path,
) -> Result<()> {
    let mut entries = state.store.to_ckpt_entries();
    let s_len = state.consolidation.s_indices.len();
    for snap in &state.consolidation.snapshots {
        entries.push(CkptEntry {
            name: format!("fisher.{}", snap.domain),
            shape: vec![s_len],
            data: TensorData::from_real(&snap.fisher),
        });
        entries.push(CkptEntry {
            name: format!("theta_star.{}", snap.domain),
            shape: vec![s_len],
            data: TensorData::from_real(&snap.optimum),
        });
    }
    if !state.consolidation.snapshots.is_empty() {
        let t = state.consolidation.snapshots.len();
        let mut mask = vec![0u8; s_len];
        let important: BTreeSet<usize> = state.consolidation.cumulative.iter().copied().collect();
        for (pos, gi) in state.consolidation.s_indices.iter().enumerate() {
            if important.contains(gi) {
                mask[pos] = 1;
            }
        }
        entries.push(CkptEntry {
            name: format!("important_set.{t}"),
            shape: vec![s_len],
            data: TensorData::U8(mask),
        });
    }
    for bank in &state.prototypes {
        entries.push(CkptEntry::from_tensor(
            &format!("proto.{}", bank.domain),
            &bank.centroids,
        ));
    }
    entries.push(CkptEntry::text(
        "meta.tokens",
        &state.encoder.tokens.to_sidecar_text(),
    ));
    entries.push(CkptEntry::text("meta.domains", &state.completed.join("\n")));
    entries.push(CkptEntry::text("meta.mode", &mode.to_string()));
    entries.push(CkptEntry::text("meta.config", config_text));
    checkpoint::write_checkpoint(path, &entries)
}

pub struct LoadedRun<T: Real> {
    pub state: RunState<T>,
    pub cfg: ExperimentConfig,
    pub mode: TrainMode,
}

pub fn load_checkpoint<T: Real>(path: &Path) -> Result<LoadedRun<T>> {
    let entries = checkpoint::read_checkpoint(path)?;
    let find_text = |name: &str| -> Result<String> {
        entries
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing `{name}` entry")))?
            .to_text()
    };
    let cfg = ExperimentConfig::parse(&find_text("meta.config")?)?;
    let mode: TrainMode = find_text("meta.mode")?.parse()?;
    let completed: Vec<String> = find_text("meta.domains")?
        .lines()
        .map(|l| l.to_string())
        .filter(|l| !l.is_empty())
        .collect();

    let params: Vec<CkptEntry> = entries
        .iter()
        .filter(|e| is_param_entry(&e.name))
        .cloned()
        .collect();
    let store = ParameterStore::<T>::from_ckpt_entries(&params)?;
    let encoder = DualEncoder::attach(&store, cfg.model.clone())?;
    let bank = PromptBank::detect(
        &store,
        cfg.train.visual_prompt_len,
        cfg.train.ctx_len,
        cfg.family_flags(),
    );
    let mut consolidation = ConsolidationState::new(store.penalizable_indices(), cfg.sewc.p)?;
    for t in 1.. {
        let fisher = entries.iter().find(|e| e.name == format!("fisher.{t}"));
        let optimum = entries.iter().find(|e| e.name == format!("theta_star.{t}"));
        match (fisher, optimum) {
            (Some(f), Some(o)) => {
                consolidation.add_snapshot(sewc::FisherSnapshot {
                    domain: t,
                    fisher: f.to_tensor::<T>()?.data().to_vec(),
                    optimum: o.to_tensor::<T>()?.data().to_vec(),
                })?;
            }
            _ => break,
        }
    }
    let mut prototypes = Vec::new();
    for t in 1.. {
        match entries.iter().find(|e| e.name == format!("proto.{t}")) {
            Some(p) => prototypes.push(ProtoBank {
                domain: t,
                centroids: p.to_tensor::<T>()?,
            }),
            None => break,
        }
    }
    Ok(LoadedRun {
        state: RunState {
            store,
            encoder,
            bank,
            consolidation,
            prototypes,
            completed,
            audit: AuditCounters::default(),
            loss_traces: Vec::new(),
        },
        cfg,
        mode,
    })
}

// ---- the sequence driver -----------------------------------------------------

pub struct TrainOutcome<T: Real> {
    pub state: RunState<T>,
    /// One cumulative report per completed step (a single one for joint
    /// training).
    pub reports: Vec<EvalReport>,
    pub out_dir: PathBuf,
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_scores_csv(path: &Path, scores: &ScoreSet, names: &[String]) -> Result<()> {
    let mut out = String::from("domain,sample,label,score,routed\n");
    let mut counters: BTreeMap<usize, usize> = BTreeMap::new();
    for s in &scores.samples {
        let idx = counters.entry(s.domain).or_insert(0);
        let routed = match s.routed {
            Some(r) => r.to_string(),
            None => "nan".to_string(),
        };
        let name = names
            .get(s.domain.saturating_sub(1))
            .map(|n| n.as_str())
            .unwrap_or("unknown");
        out.push_str(&format!("{name},{idx},{},{:.9},{routed}\n", s.label, s.score));
        *idx += 1;
    }
    write_text(path, &out)
}

/// Reference per-domain HTERs parsed from a finished run directory (its last
/// step report).
pub fn load_reference_hters(run_dir: &Path) -> Result<BTreeMap<String, f64>> {
    let mut best: Option<(usize, PathBuf)> = None;
    let listing = fs::read_dir(run_dir).map_err(|e| Error::io(run_dir, e))?;
    for entry in listing {
        let entry = entry.map_err(|e| Error::io(run_dir, e))?;
        let name = entry.file_name().to_string_lossy().to_string();
        if let Some(step) = name
            .strip_prefix("step")
            .and_then(|r| r.strip_suffix(".report.csv"))
        {
            if let Ok(n) = step.parse::<usize>() {
                if best.as_ref().map(|(b, _)| n > *b).unwrap_or(true) {
                    best = Some((n, entry.path()));
                }
            }
        }
    }
    let (_, path) = best.ok_or_else(|| {
        Error::Config(format!(
            "no step report found in reference run `{}`",
            run_dir.display()
        ))
    })?;
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = BTreeMap::new();
    for line in text.lines().skip(1) {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() >= 5 && fields[0] != "delta_m_percent" {
            let hter: f64 = fields[4]
                .parse()
                .map_err(|_| Error::Config(format!("bad hter field in {}", path.display())))?;
            out.insert(fields[0].to_string(), hter);
        }
    }
    Ok(out)
}

/// Run the full incremental sequence (or the pooled joint run) over the
/// datasets listed in the manifest, writing per-step checkpoints, reports,
/// and score logs into `out_dir`.
pub fn train_sequence<T: Real>(
    data_root: &Path,
    cfg: &ExperimentConfig,
    out_dir: &Path,
    jt_ref: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    let mode = cfg.train.mode;
    let names = read_manifest(data_root)?;
    let mut trains = Vec::new();
    let mut tests = Vec::new();
    for (i, name) in names.iter().enumerate() {
        let (train, test) = load_domain(data_root, name, i + 1)?;
        trains.push(train);
        tests.push(test);
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let reference = match jt_ref {
        Some(dir) => Some(load_reference_hters(dir)?),
        None => None,
    };

    let config_text = cfg.render();
    let mut meta = String::new();
    meta.push_str(&format!("tool: svlp {}\n", env!("CARGO_PKG_VERSION")));
    meta.push_str(&format!("mode: {mode}\n"));
    meta.push_str(&format!("seed: {}\n", cfg.train.seed));
    meta.push_str(&format!("data: {}\n", data_root.display()));
    let ablations: Vec<&str> = [
        (cfg.train.no_da, "no-da"),
        (cfg.train.no_ds, "no-ds"),
        (cfg.train.no_mix, "no-mix"),
        (cfg.train.no_fixed, "no-fixed"),
        (cfg.train.no_visual, "no-visual"),
        (cfg.train.no_sewc, "no-sewc"),
    ]
    .iter()
    .filter(|(on, _)| *on)
    .map(|(_, tag)| *tag)
    .collect();
    meta.push_str(&format!(
        "ablations: {}\n",
        if ablations.is_empty() {
            "none".to_string()
        } else {
            ablations.join(",")
        }
    ));
    meta.push_str("manifest:\n");
    for n in &names {
        meta.push_str(&format!("  {n}\n"));
    }
    meta.push_str("config:\n");
    for line in config_text.lines() {
        meta.push_str(&format!("  {line}\n"));
    }
    write_text(&out_dir.join("run.meta"), &meta)?;

    let mut state = RunState::<T>::new(cfg)?;
    let mut reports = Vec::new();

    let abort_snapshot = |state: &RunState<T>, err: Error| -> Error {
        // best-effort diagnostic snapshot; the original error wins
        let _ = save_checkpoint(state, mode, &config_text, &out_dir.join("abort.ckpt"));
        match err {
            Error::Numerical(m) => Error::Numerical(m),
            Error::NonFinite { op } => {
                Error::Numerical(format!("non-finite value produced by {op}"))
            }
            other => other,
        }
    };

    match mode {
        TrainMode::Svlp | TrainMode::Ft => {
            for (step, train) in trains.iter().enumerate() {
                let t = step + 1;
                if mode == TrainMode::Svlp || t == 1 {
                    state.bank.register_domain(
                        &mut state.store,
                        cfg.model.c,
                        derive_seed(cfg.train.seed, &format!("prompts.{t}")),
                        cfg.train.warm_start_prompts,
                    )?;
                }
                let trace = train_domain(&mut state, train, cfg, mode, true)
                    .map_err(|e| abort_snapshot(&state, e))?;
                state.loss_traces.push(trace);
                finalize_domain(&mut state, train, cfg, mode)?;

                let (report, scores) = evaluate(
                    &state,
                    &tests[..t],
                    mode,
                    &EvalOptions::default(),
                    reference.as_ref(),
                )?;
                save_checkpoint(&state, mode, &config_text, &out_dir.join(format!("step{t}.ckpt")))?;
                write_text(
                    &out_dir.join(format!("step{t}.report.csv")),
                    &report.to_csv(),
                )?;
                write_text(
                    &out_dir.join(format!("step{t}.report.txt")),
                    &report.render_text(),
                )?;
                write_scores_csv(&out_dir.join(format!("step{t}.scores.csv")), &scores, &names)?;
                reports.push(report);
            }
        }
        TrainMode::Jt => {
            // pool in sorted-name order, then one seeded shuffle stream
            let mut order: Vec<usize> = (0..trains.len()).collect();
            order.sort_by(|a, b| names[*a].cmp(&names[*b]));
            let side = trains[0].height;
            let mut pooled = DomainDataset {
                name: "joint".to_string(),
                split: "train".to_string(),
                n: 0,
                channels: trains[0].channels,
                height: side,
                width: trains[0].width,
                pixels: Vec::new(),
                labels: Vec::new(),
                domain_tag: 1,
            };
            for &i in &order {
                pooled.n += trains[i].n;
                pooled.pixels.extend_from_slice(&trains[i].pixels);
                pooled.labels.extend_from_slice(&trains[i].labels);
            }
            state.bank.register_domain(
                &mut state.store,
                cfg.model.c,
                derive_seed(cfg.train.seed, "prompts.1"),
                cfg.train.warm_start_prompts,
            )?;
            let mut jt_cfg = cfg.clone();
            jt_cfg.train.iterations = cfg.train.iterations * trains.len();
            let trace = train_domain(&mut state, &pooled, &jt_cfg, mode, false)
                .map_err(|e| abort_snapshot(&state, e))?;
            state.loss_traces.push(trace);
            // completion in pooled (sorted-name) order
            for &i in &order {
                state.completed.push(names[i].clone());
            }
            let (report, scores) =
                evaluate(&state, &tests, mode, &EvalOptions::default(), None)?;
            save_checkpoint(&state, mode, &config_text, &out_dir.join("step1.ckpt"))?;
            write_text(&out_dir.join("step1.report.csv"), &report.to_csv())?;
            write_text(&out_dir.join("step1.report.txt"), &report.render_text())?;
            write_scores_csv(&out_dir.join("step1.scores.csv"), &scores, &names)?;
            reports.push(report);
        }
    }

    Ok(TrainOutcome {
        state,
        reports,
        out_dir: out_dir.to_path_buf(),
    })
}

/// Dtype-dispatching wrapper used by the command-line surface.
pub fn run_training(
    data_root: &Path,
    cfg: &ExperimentConfig,
    out_dir: &Path,
    jt_ref: Option<&Path>,
) -> Result<Vec<EvalReport>> {
    match cfg.train.dtype {
        RunDtype::F32 => {
            train_sequence::<f32>(data_root, cfg, out_dir, jt_ref).map(|o| o.reports)
        }
        RunDtype::F64 => {
            train_sequence::<f64>(data_root, cfg, out_dir, jt_ref).map(|o| o.reports)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{preset, write_dataset_dir};

    fn tiny_cfg() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::toy();
        cfg.model.c = 16;
        cfg.model.c_out = 16;
        cfg.model.depth = 1;
        cfg.model.heads = 2;
        cfg.model.patch = 8;
        cfg.model.image_side = 32;
        cfg.model.max_seq = 24;
        cfg.train.visual_prompt_len = 3;
        cfg.train.ctx_len = 4;
        cfg.train.iterations = 6;
        cfg.train.batch_size = 4;
        cfg.sewc.fisher_samples = 4;
        cfg.routing.k = 2;
        cfg
    }

    fn tiny_data(dir: &Path, n_domains: usize) {
        let mut specs = preset("protocol-synth-8").unwrap();
        specs.truncate(n_domains);
        for s in &mut specs {
            s.n_train = 12;
            s.n_test = 10;
        }
        write_dataset_dir(&specs, dir).unwrap();
    }

    #[test]
    fn svlp_sequence_produces_expected_artifacts() {
        let data = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        tiny_data(data.path(), 2);
        let cfg = tiny_cfg();
        let outcome = train_sequence::<f32>(data.path(), &cfg, out.path(), None).unwrap();
        assert_eq!(outcome.reports.len(), 2);
        assert_eq!(outcome.state.completed, vec!["synth-a", "synth-b"]);
        assert_eq!(outcome.state.consolidation.snapshots.len(), 2);
        assert_eq!(outcome.state.prototypes.len(), 2);
        assert_eq!(outcome.state.audit.cross_domain_reads, 0);
        for f in ["run.meta", "step1.ckpt", "step2.ckpt", "step1.report.csv", "step2.scores.csv"] {
            assert!(out.path().join(f).exists(), "{f} missing");
        }
        // cumulative evaluation: the step-2 report covers both domains
        assert_eq!(outcome.reports[1].rows.len(), 2);
        // fisher values are nonnegative with at least one strictly positive
        let snap = &outcome.state.consolidation.snapshots[0];
        assert!(snap.fisher.iter().all(|f| *f >= 0.0));
        assert!(snap.fisher.iter().any(|f| *f > 0.0));
    }

    #[test]
    fn first_domain_has_no_penalty_and_flag_matches_lambda_zero() {
        let data = tempfile::tempdir().unwrap();
        tiny_data(data.path(), 2);
        let cfg = tiny_cfg();

        let out_flag = tempfile::tempdir().unwrap();
        let mut cfg_flag = cfg.clone();
        cfg_flag.train.no_sewc = true;
        train_sequence::<f32>(data.path(), &cfg_flag, out_flag.path(), None).unwrap();

        let out_lambda = tempfile::tempdir().unwrap();
        let mut cfg_lambda = cfg.clone();
        cfg_lambda.sewc.lambda = 0.0;
        train_sequence::<f32>(data.path(), &cfg_lambda, out_lambda.path(), None).unwrap();

        // identical trajectories, bit for bit, except the echoed config text
        for step in ["step1.ckpt", "step2.ckpt"] {
            let a = checkpoint::read_checkpoint(&out_flag.path().join(step)).unwrap();
            let b = checkpoint::read_checkpoint(&out_lambda.path().join(step)).unwrap();
            for (ea, eb) in a.iter().zip(&b) {
                if ea.name == "meta.config" {
                    continue;
                }
                assert_eq!(ea, eb, "{step}: entry {} differs", ea.name);
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_restores_the_run() {
        let data = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        tiny_data(data.path(), 2);
        let cfg = tiny_cfg();
        let outcome = train_sequence::<f32>(data.path(), &cfg, out.path(), None).unwrap();
        let loaded: LoadedRun<f32> = load_checkpoint(&out.path().join("step2.ckpt")).unwrap();
        assert_eq!(loaded.state.completed, outcome.state.completed);
        assert_eq!(loaded.state.prototypes.len(), 2);
        assert_eq!(loaded.state.bank.domains, 2);
        assert_eq!(loaded.mode, TrainMode::Svlp);
        // evaluation after reload matches the in-memory evaluation bitwise
        let (_, test_b) = load_domain(data.path(), "synth-b", 2).unwrap();
        let (report_mem, _) = evaluate(
            &outcome.state,
            std::slice::from_ref(&test_b),
            TrainMode::Svlp,
            &EvalOptions::default(),
            None,
        )
        .unwrap();
        let (report_loaded, _) = evaluate(
            &loaded.state,
            std::slice::from_ref(&test_b),
            TrainMode::Svlp,
            &EvalOptions::default(),
            None,
        )
        .unwrap();
        assert_eq!(report_mem.rows[0].hter, report_loaded.rows[0].hter);
        assert_eq!(report_mem.rows[0].auc, report_loaded.rows[0].auc);
    }

    #[test]
    fn jt_mode_is_invariant_to_manifest_order() {
        let data = tempfile::tempdir().unwrap();
        tiny_data(data.path(), 2);
        let mut cfg = tiny_cfg();
        cfg.train.mode = TrainMode::Jt;

        let out_a = tempfile::tempdir().unwrap();
        train_sequence::<f32>(data.path(), &cfg, out_a.path(), None).unwrap();

        // permute the manifest
        let mpath = data.path().join("manifest.txt");
        fs::write(&mpath, "synth-b\nsynth-a\n").unwrap();
        let out_b = tempfile::tempdir().unwrap();
        train_sequence::<f32>(data.path(), &cfg, out_b.path(), None).unwrap();

        let a = fs::read(out_a.path().join("step1.ckpt")).unwrap();
        let b = fs::read(out_b.path().join("step1.ckpt")).unwrap();
        assert_eq!(a, b, "pooled training ignores manifest order");
    }

    #[test]
    fn ft_mode_trains_a_single_shared_prompt_set() {
        let data = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        tiny_data(data.path(), 2);
        let mut cfg = tiny_cfg();
        cfg.train.mode = TrainMode::Ft;
        let outcome = train_sequence::<f32>(data.path(), &cfg, out.path(), None).unwrap();
        assert_eq!(outcome.state.bank.domains, 1);
        assert!(outcome.state.prototypes.is_empty());
        assert!(outcome.state.consolidation.snapshots.is_empty());
        assert!(outcome.reports[1].rows[0].routing_acc.is_none());
    }
}
