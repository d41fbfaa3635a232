//! Selective elastic weight consolidation: diagonal Fisher estimation at each
//! domain's optimum, per-domain top-p index selection by quantile, the
//! cumulative union of important indices, and the multi-center selective
//! quadratic penalty. A dense (all-coordinate) penalty is kept as an
//! independent reference for differential tests.
//!
//! Snapshots are rehearsal-free by construction: each one is built only from
//! its own domain's data, at that domain's optimum, and never touched again.

use crate::encoders::Binding;
use crate::error::{Error, Result};
use crate::numcore::store::ParameterStore;
use crate::numcore::tape::{BufId, Tape};
use crate::numcore::tensor::{Real, Tensor};

/// Immutable (Fisher, optimum) pair for one finished domain, stored dense over
/// the penalizable set S in flat-index order.
#[derive(Debug, Clone)]
pub struct FisherSnapshot<T: Real> {
    pub domain: usize,
    pub fisher: Vec<T>,
    pub optimum: Vec<T>,
}

/// Estimate the diagonal Fisher at the current store values: the mean squared
/// per-sample gradient of the task loss, restricted to S. `per_sample_grad`
/// must return the dense gradient of the single-sample loss (batch of one);
/// accumulation runs in fixed sample order.
///
/// Every sample must carry the tag of the domain being finished — reading any
/// other domain's data here would break the rehearsal-free contract.
pub fn estimate_fisher<T: Real>(
    store: &ParameterStore<T>,
    s_indices: &[usize],
    domain: usize,
    sample_tags: &[usize],
    n_samples: usize,
    mut per_sample_grad: impl FnMut(usize) -> Result<Vec<T>>,
) -> Result<FisherSnapshot<T>> {
    let n = n_samples.min(sample_tags.len());
    if n == 0 {
        return Err(Error::Empty("fisher estimation data"));
    }
    let mut acc = vec![0.0f64; s_indices.len()];
    for sample in 0..n {
        if sample_tags[sample] != domain {
            return Err(Error::RehearsalViolation {
                expected: domain,
                found: sample_tags[sample],
            });
        }
        let grads = per_sample_grad(sample)?;
        for (slot, &gi) in acc.iter_mut().zip(s_indices.iter()) {
            let g = grads[gi].to_f64();
            if !g.is_finite() {
                return Err(Error::NonFinite { op: "estimate_fisher" });
            }
            *slot += g * g;
        }
    }
    let inv = 1.0 / n as f64;
    let fisher: Vec<T> = acc.iter().map(|v| T::from_f64(v * inv)).collect();
    let mut optimum = Vec::with_capacity(s_indices.len());
    for &gi in s_indices {
        optimum.push(store.get_flat(gi)?);
    }
    Ok(FisherSnapshot {
        domain,
        fisher,
        optimum,
    })
}

/// Quantile thresholding: with q = 1 - p, the threshold is the value at rank
/// ceil(q * M) of the ascending sort (the smallest threshold with at least a
/// fraction q of the values at or below it), and the kept set is every
/// position whose value reaches it. p = 1 keeps everything.
///
/// Returns (tau, positions into `values` in ascending position order).
pub fn quantile_threshold(values: &[f64], p: f64) -> Result<(f64, Vec<usize>)> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::SelectionFraction(p));
    }
    if values.is_empty() {
        return Err(Error::Empty("quantile values"));
    }
    let m = values.len();
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite fisher values"));
    let q = 1.0 - p;
    let rank = ((q * m as f64).ceil() as usize).max(1);
    let tau = sorted[rank - 1];
    let kept: Vec<usize> = (0..m).filter(|i| values[*i] >= tau).collect();
    Ok((tau, kept))
}

/// Sorted union of per-domain index sets.
pub fn union_important(sets: &[Vec<usize>]) -> Vec<usize> {
    let mut union: Vec<usize> = sets.iter().flatten().copied().collect();
    union.sort_unstable();
    union.dedup();
    union
}

/// Write-once-per-domain consolidation state: the snapshot cache, the
/// per-domain selected sets J, and the cumulative important set I.
#[derive(Debug, Clone)]
pub struct ConsolidationState<T: Real> {
    /// Sorted global indices of the penalizable set S.
    pub s_indices: Vec<usize>,
    /// Selection fraction; 0 disables selection entirely.
    pub p: f64,
    pub snapshots: Vec<FisherSnapshot<T>>,
    /// Per-domain selected sets (global indices, sorted).
    pub per_domain_sets: Vec<Vec<usize>>,
    /// Cumulative important set I (global indices, sorted).
    pub cumulative: Vec<usize>,
}

impl<T: Real> ConsolidationState<T> {
    pub fn new(s_indices: Vec<usize>, p: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::SelectionFraction(p));
        }
        Ok(ConsolidationState {
            s_indices,
            p,
            snapshots: Vec::new(),
            per_domain_sets: Vec::new(),
            cumulative: Vec::new(),
        })
    }

    /// Cache a finished domain's snapshot, select its top-p set, and grow the
    /// cumulative union.
    pub fn add_snapshot(&mut self, snapshot: FisherSnapshot<T>) -> Result<()> {
        if snapshot.fisher.len() != self.s_indices.len() {
            return Err(Error::Shape {
                op: "add_snapshot",
                detail: format!(
                    "snapshot covers {} coordinates, S has {}",
                    snapshot.fisher.len(),
                    self.s_indices.len()
                ),
            });
        }
        let selected = if self.p == 0.0 {
            Vec::new()
        } else {
            let values: Vec<f64> = snapshot.fisher.iter().map(|v| v.to_f64()).collect();
            let (_, positions) = quantile_threshold(&values, self.p)?;
            positions.into_iter().map(|pos| self.s_indices[pos]).collect()
        };
        self.snapshots.push(snapshot);
        self.per_domain_sets.push(selected);
        self.cumulative = union_important(&self.per_domain_sets);
        Ok(())
    }

    /// Per-entry constant factors for the tape penalty during the next
    /// domain: for each snapshot j, the Fisher values masked to the important
    /// set, plus that snapshot's optimum, both cut to the entry's coordinate
    /// range. Entries whose mask is all zero are dropped.
    pub fn penalty_terms(
        &self,
        store: &ParameterStore<T>,
        sum_selected_only: bool,
    ) -> Result<PenaltyTerms<T>> {
        let mut entries = Vec::new();
        if self.cumulative.is_empty() || self.snapshots.is_empty() {
            return Ok(PenaltyTerms { entries });
        }
        // S is the concatenation of penalizable entries' ranges in offset
        // order, so each entry owns a contiguous run of S positions.
        let mut s_pos = 0usize;
        let layout: Vec<(String, usize, usize, bool)> = store
            .entry_layout()
            .map(|(n, o, l, p)| (n.to_string(), o, l, p))
            .collect();
        for (name, offset, len, penalizable) in layout {
            if !penalizable {
                continue;
            }
            let range = s_pos..s_pos + len;
            s_pos += len;
            let shape = store.get(&name)?.shape().to_vec();
            let mut per_snapshot = Vec::new();
            for (j, snap) in self.snapshots.iter().enumerate() {
                let mask_set: &[usize] = if sum_selected_only {
                    &self.per_domain_sets[j]
                } else {
                    &self.cumulative
                };
                let mut masked = vec![T::zero(); len];
                let mut any = false;
                // mask_set is sorted; walk the slice of it inside this range
                let lo = mask_set.partition_point(|&g| g < offset);
                for &g in &mask_set[lo..] {
                    if g >= offset + len {
                        break;
                    }
                    let f = snap.fisher[range.start + (g - offset)];
                    if f.to_f64() != 0.0 {
                        masked[g - offset] = f;
                        any = true;
                    }
                }
                if !any {
                    continue;
                }
                let optimum = Tensor::new(
                    shape.clone(),
                    snap.optimum[range.clone()].to_vec(),
                )?;
                let fisher = Tensor::new(shape.clone(), masked)?;
                per_snapshot.push(SnapshotTerm { fisher, optimum });
            }
            if !per_snapshot.is_empty() {
                entries.push(EntryTerm {
                    name,
                    per_snapshot,
                });
            }
        }
        Ok(PenaltyTerms { entries })
    }
}

#[derive(Debug, Clone)]
pub struct SnapshotTerm<T: Real> {
    pub fisher: Tensor<T>,
    pub optimum: Tensor<T>,
}

#[derive(Debug, Clone)]
pub struct EntryTerm<T: Real> {
    pub name: String,
    pub per_snapshot: Vec<SnapshotTerm<T>>,
}

/// Precomputed constants for the selective penalty of one training domain.
#[derive(Debug, Clone)]
pub struct PenaltyTerms<T: Real> {
    pub entries: Vec<EntryTerm<T>>,
}

impl<T: Real> PenaltyTerms<T> {
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Tape-recorded selective penalty: half the sum, over every important index
/// and every past snapshot, of the Fisher-weighted squared displacement from
/// that snapshot's optimum. The inner sum runs over all past domains for each
/// selected index. Returns `None` when there is nothing to anchor.
pub fn sewc_penalty<T: Real>(
    tape: &mut Tape<T>,
    binding: &mut Binding<T>,
    terms: &PenaltyTerms<T>,
) -> Result<Option<BufId>> {
    if terms.is_empty() {
        return Ok(None);
    }
    let mut total: Option<BufId> = None;
    for entry in &terms.entries {
        let theta = binding.buf(tape, &entry.name)?;
        for term in &entry.per_snapshot {
            let anchor = tape.constant(term.optimum.clone());
            let weight = tape.constant(term.fisher.clone());
            let diff = tape.sub(theta, anchor)?;
            let sq = tape.mul(diff, diff)?;
            let weighted = tape.mul(sq, weight)?;
            let s = tape.sum(weighted)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, s)?,
                None => s,
            });
        }
    }
    match total {
        Some(t) => Ok(Some(tape.scale(t, 0.5)?)),
        None => Ok(None),
    }
}

/// Dense multi-center penalty over all of S, computed by a plain double loop
/// with no tape involvement. Reference implementation for differential tests
/// against the selective path at p = 1.
pub fn dense_ewc_penalty<T: Real>(
    store: &ParameterStore<T>,
    s_indices: &[usize],
    snapshots: &[FisherSnapshot<T>],
) -> Result<f64> {
    let mut total = 0.0f64;
    for snap in snapshots {
        for (pos, &gi) in s_indices.iter().enumerate() {
            let diff = store.get_flat(gi)?.to_f64() - snap.optimum[pos].to_f64();
            total += snap.fisher[pos].to_f64() * diff * diff;
        }
    }
    Ok(0.5 * total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use std::collections::BTreeSet;

    fn toy_store(values: &[f64]) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        s.register(
            "w",
            Tensor::new(vec![values.len()], values.to_vec()).unwrap(),
            true,
        )
        .unwrap();
        s
    }

    #[test]
    fn quantile_matches_the_worked_example() {
        let (tau, kept) = quantile_threshold(&[1.0, 2.0, 3.0, 4.0], 0.5).unwrap();
        assert_eq!(tau, 2.0);
        assert_eq!(kept, vec![1, 2, 3]);
    }

    #[test]
    fn quantile_ties_all_pass_and_p_one_keeps_everything() {
        let (_, kept) = quantile_threshold(&[5.0; 7], 0.3).unwrap();
        assert_eq!(kept.len(), 7);
        let (_, kept) = quantile_threshold(&[3.0, 1.0, 2.0], 1.0).unwrap();
        assert_eq!(kept, vec![0, 1, 2]);
    }

    #[test]
    fn quantile_rejects_out_of_range_fractions() {
        assert!(matches!(
            quantile_threshold(&[1.0], 0.0),
            Err(Error::SelectionFraction(_))
        ));
        assert!(matches!(
            quantile_threshold(&[1.0], 1.5),
            Err(Error::SelectionFraction(_))
        ));
    }

    #[test]
    fn union_covers_the_worked_example() {
        assert_eq!(
            union_important(&[vec![1, 2, 3], vec![3, 4]]),
            vec![1, 2, 3, 4]
        );
        assert_eq!(union_important(&[vec![5, 6], vec![5, 6]]), vec![5, 6]);
        assert_eq!(union_important(&[vec![9, 1]]), vec![1, 9]);
    }

    #[test]
    fn fisher_single_sample_is_squared_gradient() {
        let store = toy_store(&[2.0, -1.0]);
        let snap = estimate_fisher(&store, &[0, 1], 1, &[1], 1, |_| Ok(vec![3.0, -0.5])).unwrap();
        assert_eq!(snap.fisher, vec![9.0, 0.25]);
        assert_eq!(snap.optimum, vec![2.0, -1.0]);
    }

    #[test]
    fn fisher_unreachable_parameter_is_zero() {
        let store = toy_store(&[2.0, -1.0]);
        let snap =
            estimate_fisher(&store, &[0, 1], 1, &[1, 1], 2, |_| Ok(vec![0.0, 1.0])).unwrap();
        assert_eq!(snap.fisher[0], 0.0);
    }

    #[test]
    fn fisher_rejects_foreign_domain_samples() {
        let store = toy_store(&[2.0]);
        let err = estimate_fisher(&store, &[0], 2, &[2, 1], 2, |_| Ok(vec![1.0])).unwrap_err();
        assert!(matches!(err, Error::RehearsalViolation { expected: 2, found: 1 }));
    }

    #[test]
    fn fisher_rejects_empty_data() {
        let store = toy_store(&[2.0]);
        assert!(matches!(
            estimate_fisher(&store, &[0], 1, &[], 0, |_| Ok(vec![1.0])),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn single_term_penalty_arithmetic() {
        // one past domain, one coordinate, F = 2, displacement 3 -> 0.5*2*9 = 9
        let mut store = toy_store(&[4.0]);
        let mut state = ConsolidationState::<f64>::new(vec![0], 1.0).unwrap();
        state
            .add_snapshot(FisherSnapshot {
                domain: 1,
                fisher: vec![2.0],
                optimum: vec![1.0],
            })
            .unwrap();
        let terms = state.penalty_terms(&store, false).unwrap();
        let mut tape = Tape::<f64>::new();
        let mut binding = Binding::new(&store, BTreeSet::new());
        let penalty = sewc_penalty(&mut tape, &mut binding, &terms)
            .unwrap()
            .unwrap();
        assert_eq!(tape.value(penalty).scalar_value().unwrap(), 9.0);

        // at the optimum the penalty vanishes
        store.set_flat(0, 1.0).unwrap();
        let mut tape = Tape::<f64>::new();
        let mut binding = Binding::new(&store, BTreeSet::new());
        let penalty = sewc_penalty(&mut tape, &mut binding, &terms)
            .unwrap()
            .unwrap();
        assert_eq!(tape.value(penalty).scalar_value().unwrap(), 0.0);
    }

    fn random_state(
        rng: &mut SplitMix64,
        n: usize,
        domains: usize,
        p: f64,
    ) -> (ParameterStore<f64>, ConsolidationState<f64>) {
        let theta: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let store = toy_store(&theta);
        let mut state = ConsolidationState::new((0..n).collect(), p).unwrap();
        for d in 1..=domains {
            let fisher: Vec<f64> = (0..n).map(|_| rng.next_f64() * 2.0).collect();
            let optimum: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            state
                .add_snapshot(FisherSnapshot {
                    domain: d,
                    fisher,
                    optimum,
                })
                .unwrap();
        }
        (store, state)
    }

    fn penalty_value(store: &ParameterStore<f64>, state: &ConsolidationState<f64>) -> f64 {
        let terms = state.penalty_terms(store, false).unwrap();
        let mut tape = Tape::<f64>::new();
        let mut binding = Binding::new(store, BTreeSet::new());
        match sewc_penalty(&mut tape, &mut binding, &terms).unwrap() {
            Some(id) => tape.value(id).scalar_value().unwrap(),
            None => 0.0,
        }
    }

    #[test]
    fn selective_at_p_one_equals_dense_reference() {
        let mut rng = SplitMix64::new(404);
        for _ in 0..5 {
            let (store, state) = random_state(&mut rng, 10, 2, 1.0);
            let selective = penalty_value(&store, &state);
            let dense =
                dense_ewc_penalty(&store, &state.s_indices, &state.snapshots).unwrap();
            assert!((selective - dense).abs() < 1e-12, "{selective} vs {dense}");
            // hand-rolled double loop as a second oracle
            let mut by_hand = 0.0;
            for snap in &state.snapshots {
                for i in 0..10 {
                    let d = store.get_flat(i).unwrap() - snap.optimum[i];
                    by_hand += snap.fisher[i] * d * d;
                }
            }
            assert!((dense - 0.5 * by_hand).abs() < 1e-12);
        }
    }

    #[test]
    fn no_snapshots_means_no_penalty() {
        let store = toy_store(&[1.0, 2.0]);
        let state = ConsolidationState::<f64>::new(vec![0, 1], 0.5).unwrap();
        assert_eq!(penalty_value(&store, &state), 0.0);
        assert_eq!(
            dense_ewc_penalty(&store, &state.s_indices, &state.snapshots).unwrap(),
            0.0
        );
    }

    #[test]
    fn penalty_is_monotone_in_p() {
        let mut rng = SplitMix64::new(31);
        let theta: Vec<f64> = (0..20).map(|_| rng.normal()).collect();
        let fishers: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..20).map(|_| rng.next_f64()).collect())
            .collect();
        let optima: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..20).map(|_| rng.normal()).collect())
            .collect();
        let mut last = 0.0;
        for p in [0.1, 0.3, 0.5, 0.7, 0.9, 1.0] {
            let store = toy_store(&theta);
            let mut state = ConsolidationState::new((0..20).collect(), p).unwrap();
            for d in 0..3 {
                state
                    .add_snapshot(FisherSnapshot {
                        domain: d + 1,
                        fisher: fishers[d].clone(),
                        optimum: optima[d].clone(),
                    })
                    .unwrap();
            }
            let v = penalty_value(&store, &state);
            assert!(
                v >= last - 1e-12,
                "penalty must not decrease as p grows: {v} < {last} at p={p}"
            );
            last = v;
        }
    }

    #[test]
    fn penalty_gradient_matches_finite_differences() {
        let mut rng = SplitMix64::new(77);
        let (store, state) = random_state(&mut rng, 8, 2, 0.5);
        let terms = state.penalty_terms(&store, false).unwrap();
        let mut tape = Tape::<f64>::new();
        let mut binding = Binding::new(&store, ["w".to_string()].into_iter().collect());
        let penalty = sewc_penalty(&mut tape, &mut binding, &terms)
            .unwrap()
            .unwrap();
        let grads = tape.backward(penalty, store.total_len()).unwrap();
        // analytic form: sum_j F_j,i (theta_i - opt_j,i) inside I, zero outside
        let important: std::collections::BTreeSet<usize> =
            state.cumulative.iter().copied().collect();
        for i in 0..8 {
            let mut want = 0.0;
            if important.contains(&i) {
                for snap in &state.snapshots {
                    want += snap.fisher[i] * (store.get_flat(i).unwrap() - snap.optimum[i]);
                }
            }
            assert!(
                (grads[i] - want).abs() < 1e-12,
                "coordinate {i}: {} vs {want}",
                grads[i]
            );
        }
        // finite differences on a copy of the store
        let eps = 1e-6;
        for i in 0..8 {
            let eval = |s: &ParameterStore<f64>| penalty_value_with(&terms, s);
            let mut plus = store.clone();
            plus.set_flat(i, plus.get_flat(i).unwrap() + eps).unwrap();
            let mut minus = store.clone();
            minus.set_flat(i, minus.get_flat(i).unwrap() - eps).unwrap();
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * eps);
            let rel = (grads[i] - fd).abs() / (grads[i].abs() + fd.abs()).max(1e-12);
            assert!(rel < 1e-6, "coordinate {i}: rel {rel}");
        }
    }

    fn penalty_value_with(terms: &PenaltyTerms<f64>, store: &ParameterStore<f64>) -> f64 {
        let mut tape = Tape::<f64>::new();
        let mut binding = Binding::new(store, BTreeSet::new());
        match sewc_penalty(&mut tape, &mut binding, terms).unwrap() {
            Some(id) => tape.value(id).scalar_value().unwrap(),
            None => 0.0,
        }
    }

    #[test]
    fn selected_only_variant_masks_by_own_domain_set() {
        // two snapshots with disjoint top coordinates (p = 0.4 keeps exactly
        // one of two); the literal rule anchors every important coordinate to
        // both optima, the variant only to the domain that selected it.
        let store = toy_store(&[1.0, 1.0]);
        let mut state = ConsolidationState::new(vec![0, 1], 0.4).unwrap();
        state
            .add_snapshot(FisherSnapshot {
                domain: 1,
                fisher: vec![4.0, 1.0],
                optimum: vec![0.0, 0.0],
            })
            .unwrap();
        state
            .add_snapshot(FisherSnapshot {
                domain: 2,
                fisher: vec![1.0, 4.0],
                optimum: vec![0.0, 0.0],
            })
            .unwrap();
        assert_eq!(state.per_domain_sets[0], vec![0]);
        assert_eq!(state.per_domain_sets[1], vec![1]);
        assert_eq!(state.cumulative, vec![0, 1]);

        let literal = state.penalty_terms(&store, false).unwrap();
        let mut tape = Tape::<f64>::new();
        let mut binding = Binding::new(&store, BTreeSet::new());
        let v = sewc_penalty(&mut tape, &mut binding, &literal).unwrap().unwrap();
        // all four terms: 0.5*(4+1+1+4) = 5
        assert_eq!(tape.value(v).scalar_value().unwrap(), 5.0);

        let variant = state.penalty_terms(&store, true).unwrap();
        let mut tape = Tape::<f64>::new();
        let mut binding = Binding::new(&store, BTreeSet::new());
        let v = sewc_penalty(&mut tape, &mut binding, &variant).unwrap().unwrap();
        // only each domain's own pick: 0.5*(4+4) = 4
        assert_eq!(tape.value(v).scalar_value().unwrap(), 4.0);
    }
}
