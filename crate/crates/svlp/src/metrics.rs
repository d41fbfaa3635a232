//! PAD and incremental-learning metrics: HTER with threshold selection, AUC,
//! routing accuracy, and the normalized forgetting gap against a
//! joint-training reference.
//!
//! Score convention: the liveness score is the probability of class "real"
//! from the aggregated softmax; a sample is accepted as real iff its score
//! reaches the threshold.

use crate::error::{Error, Result};

/// One scored evaluation sample.
#[derive(Debug, Clone, Copy)]
pub struct ScoredSample {
    /// Liveness score in [0, 1].
    pub score: f64,
    /// Ground truth: 0 = spoof, 1 = real.
    pub label: usize,
    /// 1-based source domain id.
    pub domain: usize,
    /// 1-based routed domain id; `None` when no routing ran.
    pub routed: Option<usize>,
}

/// A set of scored samples (typically one evaluated domain).
#[derive(Debug, Clone, Default)]
pub struct ScoreSet {
    pub samples: Vec<ScoredSample>,
}

impl ScoreSet {
    pub fn push(&mut self, sample: ScoredSample) -> Result<()> {
        if !(sample.score.is_finite() && (0.0..=1.0).contains(&sample.score)) {
            return Err(Error::Metrics(format!(
                "score {} outside [0, 1]",
                sample.score
            )));
        }
        if sample.label > 1 {
            return Err(Error::LabelRange(sample.label));
        }
        self.samples.push(sample);
        Ok(())
    }

    fn split_counts(&self) -> Result<(usize, usize)> {
        let n_real = self.samples.iter().filter(|s| s.label == 1).count();
        let n_spoof = self.samples.len() - n_real;
        if n_real == 0 || n_spoof == 0 {
            return Err(Error::Metrics(
                "score set needs at least one real and one spoof sample".to_string(),
            ));
        }
        Ok((n_real, n_spoof))
    }
}

fn far_frr(scores: &ScoreSet, threshold: f64) -> Result<(f64, f64)> {
    let (n_real, n_spoof) = scores.split_counts()?;
    let mut accepted_spoof = 0usize;
    let mut rejected_real = 0usize;
    for s in &scores.samples {
        let accepted = s.score >= threshold;
        if s.label == 0 && accepted {
            accepted_spoof += 1;
        }
        if s.label == 1 && !accepted {
            rejected_real += 1;
        }
    }
    Ok((
        accepted_spoof as f64 / n_spoof as f64,
        rejected_real as f64 / n_real as f64,
    ))
}

/// Half total error rate at a threshold: the mean of the accepted-spoof
/// fraction and the rejected-real fraction.
pub fn hter(scores: &ScoreSet, threshold: f64) -> Result<f64> {
    let (far, frr) = far_frr(scores, threshold)?;
    Ok(0.5 * (far + frr))
}

/// Candidate thresholds: midpoints between consecutive distinct sorted scores
/// plus infinite sentinels on both ends.
fn candidate_thresholds(scores: &ScoreSet) -> Vec<f64> {
    let mut vals: Vec<f64> = scores.samples.iter().map(|s| s.score).collect();
    vals.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    vals.dedup();
    let mut out = vec![f64::NEG_INFINITY];
    for pair in vals.windows(2) {
        out.push(0.5 * (pair[0] + pair[1]));
    }
    out.push(f64::INFINITY);
    out
}

/// Equal-error-rate operating point: among the candidate thresholds, the one
/// minimizing |FAR - FRR|; ties resolve to the smallest threshold.
pub fn eer_threshold(scores: &ScoreSet) -> Result<f64> {
    scores.split_counts()?;
    let mut best = f64::NEG_INFINITY;
    let mut best_gap = f64::INFINITY;
    for thr in candidate_thresholds(scores) {
        let (far, frr) = far_frr(scores, thr)?;
        let gap = (far - frr).abs();
        if gap < best_gap {
            best_gap = gap;
            best = thr;
        }
    }
    Ok(best)
}

/// Area under the ROC curve: the probability that a uniformly random real
/// sample outscores a uniformly random spoof sample, ties counted half.
/// Rank-sum formulation; the O(n^2) pairwise count is the test oracle.
pub fn auc(scores: &ScoreSet) -> Result<f64> {
    let (n_real, n_spoof) = scores.split_counts()?;
    let mut indexed: Vec<(f64, usize)> =
        scores.samples.iter().map(|s| (s.score, s.label)).collect();
    indexed.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite scores"));
    // average ranks over tie groups, 1-based
    let n = indexed.len();
    let mut rank_sum_real = 0.0f64;
    let mut i = 0usize;
    while i < n {
        let mut j = i;
        while j + 1 < n && indexed[j + 1].0 == indexed[i].0 {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for item in indexed.iter().take(j + 1).skip(i) {
            if item.1 == 1 {
                rank_sum_real += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_real - (n_real * (n_real + 1)) as f64 / 2.0;
    Ok(u / (n_real as f64 * n_spoof as f64))
}

/// Normalized mean error gap of an incremental model against a reference:
/// mean over tasks of (hter_q - hter_b) / (1 - hter_b). Returned as a
/// fraction; multiply by 100 for percent. Negative when the incremental
/// model beats the reference.
pub fn delta_m(hter_q: &[f64], hter_b: &[f64]) -> Result<f64> {
    if hter_q.len() != hter_b.len() {
        return Err(Error::Metrics(format!(
            "length mismatch: {} vs {} tasks",
            hter_q.len(),
            hter_b.len()
        )));
    }
    if hter_q.is_empty() {
        return Err(Error::Empty("delta_m tasks"));
    }
    let mut total = 0.0;
    for (q, b) in hter_q.iter().zip(hter_b) {
        if *b >= 1.0 {
            return Err(Error::Metrics(format!(
                "reference HTER {b} leaves the gap undefined"
            )));
        }
        total += (q - b) / (1.0 - b);
    }
    Ok(total / hter_q.len() as f64)
}

/// Fraction of samples routed to their true domain, per true domain id,
/// sorted by domain id.
pub fn routing_accuracy(scores: &ScoreSet) -> Result<Vec<(usize, f64)>> {
    let mut domains: Vec<usize> = scores.samples.iter().map(|s| s.domain).collect();
    domains.sort_unstable();
    domains.dedup();
    let mut out = Vec::with_capacity(domains.len());
    for d in domains {
        let mut total = 0usize;
        let mut correct = 0usize;
        for s in scores.samples.iter().filter(|s| s.domain == d) {
            let routed = s
                .routed
                .ok_or_else(|| Error::Metrics("sample has no routed domain id".to_string()))?;
            total += 1;
            if routed == d {
                correct += 1;
            }
        }
        out.push((d, correct as f64 / total as f64));
    }
    Ok(out)
}

/// Threshold selection rule for reports.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdRule {
    /// Equal-error-rate threshold computed on the evaluated set itself.
    Eer,
    Fixed(f64),
}

impl ThresholdRule {
    pub fn resolve(&self, scores: &ScoreSet) -> Result<f64> {
        match self {
            ThresholdRule::Eer => eer_threshold(scores),
            ThresholdRule::Fixed(v) => Ok(*v),
        }
    }
}

/// One evaluated domain's row in a report.
#[derive(Debug, Clone)]
pub struct DomainRow {
    pub domain_id: usize,
    pub domain: String,
    pub n_real: usize,
    pub n_spoof: usize,
    pub threshold: f64,
    pub hter: f64,
    pub auc: f64,
    /// `None` when the run does not route (single-set baselines).
    pub routing_acc: Option<f64>,
    /// True when the domain was never trained on.
    pub unseen: bool,
}

/// Per-domain results plus the aggregate forgetting gap when a joint-training
/// reference is supplied.
#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub rows: Vec<DomainRow>,
    pub delta_m: Option<f64>,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "domain,n_real,n_spoof,threshold,hter,auc,routing_acc";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let routing = match r.routing_acc {
                Some(v) => format!("{v:.6}"),
                None => "nan".to_string(),
            };
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.6},{}\n",
                r.domain, r.n_real, r.n_spoof, r.threshold, r.hter, r.auc, routing
            ));
        }
        if let Some(dm) = self.delta_m {
            out.push_str(&format!("delta_m_percent,,,,{:.6},,\n", dm * 100.0));
        }
        out
    }

    /// Human-readable table; percentages carry two decimals.
    pub fn render_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<14} {:>7} {:>8} {:>10} {:>9} {:>9} {:>12}\n",
            "domain", "n_real", "n_spoof", "threshold", "hter%", "auc%", "routing%"
        ));
        for r in &self.rows {
            let routing = match r.routing_acc {
                Some(v) => format!("{:.2}", v * 100.0),
                None => "-".to_string(),
            };
            let tag = if r.unseen { " (unseen)" } else { "" };
            out.push_str(&format!(
                "{:<14} {:>7} {:>8} {:>10.4} {:>9.2} {:>9.2} {:>12}{}\n",
                r.domain,
                r.n_real,
                r.n_spoof,
                r.threshold,
                r.hter * 100.0,
                r.auc * 100.0,
                routing,
                tag
            ));
        }
        if let Some(dm) = self.delta_m {
            out.push_str(&format!("delta_m: {:.2}%\n", dm * 100.0));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn set_from(pairs: &[(f64, usize)]) -> ScoreSet {
        let mut s = ScoreSet::default();
        for (score, label) in pairs {
            s.push(ScoredSample {
                score: *score,
                label: *label,
                domain: 1,
                routed: Some(1),
            })
            .unwrap();
        }
        s
    }

    fn random_set(rng: &mut SplitMix64, n: usize) -> ScoreSet {
        // quantized scores so ties actually occur
        let pairs: Vec<(f64, usize)> = (0..n)
            .map(|_| {
                (
                    (rng.next_f64() * 8.0).floor() / 8.0,
                    (rng.next_u64() % 2) as usize,
                )
            })
            .collect();
        set_from(&pairs)
    }

    fn brute_force_hter(scores: &ScoreSet, thr: f64) -> f64 {
        let mut fa = 0.0;
        let mut fr = 0.0;
        let mut ns = 0.0;
        let mut nr = 0.0;
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
        0.5 * (fa / ns + fr / nr)
    }

    #[test]
    fn perfect_separation_has_zero_hter_and_unit_auc() {
        let s = set_from(&[(0.9, 1), (0.95, 1), (0.1, 0), (0.05, 0)]);
        assert_eq!(hter(&s, 0.5).unwrap(), 0.0);
        assert_eq!(auc(&s).unwrap(), 1.0);
        let thr = eer_threshold(&s).unwrap();
        assert_eq!(hter(&s, thr).unwrap(), 0.0);
    }

    #[test]
    fn inverted_labels_have_hter_one() {
        let s = set_from(&[(0.9, 0), (0.95, 0), (0.1, 1), (0.05, 1)]);
        assert_eq!(hter(&s, 0.5).unwrap(), 1.0);
    }

    #[test]
    fn one_class_sets_are_rejected() {
        let s = set_from(&[(0.9, 1), (0.8, 1)]);
        assert!(hter(&s, 0.5).is_err());
        assert!(auc(&s).is_err());
        assert!(eer_threshold(&s).is_err());
    }

    #[test]
    fn hter_matches_brute_force_on_random_sets() {
        let mut rng = SplitMix64::new(17);
        for _ in 0..50 {
            let s = random_set(&mut rng, 20);
            if s.split_counts().is_err() {
                continue;
            }
            for thr in [0.0, 0.2, 0.5, 0.77, 1.0] {
                assert_eq!(hter(&s, thr).unwrap(), brute_force_hter(&s, thr));
            }
        }
    }

    #[test]
    fn eer_threshold_matches_exhaustive_scan() {
        let mut rng = SplitMix64::new(29);
        for _ in 0..30 {
            let s = random_set(&mut rng, 50);
            if s.split_counts().is_err() {
                continue;
            }
            let got = eer_threshold(&s).unwrap();
            // exhaustive scan over the same candidate grid
            let mut best = f64::NEG_INFINITY;
            let mut best_gap = f64::INFINITY;
            for thr in candidate_thresholds(&s) {
                let (far, frr) = far_frr(&s, thr).unwrap();
                if (far - frr).abs() < best_gap {
                    best_gap = (far - frr).abs();
                    best = thr;
                }
            }
            assert_eq!(got, best);
            // optimality of the gap at the returned threshold
            let (far, frr) = far_frr(&s, got).unwrap();
            assert!((far - frr).abs() <= best_gap + 1e-15);
        }
    }

    #[test]
    fn degenerate_all_equal_scores_return_the_low_sentinel() {
        let s = set_from(&[(0.5, 1), (0.5, 0), (0.5, 1)]);
        let thr = eer_threshold(&s).unwrap();
        assert_eq!(thr, f64::NEG_INFINITY);
        assert_eq!(hter(&s, thr).unwrap(), 0.5);
    }

    #[test]
    fn all_identical_scores_have_half_auc() {
        let s = set_from(&[(0.4, 1), (0.4, 0), (0.4, 1), (0.4, 0)]);
        assert_eq!(auc(&s).unwrap(), 0.5);
    }

    #[test]
    fn auc_matches_pairwise_oracle() {
        let mut rng = SplitMix64::new(43);
        for _ in 0..50 {
            let s = random_set(&mut rng, 30);
            if s.split_counts().is_err() {
                continue;
            }
            let got = auc(&s).unwrap();
            let mut wins = 0.0;
            let mut pairs = 0.0;
            for a in s.samples.iter().filter(|x| x.label == 1) {
                for b in s.samples.iter().filter(|x| x.label == 0) {
                    pairs += 1.0;
                    if a.score > b.score {
                        wins += 1.0;
                    } else if a.score == b.score {
                        wins += 0.5;
                    }
                }
            }
            assert!((got - wins / pairs).abs() < 1e-12);
        }
    }

    #[test]
    fn auc_is_invariant_under_monotone_transforms() {
        let mut rng = SplitMix64::new(51);
        let s = random_set(&mut rng, 40);
        let base = auc(&s).unwrap();
        // strictly increasing map into [0,1]
        let mut transformed = ScoreSet::default();
        for sample in &s.samples {
            transformed
                .push(ScoredSample {
                    score: (sample.score * 3.0 + 0.7).tanh() * 0.5 + 0.5,
                    ..*sample
                })
                .unwrap();
        }
        assert!((auc(&transformed).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn delta_m_reproduces_reference_rows() {
        // incremental method row at step 2
        let dm = delta_m(&[0.0043, 0.0233], &[0.0043, 0.0]).unwrap();
        assert!((dm * 100.0 - 1.17).abs() <= 0.005 + 1e-12, "{}", dm * 100.0);
        // plain fine-tuning row at step 2
        let dm = delta_m(&[0.0607, 0.0], &[0.0043, 0.0]).unwrap();
        assert!((dm * 100.0 - 2.83).abs() <= 0.005 + 1e-12, "{}", dm * 100.0);
        // identity
        let dm = delta_m(&[0.1, 0.2], &[0.1, 0.2]).unwrap();
        assert_eq!(dm, 0.0);
    }

    #[test]
    fn delta_m_error_paths() {
        assert!(delta_m(&[0.1], &[0.1, 0.2]).is_err());
        assert!(delta_m(&[0.1], &[1.0]).is_err());
        assert!(delta_m(&[], &[]).is_err());
    }

    #[test]
    fn delta_m_is_linear_in_each_query_entry() {
        let b = [0.1, 0.3];
        let f = |q0: f64| delta_m(&[q0, 0.2], &b).unwrap();
        let slope1 = (f(0.4) - f(0.2)) / 0.2;
        let slope2 = (f(0.8) - f(0.6)) / 0.2;
        assert!((slope1 - slope2).abs() < 1e-12);
    }

    #[test]
    fn routing_accuracy_counts_per_domain() {
        let mut s = ScoreSet::default();
        for (domain, routed) in [(1, 1), (1, 1), (1, 2), (2, 2)] {
            s.push(ScoredSample {
                score: 0.5,
                label: 1,
                domain,
                routed: Some(routed),
            })
            .unwrap();
        }
        let acc = routing_accuracy(&s).unwrap();
        assert_eq!(acc.len(), 2);
        assert!((acc[0].1 - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(acc[1].1, 1.0);

        let mut missing = ScoreSet::default();
        missing
            .push(ScoredSample {
                score: 0.5,
                label: 1,
                domain: 1,
                routed: None,
            })
            .unwrap();
        assert!(routing_accuracy(&missing).is_err());
    }

    #[test]
    fn csv_report_includes_delta_m_row() {
        let report = EvalReport {
            rows: vec![DomainRow {
                domain_id: 1,
                domain: "synth-a".into(),
                n_real: 10,
                n_spoof: 10,
                threshold: 0.5,
                hter: 0.05,
                auc: 0.99,
                routing_acc: Some(1.0),
                unseen: false,
            }],
            delta_m: Some(0.0117),
        };
        let csv = report.to_csv();
        assert!(csv.starts_with(EvalReport::CSV_HEADER));
        assert!(csv.contains("synth-a"));
        assert!(csv.contains("delta_m_percent"));
        let text = report.render_text();
        assert!(text.contains("1.17%"));
    }
}
