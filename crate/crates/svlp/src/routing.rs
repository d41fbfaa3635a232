//! Inference-time domain selection: per-domain k-means prototype banks in the
//! shared feature space and nearest-prototype routing that activates the
//! selected domain's prompts and aggregation weights.
//!
//! The embedding convention for both prototype building and routing is the
//! image encoder WITHOUT any visual prompt, L2-normalized. Routing has to run
//! before a domain (and hence a prompt) is known, so the prompt-free
//! embedding is the only self-consistent choice. Prototypes are built once,
//! at the end of their domain's training, and never recomputed from old data.

use crate::encoders::{Binding, DualEncoder};
use crate::error::{Error, Result};
use crate::map::{self, PromptBank};
use crate::numcore::store::ParameterStore;
use crate::numcore::tape::Tape;
use crate::numcore::tensor::{Real, Tensor};
use crate::rng::SplitMix64;

/// k-means centroids for one seen domain, frozen after construction.
#[derive(Debug, Clone)]
pub struct ProtoBank<T: Real> {
    /// 1-based domain id matching prompt entry names.
    pub domain: usize,
    /// [k, c_out] centroid rows.
    pub centroids: Tensor<T>,
}

const KMEANS_MAX_ITER: usize = 100;
const KMEANS_TOL: f64 = 1e-6;

fn sq_dist<T: Real>(a: &[T], b: &[T]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x.to_f64() - y.to_f64();
        s += d * d;
    }
    s
}

/// Lloyd's algorithm with k-means++ seeding. Deterministic given the feature
/// order and seed; stops after a fixed iteration cap or once every centroid
/// moves less than the tolerance. An empty cluster is reseeded to the point
/// currently farthest from its assigned centroid.
pub fn build_prototypes<T: Real>(
    features: &[Vec<T>],
    k: usize,
    seed: u64,
) -> Result<Vec<Vec<T>>> {
    if k == 0 {
        return Err(Error::Empty("prototype count"));
    }
    if features.is_empty() {
        return Err(Error::Empty("prototype features"));
    }
    let dim = features[0].len();
    let mut distinct: Vec<&Vec<T>> = Vec::new();
    for f in features {
        if f.len() != dim {
            return Err(Error::Shape {
                op: "build_prototypes",
                detail: format!("feature width {} vs {dim}", f.len()),
            });
        }
        if !distinct.iter().any(|d| d.as_slice() == f.as_slice()) {
            distinct.push(f);
        }
        if distinct.len() >= k {
            break;
        }
    }
    if distinct.len() < k {
        return Err(Error::Dataset(format!(
            "k-means needs at least {k} distinct points, found {}",
            distinct.len()
        )));
    }

    let mut rng = SplitMix64::new(seed);
    // k-means++ seeding
    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(k);
    let first = rng.next_below(features.len() as u64) as usize;
    centroids.push(features[first].iter().map(|v| v.to_f64()).collect());
    let mut d2: Vec<f64> = features
        .iter()
        .map(|f| sq_dist_f64(f, &centroids[0]))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let chosen = if total <= 0.0 {
            // all remaining mass at existing centroids: pick the first point
            // not already chosen
            (0..features.len())
                .find(|i| d2[*i] > 0.0 || !centroids.iter().any(|c| sq_dist_f64(&features[*i], c) == 0.0))
                .unwrap_or(0)
        } else {
            let mut target = rng.next_f64() * total;
            let mut pick = features.len() - 1;
            for (i, w) in d2.iter().enumerate() {
                if target < *w {
                    pick = i;
                    break;
                }
                target -= *w;
            }
            pick
        };
        centroids.push(features[chosen].iter().map(|v| v.to_f64()).collect());
        let last = centroids.len() - 1;
        for (i, f) in features.iter().enumerate() {
            let d = sq_dist_f64(f, &centroids[last]);
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }

    // Lloyd iterations
    let mut assign = vec![0usize; features.len()];
    for _ in 0..KMEANS_MAX_ITER {
        for (i, f) in features.iter().enumerate() {
            let mut best = 0usize;
            let mut best_d = f64::INFINITY;
            for (c, cent) in centroids.iter().enumerate() {
                let d = sq_dist_f64(f, cent);
                if d < best_d {
                    best_d = d;
                    best = c;
                }
            }
            assign[i] = best;
        }
        let mut sums = vec![vec![0.0f64; dim]; k];
        let mut counts = vec![0usize; k];
        for (f, &a) in features.iter().zip(&assign) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(f) {
                *s += v.to_f64();
            }
        }
        // reseed empties to the point farthest from its assigned centroid
        for c in 0..k {
            if counts[c] == 0 {
                let mut far = 0usize;
                let mut far_d = -1.0;
                for (i, f) in features.iter().enumerate() {
                    let d = sq_dist_f64(f, &centroids[assign[i]]);
                    if d > far_d {
                        far_d = d;
                        far = i;
                    }
                }
                sums[c] = features[far].iter().map(|v| v.to_f64()).collect();
                counts[c] = 1;
                assign[far] = c;
            }
        }
        let mut movement = 0.0f64;
        for c in 0..k {
            let inv = 1.0 / counts[c] as f64;
            let next: Vec<f64> = sums[c].iter().map(|s| s * inv).collect();
            movement = movement.max(sq_dist_f64_pair(&centroids[c], &next).sqrt());
            centroids[c] = next;
        }
        if movement < KMEANS_TOL {
            break;
        }
    }

    Ok(centroids
        .into_iter()
        .map(|c| c.into_iter().map(T::from_f64).collect())
        .collect())
}

fn sq_dist_f64<T: Real>(a: &[T], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x.to_f64() - y;
        s += d * d;
    }
    s
}

fn sq_dist_f64_pair(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

/// Nearest-prototype routing over every seen domain: the winning domain owns
/// the centroid with the smallest squared Euclidean distance. Ties break to
/// the lowest domain id, then the lowest centroid index.
pub fn route<T: Real>(f_test: &[T], banks: &[ProtoBank<T>]) -> Result<usize> {
    if banks.is_empty() {
        return Err(Error::Empty("prototype banks"));
    }
    let mut best_domain = banks[0].domain;
    let mut best_d = f64::INFINITY;
    for bank in banks {
        let c_out = bank.centroids.cols();
        for row in 0..bank.centroids.rows() {
            let cent = &bank.centroids.data()[row * c_out..(row + 1) * c_out];
            let d = sq_dist(f_test, cent);
            if d < best_d {
                best_d = d;
                best_domain = bank.domain;
            }
        }
    }
    Ok(best_domain)
}

/// Prompt-free, L2-normalized image embedding: the convention shared by
/// prototype building and routing.
pub fn routing_embedding<T: Real>(
    enc: &DualEncoder,
    store: &ParameterStore<T>,
    pixels: &[f32],
) -> Result<Vec<T>> {
    let mut tape = Tape::new();
    let mut binding = Binding::frozen(store);
    let f = enc.encode_image(&mut tape, &mut binding, pixels, None)?;
    let n = tape.l2_normalize(f)?;
    Ok(tape.value(n).data().to_vec())
}

/// Full inference for one image: route to a seen domain, then aggregate that
/// domain's logit families. Returns the routed domain and per-class
/// probabilities (index 0 = spoof, 1 = real).
pub fn infer<T: Real>(
    pixels: &[f32],
    store: &ParameterStore<T>,
    enc: &DualEncoder,
    bank: &PromptBank,
    protos: &[ProtoBank<T>],
) -> Result<(usize, [f64; 2])> {
    let emb = routing_embedding(enc, store, pixels)?;
    let routed = route(&emb, protos)?;
    let probs = infer_with_domain(pixels, store, enc, bank, routed)?;
    Ok((routed, probs))
}

/// Inference with the domain forced (oracle routing and single-set modes).
pub fn infer_with_domain<T: Real>(
    pixels: &[f32],
    store: &ParameterStore<T>,
    enc: &DualEncoder,
    bank: &PromptBank,
    domain: usize,
) -> Result<[f64; 2]> {
    let mut tape = Tape::new();
    let mut binding = Binding::frozen(store);
    let text = map::text_features(&mut tape, &mut binding, enc, bank, domain)?;
    let f_img = map::image_feature(&mut tape, &mut binding, enc, bank, domain, pixels)?;
    let agg = map::logits_from_features(&mut tape, &mut binding, bank, domain, f_img, &text)?;
    let probs = tape.softmax(agg)?;
    let data = tape.value(probs).data();
    Ok([data[0].to_f64(), data[1].to_f64()])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn k_one_centroid_is_the_mean() {
        let feats: Vec<Vec<f64>> = vec![vec![1.0, 2.0], vec![3.0, 6.0], vec![5.0, 4.0]];
        let cents = build_prototypes(&feats, 1, 9).unwrap();
        assert_eq!(cents.len(), 1);
        assert!((cents[0][0] - 3.0).abs() < 1e-9);
        assert!((cents[0][1] - 4.0).abs() < 1e-9);
    }

    #[test]
    fn k_equals_n_recovers_the_points() {
        let feats: Vec<Vec<f64>> = vec![vec![0.0, 0.0], vec![10.0, 0.0], vec![0.0, 10.0]];
        let mut cents = build_prototypes(&feats, 3, 4).unwrap();
        cents.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut want = feats.clone();
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        for (c, w) in cents.iter().zip(&want) {
            assert!(sq_dist_f64_pair(c, w) < 1e-18, "{c:?} vs {w:?}");
        }
    }

    #[test]
    fn fewer_distinct_points_than_k_is_an_error() {
        let feats: Vec<Vec<f64>> = vec![vec![1.0], vec![1.0], vec![1.0]];
        assert!(build_prototypes(&feats, 2, 0).is_err());
    }

    #[test]
    fn well_separated_blobs_are_recovered() {
        let mut rng = SplitMix64::new(123);
        let sigma = 0.1;
        let n_per = 200;
        let mut feats = Vec::new();
        for center in [[0.0, 0.0], [10.0, 10.0]] {
            for _ in 0..n_per {
                feats.push(vec![
                    center[0] + sigma * rng.normal(),
                    center[1] + sigma * rng.normal(),
                ]);
            }
        }
        let mut cents = build_prototypes(&feats, 2, 7).unwrap();
        cents.sort_by(|a, b| a[0].partial_cmp(&b[0]).unwrap());
        let tol = 3.0 * sigma / (n_per as f64).sqrt();
        // empirical blob means
        for (cent, lo) in cents.iter().zip([0usize, n_per]) {
            let blob = &feats[lo..lo + n_per];
            let mean: Vec<f64> = (0..2)
                .map(|d| blob.iter().map(|f| f[d]).sum::<f64>() / n_per as f64)
                .collect();
            assert!(
                sq_dist_f64_pair(cent, &mean).sqrt() < tol.max(1e-3) * 3.0,
                "centroid {cent:?} vs blob mean {mean:?}"
            );
        }
    }

    #[test]
    fn kmeans_is_deterministic_given_seed_and_order() {
        let mut rng = SplitMix64::new(55);
        let feats: Vec<Vec<f64>> = (0..50)
            .map(|_| (0..4).map(|_| rng.normal()).collect())
            .collect();
        let a = build_prototypes(&feats, 5, 13).unwrap();
        let b = build_prototypes(&feats, 5, 13).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn routing_picks_the_owning_domain_and_breaks_ties_low() {
        let b1 = ProtoBank {
            domain: 1,
            centroids: Tensor::new(vec![2, 2], vec![0.0, 0.0, 5.0, 5.0]).unwrap(),
        };
        let b2 = ProtoBank {
            domain: 2,
            centroids: Tensor::new(vec![1, 2], vec![10.0, 0.0]).unwrap(),
        };
        let banks = vec![b1, b2];
        assert_eq!(route(&[9.4f64, 0.1], &banks).unwrap(), 2);
        assert_eq!(route(&[5.0f64, 5.0], &banks).unwrap(), 1, "exact centroid");
        // equidistant between domain 1 (5,5) and domain 2 (10,0): (7.5, 2.5)
        assert_eq!(route(&[7.5f64, 2.5], &banks).unwrap(), 1, "tie -> low id");
        assert!(route::<f64>(&[0.0, 0.0], &[]).is_err());
        // determinism
        assert_eq!(
            route(&[1.0f64, 2.0], &banks).unwrap(),
            route(&[1.0f64, 2.0], &banks).unwrap()
        );
    }

    #[test]
    fn normalized_euclidean_argmin_equals_cosine_argmax() {
        let mut rng = SplitMix64::new(83);
        for _ in 0..30 {
            let norm = |v: Vec<f64>| {
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.into_iter().map(|x| x / n).collect::<Vec<f64>>()
            };
            let q = norm((0..6).map(|_| rng.normal()).collect());
            let cands: Vec<Vec<f64>> = (0..5)
                .map(|_| norm((0..6).map(|_| rng.normal()).collect()))
                .collect();
            let by_dist = cands
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    sq_dist_f64_pair(&q, a)
                        .partial_cmp(&sq_dist_f64_pair(&q, b))
                        .unwrap()
                })
                .unwrap()
                .0;
            let by_cos = cands
                .iter()
                .enumerate()
                .max_by(|(_, a), (_, b)| {
                    let ca: f64 = q.iter().zip(*a).map(|(x, y)| x * y).sum();
                    let cb: f64 = q.iter().zip(*b).map(|(x, y)| x * y).sum();
                    ca.partial_cmp(&cb).unwrap()
                })
                .unwrap()
                .0;
            assert_eq!(by_dist, by_cos);
        }
    }
}
