//! Similarity regularizer for uncertain unannotated-region predictions: each
//! candidate must be closer (cosine) to every ground-truth feature of its
//! predicted class than to any ground-truth feature of another class, by a
//! margin.

use super::pseudo::TripletFormula;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy)]
pub struct FeatureRef<'a, T> {
    pub feature: &'a [T],
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TripletOutput<T> {
    pub loss: T,
    /// Candidates that had both a same-class and a different-class reference.
    pub scored: usize,
    pub grad_candidates: Vec<Vec<T>>,
    pub grad_references: Vec<Vec<T>>,
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

fn norm<T: Scalar>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

pub fn cosine_similarity<T: Scalar>(a: &[T], b: &[T]) -> T {
    dot(a, b) / (norm(a) * norm(b))
}

/// Adds `scale · ∂cos(a, b)/∂a` into `out`.
fn add_cosine_grad<T: Scalar>(a: &[T], b: &[T], na: T, nb: T, cos: T, scale: T, out: &mut [T]) {
    let k1 = scale / (na * nb);
    let k2 = scale * cos / (na * na);
    for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
        *o = *o + k1 * y - k2 * x;
    }
}

pub fn triplet_loss<T: Scalar>(
    candidates: &[FeatureRef<'_, T>],
    references: &[FeatureRef<'_, T>],
    margin: T,
    formula: TripletFormula,
) -> TripletOutput<T> {
    let mut grad_candidates: Vec<Vec<T>> = candidates.iter().map(|c| vec![T::zero(); c.feature.len()]).collect();
    let mut grad_references: Vec<Vec<T>> = references.iter().map(|r| vec![T::zero(); r.feature.len()]).collect();
    let ref_norms: Vec<T> = references.iter().map(|r| norm(r.feature)).collect();

    // (candidate, term, argmin same, argmax diff, min_same, max_diff)
    let mut terms = Vec::new();
    for (k, cand) in candidates.iter().enumerate() {
        let nc = norm(cand.feature);
        if !(nc > T::zero()) {
            log::warn!("triplet: skipping zero-norm candidate feature {k}");
            continue;
        }
        let mut min_same: Option<(usize, T)> = None;
        let mut max_diff: Option<(usize, T)> = None;
        for (j, r) in references.iter().enumerate() {
            if !(ref_norms[j] > T::zero()) {
                continue;
            }
            let cos = dot(cand.feature, r.feature) / (nc * ref_norms[j]);
            if r.class == cand.class {
                if min_same.is_none_or(|(_, m)| cos < m) {
                    min_same = Some((j, cos));
                }
            } else if max_diff.is_none_or(|(_, m)| cos > m) {
                max_diff = Some((j, cos));
            }
        }
        let (Some((js, min_s)), Some((jd, max_d))) = (min_same, max_diff) else {
            continue;
        };
        let raw = match formula {
            TripletFormula::Hypothesis => max_d + margin - min_s,
            TripletFormula::Reversed => min_s - (max_d + margin),
        };
        terms.push((k, raw.max(T::zero()), raw > T::zero(), js, jd, min_s, max_d, nc));
    }
    let m = terms.len();
    if m == 0 {
        return TripletOutput {
            loss: T::zero(),
            scored: 0,
            grad_candidates,
            grad_references,
        };
    }
    let inv = T::one() / T::lit(m as f64);
    let mut loss = T::zero();
    for &(k, term, active, js, jd, min_s, max_d, nc) in &terms {
        loss = loss + term;
        if !active {
            continue;
        }
        // d term / d min_same and d term / d max_diff
        let (g_min, g_max) = match formula {
            TripletFormula::Hypothesis => (-inv, inv),
            TripletFormula::Reversed => (inv, -inv),
        };
        let c = candidates[k].feature;
        for (j, cos, g) in [(js, min_s, g_min), (jd, max_d, g_max)] {
            let r = references[j].feature;
            add_cosine_grad(c, r, nc, ref_norms[j], cos, g, &mut grad_candidates[k]);
            add_cosine_grad(r, c, ref_norms[j], nc, cos, g, &mut grad_references[j]);
        }
    }
    TripletOutput {
        loss: loss * inv,
        scored: m,
        grad_candidates,
        grad_references,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Pairwise scalar-loop reference: every (same, diff) pair is scanned for
    /// the min and max.
    fn oracle(cands: &[(Vec<f64>, usize)], refs: &[(Vec<f64>, usize)], margin: f64) -> f64 {
        let cos = |a: &[f64], b: &[f64]| {
            let mut ab = 0.0;
            let mut aa = 0.0;
            let mut bb = 0.0;
            for i in 0..a.len() {
                ab += a[i] * b[i];
                aa += a[i] * a[i];
                bb += b[i] * b[i];
            }
            ab / (aa.sqrt() * bb.sqrt())
        };
        let mut total = 0.0;
        let mut m = 0;
        for (c, cc) in cands {
            let mut min_same = f64::INFINITY;
            let mut max_diff = f64::NEG_INFINITY;
            for (r, rc) in refs {
                for (r2, rc2) in refs {
                    if rc == cc && rc2 != cc {
                        min_same = min_same.min(cos(c, r));
                        max_diff = max_diff.max(cos(c, r2));
                    }
                }
            }
            if min_same.is_finite() && max_diff.is_finite() {
                total += (max_diff + margin - min_same).max(0.0);
                m += 1;
            }
        }
        if m == 0 {
            0.0
        } else {
            total / m as f64
        }
    }

    type Labeled = Vec<(Vec<f64>, usize)>;

    fn random_instance(rng: &mut ChaCha8Rng) -> (Labeled, Labeled) {
        let d = rng.random_range(2..10);
        let feats = |rng: &mut ChaCha8Rng, n: usize| -> Vec<(Vec<f64>, usize)> {
            (0..n)
                .map(|_| {
                    (
                        (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                        rng.random_range(0..3),
                    )
                })
                .collect()
        };
        let nc = rng.random_range(1..6);
        let c = feats(rng, nc);
        let nr = rng.random_range(1..8);
        let r = feats(rng, nr);
        (c, r)
    }

    fn run(c: &[(Vec<f64>, usize)], r: &[(Vec<f64>, usize)], margin: f64) -> TripletOutput<f64> {
        let cands: Vec<FeatureRef<'_, f64>> = c.iter().map(|(f, k)| FeatureRef { feature: f, class: *k }).collect();
        let refs: Vec<FeatureRef<'_, f64>> = r.iter().map(|(f, k)| FeatureRef { feature: f, class: *k }).collect();
        triplet_loss(&cands, &refs, margin, TripletFormula::Hypothesis)
    }

    #[test]
    fn matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let (c, r) = random_instance(&mut rng);
            let out = run(&c, &r, 0.05);
            assert!((out.loss - oracle(&c, &r, 0.05)).abs() < 1e-6);
        }
    }

    #[test]
    fn separated_classes_give_zero() {
        let refs = vec![
            (vec![1.0, 0.0, 0.0], 0),
            (vec![0.9, 0.1, 0.0], 0),
            (vec![0.0, 1.0, 0.0], 1),
        ];
        let cands = vec![(vec![1.0, 0.05, 0.0], 0)];
        let out = run(&cands, &refs, 0.05);
        assert_eq!(out.scored, 1);
        assert_eq!(out.loss, 0.0);
        assert!(out.grad_candidates[0].iter().all(|&g| g == 0.0));
    }

    #[test]
    fn unscorable_candidates_are_skipped() {
        let refs = vec![(vec![1.0, 0.0], 0)];
        let out = run(&[(vec![0.0, 1.0], 0)], &refs, 0.05);
        assert_eq!((out.scored, out.loss), (0, 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-6;
        let mut checked = 0;
        for _ in 0..30 {
            let (c, r) = random_instance(&mut rng);
            let out = run(&c, &r, 0.05);
            if out.loss == 0.0 {
                continue;
            }
            for (k, (f, _)) in c.iter().enumerate() {
                for i in 0..f.len() {
                    let mut plus = c.clone();
                    plus[k].0[i] += h;
                    let mut minus = c.clone();
                    minus[k].0[i] -= h;
                    let num = (run(&plus, &r, 0.05).loss - run(&minus, &r, 0.05).loss) / (2.0 * h);
                    let ana = out.grad_candidates[k][i];
                    assert!(
                        (num - ana).abs() <= 1e-4 * num.abs().max(1e-2),
                        "cand {k}[{i}]: {num} vs {ana}"
                    );
                }
            }
            for (j, (f, _)) in r.iter().enumerate() {
                for i in 0..f.len() {
                    let mut plus = r.clone();
                    plus[j].0[i] += h;
                    let mut minus = r.clone();
                    minus[j].0[i] -= h;
                    let num = (run(&c, &plus, 0.05).loss - run(&c, &minus, 0.05).loss) / (2.0 * h);
                    let ana = out.grad_references[j][i];
                    assert!(
                        (num - ana).abs() <= 1e-4 * num.abs().max(1e-2),
                        "ref {j}[{i}]: {num} vs {ana}"
                    );
                }
            }
            checked += 1;
        }
        assert!(checked > 5);
    }

    fn arb_set(lo: f64, n: usize) -> impl Strategy<Value = Vec<(Vec<f64>, usize)>> {
        prop::collection::vec((prop::collection::vec(lo..1.0, 4), 0usize..3), 1..n).prop_map(|v| {
            v.into_iter()
                .filter(|(f, _)| f.iter().any(|x| x.abs() > 1e-3))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn bounded_for_signed_features(c in arb_set(-1.0, 6), r in arb_set(-1.0, 8), margin in 0.0f64..0.5) {
            let l = run(&c, &r, margin).loss;
            prop_assert!(l >= 0.0 && l <= 2.0 + margin + 1e-12);
        }

        #[test]
        fn bounded_for_non_negative_features(c in arb_set(0.0, 6), r in arb_set(0.0, 8), margin in 0.0f64..0.5) {
            let l = run(&c, &r, margin).loss;
            prop_assert!(l >= 0.0 && l <= 1.0 + margin + 1e-12);
        }
    }
}
