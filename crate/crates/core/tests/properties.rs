use std::collections::BTreeSet;

use proptest::prelude::*;

use dive_core::distill::{supervision_mass, topk_kl, weighted_ce, TeacherCache, TeacherCacheRecord};
use dive_core::evalkit::metrics::lcs_len;
use dive_core::evalkit::{bleu, length_stats, rouge_l, CostModel};
use dive_core::lexicon::{compile_matcher, weights_from_masks, MaskPair, PhraseLexicon, WeightProfile};
use dive_core::numeric::ops::{log_softmax, softmax, top_k_indices};
use dive_core::steering::inject;

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn vec_pair(max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (1..max).prop_flat_map(|d| (prop::collection::vec(-50.0..50.0f64, d), prop::collection::vec(-50.0..50.0f64, d)))
}

proptest! {
    #[test]
    fn injection_never_exceeds_the_norm_budget((h, d) in vec_pair(24), rho in 0.01..10.0f64) {
        let out = inject(&h, &d, rho, 1.0);
        prop_assert!(norm(&out) <= rho * norm(&h) * (1.0 + 1e-9) + 1e-12);
    }

    #[test]
    fn injection_inside_the_budget_is_a_plain_sum((h, d) in vec_pair(24)) {
        let sum: Vec<f64> = h.iter().zip(&d).map(|(a, b)| a + b).collect();
        let rho = norm(&sum) / norm(&h).max(1e-300) * 1.5 + 1.0;
        prop_assert_eq!(inject(&h, &d, rho, 1.0), sum);
    }

    #[test]
    fn zero_residual_is_identity(h in prop::collection::vec(-50.0..50.0f64, 1..24), rho in 0.01..10.0f64) {
        let z = vec![0.0; h.len()];
        prop_assert_eq!(inject(&h, &z, rho, 1.0), h);
    }

    #[test]
    fn softmax_is_a_distribution(v in prop::collection::vec(-300.0..300.0f64, 1..64), t in 0.1..5.0f64) {
        let p = softmax(&v, t).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let lp = log_softmax(&v, t).unwrap();
        for (a, b) in p.iter().zip(&lp) {
            prop_assert!((a - b.exp()).abs() < 1e-12);
        }
    }

    #[test]
    fn top_k_returns_the_largest(v in prop::collection::vec(-10.0..10.0f64, 1..64), k in 1usize..64) {
        let k = k.min(v.len());
        let top = top_k_indices(&v, k);
        prop_assert_eq!(top.len(), k);
        let min_in = top.iter().map(|&i| v[i]).fold(f64::INFINITY, f64::min);
        let chosen: BTreeSet<usize> = top.iter().copied().collect();
        for (i, x) in v.iter().enumerate() {
            if !chosen.contains(&i) {
                prop_assert!(*x <= min_in);
            }
        }
    }

    #[test]
    fn topk_kl_is_nonnegative_and_zero_on_agreement(
        s in prop::collection::vec(-20.0..20.0f64, 2..40),
        noise in prop::collection::vec(-5.0..5.0f32, 40),
        k in 1usize..40,
        t in 0.25..4.0f64,
    ) {
        let k = k.min(s.len());
        let ids: Vec<u32> = top_k_indices(&s, k).into_iter().map(|i| i as u32).collect();
        let same: Vec<f32> = ids.iter().map(|&i| s[i as usize] as f32).collect();
        // f32 rounding of the teacher side leaves a tiny residual
        prop_assert!(topk_kl(&ids, &same, &s, t) < 1e-10);
        let other: Vec<f32> = same.iter().zip(&noise).map(|(a, b)| a + b).collect();
        prop_assert!(topk_kl(&ids, &other, &s, t) >= 0.0);
    }

    #[test]
    fn weighted_ce_ignores_a_common_weight_scale(
        rows in prop::collection::vec(prop::collection::vec(-8.0..8.0f64, 5), 1..20),
        w in prop::collection::vec(0.1..10.0f64, 20),
        c in 1e-3..1e3f64,
    ) {
        let n = rows.len();
        let targets: Vec<usize> = (0..n).map(|i| i % 5).collect();
        let scaled: Vec<f64> = w[..n].iter().map(|x| x * c).collect();
        let a = weighted_ce(&rows, &targets, &w[..n]).unwrap();
        let b = weighted_ce(&rows, &targets, &scaled).unwrap();
        prop_assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
    }

    #[test]
    fn supervision_mass_adds_up_to_the_weights(
        kinds in prop::collection::vec(0u8..3, 1..60),
        path_w in 0.0..10.0f64,
        eos_w in 0.0..10.0f64,
    ) {
        let masks = MaskPair {
            path: kinds.iter().map(|&k| k == 1).collect(),
            eos: kinds.iter().map(|&k| k == 2).collect(),
        };
        let profile = WeightProfile { path: path_w, eos: eos_w };
        let m = supervision_mass([&masks], &profile);
        let total: f64 = weights_from_masks(&masks, &profile).iter().sum();
        prop_assert!((m.total() - total).abs() < 1e-9);
    }

    #[test]
    fn matcher_agrees_with_a_direct_scan(seq in prop::collection::vec(0u32..6, 0..80)) {
        let lex = PhraseLexicon::new(3, [(0, vec![1, 2]), (0, vec![1, 2, 3]), (1, vec![2]), (2, vec![3, 3, 4])]).unwrap();
        let m = compile_matcher(&lex);
        let mut want = Vec::new();
        for s in 0..seq.len() {
            for (pi, (label, p)) in lex.phrases().iter().enumerate() {
                if seq[s..].starts_with(p) {
                    want.push((s, s + p.len(), *label, pi));
                }
            }
        }
        want.sort();
        let mut got: Vec<_> = m.find_all(&seq).into_iter().map(|x| (x.start, x.end, x.label, x.phrase)).collect();
        got.sort();
        prop_assert_eq!(got, want);
    }

    #[test]
    fn metrics_stay_in_range(
        c in prop::collection::vec(0u32..5, 0..30),
        r in prop::collection::vec(0u32..5, 1..30),
    ) {
        let b = bleu(&[c.clone()], &[r.clone()], 4).unwrap();
        for x in &b {
            prop_assert!((0.0..=100.0 + 1e-9).contains(x));
        }
        let rl = rouge_l(&c, &r);
        prop_assert!((0.0..=100.0).contains(&rl));
        prop_assert!((rl - rouge_l(&r, &c)).abs() < 1e-12);
        prop_assert!(lcs_len(&c, &r) <= c.len().min(r.len()));
        prop_assert_eq!(rouge_l(&r, &r), 100.0);
    }

    #[test]
    fn length_buckets_partition_the_cases(pairs in prop::collection::vec((0usize..80, 1usize..80), 1..40)) {
        let s = length_stats(&pairs, 5).unwrap();
        prop_assert!((s.under + s.over + s.proper - 100.0).abs() < 1e-9);
        prop_assert!(s.mae_delta >= s.mean_delta.abs() - 1e-12);
    }

    #[test]
    fn cost_ratio_grows_with_prompt_length(c in 1.0..1e6f64, n0 in 1usize..2000, extra in 1usize..2000) {
        let m = CostModel::new(c, 1.0).unwrap();
        prop_assert_eq!(m.ratio(n0, n0).unwrap(), 1.0);
        prop_assert!(m.ratio(n0 + extra, n0).unwrap() > 1.0);
    }

    #[test]
    fn teacher_cache_round_trips(
        k in 1usize..6,
        recs in prop::collection::vec((0u64..1000, 1usize..5), 0..6),
        seed in any::<u64>(),
    ) {
        let mut ids: Vec<u64> = recs.iter().map(|r| r.0).collect();
        ids.sort();
        ids.dedup();
        let records: Vec<TeacherCacheRecord> = ids
            .iter()
            .zip(recs.iter().map(|r| r.1))
            .map(|(&case_id, npos)| TeacherCacheRecord {
                case_id,
                ids: (0..npos).map(|p| (0..k as u32).map(|i| i + p as u32).collect()).collect(),
                logits: (0..npos).map(|p| (0..k).map(|i| (seed % 97) as f32 - (i + p) as f32).collect()).collect(),
            })
            .collect();
        let cache = TeacherCache { k, shots: 2, temperature: 2.0, dataset_id: seed, records };
        let mut buf = Vec::new();
        cache.save(&mut buf).unwrap();
        prop_assert_eq!(TeacherCache::load(&buf[..]).unwrap(), cache);
        if !buf.is_empty() {
            prop_assert!(TeacherCache::load(&buf[..buf.len() - 1]).is_err());
        }
    }
}
