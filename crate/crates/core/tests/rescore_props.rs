use locale_forge::rescore::{rank_with_scores, wer, werr, Hypothesis, NBestList, RescoreWeights};
use proptest::prelude::*;

fn edit_distance(r: &[&str], h: &[&str]) -> usize {
    let mut prev: Vec<usize> = (0..=h.len()).collect();
    for (i, rw) in r.iter().enumerate() {
        let mut cur = vec![i + 1];
        for (j, hw) in h.iter().enumerate() {
            cur.push((prev[j] + usize::from(rw != hw)).min(prev[j + 1] + 1).min(cur[j] + 1));
        }
        prev = cur;
    }
    prev[h.len()]
}

fn list() -> impl Strategy<Value = NBestList> {
    prop::collection::vec(("[ab]{1,2}( [ab]{1,2}){0,4}", -50i32..0, -50i32..0), 1..8).prop_map(|hs| NBestList {
        utt_id: "u".into(),
        reference: None,
        hyps: hs
            .into_iter()
            .map(|(text, am, lm1)| Hypothesis {
                text,
                am: am as f64,
                lm1: lm1 as f64,
            })
            .collect(),
    })
}

proptest! {
    #[test]
    fn wer_matches_edit_distance(r in "[abc]{1,2}( [abc]{1,2}){0,7}", h in "([abc]{1,2}( [abc]{1,2}){0,7})?") {
        let c = wer(&r, &h).unwrap();
        let rw: Vec<&str> = r.split(' ').collect();
        let hw: Vec<&str> = h.split_whitespace().collect();
        prop_assert_eq!(c.errors(), edit_distance(&rw, &hw));
        prop_assert_eq!(c.ref_len, rw.len());
        prop_assert_eq!(rw.len() + c.ins - c.del, hw.len());
        prop_assert!(c.rate() >= 0.0);
    }

    #[test]
    fn first_pass_order_kept_without_second_pass(l in list(), lambda1 in 0.0f64..2.0) {
        let w = RescoreWeights { lambda1, lambda2: 0.0, beta: 0.0 };
        let nn: Vec<f64> = (0..l.hyps.len()).map(|i| -(i as f64) * 3.0).collect();
        let r = rank_with_scores(&l, &nn, &w).unwrap();
        let mut expected: Vec<usize> = (0..l.hyps.len()).collect();
        expected.sort_by(|&a, &b| {
            let s = |i: usize| l.hyps[i].am + lambda1 * l.hyps[i].lm1;
            s(b).total_cmp(&s(a))
        });
        let got: Vec<usize> = r.ranked.iter().map(|h| h.first_pass_rank).collect();
        prop_assert_eq!(got, expected);
    }

    #[test]
    fn raising_nnlm_score_never_lowers_rank(l in list(), pick in 0usize..8, bump in 0.0f64..20.0, lambda2 in 0.01f64..2.0) {
        let i = pick % l.hyps.len();
        let w = RescoreWeights { lambda1: 1.0, lambda2, beta: 0.5 };
        let mut nn: Vec<f64> = (0..l.hyps.len()).map(|k| -(((k * 7) % 5) as f64)).collect();
        let rank = |nn: &[f64]| rank_with_scores(&l, nn, &w).unwrap().ranked.iter().position(|h| h.first_pass_rank == i).unwrap();
        let before = rank(&nn);
        nn[i] += bump;
        prop_assert!(rank(&nn) <= before);
    }

    #[test]
    fn werr_sign_follows_wer(base in 0.01f64..2.0, new in 0.0f64..2.0) {
        let r = werr(base, new).unwrap();
        prop_assert_eq!(r > 0.0, new < base);
        prop_assert!((r - (base - new) / base).abs() < 1e-15);
    }
}
