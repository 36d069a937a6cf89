use std::collections::BTreeSet;

use locale_forge::corpus::{LocaleCorpus, LocaleId};
use locale_forge::langsim::{cluster_locales, similarity_matrix, ClusterParams, LocaleGrouping, SimilarityMatrix};
use proptest::prelude::*;

fn tag(i: usize) -> LocaleId {
    LocaleId::new(&format!("{}{}-ZZ", (b'a' + (i / 26) as u8) as char, (b'a' + (i % 26) as u8) as char)).unwrap()
}

/// A random valid similarity matrix over `n` locales.
fn matrix() -> impl Strategy<Value = SimilarityMatrix> {
    (2usize..12).prop_flat_map(|n| {
        prop::collection::vec(0.0f64..1.0, n * (n - 1) / 2).prop_map(move |upper| {
            let mut s = vec![1.0; n * n];
            let mut it = upper.into_iter();
            for i in 0..n {
                for j in i + 1..n {
                    let v = it.next().unwrap();
                    s[i * n + j] = v;
                    s[j * n + i] = v;
                }
            }
            SimilarityMatrix::new((0..n).map(tag).collect(), s).unwrap()
        })
    })
}

fn as_sets(g: &LocaleGrouping) -> BTreeSet<BTreeSet<LocaleId>> {
    g.groups.iter().map(|x| x.iter().cloned().collect()).collect()
}

fn is_partition(g: &LocaleGrouping, locales: &[LocaleId]) -> bool {
    let all: Vec<&LocaleId> = g.groups.iter().flatten().collect();
    let uniq: BTreeSet<&LocaleId> = all.iter().copied().collect();
    g.groups.iter().all(|x| !x.is_empty())
        && all.len() == locales.len()
        && uniq == locales.iter().collect()
        && g.groups.windows(2).all(|w| w[0][0] < w[1][0])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn every_k_partitions(m in matrix()) {
        let locales: Vec<LocaleId> = (0..m.len()).map(tag).collect();
        for k in 1..=m.len() {
            let g = cluster_locales(&m, ClusterParams::K(k)).unwrap();
            prop_assert_eq!(g.groups.len(), k);
            prop_assert!(is_partition(&g, &locales));
        }
    }

    #[test]
    fn permutation_equivariant(m in matrix(), rot in 0usize..12, k in 1usize..12) {
        let n = m.len();
        let k = 1 + k % n;
        let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).rev().collect();
        let locales: Vec<LocaleId> = perm.iter().map(|&i| tag(i)).collect();
        let scores: Vec<f64> = perm
            .iter()
            .flat_map(|&i| perm.iter().map(move |&j| (i, j)))
            .map(|(i, j)| m.get(i, j))
            .collect();
        let pm = SimilarityMatrix::new(locales, scores).unwrap();
        let a = cluster_locales(&m, ClusterParams::K(k)).unwrap();
        let b = cluster_locales(&pm, ClusterParams::K(k)).unwrap();
        prop_assert_eq!(as_sets(&a), as_sets(&b));
    }

    #[test]
    fn threshold_monotone(m in matrix()) {
        let counts: Vec<usize> = (0..=20)
            .map(|i| cluster_locales(&m, ClusterParams::DistanceThreshold(i as f64 / 20.0)).unwrap().groups.len())
            .collect();
        for w in counts.windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn similarity_bounded_and_symmetric(
        corpora in prop::collection::vec(prop::collection::vec("[abc]{1,3}( [abc]{1,3}){0,4}", 1..6), 2..5),
        top_k in 1usize..10,
    ) {
        let cs: Vec<LocaleCorpus> = corpora
            .iter()
            .enumerate()
            .map(|(i, lines)| LocaleCorpus::from_lines(tag(i), lines))
            .collect();
        let m = similarity_matrix(&cs, top_k).unwrap();
        for i in 0..m.len() {
            prop_assert_eq!(m.get(i, i), 1.0);
            for j in 0..m.len() {
                prop_assert!((0.0..=1.0).contains(&m.get(i, j)));
                prop_assert!((m.get(i, j) - m.get(j, i)).abs() <= 1e-12);
            }
        }
    }
}
