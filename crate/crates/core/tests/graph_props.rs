use nalgebra::DMatrix;
use netobs::graph::{
    centrality, density_matched_p, erdos_renyi, erdos_renyi_connected, rank_subsets, scale_free, scale_free_edge_count,
    Centrality, Network,
};
use proptest::prelude::*;

/// Floyd-Warshall on hop counts, kept separate from the BFS in the library.
fn closeness_oracle(a: &DMatrix<f64>) -> Vec<f64> {
    let n = a.nrows();
    let inf = usize::MAX / 4;
    let mut d = vec![vec![inf; n]; n];
    for j in 0..n {
        d[j][j] = 0;
        for k in 0..n {
            // a[(k, j)] != 0 means j influences k; distances run along influence.
            if a[(k, j)] != 0.0 && j != k {
                d[j][k] = 1;
            }
        }
    }
    for m in 0..n {
        for j in 0..n {
            for k in 0..n {
                if d[j][m] + d[m][k] < d[j][k] {
                    d[j][k] = d[j][m] + d[m][k];
                }
            }
        }
    }
    (0..n)
        .map(|j| (n - 1) as f64 / d[j].iter().sum::<usize>() as f64)
        .collect()
}

fn permuted(net: &Network, perm: &[usize]) -> Network {
    let a = net.adjacency();
    let n = a.nrows();
    // Node j of the original becomes node perm[j].
    let mut b = DMatrix::zeros(n, n);
    for j in 0..n {
        for k in 0..n {
            b[(perm[j], perm[k])] = a[(j, k)];
        }
    }
    Network::new(b, net.is_directed()).unwrap()
}

fn permutation(n: usize) -> impl Strategy<Value = Vec<usize>> {
    Just((0..n).collect::<Vec<_>>()).prop_shuffle()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn generators_are_deterministic(n in 3usize..30, p in 0.0f64..1.0, m in 1usize..3, seed in any::<u64>()) {
        let (a, b) = (erdos_renyi(n, p, seed).unwrap(), erdos_renyi(n, p, seed).unwrap());
        prop_assert_eq!(a.adjacency(), b.adjacency());
        let m = m.min(n - 1);
        let (a, b) = (scale_free(n, m, seed).unwrap(), scale_free(n, m, seed).unwrap());
        prop_assert_eq!(a.adjacency(), b.adjacency());
    }

    #[test]
    fn undirected_generators_are_symmetric(n in 2usize..30, p in 0.0f64..1.0, seed in any::<u64>()) {
        let a = erdos_renyi(n, p, seed).unwrap();
        prop_assert_eq!(a.adjacency(), &a.adjacency().transpose());
        let m = 1 + (seed as usize) % (n - 1).min(3);
        let b = scale_free(n, m, seed).unwrap();
        prop_assert_eq!(b.adjacency(), &b.adjacency().transpose());
        prop_assert!(b.is_connected());
    }

    #[test]
    fn scale_free_edge_count_formula(n in 3usize..40, m in 1usize..4, seed in any::<u64>()) {
        prop_assume!(m < n);
        let net = scale_free(n, m, seed).unwrap();
        prop_assert_eq!(net.edge_count(), m * (m - 1) / 2 + m * (n - m));
        prop_assert_eq!(scale_free_edge_count(n, m), net.edge_count());
    }

    #[test]
    fn ranked_groups_partition_the_nodes(n in 2usize..30, size in 1usize..6, seed in any::<u64>(), closeness in any::<bool>()) {
        prop_assume!(size <= n / 2);
        let net = scale_free(n, 1, seed).unwrap();
        let metric = if closeness { Centrality::Closeness } else { Centrality::Degree };
        let groups = rank_subsets(&net, metric, size).unwrap();
        let mut seen: Vec<usize> = groups.iter().flatten().copied().collect();
        prop_assert!(groups.iter().all(|g| !g.is_empty() && g.len() <= size));
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        // Descending order of the metric across groups.
        let score = centrality(&net, metric).unwrap();
        let flat: Vec<f64> = groups.iter().flatten().map(|&v| score[v]).collect();
        prop_assert!(flat.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn closeness_matches_floyd_warshall(n in 2usize..16, seed in any::<u64>()) {
        let net = scale_free(n, 1, seed).unwrap();
        let got = centrality(&net, Centrality::Closeness).unwrap();
        let want = closeness_oracle(net.adjacency());
        for (g, w) in got.iter().zip(&want) {
            prop_assert!((g - w).abs() <= 1e-12 * w.abs());
        }
    }

    #[test]
    fn closeness_commutes_with_relabeling((n, perm) in (2usize..16).prop_flat_map(|n| (Just(n), permutation(n))), seed in any::<u64>()) {
        let net = scale_free(n, 1, seed).unwrap();
        let before = centrality(&net, Centrality::Closeness).unwrap();
        let after = centrality(&permuted(&net, &perm), Centrality::Closeness).unwrap();
        for j in 0..n {
            prop_assert!((before[j] - after[perm[j]]).abs() <= 1e-12);
        }
    }
}

#[test]
fn density_matched_er_has_the_right_mean_edge_count() {
    let (n, m) = (20, 2);
    let target = scale_free_edge_count(n, m) as f64;
    let p = density_matched_p(n, scale_free_edge_count(n, m));
    let draws = 2000;
    let mean = (0..draws).map(|s| erdos_renyi(n, p, s).unwrap().edge_count() as f64).sum::<f64>() / draws as f64;
    // Binomial(190, p) mean 37 with sd about 5.5; the sample mean has sd 0.12.
    assert!((mean - target).abs() < 0.6, "mean {mean} vs {target}");
}

#[test]
fn connected_er_rejection_is_reported() {
    let p = density_matched_p(20, scale_free_edge_count(20, 2));
    let (net, rejected) = erdos_renyi_connected(20, p, 5, 1000).unwrap();
    assert!(net.is_connected());
    assert!(rejected < 1000);
    if rejected == 0 {
        assert_eq!(net.adjacency(), erdos_renyi(20, p, 5).unwrap().adjacency());
    }
    assert!(erdos_renyi_connected(20, 0.0, 1, 3).is_err());
}

#[test]
fn adjacency_text_round_trip() {
    let net = scale_free(12, 2, 9).unwrap();
    let back = Network::parse(&net.to_text(), false).unwrap();
    assert_eq!(back.adjacency(), net.adjacency());
}
