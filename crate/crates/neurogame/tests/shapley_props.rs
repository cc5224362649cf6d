//! Axiom suite and cross-route oracles for the Shapley machinery: the subset
//! formula is checked against an independently written all-orderings average,
//! the Monte Carlo estimator against the exact values, and the strong-
//! coalition mask against a from-scratch recomputation.

use neurogame::coalition::{partition, NeighborhoodKind, NeighborhoodSystem};
use neurogame::layer::{compute_layer_mask, select_winning, NeurogameLayerConfig, TopP};
use neurogame::shapley::{
    quartile_q1, shapley_exact, shapley_monte_carlo, threshold_rho, CharacteristicFn, TableGame,
};
use neurogame::statmech::{payoff, score_layer, EnergyParams};
use neurogame::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_game(n: usize, rng: &mut ChaCha8Rng) -> TableGame {
    let mut values: Vec<f64> = (0..1usize << n).map(|_| rng.random_range(-1.0..1.0)).collect();
    values[0] = 0.0;
    TableGame::new(n, values).unwrap()
}

/// All-orderings marginal-contribution average, written as a direct recursive
/// enumeration (not the library's permutation generator).
fn ordering_average_oracle(v: &impl CharacteristicFn) -> Vec<f64> {
    let n = v.player_count();
    let mut phi = vec![0.0; n];
    let mut count = 0u64;
    let mut prefix: Vec<usize> = Vec::with_capacity(n);
    fn recurse(
        v: &impl CharacteristicFn,
        n: usize,
        prefix: &mut Vec<usize>,
        phi: &mut [f64],
        count: &mut u64,
    ) {
        if prefix.len() == n {
            let mut mask = 0u64;
            let mut prev = v.value(0);
            for &p in prefix.iter() {
                mask |= 1 << p;
                let cur = v.value(mask);
                phi[p] += cur - prev;
                prev = cur;
            }
            *count += 1;
            return;
        }
        for p in 0..n {
            if !prefix.contains(&p) {
                prefix.push(p);
                recurse(v, n, prefix, phi, count);
                prefix.pop();
            }
        }
    }
    recurse(v, n, &mut prefix, &mut phi, &mut count);
    for p in &mut phi {
        *p /= count as f64;
    }
    phi
}

#[test]
fn axioms_hold_on_random_games() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    for round in 0..50 {
        let n = 3 + (round % 4); // 3..=6
        let game = random_game(n, &mut rng);
        let phi = shapley_exact(&game).unwrap();

        // Efficiency.
        let total: f64 = phi.iter().sum();
        let grand = game.value((1u64 << n) - 1);
        assert!((total - grand).abs() < 1e-9, "efficiency: {total} vs {grand}");

        // Additivity.
        let other = random_game(n, &mut rng);
        let sum_game = game.sum(&other).unwrap();
        let phi_other = shapley_exact(&other).unwrap();
        let phi_sum = shapley_exact(&sum_game).unwrap();
        for i in 0..n {
            assert!((phi_sum[i] - (phi[i] + phi_other[i])).abs() < 1e-9);
        }
    }
}

#[test]
fn symmetric_players_receive_equal_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(52);
    for _ in 0..30 {
        let n = rng.random_range(3..=6);
        // Worth depends only on coalition size: all players interchangeable.
        let by_size: Vec<f64> = (0..=n).map(|k| if k == 0 { 0.0 } else { rng.random_range(0.0..2.0) }).collect();
        let values: Vec<f64> = (0..1u64 << n).map(|m| by_size[m.count_ones() as usize]).collect();
        let game = TableGame::new(n, values).unwrap();
        let phi = shapley_exact(&game).unwrap();
        for w in phi.windows(2) {
            assert!((w[0] - w[1]).abs() < 1e-10);
        }
    }
}

#[test]
fn dummies_receive_zero() {
    let mut rng = ChaCha8Rng::seed_from_u64(53);
    for _ in 0..30 {
        let n = rng.random_range(3..=6);
        let base = random_game(n - 1, &mut rng);
        // Last player contributes nothing to any coalition.
        let low_mask = (1u64 << (n - 1)) - 1;
        let values: Vec<f64> = (0..1u64 << n).map(|m| base.value(m & low_mask)).collect();
        let game = TableGame::new(n, values).unwrap();
        let phi = shapley_exact(&game).unwrap();
        assert!(phi[n - 1].abs() < 1e-10);
    }
}

#[test]
fn subset_formula_equals_ordering_average_up_to_six_players() {
    let mut rng = ChaCha8Rng::seed_from_u64(54);
    for n in 2..=6usize {
        for _ in 0..5 {
            let game = random_game(n, &mut rng);
            let formula = shapley_exact(&game).unwrap();
            let oracle = ordering_average_oracle(&game);
            for (a, b) in formula.iter().zip(&oracle) {
                assert!((a - b).abs() < 1e-10, "n={n}: {a} vs {b}");
            }
        }
    }
}

#[test]
fn monte_carlo_error_is_bounded_on_eight_player_games() {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut total_err = 0.0;
    let mut total_budget = 0.0;
    for round in 0..6 {
        let game = random_game(8, &mut rng);
        let exact = shapley_exact(&game).unwrap();
        let estimate = shapley_monte_carlo(&game, 2000, 1000 + round).unwrap();
        let spread = exact.iter().cloned().fold(f64::MIN, f64::max)
            - exact.iter().cloned().fold(f64::MAX, f64::min);
        let mean_err: f64 =
            exact.iter().zip(&estimate).map(|(a, b)| (a - b).abs()).sum::<f64>() / 8.0;
        total_err += mean_err;
        total_budget += 0.05 * spread;
        assert!(
            mean_err <= 0.05 * spread,
            "round {round}: mean |err| {mean_err:.4} vs budget {:.4}",
            0.05 * spread
        );
    }
    assert!(total_err < total_budget);
}

#[test]
fn positive_scaling_preserves_the_value_ranking() {
    let mut rng = ChaCha8Rng::seed_from_u64(56);
    for _ in 0..20 {
        let n = rng.random_range(3..=6);
        let game = random_game(n, &mut rng);
        let lambda = rng.random_range(0.1..8.0);
        let scaled = TableGame::new(
            n,
            (0..1u64 << n).map(|m| lambda * game.value(m)).collect(),
        )
        .unwrap();
        let phi = shapley_exact(&game).unwrap();
        let phi_scaled = shapley_exact(&scaled).unwrap();
        for i in 0..n {
            assert!((phi_scaled[i] - lambda * phi[i]).abs() < 1e-9);
        }
        let rank = |values: &[f64]| -> Vec<usize> {
            let mut ids: Vec<usize> = (0..values.len()).collect();
            ids.sort_by(|&a, &b| values[b].partial_cmp(&values[a]).unwrap().then(a.cmp(&b)));
            ids
        };
        assert_eq!(rank(&phi), rank(&phi_scaled));
    }
}

/// From-scratch recomputation of the strong-coalition mask: re-derives
/// energies, probabilities, payoffs, Shapley values (via the ordering
/// oracle), quartile, threshold and flags without the library's pipeline
/// code, then compares flag-for-flag.
#[test]
fn mask_matches_independent_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(57);
    let params = EnergyParams::default();
    for round in 0..100u64 {
        let tiles_down = rng.random_range(1..=2usize);
        let tiles_across = rng.random_range(1..=4usize).min(8 / (2 * tiles_down)).max(1);
        let h = tiles_down * 2;
        let w = tiles_across * 2;
        let mut map = Tensor::<f64>::zeros(vec![h, w]);
        for v in map.data_mut() {
            *v = rng.random_range(0.0..2.0);
        }
        let iteration = rng.random_range(1..=30u64);
        let cfg = NeurogameLayerConfig {
            top_p: TopP::Fraction(rng.random_range(0.3..1.0)),
            ..NeurogameLayerConfig::default()
        };
        let mask = compute_layer_mask(&[map.clone()], &cfg, iteration, 0, round, None)
            .unwrap()
            .channels
            .remove(0);

        // Independent path.
        let floor = 1e-6f64;
        let m = tiles_down * tiles_across;
        let kbt = 1.38e-23 * 1e23 / (1.0 + iteration as f64).ln();
        // Tile activations, row-major tiles, row-major within tile.
        let tile_acts = |tid: usize| -> Vec<f64> {
            let (tr, tc) = (tid / tiles_across, tid % tiles_across);
            let mut acts = Vec::new();
            for r in 0..2 {
                for c in 0..2 {
                    acts.push(map.at(&[tr * 2 + r, tc * 2 + c]).max(floor));
                }
            }
            acts
        };
        // Energy over the four axis pairs of a 2x2 tile, restricted to a
        // member subset.
        let adjacency = [(0usize, 1usize), (0, 2), (1, 3), (2, 3)];
        let sub_energy = |acts: &[f64], members: &[bool]| -> f64 {
            adjacency
                .iter()
                .filter(|(p, q)| members[*p] && members[*q])
                .map(|(p, q)| 1.0 / (acts[*p] * acts[*q]))
                .sum()
        };
        let energies: Vec<f64> = (0..m).map(|t| sub_energy(&tile_acts(t), &[true; 4])).collect();
        let q: f64 = energies.iter().map(|e| (-e / kbt).exp()).sum();
        let prob_of = |e: f64| (-e / kbt).exp() / q;
        let payoffs: Vec<f64> = energies.iter().map(|&e| payoff(prob_of(e), &params)).collect();
        let mut order: Vec<usize> = (0..m).collect();
        order.sort_by(|&a, &b| payoffs[b].partial_cmp(&payoffs[a]).unwrap().then(a.cmp(&b)));
        let keep_n = ((match cfg.top_p {
            TopP::Fraction(f) => (f * m as f64 - 1e-9).ceil() as usize,
            TopP::Count(k) => k,
        })
        .max(1))
        .min(m);
        let winning = &order[..keep_n];

        let mut expect = vec![0u8; h * w];
        for &tid in winning {
            let acts = tile_acts(tid);
            let game = SubGame {
                acts: acts.clone(),
                kbt,
                q,
            };
            let phi = ordering_average_oracle(&game);
            let rho = {
                let mut sorted = phi.clone();
                sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
                // First quartile of four values interpolates a quarter of the
                // way between the lowest two.
                let q1 = sorted[0] + 0.25 * (sorted[1] - sorted[0]);
                q1 * (1.0 + iteration as f64).ln()
            };
            let mut kept: Vec<usize> = (0..4).filter(|&k| phi[k] > rho).collect();
            if kept.is_empty() {
                let mut best = 0;
                for k in 1..4 {
                    if phi[k] > phi[best] {
                        best = k;
                    }
                }
                kept.push(best);
            }
            let (tr, tc) = (tid / tiles_across, tid % tiles_across);
            for k in kept {
                let (r, c) = (tr * 2 + k / 2, tc * 2 + k % 2);
                expect[r * w + c] = 1;
            }
        }
        assert_eq!(mask.keep, expect, "round {round} ({h}x{w}, i={iteration})");
    }
}

struct SubGame {
    acts: Vec<f64>,
    kbt: f64,
    q: f64,
}

impl CharacteristicFn for SubGame {
    fn player_count(&self) -> usize {
        4
    }

    fn value(&self, subset: u64) -> f64 {
        if subset.count_ones() < 2 {
            return 0.0;
        }
        let members: Vec<bool> = (0..4).map(|k| subset & (1 << k) != 0).collect();
        let adjacency = [(0usize, 1usize), (0, 2), (1, 3), (2, 3)];
        let e: f64 = adjacency
            .iter()
            .filter(|(p, q)| members[*p] && members[*q])
            .map(|(p, q)| 1.0 / (self.acts[*p] * self.acts[*q]))
            .sum();
        let p = (-e / self.kbt).exp() / self.q;
        payoff(p, &EnergyParams::default())
    }
}

#[test]
fn winning_selection_matches_payoff_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(58);
    for _ in 0..20 {
        let mut map = Tensor::<f64>::zeros(vec![4, 8]);
        for v in map.data_mut() {
            *v = rng.random_range(0.0..2.0);
        }
        let states = partition(&map, (2, 2)).unwrap();
        let pairs = NeighborhoodSystem::for_block((2, 2), NeighborhoodKind::Plus4);
        let emap = score_layer(&states, &pairs, 1.0, &EnergyParams::default()).unwrap();
        let ids = select_winning(&emap, TopP::Fraction(0.5));
        assert_eq!(ids.len(), 4); // ceil(0.5 * 8)
        let mut payoffs: Vec<(usize, f64)> =
            emap.scores.iter().map(|s| (s.coalition_id, s.payoff)).collect();
        payoffs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let expect: Vec<usize> = payoffs[..4].iter().map(|(id, _)| *id).collect();
        assert_eq!(ids, expect);
    }
}

#[test]
fn rho_is_quartile_times_log_schedule() {
    let mut rng = ChaCha8Rng::seed_from_u64(59);
    for _ in 0..50 {
        let n = rng.random_range(1..=12);
        let values: Vec<f64> = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
        let i = rng.random_range(1.0..500.0);
        let rho = threshold_rho(&values, i).unwrap();
        let q1 = quartile_q1(&values).unwrap();
        assert!((rho - q1 * (1.0 + i).ln()).abs() < 1e-12);
    }
}
