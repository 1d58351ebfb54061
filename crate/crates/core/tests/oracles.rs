//! Statistical behavior of the stability oracles.

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use visage_core::verification::{
    construct_worst_case, run_stability_trial, ObjectiveEntry, TrueObjectiveSpec,
};

fn random_objective(rng: &mut ChaCha12Rng, n: usize) -> TrueObjectiveSpec {
    let log_c = Uniform::new_inclusive(-5.0, 0.0);
    let discrepancy = Uniform::new_inclusive(0.0, 3.0);
    TrueObjectiveSpec {
        entries: (1..=n)
            .map(|position| ObjectiveEntry {
                position,
                log_confidence: log_c.sample(rng),
                true_discrepancy: discrepancy.sample(rng),
            })
            .collect(),
        lambda: 1.0,
    }
}

/// Mean loss over a fixed instance distribution is non-decreasing in the
/// noise bound, up to two standard errors of the difference.
#[test]
fn mean_loss_degrades_monotonically_in_epsilon() {
    let grid = [0.05, 0.25, 0.5, 0.75, 1.0];
    let trials = 2_000;
    let mut stats = Vec::new();
    for (grid_idx, &epsilon) in grid.iter().enumerate() {
        let mut losses = Vec::with_capacity(trials);
        for trial in 0..trials {
            // Same instance stream at every epsilon: paired comparison.
            let mut rng = ChaCha12Rng::seed_from_u64(7_000 + trial as u64);
            let spec = random_objective(&mut rng, 10);
            let truth = spec.true_scores().unwrap();
            let trial_seed = (grid_idx as u64) << 32 | trial as u64;
            let result = run_stability_trial(&truth, epsilon, 4, trial_seed).unwrap();
            losses.push(result.loss);
        }
        let mean = losses.iter().sum::<f64>() / trials as f64;
        let var = losses.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / (trials - 1) as f64;
        let se = (var / trials as f64).sqrt();
        stats.push((mean, se));
    }
    for window in stats.windows(2) {
        let (mean_lo, se_lo) = window[0];
        let (mean_hi, se_hi) = window[1];
        let se_diff = (se_lo * se_lo + se_hi * se_hi).sqrt();
        assert!(
            mean_hi - mean_lo >= -2.0 * se_diff,
            "mean loss decreased beyond 2 standard errors: {stats:?}"
        );
    }
}

/// Tightness of the bound's constant at gap = 1.98 eps for small budgets.
#[test]
fn worst_case_ratio_approaches_one_as_gap_approaches_two_eps() {
    for k in [1usize, 2, 3] {
        for epsilon in [0.1, 0.5, 1.0] {
            let gap = 1.98 * epsilon;
            let case = construct_worst_case(k, epsilon, gap).unwrap();
            let trial = case.run().unwrap();
            let ratio = trial.loss / trial.bound;
            assert!(ratio >= 0.99 - 1e-12, "k={k} eps={epsilon}: ratio {ratio}");
            assert!(trial.loss <= trial.bound + 1e-12);
            assert_eq!(trial.swapped, k, "every pair reverses");
        }
    }
}
