//! Seeded scenario corpora for batch experiments and ablations.
//!
//! Every corpus is a deterministic function of (kind, count, seed, params).
//! The shortcut-style kinds are two-candidate scenarios built on
//! [`make_shortcut_scenario`]; the confidence ratio and the grounded
//! candidate's sharp-head count are drawn per scenario so that sweeps over
//! alpha and over aggregation modes land on genuinely different sides of the
//! flip threshold across the corpus.

use rand::distributions::{Distribution, Uniform};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use visage_core::denoiser::{make_shortcut_scenario, make_trajectory_scenario, ScenarioSpec};
use visage_core::TrajectoryKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusKind {
    /// Canonical shortcut cases: the grounded candidate has full head
    /// consensus and the confidence ratio keeps every case inside the flip
    /// region at alpha = 0.5. Baseline commits the shortcut token first in
    /// every case.
    Shortcut,
    /// The grounded candidate has exactly one sharp head. The quantile
    /// consensus refuses the single-head evidence; min accepts it; mean
    /// flips only when the confidences are close.
    SingleSharp,
    /// Wide spread: sharp-head counts over the full range and confidence
    /// ratios straddling the alpha in {0.1, 0.3, 0.5} flip thresholds.
    Mixed,
    TrajectoryGrounded,
    TrajectoryShortcut,
}

impl CorpusKind {
    pub fn label(&self) -> &'static str {
        match self {
            CorpusKind::Shortcut => "shortcut",
            CorpusKind::SingleSharp => "single_sharp",
            CorpusKind::Mixed => "mixed",
            CorpusKind::TrajectoryGrounded => "trajectory_grounded",
            CorpusKind::TrajectoryShortcut => "trajectory_shortcut",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusParams {
    pub image_tokens: usize,
    pub heads: usize,
    pub trajectory_steps: usize,
}

impl Default for CorpusParams {
    fn default() -> Self {
        Self {
            image_tokens: 16,
            heads: 8,
            trajectory_steps: 8,
        }
    }
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn generate_corpus(
    kind: CorpusKind,
    count: usize,
    seed: u64,
    params: CorpusParams,
) -> Vec<ScenarioSpec> {
    (0..count)
        .map(|index| {
            let mut rng = ChaCha12Rng::seed_from_u64(mix(seed ^ mix(index as u64)));
            let mut spec = match kind {
                CorpusKind::Shortcut => {
                    let c_shortcut = Uniform::new(0.8, 0.9).sample(&mut rng);
                    let ratio = Uniform::new(1.15, 1.6).sample(&mut rng);
                    make_shortcut_scenario(
                        c_shortcut,
                        c_shortcut / ratio,
                        params.image_tokens,
                        params.heads,
                        params.heads,
                    )
                }
                CorpusKind::SingleSharp => {
                    let c_shortcut = Uniform::new(0.78, 0.92).sample(&mut rng);
                    // Half the corpus sits inside the mean-aggregation flip
                    // region (near-equal confidences), half outside.
                    let ratio = if rng.gen_bool(0.5) {
                        Uniform::new(1.005, 1.04).sample(&mut rng)
                    } else {
                        Uniform::new(1.15, 1.5).sample(&mut rng)
                    };
                    make_shortcut_scenario(
                        c_shortcut,
                        c_shortcut / ratio,
                        params.image_tokens,
                        params.heads,
                        1,
                    )
                }
                CorpusKind::Mixed => {
                    let c_shortcut = Uniform::new(0.75, 0.95).sample(&mut rng);
                    let ratio = Uniform::new(1.05, 2.4).sample(&mut rng);
                    let sharp_heads = rng.gen_range(1..=params.heads);
                    make_shortcut_scenario(
                        c_shortcut,
                        c_shortcut / ratio,
                        params.image_tokens,
                        params.heads,
                        sharp_heads,
                    )
                }
                CorpusKind::TrajectoryGrounded => make_trajectory_scenario(
                    TrajectoryKind::Grounded,
                    params.trajectory_steps + 2 * (index % 4),
                ),
                CorpusKind::TrajectoryShortcut => make_trajectory_scenario(
                    TrajectoryKind::Shortcut,
                    params.trajectory_steps + 2 * (index % 4),
                ),
            };
            spec.name = format!("{}_{index:03}_{}", kind.label(), spec.name);
            spec
        })
        .collect()
}
