//! Sequence state, vocabulary, and block unmasking schedules.
//!
//! A response is a fixed-length array of slots that start masked and are
//! filled in over a fixed number of decode steps. Positions are 1-indexed
//! everywhere (candidate sets, commit maps, traces, errors); the underlying
//! storage is the only place that works in 0-based offsets.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::RangeInclusive;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Token identifier. Proposal tokens live in `0..vocab.size()`; the mask id
/// sits outside that range.
pub type TokenId = u32;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum VocabularyError {
    #[error("vocabulary size must be at least 2, got {0}")]
    TooSmall(usize),
    #[error("mask id {mask_id} collides with the proposal range 0..{size}")]
    MaskInProposalRange { mask_id: TokenId, size: usize },
}

/// Token alphabet plus the reserved mask id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    size: usize,
    mask_id: TokenId,
}

impl Vocabulary {
    pub fn new(size: usize, mask_id: TokenId) -> Result<Self, VocabularyError> {
        if size < 2 {
            return Err(VocabularyError::TooSmall(size));
        }
        if (mask_id as usize) < size {
            return Err(VocabularyError::MaskInProposalRange { mask_id, size });
        }
        Ok(Self { size, mask_id })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn mask_id(&self) -> TokenId {
        self.mask_id
    }

    /// True when `token` is a legal proposal (mask id is never legal).
    pub fn contains(&self, token: TokenId) -> bool {
        (token as usize) < self.size
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CommitError {
    #[error(
        "position {position} already holds token {existing}; committed tokens are never rewritten"
    )]
    Overwrite { position: usize, existing: TokenId },
    #[error("position {position} is outside 1..={len}")]
    OutOfRange { position: usize, len: usize },
    #[error("token at position {position} is the mask id {token}; masks cannot be committed")]
    MaskToken { position: usize, token: TokenId },
    #[error("token {token} at position {position} is outside the vocabulary of size {size}")]
    TokenOutOfVocabulary {
        position: usize,
        token: TokenId,
        size: usize,
    },
}

/// Partially unmasked response together with the step counter.
///
/// The state is an immutable value: [`SequenceState::commit`] returns a new
/// state and never touches the original, so states can be shared across
/// threads freely.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceState {
    prompt_len: usize,
    num_image_tokens: usize,
    response: Vec<Option<TokenId>>,
    step: usize,
}

impl SequenceState {
    /// Fresh state: all `gen_length` response slots masked, step 1.
    pub fn new(prompt_len: usize, num_image_tokens: usize, gen_length: usize) -> Self {
        Self {
            prompt_len,
            num_image_tokens,
            response: vec![None; gen_length],
            step: 1,
        }
    }

    /// Rebuild a state from an explicit response array (used by trace replay
    /// and tests). `step` is the step about to be executed.
    pub fn from_response(
        prompt_len: usize,
        num_image_tokens: usize,
        response: Vec<Option<TokenId>>,
        step: usize,
    ) -> Self {
        Self {
            prompt_len,
            num_image_tokens,
            response,
            step,
        }
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn num_image_tokens(&self) -> usize {
        self.num_image_tokens
    }

    pub fn gen_length(&self) -> usize {
        self.response.len()
    }

    /// 1-based index of the next decode step. Starts at 1 and is incremented
    /// by every commit, so a completed T-step decode ends at T+1.
    pub fn step(&self) -> usize {
        self.step
    }

    pub fn response(&self) -> &[Option<TokenId>] {
        &self.response
    }

    /// Token at a 1-based position; `None` while masked.
    pub fn token_at(&self, position: usize) -> Option<TokenId> {
        self.response[position - 1]
    }

    pub fn is_masked(&self, position: usize) -> bool {
        self.response[position - 1].is_none()
    }

    pub fn masked_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.response
            .iter()
            .enumerate()
            .filter(|(_, slot)| slot.is_none())
            .map(|(idx, _)| idx + 1)
    }

    pub fn mask_count(&self) -> usize {
        self.response.iter().filter(|slot| slot.is_none()).count()
    }

    pub fn is_complete(&self) -> bool {
        self.response.iter().all(|slot| slot.is_some())
    }

    /// The fully decoded response, available once no masks remain.
    pub fn final_tokens(&self) -> Option<Vec<TokenId>> {
        self.response.iter().copied().collect()
    }

    /// Write the committed tokens into a new state and advance the step.
    ///
    /// Every mapped position must currently be masked; committed slots are
    /// immutable for the rest of the decode.
    pub fn commit(
        &self,
        vocabulary: &Vocabulary,
        committed: &BTreeMap<usize, TokenId>,
    ) -> Result<SequenceState, CommitError> {
        let len = self.response.len();
        for (&position, &token) in committed {
            if position == 0 || position > len {
                return Err(CommitError::OutOfRange { position, len });
            }
            if let Some(existing) = self.response[position - 1] {
                return Err(CommitError::Overwrite { position, existing });
            }
            if token == vocabulary.mask_id() {
                return Err(CommitError::MaskToken { position, token });
            }
            if !vocabulary.contains(token) {
                return Err(CommitError::TokenOutOfVocabulary {
                    position,
                    token,
                    size: vocabulary.size(),
                });
            }
        }
        let mut response = self.response.clone();
        for (&position, &token) in committed {
            response[position - 1] = Some(token);
        }
        Ok(SequenceState {
            prompt_len: self.prompt_len,
            num_image_tokens: self.num_image_tokens,
            response,
            step: self.step + 1,
        })
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ScheduleError {
    #[error("schedule dimensions must be positive: gen_length={gen_length}, steps={steps}, block_length={block_length}")]
    ZeroDimension {
        gen_length: usize,
        steps: usize,
        block_length: usize,
    },
    #[error("block length {block_length} does not divide generation length {gen_length}")]
    BlockMisaligned {
        gen_length: usize,
        block_length: usize,
    },
    #[error("step count {steps} is not divisible by the block count {num_blocks}")]
    StepsMisaligned { steps: usize, num_blocks: usize },
    #[error("per-step budget is not integral: block length {block_length} not divisible by {steps_per_block} steps per block")]
    BudgetNotIntegral {
        block_length: usize,
        steps_per_block: usize,
    },
    #[error("budget list has {got} entries, schedule declares {steps} steps")]
    BudgetCountMismatch { got: usize, steps: usize },
    #[error("step {step} has a zero budget")]
    ZeroBudget { step: usize },
}

/// Per-step unmasking budgets with semi-autoregressive block structure.
///
/// The response is split into `gen_length / block_length` blocks decoded in
/// order; within a block every step carries the same budget.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnmaskSchedule {
    gen_length: usize,
    steps: usize,
    block_length: usize,
    budgets: Vec<usize>,
}

impl UnmaskSchedule {
    /// Escape hatch for irregular scripted schedules; budget uniformity and
    /// exact exhaustion are not enforced here, only dimensional sanity.
    pub fn from_budgets(
        gen_length: usize,
        block_length: usize,
        budgets: Vec<usize>,
    ) -> Result<Self, ScheduleError> {
        let steps = budgets.len();
        if gen_length == 0 || steps == 0 || block_length == 0 {
            return Err(ScheduleError::ZeroDimension {
                gen_length,
                steps,
                block_length,
            });
        }
        if !gen_length.is_multiple_of(block_length) {
            return Err(ScheduleError::BlockMisaligned {
                gen_length,
                block_length,
            });
        }
        if let Some(step) = budgets.iter().position(|&k| k == 0) {
            return Err(ScheduleError::ZeroBudget { step: step + 1 });
        }
        Ok(Self {
            gen_length,
            steps,
            block_length,
            budgets,
        })
    }

    pub fn gen_length(&self) -> usize {
        self.gen_length
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn block_length(&self) -> usize {
        self.block_length
    }

    pub fn num_blocks(&self) -> usize {
        self.gen_length / self.block_length
    }

    pub fn budgets(&self) -> &[usize] {
        &self.budgets
    }

    /// Budget for a 1-based step.
    pub fn budget(&self, step: usize) -> Option<usize> {
        self.budgets.get(step - 1).copied()
    }

    /// 1-based block index owning a 1-based position.
    pub fn block_of(&self, position: usize) -> usize {
        (position - 1) / self.block_length + 1
    }

    /// Inclusive 1-based position range of a 1-based block.
    pub fn block_positions(&self, block: usize) -> RangeInclusive<usize> {
        let start = (block - 1) * self.block_length + 1;
        start..=start + self.block_length - 1
    }
}

/// Build the uniform block schedule: `gen_length / block_length` blocks, each
/// decoded over `steps / num_blocks` steps with a constant per-step budget.
///
/// The three divisibility constraints are rigid; a violation is an error
/// naming the failing constraint rather than a silently rounded schedule.
pub fn make_block_schedule(
    gen_length: usize,
    steps: usize,
    block_length: usize,
) -> Result<UnmaskSchedule, ScheduleError> {
    if gen_length == 0 || steps == 0 || block_length == 0 {
        return Err(ScheduleError::ZeroDimension {
            gen_length,
            steps,
            block_length,
        });
    }
    if !gen_length.is_multiple_of(block_length) {
        return Err(ScheduleError::BlockMisaligned {
            gen_length,
            block_length,
        });
    }
    let num_blocks = gen_length / block_length;
    if !steps.is_multiple_of(num_blocks) {
        return Err(ScheduleError::StepsMisaligned { steps, num_blocks });
    }
    let steps_per_block = steps / num_blocks;
    if !block_length.is_multiple_of(steps_per_block) {
        return Err(ScheduleError::BudgetNotIntegral {
            block_length,
            steps_per_block,
        });
    }
    let budget = block_length / steps_per_block;
    Ok(UnmaskSchedule {
        gen_length,
        steps,
        block_length,
        budgets: vec![budget; steps],
    })
}

/// Masked positions eligible at the current step: the masked slots of the
/// earliest incomplete block. Later blocks only become eligible once every
/// position of the preceding block is committed. Empty iff the response is
/// fully committed.
pub fn candidate_set(state: &SequenceState, schedule: &UnmaskSchedule) -> BTreeSet<usize> {
    let first_masked = match state.masked_positions().next() {
        Some(position) => position,
        None => return BTreeSet::new(),
    };
    let block = schedule.block_of(first_masked);
    schedule
        .block_positions(block)
        .filter(|&position| position <= state.gen_length() && state.is_masked(position))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> Vocabulary {
        Vocabulary::new(16, 16).unwrap()
    }

    #[test]
    fn vocabulary_rejects_mask_in_range() {
        assert_eq!(
            Vocabulary::new(16, 3),
            Err(VocabularyError::MaskInProposalRange {
                mask_id: 3,
                size: 16
            })
        );
        assert_eq!(Vocabulary::new(1, 1), Err(VocabularyError::TooSmall(1)));
    }

    #[test]
    fn block_schedule_paper_triples() {
        let s = make_block_schedule(256, 256, 32).unwrap();
        assert_eq!(s.budgets().len(), 256);
        assert!(s.budgets().iter().all(|&k| k == 1));
        assert_eq!(s.num_blocks(), 8);

        let s = make_block_schedule(256, 128, 64).unwrap();
        assert_eq!(s.budgets().len(), 128);
        assert!(s.budgets().iter().all(|&k| k == 2));
        assert_eq!(s.num_blocks(), 4);

        let s = make_block_schedule(8, 8, 8).unwrap();
        assert_eq!(s.budgets(), &[1; 8]);
        assert_eq!(s.num_blocks(), 1);
    }

    #[test]
    fn block_schedule_budgets_sum_to_length() {
        for (l, t, b) in [(256, 256, 32), (256, 128, 64), (8, 8, 8), (64, 16, 16)] {
            let s = make_block_schedule(l, t, b).unwrap();
            assert_eq!(s.budgets().iter().sum::<usize>(), l, "({l},{t},{b})");
        }
    }

    #[test]
    fn block_schedule_names_failing_constraint() {
        assert_eq!(
            make_block_schedule(10, 5, 3),
            Err(ScheduleError::BlockMisaligned {
                gen_length: 10,
                block_length: 3
            })
        );
        assert_eq!(
            make_block_schedule(8, 3, 4),
            Err(ScheduleError::StepsMisaligned {
                steps: 3,
                num_blocks: 2
            })
        );
        assert_eq!(
            make_block_schedule(8, 16, 4),
            Err(ScheduleError::BudgetNotIntegral {
                block_length: 4,
                steps_per_block: 8
            })
        );
        assert!(matches!(
            make_block_schedule(0, 4, 4),
            Err(ScheduleError::ZeroDimension { .. })
        ));
    }

    #[test]
    fn candidate_set_reads_masked_positions() {
        let state = SequenceState::from_response(0, 16, vec![Some(7), None, None, Some(3)], 1);
        let schedule = make_block_schedule(4, 4, 4).unwrap();
        let c: Vec<usize> = candidate_set(&state, &schedule).into_iter().collect();
        assert_eq!(c, vec![2, 3]);
    }

    #[test]
    fn candidate_set_empty_when_complete() {
        let state = SequenceState::from_response(0, 16, vec![Some(1), Some(2)], 3);
        let schedule = make_block_schedule(2, 2, 2).unwrap();
        assert!(candidate_set(&state, &schedule).is_empty());
    }

    #[test]
    fn candidate_set_respects_block_gating() {
        let schedule = make_block_schedule(4, 4, 2).unwrap();
        // Block 1 fully committed, block 2 masked: candidates are {3, 4}.
        let state = SequenceState::from_response(0, 16, vec![Some(1), Some(2), None, None], 3);
        let c: Vec<usize> = candidate_set(&state, &schedule).into_iter().collect();
        assert_eq!(c, vec![3, 4]);
        // Block 1 still has a mask: block 2 positions are ineligible.
        let state = SequenceState::from_response(0, 16, vec![None, Some(2), None, None], 2);
        let c: Vec<usize> = candidate_set(&state, &schedule).into_iter().collect();
        assert_eq!(c, vec![1]);
    }

    #[test]
    fn commit_fills_masked_positions() {
        let state = SequenceState::new(0, 16, 2);
        let next = state.commit(&vocab(), &BTreeMap::from([(1, 5)])).unwrap();
        assert_eq!(next.response(), &[Some(5), None]);
        assert_eq!(next.step(), 2);
        assert_eq!(state.response(), &[None, None]);

        let both = state
            .commit(&vocab(), &BTreeMap::from([(1, 5), (2, 7)]))
            .unwrap();
        assert_eq!(both.response(), &[Some(5), Some(7)]);
    }

    #[test]
    fn commit_rejects_overwrites() {
        let state = SequenceState::from_response(0, 16, vec![Some(5), None], 2);
        assert_eq!(
            state.commit(&vocab(), &BTreeMap::from([(1, 9)])),
            Err(CommitError::Overwrite {
                position: 1,
                existing: 5
            })
        );
    }

    #[test]
    fn commit_rejects_mask_and_out_of_range() {
        let state = SequenceState::new(0, 16, 2);
        assert_eq!(
            state.commit(&vocab(), &BTreeMap::from([(1, 16)])),
            Err(CommitError::MaskToken {
                position: 1,
                token: 16
            })
        );
        assert_eq!(
            state.commit(&vocab(), &BTreeMap::from([(3, 1)])),
            Err(CommitError::OutOfRange {
                position: 3,
                len: 2
            })
        );
        assert_eq!(
            state.commit(&vocab(), &BTreeMap::from([(1, 99)])),
            Err(CommitError::TokenOutOfVocabulary {
                position: 1,
                token: 99,
                size: 16
            })
        );
    }

    mod properties {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            /// Budgets of every constructible block schedule sum to the
            /// generation length and are uniform within blocks.
            #[test]
            fn schedule_budgets_exhaust_the_length(
                num_blocks in 1usize..8,
                steps_per_block in 1usize..8,
                budget in 1usize..8,
            ) {
                let block_length = steps_per_block * budget;
                let gen_length = num_blocks * block_length;
                let steps = num_blocks * steps_per_block;
                let schedule = make_block_schedule(gen_length, steps, block_length).unwrap();
                prop_assert_eq!(schedule.budgets().iter().sum::<usize>(), gen_length);
                prop_assert!(schedule.budgets().iter().all(|&k| k == budget));
            }
        }
    }

    #[test]
    fn commit_decrements_mask_count_by_map_size() {
        let state = SequenceState::new(0, 16, 8);
        let committed = BTreeMap::from([(2, 4), (5, 9), (8, 0)]);
        let next = state.commit(&vocab(), &committed).unwrap();
        assert_eq!(next.mask_count(), state.mask_count() - committed.len());
        // Untouched slots are identical.
        for position in 1..=8 {
            if !committed.contains_key(&position) {
                assert_eq!(next.token_at(position), state.token_at(position));
            }
        }
    }
}
