use chatfuse_core::corpus::{Dialog, GoalCard};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Draws single-domain goal cards from a fixed pool.
#[derive(Debug, Clone)]
pub struct GoalSampler {
    cards: Vec<GoalCard>,
}

impl GoalSampler {
    /// Keeps the single-domain cards; `None` when there are none.
    pub fn new(cards: impl IntoIterator<Item = GoalCard>) -> Option<Self> {
        let cards: Vec<GoalCard> = cards.into_iter().filter(|c| c.domain_count() == 1).collect();
        (!cards.is_empty()).then_some(GoalSampler { cards })
    }

    /// Single-domain cards from each dialog's goal, split per domain.
    pub fn from_dialogs(dialogs: &[Dialog]) -> Option<Self> {
        Self::new(dialogs.iter().filter_map(|d| d.goal_card.as_ref()).flat_map(|g| {
            g.domains.iter().map(|(d, goal)| {
                let mut card = GoalCard::default();
                card.domains.insert(d.clone(), goal.clone());
                card
            })
        }))
    }

    /// Deterministic in `(seed, draw)`.
    pub fn sample(&self, seed: u64, draw: u64) -> GoalCard {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ draw.wrapping_mul(0x9e37_79b9_7f4a_7c15));
        self.cards[rng.gen_range(0..self.cards.len())].clone()
    }

    pub fn len(&self) -> usize {
        self.cards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cards.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use chatfuse_core::fixtures::tod_corpus;

    #[test]
    fn samples_are_single_domain() {
        let s = GoalSampler::from_dialogs(&tod_corpus(20, 1)).unwrap();
        for i in 0..100 {
            assert_eq!(s.sample(4, i).domain_count(), 1);
        }
        assert_eq!(s.sample(4, 7), s.sample(4, 7));
        assert!(GoalSampler::new(Vec::new()).is_none());
    }
}
