use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::TrainSet;
use crate::error::{Error, Result};

/// One speaker's support and query utterances, as indices into that
/// speaker's utterance list. The two sets are disjoint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MetaTask {
    pub speaker: usize,
    pub support: Vec<usize>,
    pub query: Vec<usize>,
}

/// Generator seed and the number of tasks drawn so far.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub counter: u64,
}

/// Seeded task stream over speakers with the given utterance counts.
///
/// Each task draws a speaker uniformly, then `n_support + n_query` distinct
/// utterances of that speaker; the first `n_support` form the support set.
/// ChaCha8 seeded from `seed` drives every draw.
#[derive(Clone, Debug)]
pub struct TaskSampler {
    counts: Vec<usize>,
    n_support: usize,
    n_query: usize,
    state: RngState,
    rng: ChaCha8Rng,
}

impl TaskSampler {
    pub fn new(counts: Vec<usize>, n_support: usize, n_query: usize, seed: u64) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::invalid("task sampling needs at least one speaker"));
        }
        let need = n_support + n_query;
        if let Some((i, &c)) = counts.iter().enumerate().find(|(_, &c)| c < need) {
            return Err(Error::invalid(format!(
                "speaker #{i} has {c} utterances; tasks need {need} ({n_support} support + {n_query} query)"
            )));
        }
        Ok(Self {
            counts,
            n_support,
            n_query,
            state: RngState { seed, counter: 0 },
            rng: ChaCha8Rng::seed_from_u64(seed),
        })
    }

    pub fn state(&self) -> RngState {
        self.state
    }

    pub fn next_task(&mut self) -> MetaTask {
        let speaker = self.rng.random_range(0..self.counts.len());
        let picked = index::sample(&mut self.rng, self.counts[speaker], self.n_support + self.n_query).into_vec();
        self.state.counter += 1;
        MetaTask {
            speaker,
            support: picked[..self.n_support].to_vec(),
            query: picked[self.n_support..].to_vec(),
        }
    }
}

impl Iterator for TaskSampler {
    type Item = MetaTask;

    fn next(&mut self) -> Option<MetaTask> {
        Some(self.next_task())
    }
}

/// Task stream over `data`; errors name the speaker that is too small.
pub fn make_tasks(data: &TrainSet, n_support: usize, n_query: usize, seed: u64) -> Result<TaskSampler> {
    let need = n_support + n_query;
    if let Some(s) = data.speakers.iter().find(|s| s.utterances.len() < need) {
        return Err(Error::invalid(format!(
            "speaker {} has {} utterances; tasks need {need} ({n_support} support + {n_query} query)",
            s.speaker_id,
            s.utterances.len()
        )));
    }
    TaskSampler::new(data.speakers.iter().map(|s| s.utterances.len()).collect(), n_support, n_query, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn one_speaker_counting() {
        let mut s = TaskSampler::new(vec![21], 1, 20, 0).unwrap();
        let t = s.next_task();
        assert_eq!((t.support.len(), t.query.len()), (1, 20));
        let all: HashSet<usize> = t.support.iter().chain(&t.query).copied().collect();
        assert_eq!(all.len(), 21);
        assert!(TaskSampler::new(vec![21, 20], 1, 20, 0).is_err());
    }

    #[test]
    fn seeded_sequence() {
        let a: Vec<MetaTask> = TaskSampler::new(vec![30, 25, 40], 1, 5, 9).unwrap().take(50).collect();
        let b: Vec<MetaTask> = TaskSampler::new(vec![30, 25, 40], 1, 5, 9).unwrap().take(50).collect();
        let c: Vec<MetaTask> = TaskSampler::new(vec![30, 25, 40], 1, 5, 10).unwrap().take(50).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn uniform_speakers() {
        let mut freq = [0usize; 4];
        for t in TaskSampler::new(vec![22; 4], 1, 20, 3).unwrap().take(10_000) {
            freq[t.speaker] += 1;
        }
        for f in freq {
            assert!((f as f64 / 1e4 - 0.25).abs() <= 0.02, "{freq:?}");
        }
    }
}
