use rand::Rng;

use crate::autodiff::Array;
use crate::error::{EraError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub done: bool,
}

impl Transition {
    fn validate(&self) -> Result<()> {
        if self.action.iter().any(|a| !(-1.0..=1.0).contains(a)) {
            return Err(EraError::Domain("transition action outside [-1, 1]".into()));
        }
        let finite = self
            .state
            .iter()
            .chain(&self.next_state)
            .chain(std::iter::once(&self.reward))
            .all(|x| x.is_finite());
        if !finite {
            return Err(EraError::Domain("transition has non-finite values".into()));
        }
        Ok(())
    }
}

/// A sampled minibatch laid out row-major.
#[derive(Debug, Clone)]
pub struct Batch {
    /// `[B, obs]`
    pub states: Array,
    /// `[B, act]`
    pub actions: Array,
    /// `[B]`
    pub rewards: Vec<f64>,
    /// `[B, obs]`
    pub next_states: Array,
    pub dones: Vec<bool>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.rewards.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rewards.is_empty()
    }

    pub fn from_transitions(items: &[&Transition]) -> Result<Self> {
        let first = items.first().ok_or(EraError::EmptyInput("batch"))?;
        let (obs, act) = (first.state.len(), first.action.len());
        let b = items.len();
        let mut states = Vec::with_capacity(b * obs);
        let mut next_states = Vec::with_capacity(b * obs);
        let mut actions = Vec::with_capacity(b * act);
        for t in items {
            if t.state.len() != obs || t.next_state.len() != obs || t.action.len() != act {
                return Err(EraError::DimensionMismatch {
                    context: "batch rows",
                    expected: obs + act,
                    got: t.state.len() + t.action.len(),
                });
            }
            states.extend_from_slice(&t.state);
            next_states.extend_from_slice(&t.next_state);
            actions.extend_from_slice(&t.action);
        }
        Ok(Self {
            states: Array::new(vec![b, obs], states)?,
            actions: Array::new(vec![b, act], actions)?,
            rewards: items.iter().map(|t| t.reward).collect(),
            next_states: Array::new(vec![b, obs], next_states)?,
            dones: items.iter().map(|t| t.done).collect(),
        })
    }
}

/// Fixed-capacity ring buffer; once full, the oldest transition is
/// overwritten.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: Vec<Transition>,
    capacity: usize,
    cursor: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Result<Self> {
        if capacity == 0 {
            return Err(EraError::InvalidConfig("replay capacity must be positive".into()));
        }
        Ok(Self {
            items: Vec::with_capacity(capacity.min(1 << 20)),
            capacity,
            cursor: 0,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        t.validate()?;
        if self.items.len() < self.capacity {
            self.items.push(t);
        } else {
            self.items[self.cursor] = t;
        }
        self.cursor = (self.cursor + 1) % self.capacity;
        Ok(())
    }

    /// Uniform indices with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.items.len() < n {
            return Err(EraError::InsufficientBuffer {
                have: self.items.len(),
                need: n,
            });
        }
        Ok((0..n).map(|_| rng.gen_range(0..self.items.len())).collect())
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Result<Batch> {
        let idx = self.sample_indices(n, rng)?;
        let rows: Vec<&Transition> = idx.iter().map(|&i| &self.items[i]).collect();
        Batch::from_transitions(&rows)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use statrs::distribution::{ChiSquared, ContinuousCDF};

    fn tr(i: usize) -> Transition {
        Transition {
            state: vec![i as f64, 0.0],
            action: vec![0.5],
            reward: -(i as f64),
            next_state: vec![i as f64 + 1.0, 0.0],
            done: i % 10 == 9,
        }
    }

    #[test]
    fn ring_overwrites_oldest() {
        let mut buf = ReplayBuffer::new(3).unwrap();
        for i in 0..5 {
            buf.push(tr(i)).unwrap();
        }
        assert_eq!(buf.len(), 3);
        let rewards: Vec<f64> = buf.items.iter().map(|t| t.reward).collect();
        assert_eq!(rewards, vec![-3.0, -4.0, -2.0]);
    }

    #[test]
    fn insufficient_buffer_is_an_error() {
        let mut buf = ReplayBuffer::new(10).unwrap();
        buf.push(tr(0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            buf.sample(2, &mut rng),
            Err(EraError::InsufficientBuffer { have: 1, need: 2 })
        ));
    }

    #[test]
    fn rejects_bad_transitions() {
        let mut buf = ReplayBuffer::new(4).unwrap();
        let mut t = tr(0);
        t.action = vec![1.5];
        assert!(buf.push(t).is_err());
        let mut t = tr(0);
        t.reward = f64::NAN;
        assert!(buf.push(t).is_err());
        assert!(buf.is_empty());
    }

    #[test]
    fn batch_layout() {
        let mut buf = ReplayBuffer::new(4).unwrap();
        buf.push(tr(9)).unwrap();
        buf.push(tr(9)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = buf.sample(2, &mut rng).unwrap();
        assert_eq!(b.states.shape(), &[2, 2]);
        assert_eq!(b.actions.shape(), &[2, 1]);
        assert_eq!(b.next_states.row(1), &[10.0, 0.0]);
        assert_eq!(b.dones, vec![true, true]);
    }

    #[test]
    fn sampling_is_uniform() {
        let n = 200;
        let mut buf = ReplayBuffer::new(n).unwrap();
        for i in 0..n + 37 {
            buf.push(tr(i)).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let draws = 200_000;
        let mut counts = vec![0usize; n];
        for _ in 0..draws / 100 {
            for i in buf.sample_indices(100, &mut rng).unwrap() {
                counts[i] += 1;
            }
        }
        let expected = draws as f64 / n as f64;
        let stat: f64 = counts
            .iter()
            .map(|&c| (c as f64 - expected).powi(2) / expected)
            .sum();
        let p = 1.0 - ChiSquared::new((n - 1) as f64).unwrap().cdf(stat);
        assert!(p > 1e-3, "chi-square {stat}, p = {p}");
    }
}
