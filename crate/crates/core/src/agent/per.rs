use super::AgentError;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::sync::Arc;

/// One transition. Both reward heads and both substates are stored so the
/// same buffer serves every critic pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Experience {
    pub s_c: Vec<f64>,
    pub s_o: Vec<f64>,
    pub action: [f64; 6],
    pub r_c: f64,
    pub r_o: f64,
    pub next_s_c: Vec<f64>,
    pub next_s_o: Vec<f64>,
    pub terminal: bool,
    pub episode: u64,
}

/// FIFO ring of shared experiences.
#[derive(Clone, Debug, Default)]
pub struct ReplayRing {
    capacity: usize,
    items: VecDeque<Arc<Experience>>,
}

impl ReplayRing {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: VecDeque::new(),
        }
    }

    pub fn push(&mut self, e: Arc<Experience>) {
        if self.capacity == 0 {
            return;
        }
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(e);
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

    pub fn get(&self, i: usize) -> &Arc<Experience> {
        &self.items[i]
    }

    fn sample<R: Rng>(&self, rng: &mut R) -> Arc<Experience> {
        self.items[rng.random_range(0..self.items.len())].clone()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PerConfig {
    /// When false the priority buffer is never filled and λ stays 0; ψ is
    /// still tracked per interval.
    pub enabled: bool,
    pub capacity: usize,
    pub priority_capacity: usize,
    pub interval: usize,
    pub lambda_max: f64,
}

impl Default for PerConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            capacity: 1_000_000,
            priority_capacity: 200_000,
            interval: 20,
            lambda_max: 0.5,
        }
    }
}

impl PerConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.capacity == 0 || self.interval == 0 {
            return Err("replay capacity and PER interval must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.lambda_max) {
            return Err(format!("lambda_max {} outside [0, 1]", self.lambda_max));
        }
        Ok(())
    }
}

/// Priority sampling rate as a function of the interval success rate:
/// `λ_max` below 0.4, `2.5 λ_max (0.8 − ψ)` on `[0.4, 0.8]`, 0 above.
pub fn per_lambda(psi: f64, lambda_max: f64) -> f64 {
    if psi < 0.4 {
        lambda_max
    } else if psi <= 0.8 {
        2.5 * lambda_max * (0.8 - psi)
    } else {
        0.0
    }
}

/// Summary of one finished episode held until the next interval update.
#[derive(Clone, Debug)]
pub struct EpisodeRecord {
    pub episode: u64,
    pub success: bool,
    pub total_return: f64,
    pub experiences: Vec<Arc<Experience>>,
}

/// Result of one interval update.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IntervalReport {
    pub psi: f64,
    pub lambda: f64,
    pub transferred_episodes: Vec<u64>,
    pub transferred_experiences: usize,
    pub priority_len: usize,
}

#[derive(Clone, Debug)]
pub struct PerState {
    pub config: PerConfig,
    pub main: ReplayRing,
    pub priority: ReplayRing,
    pub lambda: f64,
    pub psi: f64,
    ledger: Vec<EpisodeRecord>,
    current: Vec<Arc<Experience>>,
    /// Samples requested from the priority buffer that had to come from the
    /// main buffer instead.
    pub shortfall: u64,
}

impl PerState {
    pub fn new(config: PerConfig) -> Self {
        Self {
            main: ReplayRing::new(config.capacity),
            priority: ReplayRing::new(config.priority_capacity),
            lambda: if config.enabled { config.lambda_max } else { 0.0 },
            psi: 0.0,
            config,
            ledger: Vec::new(),
            current: Vec::new(),
            shortfall: 0,
        }
    }

    pub fn ledger(&self) -> &[EpisodeRecord] {
        &self.ledger
    }

    /// Stores a transition of the running episode.
    pub fn push(&mut self, e: Experience) {
        let e = Arc::new(e);
        self.main.push(e.clone());
        self.current.push(e);
    }

    /// Closes the running episode. Returns the interval report when this
    /// episode completes an interval.
    pub fn end_episode(&mut self, episode: u64, success: bool, total_return: f64) -> Option<IntervalReport> {
        self.ledger.push(EpisodeRecord {
            episode,
            success,
            total_return,
            experiences: std::mem::take(&mut self.current),
        });
        (self.ledger.len() == self.config.interval).then(|| {
            let records = std::mem::take(&mut self.ledger);
            self.interval_update(records)
        })
    }

    /// Ranks the interval's episodes (successful first, then by return,
    /// earlier first on ties), updates ψ and λ, and copies the experiences of
    /// the top ⌈E_p/2⌉ episodes into the priority buffer.
    pub fn interval_update(&mut self, mut records: Vec<EpisodeRecord>) -> IntervalReport {
        let n = records.len();
        let successes = records.iter().filter(|r| r.success).count();
        self.psi = if n == 0 { 0.0 } else { successes as f64 / n as f64 };
        self.lambda = if self.config.enabled {
            per_lambda(self.psi, self.config.lambda_max)
        } else {
            0.0
        };
        records.sort_by(|a, b| {
            b.success
                .cmp(&a.success)
                .then(b.total_return.total_cmp(&a.total_return))
        });
        let top = n.div_ceil(2);
        let mut transferred_episodes = Vec::with_capacity(top);
        let mut transferred_experiences = 0;
        if self.config.enabled {
            for r in records.iter().take(top) {
                transferred_episodes.push(r.episode);
                transferred_experiences += r.experiences.len();
                for e in &r.experiences {
                    self.priority.push(e.clone());
                }
            }
        }
        IntervalReport {
            psi: self.psi,
            lambda: self.lambda,
            transferred_episodes,
            transferred_experiences,
            priority_len: self.priority.len(),
        }
    }

    /// `⌊λN⌋` draws from the priority buffer (as many as it holds) and the
    /// rest from the main buffer, uniformly with replacement.
    pub fn sample<R: Rng>(&mut self, n: usize, rng: &mut R) -> Result<Vec<Arc<Experience>>, AgentError> {
        if self.main.len() < n || n == 0 {
            return Err(AgentError::InsufficientData {
                needed: n.max(1),
                available: self.main.len(),
            });
        }
        let wanted = (self.lambda * n as f64).floor() as usize;
        let from_priority = if self.priority.is_empty() { 0 } else { wanted };
        self.shortfall += (wanted - from_priority) as u64;
        let mut out = Vec::with_capacity(n);
        for _ in 0..from_priority {
            out.push(self.priority.sample(rng));
        }
        for _ in from_priority..n {
            out.push(self.main.sample(rng));
        }
        Ok(out)
    }
}
