//! Shared Poisson clocks.
//!
//! Every site `j` carries three independent Poisson streams of
//! intensities `beta0`, `beta1 - beta0` and `beta2 - beta1`. They are
//! realized as one merged stream of intensity `beta2` whose events carry an
//! independent mark selecting the sub-stream. A site's event sequence is a
//! pure function of `(seed, replica, site)`, so any number of processes can
//! be driven by the same clocks without storing an event log.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::model::{BetaParams, RateLevel};

/// Sub-stream of a site clock.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Stream {
    S0,
    S1,
    S2,
}

impl Stream {
    pub const ALL: [Stream; 3] = [Stream::S0, Stream::S1, Stream::S2];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Whether an event of this stream makes a column at `level` grow:
    /// `S0` always, `S1` unless the column is at `beta0`, `S2` only at `beta2`.
    #[inline]
    pub fn fires_at(self, level: RateLevel) -> bool {
        match self {
            Stream::S0 => true,
            Stream::S1 => level >= RateLevel::Mid,
            Stream::S2 => level == RateLevel::High,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClockEvent {
    pub time: f64,
    /// 1-based site index.
    pub site: usize,
    pub stream: Stream,
    /// Position of this event in its site's sequence.
    pub index: u64,
}

/// Keyed source of site clocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ClockSource {
    seed: u64,
    replica: u64,
}

impl ClockSource {
    pub fn new(seed: u64) -> Self {
        Self { seed, replica: 0 }
    }

    /// Clocks of an independent replica under the same seed.
    pub fn replica(&self, replica: u64) -> Self {
        Self {
            seed: self.seed,
            replica,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn replica_index(&self) -> u64 {
        self.replica
    }

    /// A generator keyed by `(seed, replica, lane)`; ChaCha's block
    /// counter supplies the event index.
    pub fn keyed_rng(&self, lane: u64) -> ChaCha8Rng {
        let mut key = [0u8; 32];
        key[..8].copy_from_slice(&self.seed.to_le_bytes());
        key[8..16].copy_from_slice(&self.replica.to_le_bytes());
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(lane);
        rng
    }

    pub fn site_clock(&self, site: usize, betas: &BetaParams) -> SiteClock {
        SiteClock::new(self.keyed_rng(site as u64), site, betas)
    }

    /// Merged, time-ordered events of sites `1..=sites`.
    pub fn events(&self, sites: usize, betas: &BetaParams) -> EventStream {
        EventStream::new((1..=sites).map(|j| self.site_clock(j, betas)).collect())
    }
}

/// Marked Poisson stream of one site.
#[derive(Debug, Clone)]
pub struct SiteClock {
    rng: ChaCha8Rng,
    site: usize,
    time: f64,
    index: u64,
    total: f64,
    cut_s0: f64,
    cut_s1: f64,
}

impl SiteClock {
    fn new(rng: ChaCha8Rng, site: usize, betas: &BetaParams) -> Self {
        let total = betas.beta2();
        Self {
            rng,
            site,
            time: 0.0,
            index: 0,
            total,
            cut_s0: betas.beta0() / total,
            cut_s1: betas.beta1() / total,
        }
    }

    pub fn site(&self) -> usize {
        self.site
    }
}

impl Iterator for SiteClock {
    type Item = ClockEvent;

    fn next(&mut self) -> Option<ClockEvent> {
        let gap: f64 = self.rng.sample(Exp1);
        self.time += gap / self.total;
        let mark: f64 = self.rng.random();
        let stream = if mark < self.cut_s0 {
            Stream::S0
        } else if mark < self.cut_s1 {
            Stream::S1
        } else {
            Stream::S2
        };
        let ev = ClockEvent {
            time: self.time,
            site: self.site,
            stream,
            index: self.index,
        };
        self.index += 1;
        Some(ev)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Pending(ClockEvent);

impl Eq for Pending {}

impl PartialOrd for Pending {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Pending {
    // ties in time are broken by site index
    fn cmp(&self, other: &Self) -> Ordering {
        self.0
            .time
            .total_cmp(&other.0.time)
            .then(self.0.site.cmp(&other.0.site))
    }
}

/// Superposition of several site clocks in time order.
#[derive(Debug, Clone)]
pub struct EventStream {
    clocks: Vec<SiteClock>,
    heap: BinaryHeap<Reverse<Pending>>,
}

impl EventStream {
    fn new(mut clocks: Vec<SiteClock>) -> Self {
        let heap = clocks
            .iter_mut()
            .filter_map(|c| c.next().map(|e| Reverse(Pending(e))))
            .collect();
        Self { clocks, heap }
    }

    /// Time of the next event without consuming it.
    pub fn peek_time(&self) -> Option<f64> {
        self.heap.peek().map(|Reverse(p)| p.0.time)
    }

    /// Next event if it happens no later than `horizon`.
    pub fn next_until(&mut self, horizon: f64) -> Option<ClockEvent> {
        match self.peek_time() {
            Some(t) if t <= horizon => self.next(),
            _ => None,
        }
    }
}

impl Iterator for EventStream {
    type Item = ClockEvent;

    fn next(&mut self) -> Option<ClockEvent> {
        let Reverse(Pending(ev)) = self.heap.pop()?;
        let clock = &mut self.clocks[ev.site - 1];
        if let Some(nxt) = clock.next() {
            self.heap.push(Reverse(Pending(nxt)));
        }
        Some(ev)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn betas() -> BetaParams {
        BetaParams::new(1.0, 2.0, 3.0).unwrap()
    }

    #[test]
    fn same_key_same_events() {
        let a: Vec<_> = ClockSource::new(9).events(3, &betas()).take(500).collect();
        let b: Vec<_> = ClockSource::new(9).events(3, &betas()).take(500).collect();
        assert_eq!(a, b);
        let c: Vec<_> = ClockSource::new(9).replica(1).events(3, &betas()).take(500).collect();
        assert_ne!(a, c);
    }

    #[test]
    fn site_stream_independent_of_site_count() {
        let b = betas();
        let few: Vec<_> = ClockSource::new(4)
            .events(2, &b)
            .filter(|e| e.site == 2)
            .take(200)
            .collect();
        let many: Vec<_> = ClockSource::new(4)
            .events(6, &b)
            .filter(|e| e.site == 2)
            .take(200)
            .collect();
        assert_eq!(few, many);
    }

    #[test]
    fn events_are_time_ordered() {
        let evs: Vec<_> = ClockSource::new(1).events(5, &betas()).take(5000).collect();
        assert!(evs.windows(2).all(|w| w[0].time <= w[1].time));
    }

    #[test]
    fn sub_stream_intensities() {
        let b = betas();
        let horizon = 20_000.0;
        let mut counts = [0u64; 3];
        let mut clock = ClockSource::new(77).site_clock(1, &b);
        for ev in clock.by_ref() {
            if ev.time > horizon {
                break;
            }
            counts[ev.stream.index()] += 1;
        }
        // each count is Poisson; allow 4 standard deviations
        for (count, rate) in counts.iter().zip([1.0, 1.0, 1.0]) {
            let mean = rate * horizon;
            assert!((*count as f64 - mean).abs() < 4.0 * mean.sqrt(), "{counts:?}");
        }
    }

    #[test]
    fn firing_rules() {
        use RateLevel::*;
        assert!(Stream::S0.fires_at(Low));
        assert!(!Stream::S1.fires_at(Low));
        assert!(Stream::S1.fires_at(Mid));
        assert!(Stream::S1.fires_at(High));
        assert!(!Stream::S2.fires_at(Mid));
        assert!(Stream::S2.fires_at(High));
    }
}
