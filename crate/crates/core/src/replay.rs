//! Transition storage: the agent's ring buffer, the expert demonstration
//! set, n-step window sampling, and JSON Lines demo files.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One environment step. `reward_env` is ground truth kept for evaluation
/// and analysis; learners never read it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub next_state: Vec<f64>,
    pub reward_env: f64,
    pub done: bool,
}

/// Consecutive transitions of one episode starting at a sampled index.
#[derive(Debug, Clone, PartialEq)]
pub struct NStepWindow {
    pub transitions: Vec<Transition>,
    /// `γ^len` where `len` is the number of transitions in the window.
    pub discount: f64,
}

impl NStepWindow {
    pub fn first(&self) -> &Transition {
        &self.transitions[0]
    }

    pub fn last(&self) -> &Transition {
        self.transitions.last().expect("windows are never empty")
    }
}

/// Fixed-capacity ring of transitions. Logical index 0 is the oldest item.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    items: Vec<Transition>,
    episode: Vec<u64>,
    capacity: usize,
    /// Physical slot of the next write once the ring is full.
    cursor: usize,
    current_episode: u64,
    state_dim: usize,
    action_dim: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize, state_dim: usize, action_dim: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self {
            items: Vec::with_capacity(capacity.min(1 << 16)),
            episode: Vec::with_capacity(capacity.min(1 << 16)),
            capacity,
            cursor: 0,
            current_episode: 0,
            state_dim,
            action_dim,
        }
    }

    /// A never-evicting buffer holding exactly `transitions`.
    pub fn from_transitions(transitions: Vec<Transition>) -> Result<Self> {
        let first = transitions
            .first()
            .ok_or_else(|| Error::InsufficientData("at least one transition required".into()))?;
        let mut buf = Self::new(transitions.len(), first.state.len(), first.action.len());
        for t in transitions {
            buf.push(t)?;
        }
        Ok(buf)
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

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    fn physical(&self, logical: usize) -> usize {
        if self.items.len() < self.capacity {
            logical
        } else {
            (self.cursor + logical) % self.capacity
        }
    }

    pub fn get(&self, logical: usize) -> &Transition {
        &self.items[self.physical(logical)]
    }

    pub fn episode_of(&self, logical: usize) -> u64 {
        self.episode[self.physical(logical)]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Transition> {
        (0..self.len()).map(move |i| self.get(i))
    }

    pub fn push(&mut self, t: Transition) -> Result<()> {
        if t.state.len() != self.state_dim
            || t.next_state.len() != self.state_dim
            || t.action.len() != self.action_dim
        {
            return Err(Error::Invalid(format!(
                "transition dims ({}, {}, {}) do not match buffer ({}, {})",
                t.state.len(),
                t.action.len(),
                t.next_state.len(),
                self.state_dim,
                self.action_dim
            )));
        }
        let done = t.done;
        if self.items.len() < self.capacity {
            self.items.push(t);
            self.episode.push(self.current_episode);
        } else {
            self.items[self.cursor] = t;
            self.episode[self.cursor] = self.current_episode;
            self.cursor = (self.cursor + 1) % self.capacity;
        }
        if done {
            self.current_episode += 1;
        }
        Ok(())
    }

    /// Uniform logical indices, with replacement.
    pub fn sample_indices<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<usize>> {
        if self.is_empty() {
            return Err(Error::InsufficientData("replay buffer is empty".into()));
        }
        Ok((0..batch).map(|_| rng.gen_range(0..self.len())).collect())
    }

    pub fn sample<R: Rng + ?Sized>(&self, batch: usize, rng: &mut R) -> Result<Vec<Transition>> {
        Ok(self
            .sample_indices(batch, rng)?
            .into_iter()
            .map(|i| self.get(i).clone())
            .collect())
    }

    /// The window of up to `n` transitions starting at `start`; it stops
    /// after a `done` transition or at the newest stored item.
    pub fn window(&self, start: usize, n: usize, gamma: f64) -> NStepWindow {
        let ep = self.episode_of(start);
        let mut transitions = Vec::with_capacity(n);
        let mut k = start;
        while transitions.len() < n && k < self.len() && self.episode_of(k) == ep {
            let t = self.get(k);
            transitions.push(t.clone());
            if t.done {
                break;
            }
            k += 1;
        }
        let discount = gamma.powi(transitions.len() as i32);
        NStepWindow {
            transitions,
            discount,
        }
    }

    /// `batch_size` uniformly started windows of length ≤ `n`. Rewards are not
    /// baked in; callers relabel each transition.
    pub fn sample_nstep<R: Rng + ?Sized>(
        &self,
        batch_size: usize,
        n: usize,
        gamma: f64,
        rng: &mut R,
    ) -> Result<Vec<NStepWindow>> {
        if n == 0 || batch_size == 0 {
            return Err(Error::Invalid("n-step sampling needs n ≥ 1 and batch ≥ 1".into()));
        }
        if self.len() < n {
            return Err(Error::InsufficientData(format!(
                "{} stored transitions, n-step needs at least {n}",
                self.len()
            )));
        }
        Ok(self
            .sample_indices(batch_size, rng)?
            .into_iter()
            .map(|i| self.window(i, n, gamma))
            .collect())
    }

    /// Inclusive logical range of the stored part of the episode containing `k`.
    pub fn episode_bounds(&self, k: usize) -> (usize, usize) {
        let ep = self.episode_of(k);
        let mut lo = k;
        while lo > 0 && self.episode_of(lo - 1) == ep {
            lo -= 1;
        }
        let mut hi = k;
        while hi + 1 < self.len() && self.episode_of(hi + 1) == ep {
            hi += 1;
        }
        (lo, hi)
    }
}

/// Writes demos as JSON Lines, preceded by `# {header}` when given.
pub fn save_demos(path: impl AsRef<Path>, transitions: &[Transition], header: Option<&str>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    if let Some(h) = header {
        writeln!(w, "# {h}").map_err(io)?;
    }
    for t in transitions {
        let line = serde_json::to_string(t)
            .map_err(|e| Error::Invalid(format!("cannot serialize transition: {e}")))?;
        writeln!(w, "{line}").map_err(io)?;
    }
    w.flush().map_err(io)?;
    Ok(())
}

/// Reads a JSON Lines demo file. Lines starting with `#` are comments.
pub fn load_demos(path: impl AsRef<Path>) -> Result<Vec<Transition>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    parse_demos(BufReader::new(file))
}

pub fn parse_demos<R: BufRead>(mut reader: R) -> Result<Vec<Transition>> {
    let mut out: Vec<Transition> = Vec::new();
    let mut offset = 0u64;
    let mut line_no = 0usize;
    let mut buf = String::new();
    loop {
        buf.clear();
        let read = reader.read_line(&mut buf).map_err(|e| Error::DemoParse {
            line: line_no + 1,
            offset,
            msg: e.to_string(),
        })?;
        if read == 0 {
            break;
        }
        line_no += 1;
        let line_start = offset;
        offset += read as u64;
        let text = buf.trim_end_matches(['\n', '\r']);
        if text.trim().is_empty() || text.starts_with('#') {
            continue;
        }
        let t: Transition = serde_json::from_str(text).map_err(|e| Error::DemoParse {
            line: line_no,
            offset: line_start + e.column().saturating_sub(1) as u64,
            msg: if e.is_eof() {
                format!("truncated record: {e}")
            } else {
                e.to_string()
            },
        })?;
        let bad = |msg: String| Error::DemoParse {
            line: line_no,
            offset: line_start,
            msg,
        };
        if let Some(first) = out.first() {
            if t.state.len() != first.state.len()
                || t.next_state.len() != first.state.len()
                || t.action.len() != first.action.len()
            {
                return Err(bad("dimensions differ from the first transition".into()));
            }
        } else if t.state.len() != t.next_state.len() {
            return Err(bad("state and next_state lengths differ".into()));
        }
        if !(0.0..=1.0).contains(&t.reward_env) {
            return Err(bad(format!("reward_env {} outside [0, 1]", t.reward_env)));
        }
        out.push(t);
    }
    if out.is_empty() {
        return Err(Error::InsufficientData("at least one transition required".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tr(x: f64, done: bool) -> Transition {
        Transition {
            state: vec![x],
            action: vec![0.0],
            next_state: vec![x + 1.0],
            reward_env: 0.5,
            done,
        }
    }

    #[test]
    fn full_buffer_evicts_oldest() {
        let mut b = ReplayBuffer::new(2, 1, 1);
        for i in 0..3 {
            b.push(tr(i as f64, false)).unwrap();
        }
        assert_eq!(b.len(), 2);
        assert_eq!(b.get(0).state, vec![1.0]);
        assert_eq!(b.get(1).state, vec![2.0]);
    }

    #[test]
    fn partial_fill_counts() {
        let mut b = ReplayBuffer::new(10, 1, 1);
        for i in 0..4 {
            b.push(tr(i as f64, false)).unwrap();
        }
        assert_eq!(b.len(), 4);
    }

    #[test]
    fn sampled_item_matches_pushed() {
        let mut b = ReplayBuffer::new(4, 1, 1);
        let t = tr(3.25, true);
        b.push(t.clone()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(b.sample(1, &mut rng).unwrap()[0], t);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let mut b = ReplayBuffer::new(4, 2, 1);
        assert!(b.push(tr(0.0, false)).is_err());
    }

    #[test]
    fn one_step_windows_are_plain_transitions() {
        let mut b = ReplayBuffer::new(8, 1, 1);
        for i in 0..5 {
            b.push(tr(i as f64, false)).unwrap();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for w in b.sample_nstep(20, 1, 0.99, &mut rng).unwrap() {
            assert_eq!(w.transitions.len(), 1);
            assert_eq!(w.discount, 0.99);
        }
    }

    #[test]
    fn windows_stop_at_episode_end() {
        let mut b = ReplayBuffer::new(8, 1, 1);
        b.push(tr(0.0, false)).unwrap();
        b.push(tr(1.0, true)).unwrap();
        b.push(tr(2.0, false)).unwrap();
        b.push(tr(3.0, false)).unwrap();
        b.push(tr(4.0, false)).unwrap();
        let w = b.window(0, 3, 0.99);
        assert_eq!(w.transitions.len(), 2);
        assert!((w.discount - 0.99f64.powi(2)).abs() < 1e-15);
        let full = b.window(2, 3, 0.99);
        assert_eq!(full.transitions.len(), 3);
        assert!((full.discount - 0.970299).abs() < 1e-15);
        // newest item: nothing after it yet
        assert_eq!(b.window(4, 3, 0.99).transitions.len(), 1);
    }

    #[test]
    fn too_little_data_rejected() {
        let mut b = ReplayBuffer::new(8, 1, 1);
        b.push(tr(0.0, false)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            b.sample_nstep(4, 3, 0.99, &mut rng),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn episode_bounds_follow_done_flags() {
        let mut b = ReplayBuffer::new(16, 1, 1);
        for i in 0..9 {
            b.push(tr(i as f64, i % 3 == 2)).unwrap();
        }
        assert_eq!(b.episode_bounds(4), (3, 5));
        assert_eq!(b.episode_bounds(0), (0, 2));
    }

    #[test]
    fn empty_and_truncated_demo_files() {
        let err = parse_demos("# header only\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("at least one transition required"));
        let good = serde_json::to_string(&tr(1.0, false)).unwrap();
        let text = format!("{good}\n{}", &good[..good.len() - 7]);
        match parse_demos(text.as_bytes()).unwrap_err() {
            Error::DemoParse { line, offset, .. } => {
                assert_eq!(line, 2);
                assert!(offset >= good.len() as u64 + 1);
            }
            e => panic!("unexpected {e}"),
        }
    }
}
