//! Benchmark environments: the hypergrid with its indicator-product reward
//! and fixed-length bit sequences with an edit-distance reward, plus the
//! mode-set and test-set generators for the latter.

use rand::seq::SliceRandom;
use rand::Rng;
use thiserror::Error;

use crate::dag::{DagSpec, StateId};

#[derive(Debug, Error)]
pub enum EnvError {
    #[error("coordinate {coord} out of bounds for side length {side}")]
    OutOfBounds { coord: usize, side: usize },
    #[error("state count {count} exceeds enumeration cap {cap}")]
    CapExceeded { count: u128, cap: u128 },
    #[error("mode set is empty")]
    EmptyModeSet,
    #[error("requested {requested} modes but only {available} distinct combinations exist")]
    TooManyModes { requested: u64, available: u64 },
    #[error("invalid config: {0}")]
    BadConfig(String),
}

/// Hypergrid environment parameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct HypergridConfig {
    /// Side length H >= 2.
    pub h: usize,
    /// Dimension D >= 1.
    pub d: usize,
    /// Base reward floor.
    pub r0: f64,
}

impl HypergridConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        if self.h < 2 {
            return Err(EnvError::BadConfig("H must be >= 2".into()));
        }
        if self.d < 1 {
            return Err(EnvError::BadConfig("D must be >= 1".into()));
        }
        if self.r0 < 0.0 {
            return Err(EnvError::BadConfig("R0 must be >= 0".into()));
        }
        Ok(())
    }
}

/// Reward at a grid cell: R0 plus indicator products over
/// |s^d/(H-1) - 0.5| falling in (0.25, 0.5] (plateau, +0.5) and
/// (0.3, 0.4) (peak, +2). Interval boundaries are exact: half-open and open
/// respectively.
pub fn hypergrid_reward(coords: &[usize], cfg: &HypergridConfig) -> Result<f64, EnvError> {
    debug_assert_eq!(coords.len(), cfg.d);
    let mut plateau = 1.0;
    let mut peak = 1.0;
    for &c in coords {
        if c >= cfg.h {
            return Err(EnvError::OutOfBounds { coord: c, side: cfg.h });
        }
        let a = (c as f64 / (cfg.h - 1) as f64 - 0.5).abs();
        plateau *= if a > 0.25 && a <= 0.5 { 1.0 } else { 0.0 };
        peak *= if a > 0.3 && a < 0.4 { 1.0 } else { 0.0 };
    }
    Ok(cfg.r0 + 0.5 * plateau + 2.0 * peak)
}

/// Cell coordinates -> nonterminal state id (mixed-radix, origin = 0).
pub fn hypergrid_state_id(coords: &[usize], cfg: &HypergridConfig) -> StateId {
    let mut id = 0;
    for d in (0..cfg.d).rev() {
        id = id * cfg.h + coords[d];
    }
    id
}

fn hypergrid_coords(mut id: StateId, cfg: &HypergridConfig) -> Vec<usize> {
    let mut coords = vec![0; cfg.d];
    for c in coords.iter_mut() {
        *c = id % cfg.h;
        id /= cfg.h;
    }
    coords
}

/// Build the enumerated hypergrid DAG: H^D cells with coordinate-increment
/// actions plus a stop action into a dedicated terminal state per cell.
/// Returns the spec and the per-state reward table (zero at nonterminals).
pub fn build_hypergrid_spec(
    cfg: &HypergridConfig,
    cap: u128,
) -> Result<(DagSpec, Vec<f64>), EnvError> {
    cfg.validate()?;
    let cells = (cfg.h as u128).pow(cfg.d as u32);
    if cells * 2 > cap {
        return Err(EnvError::CapExceeded { count: cells * 2, cap });
    }
    let cells = cells as usize;
    let n = cells * 2;
    let mut children = vec![Vec::new(); n];
    let mut terminal = vec![false; n];
    let mut encoding = vec![Vec::new(); n];
    let mut rewards = vec![0.0; n];
    for id in 0..cells {
        let coords = hypergrid_coords(id, cfg);
        for d in 0..cfg.d {
            if coords[d] + 1 < cfg.h {
                let mut next = coords.clone();
                next[d] += 1;
                children[id].push(hypergrid_state_id(&next, cfg));
            }
        }
        // Stop action last; terminal ids start above all cell ids.
        children[id].push(cells + id);
        terminal[cells + id] = true;
        rewards[cells + id] = hypergrid_reward(&coords, cfg)?;
        let mut enc = vec![0.0; cfg.d * cfg.h];
        for d in 0..cfg.d {
            enc[d * cfg.h + coords[d]] = 1.0;
        }
        encoding[cells + id] = enc.clone();
        encoding[id] = enc;
    }
    Ok((DagSpec::from_children(children, terminal, encoding), rewards))
}

/// Bit-sequence environment parameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BitSeqConfig {
    /// Total sequence length in bits.
    pub n: usize,
    /// Bits appended per action; must divide n.
    pub k: usize,
    /// Symbol length for mode construction; must divide n.
    pub b: usize,
    /// Number of modes |M|.
    pub num_modes: u64,
    /// Mode-capture radius.
    pub delta: usize,
    /// RNG seed for mode/test-set generation.
    pub seed: u64,
}

impl BitSeqConfig {
    /// Symbols per mode, n/b.
    pub fn m(&self) -> usize {
        self.n / self.b
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        if self.n == 0 || self.k == 0 || self.b == 0 {
            return Err(EnvError::BadConfig("n, k, b must be positive".into()));
        }
        if self.n % self.k != 0 {
            return Err(EnvError::BadConfig("k must divide n".into()));
        }
        if self.n % self.b != 0 {
            return Err(EnvError::BadConfig("b must divide n".into()));
        }
        Ok(())
    }
}

/// The fixed symbol alphabet used to assemble modes (b = 8).
pub const MODE_SYMBOLS: [&str; 5] = ["00000000", "11111111", "11110000", "00001111", "00111100"];

/// Reference sequences the reward peaks at.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModeSet {
    pub modes: Vec<String>,
}

/// Unit-cost Levenshtein distance via the standard two-row DP.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, &ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// exp(-min edit distance to any mode).
pub fn bitseq_reward(x: &str, modes: &ModeSet) -> Result<f64, EnvError> {
    let d = modes
        .modes
        .iter()
        .map(|y| edit_distance(x, y))
        .min()
        .ok_or(EnvError::EmptyModeSet)?;
    Ok((-(d as f64)).exp())
}

/// Draw `num_modes` distinct modes, each a concatenation of m symbols drawn
/// uniformly from the fixed alphabet; duplicates are resampled.
pub fn generate_modes<R: Rng>(cfg: &BitSeqConfig, rng: &mut R) -> Result<ModeSet, EnvError> {
    cfg.validate()?;
    let m = cfg.m();
    if cfg.b > 8 {
        return Err(EnvError::BadConfig("symbol alphabet is 8 bits wide".into()));
    }
    // Symbols are the fixed 8-bit alphabet, truncated to b bits and deduped
    // when b < 8.
    let mut symbols: Vec<&str> = Vec::new();
    for s in MODE_SYMBOLS {
        let t = &s[..cfg.b];
        if !symbols.contains(&t) {
            symbols.push(t);
        }
    }
    let available = (symbols.len() as u64).checked_pow(m as u32).unwrap_or(u64::MAX);
    if cfg.num_modes > available {
        return Err(EnvError::TooManyModes {
            requested: cfg.num_modes,
            available,
        });
    }
    let mut modes: Vec<String> = Vec::with_capacity(cfg.num_modes as usize);
    while (modes.len() as u64) < cfg.num_modes {
        let cand: String = (0..m).map(|_| *symbols.choose(rng).unwrap()).collect();
        if !modes.contains(&cand) {
            modes.push(cand);
        }
    }
    Ok(ModeSet { modes })
}

/// Approximately reward-uniform test set: for every mode and every i in
/// [0, n), flip i distinct random positions and record the resulting reward.
pub fn generate_test_set<R: Rng>(
    modes: &ModeSet,
    cfg: &BitSeqConfig,
    rng: &mut R,
) -> Result<Vec<(String, f64)>, EnvError> {
    let mut out = Vec::with_capacity(modes.modes.len() * cfg.n);
    for mode in &modes.modes {
        for i in 0..cfg.n {
            let mut bits: Vec<u8> = mode.bytes().collect();
            let positions: Vec<usize> =
                rand::seq::index::sample(rng, cfg.n, i).into_iter().collect();
            for p in positions {
                bits[p] = if bits[p] == b'0' { b'1' } else { b'0' };
            }
            let s = String::from_utf8(bits).expect("bits are ascii");
            let r = bitseq_reward(&s, modes)?;
            out.push((s, r));
        }
    }
    Ok(out)
}

fn word_bits(value: usize, k: usize) -> String {
    (0..k)
        .rev()
        .map(|i| if value >> i & 1 == 1 { '1' } else { '0' })
        .collect()
}

/// Offset of the first state at prefix level t (t words placed).
fn level_offset(t: usize, k: usize) -> usize {
    // sum_{i<t} 2^(k*i) = (2^(k*t) - 1) / (2^k - 1)
    ((1usize << (k * t)) - 1) / ((1 << k) - 1)
}

/// Build the prefix-tree DAG of k-bit words: states are prefixes whose length
/// is a multiple of k, terminals are the full-length sequences. Returns the
/// spec and per-state rewards (exp(-min edit distance to a mode) at
/// terminals).
pub fn build_bitseq_spec(
    cfg: &BitSeqConfig,
    modes: &ModeSet,
    cap: u128,
) -> Result<(DagSpec, Vec<f64>), EnvError> {
    cfg.validate()?;
    let steps = cfg.n / cfg.k;
    let total: u128 = (0..=steps).map(|t| 1u128 << (cfg.k * t)).sum();
    if total > cap {
        return Err(EnvError::CapExceeded { count: total, cap });
    }
    let n_states = total as usize;
    let branching = 1usize << cfg.k;
    let mut children = vec![Vec::new(); n_states];
    let mut terminal = vec![false; n_states];
    let mut encoding = vec![Vec::new(); n_states];
    let mut rewards = vec![0.0; n_states];
    for t in 0..=steps {
        let off = level_offset(t, cfg.k);
        let count = 1usize << (cfg.k * t);
        for v in 0..count {
            let id = off + v;
            if t < steps {
                let child_off = level_offset(t + 1, cfg.k);
                children[id] = (0..branching).map(|w| child_off + v * branching + w).collect();
            } else {
                terminal[id] = true;
                rewards[id] = bitseq_reward(&word_bits(v, cfg.n), modes)?;
            }
            // Fixed-length encoding: one entry per word position; filled
            // positions map the word id into (-1, 1), unfilled are 0.
            let mut enc = vec![0.0; steps];
            for pos in 0..t {
                let w = (v >> (cfg.k * (t - 1 - pos))) & (branching - 1);
                enc[pos] = (2.0 * w as f64 + 1.0) / branching as f64 - 1.0;
            }
            encoding[id] = enc;
        }
    }
    Ok((DagSpec::from_children(children, terminal, encoding), rewards))
}

/// Bit string of a terminal state id in a spec built by [`build_bitseq_spec`].
pub fn bitseq_string_of_state(id: StateId, cfg: &BitSeqConfig) -> String {
    let steps = cfg.n / cfg.k;
    let off = level_offset(steps, cfg.k);
    word_bits(id - off, cfg.n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn grid(h: usize, d: usize, r0: f64) -> HypergridConfig {
        HypergridConfig { h, d, r0 }
    }

    #[test]
    fn reward_peak_plateau_trough() {
        let cfg = grid(8, 2, 0.1);
        assert_eq!(hypergrid_reward(&[6, 6], &cfg).unwrap(), 2.6);
        assert_eq!(hypergrid_reward(&[0, 0], &cfg).unwrap(), 0.6);
        // |3/7 - 0.5| ~ 0.071 lies in neither interval.
        assert_eq!(hypergrid_reward(&[3, 3], &cfg).unwrap(), 0.1);
    }

    #[test]
    fn reward_out_of_bounds() {
        assert!(hypergrid_reward(&[8, 0], &grid(8, 2, 0.1)).is_err());
    }

    #[test]
    fn reward_symmetries() {
        // Permutation and per-axis reflection invariance.
        let cfg = grid(7, 2, 0.05);
        for a in 0..7 {
            for b in 0..7 {
                let r = hypergrid_reward(&[a, b], &cfg).unwrap();
                assert_eq!(r, hypergrid_reward(&[b, a], &cfg).unwrap());
                assert_eq!(r, hypergrid_reward(&[6 - a, b], &cfg).unwrap());
            }
        }
    }

    #[test]
    fn reward_sum_matches_cell_census() {
        // With R0 = 0, total reward = 0.5 * plateau cells + 2.5 * peak cells.
        let cfg = grid(8, 2, 0.0);
        let mut total = 0.0;
        let mut plateau = 0usize;
        let mut peak = 0usize;
        for a in 0..8 {
            for b in 0..8 {
                let in_band = |c: usize, lo: f64, hi: f64, closed: bool| {
                    let x = (c as f64 / 7.0 - 0.5).abs();
                    x > lo && (x < hi || (closed && x == hi))
                };
                let p = in_band(a, 0.25, 0.5, true) && in_band(b, 0.25, 0.5, true);
                let q = in_band(a, 0.3, 0.4, false) && in_band(b, 0.3, 0.4, false);
                if p && q {
                    peak += 1;
                } else if p {
                    plateau += 1;
                }
                total += hypergrid_reward(&[a, b], &cfg).unwrap();
            }
        }
        assert!((total - (0.5 * plateau as f64 + 2.5 * peak as f64)).abs() < 1e-12);
    }

    #[test]
    fn tiny_grid_structure() {
        let (spec, rewards) = build_hypergrid_spec(&grid(2, 1, 0.1), 1000).unwrap();
        assert_eq!(spec.num_states, 4);
        assert_eq!(spec.children[0], vec![1, 2]);
        assert_eq!(spec.children[1], vec![3]);
        assert!(spec.terminal[2] && spec.terminal[3]);
        assert!(rewards[2] > 0.0 && rewards[3] > 0.0);
        assert!(crate::dag::validate_dag(&spec).is_empty());
    }

    #[test]
    fn grid_sizes() {
        let (spec, _) = build_hypergrid_spec(&grid(8, 2, 0.1), 1 << 20).unwrap();
        assert_eq!(spec.num_states, 128);
        let (spec4, _) = build_hypergrid_spec(&grid(8, 4, 0.1), 1 << 20).unwrap();
        assert_eq!(spec4.num_states, 2 * 4096);
        assert!(build_hypergrid_spec(&grid(8, 4, 0.1), 100).is_err());
    }

    #[test]
    fn grid_path_counts_are_binomial() {
        // Non-stop paths from origin to (a, b) = C(a + b, a); the stop edge
        // into the terminal for (a, b) preserves that count.
        let cfg = grid(4, 2, 0.1);
        let (spec, _) = build_hypergrid_spec(&cfg, 1 << 16).unwrap();
        let counts = crate::dag::count_trajectories(&spec).unwrap();
        let binom = |n: u128, k: u128| (0..k).fold(1u128, |acc, i| acc * (n - i) / (i + 1));
        for a in 0..4usize {
            for b in 0..4usize {
                let term = 16 + hypergrid_state_id(&[a, b], &cfg);
                assert_eq!(counts[term], binom((a + b) as u128, a.min(b) as u128));
            }
        }
    }

    #[test]
    fn edit_distance_basics() {
        assert_eq!(edit_distance("", "abc"), 3);
        assert_eq!(edit_distance("0101", "0101"), 0);
        assert_eq!(edit_distance("kitten", "sitting"), 3);
    }

    /// Exhaustive-recursion oracle for short strings.
    fn edit_distance_slow(a: &[char], b: &[char]) -> usize {
        match (a.split_first(), b.split_first()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((ca, ra)), Some((cb, rb))) => {
                let sub = edit_distance_slow(ra, rb) + usize::from(ca != cb);
                let del = edit_distance_slow(ra, b) + 1;
                let ins = edit_distance_slow(a, rb) + 1;
                sub.min(del).min(ins)
            }
        }
    }

    #[test]
    fn edit_distance_matches_recursion_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        for _ in 0..50 {
            let la = rng.gen_range(0..6);
            let lb = rng.gen_range(0..6);
            let mk = |rng: &mut ChaCha12Rng, l: usize| -> String {
                (0..l).map(|_| if rng.gen::<bool>() { '1' } else { '0' }).collect()
            };
            let a = mk(&mut rng, la);
            let b = mk(&mut rng, lb);
            let ac: Vec<char> = a.chars().collect();
            let bc: Vec<char> = b.chars().collect();
            assert_eq!(edit_distance(&a, &b), edit_distance_slow(&ac, &bc));
        }
    }

    #[test]
    fn bitseq_reward_examples() {
        let modes = ModeSet { modes: vec!["00000000".into()] };
        assert_eq!(bitseq_reward("00000000", &modes).unwrap(), 1.0);
        assert!((bitseq_reward("00000001", &modes).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
        assert!((bitseq_reward("11111111", &modes).unwrap() - (-8.0f64).exp()).abs() < 1e-15);
        assert!(bitseq_reward("x", &ModeSet { modes: vec![] }).is_err());
    }

    fn bs(n: usize, k: usize, num_modes: u64, seed: u64) -> BitSeqConfig {
        BitSeqConfig { n, k, b: 8.min(n), num_modes, delta: n / 6, seed }
    }

    #[test]
    fn modes_single_symbol() {
        let cfg = bs(8, 1, 5, 3);
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
        let modes = generate_modes(&cfg, &mut rng).unwrap();
        assert_eq!(modes.modes.len(), 5);
        for m in &modes.modes {
            assert!(MODE_SYMBOLS.contains(&m.as_str()));
        }
    }

    #[test]
    fn modes_split_into_symbols_and_are_deterministic() {
        let cfg = bs(16, 1, 3, 11);
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
        let modes = generate_modes(&cfg, &mut rng).unwrap();
        assert_eq!(modes.modes.len(), 3);
        for m in &modes.modes {
            assert_eq!(m.len(), 16);
            assert!(MODE_SYMBOLS.contains(&&m[0..8]));
            assert!(MODE_SYMBOLS.contains(&&m[8..16]));
        }
        let mut rng2 = ChaCha12Rng::seed_from_u64(cfg.seed);
        assert_eq!(modes, generate_modes(&cfg, &mut rng2).unwrap());
        // 5^2 = 25 combinations available at n = 16.
        let too_many = bs(16, 1, 26, 11);
        let mut rng3 = ChaCha12Rng::seed_from_u64(0);
        assert!(matches!(
            generate_modes(&too_many, &mut rng3),
            Err(EnvError::TooManyModes { available: 25, .. })
        ));
    }

    #[test]
    fn test_set_shape_and_rewards() {
        let cfg = bs(16, 1, 3, 5);
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
        let modes = generate_modes(&cfg, &mut rng).unwrap();
        let rows = generate_test_set(&modes, &cfg, &mut rng).unwrap();
        assert_eq!(rows.len(), 3 * 16);
        // i = 0 rows are the modes themselves.
        for (mi, m) in modes.modes.iter().enumerate() {
            assert_eq!(&rows[mi * 16].0, m);
            assert_eq!(rows[mi * 16].1, 1.0);
        }
        for (s, r) in &rows {
            assert!((r - bitseq_reward(s, &modes).unwrap()).abs() < 1e-15);
        }
    }

    #[test]
    fn bitseq_tree_structure() {
        let modes = ModeSet { modes: vec!["00".into()] };
        let cfg = bs(2, 1, 1, 0);
        let (spec, rewards) = build_bitseq_spec(&cfg, &modes, 1000).unwrap();
        assert_eq!(spec.num_states, 7);
        assert!(spec.is_tree());
        assert!(crate::dag::validate_dag(&spec).is_empty());
        assert!((rewards[3] - 1.0).abs() < 1e-15); // "00"
        let cfg2 = bs(2, 2, 1, 0);
        let (spec2, _) = build_bitseq_spec(&cfg2, &modes, 1000).unwrap();
        assert_eq!(spec2.num_states, 5);
        assert!(spec2.is_tree());
    }

    #[test]
    fn bitseq_terminal_strings_match_rewards() {
        let cfg = bs(4, 2, 2, 9);
        let modes = ModeSet { modes: vec!["0000".into(), "1111".into()] };
        let (spec, rewards) = build_bitseq_spec(&cfg, &modes, 1000).unwrap();
        for s in spec.terminal_states() {
            let string = bitseq_string_of_state(s, &cfg);
            assert!((rewards[s] - bitseq_reward(&string, &modes).unwrap()).abs() < 1e-15);
        }
    }
}
