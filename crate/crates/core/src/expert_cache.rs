//! Expert-cache behavior: exact weighted LRU over access traces, the
//! characteristic-time approximation of LRU hit rate under Zipf popularity,
//! and the expected number of distinct experts a batch activates.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::io::BufRead;
use std::sync::{Mutex, OnceLock};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SliceKind {
    Msb,
    Full,
}

impl SliceKind {
    fn as_str(self) -> &'static str {
        match self {
            SliceKind::Msb => "msb",
            SliceKind::Full => "full",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Access {
    pub step: u64,
    pub layer: u32,
    pub expert: u32,
    pub kind: SliceKind,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AccessTrace {
    pub accesses: Vec<Access>,
}

impl AccessTrace {
    pub fn new(accesses: Vec<Access>) -> Self {
        Self { accesses }
    }

    pub fn len(&self) -> usize {
        self.accesses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.accesses.is_empty()
    }

    /// One access per line: `step,layer,expert,kind`.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# step,layer,expert,slice_kind\n");
        for a in &self.accesses {
            let _ = writeln!(out, "{},{},{},{}", a.step, a.layer, a.expert, a.kind.as_str());
        }
        out
    }

    pub fn from_reader(reader: impl BufRead) -> Result<Self> {
        let mut accesses = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let line_no = i + 1;
            let trimmed = line.trim();
            if trimmed.is_empty() || trimmed.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
            if fields.len() != 4 {
                return Err(Error::TraceParse {
                    line: line_no,
                    message: format!("expected 4 fields, found {}", fields.len()),
                });
            }
            let num = |s: &str, what: &str| -> Result<u64> {
                s.parse().map_err(|_| Error::TraceParse {
                    line: line_no,
                    message: format!("invalid {what} `{s}`"),
                })
            };
            let kind = match fields[3] {
                "msb" => SliceKind::Msb,
                "full" => SliceKind::Full,
                other => {
                    return Err(Error::TraceParse {
                        line: line_no,
                        message: format!("unknown slice kind `{other}`"),
                    })
                }
            };
            accesses.push(Access {
                step: num(fields[0], "step")?,
                layer: num(fields[1], "layer")? as u32,
                expert: num(fields[2], "expert")? as u32,
                kind,
            });
        }
        Ok(Self { accesses })
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_reader(text.as_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheConfig {
    pub capacity: u64,
    pub msb_bytes: u64,
    pub full_bytes: u64,
}

impl CacheConfig {
    pub fn item_bytes(&self, kind: SliceKind) -> u64 {
        match kind {
            SliceKind::Msb => self.msb_bytes,
            SliceKind::Full => self.full_bytes,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LruOutcome {
    pub accesses: u64,
    pub hits: u64,
    /// 1.0 for an empty trace; check `accesses` to tell the cases apart.
    pub hit_rate: f64,
    pub miss_bytes: u64,
    pub miss_bytes_by_step: BTreeMap<u64, u64>,
}

type Key = (u32, u32, SliceKind);

const NIL: usize = usize::MAX;

struct Node {
    key: Key,
    bytes: u64,
    prev: usize,
    next: usize,
}

/// Recency list with O(1) touch, insert, and evict-oldest.
struct LruList {
    nodes: Vec<Node>,
    free: Vec<usize>,
    index: HashMap<Key, usize>,
    head: usize,
    tail: usize,
    used: u64,
}

impl LruList {
    fn new() -> Self {
        Self {
            nodes: Vec::new(),
            free: Vec::new(),
            index: HashMap::new(),
            head: NIL,
            tail: NIL,
            used: 0,
        }
    }

    fn unlink(&mut self, i: usize) {
        let (prev, next) = (self.nodes[i].prev, self.nodes[i].next);
        if prev == NIL {
            self.head = next;
        } else {
            self.nodes[prev].next = next;
        }
        if next == NIL {
            self.tail = prev;
        } else {
            self.nodes[next].prev = prev;
        }
    }

    fn push_front(&mut self, i: usize) {
        self.nodes[i].prev = NIL;
        self.nodes[i].next = self.head;
        if self.head != NIL {
            self.nodes[self.head].prev = i;
        }
        self.head = i;
        if self.tail == NIL {
            self.tail = i;
        }
    }

    fn touch(&mut self, key: &Key) -> bool {
        match self.index.get(key).copied() {
            Some(i) => {
                if self.head != i {
                    self.unlink(i);
                    self.push_front(i);
                }
                true
            }
            None => false,
        }
    }

    fn evict_oldest(&mut self) {
        let i = self.tail;
        self.unlink(i);
        self.used -= self.nodes[i].bytes;
        self.index.remove(&self.nodes[i].key);
        self.free.push(i);
    }

    fn insert(&mut self, key: Key, bytes: u64, capacity: u64) {
        while self.used + bytes > capacity {
            self.evict_oldest();
        }
        let node = Node {
            key,
            bytes,
            prev: NIL,
            next: NIL,
        };
        let i = match self.free.pop() {
            Some(i) => {
                self.nodes[i] = node;
                i
            }
            None => {
                self.nodes.push(node);
                self.nodes.len() - 1
            }
        };
        self.push_front(i);
        self.index.insert(key, i);
        self.used += bytes;
    }
}

/// Exact LRU over weighted items; whole items are evicted oldest-first until
/// the incoming item fits.
pub fn simulate_lru(trace: &AccessTrace, config: &CacheConfig) -> Result<LruOutcome> {
    for kind in [SliceKind::Msb, SliceKind::Full] {
        let item = config.item_bytes(kind);
        let used = trace.accesses.iter().any(|a| a.kind == kind);
        if used && item > config.capacity {
            return Err(Error::ItemTooLarge {
                item_bytes: item,
                capacity: config.capacity,
            });
        }
    }
    let mut lru = LruList::new();
    let mut hits = 0u64;
    let mut miss_bytes = 0u64;
    let mut by_step = BTreeMap::new();
    for a in &trace.accesses {
        let key = (a.layer, a.expert, a.kind);
        if lru.touch(&key) {
            hits += 1;
        } else {
            let bytes = config.item_bytes(a.kind);
            miss_bytes += bytes;
            *by_step.entry(a.step).or_insert(0) += bytes;
            if bytes > 0 {
                lru.insert(key, bytes, config.capacity);
            }
        }
    }
    let n = trace.accesses.len() as u64;
    Ok(LruOutcome {
        accesses: n,
        hits,
        hit_rate: if n == 0 { 1.0 } else { hits as f64 / n as f64 },
        miss_bytes,
        miss_bytes_by_step: by_step,
    })
}

/// Normalized Zipf popularities `p_i ∝ (i + 1)^-s`.
pub fn zipf_popularity(n_items: usize, exponent: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..n_items).map(|i| ((i + 1) as f64).powf(-exponent)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|p| p / total).collect()
}

/// Characteristic-time LRU hit rate for arbitrary popularities.
///
/// Solves `sum_i (1 - exp(-p_i T)) = C` for `T`, then returns
/// `sum_i p_i (1 - exp(-p_i T))`.
pub fn che_hit_rate(popularity: &[f64], capacity_items: f64) -> Result<f64> {
    let n = popularity.len();
    if n == 0 {
        return Err(Error::invalid("no items"));
    }
    if !(0.0..=n as f64).contains(&capacity_items) {
        return Err(Error::invalid(format!(
            "capacity {capacity_items} outside [0, {n}]"
        )));
    }
    let total: f64 = popularity.iter().sum();
    if popularity.iter().any(|p| !(*p >= 0.0)) || !(total > 0.0) {
        return Err(Error::invalid("popularities must be nonnegative with positive sum"));
    }
    let p: Vec<f64> = popularity.iter().map(|x| x / total).collect();
    let support = p.iter().filter(|&&x| x > 0.0).count() as f64;
    if capacity_items == 0.0 {
        return Ok(0.0);
    }
    if capacity_items >= support {
        return Ok(1.0);
    }
    let occupancy = |t: f64| p.iter().map(|&x| -(-x * t).exp_m1()).sum::<f64>();
    let mut hi = 1.0;
    while occupancy(hi) < capacity_items {
        hi *= 2.0;
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if occupancy(mid) < capacity_items {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let t = 0.5 * (lo + hi);
    Ok(p.iter().map(|&x| x * -(-x * t).exp_m1()).sum())
}

pub fn powerlaw_lru_hitrate(n_items: usize, zipf_exponent: f64, capacity_items: f64) -> Result<f64> {
    if n_items == 0 {
        return Err(Error::invalid("n_items must be at least 1"));
    }
    if !(zipf_exponent >= 0.0 && zipf_exponent.is_finite()) {
        return Err(Error::invalid(format!("zipf exponent {zipf_exponent} must be >= 0")));
    }
    che_hit_rate(&zipf_popularity(n_items, zipf_exponent), capacity_items)
}

/// Independent-reference trace over one layer's experts.
pub fn irm_trace(n_items: usize, zipf_exponent: f64, n_accesses: usize, seed: u64) -> Result<AccessTrace> {
    let pop = zipf_popularity(n_items, zipf_exponent);
    let dist = WeightedIndex::new(&pop).map_err(|e| Error::invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let accesses = (0..n_accesses)
        .map(|i| Access {
            step: i as u64,
            layer: 0,
            expert: dist.sample(&mut rng) as u32,
            kind: SliceKind::Full,
        })
        .collect();
    Ok(AccessTrace { accesses })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Popularity {
    Uniform,
    Zipf(f64),
    Weights(Vec<f64>),
}

const INCLUSION_MC_DRAWS: usize = 20_000;
const INCLUSION_MC_SEED: u64 = 0x5eed;

/// Probability that one token's top-k draw (sampling without replacement in
/// proportion to `weights`) includes each expert. Fixed-seed Monte Carlo via
/// Gumbel top-k; the estimates sum to `top_k` exactly.
pub fn inclusion_probabilities(top_k: usize, weights: &[f64]) -> Result<Vec<f64>> {
    type Memo = Mutex<HashMap<(usize, Vec<u64>), Vec<f64>>>;
    static MEMO: OnceLock<Memo> = OnceLock::new();
    let key = (top_k, weights.iter().map(|w| w.to_bits()).collect::<Vec<_>>());
    let memo = MEMO.get_or_init(Default::default);
    if let Some(hit) = memo.lock().expect("memo lock").get(&key) {
        return Ok(hit.clone());
    }
    let pi = sample_inclusion(top_k, weights)?;
    memo.lock().expect("memo lock").insert(key, pi.clone());
    Ok(pi)
}

fn sample_inclusion(top_k: usize, weights: &[f64]) -> Result<Vec<f64>> {
    let n = weights.len();
    if weights.iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
        return Err(Error::invalid("popularity weights must be finite and nonnegative"));
    }
    if top_k == 0 || weights.iter().filter(|&&x| x > 0.0).count() < top_k {
        return Err(Error::invalid("popularity must have at least top_k positive entries"));
    }
    let log_w: Vec<f64> = weights.iter().map(|w| w.ln()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(INCLUSION_MC_SEED);
    let mut counts = vec![0u64; n];
    let mut keys: Vec<(f64, usize)> = Vec::with_capacity(n);
    for _ in 0..INCLUSION_MC_DRAWS {
        keys.clear();
        for (i, lw) in log_w.iter().enumerate() {
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            keys.push((lw - (-u.ln()).ln(), i));
        }
        keys.select_nth_unstable_by(top_k - 1, |a, b| b.0.total_cmp(&a.0));
        for &(_, i) in &keys[..top_k] {
            counts[i] += 1;
        }
    }
    Ok(counts
        .into_iter()
        .map(|c| c as f64 / INCLUSION_MC_DRAWS as f64)
        .collect())
}

/// Expected distinct experts touched when `batch` tokens each pick `top_k`.
///
/// Tokens route independently, so the count is `sum_e 1 - (1 - pi_e)^batch`
/// where `pi_e` is the per-token inclusion probability. Uniform popularity
/// reduces to `n (1 - (1 - k/n)^batch)`.
pub fn expected_unique_experts(batch: usize, top_k: usize, n_experts: usize, popularity: &Popularity) -> Result<f64> {
    if n_experts == 0 || top_k == 0 || top_k > n_experts {
        return Err(Error::invalid(format!("top_k {top_k} with {n_experts} experts")));
    }
    if batch == 0 {
        return Ok(0.0);
    }
    let inclusion = match popularity {
        Popularity::Uniform => {
            let n = n_experts as f64;
            return Ok(n * (1.0 - (1.0 - top_k as f64 / n).powi(batch as i32)));
        }
        Popularity::Zipf(s) => {
            if !(*s >= 0.0 && s.is_finite()) {
                return Err(Error::invalid(format!("zipf exponent {s} must be >= 0")));
            }
            if *s == 0.0 {
                return expected_unique_experts(batch, top_k, n_experts, &Popularity::Uniform);
            }
            inclusion_probabilities(top_k, &zipf_popularity(n_experts, *s))?
        }
        Popularity::Weights(w) => {
            if w.len() != n_experts {
                return Err(Error::LengthMismatch {
                    left: w.len(),
                    right: n_experts,
                });
            }
            inclusion_probabilities(top_k, w)?
        }
    };
    if batch == 1 {
        return Ok(top_k as f64);
    }
    Ok(inclusion
        .iter()
        .map(|&pi| 1.0 - (1.0 - pi).powi(batch as i32))
        .sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn access(step: u64, expert: u32) -> Access {
        Access {
            step,
            layer: 0,
            expert,
            kind: SliceKind::Full,
        }
    }

    fn abab() -> AccessTrace {
        AccessTrace::new(vec![access(0, 0), access(1, 1), access(2, 0), access(3, 1)])
    }

    #[test]
    fn lru_examples() {
        let big = CacheConfig {
            capacity: 200,
            msb_bytes: 50,
            full_bytes: 100,
        };
        let out = simulate_lru(&abab(), &big).unwrap();
        assert_eq!(out.hit_rate, 0.5);
        assert_eq!(out.miss_bytes, 200);
        assert_eq!(out.miss_bytes_by_step.get(&1), Some(&100));

        let small = CacheConfig { capacity: 150, ..big };
        assert_eq!(simulate_lru(&abab(), &small).unwrap().hit_rate, 0.0);

        let empty = simulate_lru(&AccessTrace::default(), &small).unwrap();
        assert_eq!(empty.hit_rate, 1.0);
        assert_eq!(empty.accesses, 0);

        let tiny = CacheConfig { capacity: 10, ..big };
        assert!(matches!(simulate_lru(&abab(), &tiny), Err(Error::ItemTooLarge { .. })));
    }

    #[test]
    fn lru_weighted_eviction() {
        let cfg = CacheConfig {
            capacity: 100,
            msb_bytes: 50,
            full_bytes: 100,
        };
        let msb = |step, expert| Access {
            step,
            layer: 0,
            expert,
            kind: SliceKind::Msb,
        };
        // Two half-size items fit together; a full item evicts both.
        let trace = AccessTrace::new(vec![msb(0, 0), msb(1, 1), msb(2, 0), access(3, 2), msb(4, 1)]);
        let out = simulate_lru(&trace, &cfg).unwrap();
        assert_eq!(out.hits, 1);
    }

    #[test]
    fn trace_text_round_trip() {
        let t = AccessTrace::new(vec![
            access(0, 3),
            Access {
                step: 1,
                layer: 2,
                expert: 7,
                kind: SliceKind::Msb,
            },
        ]);
        assert_eq!(AccessTrace::from_text(&t.to_text()).unwrap(), t);
        assert!(matches!(
            AccessTrace::from_text("0,1,2\n"),
            Err(Error::TraceParse { line: 1, .. })
        ));
        assert!(AccessTrace::from_text("# c\n0,1,2,half\n").is_err());
    }

    #[test]
    fn che_boundaries() {
        assert_eq!(powerlaw_lru_hitrate(64, 1.0, 64.0).unwrap(), 1.0);
        assert_eq!(powerlaw_lru_hitrate(64, 1.0, 0.0).unwrap(), 0.0);
        assert!(powerlaw_lru_hitrate(0, 1.0, 0.0).is_err());
        assert!(powerlaw_lru_hitrate(4, 1.0, 5.0).is_err());
        // Uniform popularity gives hit rate C / n.
        let h = powerlaw_lru_hitrate(100, 0.0, 25.0).unwrap();
        assert!((h - 0.25).abs() < 1e-9);
        let mut prev = 0.0;
        for c in 0..=64 {
            let h = powerlaw_lru_hitrate(64, 1.2, c as f64).unwrap();
            assert!(h >= prev - 1e-12);
            prev = h;
        }
    }

    #[test]
    fn unique_expert_examples() {
        assert_eq!(expected_unique_experts(1, 8, 64, &Popularity::Uniform).unwrap(), 8.0);
        assert!((expected_unique_experts(2, 8, 64, &Popularity::Uniform).unwrap() - 15.0).abs() < 1e-12);
        assert_eq!(expected_unique_experts(1, 4, 32, &Popularity::Zipf(1.0)).unwrap(), 4.0);
        assert_eq!(expected_unique_experts(0, 4, 32, &Popularity::Uniform).unwrap(), 0.0);
        let sat = expected_unique_experts(4000, 2, 16, &Popularity::Zipf(0.5)).unwrap();
        assert!((sat - 16.0).abs() < 1e-9);
        assert!(expected_unique_experts(1, 5, 4, &Popularity::Uniform).is_err());
        let mut prev = 0.0;
        for b in [1, 2, 4, 8, 16, 32] {
            let u = expected_unique_experts(b, 4, 32, &Popularity::Zipf(1.0)).unwrap();
            assert!(u >= prev && u <= 32.0);
            prev = u;
        }
    }
}
