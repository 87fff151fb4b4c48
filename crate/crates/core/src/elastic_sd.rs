//! Tree-based self-speculative decoding with expert throttling.
//!
//! The draft model is the target's MSB slices with routing confined to a
//! per-layer expert pool. The pool is chosen from hotness: one-hot counts of
//! the experts the router originally picked during preceding draft steps.
//! Verification runs the INT8 target on the top-scoring tree nodes and
//! accepts the longest root path that matches target greedy decoding.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::toymoe::{log_softmax, MoEModel, PrecisionMode, RoutingDecision, TokenId, WeightView};

/// Per-(layer, expert) accumulated one-hot selection counts.
#[derive(Debug, Clone, PartialEq)]
pub struct HotnessAccumulator {
    n_layers: usize,
    n_experts: usize,
    counts: Vec<f64>,
}

impl HotnessAccumulator {
    pub fn new(n_layers: usize, n_experts: usize) -> Self {
        Self {
            n_layers,
            n_experts,
            counts: vec![0.0; n_layers * n_experts],
        }
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn n_experts(&self) -> usize {
        self.n_experts
    }

    pub fn layer_counts(&self, layer: usize) -> &[f64] {
        &self.counts[layer * self.n_experts..(layer + 1) * self.n_experts]
    }

    pub fn add(&mut self, layer: usize, selected: &[usize]) -> Result<()> {
        if layer >= self.n_layers {
            return Err(Error::IndexOutOfRange {
                index: layer,
                len: self.n_layers,
            });
        }
        if let Some(&e) = selected.iter().find(|&&e| e >= self.n_experts) {
            return Err(Error::IndexOutOfRange {
                index: e,
                len: self.n_experts,
            });
        }
        for &e in selected {
            self.counts[layer * self.n_experts + e] += 1.0;
        }
        Ok(())
    }

    /// Multiplies every count by `factor`; zero resets.
    pub fn decay(&mut self, factor: f64) {
        self.counts.iter_mut().for_each(|c| *c *= factor);
    }
}

/// A routing decision tagged with its layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDecision {
    pub layer: usize,
    pub decision: RoutingDecision,
}

/// Adds one count per originally selected expert per decision.
pub fn accumulate_hotness(mut acc: HotnessAccumulator, decisions: &[LayerDecision]) -> Result<HotnessAccumulator> {
    for d in decisions {
        acc.add(d.layer, &d.decision.original_selection())?;
    }
    Ok(acc)
}

/// Per-layer set of experts the draft may route to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExpertPool {
    capacity: usize,
    layers: Vec<Vec<usize>>,
}

impl ExpertPool {
    pub fn full(n_layers: usize, n_experts: usize) -> Self {
        Self {
            capacity: n_experts,
            layers: vec![(0..n_experts).collect(); n_layers],
        }
    }

    /// Builds a pool from explicit per-layer ids (sorted and deduplicated).
    pub fn from_layers(capacity: usize, layers: Vec<Vec<usize>>) -> Self {
        let layers = layers
            .into_iter()
            .map(|mut l| {
                l.sort_unstable();
                l.dedup();
                l
            })
            .collect();
        Self { capacity, layers }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn layers(&self) -> &[Vec<usize>] {
        &self.layers
    }

    pub fn layer(&self, layer: usize) -> &[usize] {
        &self.layers[layer]
    }

    pub fn contains(&self, layer: usize, expert: usize) -> bool {
        self.layers[layer].binary_search(&expert).is_ok()
    }

    pub fn pieces(&self) -> BTreeSet<(usize, usize)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, es)| es.iter().map(move |&e| (l, e)))
            .collect()
    }
}

/// The `capacity` hottest experts per layer, lower id first on ties.
pub fn select_pool(acc: &HotnessAccumulator, capacity: usize, top_k: usize) -> Result<ExpertPool> {
    if capacity < top_k {
        return Err(Error::invalid(format!("pool capacity {capacity} below top-k {top_k}")));
    }
    let keep = capacity.min(acc.n_experts);
    let layers = (0..acc.n_layers)
        .map(|l| {
            let counts = acc.layer_counts(l);
            let mut ids: Vec<usize> = (0..acc.n_experts).collect();
            ids.sort_by(|&a, &b| counts[b].total_cmp(&counts[a]).then(a.cmp(&b)));
            ids.truncate(keep);
            ids
        })
        .collect();
    Ok(ExpertPool::from_layers(capacity, layers))
}

/// A uniformly random pool of `capacity` experts per layer.
pub fn random_pool(n_layers: usize, n_experts: usize, capacity: usize, top_k: usize, rng: &mut ChaCha8Rng) -> Result<ExpertPool> {
    if capacity < top_k {
        return Err(Error::invalid(format!("pool capacity {capacity} below top-k {top_k}")));
    }
    let keep = capacity.min(n_experts);
    let layers = (0..n_layers)
        .map(|_| sample(rng, n_experts, keep).into_vec())
        .collect();
    Ok(ExpertPool::from_layers(capacity, layers))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DraftNode {
    /// `None` for children of the root (the last accepted token).
    pub parent: Option<usize>,
    pub token: TokenId,
    /// Cumulative log-probability along the path from the root.
    pub score: f64,
    pub depth: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DraftTree {
    pub width: usize,
    pub depth: usize,
    pub nodes: Vec<DraftNode>,
}

impl DraftTree {
    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Tokens from the root's first child down to `node`.
    pub fn path(&self, node: usize) -> Vec<TokenId> {
        let mut tokens = Vec::new();
        let mut cur = Some(node);
        while let Some(i) = cur {
            tokens.push(self.nodes[i].token);
            cur = self.nodes[i].parent;
        }
        tokens.reverse();
        tokens
    }

    fn path_ids(&self, node: usize) -> Vec<usize> {
        let mut ids = Vec::new();
        let mut cur = Some(node);
        while let Some(i) = cur {
            ids.push(i);
            cur = self.nodes[i].parent;
        }
        ids.reverse();
        ids
    }

    /// Indices of the `n` highest-scoring nodes, closed under ancestors.
    pub fn verify_set(&self, n: usize) -> BTreeSet<usize> {
        let mut order: Vec<usize> = (0..self.nodes.len()).collect();
        order.sort_by(|&a, &b| {
            self.nodes[b]
                .score
                .total_cmp(&self.nodes[a].score)
                .then(self.nodes[a].depth.cmp(&self.nodes[b].depth))
                .then(a.cmp(&b))
        });
        let mut set = BTreeSet::new();
        for i in order {
            if set.len() >= n {
                break;
            }
            let ids = self.path_ids(i);
            let missing = ids.iter().filter(|id| !set.contains(*id)).count();
            if set.len() + missing <= n {
                set.extend(ids);
            }
        }
        set
    }
}

/// Routing decision taken during drafting, tagged with lane and depth.
#[derive(Debug, Clone, PartialEq)]
pub struct DraftRouting {
    pub lane: usize,
    pub depth: usize,
    pub layer: usize,
    pub decision: RoutingDecision,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DraftOutput {
    pub tree: DraftTree,
    pub routing: Vec<DraftRouting>,
    pub forward_passes: usize,
}

fn push_routing(out: &mut Vec<DraftRouting>, lane: usize, depth: usize, routing: Vec<RoutingDecision>) {
    out.extend(routing.into_iter().enumerate().map(|(layer, decision)| DraftRouting {
        lane,
        depth,
        layer,
        decision,
    }));
}

/// Top-`w` candidate tokens by log-probability, lower id first on ties.
fn top_tokens(logprobs: &[f64], w: usize) -> Vec<(TokenId, f64)> {
    let mut ids: Vec<usize> = (0..logprobs.len()).collect();
    ids.sort_by(|&a, &b| logprobs[b].total_cmp(&logprobs[a]).then(a.cmp(&b)));
    ids.truncate(w);
    ids.into_iter().map(|i| (i as TokenId, logprobs[i])).collect()
}

/// Builds a width-`w`, depth-`d` draft tree with throttled routing.
pub fn draft_phase(
    model: &MoEModel,
    context: &[TokenId],
    pool: &ExpertPool,
    w: usize,
    d: usize,
    view: WeightView,
) -> Result<DraftOutput> {
    draft_lane(model, context, pool, w, d, view, 0)
}

fn draft_lane(
    model: &MoEModel,
    context: &[TokenId],
    pool: &ExpertPool,
    w: usize,
    d: usize,
    view: WeightView,
    lane: usize,
) -> Result<DraftOutput> {
    let mut tree = DraftTree {
        width: w,
        depth: d,
        nodes: Vec::new(),
    };
    let mut routing = Vec::new();
    let mut passes = 0;
    if w == 0 || d == 0 {
        return Ok(DraftOutput {
            tree,
            routing,
            forward_passes: 0,
        });
    }
    let permitted = Some(pool.layers());
    let mut frontier: Vec<Option<usize>> = vec![None];
    // The draft's own greedy chain always stays in the beam.
    let mut greedy: Option<usize> = None;
    for depth in 1..=d {
        let mut candidates: Vec<(Option<usize>, TokenId, f64)> = Vec::new();
        let mut greedy_child = None;
        for &parent in &frontier {
            let mut ctx = context.to_vec();
            let base = match parent {
                Some(p) => {
                    ctx.extend(tree.path(p));
                    tree.nodes[p].score
                }
                None => 0.0,
            };
            let step = model.forward_step(&ctx, view, permitted)?;
            passes += 1;
            let lp = log_softmax(&step.logits);
            push_routing(&mut routing, lane, depth, step.routing);
            let top = top_tokens(&lp, w);
            if parent == greedy {
                greedy_child = Some((parent, top[0].0));
            }
            candidates.extend(top.into_iter().map(|(t, s)| (parent, t, base + s)));
        }
        candidates.sort_by(|a, b| {
            b.2.total_cmp(&a.2)
                .then(a.0.cmp(&b.0))
                .then(a.1.cmp(&b.1))
        });
        let keep = greedy_child.and_then(|g| candidates.iter().position(|c| (c.0, c.1) == g));
        if let Some(pos) = keep.filter(|&p| p >= w) {
            candidates.swap(w - 1, pos);
        }
        candidates.truncate(w);
        greedy = None;
        frontier = candidates
            .into_iter()
            .map(|(parent, token, score)| {
                tree.nodes.push(DraftNode {
                    parent,
                    token,
                    score,
                    depth,
                });
                let id = tree.nodes.len() - 1;
                if greedy_child == Some((parent, token)) {
                    greedy = Some(id);
                }
                Some(id)
            })
            .collect();
    }
    Ok(DraftOutput {
        tree,
        routing,
        forward_passes: passes,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct VerifyOutcome {
    pub accept_length: usize,
    pub accepted: Vec<TokenId>,
    pub bonus_token: TokenId,
    /// Verified tree nodes plus the root position.
    pub verify_token_count: usize,
    pub routing: Vec<LayerDecision>,
}

impl VerifyOutcome {
    /// Tokens emitted this step: the accepted path then the bonus token.
    pub fn emitted(&self) -> Vec<TokenId> {
        let mut out = self.accepted.clone();
        out.push(self.bonus_token);
        out
    }
}

/// Verifies the top `verify_count` nodes with the unrestricted INT8 target.
pub fn verify_phase(model: &MoEModel, context: &[TokenId], tree: &DraftTree, verify_count: usize) -> Result<VerifyOutcome> {
    let set = tree.verify_set(verify_count);
    let mut routing = Vec::new();
    let mut target_next = |ctx: &[TokenId]| -> Result<TokenId> {
        let step = model.forward_step(ctx, PrecisionMode::Int8Full, None)?;
        routing.extend(step.routing.iter().cloned().enumerate().map(|(layer, decision)| LayerDecision { layer, decision }));
        Ok(step.greedy())
    };
    // One target position per verified node plus the root, as in one tree-attention pass.
    let root_next = target_next(context)?;
    let mut node_next = std::collections::BTreeMap::new();
    for &i in &set {
        let mut ctx = context.to_vec();
        ctx.extend(tree.path(i));
        node_next.insert(i, target_next(&ctx)?);
    }
    let mut accepted = Vec::new();
    let mut current: Option<usize> = None;
    let mut expected = root_next;
    loop {
        let child = set
            .iter()
            .copied()
            .find(|&i| tree.nodes[i].parent == current && tree.nodes[i].token == expected);
        match child {
            Some(i) => {
                accepted.push(expected);
                current = Some(i);
                expected = node_next[&i];
            }
            None => break,
        }
    }
    Ok(VerifyOutcome {
        accept_length: accepted.len(),
        accepted,
        bonus_token: expected,
        verify_token_count: set.len() + 1,
        routing,
    })
}

/// One MSB-slice piece of an expert to be written into HB.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PieceTransfer {
    pub layer: usize,
    pub expert: usize,
}

/// Pieces of the next pool that are not already HB-resident.
pub fn pool_update_plan(next_pool: &ExpertPool, cached: &BTreeSet<(usize, usize)>) -> Vec<PieceTransfer> {
    next_pool
        .pieces()
        .into_iter()
        .filter(|p| !cached.contains(p))
        .map(|(layer, expert)| PieceTransfer { layer, expert })
        .collect()
}

pub fn transfer_bytes(transfers: &[PieceTransfer], msb_bytes_per_expert: u64) -> u64 {
    transfers.len() as u64 * msb_bytes_per_expert
}

/// `(1 + accept) * lat_ar / (d * lat_draft + lat_verify)`.
pub fn sd_speedup(accept_len: f64, lat_ar: f64, d: usize, lat_draft: f64, lat_verify: f64) -> Result<f64> {
    if !(lat_ar > 0.0 && lat_verify > 0.0) || lat_draft < 0.0 || (d > 0 && lat_draft <= 0.0) {
        return Err(Error::invalid(format!(
            "latencies must be positive (ar {lat_ar}, draft {lat_draft}, verify {lat_verify})"
        )));
    }
    if !(accept_len >= 0.0) {
        return Err(Error::invalid(format!("accept length {accept_len} is negative")));
    }
    let draft_total = if d == 0 { 0.0 } else { d as f64 * lat_draft };
    Ok((1.0 + accept_len) * lat_ar / (draft_total + lat_verify))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolPolicy {
    Hotness,
    Random,
    /// Every expert permitted; no throttling.
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdConfig {
    pub width: usize,
    pub depth: usize,
    /// Verified nodes per step; `None` means `width * depth`.
    pub verify_count: Option<usize>,
    pub pool_capacity: usize,
    pub hotness_decay: f64,
    pub policy: PoolPolicy,
    pub draft_view: WeightView,
    /// Seed for random pools.
    pub seed: u64,
}

impl SdConfig {
    pub fn verify_count(&self) -> usize {
        self.verify_count.unwrap_or(self.width * self.depth)
    }
}

impl Default for SdConfig {
    fn default() -> Self {
        Self {
            width: 2,
            depth: 4,
            verify_count: None,
            pool_capacity: 4,
            hotness_decay: 0.5,
            policy: PoolPolicy::Hotness,
            draft_view: PrecisionMode::Msb4Draft.into(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaneStep {
    pub accept_length: usize,
    pub bonus_token: TokenId,
    pub verify_token_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdStepResult {
    pub lanes: Vec<LaneStep>,
    pub draft_routing: Vec<DraftRouting>,
    pub verify_routing: Vec<LayerDecision>,
    /// Pool the draft ran under.
    pub pool: ExpertPool,
    pub next_pool: ExpertPool,
    pub transfers: Vec<PieceTransfer>,
    pub draft_forward_passes: usize,
}

/// Decoding state for one or more lanes sharing a pool and hotness counts.
pub struct SdSession<'m> {
    model: &'m MoEModel,
    cfg: SdConfig,
    contexts: Vec<Vec<TokenId>>,
    generated: Vec<Vec<TokenId>>,
    hotness: HotnessAccumulator,
    pool: ExpertPool,
    rng: ChaCha8Rng,
}

impl<'m> SdSession<'m> {
    /// Seeds hotness from the target's routing over each prompt.
    pub fn new(model: &'m MoEModel, prompts: &[Vec<TokenId>], cfg: SdConfig) -> Result<Self> {
        let shape = *model.shape();
        if prompts.is_empty() || prompts.iter().any(|p| p.is_empty()) {
            return Err(Error::invalid("every lane needs a nonempty prompt"));
        }
        if cfg.policy != PoolPolicy::Full && cfg.pool_capacity < shape.top_k {
            return Err(Error::invalid(format!(
                "pool capacity {} below top-k {}",
                cfg.pool_capacity, shape.top_k
            )));
        }
        let mut hotness = HotnessAccumulator::new(shape.n_layers, shape.n_experts);
        for prompt in prompts {
            for end in 1..=prompt.len() {
                let step = model.forward_step(&prompt[..end], PrecisionMode::Int8Full, None)?;
                for (layer, d) in step.routing.iter().enumerate() {
                    hotness.add(layer, &d.original_selection())?;
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let pool = initial_pool(&cfg, &hotness, shape.n_layers, shape.n_experts, shape.top_k, &mut rng)?;
        Ok(Self {
            model,
            cfg,
            contexts: prompts.to_vec(),
            generated: vec![Vec::new(); prompts.len()],
            hotness,
            pool,
            rng,
        })
    }

    pub fn pool(&self) -> &ExpertPool {
        &self.pool
    }

    pub fn generated(&self) -> &[Vec<TokenId>] {
        &self.generated
    }

    pub fn step(&mut self) -> Result<SdStepResult> {
        let shape = *self.model.shape();
        let mut draft_routing = Vec::new();
        let mut trees = Vec::with_capacity(self.contexts.len());
        let mut passes = 0;
        for (lane, ctx) in self.contexts.iter().enumerate() {
            let out = draft_lane(
                self.model,
                ctx,
                &self.pool,
                self.cfg.width,
                self.cfg.depth,
                self.cfg.draft_view,
                lane,
            )?;
            passes += out.forward_passes;
            draft_routing.extend(out.routing);
            trees.push(out.tree);
        }

        // The next pool is fixed before verification so its pieces stream in alongside it.
        for r in &draft_routing {
            self.hotness.add(r.layer, &r.decision.original_selection())?;
        }
        let next_pool = match self.cfg.policy {
            PoolPolicy::Hotness => select_pool(&self.hotness, self.cfg.pool_capacity, shape.top_k)?,
            PoolPolicy::Random => random_pool(
                shape.n_layers,
                shape.n_experts,
                self.cfg.pool_capacity,
                shape.top_k,
                &mut self.rng,
            )?,
            PoolPolicy::Full => ExpertPool::full(shape.n_layers, shape.n_experts),
        };
        self.hotness.decay(self.cfg.hotness_decay);
        let transfers = pool_update_plan(&next_pool, &self.pool.pieces());

        let mut lanes = Vec::with_capacity(self.contexts.len());
        let mut verify_routing = Vec::new();
        for ((ctx, tree), gen) in self.contexts.iter_mut().zip(&trees).zip(&mut self.generated) {
            let v = verify_phase(self.model, ctx, tree, self.cfg.verify_count())?;
            let emitted = v.emitted();
            ctx.extend(&emitted);
            gen.extend(&emitted);
            verify_routing.extend(v.routing);
            lanes.push(LaneStep {
                accept_length: v.accept_length,
                bonus_token: v.bonus_token,
                verify_token_count: v.verify_token_count,
            });
        }
        let pool = std::mem::replace(&mut self.pool, next_pool.clone());
        Ok(SdStepResult {
            lanes,
            draft_routing,
            verify_routing,
            pool,
            next_pool,
            transfers,
            draft_forward_passes: passes,
        })
    }

    /// Steps until every lane has at least `n_tokens` generated tokens.
    pub fn run(mut self, n_tokens: usize) -> Result<SdRun> {
        let mut steps = Vec::new();
        while self.generated.iter().any(|g| g.len() < n_tokens) {
            steps.push(self.step()?);
        }
        let tokens = self
            .generated
            .into_iter()
            .map(|mut g| {
                g.truncate(n_tokens);
                g
            })
            .collect();
        Ok(SdRun { tokens, steps })
    }
}

fn initial_pool(
    cfg: &SdConfig,
    hotness: &HotnessAccumulator,
    n_layers: usize,
    n_experts: usize,
    top_k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ExpertPool> {
    match cfg.policy {
        PoolPolicy::Hotness => select_pool(hotness, cfg.pool_capacity, top_k),
        PoolPolicy::Random => random_pool(n_layers, n_experts, cfg.pool_capacity, top_k, rng),
        PoolPolicy::Full => Ok(ExpertPool::full(n_layers, n_experts)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SdRun {
    pub tokens: Vec<Vec<TokenId>>,
    pub steps: Vec<SdStepResult>,
}

impl SdRun {
    pub fn mean_accept_length(&self) -> f64 {
        let (sum, n) = self
            .steps
            .iter()
            .flat_map(|s| &s.lanes)
            .fold((0usize, 0usize), |(s, n), l| (s + l.accept_length, n + 1));
        if n == 0 {
            0.0
        } else {
            sum as f64 / n as f64
        }
    }

    /// Draft routing decisions that selected an expert outside the pool.
    pub fn throttle_violations(&self) -> usize {
        self.steps
            .iter()
            .map(|s| {
                s.draft_routing
                    .iter()
                    .filter(|r| r.decision.selected.iter().any(|&e| !s.pool.contains(r.layer, e)))
                    .count()
            })
            .sum()
    }

    pub fn draft_decision_count(&self) -> usize {
        self.steps.iter().map(|s| s.draft_routing.len()).sum()
    }

    /// Mean fraction of pool pieces replaced per step.
    pub fn pool_churn(&self) -> f64 {
        if self.steps.is_empty() {
            return 0.0;
        }
        let total: f64 = self
            .steps
            .iter()
            .map(|s| {
                let pieces = s.next_pool.pieces().len().max(1);
                s.transfers.len() as f64 / pieces as f64
            })
            .sum();
        total / self.steps.len() as f64
    }

    pub fn mean_verify_tokens(&self) -> f64 {
        let lanes: Vec<&LaneStep> = self.steps.iter().flat_map(|s| &s.lanes).collect();
        if lanes.is_empty() {
            return 0.0;
        }
        lanes.iter().map(|l| l.verify_token_count as f64).sum::<f64>() / lanes.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bitnest::ReconstructMode;
    use crate::toymoe::{gen_model, route, MoEShape};

    fn toy() -> MoEShape {
        MoEShape {
            d_model: 64,
            d_ff: 128,
            n_experts: 8,
            top_k: 2,
            n_layers: 2,
            vocab: 256,
        }
    }

    fn decision(scores: &[f64], k: usize) -> RoutingDecision {
        route(scores, k, None).unwrap()
    }

    #[test]
    fn hotness_examples() {
        let acc = HotnessAccumulator::new(1, 4);
        let decisions = vec![
            LayerDecision {
                layer: 0,
                decision: decision(&[0.4, 0.1, 0.3, 0.2], 2),
            },
            LayerDecision {
                layer: 0,
                decision: decision(&[0.4, 0.3, 0.2, 0.1], 2),
            },
        ];
        let acc = accumulate_hotness(acc, &decisions).unwrap();
        assert_eq!(acc.layer_counts(0), &[2.0, 1.0, 1.0, 0.0]);
        let same = accumulate_hotness(acc.clone(), &[]).unwrap();
        assert_eq!(same, acc);
        let mut bad = HotnessAccumulator::new(1, 4);
        assert!(bad.add(0, &[4]).is_err());
        assert!(bad.add(1, &[0]).is_err());
    }

    #[test]
    fn hotness_counts_original_not_throttled_selection() {
        let d = route(&[0.5, 0.3, 0.15, 0.05], 2, Some(&[2, 3])).unwrap();
        let acc = accumulate_hotness(HotnessAccumulator::new(1, 4), &[LayerDecision { layer: 0, decision: d }]).unwrap();
        assert_eq!(acc.layer_counts(0), &[1.0, 1.0, 0.0, 0.0]);
    }

    fn acc_with(counts: &[f64]) -> HotnessAccumulator {
        let mut acc = HotnessAccumulator::new(1, counts.len());
        acc.counts.copy_from_slice(counts);
        acc
    }

    #[test]
    fn select_pool_examples() {
        assert_eq!(select_pool(&acc_with(&[5.0, 1.0, 5.0, 0.0]), 2, 2).unwrap().layer(0), &[0, 2]);
        assert_eq!(select_pool(&acc_with(&[3.0, 3.0, 1.0]), 1, 1).unwrap().layer(0), &[0]);
        assert_eq!(select_pool(&acc_with(&[0.0, 2.0, 1.0]), 3, 1).unwrap().layer(0), &[0, 1, 2]);
        assert!(select_pool(&acc_with(&[1.0, 1.0]), 1, 2).is_err());
    }

    #[test]
    fn speedup_examples() {
        assert!((sd_speedup(3.0, 10.0, 4, 1.0, 12.0).unwrap() - 2.5).abs() < 1e-12);
        assert_eq!(sd_speedup(0.0, 10.0, 2, 1.0, 8.0).unwrap(), 1.0);
        let a = sd_speedup(1.0, 10.0, 4, 1.0, 12.0).unwrap();
        let b = sd_speedup(3.0, 10.0, 4, 1.0, 12.0).unwrap();
        assert!((b - 2.0 * a).abs() < 1e-12);
        assert!(sd_speedup(1.0, 0.0, 4, 1.0, 12.0).is_err());
        assert!(sd_speedup(1.0, 1.0, 4, 1.0, -1.0).is_err());
        assert_eq!(sd_speedup(0.0, 5.0, 0, 0.0, 5.0).unwrap(), 1.0);
    }

    #[test]
    fn pool_update_examples() {
        let next = ExpertPool::from_layers(2, vec![vec![0, 1], vec![2, 3]]);
        let cached: BTreeSet<_> = [(0, 0), (0, 1), (1, 2), (1, 3), (1, 5)].into();
        assert!(pool_update_plan(&next, &cached).is_empty());
        let disjoint: BTreeSet<_> = [(0, 4), (0, 5), (1, 0), (1, 1)].into();
        let plan = pool_update_plan(&next, &disjoint);
        assert_eq!(plan.len(), 4);
        assert_eq!(transfer_bytes(&plan, 1000), 4000);
    }

    #[test]
    fn depth_zero_is_autoregressive() {
        let m = gen_model(toy(), 2).unwrap();
        let pool = ExpertPool::full(2, 8);
        let out = draft_phase(&m, &[1, 2, 3], &pool, 2, 0, PrecisionMode::Msb4Draft.into()).unwrap();
        assert!(out.tree.is_empty());
        let v = verify_phase(&m, &[1, 2, 3], &out.tree, 4).unwrap();
        assert_eq!(v.accept_length, 0);
        assert_eq!(v.verify_token_count, 1);
        let ar = m.forward_step(&[1, 2, 3], PrecisionMode::Int8Full, None).unwrap().greedy();
        assert_eq!(v.bonus_token, ar);
    }

    #[test]
    fn single_chain_is_draft_greedy() {
        let m = gen_model(toy(), 2).unwrap();
        let pool = ExpertPool::full(2, 8);
        let out = draft_phase(&m, &[9, 4], &pool, 1, 1, PrecisionMode::Msb4Draft.into()).unwrap();
        assert_eq!(out.tree.nodes.len(), 1);
        let g = m.forward_step(&[9, 4], PrecisionMode::Msb4Draft, None).unwrap().greedy();
        assert_eq!(out.tree.nodes[0].token, g);
    }

    #[test]
    fn tree_shape_invariants() {
        let m = gen_model(toy(), 5).unwrap();
        let pool = ExpertPool::from_layers(4, vec![vec![0, 1, 2, 3]; 2]);
        let out = draft_phase(&m, &[3, 1, 4], &pool, 3, 4, PrecisionMode::Msb4Draft.into()).unwrap();
        assert_eq!(out.tree.nodes.len(), 12);
        for n in &out.tree.nodes {
            assert!(n.depth >= 1 && n.depth <= 4);
            match n.parent {
                None => assert_eq!(n.depth, 1),
                Some(p) => assert_eq!(out.tree.nodes[p].depth + 1, n.depth),
            }
        }
        for r in &out.routing {
            assert!(r.decision.selected.iter().all(|&e| pool.contains(r.layer, e)));
        }
        let set = out.tree.verify_set(5);
        assert_eq!(set.len(), 5);
        for &i in &set {
            if let Some(p) = out.tree.nodes[i].parent {
                assert!(set.contains(&p));
            }
        }
    }

    #[test]
    fn self_draft_accepts_full_depth() {
        let m = gen_model(toy(), 11).unwrap();
        let cfg = SdConfig {
            width: 2,
            depth: 3,
            policy: PoolPolicy::Full,
            draft_view: PrecisionMode::Int8Full.into(),
            ..SdConfig::default()
        };
        let mut s = SdSession::new(&m, &[vec![7, 8, 9]], cfg).unwrap();
        for _ in 0..3 {
            let r = s.step().unwrap();
            assert_eq!(r.lanes[0].accept_length, 3);
        }
    }

    #[test]
    fn never_matching_tree_accepts_nothing() {
        let m = gen_model(toy(), 4).unwrap();
        let ctx = [10, 20];
        let target = m.forward_step(&ctx, PrecisionMode::Int8Full, None).unwrap().greedy();
        let wrong = (target + 1) % 256;
        let tree = DraftTree {
            width: 1,
            depth: 2,
            nodes: vec![
                DraftNode {
                    parent: None,
                    token: wrong,
                    score: -0.1,
                    depth: 1,
                },
                DraftNode {
                    parent: Some(0),
                    token: 0,
                    score: -0.2,
                    depth: 2,
                },
            ],
        };
        let v = verify_phase(&m, &ctx, &tree, 2).unwrap();
        assert_eq!(v.accept_length, 0);
        assert_eq!(v.emitted(), vec![target]);
    }

    #[test]
    fn session_rejects_small_pool() {
        let m = gen_model(toy(), 4).unwrap();
        let cfg = SdConfig {
            pool_capacity: 1,
            ..SdConfig::default()
        };
        assert!(SdSession::new(&m, &[vec![1]], cfg).is_err());
        assert!(SdSession::new(&m, &[vec![]], SdConfig::default()).is_err());
    }

    #[test]
    fn exact_draft_accepts_full_depth() {
        for seed in 0..6 {
            let m = gen_model(toy(), seed).unwrap();
            let cfg = SdConfig {
                policy: PoolPolicy::Full,
                draft_view: WeightView::Quantized(ReconstructMode::Full),
                width: 3,
                ..SdConfig::default()
            };
            let run = SdSession::new(&m, &[vec![5, 6, 7]], cfg).unwrap().run(24).unwrap();
            assert!(run.steps.iter().flat_map(|s| &s.lanes).all(|l| l.accept_length == cfg.depth));
        }
    }
}
