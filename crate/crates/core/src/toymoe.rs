//! A small deterministic MoE language model.
//!
//! Weights are random but fixed per seed. Expert projections are stored as
//! G32 INT8 groups next to their real master copy so the same model runs at
//! real precision, INT8 full precision, or MSB-slice draft precision. The
//! attention block is a dense linear map over a decayed context summary.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bitnest::{self, QuantGroup, ReconstructMode, GROUP_SIZE};
use crate::error::{Error, Result};
use crate::slicemac::{self, SliceMode};

pub type TokenId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoEShape {
    pub d_model: usize,
    pub d_ff: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub n_layers: usize,
    pub vocab: usize,
}

impl MoEShape {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
            ("n_experts", self.n_experts),
            ("top_k", self.top_k),
            ("n_layers", self.n_layers),
            ("vocab", self.vocab),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidShape(format!("{name} must be positive")));
            }
        }
        if !self.d_model.is_multiple_of(GROUP_SIZE) || !self.d_ff.is_multiple_of(GROUP_SIZE) {
            return Err(Error::InvalidShape(format!(
                "d_model ({}) and d_ff ({}) must be multiples of {GROUP_SIZE}",
                self.d_model, self.d_ff
            )));
        }
        if self.top_k > self.n_experts {
            return Err(Error::InvalidShape(format!(
                "top_k ({}) exceeds n_experts ({})",
                self.top_k, self.n_experts
            )));
        }
        Ok(())
    }

    pub fn expert_params(&self) -> usize {
        3 * self.d_model * self.d_ff
    }

    /// Embedding, unembedding, and per-layer mixing map, router, and router bias.
    pub fn dense_params(&self) -> usize {
        2 * self.vocab * self.d_model
            + self.n_layers * (self.d_model * self.d_model + self.n_experts * self.d_model + self.n_experts)
    }

    pub fn param_count(&self) -> usize {
        self.n_layers * self.n_experts * self.expert_params() + self.dense_params()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrecisionMode {
    RealRef,
    Int8Full,
    Msb4Draft,
}

/// Which weights an expert matmul reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum WeightView {
    /// Real master weights with real activations.
    Real,
    /// INT8 activations against codes approximated per the mode. `Full` is
    /// the INT8 target; `LsbAugment` runs the hardware draft datapath.
    Quantized(ReconstructMode),
}

impl From<PrecisionMode> for WeightView {
    fn from(mode: PrecisionMode) -> Self {
        match mode {
            PrecisionMode::RealRef => WeightView::Real,
            PrecisionMode::Int8Full => WeightView::Quantized(ReconstructMode::Full),
            PrecisionMode::Msb4Draft => WeightView::Quantized(ReconstructMode::LsbAugment),
        }
    }
}

/// Row-major matrix kept both as real values and as G32 groups along each row.
#[derive(Debug, Clone)]
pub struct QuantMatrix {
    rows: usize,
    cols: usize,
    real: Vec<f64>,
    groups: Vec<QuantGroup>,
}

impl QuantMatrix {
    pub fn from_real(rows: usize, cols: usize, real: Vec<f64>) -> Result<Self> {
        if real.len() != rows * cols {
            return Err(Error::LengthMismatch {
                left: real.len(),
                right: rows * cols,
            });
        }
        if !cols.is_multiple_of(GROUP_SIZE) {
            return Err(Error::InvalidShape(format!("{cols} columns not a multiple of {GROUP_SIZE}")));
        }
        let groups = real
            .chunks(GROUP_SIZE)
            .map(bitnest::quantize_group)
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            rows,
            cols,
            real,
            groups,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn groups(&self) -> &[QuantGroup] {
        &self.groups
    }

    pub fn real(&self) -> &[f64] {
        &self.real
    }

    /// The matrix whose real weights are the dequantized INT8 groups.
    pub fn dequantized(&self) -> Self {
        let real = self
            .groups
            .iter()
            .flat_map(|g| g.codes().map(|c| c as f64 * g.scale()))
            .collect();
        Self {
            rows: self.rows,
            cols: self.cols,
            real,
            groups: self.groups.clone(),
        }
    }

    /// Same groups with every code replaced by its reconstruction under `mode`.
    /// Fails when a reconstruction leaves the legal code range (truncating -127).
    pub fn with_surrogate_codes(&self, mode: ReconstructMode) -> Result<Self> {
        let groups = self
            .groups
            .iter()
            .map(|g| {
                let surrogate = g.surrogate_codes(mode);
                if let Some(c) = surrogate.iter().find(|c| !(-127..=127).contains(*c)) {
                    return Err(Error::invalid(format!("surrogate code {c} is not a legal INT8 code")));
                }
                QuantGroup::from_parts(surrogate.map(|c| c as i8), g.scale())
            })
            .collect::<Result<Vec<_>>>()?;
        let real = groups
            .iter()
            .flat_map(|g| g.codes().map(|c| c as f64 * g.scale()))
            .collect();
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            real,
            groups,
        })
    }

    pub fn matvec(&self, x: &[f64], view: WeightView) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::LengthMismatch {
                left: x.len(),
                right: self.cols,
            });
        }
        match view {
            WeightView::Real => Ok(self
                .real
                .chunks(self.cols)
                .map(|row| row.iter().zip(x).map(|(w, v)| w * v).sum())
                .collect()),
            WeightView::Quantized(mode) => {
                let (codes, act_scale) = bitnest::quantize_tensor(x)?;
                let groups_per_row = self.cols / GROUP_SIZE;
                let mut out = Vec::with_capacity(self.rows);
                for row in self.groups.chunks(groups_per_row) {
                    let mut acc = 0.0;
                    for (g, a) in row.iter().zip(codes.chunks(GROUP_SIZE)) {
                        acc += quantized_group_dot(a, g, act_scale, mode)?;
                    }
                    out.push(acc);
                }
                Ok(out)
            }
        }
    }
}

fn quantized_group_dot(acts: &[i8], group: &QuantGroup, act_scale: f64, mode: ReconstructMode) -> Result<f64> {
    match mode {
        ReconstructMode::Full => slicemac::dequant_dot(acts, group, act_scale, SliceMode::FullPrecision),
        ReconstructMode::LsbAugment => slicemac::dequant_dot(acts, group, act_scale, SliceMode::DraftMsbOnly),
        ReconstructMode::Truncate | ReconstructMode::MsbRound => {
            let dot: i64 = acts
                .iter()
                .zip(group.surrogate_codes(mode))
                .map(|(&a, w)| a as i64 * w as i64)
                .sum();
            Ok(dot as f64 * (group.scale() * act_scale))
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExpertWeights {
    pub up: QuantMatrix,
    pub gate: QuantMatrix,
    pub down: QuantMatrix,
}

pub fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

pub fn expert_forward(x: &[f64], e: &ExpertWeights, view: impl Into<WeightView>) -> Result<Vec<f64>> {
    let view = view.into();
    let up = e.up.matvec(x, view)?;
    let gate = e.gate.matvec(x, view)?;
    let hidden: Vec<f64> = gate.iter().zip(&up).map(|(&g, &u)| silu(g) * u).collect();
    e.down.matvec(&hidden, view)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub scores: Vec<f64>,
    /// Expert ids in descending score order.
    pub selected: Vec<usize>,
    pub gates: Vec<f64>,
}

impl RoutingDecision {
    /// The top-k the router would have picked with no restriction.
    pub fn original_selection(&self) -> Vec<usize> {
        top_k_indices(&self.scores, self.selected.len(), None)
    }
}

fn top_k_indices(scores: &[f64], k: usize, permitted: Option<&[usize]>) -> Vec<usize> {
    let mut ids: Vec<usize> = match permitted {
        Some(p) => {
            let mut p: Vec<usize> = p.iter().copied().filter(|&e| e < scores.len()).collect();
            p.sort_unstable();
            p.dedup();
            p
        }
        None => (0..scores.len()).collect(),
    };
    ids.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    ids.truncate(k);
    ids
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Top-k routing restricted to `permitted` when given. Ties go to the lower id.
pub fn route(scores: &[f64], k: usize, permitted: Option<&[usize]>) -> Result<RoutingDecision> {
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::invalid(format!("non-finite routing score {s}")));
    }
    if k == 0 || k > scores.len() {
        return Err(Error::invalid(format!("k = {k} with {} experts", scores.len())));
    }
    let selected = top_k_indices(scores, k, permitted);
    if selected.len() < k {
        return Err(Error::PermittedTooSmall {
            available: selected.len(),
            k,
        });
    }
    let total: f64 = selected.iter().map(|&e| scores[e]).sum();
    let gates = selected
        .iter()
        .map(|&e| {
            if total > 0.0 {
                scores[e] / total
            } else {
                1.0 / k as f64
            }
        })
        .collect();
    Ok(RoutingDecision {
        scores: scores.to_vec(),
        selected,
        gates,
    })
}

/// Knobs for [`gen_model_with`] beyond the shape.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenOptions {
    /// Router bias `-skew * ln(1 + e)` gives expert `e` a heavy-tailed prior.
    pub router_skew: f64,
    pub logit_scale: f64,
    /// Per-token decay of the context summary.
    pub context_decay: f64,
}

impl Default for GenOptions {
    fn default() -> Self {
        Self {
            router_skew: 1.0,
            logit_scale: 4.0,
            context_decay: 0.7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Layer {
    pub mix: Vec<f64>,
    pub router: Vec<f64>,
    pub router_bias: Vec<f64>,
    pub experts: Vec<ExpertWeights>,
}

#[derive(Debug, Clone)]
pub struct MoEModel {
    shape: MoEShape,
    options: GenOptions,
    embed: Vec<f64>,
    unembed: Vec<f64>,
    layers: Vec<Layer>,
}

fn uniform_fill(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    // Uniform on [-a, a] has standard deviation a / sqrt(3).
    let a = std * 3f64.sqrt();
    (0..n).map(|_| rng.random_range(-a..a)).collect()
}

pub fn gen_model(shape: MoEShape, seed: u64) -> Result<MoEModel> {
    gen_model_with(shape, GenOptions::default(), seed)
}

pub fn gen_model_with(shape: MoEShape, options: GenOptions, seed: u64) -> Result<MoEModel> {
    shape.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = shape.d_model;
    let f = shape.d_ff;
    let embed = uniform_fill(&mut rng, shape.vocab * d, 1.0);
    let unembed = uniform_fill(&mut rng, shape.vocab * d, 1.0 / (d as f64).sqrt());
    let mut layers = Vec::with_capacity(shape.n_layers);
    for _ in 0..shape.n_layers {
        let mix = uniform_fill(&mut rng, d * d, 1.0 / (d as f64).sqrt());
        let router = uniform_fill(&mut rng, shape.n_experts * d, 1.0 / (d as f64).sqrt());
        let router_bias = (0..shape.n_experts)
            .map(|e| -options.router_skew * ((1 + e) as f64).ln())
            .collect();
        let mut experts = Vec::with_capacity(shape.n_experts);
        for _ in 0..shape.n_experts {
            let up = QuantMatrix::from_real(f, d, uniform_fill(&mut rng, f * d, 1.0 / (d as f64).sqrt()))?;
            let gate = QuantMatrix::from_real(f, d, uniform_fill(&mut rng, f * d, 1.0 / (d as f64).sqrt()))?;
            let down = QuantMatrix::from_real(d, f, uniform_fill(&mut rng, d * f, 1.0 / (f as f64).sqrt()))?;
            experts.push(ExpertWeights { up, gate, down });
        }
        layers.push(Layer {
            mix,
            router,
            router_bias,
            experts,
        });
    }
    Ok(MoEModel {
        shape,
        options,
        embed,
        unembed,
        layers,
    })
}

/// Logits for the next token plus the routing decision taken at each layer.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    pub logits: Vec<f64>,
    pub routing: Vec<RoutingDecision>,
}

impl StepOutput {
    pub fn greedy(&self) -> TokenId {
        argmax(&self.logits) as TokenId
    }
}

/// Index of the largest value, lowest index on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

fn rms_norm(x: &[f64]) -> Vec<f64> {
    let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms + 1e-6).sqrt();
    x.iter().map(|v| v * inv).collect()
}

fn dense_matvec(w: &[f64], x: &[f64]) -> Vec<f64> {
    w.chunks(x.len())
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

impl MoEModel {
    pub fn shape(&self) -> &MoEShape {
        &self.shape
    }

    pub fn options(&self) -> &GenOptions {
        &self.options
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn param_count(&self) -> usize {
        self.embed.len()
            + self.unembed.len()
            + self
                .layers
                .iter()
                .map(|l| {
                    l.mix.len()
                        + l.router.len()
                        + l.router_bias.len()
                        + l.experts
                            .iter()
                            .map(|e| e.up.real.len() + e.gate.real.len() + e.down.real.len())
                            .sum::<usize>()
                })
                .sum::<usize>()
    }

    /// FNV-1a over every parameter, quantized codes, and scales.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for b in bytes {
                h ^= *b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        let reals = |v: &[f64], feed: &mut dyn FnMut(&[u8])| {
            for x in v {
                feed(&x.to_bits().to_le_bytes());
            }
        };
        reals(&self.embed, &mut feed);
        reals(&self.unembed, &mut feed);
        for l in &self.layers {
            reals(&l.mix, &mut feed);
            reals(&l.router, &mut feed);
            reals(&l.router_bias, &mut feed);
            for e in &l.experts {
                for m in [&e.up, &e.gate, &e.down] {
                    reals(&m.real, &mut feed);
                    for g in &m.groups {
                        feed(&g.codes().map(|c| c as u8));
                        feed(&g.scale().to_bits().to_le_bytes());
                    }
                }
            }
        }
        h
    }

    /// Replaces every expert matrix with its dequantized INT8 version.
    pub fn dequantized(&self) -> Self {
        let mut m = self.clone();
        for l in &mut m.layers {
            for e in &mut l.experts {
                e.up = e.up.dequantized();
                e.gate = e.gate.dequantized();
                e.down = e.down.dequantized();
            }
        }
        m
    }

    /// Replaces expert codes with their reconstruction under `mode`.
    pub fn with_surrogate_experts(&self, mode: ReconstructMode) -> Result<Self> {
        let mut m = self.clone();
        for l in &mut m.layers {
            for e in &mut l.experts {
                e.up = e.up.with_surrogate_codes(mode)?;
                e.gate = e.gate.with_surrogate_codes(mode)?;
                e.down = e.down.with_surrogate_codes(mode)?;
            }
        }
        Ok(m)
    }

    fn embedding(&self, token: TokenId) -> Result<&[f64]> {
        let t = token as usize;
        if t >= self.shape.vocab {
            return Err(Error::invalid(format!("token {token} outside vocab {}", self.shape.vocab)));
        }
        let d = self.shape.d_model;
        Ok(&self.embed[t * d..(t + 1) * d])
    }

    /// Mixture-of-experts block for one normalized hidden vector.
    pub fn moe_layer(
        &self,
        layer: usize,
        u: &[f64],
        view: WeightView,
        permitted: Option<&[usize]>,
    ) -> Result<(Vec<f64>, RoutingDecision)> {
        let l = &self.layers[layer];
        let mut router_logits = dense_matvec(&l.router, u);
        for (r, b) in router_logits.iter_mut().zip(&l.router_bias) {
            *r += b;
        }
        let decision = route(&softmax(&router_logits), self.shape.top_k, permitted)?;
        let mut out = vec![0.0; self.shape.d_model];
        for (&e, &g) in decision.selected.iter().zip(&decision.gates) {
            let y = expert_forward(u, &l.experts[e], view)?;
            for (o, v) in out.iter_mut().zip(y) {
                *o += g * v;
            }
        }
        Ok((out, decision))
    }

    /// Next-token logits for `context` (last element is the current token).
    pub fn forward_step(
        &self,
        context: &[TokenId],
        view: impl Into<WeightView>,
        permitted: Option<&[Vec<usize>]>,
    ) -> Result<StepOutput> {
        let view = view.into();
        let (&current, history) = context
            .split_last()
            .ok_or_else(|| Error::invalid("empty context"))?;
        if let Some(p) = permitted {
            if p.len() != self.shape.n_layers {
                return Err(Error::LengthMismatch {
                    left: p.len(),
                    right: self.shape.n_layers,
                });
            }
        }
        let d = self.shape.d_model;
        let mut summary = vec![0.0; d];
        let mut weight_sum = 0.0;
        for &t in history {
            let e = self.embedding(t)?;
            for (s, v) in summary.iter_mut().zip(e) {
                *s = self.options.context_decay * *s + v;
            }
            weight_sum = self.options.context_decay * weight_sum + 1.0;
        }
        if weight_sum > 0.0 {
            summary.iter_mut().for_each(|s| *s /= weight_sum);
        }
        let mut h = self.embedding(current)?.to_vec();
        let mut routing = Vec::with_capacity(self.shape.n_layers);
        for (li, layer) in self.layers.iter().enumerate() {
            let mixed = dense_matvec(&layer.mix, &summary);
            for (x, m) in h.iter_mut().zip(mixed) {
                *x += m;
            }
            let u = rms_norm(&h);
            let (y, decision) = self.moe_layer(li, &u, view, permitted.map(|p| p[li].as_slice()))?;
            for (x, v) in h.iter_mut().zip(y) {
                *x += v;
            }
            routing.push(decision);
        }
        let u = rms_norm(&h);
        let logits = dense_matvec(&self.unembed, &u)
            .into_iter()
            .map(|l| l * self.options.logit_scale)
            .collect();
        Ok(StepOutput { logits, routing })
    }

    /// Plain greedy decoding with the given view and no restriction.
    pub fn greedy_decode(&self, prompt: &[TokenId], n_tokens: usize, view: impl Into<WeightView>) -> Result<Vec<TokenId>> {
        let view = view.into();
        let mut ctx = prompt.to_vec();
        let mut out = Vec::with_capacity(n_tokens);
        for _ in 0..n_tokens {
            let t = self.forward_step(&ctx, view, None)?.greedy();
            ctx.push(t);
            out.push(t);
        }
        Ok(out)
    }
}

/// Parameters of the synthetic routing-trace generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceParams {
    pub n_tokens: usize,
    pub n_experts: usize,
    pub k: usize,
    pub zipf_exponent: f64,
    pub correlation: f64,
    pub seed: u64,
}

/// Zipf-shaped routing with temporal correlation.
///
/// Each token's latent score is `rho * previous + (1 - rho) * fresh`, with
/// `fresh = ln p_e + Gumbel` so independent tokens pick top-k by sampling
/// without replacement in proportion to the Zipf popularity `p_e`.
pub fn gen_routing_trace(p: TraceParams) -> Result<Vec<RoutingDecision>> {
    if !(p.zipf_exponent >= 0.0 && p.zipf_exponent.is_finite()) {
        return Err(Error::invalid(format!("zipf exponent {} must be >= 0", p.zipf_exponent)));
    }
    if !(0.0..=1.0).contains(&p.correlation) {
        return Err(Error::invalid(format!("correlation {} outside [0, 1]", p.correlation)));
    }
    if p.n_experts == 0 || p.k == 0 || p.k > p.n_experts {
        return Err(Error::invalid(format!("k = {} with {} experts", p.k, p.n_experts)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    let log_pop: Vec<f64> = (0..p.n_experts)
        .map(|e| -p.zipf_exponent * ((e + 1) as f64).ln())
        .collect();
    let mut latent: Option<Vec<f64>> = None;
    let mut out = Vec::with_capacity(p.n_tokens);
    for _ in 0..p.n_tokens {
        let fresh: Vec<f64> = log_pop.iter().map(|lp| lp + gumbel(&mut rng)).collect();
        let z = match latent {
            None => fresh,
            Some(prev) => prev
                .iter()
                .zip(&fresh)
                .map(|(a, b)| p.correlation * a + (1.0 - p.correlation) * b)
                .collect(),
        };
        out.push(route(&softmax(&z), p.k, None)?);
        latent = Some(z);
    }
    Ok(out)
}

fn gumbel(rng: &mut ChaCha8Rng) -> f64 {
    let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
    -(-u.ln()).ln()
}
