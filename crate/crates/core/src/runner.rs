//! Scenario configs, sweeps, and result emission.
//!
//! A config file holds one or more `[[scenario]]` tables. Each scenario
//! sweeps architectures x SD schemes x batch sizes. Self-MSB schemes get
//! their accept length and pool churn from seeded toy-model runs; analytic
//! schemes take them from the `[scenario.analytic.*]` tables.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bitnest::ReconstructMode;
use crate::elastic_sd::{PoolPolicy, SdConfig, SdSession};
use crate::error::{Error, Result};
use crate::hwmodel::{
    build_workloads, cache_state, mode_select, step_cost, BaselineArch, CacheState, DecodeMode, HwConfig,
    ModelGeometry, SdParams, SdScheme, StepCost, WorkloadSet,
};
use crate::toymoe::{gen_model_with, GenOptions, MoEShape, PrecisionMode, TokenId, WeightView};

pub const EXAMPLE_CONFIG: &str = include_str!("../configs/example.toml");
pub const ABLATION_CONFIG: &str = include_str!("../configs/ablation.toml");

/// Toy model and decoding run used to measure accept length.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub n_experts: usize,
    pub top_k: usize,
    pub n_layers: usize,
    pub vocab: usize,
    pub router_skew: f64,
    pub logit_scale: f64,
    /// Context-summary decay; higher values correlate consecutive routings.
    pub context_decay: f64,
    /// Concurrent lanes sharing one pool.
    pub lanes: usize,
    pub prompt_len: usize,
    pub n_tokens: usize,
    /// One model and prompt set per seed.
    pub seeds: Vec<u64>,
}

impl Default for ToyConfig {
    fn default() -> Self {
        let opts = GenOptions::default();
        Self {
            d_model: 64,
            d_ff: 128,
            n_experts: 8,
            top_k: 2,
            n_layers: 2,
            vocab: 256,
            router_skew: opts.router_skew,
            logit_scale: opts.logit_scale,
            context_decay: opts.context_decay,
            lanes: 1,
            prompt_len: 8,
            n_tokens: 40,
            seeds: (0..6).collect(),
        }
    }
}

impl ToyConfig {
    pub fn shape(&self) -> MoEShape {
        MoEShape {
            d_model: self.d_model,
            d_ff: self.d_ff,
            n_experts: self.n_experts,
            top_k: self.top_k,
            n_layers: self.n_layers,
            vocab: self.vocab,
        }
    }

    pub fn options(&self) -> GenOptions {
        GenOptions {
            router_skew: self.router_skew,
            logit_scale: self.logit_scale,
            context_decay: self.context_decay,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SdSection {
    pub width: usize,
    pub depth: usize,
    /// Defaults to `width * depth`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub verify_count: Option<usize>,
    /// Toy-model pool size per layer.
    pub pool_capacity: usize,
    pub hotness_decay: f64,
    pub draft_precision: ReconstructMode,
    /// Cache MSB and LSB slices as separate items on the HB tier.
    pub bit_sliced_cache: bool,
}

impl Default for SdSection {
    fn default() -> Self {
        Self {
            width: 2,
            depth: 4,
            verify_count: None,
            pool_capacity: 4,
            hotness_decay: 0.5,
            draft_precision: ReconstructMode::LsbAugment,
            bit_sliced_cache: true,
        }
    }
}

impl SdSection {
    pub fn verify_count(&self) -> usize {
        self.verify_count.unwrap_or(self.width * self.depth)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TraceSection {
    /// Zipf exponent of expert popularity at hardware scale.
    pub zipf: f64,
}

impl Default for TraceSection {
    fn default() -> Self {
        Self { zipf: 0.8 }
    }
}

/// Parameterized draft scheme; values are illustrative defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalyticScheme {
    pub accept_length: f64,
    /// Optional `[batch, accept_length]` points, linearly interpolated.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub accept_curve: Vec<[f64; 2]>,
    pub draft_param_bytes: f64,
    pub draft_macs_per_token: f64,
    #[serde(default = "one")]
    pub expert_footprint_multiplier: f64,
}

fn one() -> f64 {
    1.0
}

impl AnalyticScheme {
    pub fn accept_at(&self, batch: usize) -> f64 {
        let b = batch as f64;
        let c = &self.accept_curve;
        match c.len() {
            0 => self.accept_length,
            _ if b <= c[0][0] => c[0][1],
            n if b >= c[n - 1][0] => c[n - 1][1],
            _ => {
                let i = c.iter().position(|p| p[0] > b).unwrap_or(c.len() - 1);
                let (x0, y0, x1, y1) = (c[i - 1][0], c[i - 1][1], c[i][0], c[i][1]);
                y0 + (y1 - y0) * (b - x0) / (x1 - x0)
            }
        }
    }

    fn validate(&self, key: &str, depth: usize) -> Result<()> {
        let in_range = |a: f64| (0.0..=depth as f64).contains(&a);
        if !in_range(self.accept_length) {
            return Err(Error::validation(format!("{key}.accept_length"), "must be in [0, depth]"));
        }
        for (i, p) in self.accept_curve.iter().enumerate() {
            if !(p[0] >= 1.0) || !in_range(p[1]) {
                return Err(Error::validation(format!("{key}.accept_curve"), "points need batch >= 1 and accept in [0, depth]"));
            }
            if i > 0 && p[0] <= self.accept_curve[i - 1][0] {
                return Err(Error::validation(format!("{key}.accept_curve"), "batches must increase"));
            }
        }
        if !(self.draft_param_bytes >= 0.0 && self.draft_macs_per_token >= 0.0) {
            return Err(Error::validation(key, "draft costs must be nonnegative"));
        }
        if !(self.expert_footprint_multiplier >= 1.0) {
            return Err(Error::validation(format!("{key}.expert_footprint_multiplier"), "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalyticSection {
    pub eagle_sd: AnalyticScheme,
    pub slm_sd: AnalyticScheme,
    pub quant_sd: AnalyticScheme,
}

impl Default for AnalyticSection {
    fn default() -> Self {
        Self {
            eagle_sd: AnalyticScheme {
                accept_length: 1.3,
                accept_curve: Vec::new(),
                draft_param_bytes: 4.5e8,
                draft_macs_per_token: 4.0e8,
                expert_footprint_multiplier: 1.0,
            },
            slm_sd: AnalyticScheme {
                accept_length: 1.1,
                accept_curve: Vec::new(),
                draft_param_bytes: 1.6e9,
                draft_macs_per_token: 1.5e9,
                expert_footprint_multiplier: 1.0,
            },
            quant_sd: AnalyticScheme {
                accept_length: 3.0,
                accept_curve: Vec::new(),
                draft_param_bytes: 0.0,
                draft_macs_per_token: 0.0,
                expert_footprint_multiplier: 2.0,
            },
        }
    }
}

impl AnalyticSection {
    pub fn get(&self, scheme: SdScheme) -> Option<&AnalyticScheme> {
        match scheme {
            SdScheme::EagleSd => Some(&self.eagle_sd),
            SdScheme::SlmSd => Some(&self.slm_sd),
            SdScheme::QuantSd => Some(&self.quant_sd),
            _ => None,
        }
    }
}

fn all_archs() -> Vec<BaselineArch> {
    BaselineArch::ALL.to_vec()
}

fn all_schemes() -> Vec<SdScheme> {
    vec![
        SdScheme::ArOnly,
        SdScheme::ElasticSd,
        SdScheme::RandomPoolSd,
        SdScheme::EagleSd,
        SdScheme::SlmSd,
        SdScheme::QuantSd,
    ]
}

fn default_batches() -> Vec<usize> {
    vec![1, 2, 4, 8, 16]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub id: String,
    #[serde(default = "all_archs")]
    pub archs: Vec<BaselineArch>,
    #[serde(default = "all_schemes")]
    pub schemes: Vec<SdScheme>,
    #[serde(default = "default_batches")]
    pub batch_sizes: Vec<usize>,
    #[serde(default)]
    pub geometry: ModelGeometry,
    #[serde(default)]
    pub hw: HwConfig,
    #[serde(default)]
    pub toy: ToyConfig,
    #[serde(default)]
    pub sd: SdSection,
    #[serde(default)]
    pub trace: TraceSection,
    #[serde(default)]
    pub analytic: AnalyticSection,
}

impl ScenarioConfig {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            archs: all_archs(),
            schemes: all_schemes(),
            batch_sizes: default_batches(),
            geometry: ModelGeometry::default(),
            hw: HwConfig::default(),
            toy: ToyConfig::default(),
            sd: SdSection::default(),
            trace: TraceSection::default(),
            analytic: AnalyticSection::default(),
        }
    }

    /// Hardware geometry with the trace popularity applied.
    pub fn geometry(&self) -> ModelGeometry {
        ModelGeometry {
            expert_zipf: self.trace.zipf,
            ..self.geometry
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty()
            || !self.id.chars().all(|c| c.is_ascii_alphanumeric() || "_-./".contains(c))
        {
            return Err(Error::validation("id", "must be nonempty and use only [A-Za-z0-9_./-]"));
        }
        if self.archs.is_empty() {
            return Err(Error::validation("archs", "must list at least one architecture"));
        }
        if self.schemes.is_empty() {
            return Err(Error::validation("schemes", "must list at least one scheme"));
        }
        if self.batch_sizes.is_empty() || self.batch_sizes.contains(&0) {
            return Err(Error::validation("batch_sizes", "must be a nonempty list of positive sizes"));
        }
        self.geometry().validate()?;
        self.hw.validate()?;
        let t = &self.toy;
        t.shape()
            .validate()
            .map_err(|e| Error::validation("toy", e.to_string()))?;
        for (key, v) in [("toy.lanes", t.lanes), ("toy.prompt_len", t.prompt_len), ("toy.n_tokens", t.n_tokens)] {
            if v == 0 {
                return Err(Error::validation(key, "must be positive"));
            }
        }
        if t.seeds.is_empty() {
            return Err(Error::validation("toy.seeds", "at least one seed is required"));
        }
        if !(t.context_decay >= 0.0 && t.context_decay < 1.0) {
            return Err(Error::validation("toy.context_decay", "must be in [0, 1)"));
        }
        let s = &self.sd;
        if s.width == 0 || s.depth == 0 {
            return Err(Error::validation("sd.width", "width and depth must be positive"));
        }
        if s.verify_count == Some(0) {
            return Err(Error::validation("sd.verify_count", "must be positive"));
        }
        if s.pool_capacity < t.top_k {
            return Err(Error::validation(
                "sd.pool_capacity",
                format!("pool_capacity {} must be at least top_k {}", s.pool_capacity, t.top_k),
            ));
        }
        if s.pool_capacity > t.n_experts {
            return Err(Error::validation("sd.pool_capacity", "exceeds toy.n_experts"));
        }
        if !(0.0..=1.0).contains(&s.hotness_decay) {
            return Err(Error::validation("sd.hotness_decay", "must be in [0, 1]"));
        }
        if !(self.trace.zipf >= 0.0 && self.trace.zipf.is_finite()) {
            return Err(Error::validation("trace.zipf", "must be nonnegative"));
        }
        for scheme in [SdScheme::EagleSd, SdScheme::SlmSd, SdScheme::QuantSd] {
            let a = self.analytic.get(scheme).expect("analytic scheme");
            a.validate(&format!("analytic.{}", scheme.name()), s.depth)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    scenario: Vec<ScenarioConfig>,
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, column)
}

/// Parses and validates config text; `origin` labels errors.
pub fn parse_config(text: &str, origin: &Path) -> Result<Vec<ScenarioConfig>> {
    let file: ConfigFile = toml::from_str(text).map_err(|e| {
        let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
        Error::ConfigParse {
            path: origin.to_path_buf(),
            line,
            column,
            message: e.message().to_string(),
        }
    })?;
    if file.scenario.is_empty() {
        return Err(Error::validation("scenario", "config defines no scenarios"));
    }
    let mut seen = HashSet::new();
    for s in &file.scenario {
        s.validate().map_err(|e| Error::Scenario {
            scenario: s.id.clone(),
            source: Box::new(e),
        })?;
        if !seen.insert(s.id.as_str()) {
            return Err(Error::validation("id", format!("duplicate scenario id `{}`", s.id)));
        }
    }
    Ok(file.scenario)
}

pub fn load_config(path: impl AsRef<Path>) -> Result<Vec<ScenarioConfig>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)?;
    parse_config(&text, path)
}

/// Serializes scenarios back to config text.
pub fn to_config_text(scenarios: &[ScenarioConfig]) -> Result<String> {
    let file = ConfigFile {
        scenario: scenarios.to_vec(),
    };
    toml::to_string(&file).map_err(|e| Error::invalid(format!("cannot serialize config: {e}")))
}

/// Averages over the seeded toy runs of one scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FunctionalStats {
    pub accept_length: f64,
    pub pool_churn: f64,
    pub throttle_violations: usize,
    pub draft_decisions: usize,
    pub mean_verify_tokens: f64,
    /// Seeds whose emitted stream differed from greedy AR decoding.
    pub stream_mismatches: usize,
}

pub fn toy_prompts(cfg: &ToyConfig, seed: u64) -> Vec<Vec<TokenId>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7072_6f6d_7074);
    (0..cfg.lanes)
        .map(|_| (0..cfg.prompt_len).map(|_| rng.random_range(0..cfg.vocab as TokenId)).collect())
        .collect()
}

/// Runs the self-MSB decoder over every seed and checks each lane against greedy AR.
/// Accept length, churn, violations, decisions, verify tokens, stream match.
type SeedStats = (f64, f64, usize, usize, f64, bool);

pub fn measure_functional(cfg: &ScenarioConfig, policy: PoolPolicy) -> Result<FunctionalStats> {
    let toy = &cfg.toy;
    let per_seed: Vec<Result<SeedStats>> = toy
        .seeds
        .par_iter()
        .map(|&seed| {
            let model = gen_model_with(toy.shape(), toy.options(), seed)?;
            let prompts = toy_prompts(toy, seed);
            let sd = SdConfig {
                width: cfg.sd.width,
                depth: cfg.sd.depth,
                verify_count: cfg.sd.verify_count,
                pool_capacity: cfg.sd.pool_capacity,
                hotness_decay: cfg.sd.hotness_decay,
                policy,
                draft_view: WeightView::Quantized(cfg.sd.draft_precision),
                seed,
            };
            let run = SdSession::new(&model, &prompts, sd)?.run(toy.n_tokens)?;
            let mut matches = true;
            for (prompt, got) in prompts.iter().zip(&run.tokens) {
                let want = model.greedy_decode(prompt, toy.n_tokens, PrecisionMode::Int8Full)?;
                matches &= &want == got;
            }
            Ok((
                run.mean_accept_length(),
                run.pool_churn(),
                run.throttle_violations(),
                run.draft_decision_count(),
                run.mean_verify_tokens(),
                matches,
            ))
        })
        .collect();
    let n = per_seed.len() as f64;
    let mut stats = FunctionalStats {
        accept_length: 0.0,
        pool_churn: 0.0,
        throttle_violations: 0,
        draft_decisions: 0,
        mean_verify_tokens: 0.0,
        stream_mismatches: 0,
    };
    for r in per_seed {
        let (acc, churn, viol, decisions, verify, ok) = r?;
        stats.accept_length += acc / n;
        stats.pool_churn += churn / n;
        stats.throttle_violations += viol;
        stats.draft_decisions += decisions;
        stats.mean_verify_tokens += verify / n;
        stats.stream_mismatches += usize::from(!ok);
    }
    Ok(stats)
}

/// Whether `scheme` can run on `arch`. Self-MSB drafting needs bit-sliced MACs and HB.
pub fn supports(arch: BaselineArch, scheme: SdScheme) -> bool {
    !scheme.is_self_msb() || arch == BaselineArch::Ours
}

/// Everything computed for one (arch, scheme, batch) point.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub cache: CacheState,
    pub workloads: WorkloadSet,
    pub ar: StepCost,
    pub sd: Option<StepCost>,
    pub chosen: StepCost,
}

pub fn evaluate(
    geom: &ModelGeometry,
    hw: &HwConfig,
    arch: BaselineArch,
    scheme: SdScheme,
    sd: Option<&SdParams>,
    batch: usize,
    bit_sliced_cache: bool,
) -> Result<Evaluation> {
    // An SD layout that does not fit in HB leaves the system AR-only.
    let (cache, scheme) = match cache_state(geom, hw, arch, scheme, sd, batch, bit_sliced_cache) {
        Ok(c) => (c, scheme),
        Err(Error::HbCapacity { .. }) if scheme != SdScheme::ArOnly => (
            cache_state(geom, hw, arch, SdScheme::ArOnly, None, batch, bit_sliced_cache)?,
            SdScheme::ArOnly,
        ),
        Err(e) => return Err(e),
    };
    let sd = if scheme == SdScheme::ArOnly { None } else { sd };
    let workloads = build_workloads(geom, hw, arch, scheme, sd, &cache, batch)?;
    let ar = step_cost(hw, &workloads, DecodeMode::Ar, None)?;
    let sd_cost = match sd {
        Some(p) => Some(step_cost(hw, &workloads, DecodeMode::Sd, Some(p))?),
        None => None,
    };
    let chosen = mode_select(&ar, sd_cost.as_ref());
    Ok(Evaluation {
        cache,
        workloads,
        ar,
        sd: sd_cost,
        chosen,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub scenario: String,
    pub batch: usize,
    pub arch: BaselineArch,
    pub scheme: SdScheme,
    pub mode: DecodeMode,
    pub accept_length: Option<f64>,
    pub accept_rate: Option<f64>,
    pub ar_hit_rate: f64,
    pub verify_hit_rate: Option<f64>,
    pub pool_experts: Option<usize>,
    pub depth: Option<usize>,
    pub ar_step_s: f64,
    pub draft_step_s: Option<f64>,
    pub verify_step_s: Option<f64>,
    pub pool_stall_s: Option<f64>,
    pub ar_per_token_s: f64,
    pub sd_per_token_s: Option<f64>,
    pub per_token_latency_s: f64,
    pub energy_compute_j: f64,
    pub energy_ext_mem_j: f64,
    pub energy_hb_mem_j: f64,
    pub energy_comm_j: f64,
    pub energy_static_j: f64,
    pub energy_total_j: f64,
    pub sd_speedup: Option<f64>,
    pub speedup_vs_xpu: f64,
    pub comm_warning: bool,
}

const CSV_HEADER: &str = "scenario,batch,arch,scheme,mode,accept_length,accept_rate,ar_hit_rate,verify_hit_rate,\
pool_experts,depth,ar_step_s,draft_step_s,verify_step_s,pool_stall_s,ar_per_token_s,sd_per_token_s,\
per_token_latency_s,energy_compute_j,energy_ext_mem_j,energy_hb_mem_j,energy_comm_j,energy_static_j,\
energy_total_j,sd_speedup,speedup_vs_xpu,comm_warning";

fn sd_params_for(
    cfg: &ScenarioConfig,
    scheme: SdScheme,
    batch: usize,
    functional: &dyn Fn(SdScheme) -> Result<FunctionalStats>,
) -> Result<Option<SdParams>> {
    let base = SdParams {
        width: cfg.sd.width,
        depth: cfg.sd.depth,
        verify_count: cfg.sd.verify_count(),
        accept_length: 0.0,
        pool_churn: 0.0,
        draft_param_bytes: 0.0,
        draft_macs_per_token: 0.0,
        expert_footprint_multiplier: 1.0,
    };
    Ok(match scheme {
        SdScheme::ArOnly => None,
        SdScheme::ElasticSd | SdScheme::RandomPoolSd => {
            let stats = functional(scheme)?;
            Some(SdParams {
                accept_length: stats.accept_length,
                pool_churn: stats.pool_churn,
                ..base
            })
        }
        _ => {
            let a = cfg.analytic.get(scheme).expect("analytic scheme");
            Some(SdParams {
                accept_length: a.accept_at(batch),
                draft_param_bytes: a.draft_param_bytes,
                draft_macs_per_token: a.draft_macs_per_token,
                expert_footprint_multiplier: a.expert_footprint_multiplier,
                ..base
            })
        }
    })
}

fn policy_for(scheme: SdScheme) -> PoolPolicy {
    if scheme == SdScheme::RandomPoolSd {
        PoolPolicy::Random
    } else {
        PoolPolicy::Hotness
    }
}

fn run_scenario_inner(cfg: &ScenarioConfig) -> Result<Vec<ResultRow>> {
    cfg.validate()?;
    let geom = cfg.geometry();
    let mut stats_cache: Vec<(SdScheme, FunctionalStats)> = Vec::new();
    for &scheme in &cfg.schemes {
        if scheme.is_self_msb() && cfg.archs.iter().any(|&a| supports(a, scheme)) {
            stats_cache.push((scheme, measure_functional(cfg, policy_for(scheme))?));
        }
    }
    let functional = |scheme: SdScheme| -> Result<FunctionalStats> {
        stats_cache
            .iter()
            .find(|(s, _)| *s == scheme)
            .map(|(_, st)| *st)
            .ok_or_else(|| Error::invalid("missing functional measurement"))
    };

    let mut xpu = Vec::with_capacity(cfg.batch_sizes.len());
    for &b in &cfg.batch_sizes {
        let e = evaluate(&geom, &cfg.hw, BaselineArch::Xpu, SdScheme::ArOnly, None, b, cfg.sd.bit_sliced_cache)?;
        xpu.push(e.chosen.per_token_latency());
    }

    let mut rows = Vec::new();
    for &arch in &cfg.archs {
        for &scheme in &cfg.schemes {
            if !supports(arch, scheme) {
                continue;
            }
            for (bi, &batch) in cfg.batch_sizes.iter().enumerate() {
                let params = sd_params_for(cfg, scheme, batch, &functional)?;
                let e = evaluate(&geom, &cfg.hw, arch, scheme, params.as_ref(), batch, cfg.sd.bit_sliced_cache)?;
                rows.push(make_row(cfg, arch, scheme, batch, params.as_ref(), &e, xpu[bi]));
            }
        }
    }
    Ok(rows)
}

fn make_row(
    cfg: &ScenarioConfig,
    arch: BaselineArch,
    scheme: SdScheme,
    batch: usize,
    params: Option<&SdParams>,
    e: &Evaluation,
    xpu_per_token: f64,
) -> ResultRow {
    let energy = e.chosen.per_token_energy();
    let per_token = e.chosen.per_token_latency();
    let sd = e.sd.as_ref();
    ResultRow {
        scenario: cfg.id.clone(),
        batch,
        arch,
        scheme,
        mode: e.chosen.mode,
        accept_length: params.map(|p| p.accept_length),
        accept_rate: params.map(|p| p.accept_length / p.depth as f64),
        ar_hit_rate: e.cache.ar_hit,
        verify_hit_rate: sd.map(|_| e.cache.verify_hit),
        pool_experts: (sd.is_some() && scheme.is_self_msb()).then_some(e.cache.pool_experts),
        depth: sd.and(params).map(|p| p.depth),
        ar_step_s: e.ar.latency,
        draft_step_s: sd.map(|s| s.draft_latency),
        verify_step_s: sd.map(|s| s.verify_latency),
        pool_stall_s: sd.map(|s| s.stall),
        ar_per_token_s: e.ar.per_token_latency(),
        sd_per_token_s: sd.map(|s| s.per_token_latency()),
        per_token_latency_s: per_token,
        energy_compute_j: energy.compute,
        energy_ext_mem_j: energy.ext_mem,
        energy_hb_mem_j: energy.hb_mem,
        energy_comm_j: energy.comm,
        energy_static_j: energy.static_,
        energy_total_j: energy.total(),
        sd_speedup: sd.map(|s| e.ar.per_token_latency() / s.per_token_latency()),
        speedup_vs_xpu: xpu_per_token / per_token,
        comm_warning: e.chosen.comm_exceeds_ext,
    }
}

pub fn run_scenario(cfg: &ScenarioConfig) -> Result<Vec<ResultRow>> {
    run_scenario_inner(cfg).map_err(|e| Error::Scenario {
        scenario: cfg.id.clone(),
        source: Box::new(e),
    })
}

/// Runs every scenario and returns rows ordered by scenario id.
pub fn run_scenarios(scenarios: &[ScenarioConfig], concurrent: bool) -> Result<Vec<ResultRow>> {
    let results: Vec<Result<Vec<ResultRow>>> = if concurrent {
        scenarios.par_iter().map(run_scenario).collect()
    } else {
        scenarios.iter().map(run_scenario).collect()
    };
    let mut per_scenario = results.into_iter().collect::<Result<Vec<_>>>()?;
    per_scenario.sort_by(|a, b| a.first().map(|r| &r.scenario).cmp(&b.first().map(|r| &r.scenario)));
    Ok(per_scenario.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OutputFormat {
    Csv,
    Json,
}

impl FromStr for OutputFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(OutputFormat::Csv),
            "json" => Ok(OutputFormat::Json),
            other => Err(Error::invalid(format!("unknown format `{other}` (expected csv or json)"))),
        }
    }
}

fn num(x: f64) -> String {
    format!("{x:.8e}")
}

fn opt_num(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

fn opt_int(x: Option<usize>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

/// CSV with unit-suffixed headers and floats at 9 significant digits.
pub fn to_csv(rows: &[ResultRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::EmptyResults);
    }
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let fields = [
            r.scenario.clone(),
            r.batch.to_string(),
            r.arch.name().to_string(),
            r.scheme.name().to_string(),
            r.mode.name().to_string(),
            opt_num(r.accept_length),
            opt_num(r.accept_rate),
            num(r.ar_hit_rate),
            opt_num(r.verify_hit_rate),
            opt_int(r.pool_experts),
            opt_int(r.depth),
            num(r.ar_step_s),
            opt_num(r.draft_step_s),
            opt_num(r.verify_step_s),
            opt_num(r.pool_stall_s),
            num(r.ar_per_token_s),
            opt_num(r.sd_per_token_s),
            num(r.per_token_latency_s),
            num(r.energy_compute_j),
            num(r.energy_ext_mem_j),
            num(r.energy_hb_mem_j),
            num(r.energy_comm_j),
            num(r.energy_static_j),
            num(r.energy_total_j),
            opt_num(r.sd_speedup),
            num(r.speedup_vs_xpu),
            r.comm_warning.to_string(),
        ];
        let _ = writeln!(out, "{}", fields.join(","));
    }
    Ok(out)
}

/// JSON array of rows at full float precision.
pub fn to_json(rows: &[ResultRow]) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::EmptyResults);
    }
    Ok(serde_json::to_string_pretty(rows)? + "\n")
}

pub fn render(rows: &[ResultRow], format: OutputFormat) -> Result<String> {
    match format {
        OutputFormat::Csv => to_csv(rows),
        OutputFormat::Json => to_json(rows),
    }
}

pub fn emit(rows: &[ResultRow], format: OutputFormat, path: impl AsRef<Path>) -> Result<()> {
    let text = render(rows, format)?;
    std::fs::write(path, text)?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Ablation {
    HotnessVsRandom,
    BitAxis,
    CacheCapacity,
}

impl Ablation {
    pub const ALL: [Ablation; 3] = [Ablation::HotnessVsRandom, Ablation::BitAxis, Ablation::CacheCapacity];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::HotnessVsRandom => "hotness_vs_random",
            Ablation::BitAxis => "bit_axis",
            Ablation::CacheCapacity => "cache_capacity",
        }
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown ablation `{s}`")))
    }
}

pub const CACHE_CAPACITIES_GIB: [f64; 5] = [2.0, 3.0, 4.0, 6.0, 8.0];

/// Scenario variants compared by one ablation, derived from `base`.
pub fn ablation_scenarios(which: Ablation, base: &ScenarioConfig) -> Vec<ScenarioConfig> {
    let prefix = which.name();
    let variant = |suffix: &str| ScenarioConfig {
        id: format!("{prefix}/{suffix}"),
        archs: vec![BaselineArch::Ours],
        ..base.clone()
    };
    match which {
        Ablation::HotnessVsRandom => vec![ScenarioConfig {
            schemes: vec![SdScheme::ElasticSd, SdScheme::RandomPoolSd],
            ..variant("pool")
        }],
        Ablation::BitAxis => [ReconstructMode::Truncate, ReconstructMode::MsbRound, ReconstructMode::LsbAugment]
            .into_iter()
            .map(|mode| {
                let mut s = variant(&format!("{mode:?}").to_lowercase());
                s.schemes = vec![SdScheme::ElasticSd];
                s.sd.draft_precision = mode;
                s
            })
            .collect(),
        Ablation::CacheCapacity => CACHE_CAPACITIES_GIB
            .iter()
            .flat_map(|&cap| {
                [true, false].into_iter().map(move |sliced| (cap, sliced))
            })
            .map(|(cap, sliced)| {
                let tag = if sliced { "sliced" } else { "unsliced" };
                let mut s = variant(&format!("hb{cap}gib/{tag}"));
                s.schemes = vec![SdScheme::ElasticSd];
                s.hw.hb_capacity_gib = cap;
                s.sd.bit_sliced_cache = sliced;
                s
            })
            .collect(),
    }
}

pub fn ablation_base() -> Result<ScenarioConfig> {
    let mut s = parse_config(ABLATION_CONFIG, Path::new("configs/ablation.toml"))?;
    Ok(s.remove(0))
}

/// Runs one ablation on the bundled ablation config.
pub fn ablation_suite(which: Ablation) -> Result<Vec<ResultRow>> {
    run_scenarios(&ablation_scenarios(which, &ablation_base()?), true)
}
