//! Analytical latency and energy model of a hybrid-bonded (HB) MoE serving
//! system and the memory-centric baselines it is compared against.
//!
//! HB banks pair one-to-one with PEs, so usable HB bandwidth scales with the
//! fraction of active PEs (coupled roofline). External LPDDR streams through
//! one shared interconnect, so its bandwidth does not (decoupled roofline).
//! Phase latency is the max of the overlapped resource times.

use serde::{Deserialize, Serialize};

use crate::elastic_sd::sd_speedup;
use crate::error::{Error, Result};
use crate::expert_cache::{che_hit_rate, expected_unique_experts, zipf_popularity, Popularity};

const GB: f64 = 1e9;
const GIB: f64 = (1u64 << 30) as f64;
const PJ: f64 = 1e-12;
const TERA: f64 = 1e12;

/// Hardware parameters. Units are carried in the key names; accessors
/// return SI values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HwConfig {
    pub hb_banks: u32,
    pub hb_bw_per_bank_gbps: f64,
    pub hb_capacity_gib: f64,
    pub ext_bw_gbps: f64,
    pub ext_capacity_gib: f64,
    pub ext_channels: u32,
    pub macs_per_pe_per_cycle: u64,
    pub clock_ghz: f64,
    pub aggr_link_gbps: f64,
    pub streamline_gbps: f64,
    pub hb_energy_pj_per_bit: f64,
    pub ext_energy_pj_per_bit: f64,
    /// In-DRAM access energy of PIM/NMP tiers.
    pub internal_energy_pj_per_bit: f64,
    pub link_energy_pj_per_bit: f64,
    pub compute_energy_pj_per_mac: f64,
    pub static_power_w: f64,
    pub hb_derate: f64,
    pub ext_derate: f64,
    /// Fraction of PEs busy during drafting (expert-to-PE skew knob).
    pub draft_active_pe_fraction: f64,
    pub pim_bw_multiplier: f64,
    pub pim_tmacs: f64,
    pub logic_pim_bw_multiplier: f64,
    pub logic_pim_compute_multiplier: f64,
    pub nmp_channels: u32,
    pub nmp_capacity_gib: f64,
    pub nmp_tmacs: f64,
    pub nmp_bw_multiplier: f64,
}

impl Default for HwConfig {
    fn default() -> Self {
        Self {
            hb_banks: 32,
            hb_bw_per_bank_gbps: 51.2,
            hb_capacity_gib: 8.0,
            ext_bw_gbps: 102.4,
            ext_capacity_gib: 64.0,
            ext_channels: 8,
            macs_per_pe_per_cycle: 16 * 32 * 32,
            clock_ghz: 1.0,
            aggr_link_gbps: 32.0,
            streamline_gbps: 128.0,
            hb_energy_pj_per_bit: 0.43,
            ext_energy_pj_per_bit: 3.88,
            internal_energy_pj_per_bit: 1.94,
            link_energy_pj_per_bit: 0.5,
            compute_energy_pj_per_mac: 0.2,
            static_power_w: 10.0,
            hb_derate: 0.03,
            ext_derate: 0.01,
            draft_active_pe_fraction: 1.0,
            pim_bw_multiplier: 8.0,
            pim_tmacs: 1.64,
            logic_pim_bw_multiplier: 4.0,
            logic_pim_compute_multiplier: 4.0,
            nmp_channels: 2,
            nmp_capacity_gib: 16.0,
            nmp_tmacs: 13.1,
            nmp_bw_multiplier: 8.0,
        }
    }
}

impl HwConfig {
    /// 16 PEs paired with 4 GiB of HB.
    pub fn hb16() -> Self {
        Self {
            hb_banks: 16,
            hb_capacity_gib: 4.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("hb_banks", self.hb_banks as f64),
            ("hb_bw_per_bank_gbps", self.hb_bw_per_bank_gbps),
            ("hb_capacity_gib", self.hb_capacity_gib),
            ("ext_bw_gbps", self.ext_bw_gbps),
            ("ext_capacity_gib", self.ext_capacity_gib),
            ("ext_channels", self.ext_channels as f64),
            ("macs_per_pe_per_cycle", self.macs_per_pe_per_cycle as f64),
            ("clock_ghz", self.clock_ghz),
            ("aggr_link_gbps", self.aggr_link_gbps),
            ("streamline_gbps", self.streamline_gbps),
            ("pim_bw_multiplier", self.pim_bw_multiplier),
            ("pim_tmacs", self.pim_tmacs),
            ("logic_pim_bw_multiplier", self.logic_pim_bw_multiplier),
            ("logic_pim_compute_multiplier", self.logic_pim_compute_multiplier),
            ("nmp_channels", self.nmp_channels as f64),
            ("nmp_capacity_gib", self.nmp_capacity_gib),
            ("nmp_tmacs", self.nmp_tmacs),
            ("nmp_bw_multiplier", self.nmp_bw_multiplier),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::validation(format!("hw.{key}"), "must be positive"));
            }
        }
        let nonneg = [
            ("hb_energy_pj_per_bit", self.hb_energy_pj_per_bit),
            ("ext_energy_pj_per_bit", self.ext_energy_pj_per_bit),
            ("internal_energy_pj_per_bit", self.internal_energy_pj_per_bit),
            ("link_energy_pj_per_bit", self.link_energy_pj_per_bit),
            ("compute_energy_pj_per_mac", self.compute_energy_pj_per_mac),
            ("static_power_w", self.static_power_w),
        ];
        for (key, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::validation(format!("hw.{key}"), "must be nonnegative"));
            }
        }
        for (key, v) in [("hb_derate", self.hb_derate), ("ext_derate", self.ext_derate)] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::validation(format!("hw.{key}"), "must be in [0, 1)"));
            }
        }
        if !(self.draft_active_pe_fraction > 0.0 && self.draft_active_pe_fraction <= 1.0) {
            return Err(Error::validation("hw.draft_active_pe_fraction", "must be in (0, 1]"));
        }
        if self.nmp_channels >= self.ext_channels {
            return Err(Error::validation("hw.nmp_channels", "must leave host channels"));
        }
        Ok(())
    }

    pub fn hb_capacity_bytes(&self) -> f64 {
        self.hb_capacity_gib * GIB
    }

    /// Peak MAC/s of the PE array: PEs x MACs per cycle x clock.
    pub fn peak_macs(&self) -> f64 {
        self.hb_banks as f64 * self.macs_per_pe_per_cycle as f64 * self.clock_ghz * GB
    }

    pub fn peak_hb_bw(&self) -> f64 {
        self.hb_banks as f64 * self.hb_bw_per_bank_gbps * GB
    }

    pub fn effective_ext_bw(&self) -> f64 {
        self.ext_bw_gbps * GB * (1.0 - self.ext_derate)
    }
}

fn check_fraction(f: f64) -> Result<()> {
    if f > 0.0 && f <= 1.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("active PE fraction {f} outside (0, 1]")))
    }
}

/// `(bandwidth B/s, compute MAC/s)` pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Roofline {
    pub bandwidth: f64,
    pub compute: f64,
}

/// HB tier: bandwidth and compute both scale with active PEs.
pub fn coupled_roofline(cfg: &HwConfig, active_pe_fraction: f64) -> Result<Roofline> {
    check_fraction(active_pe_fraction)?;
    Ok(Roofline {
        bandwidth: cfg.peak_hb_bw() * (1.0 - cfg.hb_derate) * active_pe_fraction,
        compute: cfg.peak_macs() * active_pe_fraction,
    })
}

/// External tier: bandwidth fixed, compute scales with active PEs.
pub fn decoupled_roofline(cfg: &HwConfig, active_pe_fraction: f64) -> Result<Roofline> {
    check_fraction(active_pe_fraction)?;
    Ok(Roofline {
        bandwidth: cfg.effective_ext_bw(),
        compute: cfg.peak_macs() * active_pe_fraction,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineArch {
    Xpu,
    XpuPim,
    XpuLogicPim,
    XpuNmp,
    HbXpu,
    Ours,
}

impl BaselineArch {
    pub const ALL: [BaselineArch; 6] = [
        BaselineArch::Xpu,
        BaselineArch::XpuPim,
        BaselineArch::XpuLogicPim,
        BaselineArch::XpuNmp,
        BaselineArch::HbXpu,
        BaselineArch::Ours,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BaselineArch::Xpu => "xpu",
            BaselineArch::XpuPim => "xpu_pim",
            BaselineArch::XpuLogicPim => "xpu_logic_pim",
            BaselineArch::XpuNmp => "xpu_nmp",
            BaselineArch::HbXpu => "hb_xpu",
            BaselineArch::Ours => "ours",
        }
    }

    pub fn has_hb(self) -> bool {
        matches!(self, BaselineArch::HbXpu | BaselineArch::Ours)
    }

    /// Whether the HB cache stores MSB and LSB slices as separate items.
    pub fn bit_sliced(self) -> bool {
        self == BaselineArch::Ours
    }
}

/// In-memory compute tier of a PIM/NMP baseline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InternalTier {
    pub bandwidth: f64,
    pub compute: f64,
    /// Bandwidth at which the host reads data resident in this tier.
    pub host_read_bw: f64,
    /// Host bandwidth for everything outside this tier.
    pub host_bw: f64,
    /// Internal and host reads contend for the same DRAM channels.
    pub shares_channels: bool,
    /// Bytes of expert weights the tier can hold; `None` for all of them.
    pub capacity_bytes: Option<f64>,
}

pub fn internal_tier(cfg: &HwConfig, arch: BaselineArch) -> Option<InternalTier> {
    let ext = cfg.effective_ext_bw();
    match arch {
        BaselineArch::XpuPim => Some(InternalTier {
            bandwidth: cfg.pim_bw_multiplier * ext,
            compute: cfg.pim_tmacs * TERA,
            host_read_bw: ext,
            host_bw: ext,
            shares_channels: true,
            capacity_bytes: None,
        }),
        BaselineArch::XpuLogicPim => Some(InternalTier {
            bandwidth: cfg.logic_pim_bw_multiplier * ext,
            compute: cfg.logic_pim_compute_multiplier * cfg.pim_tmacs * TERA,
            host_read_bw: ext,
            host_bw: ext,
            shares_channels: true,
            capacity_bytes: None,
        }),
        BaselineArch::XpuNmp => {
            let share = cfg.nmp_channels as f64 / cfg.ext_channels as f64;
            Some(InternalTier {
                bandwidth: cfg.nmp_bw_multiplier * share * ext,
                compute: cfg.nmp_tmacs * TERA,
                host_read_bw: share * ext,
                host_bw: (1.0 - share) * ext,
                shares_channels: false,
                capacity_bytes: Some(cfg.nmp_capacity_gib * GIB),
            })
        }
        _ => None,
    }
}

/// Bytes, MACs, and link traffic of one execution phase.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PhaseWorkload {
    pub hb_bytes: f64,
    pub ext_bytes: f64,
    /// Expert bytes eligible for in-memory processing (PIM/NMP baselines).
    pub internal_bytes: f64,
    pub macs: f64,
    /// MACs over `internal_bytes`.
    pub internal_macs: f64,
    pub comm_bytes_aggr: f64,
    pub comm_bytes_streamline: f64,
    pub active_pe_fraction: f64,
}

impl PhaseWorkload {
    pub fn zero() -> Self {
        Self {
            active_pe_fraction: 1.0,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<()> {
        let fields = [
            self.hb_bytes,
            self.ext_bytes,
            self.internal_bytes,
            self.macs,
            self.internal_macs,
            self.comm_bytes_aggr,
            self.comm_bytes_streamline,
        ];
        if fields.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::InconsistentWorkload("negative or non-finite tally".into()));
        }
        check_fraction(self.active_pe_fraction)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "arch")]
pub enum Parallelism {
    /// HB-only tensor parallelism.
    HbTp,
    /// MSB slices over HB-TP concurrently with LSB/missed data over EXT-DP.
    HbTpExtDp,
    ExtOnly,
    /// PIM/NMP in-memory execution with host offload.
    Internal(BaselineArch),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhaseLatency {
    pub seconds: f64,
    pub hb_time: f64,
    pub ext_time: f64,
    pub compute_time: f64,
    pub comm_time: f64,
    /// PSUM communication outlasts the EXT (LSB) fetch it should hide behind.
    pub comm_exceeds_ext: bool,
    /// Share of internal-eligible work kept in memory (PIM/NMP only).
    pub internal_fraction: Option<f64>,
}

pub fn phase_latency(cfg: &HwConfig, w: &PhaseWorkload, parallelism: Parallelism) -> Result<PhaseLatency> {
    w.validate()?;
    let f = w.active_pe_fraction;
    let comm_time = w.comm_bytes_aggr / (cfg.aggr_link_gbps * GB);
    let streamline_time = w.comm_bytes_streamline / (cfg.streamline_gbps * GB);
    if !matches!(parallelism, Parallelism::Internal(_)) && (w.internal_bytes > 0.0 || w.internal_macs > 0.0) {
        return Err(Error::InconsistentWorkload("internal tier work without an internal tier".into()));
    }
    let result = match parallelism {
        Parallelism::HbTp => {
            if w.ext_bytes > 0.0 || w.comm_bytes_streamline > 0.0 {
                return Err(Error::InconsistentWorkload("HB-only phase with external bytes".into()));
            }
            let hb = coupled_roofline(cfg, f)?;
            let hb_time = w.hb_bytes / hb.bandwidth;
            let compute_time = w.macs / hb.compute;
            PhaseLatency {
                seconds: hb_time.max(compute_time).max(comm_time),
                hb_time,
                ext_time: 0.0,
                compute_time,
                comm_time,
                comm_exceeds_ext: false,
                internal_fraction: None,
            }
        }
        Parallelism::HbTpExtDp => {
            let hb = coupled_roofline(cfg, f)?;
            let ext = decoupled_roofline(cfg, f)?;
            let hb_time = w.hb_bytes / hb.bandwidth;
            let ext_time = w.ext_bytes / ext.bandwidth;
            let compute_time = w.macs / hb.compute;
            PhaseLatency {
                seconds: hb_time.max(ext_time).max(compute_time).max(comm_time).max(streamline_time),
                hb_time,
                ext_time,
                compute_time,
                comm_time,
                comm_exceeds_ext: w.ext_bytes > 0.0 && comm_time > ext_time,
                internal_fraction: None,
            }
        }
        Parallelism::ExtOnly => {
            if w.hb_bytes > 0.0 {
                return Err(Error::InconsistentWorkload("EXT-only phase with HB bytes".into()));
            }
            let ext = decoupled_roofline(cfg, f)?;
            let ext_time = w.ext_bytes / ext.bandwidth;
            let compute_time = w.macs / ext.compute;
            PhaseLatency {
                seconds: ext_time.max(compute_time).max(comm_time).max(streamline_time),
                hb_time: 0.0,
                ext_time,
                compute_time,
                comm_time,
                comm_exceeds_ext: false,
                internal_fraction: None,
            }
        }
        Parallelism::Internal(arch) => {
            if w.hb_bytes > 0.0 {
                return Err(Error::InconsistentWorkload("in-memory baseline with HB bytes".into()));
            }
            let tier = internal_tier(cfg, arch).ok_or_else(|| {
                Error::InconsistentWorkload(format!("{} has no internal compute tier", arch.name()))
            })?;
            internal_latency(cfg, w, &tier, comm_time.max(streamline_time))?
        }
    };
    Ok(result)
}

/// A resource time `a + b x` as a function of the share `x` kept in memory.
#[derive(Clone, Copy)]
struct Line {
    a: f64,
    b: f64,
}

impl Line {
    fn at(self, x: f64) -> f64 {
        self.a + self.b * x
    }
}

/// Picks the in-memory share minimizing the max of the resource times. The
/// host reads offloaded expert weights at external bandwidth; on PIM the
/// same DRAM channels serve both paths, so their times add.
fn internal_latency(cfg: &HwConfig, w: &PhaseWorkload, tier: &InternalTier, comm_time: f64) -> Result<PhaseLatency> {
    let host_compute = cfg.peak_macs() * w.active_pe_fraction;
    let bi = w.internal_bytes;
    let mi = w.internal_macs;
    let mut lines = vec![
        Line { a: 0.0, b: mi / tier.compute },
        Line {
            a: (w.macs + mi) / host_compute,
            b: -mi / host_compute,
        },
        Line { a: comm_time, b: 0.0 },
    ];
    if tier.shares_channels {
        lines.push(Line {
            a: (w.ext_bytes + bi) / tier.host_bw,
            b: bi / tier.bandwidth - bi / tier.host_read_bw,
        });
    } else {
        lines.push(Line {
            a: w.ext_bytes / tier.host_bw,
            b: 0.0,
        });
        lines.push(Line {
            a: bi / tier.host_read_bw,
            b: bi / tier.bandwidth - bi / tier.host_read_bw,
        });
    }
    let envelope = |x: f64| lines.iter().map(|l| l.at(x)).fold(0.0, f64::max);
    let mut candidates = vec![0.0, 1.0];
    for (i, p) in lines.iter().enumerate() {
        for q in &lines[i + 1..] {
            if (p.b - q.b).abs() > 0.0 {
                let x = (q.a - p.a) / (p.b - q.b);
                if (0.0..=1.0).contains(&x) {
                    candidates.push(x);
                }
            }
        }
    }
    let (best_x, best) = candidates
        .into_iter()
        .map(|x| (x, envelope(x)))
        .fold((1.0, f64::INFINITY), |acc, c| if c.1 < acc.1 || (c.1 == acc.1 && c.0 > acc.0) { c } else { acc });
    let dram_time = if tier.shares_channels {
        lines[3].at(best_x)
    } else {
        lines[3].at(best_x).max(lines[4].at(best_x))
    };
    Ok(PhaseLatency {
        seconds: best,
        hb_time: 0.0,
        ext_time: dram_time,
        compute_time: lines[0].at(best_x).max(lines[1].at(best_x)),
        comm_time,
        comm_exceeds_ext: false,
        internal_fraction: Some(best_x),
    })
}

/// Stall added when the next pool's pieces cannot stream in under verification.
///
/// `residual_ext_bw` is the external bandwidth left over by verification.
pub fn pool_update_overlap(residual_ext_bw: f64, verify_latency: f64, transfer_bytes: f64) -> f64 {
    if transfer_bytes <= 0.0 {
        return 0.0;
    }
    if residual_ext_bw <= 0.0 {
        return f64::INFINITY;
    }
    (transfer_bytes / residual_ext_bw - verify_latency).max(0.0)
}

/// External bandwidth not consumed by a verify phase of the given length.
pub fn residual_ext_bw(cfg: &HwConfig, verify_latency: f64, verify_ext_bytes: f64) -> f64 {
    let demand = if verify_latency > 0.0 {
        verify_ext_bytes / verify_latency
    } else {
        0.0
    };
    cfg.effective_ext_bw() - demand
}

/// MoE geometry of the served model (hardware scale, not the toy model).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelGeometry {
    pub n_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub n_experts: usize,
    pub top_k: usize,
    /// Non-expert parameters (attention, embeddings, router).
    pub dense_params: f64,
    pub kv_bytes_per_token: f64,
    pub seq_len: usize,
    /// Expert popularity exponent; supplied by the scenario's trace section.
    #[serde(skip)]
    pub expert_zipf: f64,
    /// Per-G32-group scale overhead.
    pub scale_bytes_per_group: f64,
    pub psum_bytes: f64,
    pub attn_macs_per_kv_byte: f64,
}

impl Default for ModelGeometry {
    fn default() -> Self {
        Self {
            n_layers: 48,
            d_model: 2048,
            d_ff: 768,
            n_experts: 128,
            top_k: 8,
            dense_params: 1.5e9,
            kv_bytes_per_token: 49152.0,
            seq_len: 1024,
            expert_zipf: 0.8,
            scale_bytes_per_group: 2.0,
            psum_bytes: 2.0,
            attn_macs_per_kv_byte: 1.0,
        }
    }
}

impl ModelGeometry {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers as f64),
            ("d_model", self.d_model as f64),
            ("d_ff", self.d_ff as f64),
            ("n_experts", self.n_experts as f64),
            ("top_k", self.top_k as f64),
            ("seq_len", self.seq_len as f64),
            ("psum_bytes", self.psum_bytes),
        ];
        for (key, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::validation(format!("geometry.{key}"), "must be positive"));
            }
        }
        for (key, v) in [
            ("dense_params", self.dense_params),
            ("kv_bytes_per_token", self.kv_bytes_per_token),
            ("expert_zipf", self.expert_zipf),
            ("scale_bytes_per_group", self.scale_bytes_per_group),
            ("attn_macs_per_kv_byte", self.attn_macs_per_kv_byte),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::validation(format!("geometry.{key}"), "must be nonnegative"));
            }
        }
        if self.top_k > self.n_experts {
            return Err(Error::validation("geometry.top_k", "exceeds n_experts"));
        }
        Ok(())
    }

    fn int8_bytes(&self, params: f64) -> f64 {
        params * (1.0 + self.scale_bytes_per_group / 32.0)
    }

    pub fn expert_macs(&self) -> f64 {
        3.0 * self.d_model as f64 * self.d_ff as f64
    }

    /// INT8 up, gate, and down projections plus group scales.
    pub fn full_expert_bytes(&self) -> f64 {
        self.int8_bytes(self.expert_macs())
    }

    /// 4 of 8 bits.
    pub fn msb_expert_bytes(&self) -> f64 {
        self.full_expert_bytes() / 2.0
    }

    pub fn dense_bytes(&self) -> f64 {
        self.int8_bytes(self.dense_params)
    }

    pub fn total_expert_bytes(&self) -> f64 {
        self.n_layers as f64 * self.n_experts as f64 * self.full_expert_bytes()
    }

    pub fn kv_bytes(&self, batch: usize) -> f64 {
        batch as f64 * self.seq_len as f64 * self.kv_bytes_per_token
    }

    pub fn popularity(&self) -> Popularity {
        Popularity::Zipf(self.expert_zipf)
    }

    /// Distinct experts per layer touched by `tokens` independent tokens.
    pub fn unique_experts(&self, tokens: usize) -> Result<f64> {
        expected_unique_experts(tokens, self.top_k, self.n_experts, &self.popularity())
    }

    /// Per-token MACs: routed experts, dense layers, and attention over the KV.
    pub fn macs_per_token(&self) -> f64 {
        self.n_layers as f64 * self.top_k as f64 * self.expert_macs()
            + self.dense_params
            + self.seq_len as f64 * self.kv_bytes_per_token * self.attn_macs_per_kv_byte
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CommStrategy {
    SliceExchange,
    PsumSync,
}

/// Bytes exchanged over the aggregation link to combine MSB and LSB work.
///
/// Slice exchange ships the MSB slices of active experts; PSUM sync ships
/// the up/gate/down partial-sum vectors of every routed token.
pub fn comm_cost(strategy: CommStrategy, geom: &ModelGeometry, tokens: usize, active_experts_per_layer: f64) -> f64 {
    if tokens == 0 {
        return 0.0;
    }
    let layers = geom.n_layers as f64;
    match strategy {
        CommStrategy::SliceExchange => layers * active_experts_per_layer * geom.msb_expert_bytes(),
        CommStrategy::PsumSync => {
            layers
                * tokens as f64
                * geom.top_k as f64
                * (2 * geom.d_ff + geom.d_model) as f64
                * geom.psum_bytes
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SdScheme {
    ArOnly,
    ElasticSd,
    RandomPoolSd,
    EagleSd,
    SlmSd,
    QuantSd,
}

impl SdScheme {
    pub fn name(self) -> &'static str {
        match self {
            SdScheme::ArOnly => "ar_only",
            SdScheme::ElasticSd => "elastic_sd",
            SdScheme::RandomPoolSd => "random_pool_sd",
            SdScheme::EagleSd => "eagle_sd",
            SdScheme::SlmSd => "slm_sd",
            SdScheme::QuantSd => "quant_sd",
        }
    }

    /// Drafts from the target's own MSB slices with a throttled pool.
    pub fn is_self_msb(self) -> bool {
        matches!(self, SdScheme::ElasticSd | SdScheme::RandomPoolSd)
    }

    /// Separate draft model resident in memory.
    pub fn has_separate_draft(self) -> bool {
        matches!(self, SdScheme::EagleSd | SdScheme::SlmSd)
    }
}

/// Per-step speculative-decoding parameters consumed by the cost model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SdParams {
    pub width: usize,
    pub depth: usize,
    pub verify_count: usize,
    pub accept_length: f64,
    /// Fraction of pool pieces replaced per step.
    pub pool_churn: f64,
    /// Separate draft model bytes (EAGLE head, small LM).
    pub draft_param_bytes: f64,
    pub draft_macs_per_token: f64,
    /// Per-expert HB footprint relative to one INT8 copy (Quant-SD keeps two copies).
    pub expert_footprint_multiplier: f64,
}

/// Where model state lives and the cache hit rates that follow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CacheState {
    pub hb_dense_bytes: f64,
    pub hb_kv_bytes: f64,
    pub hb_draft_bytes: f64,
    pub expert_budget_bytes: f64,
    pub ar_hit: f64,
    pub verify_hit: f64,
    /// MSB pool experts per layer (self-MSB drafting only).
    pub pool_experts: usize,
    /// Whether verification serves MSB slices from HB and LSB slices from EXT.
    pub bit_sliced: bool,
}

impl CacheState {
    pub fn empty() -> Self {
        Self {
            hb_dense_bytes: 0.0,
            hb_kv_bytes: 0.0,
            hb_draft_bytes: 0.0,
            expert_budget_bytes: 0.0,
            ar_hit: 0.0,
            verify_hit: 0.0,
            pool_experts: 0,
            bit_sliced: false,
        }
    }
}

fn per_layer_hit(geom: &ModelGeometry, items: f64) -> Result<f64> {
    let per_layer = (items / geom.n_layers as f64).clamp(0.0, geom.n_experts as f64);
    che_hit_rate(&zipf_popularity(geom.n_experts, geom.expert_zipf), per_layer)
}

/// Places static weights, then KV, then draft parameters in HB and sizes the
/// expert cache from what remains.
pub fn cache_state(
    geom: &ModelGeometry,
    cfg: &HwConfig,
    arch: BaselineArch,
    scheme: SdScheme,
    sd: Option<&SdParams>,
    batch: usize,
    bit_sliced_cache: bool,
) -> Result<CacheState> {
    if !arch.has_hb() {
        return Ok(CacheState::empty());
    }
    let cap = cfg.hb_capacity_bytes();
    let hb_dense = geom.dense_bytes().min(cap);
    let hb_kv = geom.kv_bytes(batch).min(cap - hb_dense);
    let mut rest = cap - hb_dense - hb_kv;
    let draft_bytes = if scheme.has_separate_draft() {
        sd.map_or(0.0, |s| s.draft_param_bytes)
    } else {
        0.0
    };
    if draft_bytes > rest {
        return Err(Error::HbCapacity {
            needed: draft_bytes as u64,
            available: rest as u64,
        });
    }
    rest -= draft_bytes;
    let full = geom.full_expert_bytes();
    let footprint = if scheme == SdScheme::QuantSd {
        sd.map_or(1.0, |s| s.expert_footprint_multiplier.max(1.0)) * full
    } else {
        full
    };
    let ar_hit = per_layer_hit(geom, rest / footprint)?;
    let sliced = bit_sliced_cache && arch.bit_sliced() && scheme.is_self_msb();
    let (verify_hit, pool_experts) = if sliced {
        let items = rest / geom.msb_expert_bytes();
        let pool = ((items / geom.n_layers as f64).floor() as usize).min(geom.n_experts);
        (per_layer_hit(geom, items)?, pool)
    } else if scheme.is_self_msb() {
        // Without slice-granular caching the pool holds full experts.
        let pool = ((rest / full / geom.n_layers as f64).floor() as usize).min(geom.n_experts);
        (ar_hit, pool)
    } else {
        (ar_hit, 0)
    };
    if scheme.is_self_msb() && pool_experts < geom.top_k {
        let piece = if sliced { geom.msb_expert_bytes() } else { full };
        return Err(Error::HbCapacity {
            needed: (geom.top_k as f64 * geom.n_layers as f64 * piece) as u64,
            available: rest as u64,
        });
    }
    Ok(CacheState {
        hb_dense_bytes: hb_dense,
        hb_kv_bytes: hb_kv,
        hb_draft_bytes: draft_bytes,
        expert_budget_bytes: rest,
        ar_hit,
        verify_hit,
        pool_experts,
        bit_sliced: sliced,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhasePlan {
    pub workload: PhaseWorkload,
    pub parallelism: Parallelism,
}

/// Per-phase tallies for one batch on one architecture.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorkloadSet {
    pub batch: usize,
    pub ar: PhasePlan,
    pub draft: Option<PhasePlan>,
    pub verify: Option<PhasePlan>,
    /// Pool pieces written into HB that verification does not already stream.
    pub pool_update_bytes: f64,
    pub ar_unique_experts: f64,
    pub verify_unique_experts: f64,
    pub draft_unique_experts: f64,
}

struct Traffic {
    hb: f64,
    ext: f64,
    internal: f64,
    internal_macs: f64,
    expert_macs: f64,
}

/// Splits `expert_bytes` of per-step expert traffic across tiers.
fn place_expert_traffic(
    geom: &ModelGeometry,
    cfg: &HwConfig,
    arch: BaselineArch,
    hb_expert_bytes: f64,
    ext_expert_bytes: f64,
    expert_macs: f64,
) -> Traffic {
    match internal_tier(cfg, arch) {
        Some(tier) => {
            let share = tier
                .capacity_bytes
                .map_or(1.0, |c| (c / geom.total_expert_bytes()).min(1.0));
            let total = hb_expert_bytes + ext_expert_bytes;
            Traffic {
                hb: 0.0,
                ext: (1.0 - share) * total,
                internal: share * total,
                internal_macs: share * expert_macs,
                expert_macs: (1.0 - share) * expert_macs,
            }
        }
        None if arch.has_hb() => Traffic {
            hb: hb_expert_bytes,
            ext: ext_expert_bytes,
            internal: 0.0,
            internal_macs: 0.0,
            expert_macs,
        },
        None => Traffic {
            hb: 0.0,
            ext: hb_expert_bytes + ext_expert_bytes,
            internal: 0.0,
            internal_macs: 0.0,
            expert_macs,
        },
    }
}

fn parallelism_for(arch: BaselineArch, w: &PhaseWorkload) -> Parallelism {
    match arch {
        BaselineArch::Xpu => Parallelism::ExtOnly,
        BaselineArch::XpuPim | BaselineArch::XpuLogicPim | BaselineArch::XpuNmp => Parallelism::Internal(arch),
        BaselineArch::HbXpu | BaselineArch::Ours => {
            if w.ext_bytes > 0.0 {
                Parallelism::HbTpExtDp
            } else {
                Parallelism::HbTp
            }
        }
    }
}

struct PhaseInputs {
    tokens: usize,
    hb_expert_bytes: f64,
    ext_expert_bytes: f64,
    expert_macs: f64,
    /// Fraction of dense weight bytes read (draft precision reads MSB only).
    dense_fraction: f64,
    extra_hb: f64,
    extra_ext: f64,
    extra_macs: f64,
    active_pe_fraction: f64,
}

fn assemble(
    geom: &ModelGeometry,
    cfg: &HwConfig,
    arch: BaselineArch,
    cache: &CacheState,
    batch: usize,
    p: PhaseInputs,
) -> PhasePlan {
    let t = place_expert_traffic(geom, cfg, arch, p.hb_expert_bytes, p.ext_expert_bytes, p.expert_macs);
    let dense = geom.dense_bytes() * p.dense_fraction;
    let hb_dense = cache.hb_dense_bytes * p.dense_fraction;
    let kv = geom.kv_bytes(batch);
    let hb_kv = cache.hb_kv_bytes.min(kv);
    let tokens = p.tokens as f64;
    let non_expert_macs =
        tokens * (geom.dense_params + geom.seq_len as f64 * geom.kv_bytes_per_token * geom.attn_macs_per_kv_byte);
    let mut hb_bytes = t.hb + hb_dense + hb_kv + p.extra_hb;
    let mut ext_bytes = t.ext + (dense - hb_dense) + (kv - hb_kv) + p.extra_ext;
    if arch.has_hb() {
        // Every weight also lives in EXT, so HB-resident weight reads past the
        // point where the two tiers finish together are served from EXT.
        let hb_bw = cfg.peak_hb_bw() * (1.0 - cfg.hb_derate) * p.active_pe_fraction;
        let ext_bw = cfg.effective_ext_bw();
        let excess = (hb_bytes / hb_bw - ext_bytes / ext_bw) / (1.0 / hb_bw + 1.0 / ext_bw);
        let moved = excess.clamp(0.0, t.hb + hb_dense);
        hb_bytes -= moved;
        ext_bytes += moved;
    }
    let comm = if arch.has_hb() && p.tokens > 0 {
        comm_cost(CommStrategy::PsumSync, geom, p.tokens, 0.0)
    } else {
        0.0
    };
    let workload = PhaseWorkload {
        hb_bytes,
        ext_bytes,
        internal_bytes: t.internal,
        macs: t.expert_macs + non_expert_macs + p.extra_macs,
        internal_macs: t.internal_macs,
        comm_bytes_aggr: comm,
        comm_bytes_streamline: if arch.has_hb() { ext_bytes } else { 0.0 },
        active_pe_fraction: p.active_pe_fraction,
    };
    PhasePlan {
        parallelism: parallelism_for(arch, &workload),
        workload,
    }
}

/// Builds AR, draft, verify, and pool-update tallies for one batch size.
pub fn build_workloads(
    geom: &ModelGeometry,
    cfg: &HwConfig,
    arch: BaselineArch,
    scheme: SdScheme,
    sd: Option<&SdParams>,
    cache: &CacheState,
    batch: usize,
) -> Result<WorkloadSet> {
    geom.validate()?;
    if batch == 0 {
        return Err(Error::invalid("batch must be at least 1"));
    }
    let layers = geom.n_layers as f64;
    let full = geom.full_expert_bytes();
    let msb = geom.msb_expert_bytes();
    let expert_macs = geom.expert_macs() * geom.top_k as f64 * layers;

    let u_ar = geom.unique_experts(batch)?;
    let ar_bytes = layers * u_ar * full;
    let ar = assemble(
        geom,
        cfg,
        arch,
        cache,
        batch,
        PhaseInputs {
            tokens: batch,
            hb_expert_bytes: cache.ar_hit * ar_bytes,
            ext_expert_bytes: (1.0 - cache.ar_hit) * ar_bytes,
            expert_macs: batch as f64 * expert_macs,
            dense_fraction: 1.0,
            extra_hb: 0.0,
            extra_ext: 0.0,
            extra_macs: 0.0,
            active_pe_fraction: 1.0,
        },
    );

    let sd = match (scheme, sd) {
        (SdScheme::ArOnly, _) => None,
        (_, None) => return Err(Error::invalid(format!("{} needs SD parameters", scheme.name()))),
        (_, Some(sd)) => Some(sd),
    };
    let Some(sd) = sd else {
        return Ok(WorkloadSet {
            batch,
            ar,
            draft: None,
            verify: None,
            pool_update_bytes: 0.0,
            ar_unique_experts: u_ar,
            verify_unique_experts: 0.0,
            draft_unique_experts: 0.0,
        });
    };
    if scheme.is_self_msb() && !arch.has_hb() {
        return Err(Error::invalid(format!(
            "{} drafts from HB-resident slices; {} has no HB tier",
            scheme.name(),
            arch.name()
        )));
    }

    let draft_tokens = batch * sd.width;
    let draft_fraction = if arch.has_hb() { cfg.draft_active_pe_fraction } else { 1.0 };
    let (draft, u_draft) = match scheme {
        SdScheme::ElasticSd | SdScheme::RandomPoolSd => {
            let pop = zipf_popularity(geom.n_experts, geom.expert_zipf);
            let pool = cache.pool_experts.max(geom.top_k);
            let u = expected_unique_experts(draft_tokens, geom.top_k, pool, &Popularity::Weights(pop[..pool].to_vec()))?;
            let piece = if cache.bit_sliced { msb } else { full };
            let plan = assemble(
                geom,
                cfg,
                arch,
                cache,
                batch,
                PhaseInputs {
                    tokens: draft_tokens,
                    hb_expert_bytes: layers * u * piece,
                    ext_expert_bytes: 0.0,
                    expert_macs: draft_tokens as f64 * expert_macs,
                    dense_fraction: 0.5,
                    extra_hb: 0.0,
                    extra_ext: 0.0,
                    extra_macs: 0.0,
                    active_pe_fraction: draft_fraction,
                },
            );
            (plan, u)
        }
        SdScheme::EagleSd | SdScheme::SlmSd => {
            let (hb, ext) = if arch.has_hb() {
                (sd.draft_param_bytes, 0.0)
            } else {
                (0.0, sd.draft_param_bytes)
            };
            let mut plan = assemble(
                geom,
                cfg,
                arch,
                cache,
                batch,
                PhaseInputs {
                    tokens: 0,
                    hb_expert_bytes: 0.0,
                    ext_expert_bytes: 0.0,
                    expert_macs: 0.0,
                    dense_fraction: 0.0,
                    extra_hb: hb,
                    extra_ext: ext,
                    extra_macs: draft_tokens as f64 * sd.draft_macs_per_token,
                    active_pe_fraction: draft_fraction,
                },
            );
            // The draft model attends over its own short context; target KV is not read.
            let kv = geom.kv_bytes(batch);
            let hb_kv = cache.hb_kv_bytes.min(kv);
            plan.workload.hb_bytes -= hb_kv;
            plan.workload.ext_bytes -= kv - hb_kv;
            if arch.has_hb() {
                plan.workload.comm_bytes_streamline = plan.workload.ext_bytes;
                plan.workload.comm_bytes_aggr = 0.0;
            }
            plan.parallelism = parallelism_for(arch, &plan.workload);
            (plan, 0.0)
        }
        SdScheme::QuantSd => {
            let u = geom.unique_experts(draft_tokens)?;
            let bytes = layers * u * msb;
            let plan = assemble(
                geom,
                cfg,
                arch,
                cache,
                batch,
                PhaseInputs {
                    tokens: draft_tokens,
                    hb_expert_bytes: cache.ar_hit * bytes,
                    ext_expert_bytes: (1.0 - cache.ar_hit) * bytes,
                    expert_macs: draft_tokens as f64 * expert_macs,
                    dense_fraction: 0.5,
                    extra_hb: 0.0,
                    extra_ext: 0.0,
                    extra_macs: 0.0,
                    active_pe_fraction: draft_fraction,
                },
            );
            (plan, u)
        }
        SdScheme::ArOnly => unreachable!(),
    };

    let verify_tokens = batch * (sd.verify_count + 1);
    let u_v = geom.unique_experts(verify_tokens)?;
    let (hb_v, ext_v) = if cache.bit_sliced {
        let msb_total = layers * u_v * msb;
        (cache.verify_hit * msb_total, layers * u_v * (full - msb) + (1.0 - cache.verify_hit) * msb_total)
    } else {
        let total = layers * u_v * full;
        (cache.verify_hit * total, (1.0 - cache.verify_hit) * total)
    };
    let verify = assemble(
        geom,
        cfg,
        arch,
        cache,
        batch,
        PhaseInputs {
            tokens: verify_tokens,
            hb_expert_bytes: hb_v,
            ext_expert_bytes: ext_v,
            expert_macs: verify_tokens as f64 * expert_macs,
            dense_fraction: 1.0,
            extra_hb: 0.0,
            extra_ext: 0.0,
            extra_macs: 0.0,
            active_pe_fraction: 1.0,
        },
    );

    let pool_update_bytes = if scheme.is_self_msb() {
        let piece = if cache.bit_sliced { msb } else { full };
        let streamed = (u_v / geom.n_experts as f64).min(1.0);
        sd.pool_churn * cache.pool_experts as f64 * layers * piece * (1.0 - streamed)
    } else {
        0.0
    };

    Ok(WorkloadSet {
        batch,
        ar,
        draft: Some(draft),
        verify: Some(verify),
        pool_update_bytes,
        ar_unique_experts: u_ar,
        verify_unique_experts: u_v,
        draft_unique_experts: u_draft,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EnergyBreakdown {
    pub compute: f64,
    pub ext_mem: f64,
    pub hb_mem: f64,
    pub comm: f64,
    pub static_: f64,
}

impl EnergyBreakdown {
    pub fn total(&self) -> f64 {
        self.compute + self.ext_mem + self.hb_mem + self.comm + self.static_
    }

    pub fn scaled(&self, k: f64) -> Self {
        Self {
            compute: self.compute * k,
            ext_mem: self.ext_mem * k,
            hb_mem: self.hb_mem * k,
            comm: self.comm * k,
            static_: self.static_ * k,
        }
    }

    fn add(&mut self, o: &Self) {
        self.compute += o.compute;
        self.ext_mem += o.ext_mem;
        self.hb_mem += o.hb_mem;
        self.comm += o.comm;
        self.static_ += o.static_;
    }
}

/// Dynamic energy of one phase plus static power over `latency`.
pub fn phase_energy(cfg: &HwConfig, w: &PhaseWorkload, latency: f64) -> EnergyBreakdown {
    EnergyBreakdown {
        compute: (w.macs + w.internal_macs) * cfg.compute_energy_pj_per_mac * PJ,
        ext_mem: (w.ext_bytes * cfg.ext_energy_pj_per_bit + w.internal_bytes * cfg.internal_energy_pj_per_bit)
            * 8.0
            * PJ,
        hb_mem: w.hb_bytes * 8.0 * cfg.hb_energy_pj_per_bit * PJ,
        comm: w.comm_bytes_aggr * 8.0 * cfg.link_energy_pj_per_bit * PJ,
        static_: cfg.static_power_w * latency,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    Ar,
    Sd,
}

impl DecodeMode {
    pub fn name(self) -> &'static str {
        match self {
            DecodeMode::Ar => "ar",
            DecodeMode::Sd => "sd",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepCost {
    pub mode: DecodeMode,
    pub latency: f64,
    pub energy: EnergyBreakdown,
    /// Tokens each sequence gains per step.
    pub tokens_per_step: f64,
    pub batch: usize,
    pub draft_latency: f64,
    pub verify_latency: f64,
    pub ar_latency: f64,
    pub stall: f64,
    pub comm_exceeds_ext: bool,
}

impl StepCost {
    pub fn per_token_latency(&self) -> f64 {
        self.latency / self.tokens_per_step
    }

    /// Energy per generated token across the batch.
    pub fn per_token_energy(&self) -> EnergyBreakdown {
        self.energy.scaled(1.0 / (self.tokens_per_step * self.batch as f64))
    }
}

/// Latency and energy of one decoding step in the given mode.
pub fn step_cost(cfg: &HwConfig, ws: &WorkloadSet, mode: DecodeMode, sd: Option<&SdParams>) -> Result<StepCost> {
    let ar = phase_latency(cfg, &ws.ar.workload, ws.ar.parallelism)?;
    match mode {
        DecodeMode::Ar => Ok(StepCost {
            mode,
            latency: ar.seconds,
            energy: phase_energy(cfg, &ws.ar.workload, ar.seconds),
            tokens_per_step: 1.0,
            batch: ws.batch,
            draft_latency: 0.0,
            verify_latency: 0.0,
            ar_latency: ar.seconds,
            stall: 0.0,
            comm_exceeds_ext: ar.comm_exceeds_ext,
        }),
        DecodeMode::Sd => {
            let (Some(draft), Some(verify), Some(sd)) = (ws.draft, ws.verify, sd) else {
                return Err(Error::invalid("SD cost needs draft and verify workloads"));
            };
            let dl = phase_latency(cfg, &draft.workload, draft.parallelism)?;
            let vl = phase_latency(cfg, &verify.workload, verify.parallelism)?;
            let residual = residual_ext_bw(cfg, vl.seconds, verify.workload.ext_bytes);
            let stall = if ws.pool_update_bytes > 0.0 && residual <= 0.0 {
                ws.pool_update_bytes / cfg.effective_ext_bw()
            } else {
                pool_update_overlap(residual, vl.seconds, ws.pool_update_bytes)
            };
            let depth = sd.depth as f64;
            let latency = depth * dl.seconds + vl.seconds + stall;
            let mut energy = phase_energy(cfg, &draft.workload, dl.seconds).scaled(depth);
            energy.add(&phase_energy(cfg, &verify.workload, vl.seconds));
            // Pool pieces are read from EXT and written into HB.
            energy.add(&EnergyBreakdown {
                ext_mem: ws.pool_update_bytes * 8.0 * cfg.ext_energy_pj_per_bit * PJ,
                hb_mem: ws.pool_update_bytes * 8.0 * cfg.hb_energy_pj_per_bit * PJ,
                static_: cfg.static_power_w * stall,
                ..EnergyBreakdown::default()
            });
            Ok(StepCost {
                mode,
                latency,
                energy,
                tokens_per_step: 1.0 + sd.accept_length,
                batch: ws.batch,
                draft_latency: dl.seconds,
                verify_latency: vl.seconds,
                ar_latency: ar.seconds,
                stall,
                comm_exceeds_ext: vl.comm_exceeds_ext,
            })
        }
    }
}

/// Lower per-token latency wins; ties go to AR.
pub fn mode_select(ar: &StepCost, sd: Option<&StepCost>) -> StepCost {
    match sd {
        Some(sd) if sd.per_token_latency() < ar.per_token_latency() => *sd,
        _ => *ar,
    }
}

/// SD speedup over AR on the same system, from the step's own latencies.
pub fn step_speedup(cost: &StepCost, depth: usize, accept_length: f64) -> Result<f64> {
    sd_speedup(accept_length, cost.ar_latency, depth, cost.draft_latency, cost.verify_latency + cost.stall)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * b.abs().max(1e-30)
    }

    #[test]
    fn coupled_examples() {
        let cfg = HwConfig::default();
        let r = coupled_roofline(&cfg, 1.0).unwrap();
        assert!(close(r.bandwidth, 32.0 * 51.2e9 * 0.97, 1e-12));
        assert!((r.bandwidth / 1e9 - 1589.2).abs() < 0.1);
        let half = coupled_roofline(&cfg, 0.5).unwrap();
        assert_eq!(half.bandwidth, r.bandwidth * 0.5);
        assert_eq!(half.compute, r.compute * 0.5);
        let r16 = coupled_roofline(&HwConfig::hb16(), 1.0).unwrap();
        assert!((r16.bandwidth / 1e9 - 794.6).abs() < 0.1);
        assert!(coupled_roofline(&cfg, 0.0).is_err());
        assert!(coupled_roofline(&cfg, 1.5).is_err());
    }

    #[test]
    fn decoupled_examples() {
        let cfg = HwConfig::default();
        let a = decoupled_roofline(&cfg, 0.25).unwrap();
        let b = decoupled_roofline(&cfg, 1.0).unwrap();
        assert_eq!(a.bandwidth, b.bandwidth);
        assert!((b.bandwidth / 1e9 - 101.4).abs() < 0.05);
        assert_eq!(decoupled_roofline(&cfg, 0.5).unwrap().compute, b.compute / 2.0);
        assert!(decoupled_roofline(&cfg, -0.1).is_err());
    }

    #[test]
    fn peak_compute_matches_pe_array() {
        assert_eq!(HwConfig::default().peak_macs(), 32.0 * 16384.0 * 1e9);
        assert_eq!(HwConfig::hb16().peak_macs(), 16.0 * 16384.0 * 1e9);
    }

    #[test]
    fn phase_latency_examples() {
        let cfg = HwConfig::default();
        let hb_only = PhaseWorkload {
            hb_bytes: 1e9,
            macs: 1.0,
            ..PhaseWorkload::zero()
        };
        let l = phase_latency(&cfg, &hb_only, Parallelism::HbTp).unwrap();
        assert!(close(l.seconds, 1e9 / coupled_roofline(&cfg, 1.0).unwrap().bandwidth, 1e-12));

        let balanced = PhaseWorkload {
            ext_bytes: 1e6,
            macs: 1e6,
            ..PhaseWorkload::zero()
        };
        let l = phase_latency(&cfg, &balanced, Parallelism::ExtOnly).unwrap();
        let ext_time: f64 = 1e6 / (102.4e9 * 0.99);
        assert!((ext_time - 9.864e-6).abs() < 1e-8);
        assert_eq!(l.seconds, ext_time.max(1e6 / cfg.peak_macs()));

        let zero = PhaseWorkload::zero();
        for p in [Parallelism::HbTp, Parallelism::HbTpExtDp, Parallelism::ExtOnly, Parallelism::Internal(BaselineArch::XpuPim)] {
            assert_eq!(phase_latency(&cfg, &zero, p).unwrap().seconds, 0.0);
        }

        let mixed = PhaseWorkload {
            hb_bytes: 1.0,
            ext_bytes: 1.0,
            ..PhaseWorkload::zero()
        };
        assert!(matches!(phase_latency(&cfg, &mixed, Parallelism::HbTp), Err(Error::InconsistentWorkload(_))));
        assert!(phase_latency(&cfg, &mixed, Parallelism::ExtOnly).is_err());
        assert!(phase_latency(&cfg, &mixed, Parallelism::Internal(BaselineArch::Ours)).is_err());
    }

    #[test]
    fn comm_warning_flag() {
        let cfg = HwConfig::default();
        let w = PhaseWorkload {
            ext_bytes: 1e6,
            comm_bytes_aggr: 1e9,
            ..PhaseWorkload::zero()
        };
        assert!(phase_latency(&cfg, &w, Parallelism::HbTpExtDp).unwrap().comm_exceeds_ext);
        let w = PhaseWorkload {
            ext_bytes: 1e9,
            comm_bytes_aggr: 1e6,
            ..PhaseWorkload::zero()
        };
        assert!(!phase_latency(&cfg, &w, Parallelism::HbTpExtDp).unwrap().comm_exceeds_ext);
    }

    #[test]
    fn pool_overlap_examples() {
        assert_eq!(pool_update_overlap(10e9, 1.0, 1e6), 0.0);
        assert!(close(pool_update_overlap(10e9, 0.05, 1e9), 0.05, 1e-12));
        assert_eq!(pool_update_overlap(10e9, 0.05, 0.0), 0.0);
    }

    #[test]
    fn comm_cost_examples() {
        let g = ModelGeometry::default();
        let u = g.unique_experts(16).unwrap();
        let psum = comm_cost(CommStrategy::PsumSync, &g, 16, u);
        let slice = comm_cost(CommStrategy::SliceExchange, &g, 16, u);
        assert!(psum < slice);
        assert_eq!(comm_cost(CommStrategy::PsumSync, &g, 0, u), 0.0);
        assert_eq!(comm_cost(CommStrategy::SliceExchange, &g, 0, u), 0.0);
        assert_eq!(comm_cost(CommStrategy::PsumSync, &g, 32, u), 2.0 * psum);
        assert_eq!(comm_cost(CommStrategy::SliceExchange, &g, 32, u), slice);
    }

    #[test]
    fn mode_select_ties_prefer_ar() {
        let base = StepCost {
            mode: DecodeMode::Ar,
            latency: 1.0,
            energy: EnergyBreakdown::default(),
            tokens_per_step: 1.0,
            batch: 1,
            draft_latency: 0.0,
            verify_latency: 0.0,
            ar_latency: 1.0,
            stall: 0.0,
            comm_exceeds_ext: false,
        };
        let sd_equal = StepCost {
            mode: DecodeMode::Sd,
            latency: 2.0,
            tokens_per_step: 2.0,
            ..base
        };
        assert_eq!(mode_select(&base, Some(&sd_equal)).mode, DecodeMode::Ar);
        let sd_fast = StepCost {
            latency: 1.5,
            ..sd_equal
        };
        assert_eq!(mode_select(&base, Some(&sd_fast)).mode, DecodeMode::Sd);
        assert_eq!(mode_select(&base, None).mode, DecodeMode::Ar);
    }

    #[test]
    fn energy_static_only() {
        let cfg = HwConfig::default();
        let e = phase_energy(&cfg, &PhaseWorkload::zero(), 0.25);
        assert_eq!(e.total(), cfg.static_power_w * 0.25);
        assert_eq!(e.static_, e.total());
    }

    #[test]
    fn expert_byte_ratios() {
        let g = ModelGeometry::default();
        assert_eq!(g.msb_expert_bytes() * 2.0, g.full_expert_bytes());
        assert!(g.validate().is_ok());
        let bad = ModelGeometry { top_k: 200, ..g };
        assert!(bad.validate().is_err());
    }
}
