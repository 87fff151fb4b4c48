//! C ABI over `moesim`.
//!
//! Every function returns a [`MoesimStatus`]; on failure the message is
//! available from [`moesim_last_error`] on the same thread. Handles and
//! strings returned by this library must be released with the matching
//! `*_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use moesim::elastic_sd;
use moesim::expert_cache::{self, Popularity};
use moesim::hwmodel::{self, BaselineArch, DecodeMode, HwConfig, SdScheme};
use moesim::runner::{self, ResultRow, ScenarioConfig};
use moesim::Error;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoesimStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidInput = 3,
    ConfigError = 4,
    CapacityError = 5,
    IndexOutOfRange = 6,
    IoError = 7,
    Internal = 8,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoesimArch {
    Xpu = 0,
    XpuPim = 1,
    XpuLogicPim = 2,
    XpuNmp = 3,
    HbXpu = 4,
    Ours = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoesimScheme {
    ArOnly = 0,
    ElasticSd = 1,
    RandomPoolSd = 2,
    EagleSd = 3,
    SlmSd = 4,
    QuantSd = 5,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MoesimMode {
    Ar = 0,
    Sd = 1,
}

/// Parsed scenario list.
pub struct MoesimConfig {
    scenarios: Vec<ScenarioConfig>,
}

/// Rows of a completed sweep.
pub struct MoesimResults {
    rows: Vec<ResultRow>,
}

/// Numeric view of one result row. Missing SD values are NaN.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct MoesimRow {
    pub batch: usize,
    pub arch: MoesimArch,
    pub scheme: MoesimScheme,
    pub mode: MoesimMode,
    pub accept_length: f64,
    pub ar_hit_rate: f64,
    pub verify_hit_rate: f64,
    pub ar_per_token_s: f64,
    pub sd_per_token_s: f64,
    pub per_token_latency_s: f64,
    pub energy_compute_j: f64,
    pub energy_ext_mem_j: f64,
    pub energy_hb_mem_j: f64,
    pub energy_comm_j: f64,
    pub energy_static_j: f64,
    pub energy_total_j: f64,
    pub sd_speedup: f64,
    pub speedup_vs_xpu: f64,
    pub comm_warning: bool,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> MoesimStatus {
    match e {
        Error::Scenario { source, .. } => status_of(source),
        Error::ConfigParse { .. } | Error::ConfigValidation { .. } => MoesimStatus::ConfigError,
        Error::HbCapacity { .. } | Error::ItemTooLarge { .. } => MoesimStatus::CapacityError,
        Error::IndexOutOfRange { .. } => MoesimStatus::IndexOutOfRange,
        Error::Io(_) => MoesimStatus::IoError,
        Error::Json(_) | Error::EmptyResults => MoesimStatus::Internal,
        _ => MoesimStatus::InvalidInput,
    }
}

struct Fail(MoesimStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MoesimStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            MoesimStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            MoesimStatus::Internal
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(MoesimStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(MoesimStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

fn to_c_string(s: String) -> Result<*mut c_char, Fail> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Fail(MoesimStatus::Internal, "output contains a NUL byte".into()))
}

/// Enum values arrive from C as plain integers and are checked before use.
fn arch_from(a: u32) -> Result<BaselineArch, Fail> {
    BaselineArch::ALL
        .get(a as usize)
        .copied()
        .ok_or_else(|| Fail(MoesimStatus::InvalidInput, format!("unknown architecture {a}")))
}

fn arch_to(a: BaselineArch) -> MoesimArch {
    match a {
        BaselineArch::Xpu => MoesimArch::Xpu,
        BaselineArch::XpuPim => MoesimArch::XpuPim,
        BaselineArch::XpuLogicPim => MoesimArch::XpuLogicPim,
        BaselineArch::XpuNmp => MoesimArch::XpuNmp,
        BaselineArch::HbXpu => MoesimArch::HbXpu,
        BaselineArch::Ours => MoesimArch::Ours,
    }
}

fn scheme_to(s: SdScheme) -> MoesimScheme {
    match s {
        SdScheme::ArOnly => MoesimScheme::ArOnly,
        SdScheme::ElasticSd => MoesimScheme::ElasticSd,
        SdScheme::RandomPoolSd => MoesimScheme::RandomPoolSd,
        SdScheme::EagleSd => MoesimScheme::EagleSd,
        SdScheme::SlmSd => MoesimScheme::SlmSd,
        SdScheme::QuantSd => MoesimScheme::QuantSd,
    }
}

/// Message of the last failed call on this thread; empty after a success.
/// Valid until the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn moesim_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn moesim_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses TOML scenario text. `origin` names the source in error messages and may be null.
///
/// # Safety
/// `text` and `origin` must be null or NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn moesim_config_parse(
    text: *const c_char,
    origin: *const c_char,
    out: *mut *mut MoesimConfig,
) -> MoesimStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let text = str_arg(text, "text")?;
        let origin = if origin.is_null() { "<memory>" } else { str_arg(origin, "origin")? };
        let scenarios = runner::parse_config(text, Path::new(origin))?;
        *out = Box::into_raw(Box::new(MoesimConfig { scenarios }));
        Ok(())
    })
}

/// Loads and validates a TOML scenario file.
///
/// # Safety
/// `path` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn moesim_config_load(path: *const c_char, out: *mut *mut MoesimConfig) -> MoesimStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let scenarios = runner::load_config(path)?;
        *out = Box::into_raw(Box::new(MoesimConfig { scenarios }));
        Ok(())
    })
}

/// Number of scenarios in a parsed config.
///
/// # Safety
/// `config` must come from `moesim_config_parse` or `moesim_config_load`.
#[no_mangle]
pub unsafe extern "C" fn moesim_config_len(config: *const MoesimConfig, out: *mut usize) -> MoesimStatus {
    guard(|| {
        let config = config.as_ref().ok_or_else(|| null("config"))?;
        *out_arg(out, "out")? = config.scenarios.len();
        Ok(())
    })
}

/// # Safety
/// `config` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn moesim_config_free(config: *mut MoesimConfig) {
    if !config.is_null() {
        drop(Box::from_raw(config));
    }
}

/// Runs every scenario. Rows are sorted by scenario id either way.
///
/// # Safety
/// `config` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn moesim_run(
    config: *const MoesimConfig,
    concurrent: bool,
    out: *mut *mut MoesimResults,
) -> MoesimStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let config = config.as_ref().ok_or_else(|| null("config"))?;
        let rows = runner::run_scenarios(&config.scenarios, concurrent)?;
        *out = Box::into_raw(Box::new(MoesimResults { rows }));
        Ok(())
    })
}

/// # Safety
/// `results` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn moesim_results_len(results: *const MoesimResults, out: *mut usize) -> MoesimStatus {
    guard(|| {
        let results = results.as_ref().ok_or_else(|| null("results"))?;
        *out_arg(out, "out")? = results.rows.len();
        Ok(())
    })
}

/// Copies row `index` into `out`.
///
/// # Safety
/// `results` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn moesim_results_row(
    results: *const MoesimResults,
    index: usize,
    out: *mut MoesimRow,
) -> MoesimStatus {
    guard(|| {
        let results = results.as_ref().ok_or_else(|| null("results"))?;
        let out = out_arg(out, "out")?;
        let r = results.rows.get(index).ok_or(Error::IndexOutOfRange {
            index,
            len: results.rows.len(),
        })?;
        let nan = f64::NAN;
        *out = MoesimRow {
            batch: r.batch,
            arch: arch_to(r.arch),
            scheme: scheme_to(r.scheme),
            mode: match r.mode {
                DecodeMode::Ar => MoesimMode::Ar,
                DecodeMode::Sd => MoesimMode::Sd,
            },
            accept_length: r.accept_length.unwrap_or(nan),
            ar_hit_rate: r.ar_hit_rate,
            verify_hit_rate: r.verify_hit_rate.unwrap_or(nan),
            ar_per_token_s: r.ar_per_token_s,
            sd_per_token_s: r.sd_per_token_s.unwrap_or(nan),
            per_token_latency_s: r.per_token_latency_s,
            energy_compute_j: r.energy_compute_j,
            energy_ext_mem_j: r.energy_ext_mem_j,
            energy_hb_mem_j: r.energy_hb_mem_j,
            energy_comm_j: r.energy_comm_j,
            energy_static_j: r.energy_static_j,
            energy_total_j: r.energy_total_j,
            sd_speedup: r.sd_speedup.unwrap_or(nan),
            speedup_vs_xpu: r.speedup_vs_xpu,
            comm_warning: r.comm_warning,
        };
        Ok(())
    })
}

/// Renders the rows as CSV. Free the string with `moesim_string_free`.
///
/// # Safety
/// `results` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn moesim_results_csv(results: *const MoesimResults, out: *mut *mut c_char) -> MoesimStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let results = results.as_ref().ok_or_else(|| null("results"))?;
        *out = to_c_string(runner::to_csv(&results.rows)?)?;
        Ok(())
    })
}

/// Renders the rows as JSON. Free the string with `moesim_string_free`.
///
/// # Safety
/// `results` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn moesim_results_json(results: *const MoesimResults, out: *mut *mut c_char) -> MoesimStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = ptr::null_mut();
        let results = results.as_ref().ok_or_else(|| null("results"))?;
        *out = to_c_string(runner::to_json(&results.rows)?)?;
        Ok(())
    })
}

/// # Safety
/// `results` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn moesim_results_free(results: *mut MoesimResults) {
    if !results.is_null() {
        drop(Box::from_raw(results));
    }
}

/// # Safety
/// `s` must be null or a string returned by this library and not yet freed.
#[no_mangle]
pub unsafe extern "C" fn moesim_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// `(1 + accept) * lat_ar / (depth * lat_draft + lat_verify)`.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn moesim_sd_speedup(
    accept_length: f64,
    lat_ar: f64,
    depth: usize,
    lat_draft: f64,
    lat_verify: f64,
    out: *mut f64,
) -> MoesimStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = elastic_sd::sd_speedup(accept_length, lat_ar, depth, lat_draft, lat_verify)?;
        Ok(())
    })
}

/// LRU hit rate of `capacity_items` slots under Zipf popularity.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn moesim_lru_hit_rate(
    n_items: usize,
    zipf_exponent: f64,
    capacity_items: f64,
    out: *mut f64,
) -> MoesimStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = expert_cache::powerlaw_lru_hitrate(n_items, zipf_exponent, capacity_items)?;
        Ok(())
    })
}

/// Expected distinct experts touched by `batch` tokens under Zipf popularity.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn moesim_expected_unique_experts(
    batch: usize,
    top_k: usize,
    n_experts: usize,
    zipf_exponent: f64,
    out: *mut f64,
) -> MoesimStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let pop = if zipf_exponent == 0.0 { Popularity::Uniform } else { Popularity::Zipf(zipf_exponent) };
        *out = expert_cache::expected_unique_experts(batch, top_k, n_experts, &pop)?;
        Ok(())
    })
}

/// HB and external rooflines of the default system with `hb_banks` banks, in
/// bytes/s and MAC/s.
///
/// # Safety
/// All out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn moesim_rooflines(
    hb_banks: u32,
    active_pe_fraction: f64,
    hb_bw: *mut f64,
    ext_bw: *mut f64,
    compute: *mut f64,
) -> MoesimStatus {
    guard(|| {
        let (hb_bw, ext_bw, compute) = (out_arg(hb_bw, "hb_bw")?, out_arg(ext_bw, "ext_bw")?, out_arg(compute, "compute")?);
        let cfg = HwConfig {
            hb_banks,
            ..HwConfig::default()
        };
        cfg.validate()?;
        let coupled = hwmodel::coupled_roofline(&cfg, active_pe_fraction)?;
        let decoupled = hwmodel::decoupled_roofline(&cfg, active_pe_fraction)?;
        *hb_bw = coupled.bandwidth;
        *ext_bw = decoupled.bandwidth;
        *compute = coupled.compute;
        Ok(())
    })
}

/// Per-token AR latency at `batch` on the default geometry and system.
/// `arch` takes a `MoesimArch` value.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn moesim_ar_per_token_latency(arch: u32, batch: usize, out: *mut f64) -> MoesimStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let e = runner::evaluate(
            &hwmodel::ModelGeometry::default(),
            &HwConfig::default(),
            arch_from(arch)?,
            SdScheme::ArOnly,
            None,
            batch,
            true,
        )?;
        *out = e.ar.per_token_latency();
        Ok(())
    })
}
