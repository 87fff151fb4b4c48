//! Acceptance criteria. Runs without the libtest harness so each criterion
//! prints exactly one PASS/FAIL line; exits non-zero if any fails.

use std::panic::{self, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use moesim::bitnest::{reconstruct, split_slices, BitSlicePair, ReconstructMode};
use moesim::elastic_sd::{sd_speedup, PoolPolicy};
use moesim::expert_cache::{irm_trace, powerlaw_lru_hitrate, simulate_lru, CacheConfig};
use moesim::hwmodel::{
    build_workloads, cache_state, phase_latency, step_cost, BaselineArch, DecodeMode, HwConfig, ModelGeometry,
    SdScheme,
};
use moesim::runner::{
    self, ablation_base, evaluate, measure_functional, parse_config, run_scenarios, to_csv, ScenarioConfig,
    EXAMPLE_CONFIG,
};
use moesim::slicemac::{sliced_dot, SliceMode};
use rayon::prelude::*;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn example() -> Vec<ScenarioConfig> {
    parse_config(EXAMPLE_CONFIG, Path::new("configs/example.toml")).unwrap()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut mismatches = 0usize;
    for code in -127..=127 {
        let w = [split_slices(code).unwrap()];
        for a in -127i8..=127 {
            if sliced_dot(&[a], &w, SliceMode::FullPrecision).unwrap() != a as i64 * code as i64 {
                mismatches += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        mismatches == 0 && secs < 1.0,
        format!("{mismatches} mismatches over 255x255 products in {secs:.3}s"),
    )
}

fn criterion_2() -> Outcome {
    let mut trunc = (i32::MAX, i32::MIN);
    let mut aug = (i32::MAX, i32::MIN);
    let mut aug_sum = 0i64;
    let mut count = 0i64;
    for msb in -8i8..=7 {
        for lsb in 0u8..=15 {
            let code = 16 * msb as i32 + lsb as i32;
            let (t, a) = if code == -128 {
                (lsb as i32, lsb as i32 - 8)
            } else {
                let p = BitSlicePair::new(msb, lsb).unwrap();
                (
                    code - reconstruct(p, ReconstructMode::Truncate),
                    code - reconstruct(p, ReconstructMode::LsbAugment),
                )
            };
            trunc = (trunc.0.min(t), trunc.1.max(t));
            aug = (aug.0.min(a), aug.1.max(a));
            aug_sum += a as i64;
            count += 1;
        }
    }
    // The reserved code has no pair; its residuals follow from the slice split.
    let mean = aug_sum as f64 / count as f64;
    check(
        trunc == (0, 15) && aug == (-8, 7) && mean == -0.5,
        format!("truncate {trunc:?}, lsb-augment {aug:?}, mean {mean}"),
    )
}

fn criterion_3() -> Outcome {
    let cases = [
        ((3.0, 10.0, 4, 1.0, 12.0), 40.0 / 16.0),
        ((1.5, 8.0, 3, 0.5, 6.0), 20.0 / 7.5),
        ((2.0, 5.0, 0, 0.0, 4.0), 15.0 / 4.0),
    ];
    let mut worst = 0.0f64;
    for ((acc, ar, d, dr, v), want) in cases {
        let got = sd_speedup(acc, ar, d, dr, v).map_err(|e| e.to_string())?;
        worst = worst.max((got - want).abs() / want);
    }
    let even = sd_speedup(0.0, 10.0, 2, 1.0, 8.0).map_err(|e| e.to_string())?;
    check(
        worst <= 1e-12 && even == 1.0,
        format!("worst relative error {worst:e}, break-even {even}"),
    )
}

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let mut cells = Vec::new();
    for zipf in [0.8, 1.0, 1.2] {
        for n in [64usize, 128, 256] {
            cells.push((zipf, n));
        }
    }
    let errors: Vec<(f64, usize, f64)> = cells
        .par_iter()
        .map(|&(zipf, n)| {
            let trace = irm_trace(n, zipf, 1_000_000, 0xC0FFEE ^ n as u64).unwrap();
            (1..=9)
                .map(|tenth| {
                    let cap = (n * tenth / 10) as u64;
                    let sim = simulate_lru(&trace, &CacheConfig { capacity: cap, msb_bytes: 1, full_bytes: 1 })
                        .unwrap()
                        .hit_rate;
                    let che = powerlaw_lru_hitrate(n, zipf, cap as f64).unwrap();
                    (zipf, n, (sim - che).abs())
                })
                .fold((zipf, n, 0.0), |acc, c| if c.2 > acc.2 { c } else { acc })
        })
        .collect();
    let worst = errors.iter().fold((0.0, 0, 0.0), |acc, c| if c.2 > acc.2 { *c } else { acc });
    let secs = start.elapsed().as_secs_f64();
    check(
        worst.2 <= 0.05 && secs < 60.0,
        format!(
            "max |che - lru| = {:.4} (zipf {}, n {}) over 81 cells in {secs:.1}s",
            worst.2, worst.0, worst.1
        ),
    )
}

fn criterion_5() -> Outcome {
    let mut cfg = example().remove(0);
    cfg.toy.seeds = (0..20).collect();
    let stats = measure_functional(&cfg, PoolPolicy::Hotness).map_err(|e| e.to_string())?;
    check(
        stats.stream_mismatches == 0,
        format!("{} of 20 seeded runs differ from greedy AR", stats.stream_mismatches),
    )
}

fn criterion_6() -> Outcome {
    let mut runs = Vec::new();
    for cfg in example() {
        runs.push((cfg.clone(), PoolPolicy::Hotness));
        runs.push((cfg, PoolPolicy::Random));
    }
    for which in runner::Ablation::ALL {
        for cfg in runner::ablation_scenarios(which, &ablation_base().unwrap()) {
            runs.push((cfg, PoolPolicy::Hotness));
        }
    }
    let mut violations = 0;
    let mut decisions = 0;
    for (cfg, policy) in &runs {
        let s = measure_functional(cfg, *policy).map_err(|e| e.to_string())?;
        violations += s.throttle_violations;
        decisions += s.draft_decisions;
    }
    check(
        violations == 0 && decisions > 0,
        format!("{violations} out-of-pool selections in {decisions} draft routing decisions"),
    )
}

fn criterion_7() -> Outcome {
    let base = ablation_base().map_err(|e| e.to_string())?;
    let accept = |cfg: &ScenarioConfig, policy| measure_functional(cfg, policy).map(|s| s.accept_length);

    let hot = accept(&base, PoolPolicy::Hotness).map_err(|e| e.to_string())?;
    let rnd = accept(&base, PoolPolicy::Random).map_err(|e| e.to_string())?;
    let a = hot >= 1.05 * rnd;

    let with_precision = |mode| {
        let mut c = base.clone();
        c.sd.draft_precision = mode;
        accept(&c, PoolPolicy::Hotness).map(|l| l / c.sd.depth as f64)
    };
    let trunc = with_precision(ReconstructMode::Truncate).map_err(|e| e.to_string())?;
    let round = with_precision(ReconstructMode::MsbRound).map_err(|e| e.to_string())?;
    let aug = with_precision(ReconstructMode::LsbAugment).map_err(|e| e.to_string())?;
    let b = aug > trunc && (aug - round).abs() <= 0.1 * round;

    let mut ceiling = base.clone();
    ceiling.sd.draft_precision = ReconstructMode::Full;
    let full = accept(&ceiling, PoolPolicy::Full).map_err(|e| e.to_string())?;
    let c = full == ceiling.sd.depth as f64;

    check(
        a && b && c,
        format!(
            "(a) hotness {hot:.3} vs random {rnd:.3} ({:+.1}%) {}; (b) rate truncate {trunc:.3}, msb-round {round:.3}, \
             lsb-augment {aug:.3} {}; (c) full-precision accept {full} vs depth {} {}",
            100.0 * (hot / rnd - 1.0),
            ok_word(a),
            ok_word(b),
            ceiling.sd.depth,
            ok_word(c)
        ),
    )
}

fn ok_word(ok: bool) -> &'static str {
    if ok {
        "ok"
    } else {
        "FAIL"
    }
}

fn criterion_8() -> Outcome {
    let mut notes = Vec::new();

    // (a) crossover on the bundled sweep
    let rows = run_scenarios(&example(), true).map_err(|e| e.to_string())?;
    let mut a = true;
    for cfg in example() {
        let mut ours: Vec<_> = rows
            .iter()
            .filter(|r| r.scenario == cfg.id && r.arch == BaselineArch::Ours && r.scheme == SdScheme::ElasticSd)
            .collect();
        ours.sort_by_key(|r| r.batch);
        let adv: Vec<(usize, f64)> = ours
            .iter()
            .map(|r| (r.batch, r.ar_per_token_s / r.sd_per_token_s.unwrap_or(f64::INFINITY)))
            .collect();
        let first = adv.iter().position(|&(b, x)| (1..=16).contains(&b) && x > 1.0);
        let ok = first.is_some_and(|i| adv[i..].windows(2).all(|w| w[1].1 >= w[0].1));
        a &= ok;
        notes.push(format!(
            "(a) {} crossover at batch {} {}",
            cfg.id,
            first.map_or("none".to_string(), |i| adv[i].0.to_string()),
            ok_word(ok)
        ));
    }

    // (b) HB-cached AR at batch 1 with hit rate >= 0.9
    let geom = ModelGeometry::default();
    let hw = HwConfig::default();
    let xpu = evaluate(&geom, &hw, BaselineArch::Xpu, SdScheme::ArOnly, None, 1, true)
        .map_err(|e| e.to_string())?
        .ar
        .per_token_latency();
    let mut worst_b = f64::INFINITY;
    for hit in [0.9, 0.95, 1.0] {
        let mut cache = cache_state(&geom, &hw, BaselineArch::HbXpu, SdScheme::ArOnly, None, 1, false)
            .map_err(|e| e.to_string())?;
        cache.ar_hit = hit;
        let ws = build_workloads(&geom, &hw, BaselineArch::HbXpu, SdScheme::ArOnly, None, &cache, 1)
            .map_err(|e| e.to_string())?;
        let t = step_cost(&hw, &ws, DecodeMode::Ar, None).map_err(|e| e.to_string())?.per_token_latency();
        worst_b = worst_b.min(xpu / t);
    }
    let b = worst_b >= 2.0;
    notes.push(format!("(b) min speedup over xpu at hit>=0.9: {worst_b:.2}x {}", ok_word(b)));

    // (c) PIM offload versus the same system with unbounded in-memory compute
    let unbounded = HwConfig {
        pim_tmacs: 1e9,
        ..hw
    };
    let mut c = true;
    let mut crossed = None;
    for batch in [1, 2, 4, 8, 16, 32, 64, 128, 256] {
        let cache = cache_state(&geom, &hw, BaselineArch::XpuPim, SdScheme::ArOnly, None, batch, false)
            .map_err(|e| e.to_string())?;
        let ws = build_workloads(&geom, &hw, BaselineArch::XpuPim, SdScheme::ArOnly, None, &cache, batch)
            .map_err(|e| e.to_string())?;
        let w = &ws.ar.workload;
        let real = phase_latency(&hw, w, ws.ar.parallelism).map_err(|e| e.to_string())?.seconds;
        let extrapolated = phase_latency(&unbounded, w, ws.ar.parallelism).map_err(|e| e.to_string())?.seconds;
        let demand = w.internal_macs / extrapolated;
        let ok = if demand <= hw.pim_tmacs * 1e12 {
            (real - extrapolated).abs() <= 1e-12 * extrapolated
        } else {
            crossed.get_or_insert(batch);
            real > extrapolated
        };
        c &= ok;
    }
    c &= crossed.is_some();
    notes.push(format!(
        "(c) xpu_pim exceeds 1.64 TMAC/s from batch {} and degrades {}",
        crossed.map_or("none".to_string(), |b| b.to_string()),
        ok_word(c)
    ));

    // (d) energy closure and per-bit costs
    let mut d = true;
    for r in &rows {
        let sum = r.energy_compute_j + r.energy_ext_mem_j + r.energy_hb_mem_j + r.energy_comm_j + r.energy_static_j;
        d &= sum == r.energy_total_j;
    }
    for arch in [BaselineArch::HbXpu, BaselineArch::Ours] {
        let e = evaluate(&geom, &hw, arch, SdScheme::ArOnly, None, 4, true).map_err(|e| e.to_string())?;
        let w = &e.workloads.ar.workload;
        let hb = w.hb_bytes * 8.0 * 0.43e-12;
        let ext = w.ext_bytes * 8.0 * 3.88e-12;
        d &= (e.ar.energy.hb_mem - hb).abs() <= 1e-12 * hb && (e.ar.energy.ext_mem - ext).abs() <= 1e-12 * ext;
    }
    notes.push(format!("(d) energy closes exactly over {} rows, 0.43/3.88 pJ/bit {}", rows.len(), ok_word(d)));

    check(a && b && c && d, notes.join("; "))
}

fn criterion_9() -> Outcome {
    let scenarios = example();
    let first = to_csv(&run_scenarios(&scenarios, true).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let second = to_csv(&run_scenarios(&scenarios, true).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let sequential =
        to_csv(&run_scenarios(&scenarios, false).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let golden_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/example.csv");
    let golden = std::fs::read_to_string(&golden_path).map_err(|e| format!("{}: {e}", golden_path.display()))?;
    check(
        first == second && first == sequential && first == golden,
        format!(
            "repeat {}, sequential {}, golden {} ({} bytes)",
            ok_word(first == second),
            ok_word(first == sequential),
            ok_word(first == golden),
            first.len()
        ),
    )
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("bit-slice exactness", criterion_1),
        ("truncation and lsb-augment error bounds", criterion_2),
        ("sd speedup formula", criterion_3),
        ("cache hit-rate approximation", criterion_4),
        ("output-stream exactness", criterion_5),
        ("throttling audit", criterion_6),
        ("ablation directions", criterion_7),
        ("system trends", criterion_8),
        ("determinism and golden file", criterion_9),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        match outcome {
            Ok(detail) => println!("criterion {} PASS {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} FAIL {name}: {detail}", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
