use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;

use moesim::elastic_sd::sd_speedup;
use moesim::hwmodel::{BaselineArch, DecodeMode, SdParams, SdScheme};
use moesim::runner::{evaluate, parse_config, run_scenarios, to_csv, to_json, ResultRow, ScenarioConfig, EXAMPLE_CONFIG};

fn scenarios() -> Vec<ScenarioConfig> {
    parse_config(EXAMPLE_CONFIG, Path::new("configs/example.toml")).unwrap()
}

fn rows() -> &'static [ResultRow] {
    static ROWS: OnceLock<Vec<ResultRow>> = OnceLock::new();
    ROWS.get_or_init(|| run_scenarios(&scenarios(), true).unwrap())
}

fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs())
}

#[test]
fn csv_matches_golden() {
    let golden = std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/example.csv")).unwrap();
    assert_eq!(to_csv(rows()).unwrap(), golden);
}

#[test]
fn json_round_trips_exactly() {
    let text = to_json(rows()).unwrap();
    let back: Vec<ResultRow> = serde_json::from_str(&text).unwrap();
    assert_eq!(back, rows());
}

#[test]
fn rows_are_sorted_and_cover_every_batch() {
    let r = rows();
    assert!(r.windows(2).all(|w| w[0].scenario <= w[1].scenario));
    for cfg in scenarios() {
        let n = r.iter().filter(|row| row.scenario == cfg.id).count();
        assert_eq!(n % cfg.batch_sizes.len(), 0);
        assert!(n > 0);
    }
}

#[test]
fn row_columns_are_mutually_consistent() {
    for r in rows() {
        assert!(close(r.ar_per_token_s, r.ar_step_s), "{r:?}");
        let sum = r.energy_compute_j + r.energy_ext_mem_j + r.energy_hb_mem_j + r.energy_comm_j + r.energy_static_j;
        assert_eq!(sum, r.energy_total_j);
        if r.arch == BaselineArch::Xpu && r.scheme == SdScheme::ArOnly {
            assert_eq!(r.speedup_vs_xpu, 1.0);
        }
        let Some(sd_per_token) = r.sd_per_token_s else {
            assert_eq!(r.mode, DecodeMode::Ar);
            assert_eq!(r.per_token_latency_s, r.ar_per_token_s);
            continue;
        };
        let (acc, depth) = (r.accept_length.unwrap(), r.depth.unwrap());
        let (draft, verify, stall) = (r.draft_step_s.unwrap(), r.verify_step_s.unwrap(), r.pool_stall_s.unwrap());
        assert!(close(sd_per_token, (depth as f64 * draft + verify + stall) / (1.0 + acc)));
        let speedup = sd_speedup(acc, r.ar_step_s, depth, draft, verify + stall).unwrap();
        assert!(close(r.sd_speedup.unwrap(), speedup), "{r:?}");
        assert!(close(r.accept_rate.unwrap(), acc / depth as f64));
        let want = if sd_per_token < r.ar_per_token_s { DecodeMode::Sd } else { DecodeMode::Ar };
        assert_eq!(r.mode, want);
        assert_eq!(r.per_token_latency_s, sd_per_token.min(r.ar_per_token_s));
    }
}

#[test]
fn analytic_rows_reproduce_from_hwmodel() {
    for cfg in scenarios() {
        let geom = cfg.geometry();
        for r in rows().iter().filter(|r| r.scenario == cfg.id) {
            let params = match r.scheme {
                SdScheme::EagleSd | SdScheme::SlmSd | SdScheme::QuantSd => {
                    let a = cfg.analytic.get(r.scheme).unwrap();
                    Some(SdParams {
                        width: cfg.sd.width,
                        depth: cfg.sd.depth,
                        verify_count: cfg.sd.verify_count(),
                        accept_length: a.accept_at(r.batch),
                        pool_churn: 0.0,
                        draft_param_bytes: a.draft_param_bytes,
                        draft_macs_per_token: a.draft_macs_per_token,
                        expert_footprint_multiplier: a.expert_footprint_multiplier,
                    })
                }
                SdScheme::ArOnly => None,
                _ => continue,
            };
            let e = evaluate(&geom, &cfg.hw, r.arch, r.scheme, params.as_ref(), r.batch, cfg.sd.bit_sliced_cache).unwrap();
            assert_eq!(e.chosen.per_token_latency(), r.per_token_latency_s);
            assert_eq!(e.ar.latency, r.ar_step_s);
            assert_eq!(e.chosen.per_token_energy().total(), r.energy_total_j);
            assert_eq!(e.cache.ar_hit, r.ar_hit_rate);
        }
    }
}

fn moesim() -> Command {
    Command::new(env!("CARGO_BIN_EXE_moesim"))
}

#[test]
fn cli_run_writes_golden_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out.csv");
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/example.toml");
    let status = moesim().arg("run").arg(&config).arg("-o").arg(&out).arg("--sequential").status().unwrap();
    assert_eq!(status.code(), Some(0));
    assert_eq!(std::fs::read_to_string(out).unwrap(), to_csv(rows()).unwrap());
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "[[scenario]]\nid = \"x\"\n[scenario.sd]\nwidht = 2\n").unwrap();
    let out = moesim().arg("validate").arg(&bad).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("widht"));

    let small_pool = dir.path().join("pool.toml");
    std::fs::write(&small_pool, "[[scenario]]\nid = \"x\"\n[scenario.sd]\npool_capacity = 1\n").unwrap();
    let out = moesim().arg("run").arg(&small_pool).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sd.pool_capacity"));

    let missing = moesim().arg("run").arg(dir.path().join("nope.toml")).output().unwrap();
    assert_eq!(missing.status.code(), Some(1));

    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/example.toml");
    let unwritable = dir.path().join("no/such/dir/out.csv");
    let out = moesim().arg("run").arg(&config).arg("-o").arg(&unwritable).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    let ok = moesim().arg("validate").arg(&config).output().unwrap();
    assert_eq!(ok.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("hb8gib: ok"));
}
