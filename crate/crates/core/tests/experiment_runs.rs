//! Whole experiments: determinism, ordering and persisted reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use bouquet::enforcer::{Enforcer, MockBackend};
use bouquet::experiment::{
    load_reports, prepare, run_experiment, ExperimentConfig, ExperimentError, MANIFEST_FILE,
};
use bouquet::enforcer::BackendKind;
use bouquet::scheduler::{RunMode, RunStatus, TaskTemplate};
use bouquet::HostCapabilities;

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").join(name)
}

fn config(out: &Path) -> ExperimentConfig {
    ExperimentConfig {
        catalog_paths: vec![fixture("gpus_paper.json"), fixture("host_rtx4070s.json")],
        popularity_path: Some(fixture("popularity_3way.csv")),
        workload_path: Some(fixture("resnet18_like.json")),
        federation: None,
        clients_per_round: 10,
        rounds: 3,
        seed: 42,
        mode: RunMode::Simulated,
        backend: BackendKind::Real,
        output_dir: out.to_path_buf(),
        degrade_allowed: false,
        host_profile_id: None,
        params_in: None,
        task: TaskTemplate {
            argv: vec!["true".into()],
            working_dir: ".".into(),
            timeout_s: 3600.0,
            extra_env: BTreeMap::new(),
        },
        filter: Default::default(),
    }
}

fn simulate(cfg: ExperimentConfig) -> Vec<bouquet::scheduler::RoundReport> {
    let prep = prepare(cfg).unwrap();
    let host = prep.simulated_host().unwrap();
    run_experiment(&prep, &host, None, |_| {}).unwrap()
}

fn dir_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
        })
        .collect()
}

#[test]
fn same_seed_gives_byte_identical_outputs() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = simulate(config(a.path()));
    simulate(config(b.path()));
    assert_eq!(ra.len(), 3);

    // Output dirs differ, and the manifest records them; compare the rest.
    let mut fa = dir_bytes(a.path());
    let mut fb = dir_bytes(b.path());
    assert_eq!(fa.keys().collect::<Vec<_>>(), [MANIFEST_FILE, "round-0000.jsonl", "round-0001.jsonl", "round-0002.jsonl"]);
    let ma = String::from_utf8(fa.remove(MANIFEST_FILE).unwrap()).unwrap();
    let mb = String::from_utf8(fb.remove(MANIFEST_FILE).unwrap()).unwrap();
    assert_eq!(fa, fb);
    let strip = |s: &str, dir: &Path| s.replace(&dir.display().to_string(), "OUT");
    assert_eq!(strip(&ma, a.path()), strip(&mb, b.path()));
}

#[test]
fn rounds_are_sequential_and_draw_different_federations() {
    let tmp = tempfile::tempdir().unwrap();
    let reports = simulate(config(tmp.path()));
    let mut last_end = 0.0;
    for r in &reports {
        assert!(r.is_sequential());
        assert_eq!(r.runs.len(), 10);
        for (i, run) in r.runs.iter().enumerate() {
            assert_eq!(run.client_idx, i);
            assert!(run.started_at >= last_end);
            assert!(run.ended_at >= run.started_at);
            assert!(run.params_out.is_none());
            last_end = run.ended_at;
        }
    }
    let feds: Vec<Vec<&str>> = reports
        .iter()
        .map(|r| r.runs.iter().map(|c| c.profile_id.as_str()).collect())
        .collect();
    assert!(feds[0] != feds[1] || feds[1] != feds[2], "{feds:?}");
}

#[test]
fn different_seeds_give_different_federations() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut cfg = config(b.path());
    cfg.seed = 43;
    let ids = |rs: &[bouquet::scheduler::RoundReport]| {
        rs.iter().flat_map(|r| r.runs.iter().map(|c| c.profile_id.clone())).collect::<Vec<_>>()
    };
    assert_ne!(ids(&simulate(config(a.path()))), ids(&simulate(cfg)));
}

#[test]
fn reports_round_trip_through_disk() {
    let tmp = tempfile::tempdir().unwrap();
    let reports = simulate(config(tmp.path()));
    assert_eq!(load_reports(tmp.path()).unwrap(), reports);
}

#[test]
fn zero_clients_gives_empty_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path());
    cfg.clients_per_round = 0;
    cfg.rounds = 1;
    let reports = simulate(cfg);
    assert_eq!(reports.len(), 1);
    assert!(reports[0].runs.is_empty());
    assert_eq!(fs::read(tmp.path().join("round-0000.jsonl")).unwrap(), b"");
}

#[test]
fn fixed_federation_runs_every_profile_once() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path());
    cfg.rounds = 1;
    cfg.federation = Some(vec!["gtx-1650".into(), "rtx-3080".into()]);
    let reports = simulate(cfg);
    let runs = &reports[0].runs;
    assert_eq!(runs[0].profile_id, "gtx-1650");
    assert_eq!(runs[1].profile_id, "rtx-3080");
    assert!(runs[0].wall_time_s > runs[1].wall_time_s);
    assert!(runs.iter().all(|r| r.status == RunStatus::Ok));
}

#[test]
fn zero_rounds_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = config(tmp.path());
    cfg.rounds = 0;
    assert!(prepare(cfg).unwrap_err().is_config());
}

fn real_config(out: &Path) -> ExperimentConfig {
    let mut cfg = config(out);
    cfg.mode = RunMode::Real;
    cfg.backend = BackendKind::Mock;
    cfg.workload_path = None;
    cfg.rounds = 2;
    cfg.clients_per_round = 2;
    cfg.task.argv = ["sh", "-c", "printf '%s' \"$1\" > \"$2\"", "sh", "{profile_id}", "{params_out}"]
        .map(String::from)
        .to_vec();
    cfg.task.timeout_s = 30.0;
    cfg
}

fn mock_host(prep: &bouquet::experiment::PreparedExperiment) -> HostCapabilities {
    let hw = prep.catalog.resolve("rtx-4070-super-host").unwrap().clone();
    HostCapabilities {
        hardware: hw,
        has_gpu_management_tool: true,
        has_mps: true,
        has_cgroup_v2: true,
        has_cpu_freq_control: true,
        is_privileged: true,
    }
}

#[test]
fn real_mode_with_mock_backend_runs_tasks_and_restores_the_host() {
    let tmp = tempfile::tempdir().unwrap();
    let prep = prepare(real_config(tmp.path())).unwrap();
    let host = mock_host(&prep);
    let backend = MockBackend::new();
    let before = backend.snapshot();
    let state = backend.state_handle();
    let enforcer = Enforcer::new(Box::new(backend));
    let reports = run_experiment(&prep, &host, Some(&enforcer), |_| {}).unwrap();

    assert!(!enforcer.has_active_lease());
    assert_eq!(*state.lock().unwrap(), before);
    for r in &reports {
        assert!(r.is_sequential());
        for run in &r.runs {
            assert_eq!(run.status, RunStatus::Ok, "{:?}", run.detail);
            let out = run.params_out.as_ref().unwrap();
            assert_eq!(fs::read_to_string(out).unwrap(), run.profile_id);
        }
    }
    assert!(tmp.path().join("params_in.bin").exists());
}

#[test]
fn unprivileged_real_mode_fails_before_touching_anything() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let prep = prepare(real_config(&out)).unwrap();
    let host = mock_host(&prep);
    let enforcer = Enforcer::new(Box::new(MockBackend::unprivileged()));
    let err = run_experiment(&prep, &host, Some(&enforcer), |_| {}).unwrap_err();
    assert!(err.is_privilege(), "{err}");
    assert!(!matches!(err, ExperimentError::Config(_)));
    assert!(!out.exists());
}
