//! Small-mesh behavioral checks of the benchmark cases: each one runs in
//! seconds and pins the physics the full-size runs rely on.

use solver::cases::run_case;
use solver::config::{Case, MaterialCfg, RunConfig};
use std::path::PathBuf;

fn out_dir(tmp: &tempfile::TempDir, name: &str) -> PathBuf {
    tmp.path().join(name)
}

#[test]
fn compression_pushes_the_tip_down_monotonically() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::defaults(Case::Compress);
    cfg.nel = [2, 2, 2];
    cfg.dt = 0.05;
    cfg.t_final = 0.2;
    cfg.newton_refresh = 0;
    cfg.out = out_dir(&tmp, "compress");
    let outcome = run_case(&cfg, None).unwrap();
    let s = &outcome.summary;
    assert_eq!(s["checks"]["all_steps_converged"], true);
    assert_eq!(s["checks"]["tip_moved_down"], true);
    let tip = s["outcome"]["tip_uz"].as_f64().unwrap();
    assert!(tip < 0.0, "tip_uz {tip}");

    let trace = std::fs::read_to_string(cfg.out.join("loaddisp.csv")).unwrap();
    let mut last = 0.0;
    for line in trace.lines().skip(1) {
        let uz: f64 = line.split(',').nth(2).unwrap().parse().unwrap();
        assert!(uz < last, "tip must keep moving down under a growing load");
        last = uz;
    }
}

#[test]
fn spinning_disk_keeps_linear_momentum_at_zero() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::defaults(Case::Disk);
    cfg.nel = [4, 2, 2];
    cfg.dt = 1e-3;
    cfg.t_final = 5e-3;
    cfg.newton_refresh = 0;
    cfg.tol_r = 1e-10;
    cfg.out = out_dir(&tmp, "disk");
    let outcome = run_case(&cfg, None).unwrap();
    let o = &outcome.summary["outcome"];
    let lin = o["max_abs_linear_momentum"].as_f64().unwrap();
    assert!(lin < 1e-10, "linear momentum {lin}");
    // the spin must persist: total energy stays near its starting value
    // over these five steps
    let te_drift = o["max_rel_energy_error"].as_f64().unwrap();
    assert!(te_drift < 1e-3, "te drift {te_drift}");
    // coarse mesh: the spin differs from the analytic cylinder value by
    // discretization error only, and must not wander further than that
    let az_vs_exact = o["max_rel_angular_z_error"].as_f64().unwrap();
    assert!(az_vs_exact < 0.05, "lz err {az_vs_exact}");
}

#[test]
fn tension_with_zero_fiber_stiffness_matches_neo_hookean() {
    let tmp = tempfile::tempdir().unwrap();
    let (c1, rho0) = (7.64e3, 1e3);
    let mut goh = RunConfig::defaults(Case::Tension);
    goh.material = MaterialCfg::Goh {
        c1,
        k1: 0.0,
        k2: 524.6,
        kd: 0.226,
        rho0,
    };
    goh.dt = 0.05;
    goh.t_final = 0.25;
    goh.tol_r = 1e-12;
    goh.tol_a = 1e-10;
    goh.newton_refresh = 0;
    goh.out = out_dir(&tmp, "goh_k1_zero");
    let mut nh = goh.clone();
    nh.material = MaterialCfg::NeoHookean { c1, rho0 };
    nh.out = out_dir(&tmp, "nh");

    let a = run_case(&goh, None).unwrap();
    let b = run_case(&nh, None).unwrap();
    let ta = a.summary["outcome"]["tip_uz"].as_f64().unwrap();
    let tb = b.summary["outcome"]["tip_uz"].as_f64().unwrap();
    assert!(ta > 0.0);
    let rel = (ta - tb).abs() / tb.abs();
    assert!(rel < 1e-10, "tips {ta} vs {tb}, rel {rel}");
}

#[test]
fn fibers_aligned_with_the_load_are_stiffest() {
    let tmp = tempfile::tempdir().unwrap();
    let mut tips = Vec::new();
    for phi in [0.0, 30.0, 60.0] {
        let mut cfg = RunConfig::defaults(Case::Tension);
        cfg.fiber_deg = phi;
        cfg.dt = 0.05;
        cfg.t_final = 0.25;
        cfg.newton_refresh = 0;
        cfg.out = out_dir(&tmp, &format!("phi{phi}"));
        let outcome = run_case(&cfg, None).unwrap();
        tips.push(outcome.summary["outcome"]["tip_uz"].as_f64().unwrap());
    }
    assert!(
        tips[0] > 0.0 && tips[0] < tips[1] && tips[1] < tips[2],
        "stretch must grow as fibers rotate away from the load: {tips:?}"
    );
}

#[test]
fn unloaded_custom_case_stays_quiescent() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::defaults(Case::Custom);
    cfg.nel = [2, 2, 2];
    cfg.dt = 0.05;
    cfg.t_final = 0.2;
    cfg.load = 0.0;
    cfg.out = out_dir(&tmp, "custom");
    let outcome = run_case(&cfg, None).unwrap();
    let te = outcome.summary["outcome"]["te"].as_f64().unwrap();
    assert_eq!(te, 0.0);
    assert_eq!(
        outcome.summary["outcome"]["newton"]["max_iters"]
            .as_u64()
            .unwrap(),
        0
    );
}
