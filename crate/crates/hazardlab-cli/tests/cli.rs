//! End-to-end checks of the binary: exit codes, stream separation, and
//! byte-stable output on unchanged input.

use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_hazardlab");

fn run(args: &[&str]) -> Output {
    Command::new(BIN).args(args).output().expect("spawn")
}

/// Deterministic toy series: spells of varying length and depth, recession
/// months interleaved so every price-decline quartile holds both kinds.
fn write_inputs(dir: &Path) -> (String, String) {
    let durations = [3, 1, 2, 5, 1, 2, 4, 1, 3, 2, 1, 6, 2, 3, 1, 2, 4, 1, 2, 3];
    let depths = [
        0.004, 0.009, 0.013, 0.018, 0.023, 0.028, 0.033, 0.038, 0.043, 0.048,
        0.006, 0.011, 0.016, 0.021, 0.026, 0.031, 0.036, 0.041, 0.046, 0.051,
    ];
    let mut rows = vec![(String::from("2000-01"), 100.0_f64)];
    let mut price = 100.0_f64;
    let (mut y, mut m) = (2000_u32, 1_u32);
    let mut push = |y: &mut u32, m: &mut u32, price: &mut f64, r: f64, rows: &mut Vec<(String, f64)>| {
        *m += 1;
        if *m == 13 {
            *m = 1;
            *y += 1;
        }
        *price *= r.exp();
        rows.push((format!("{y:04}-{m:02}"), *price));
    };
    let mut rec_rows = Vec::new();
    for (k, (&d, &depth)) in durations.iter().zip(&depths).enumerate() {
        if k % 2 == 0 {
            // recession covering the whole spell
            let mut ry = y;
            let mut rm = m + 1;
            if rm == 13 {
                rm = 1;
                ry += 1;
            }
            let months = u32::try_from(d).unwrap();
            let mut ey = ry;
            let mut em = rm + months - 1;
            while em > 12 {
                em -= 12;
                ey += 1;
            }
            rec_rows.push(format!("{ry:04}-{rm:02},{ey:04}-{em:02}"));
        }
        for _ in 0..d {
            push(&mut y, &mut m, &mut price, -depth, &mut rows);
        }
        for _ in 0..=(k % 2) {
            push(&mut y, &mut m, &mut price, 0.02, &mut rows);
        }
    }
    let mut prices = String::from("date,real_price,long_rate_pct\n");
    for (i, (d, p)) in rows.iter().enumerate() {
        let rate = 3.0 + f64::from(u32::try_from(i % 7).unwrap()) * 0.5;
        prices.push_str(&format!("{d},{p:.6},{rate:.2}\n"));
    }
    let mut recessions = String::from("begin,end\n");
    for r in rec_rows {
        recessions.push_str(&r);
        recessions.push('\n');
    }
    let pp = dir.join("prices.csv");
    let rp = dir.join("recessions.csv");
    std::fs::write(&pp, prices).unwrap();
    std::fs::write(&rp, recessions).unwrap();
    (
        pp.to_str().unwrap().to_string(),
        rp.to_str().unwrap().to_string(),
    )
}

#[test]
fn spells_csv_on_stdout_and_counts_on_stderr() {
    let dir = tempfile::tempdir().unwrap();
    let (p, r) = write_inputs(dir.path());
    let out = run(&["spells", "--prices", &p, "--recessions", &r]);
    assert_eq!(out.status.code(), Some(0));
    let body = String::from_utf8(out.stdout).unwrap();
    let mut lines = body.lines();
    assert_eq!(
        lines.next().unwrap(),
        "start,duration,event,recession,price_decline_pct,interest_rate_pct"
    );
    assert_eq!(lines.count(), 20);
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("20 spells"), "stderr: {err}");
}

#[test]
fn invalid_model_combo_is_a_usage_error_before_io() {
    // the input paths do not exist; the flag check must win
    let out = run(&[
        "fit",
        "--family",
        "lognormal",
        "--metric",
        "ph",
        "--prices",
        "/nonexistent/p.csv",
        "--recessions",
        "/nonexistent/r.csv",
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(out.stdout.is_empty());
}

#[test]
fn unknown_flag_and_subcommand_exit_one() {
    assert_eq!(run(&["fit", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(&["bogus"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["fit", "--help"]).status.code(), Some(0));
}

#[test]
fn missing_input_file_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let (_, r) = write_inputs(dir.path());
    let out = run(&["spells", "--prices", "/nonexistent/p.csv", "--recessions", &r]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("/nonexistent/p.csv"), "stderr: {err}");
}

#[test]
fn fit_emits_parseable_full_precision_json() {
    let dir = tempfile::tempdir().unwrap();
    let (p, r) = write_inputs(dir.path());
    let out = run(&[
        "fit",
        "--family",
        "weibull",
        "--covariates",
        "recession",
        "--prices",
        &p,
        "--recessions",
        &r,
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let doc: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(doc["converged"], serde_json::Value::Bool(true));
    let coefs = doc["coefficients"].as_array().unwrap();
    assert_eq!(coefs.len(), 2); // intercept + recession
    assert!(coefs[1]["se_robust"].as_f64().unwrap() > 0.0);
}

#[test]
fn repeated_runs_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (p, r) = write_inputs(dir.path());
    for cmd in [
        vec!["spells", "--prices", &p, "--recessions", &r],
        vec!["km", "--prices", &p, "--recessions", &r],
        vec![
            "fit",
            "--covariates",
            "recession,price_decline",
            "--prices",
            &p,
            "--recessions",
            &r,
        ],
    ] {
        let a = run(&cmd);
        let b = run(&cmd);
        assert_eq!(a.status.code(), Some(0));
        assert_eq!(a.stdout, b.stdout, "output drifted for {cmd:?}");
    }
}

#[test]
fn km_reports_three_strata() {
    let dir = tempfile::tempdir().unwrap();
    let (p, r) = write_inputs(dir.path());
    let out = run(&["km", "--prices", &p, "--recessions", &r]);
    assert_eq!(out.status.code(), Some(0));
    let body = String::from_utf8(out.stdout).unwrap();
    assert!(body.starts_with("time,estimate,std_err,stratum\n"));
    for s in ["all", "recession", "no_recession"] {
        assert!(
            body.lines().any(|l| l.ends_with(&format!(",{s}"))),
            "missing stratum {s}"
        );
    }
}

#[test]
fn describe_json_has_groups_and_welch() {
    let dir = tempfile::tempdir().unwrap();
    let (p, r) = write_inputs(dir.path());
    let out = run(&["describe", "--json", "--prices", &p, "--recessions", &r]);
    assert_eq!(out.status.code(), Some(0));
    let doc: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(doc["groups"].as_array().unwrap().len(), 3);
    assert!(doc["welch"]["t"].is_number());
    assert_eq!(
        doc["quartile_counts"]["price_decline"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_u64().unwrap())
            .sum::<u64>(),
        20
    );
}

#[test]
fn diagnose_writes_residual_files_when_asked() {
    let dir = tempfile::tempdir().unwrap();
    let (p, r) = write_inputs(dir.path());
    let outdir = dir.path().join("diag");
    let out = run(&[
        "diagnose",
        "--covariates",
        "recession",
        "--prices",
        &p,
        "--recessions",
        &r,
        "--out",
        outdir.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let doc: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    for key in [
        "cox_snell_summary",
        "martingale_summary",
        "deviance_summary",
        "bg_deviance",
        "bg_cox_snell",
        "bpg_deviance",
        "ssr",
    ] {
        assert!(doc.get(key).is_some(), "missing {key}");
    }
    let res = std::fs::read_to_string(outdir.join("residuals.csv")).unwrap();
    assert!(res.starts_with("spell_start,kind,value\n"));
    let qq = std::fs::read_to_string(outdir.join("qq.csv")).unwrap();
    assert!(qq.starts_with("theoretical,empirical\n"));
}

#[test]
fn compare_runs_a_frailty_lr_test() {
    let dir = tempfile::tempdir().unwrap();
    let (p, r) = write_inputs(dir.path());
    let out = run(&[
        "compare",
        "--covariates",
        "recession",
        "--frailty",
        "gamma",
        "--nested-frailty",
        "none",
        "--prices",
        &p,
        "--recessions",
        &r,
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let doc: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(doc["likelihood_ratio"]["df"].as_u64(), Some(1));
    let p_val = doc["likelihood_ratio"]["p_value"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&p_val));
}

#[test]
fn cox_fit_and_ph_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let (p, r) = write_inputs(dir.path());
    let out = run(&[
        "diagnose",
        "--family",
        "cox",
        "--covariates",
        "recession,price_decline",
        "--prices",
        &p,
        "--recessions",
        &r,
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let doc: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(doc["proportional_hazards"]["global"]["statistic"].is_number());
    assert_eq!(
        doc["proportional_hazards"]["components"]
            .as_array()
            .unwrap()
            .len(),
        2
    );
}

#[test]
fn study_writes_a_reproducible_bundle() {
    let dir = tempfile::tempdir().unwrap();
    let (p, r) = write_inputs(dir.path());
    let out1 = dir.path().join("b1");
    let out2 = dir.path().join("b2");
    for out in [&out1, &out2] {
        let res = run(&[
            "study",
            "--prices",
            &p,
            "--recessions",
            &r,
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(
            res.status.code(),
            Some(0),
            "{}",
            String::from_utf8_lossy(&res.stderr)
        );
        // nothing but the status line may reach a stream
        assert!(res.stdout.is_empty());
    }
    let mut names: Vec<_> = std::fs::read_dir(&out1)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    for want in ["manifest.json", "spells.csv", "table1.csv", "table2.csv", "km.csv"] {
        assert!(names.iter().any(|n| n == want), "missing {want}");
    }
    for n in &names {
        let a = std::fs::read(out1.join(n)).unwrap();
        let b = std::fs::read(out2.join(n)).unwrap();
        assert_eq!(a, b, "{n} differs between identical runs");
    }
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out1.join("manifest.json")).unwrap()).unwrap();
    assert!(manifest["spells"]["count"].as_u64().unwrap() > 0);
}
