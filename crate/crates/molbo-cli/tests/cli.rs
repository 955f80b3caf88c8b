//! End-to-end tests of the `molbo` binary: every subcommand, the exit-code
//! contract, and reproducibility of run outputs.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn molbo() -> Command {
    Command::new(env!("CARGO_BIN_EXE_molbo"))
}

fn toy_pool() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/toy_pool.csv")
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawning molbo");
    assert!(
        out.status.success(),
        "command failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn run_fail(cmd: &mut Command) -> (i32, String) {
    let out = cmd.output().expect("spawning molbo");
    assert!(!out.status.success(), "command unexpectedly succeeded");
    (
        out.status.code().expect("exit code"),
        String::from_utf8_lossy(&out.stderr).to_string(),
    )
}

/// The trace CSV minus its wall-clock column, which is the one measured
/// (hence nondeterministic) field in the schema.
fn without_wall_column(text: &str) -> String {
    text.lines()
        .map(|line| match line.rfind(',') {
            Some(pos) => &line[..pos],
            None => line,
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[test]
fn fingerprint_is_deterministic_and_flags_bad_smiles() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.mbof");
    let b = dir.path().join("b.mbof");
    run_ok(molbo().arg("fingerprint").arg(toy_pool()).arg("--out").arg(&a));
    run_ok(molbo().arg("fingerprint").arg(toy_pool()).arg("--out").arg(&b));
    let bytes_a = std::fs::read(&a).unwrap();
    assert_eq!(bytes_a, std::fs::read(&b).unwrap());
    // MBOF header: magic, then u32 rows and u32 columns.
    assert_eq!(&bytes_a[0..4], b"MBOF");
    assert_eq!(u32::from_le_bytes(bytes_a[4..8].try_into().unwrap()), 120);
    assert_eq!(u32::from_le_bytes(bytes_a[8..12].try_into().unwrap()), 1024);

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "id,smiles,y0\nmol-ok,CCO,1.0\nmol-broken,CC(C,2.0\n").unwrap();
    let (code, stderr) = run_fail(
        molbo()
            .arg("fingerprint")
            .arg(&bad)
            .arg("--out")
            .arg(dir.path().join("c.mbof")),
    );
    assert_eq!(code, 2);
    assert!(stderr.contains("mol-broken"), "stderr: {stderr}");
}

#[test]
fn preset_run_writes_traces_and_reproduces_itself() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("campaign");
    let run = |extra_seeds: Option<&str>| {
        let mut cmd = molbo();
        cmd.arg("run")
            .arg("--preset")
            .arg("gp-tanimoto")
            .arg("--pool")
            .arg(toy_pool())
            .arg("--out-dir")
            .arg(&out)
            .arg("--set")
            .arg("T=4")
            .arg("--set")
            .arg("m=3")
            .arg("--set")
            .arg("surrogate.fit_steps=40")
            .arg("--threads")
            .arg("2");
        if let Some(seeds) = extra_seeds {
            cmd.arg("--seeds").arg(seeds);
        }
        run_ok(&mut cmd);
    };

    // Default preset seeds: five trace files plus the summary artifacts.
    run(None);
    for seed in 0..5 {
        assert!(out.join(format!("trace_seed{seed}.csv")).exists());
    }
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["completed"], 5);
    assert_eq!(summary["config"]["surrogate.kind"], "gp-tanimoto");
    assert_eq!(summary["config"]["T"], "4");
    assert_eq!(summary["failures"].as_array().unwrap().len(), 0);

    // A fixed seed rerun reproduces the outputs (wall clock aside).
    run(Some("1"));
    let summary1 = std::fs::read_to_string(out.join("summary.json")).unwrap();
    let trace1 = std::fs::read_to_string(out.join("trace_seed1.csv")).unwrap();
    run(Some("1"));
    let summary2 = std::fs::read_to_string(out.join("summary.json")).unwrap();
    let trace2 = std::fs::read_to_string(out.join("trace_seed1.csv")).unwrap();
    assert_eq!(summary1, summary2);
    assert_eq!(without_wall_column(&trace1), without_wall_column(&trace2));

    // The resolved config is itself a complete, rerunnable description.
    run_ok(molbo().arg("run").arg("--config").arg(out.join("resolved.cfg")));
    let summary3 = std::fs::read_to_string(out.join("summary.json")).unwrap();
    let trace3 = std::fs::read_to_string(out.join("trace_seed1.csv")).unwrap();
    assert_eq!(summary1, summary3);
    assert_eq!(without_wall_column(&trace1), without_wall_column(&trace3));
}

#[test]
fn bad_names_and_unknown_keys_exit_with_code_2() {
    let (code, stderr) = run_fail(
        molbo()
            .arg("run")
            .arg("--pool")
            .arg(toy_pool())
            .arg("--set")
            .arg("surrogate.kind=gradient-boost"),
    );
    assert_eq!(code, 2);
    for name in ["gp-tanimoto", "gp-matern", "laplace-mlp", "lora-transformer"] {
        assert!(stderr.contains(name), "stderr should list {name}: {stderr}");
    }

    let (code, stderr) = run_fail(
        molbo()
            .arg("run")
            .arg("--preset")
            .arg("gp-tanimoto")
            .arg("--pool")
            .arg(toy_pool())
            .arg("--set")
            .arg("surrogate.kindd=gp"),
    );
    assert_eq!(code, 2);
    assert!(stderr.contains("surrogate.kindd"), "stderr: {stderr}");

    let (code, stderr) = run_fail(molbo().arg("run").arg("--preset").arg("nope"));
    assert_eq!(code, 2);
    assert!(stderr.contains("lora-lla"), "stderr: {stderr}");
}

#[test]
fn random_and_eval_produce_gap_and_hypervolume_curves() {
    let dir = tempfile::tempdir().unwrap();
    let pool = dir.path().join("pool2d.csv");
    // Objectives trade off (y0 rises, y1 falls) but the uniform-mean
    // scalarization still has a unique attainable optimum at p19.
    let mut csv = String::from("id,smiles,y0,y1\n");
    for k in 0..20 {
        csv.push_str(&format!(
            "p{k:02},{},{},{}\n",
            "C".repeat(k + 1),
            k,
            (19 - k) as f64 * 0.5
        ));
    }
    std::fs::write(&pool, csv).unwrap();

    // Exhaust the pool so the final incumbent is the optimum exactly.
    let runs = dir.path().join("runs");
    run_ok(
        molbo()
            .arg("random")
            .arg("--pool")
            .arg(&pool)
            .arg("--out-dir")
            .arg(&runs)
            .arg("--set")
            .arg("T=17")
            .arg("--set")
            .arg("m=3")
            .arg("--seeds")
            .arg("0,1,2"),
    );

    let traces = (0..3)
        .map(|s| runs.join(format!("trace_seed{s}.csv")).display().to_string())
        .collect::<Vec<_>>()
        .join(",");
    let eval = dir.path().join("eval");
    run_ok(
        molbo()
            .arg("eval")
            .arg("--pool")
            .arg(&pool)
            .arg("--directions")
            .arg("max,max")
            .arg("--out-dir")
            .arg(&eval)
            .arg("--group")
            .arg(format!("random={traces}")),
    );

    let gap = std::fs::read_to_string(eval.join("gap_random.csv")).unwrap();
    let rows: Vec<&str> = gap.lines().collect();
    assert_eq!(rows[0], "t,mean_gap,stderr_gap,mean_incumbent,stderr_incumbent");
    assert_eq!(rows.len(), 1 + 18); // t = 0..=17
    let last: Vec<f64> = rows[18]
        .split(',')
        .map(|v| v.parse().unwrap())
        .collect();
    assert_eq!(last[1], 1.0, "full sweep must end at GAP 1: {gap}");
    assert_eq!(last[2], 0.0);

    let hv = std::fs::read_to_string(eval.join("hypervolume_random.csv")).unwrap();
    let hv_rows: Vec<&str> = hv.lines().collect();
    assert_eq!(hv_rows[0], "t,mean_hypervolume,stderr_hypervolume");
    assert_eq!(hv_rows.len(), 1 + 18);
    let means: Vec<f64> = hv_rows[1..]
        .iter()
        .map(|r| r.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert!(
        means.windows(2).all(|w| w[1] >= w[0]),
        "hypervolume must be monotone: {means:?}"
    );
    assert!(means[17] > means[0], "the sweep should grow the front");

    // Evaluating traces against a pool they did not come from is an error.
    let (code, stderr) = run_fail(
        molbo()
            .arg("eval")
            .arg("--pool")
            .arg(toy_pool())
            .arg("--out-dir")
            .arg(dir.path().join("eval2"))
            .arg("--group")
            .arg(format!("bad={}", runs.join("trace_seed0.csv").display())),
    );
    assert_eq!(code, 2);
    assert!(stderr.contains("trace"), "stderr: {stderr}");
}
