use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_clustermc"))
}

fn write_sample_data(dir: &Path) -> std::path::PathBuf {
    use clustermc::model::simulate_data;
    use clustermc::partition::canonicalize;
    use clustermc::HyperParams;
    let hyper = HyperParams {
        mu: 0.1,
        sigma2: 0.3,
        sigma2_eta: 0.2,
        sigma2_theta: 2.0,
        p: 0.15,
    };
    let alloc = canonicalize(&[1, 1, 2, 2, 3]).unwrap();
    let data = simulate_data(&hyper, &alloc, 4, &[3; 5], 7).unwrap();
    let path = dir.join("data.csv");
    std::fs::write(&path, clustermc::io::format_data_csv(&data)).unwrap();
    path
}

#[test]
fn fit_run_report_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = write_sample_data(tmp.path());
    let hyper_path = tmp.path().join("hyper.txt");
    let out_dir = tmp.path().join("out");

    let st = bin()
        .args(["fit", "--data"])
        .arg(&data)
        .arg("--out")
        .arg(&hyper_path)
        .args(["--starts", "2", "--seed", "1"])
        .status()
        .unwrap();
    assert!(st.success());
    assert!(hyper_path.exists());

    let st = bin()
        .args(["run", "--data"])
        .arg(&data)
        .arg("--hyper")
        .arg(&hyper_path)
        .args([
            "--kernel",
            "split-merge-hybrid",
            "--iters",
            "400",
            "--seed",
            "3",
            "--k",
            "2,3",
            "--check-every",
            "200",
            "--out-dir",
        ])
        .arg(&out_dir)
        .status()
        .unwrap();
    assert!(st.success());
    let trace_path = out_dir.join("trace_0.csv");
    assert!(trace_path.exists());
    assert!(out_dir.join("chain0_consensus.csv").exists());
    assert!(out_dir.join("chain0_summary.json").exists());
    assert!(out_dir.join("progress_0.csv").exists());

    let st = bin()
        .args(["validate", "--trace"])
        .arg(&trace_path)
        .arg("--data")
        .arg(&data)
        .arg("--hyper")
        .arg(&hyper_path)
        .status()
        .unwrap();
    assert!(st.success());

    let report_dir = tmp.path().join("report");
    let st = bin()
        .args(["report", "--trace"])
        .arg(&trace_path)
        .args(["--k", "2", "--rho-min", "0.1", "--out-dir"])
        .arg(&report_dir)
        .status()
        .unwrap();
    assert!(st.success());
    assert!(report_dir.join("diag_k2.json").exists());
    assert!(report_dir.join("pairs.csv").exists());

    // the report's consensus must agree with the run's
    let a = std::fs::read_to_string(out_dir.join("chain0_consensus.csv")).unwrap();
    let b = std::fs::read_to_string(report_dir.join("consensus.csv")).unwrap();
    let (rho_a, _) = clustermc::io::read_consensus(&a).unwrap();
    let (rho_b, _) = clustermc::io::read_consensus(&b).unwrap();
    assert!(rho_a.max_abs_diff(&rho_b) < 1e-12);
}

#[test]
fn manifest_run_with_parallel_chains() {
    let tmp = tempfile::tempdir().unwrap();
    let data = write_sample_data(tmp.path());
    let out_dir = tmp.path().join("out");
    let manifest = serde_json::json!({
        "data": data,
        "hyper": {"fit": {"init": null}},
        "chains": [
            {"kernel": "gibbs", "iters": 200, "seed": 10},
            {"kernel": "split_merge_hybrid", "iters": 100, "seed": 11, "init": "one-cluster"}
        ],
        "k_list": [2, 3],
        "check_every": 100,
        "out_dir": out_dir
    });
    let mpath = tmp.path().join("manifest.json");
    std::fs::write(&mpath, serde_json::to_string_pretty(&manifest).unwrap()).unwrap();

    let st = bin().args(["validate", "--manifest"]).arg(&mpath).status().unwrap();
    assert!(st.success());

    let st = bin().args(["run", "--manifest"]).arg(&mpath).status().unwrap();
    assert!(st.success());
    assert!(out_dir.join("hyper_fitted.txt").exists());
    assert!(out_dir.join("trace_0.csv").exists());
    assert!(out_dir.join("trace_1.csv").exists());
}

#[test]
fn exit_codes_distinguish_error_families() {
    let tmp = tempfile::tempdir().unwrap();

    // parse error (family 8)
    let bad = tmp.path().join("bad.csv");
    std::fs::write(&bad, "id,v1\nA,not_a_number\n").unwrap();
    let st = bin().args(["validate", "--data"]).arg(&bad).status().unwrap();
    assert_eq!(st.code(), Some(8));

    // io error (family 9)
    let st = bin()
        .args(["validate", "--data", "/nonexistent/nope.csv"])
        .status()
        .unwrap();
    assert_eq!(st.code(), Some(9));

    // invalid hyperparameter (family 3)
    let h = tmp.path().join("h.txt");
    std::fs::write(
        &h,
        "mu = 0\nsigma2 = -1\nsigma2_eta = 1\nsigma2_theta = 1\np = 0.1\n",
    )
    .unwrap();
    let st = bin().args(["validate", "--hyper"]).arg(&h).status().unwrap();
    assert_eq!(st.code(), Some(3));

    // invalid input (family 2)
    let st = bin().arg("validate").status().unwrap();
    assert_eq!(st.code(), Some(2));
}
