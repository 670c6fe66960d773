//! End-to-end tests driving the compiled binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mergegrid"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    bin()
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> serde_json::Value {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn write_synth_config(dir: &Path, drift: f64) -> PathBuf {
    let path = dir.join("cfg.json");
    std::fs::write(
        &path,
        serde_json::json!({
            "domain_name": "alpha",
            "n_users": 25,
            "n_items": 40,
            "latent_dim": 4,
            "drift_angle_per_phase": drift,
            "active_prob": 0.5,
            "item_arrival_rate": 0.05,
            "events_per_phase": {"pretrain": 600, "p1": 200, "p2": 200, "test": 200},
            "seed": 11
        })
        .to_string(),
    )
    .unwrap();
    path
}

#[test]
fn help_exists_on_every_subcommand() {
    let subcommands = [
        vec!["--help"],
        vec!["inspect", "--help"],
        vec!["merge", "--help"],
        vec!["norms", "--help"],
        vec!["grid", "--help"],
        vec!["grid", "register", "--help"],
        vec!["grid", "ls", "--help"],
        vec!["grid", "resolve", "--help"],
        vec!["temporal-sweep", "--help"],
        vec!["predict-lambda", "--help"],
        vec!["synth", "--help"],
        vec!["synth", "gen", "--help"],
        vec!["synth", "train", "--help"],
        vec!["eval", "--help"],
        vec!["report", "--help"],
        vec!["pipeline", "--help"],
    ];
    for args in subcommands {
        let out = bin().args(&args).output().unwrap();
        assert!(out.status.success(), "{args:?} help failed");
    }
}

#[test]
fn unknown_flag_is_usage_error() {
    let out = bin()
        .args(["inspect", "--bogus-flag", "x.mgt"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = bin().args(["definitely-not-a-command"]).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn missing_file_is_data_error() {
    let out = bin()
        .args(["inspect", "/nonexistent/never.mgt"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn degenerate_regression_is_numeric_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("stats.csv"),
        "domain,avg_gap_days,lambda_star,p_active\na,100,0.5,0.4\nb,100,0.7,0.4\nc,100,0.9,0.4\n",
    )
    .unwrap();
    let out = run(&["predict-lambda", "--stats", "stats.csv"], dir.path());
    assert_eq!(
        out.status.code(),
        Some(3),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn synth_train_eval_flow_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    write_synth_config(dir.path(), 0.0);

    let gen = stdout_json(&run(
        &[
            "synth",
            "gen",
            "--config",
            "cfg.json",
            "--out",
            "events.jsonl",
        ],
        dir.path(),
    ));
    assert!(gen["events"].as_u64().unwrap() > 0);

    for out_name in ["a.mgt", "b.mgt"] {
        let out = run(
            &[
                "synth",
                "train",
                "--log",
                "events.jsonl",
                "--stage",
                "pretrain",
                "--seed",
                "5",
                "--domain",
                "alpha",
                "--out",
                out_name,
            ],
            dir.path(),
        );
        assert!(
            out.status.success(),
            "stderr: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let a = std::fs::read(dir.path().join("a.mgt")).unwrap();
    let b = std::fs::read(dir.path().join("b.mgt")).unwrap();
    assert_eq!(a, b, "identical invocations must produce identical bytes");

    let metrics = stdout_json(&run(
        &[
            "eval",
            "--ckpt",
            "a.mgt",
            "--log",
            "events.jsonl",
            "--ks",
            "10,20",
            "--group",
            "all",
        ],
        dir.path(),
    ));
    assert!(metrics["ndcg"]["10"].as_f64().unwrap() >= 0.0);
    assert_eq!(metrics["group"], "all");

    let inspect = stdout_json(&run(&["inspect", "a.mgt"], dir.path()));
    assert_eq!(inspect["phase"], "t0");
    assert_eq!(inspect["tensors"].as_array().unwrap().len(), 2);
}

#[test]
fn seed_is_required_for_training() {
    let dir = tempfile::tempdir().unwrap();
    write_synth_config(dir.path(), 0.0);
    run(
        &[
            "synth",
            "gen",
            "--config",
            "cfg.json",
            "--out",
            "events.jsonl",
        ],
        dir.path(),
    );
    let out = run(
        &[
            "synth",
            "train",
            "--log",
            "events.jsonl",
            "--stage",
            "pretrain",
            "--out",
            "x.mgt",
        ],
        dir.path(),
    );
    assert_eq!(
        out.status.code(),
        Some(1),
        "missing --seed must be a usage error"
    );
}

#[test]
fn grid_and_merge_flow() {
    let dir = tempfile::tempdir().unwrap();
    write_synth_config(dir.path(), 0.0);
    run(
        &[
            "synth",
            "gen",
            "--config",
            "cfg.json",
            "--out",
            "events.jsonl",
        ],
        dir.path(),
    );
    for (stage, init, out_name) in [
        ("pretrain", None, "t0.mgt"),
        ("p1", Some("t0.mgt"), "t1.mgt"),
        ("p2", Some("t1.mgt"), "t2.mgt"),
    ] {
        let mut args = vec![
            "synth",
            "train",
            "--log",
            "events.jsonl",
            "--stage",
            stage,
            "--seed",
            "5",
            "--domain",
            "alpha",
            "--out",
            out_name,
        ];
        if let Some(init) = init {
            args.extend(["--init", init]);
        }
        let out = run(&args, dir.path());
        assert!(
            out.status.success(),
            "{stage}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }

    // register base + cells
    run(
        &[
            "grid",
            "register",
            "--manifest",
            "grid.json",
            "--as-base",
            "--ckpt",
            "t0.mgt",
        ],
        dir.path(),
    );
    for (phase, file) in [("t0", "t0.mgt"), ("t1", "t1.mgt"), ("t2", "t2.mgt")] {
        let out = run(
            &[
                "grid",
                "register",
                "--manifest",
                "grid.json",
                "--domain",
                "alpha",
                "--phase",
                phase,
                "--ckpt",
                file,
            ],
            dir.path(),
        );
        assert!(out.status.success());
    }
    // duplicate cell without --force
    let dup = run(
        &[
            "grid",
            "register",
            "--manifest",
            "grid.json",
            "--domain",
            "alpha",
            "--phase",
            "t1",
            "--ckpt",
            "t1.mgt",
        ],
        dir.path(),
    );
    assert_eq!(dup.status.code(), Some(2));

    let ls = stdout_json(&run(&["grid", "ls", "--manifest", "grid.json"], dir.path()));
    assert_eq!(ls["entries"].as_array().unwrap().len(), 3);

    // resolve a neutral base over one member
    let out = run(
        &[
            "grid",
            "resolve",
            "--manifest",
            "grid.json",
            "--kind",
            "neutral",
            "--members",
            "alpha:t1",
            "--out",
            "neutral.mgt",
        ],
        dir.path(),
    );
    assert!(out.status.success());

    // temporal interpolation merge via recipe: average of t1 and t2
    std::fs::write(
        dir.path().join("recipe.json"),
        serde_json::json!({
            "method": "average",
            "inputs": ["alpha_t1", "alpha_t2"],
            "output_id": "halfway"
        })
        .to_string(),
    )
    .unwrap();
    let merged = stdout_json(&run(
        &[
            "merge",
            "--recipe",
            "recipe.json",
            "--grid",
            "grid.json",
            "--out",
            "merged.mgt",
        ],
        dir.path(),
    ));
    assert_eq!(merged["output_id"], "halfway");

    // recipe referencing a missing checkpoint: exit 2, message names the id
    std::fs::write(
        dir.path().join("bad.json"),
        serde_json::json!({
            "method": "average",
            "inputs": ["ghost_ckpt", "alpha_t2"],
            "output_id": "x"
        })
        .to_string(),
    )
    .unwrap();
    let bad = run(
        &[
            "merge",
            "--recipe",
            "bad.json",
            "--grid",
            "grid.json",
            "--out",
            "x.mgt",
        ],
        dir.path(),
    );
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("ghost_ckpt"));

    // norms CSV
    let out = run(&["norms", "t2.mgt", "--base", "t1.mgt"], dir.path());
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.starts_with("tensor,name,l1\n"));
    assert!(text.lines().last().unwrap().starts_with("total,,"));
}

#[test]
fn temporal_sweep_cli() {
    let dir = tempfile::tempdir().unwrap();
    write_synth_config(dir.path(), 0.8);
    run(
        &[
            "synth",
            "gen",
            "--config",
            "cfg.json",
            "--out",
            "events.jsonl",
        ],
        dir.path(),
    );
    for (stage, init, out_name) in [
        ("pretrain", None, "t0.mgt"),
        ("p1", Some("t0.mgt"), "t1.mgt"),
        ("p2", Some("t1.mgt"), "t2.mgt"),
    ] {
        let mut args = vec![
            "synth",
            "train",
            "--log",
            "events.jsonl",
            "--stage",
            stage,
            "--seed",
            "5",
            "--domain",
            "alpha",
            "--out",
            out_name,
        ];
        if let Some(init) = init {
            args.extend(["--init", init]);
        }
        run(&args, dir.path());
    }
    let out = stdout_json(&run(
        &[
            "temporal-sweep",
            "--t1",
            "t1.mgt",
            "--t2",
            "t2.mgt",
            "--lambdas",
            "0:1:0.25",
            "--log",
            "events.jsonl",
            "--out",
            "sweep.json",
        ],
        dir.path(),
    ));
    assert_eq!(out["selection_metric"], "ndcg@10");
    let sweep: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("sweep.json")).unwrap()).unwrap();
    assert_eq!(sweep["lambdas"].as_array().unwrap().len(), 5);
    assert!(sweep["argmax"]["all"].is_number());

    // lambda beyond the bound requires the explicit flag
    let wide = run(
        &[
            "temporal-sweep",
            "--t1",
            "t1.mgt",
            "--t2",
            "t2.mgt",
            "--lambdas",
            "0:3:0.5",
            "--log",
            "events.jsonl",
            "--out",
            "wide.json",
        ],
        dir.path(),
    );
    assert_eq!(wide.status.code(), Some(2));
    let wide_ok = run(
        &[
            "temporal-sweep",
            "--t1",
            "t1.mgt",
            "--t2",
            "t2.mgt",
            "--lambdas",
            "0:3:0.5",
            "--log",
            "events.jsonl",
            "--out",
            "wide.json",
            "--allow-wide-extrapolation",
        ],
        dir.path(),
    );
    assert!(wide_ok.status.success());
}

#[test]
fn predict_lambda_on_published_rows() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("stats.csv"),
        "domain,avg_gap_days,lambda_star,p_active\n\
         Hea,662.9,0.715,0.394\n\
         Spo,563.9,0.700,0.449\n\
         Mov,520.8,0.985,0.348\n\
         Vid,418.2,1.050,0.452\n\
         Boo,336.6,1.090,0.458\n\
         Cel,362.0,1.165,0.399\n",
    )
    .unwrap();
    let out = run(&["predict-lambda", "--stats", "stats.csv"], dir.path());
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    let lines: Vec<&str> = text.trim().lines().collect();
    assert_eq!(lines[0], "domain,lambda_pred,lambda_blend");
    assert_eq!(lines.len(), 7);
    // Health row: LOO prediction on the other five domains, blended by 0.394
    let hea = lines.iter().find(|l| l.starts_with("Hea,")).unwrap();
    let fields: Vec<&str> = hea.split(',').collect();
    let pred: f64 = fields[1].parse().unwrap();
    let blend: f64 = fields[2].parse().unwrap();
    assert!((pred - 0.647_320_039_253_571_2).abs() < 1e-9);
    assert!((blend - 0.786_275_943_787_664_1).abs() < 1e-9);
}

#[test]
fn report_writes_heat_csv() {
    let dir = tempfile::tempdir().unwrap();
    let record = serde_json::json!({
        "group": "all",
        "recall": {"10": 0.4, "20": 0.5},
        "ndcg": {"10": 0.2, "20": 0.25},
        "n_evaluated": 100,
        "skipped": 0
    });
    let half = serde_json::json!({
        "group": "all",
        "recall": {"10": 0.2, "20": 0.25},
        "ndcg": {"10": 0.1, "20": 0.125},
        "n_evaluated": 100,
        "skipped": 0
    });
    std::fs::write(
        dir.path().join("baseline.json"),
        serde_json::json!({"alpha": record}).to_string(),
    )
    .unwrap();
    std::fs::write(
        dir.path().join("merged.json"),
        serde_json::json!({"alpha": half}).to_string(),
    )
    .unwrap();
    let out = stdout_json(&run(
        &[
            "report",
            "--merged",
            "merged.json",
            "--baseline",
            "baseline.json",
            "--out",
            "heat.csv",
        ],
        dir.path(),
    ));
    assert_eq!(out["report"]["alpha"], -50.0);
    let csv = std::fs::read_to_string(dir.path().join("heat.csv")).unwrap();
    assert!(csv.starts_with("domain,metric,baseline,merged,change_pct\n"));
    assert!(csv.contains("alpha,ndcg@10,0.2,0.1,-50"), "{csv}");
}

#[test]
fn pipeline_cli_reproduces_bundled_goldens() {
    let manifest_dir = Path::new(env!("CARGO_MANIFEST_DIR"));
    let experiment = manifest_dir.join("../../experiments/two_domain.json");
    let golden_dir = manifest_dir.join("../core/tests/golden");
    let dir = tempfile::tempdir().unwrap();
    let out = bin()
        .args([
            "pipeline",
            "--experiment",
            experiment.to_str().unwrap(),
            "--out-dir",
            dir.path().join("run").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    for file in ["sweep.json", "heat.csv"] {
        let got = std::fs::read(dir.path().join("run").join(file)).unwrap();
        let want = std::fs::read(golden_dir.join(file)).unwrap();
        assert_eq!(got, want, "{file} from the CLI differs from the golden");
    }
}

#[test]
fn pipeline_cli_produces_artifacts_and_respects_thread_cap() {
    let dir = tempfile::tempdir().unwrap();
    let spec = serde_json::json!({
        "seed": 9,
        "domains": [
            {
                "domain_name": "alpha",
                "n_users": 20, "n_items": 30, "latent_dim": 4,
                "drift_angle_per_phase": 0.0, "active_prob": 0.5,
                "item_arrival_rate": 0.05,
                "events_per_phase": {"pretrain": 400, "p1": 150, "p2": 150, "test": 150},
                "seed": 0
            },
            {
                "domain_name": "beta",
                "n_users": 20, "n_items": 30, "latent_dim": 4,
                "drift_angle_per_phase": 0.0, "active_prob": 0.5,
                "item_arrival_rate": 0.05,
                "events_per_phase": {"pretrain": 400, "p1": 150, "p2": 150, "test": 150},
                "seed": 0
            }
        ],
        "model": {
            "latent_dim": 8, "history_window": 10, "learning_rate": 0.1,
            "epochs_pretrain": 3, "epochs_incremental": 2,
            "negatives_per_step": 16, "seed": 0
        },
        "merge": {"method": "average", "base": {"kind": "pretrained"}},
        "sweep": {"domain": "alpha", "lambdas": "0:1:0.5"},
        "ks": [10, 20]
    });
    std::fs::write(dir.path().join("exp.json"), spec.to_string()).unwrap();

    let run_with_threads = |threads: &str, out_dir: &str| -> Output {
        bin()
            .args(["pipeline", "--experiment", "exp.json", "--out-dir", out_dir])
            .env("MERGEGRID_THREADS", threads)
            .current_dir(dir.path())
            .output()
            .unwrap()
    };
    let a = run_with_threads("1", "run1");
    assert!(
        a.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&a.stderr)
    );
    let b = run_with_threads("4", "run4");
    assert!(b.status.success());

    for file in [
        "grid.json",
        "merged.mgt",
        "sweep.json",
        "heat.csv",
        "baselines.json",
    ] {
        let x = std::fs::read(dir.path().join("run1").join(file)).unwrap();
        let y = std::fs::read(dir.path().join("run4").join(file)).unwrap();
        assert_eq!(x, y, "{file} depends on MERGEGRID_THREADS");
    }
}
