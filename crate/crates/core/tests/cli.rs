mod common;

use common::{assert_success, read, selflabel, write_tiny_config};
use selflabel::cli::RunManifest;
use selflabel::data::load_csv;

fn gen_blobs(dir: &std::path::Path, dim: usize) -> std::path::PathBuf {
    let data = dir.join(format!("blobs{dim}.csv"));
    let out = selflabel(&[
        "gen-data", "--classes", "3", "--per-class", "40", "--dim", &dim.to_string(), "--seed", "2", "--out",
        data.to_str().unwrap(),
    ]);
    assert_success(&out);
    data
}

#[test]
fn missing_config_prints_usage_and_fails() {
    let out = selflabel(&["train"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    let out = selflabel(&["train", "--config", "/nonexistent/run.toml"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("cannot read config"));
}

#[test]
fn invalid_config_lists_every_error_before_work() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_blobs(dir.path(), 4);
    let cfg = write_tiny_config(dir.path(), &data);
    let run_dir = dir.path().join("bad");
    let out = selflabel(&[
        "train", "--config", cfg.to_str().unwrap(), "--batch-size", "0", "--output-dim", "1", "--metrics", "tsne",
        "--out-dir", run_dir.to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    for needle in ["batch_size", "output_dim", "tsne"] {
        assert!(err.contains(needle), "{err}");
    }
    assert!(!run_dir.exists());
}

#[test]
fn gen_data_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let a = gen_blobs(dir.path(), 5);
    let first = read(&a);
    let b = gen_blobs(dir.path(), 5);
    assert_eq!(first, read(&b));
    let ds = load_csv(&a, true, 0).unwrap();
    assert_eq!((ds.len(), ds.dim()), (120, 5));
    let moons = dir.path().join("moons.csv");
    assert_success(&selflabel(&["gen-data", "--kind", "moons", "--n", "50", "--out", moons.to_str().unwrap()]));
    assert_eq!(load_csv(&moons, true, 0).unwrap().dim(), 2);
}

#[test]
fn train_writes_manifest_and_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_blobs(dir.path(), 4);
    let cfg = write_tiny_config(dir.path(), &data);
    let run = dir.path().join("run");
    let out = selflabel(&["train", "--config", cfg.to_str().unwrap(), "--seed", "7", "--out-dir", run.to_str().unwrap()]);
    assert_success(&out);
    let manifest: RunManifest = serde_json::from_slice(&read(&run.join("manifest.json"))).unwrap();
    assert_eq!(manifest.seed, 7);
    assert_eq!(manifest.config.train.seed, 7);
    assert_eq!(manifest.inputs[0].rows, 120);
    assert_eq!(manifest.inputs[0].sha256, selflabel::cli::file_sha256(&data).unwrap());
    for key in ["telemetry", "embedding", "metrics_json", "metrics_csv", "checkpoint_final"] {
        assert!(manifest.outputs[key].exists(), "{key}");
    }
    let telemetry = String::from_utf8(read(&run.join("telemetry.ndjson"))).unwrap();
    // 120 rows / 32 per batch → 3 steps per epoch, 3 epochs
    assert_eq!(telemetry.lines().count(), 9);
    let rec: serde_json::Value = serde_json::from_str(telemetry.lines().next().unwrap()).unwrap();
    for field in ["step", "epoch", "loss", "lambda", "h_q", "lr"] {
        assert!(rec.get(field).is_some(), "{field}");
    }
    let z = load_csv(&run.join("embedding.csv"), false, 0).unwrap();
    assert_eq!((z.len(), z.dim()), (120, 3));
}

#[test]
fn eval_honours_subset_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_blobs(dir.path(), 4);
    let cfg = write_tiny_config(dir.path(), &data);
    let run = dir.path().join("run");
    assert_success(&selflabel(&["train", "--config", cfg.to_str().unwrap(), "--out-dir", run.to_str().unwrap(), "--eval", "false"]));
    assert!(!run.join("metrics.json").exists());
    let ckpt = run.join("checkpoints/final.ckpt");
    let eval = |sub: &str, metrics: &str| {
        let out_dir = dir.path().join(sub);
        assert_success(&selflabel(&[
            "eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap(), "--metrics", metrics,
            "--probe-epochs", "5", "--out-dir", out_dir.to_str().unwrap(),
        ]));
        (read(&out_dir.join("metrics.json")), read(&out_dir.join("metrics.csv")))
    };
    let (json, csv) = eval("e1", "knn,kmeans");
    let v: serde_json::Value = serde_json::from_slice(&json).unwrap();
    assert!(v.get("knn21").is_some() && v.get("nmi").is_some());
    assert!(v.get("linear_acc").is_none() && v.get("rss").is_none());
    assert!(String::from_utf8(csv.clone()).unwrap().starts_with("knn21,kmeans_acc,nmi,ari,seed,config_fingerprint\n"));
    assert_eq!(eval("e2", "knn,kmeans"), (json, csv));
}

#[test]
fn eval_names_expected_dimension_on_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_blobs(dir.path(), 4);
    let other = gen_blobs(dir.path(), 6);
    let cfg = write_tiny_config(dir.path(), &data);
    let run = dir.path().join("run");
    assert_success(&selflabel(&["train", "--config", cfg.to_str().unwrap(), "--out-dir", run.to_str().unwrap(), "--eval", "false"]));
    let out = selflabel(&[
        "eval", "--checkpoint", run.join("checkpoints/final.ckpt").to_str().unwrap(), "--data", other.to_str().unwrap(),
        "--out-dir", dir.path().join("e").to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("expects d = 4"));
}

#[test]
fn eval_accepts_external_embedding() {
    let dir = tempfile::tempdir().unwrap();
    let data = gen_blobs(dir.path(), 2);
    let ds = load_csv(&data, true, 0).unwrap();
    let emb = dir.path().join("proj.csv");
    selflabel::cli::write_matrix_csv(&ds.x, &emb).unwrap();
    let out_dir = dir.path().join("e");
    assert_success(&selflabel(&[
        "eval", "--embedding", emb.to_str().unwrap(), "--data", data.to_str().unwrap(), "--metrics", "knn",
        "--out-dir", out_dir.to_str().unwrap(),
    ]));
    assert!(out_dir.join("metrics.csv").exists());
}

#[test]
fn sinkhorn_demo_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = selflabel(&[
        "sinkhorn-demo", "--m", "4", "--k", "5", "--lambdas", "0.5,1,1.5,2", "--out-dir", dir.path().to_str().unwrap(),
    ]);
    assert_success(&out);
    let plans = String::from_utf8(read(&dir.path().join("plans.csv"))).unwrap();
    assert_eq!(plans.lines().count(), 5);
    assert!(plans.lines().all(|l| l.split(',').count() == 1 + 5 * 5));
    let table = String::from_utf8(read(&dir.path().join("entropy.csv"))).unwrap();
    let h: Vec<f64> = table.lines().skip(1).map(|l| l.rsplit(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(h.len(), 4);
    assert!(h.windows(2).all(|w| w[1] >= w[0]));
    assert!(!selflabel(&["sinkhorn-demo", "--m", "0", "--out-dir", dir.path().to_str().unwrap()]).status.success());
}
