use std::path::Path;
use std::process::{Command, Output};

use dive_core::pipeline::RunConfig;

fn dive(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dive"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(["--threads", "1"])
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let mut cfg = RunConfig::default();
    cfg.task.sizes.distill = 3;
    cfg.task.sizes.pool = 6;
    cfg.task.sizes.val = 2;
    cfg.task.sizes.test = 2;
    cfg.backbone.d_model = 8;
    cfg.backbone.n_layers = 1;
    cfg.backbone.n_heads = 2;
    cfg.backbone.d_ff = 16;
    cfg.pretrain.steps = 2;
    cfg.pretrain.batch_size = 1;
    cfg.steering.rank = 2;
    cfg.distill.k = 4;
    cfg.distill.shots = 1;
    cfg.distill.epochs = 1;
    cfg.eval.max_new_tokens = 8;
    cfg.eval.seeds = vec![0];
    cfg.eval.configs = vec!["zero_shot".into(), "eos_w5".into()];
    let p = dir.join("run.toml");
    std::fs::write(&p, cfg.to_toml()).unwrap();
    p
}

#[test]
fn full_pipeline_and_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config(dir.path());
    let out = dir.path().join("run");
    for stage in ["gen-data", "pretrain", "cache-teacher", "distill", "generate", "evaluate", "ablate"] {
        let o = dive(&[stage], &config, &out);
        assert!(o.status.success(), "{stage}: {}", String::from_utf8_lossy(&o.stderr));
    }
    for sub in ["data", "backbone", "cache", "adapters", "generations", "eval", "ablation"] {
        assert!(out.join(sub).join("manifest.json").is_file(), "{sub}");
    }
    let csv = std::fs::read_to_string(out.join("ablation").join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);

    let o = dive(&["gen-data"], &config, &out);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("--overwrite"));
    let o = dive(&["gen-data", "--overwrite"], &config, &out);
    assert!(o.status.success());

    // a different seed regenerates different data, so the old backbone's
    // downstream cache no longer matches its inputs
    let o = dive(&["gen-data", "--overwrite", "--seed", "9"], &config, &out);
    assert!(o.status.success());
    let o = dive(&["distill", "--overwrite"], &config, &out);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn bad_config_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    std::fs::write(&config, "[distill]\nlearning_rate = 1\n").unwrap();
    let o = dive(&["gen-data"], &config, &dir.path().join("run"));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("distill"));
    let o = dive(&["gen-data"], &dir.path().join("missing.toml"), &dir.path().join("run"));
    assert_eq!(o.status.code(), Some(2));
}
