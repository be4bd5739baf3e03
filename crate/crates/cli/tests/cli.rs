use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn gnet(dir: &Path, args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_gnet"));
    cmd.current_dir(dir).args(args);
    for (k, _) in std::env::vars().filter(|(k, _)| k.starts_with("GNET__")) {
        cmd.env_remove(k);
    }
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("spawn gnet")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: &Output) {
    assert_eq!(o.status.code(), Some(0), "stderr:\n{}", stderr(o));
}

const SMALL: &str = r#"
seed = 5

[data]
train_archive = "data/train.h5"
test_archive = "data/test.h5"
container = "data/dataset.h5"
validation_fraction = 0.2

[synth]
train_frames = 96
test_frames = 48

[synth.storm]
n_cells = 12
cell_sigma_range = [10.0, 30.0]

[generator]
width_scale = 0.25

[discriminator]
width_scale = 0.25

[train]
max_epochs = 2
batch_size = 8
max_iterations = 12

[evaluate]
runs = 2
thresholds = [0.5, 1.0]

[predict]
runs = 2
samples = [0, 3]

[uncertainty]
k = 2
map_samples = [1]

[gradcam]
sites = ["enc_map/d1/cbam", "dec/d0/dsc"]
"#;

#[test]
fn unknown_flag_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = gnet(dir.path(), &["evaluate", "--bogus"], &[]);
    assert_eq!(o.status.code(), Some(2));
    let o = gnet(dir.path(), &["train", "transformer"], &[]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn evaluate_without_checkpoint_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let o = gnet(dir.path(), &["evaluate"], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("checkpoint"), "{}", stderr(&o));
}

#[test]
fn config_errors_exit_2_with_key() {
    let dir = tempfile::tempdir().unwrap();
    let o = gnet(dir.path(), &["synth"], &[("GNET__TRAIN__BATCH_SIZ", "3")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("batch_siz"), "{}", stderr(&o));

    std::fs::write(dir.path().join("c.toml"), "[train]\nbatch_size = 0\n").unwrap();
    std::fs::write(dir.path().join("x.h5"), b"not hdf5").unwrap();
    let o = gnet(dir.path(), &["-c", "c.toml", "train", "gnet"], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("batch_size"), "{}", stderr(&o));

    let o = gnet(dir.path(), &["--set", "synth.train_frames=0", "synth"], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("synth.train_frames"), "{}", stderr(&o));
}

#[test]
fn runtime_failures_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("x.h5"), b"not hdf5").unwrap();
    let o = gnet(dir.path(), &["--set", "data.container=\"x.h5\"", "evaluate", "--persistence"], &[]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

fn read(p: PathBuf) -> String {
    std::fs::read_to_string(&p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn synth_prepare_train_and_analyse() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    std::fs::write(d.join("small.toml"), SMALL).unwrap();
    let with_cfg = |args: &[&str]| -> Output {
        let mut a = vec!["-c", "small.toml"];
        a.extend_from_slice(args);
        gnet(d, &a, &[])
    };

    ok(&with_cfg(&["synth"]));
    assert!(d.join("data/train.h5").exists() && d.join("data/test.h5").exists());
    ok(&with_cfg(&["prepare-data"]));
    let prep: serde_json::Value = serde_json::from_str(&read(d.join("data/prepare_report.json"))).unwrap();
    assert!(prep["train"]["selected"].as_u64().unwrap() > 10, "{prep}");
    assert!(prep["test"]["selected"].as_u64().unwrap() > 0, "{prep}");

    ok(&with_cfg(&["--run-dir", "runs/gan", "train", "gan"]));
    let run = d.join("runs/gan");
    for f in ["g_best.safetensors", "g_best.json", "d_best.safetensors", "train_log.csv", "outcome.json"] {
        assert!(run.join(f).exists(), "missing {f}");
    }
    // the resolved config is complete enough to be fed back in
    let resolved = read(run.join("train-gan.config.toml"));
    assert!(resolved.contains("dual_encoder = true"));
    let prov: serde_json::Value = serde_json::from_str(&read(run.join("train-gan.provenance.json"))).unwrap();
    assert_eq!(prov["code_version"], gnet_core::code_version());
    assert_eq!(prov["model"], "GA-SmaAt-GNet");
    let o = gnet(d, &["-c", "runs/gan/train-gan.config.toml", "--run-dir", "runs/replay", "evaluate", "--persistence"], &[]);
    ok(&o);

    let ckpt = "runs/gan/g_best.safetensors";
    ok(&with_cfg(&["--run-dir", "runs/eval_a", "evaluate", "--checkpoint", ckpt]));
    ok(&with_cfg(&["--run-dir", "runs/eval_b", "evaluate", "--checkpoint", ckpt]));
    let a = read(d.join("runs/eval_a/metrics.json"));
    assert_eq!(a, read(d.join("runs/eval_b/metrics.json")));
    let metrics: serde_json::Value = serde_json::from_str(&a).unwrap();
    assert_eq!(metrics["model"], "GA-SmaAt-GNet");
    assert_eq!(metrics["runs"], 2);
    assert!(d.join("runs/eval_a/evaluate.config.toml").exists());
    assert!(d.join("runs/eval_a/mse_per_leadtime.csv").exists());
    ok(&with_cfg(&["--run-dir", "runs/persistence", "evaluate", "--persistence"]));

    ok(&with_cfg(&["--run-dir", "runs/pred", "predict", "--checkpoint", ckpt]));
    let pred = gnet_core::data::read_array(d.join("runs/pred/predictions.h5"), "prediction").unwrap();
    assert_eq!(pred.dim(), (2, 12, 64, 64));
    assert!(d.join("runs/pred/predictions.png").exists());

    ok(&with_cfg(&["--run-dir", "runs/unc", "uncertainty", "epistemic", "--checkpoint", ckpt]));
    for f in ["epistemic_leadtime.json", "epistemic_season.csv", "epistemic_maps.h5", "epistemic_maps.png"] {
        assert!(d.join("runs/unc").join(f).exists(), "missing {f}");
    }
    let var = gnet_core::data::read_array(d.join("runs/unc/epistemic_maps.h5"), "variance").unwrap();
    assert!(var.iter().all(|&v| v >= 0.0));
    let o = with_cfg(&["--run-dir", "runs/alea", "uncertainty", "aleatoric", "--checkpoint", ckpt]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));

    ok(&with_cfg(&["--run-dir", "runs/cam", "gradcam", "--checkpoint", ckpt]));
    let cams: serde_json::Value = serde_json::from_str(&read(d.join("runs/cam/gradcam.json"))).unwrap();
    assert_eq!(cams.as_array().unwrap().len(), 2);
    let o = with_cfg(&["--run-dir", "runs/cam2", "gradcam", "--checkpoint", ckpt, "--site", "enc_map/d7/dsc"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("gradcam.sites"));

    ok(&with_cfg(&[
        "--run-dir",
        "runs/report",
        "report",
        "runs/eval_a",
        "runs/persistence",
        "runs/unc",
    ]));
    let rep = d.join("runs/report");
    let table = read(rep.join("skill_table.csv"));
    assert_eq!(table.lines().count(), 1 + 2 * 2, "{table}");
    assert!(table.contains("GA-SmaAt-GNet") && table.contains("Persistence"));
    for f in ["mse_per_leadtime.png", "epistemic_per_leadtime.png", "epistemic_per_season.png", "report.json"] {
        assert!(rep.join(f).exists(), "missing {f}");
    }
}

#[test]
fn report_needs_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = gnet(dir.path(), &["report"], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("report.inputs"));
}
