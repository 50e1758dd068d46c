use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
train_clips = 3
eval_clips = 2
heatmap.iconic_size = 8
heatmap.iconic_per_class = 4
heatmap.epochs = 3
scene.height = 16
scene.width = 16
scene.clip_length = 6
scene.object_size_min = 4
scene.object_size_max = 8
net.widths = 4,8
net.fusion_width = 8
net.flow_frames = 2
train.max_iterations = 4
train.base_lr = 0.01
crf.iterations = 2
";

fn tagseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tagseg")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_one() {
    let out = tagseg(&["train", "--data", "x", "--heatmaps", "y", "--out", "z"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("--config"), "{err}");
    assert!(err.to_lowercase().contains("usage"), "{err}");
    assert_eq!(tagseg(&["segment"]).status.code(), Some(1));
    assert_eq!(tagseg(&["--help"]).status.code(), Some(0));
}

#[test]
fn data_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = tagseg(&["eval", "--pred", p(&dir.path().join("none")), "--gt", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "train.unknown_knob = 3\n").unwrap();
    let out = tagseg(&["gen", "--config", p(&cfg), "--out", p(&dir.path().join("d"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown_knob"));
}

#[test]
fn full_pipeline_and_self_evaluation() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let cfg = root.join("tiny.cfg");
    fs::write(&cfg, TINY).unwrap();
    let (data, cache, run, pred) = (root.join("data"), root.join("hm"), root.join("run"), root.join("pred"));

    let ok = |args: &[&str]| {
        let out = tagseg(args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    ok(&["gen", "--config", p(&cfg), "--seed", "3", "--out", p(&data)]);
    assert!(data.join("train/clip_0/flow_4.flo").exists());
    assert!(data.join("eval/clip_4/frame_5.ppm").exists());
    ok(&["heatmaps", "--config", p(&cfg), "--seed", "3", "--data", p(&data), "--out", p(&cache)]);
    ok(&["train", "--config", p(&cfg), "--seed", "3", "--data", p(&data), "--heatmaps", p(&cache), "--out", p(&run)]);
    let losses = fs::read_to_string(run.join("loss.csv")).unwrap();
    assert_eq!(losses.lines().count(), 5);
    ok(&["infer", "--checkpoint", p(&run), "--data", p(&data), "--out", p(&pred), "--config", p(&cfg), "--use-crf"]);
    assert!(pred.join("clip_3/gt_3.pgm").exists());

    let csv = ok(&["eval", "--pred", p(&pred), "--gt", p(&data.join("eval")), "--config", p(&cfg)]);
    assert!(csv.starts_with("class,iou,acc\n"));
    assert!(csv.contains("\nglobal_acc,"));

    // Ground truth against itself scores perfectly on every defined entry.
    let out_csv = root.join("self.csv");
    let csv = ok(&["eval", "--pred", p(&data.join("eval")), "--gt", p(&data.join("eval")), "--out", p(&out_csv)]);
    assert_eq!(fs::read_to_string(&out_csv).unwrap(), csv);
    for line in csv.lines().skip(1) {
        for v in line.split(',').skip(1).filter(|v| *v != "nan") {
            assert_eq!(v.parse::<f64>().unwrap(), 1.0, "{line}");
        }
    }
}
