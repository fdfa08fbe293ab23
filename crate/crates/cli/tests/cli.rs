use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mcads_core::checkpoint;
use mcads_core::data::netpbm::{self, Raster};
use mcads_core::metrics::MetricReport;
use mcads_core::model::{summarize, Mcads, ModelConfig, Summary};
use mcads_core::run::RunConfig;
use mcads_core::ParamStore;

fn mcads(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mcads")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Small RGB network and synthetic data, cheap enough for a debug build.
fn tiny_config(dir: &Path) -> std::path::PathBuf {
    let mut model = ModelConfig::micro();
    model.encoder.input_channels = 3;
    let mut cfg = RunConfig { model, ..RunConfig::default() };
    cfg.data.synth = Some(mcads_core::run::SynthSpec { count: 2, hw: 32 });
    cfg.data.patch = 32;
    cfg.data.stride = 32;
    cfg.train.batch = 2;
    cfg.train.val_fraction = 0.0;
    let path = dir.join("config.json");
    fs::write(&path, cfg.to_json()).unwrap();
    path
}

fn write_mask(path: &Path, w: usize, h: usize, on: &[bool]) {
    let data = on.iter().map(|&b| if b { 255 } else { 0 }).collect();
    netpbm::write(path, &Raster { width: w, height: h, channels: 1, data }).unwrap();
}

#[test]
fn zero_epochs_saves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny_config(dir.path());
    let out = dir.path().join("run");
    let o = mcads(&[
        "train",
        "--config",
        cfg_path.to_str().unwrap(),
        "--seed",
        "5",
        "--set",
        "train.epochs=0",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let cfg = RunConfig::load(Some(&cfg_path), &[]).unwrap();
    let (_, reg) = Mcads::with_registry(&cfg.model).unwrap();
    let init = ParamStore::<f32>::materialize(reg, 5);
    let expected = checkpoint::encode(&init).unwrap();
    assert_eq!(fs::read(out.join("last.mct")).unwrap(), expected);
    assert_eq!(fs::read(out.join("best.mct")).unwrap(), expected);
    let log = fs::read_to_string(out.join("loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 1);
}

#[test]
fn same_seed_gives_identical_loss_logs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny_config(dir.path());
    let mut logs = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        let o = mcads(&[
            "train",
            "--config",
            cfg_path.to_str().unwrap(),
            "--set",
            "train.steps=3",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        logs.push(fs::read_to_string(out.join("loss.csv")).unwrap());
    }
    assert_eq!(logs[0].lines().count(), 4);
    assert!(logs[0].starts_with("step,loss_total,loss_b1,loss_d5,loss_d4,loss_d3,loss_d2,loss_d1\n"));
    assert_eq!(logs[0], logs[1]);
}

#[test]
fn predict_writes_a_binary_mask_per_image() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny_config(dir.path());
    let run = dir.path().join("run");
    let cfg = cfg_path.to_str().unwrap();
    assert!(mcads(&["train", "--config", cfg, "--set", "train.epochs=0", "--out", run.to_str().unwrap()])
        .status
        .success());

    let image = dir.path().join("scan.ppm");
    let data = (0..40 * 50 * 3).map(|i| (i * 7 % 256) as u8).collect();
    netpbm::write(&image, &Raster { width: 50, height: 40, channels: 3, data }).unwrap();
    let preds = dir.path().join("preds");
    let o = mcads(&[
        "predict",
        "--config",
        cfg,
        "--set",
        "eval.save_probability=true",
        "--checkpoint",
        run.join("last.mct").to_str().unwrap(),
        "--input",
        image.to_str().unwrap(),
        "--out",
        preds.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    // 40x50 pads to 64x64 on a 32/32 lattice: 2 x 2 patches.
    assert!(stdout(&o).contains("4 patches"), "{}", stdout(&o));
    let mask = netpbm::read(preds.join("scan.pgm")).unwrap();
    assert_eq!((mask.width, mask.height, mask.channels), (50, 40, 1));
    assert!(mask.data.iter().all(|&v| v == 0 || v == 255));
    assert!(fs::read(preds.join("scan.pgm")).unwrap().starts_with(b"P5\n50 40\n255\n"));
    assert!(preds.join("scan_prob.pgm").exists());
}

#[test]
fn predict_rejects_a_checkpoint_from_another_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = tiny_config(dir.path());
    let run = dir.path().join("run");
    let cfg = cfg_path.to_str().unwrap();
    assert!(mcads(&["train", "--config", cfg, "--set", "train.epochs=0", "--out", run.to_str().unwrap()])
        .status
        .success());
    let image = dir.path().join("scan.ppm");
    netpbm::write(&image, &Raster { width: 32, height: 32, channels: 3, data: vec![9; 32 * 32 * 3] }).unwrap();
    let o = mcads(&[
        "predict",
        "--config",
        cfg,
        "--set",
        "model.encoder.stage_filters=[4,2,2,2,2,2]",
        "--checkpoint",
        run.join("last.mct").to_str().unwrap(),
        "--input",
        image.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("encoder"));
}

#[test]
fn eval_reports_pixel_and_surface_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let pred = dir.path().join("pred");
    let gt = dir.path().join("gt");
    fs::create_dir_all(&pred).unwrap();
    fs::create_dir_all(gt.join("masks")).unwrap();

    write_mask(&pred.join("a.pgm"), 2, 2, &[true, true, false, false]);
    write_mask(&gt.join("masks/a.pgm"), 2, 2, &[true, false, true, false]);
    let report_path = dir.path().join("report.json");
    let o = mcads(&[
        "eval",
        "--pred",
        pred.to_str().unwrap(),
        "--gt",
        gt.to_str().unwrap(),
        "--out",
        report_path.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: MetricReport = serde_json::from_str(&stdout(&o)).unwrap();
    assert!((report.aggregate.iou - 1.0 / 3.0).abs() < 1e-12);
    assert!((report.aggregate.dice - 0.5).abs() < 1e-12);
    let saved: MetricReport = serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(saved, report);

    // Identical masks score perfectly; an empty prediction has no surface distances.
    write_mask(&pred.join("a.pgm"), 2, 2, &[true, false, true, false]);
    write_mask(&pred.join("b.pgm"), 3, 3, &[false; 9]);
    let mut b = [false; 9];
    b[4] = true;
    write_mask(&gt.join("masks/b.pgm"), 3, 3, &b);
    let o = mcads(&["eval", "--pred", pred.to_str().unwrap(), "--gt", gt.to_str().unwrap()]);
    assert!(o.status.success());
    let report: MetricReport = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(report.per_image.len(), 2);
    assert_eq!(report.per_image[0].iou, 1.0);
    assert_eq!(report.per_image[0].hd95, Some(0.0));
    assert_eq!(report.per_image[1].iou, 0.0);
    assert_eq!(report.skipped_surface, 1);
}

#[test]
fn eval_rejects_mismatched_ids() {
    let dir = tempfile::tempdir().unwrap();
    let (pred, gt) = (dir.path().join("pred"), dir.path().join("gt"));
    fs::create_dir_all(&pred).unwrap();
    fs::create_dir_all(&gt).unwrap();
    write_mask(&pred.join("a.pgm"), 2, 2, &[true; 4]);
    write_mask(&gt.join("b.pgm"), 2, 2, &[true; 4]);
    let o = mcads(&["eval", "--pred", pred.to_str().unwrap(), "--gt", gt.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_catches_an_injected_fault() {
    let o = mcads(&["gradcheck", "--inject-fault"]);
    assert_eq!(o.status.code(), Some(3), "{}", stdout(&o));
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn summary_matches_the_registry() {
    let o = mcads(&["summary", "--json", "--hw", "64"]);
    assert!(o.status.success());
    let s: Summary = serde_json::from_str(&stdout(&o)).unwrap();
    let cfg = RunConfig::default();
    let (_, reg) = Mcads::with_registry(&cfg.model).unwrap();
    assert_eq!(s.trainable, reg.trainable_count());
    assert_eq!(s, summarize(&cfg.model, (64, 64)).unwrap());

    let table = stdout(&mcads(&["summary", "--hw", "64"]));
    let total = table.lines().find(|l| l.starts_with("total")).unwrap();
    assert_eq!(total.split_whitespace().last().unwrap(), s.trainable.to_string());
}

#[test]
fn configuration_errors_exit_with_usage_status() {
    assert_eq!(mcads(&["summary", "--set", "train.no_such_key=1"]).status.code(), Some(1));
    assert_eq!(mcads(&["summary", "--set", "data.patch=48"]).status.code(), Some(1));
    assert_eq!(mcads(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(mcads(&["--help"]).status.code(), Some(0));
}
