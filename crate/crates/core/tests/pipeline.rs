//! Short end-to-end runs through the public API.

use std::fs;

use weathercl::checkpoint;
use weathercl::config::{DataSource, RunConfig, TaskSpec};
use weathercl::imaging::{synthetic_dataset, Split, TaskKind};
use weathercl::report::TaskReport;
use weathercl::trainer::{latest_boundary, run_sequence, RunOptions};

fn tiny(preset: &str, extra: &[&str]) -> RunConfig {
    let mut overrides: Vec<String> = [
        "training.steps_per_task=3",
        "training.log_every=1",
        "training.patch_size=12",
        "projector.budget.epochs=1",
        "tasks.0.train.count=6",
        "tasks.0.test.count=2",
        "tasks.1.train.count=6",
        "tasks.1.test.count=2",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    overrides.extend(extra.iter().map(|s| s.to_string()));
    let mut cfg = RunConfig::preset(preset, &overrides).unwrap();
    cfg.replay.capacity = cfg.replay.capacity.min(4);
    cfg
}

fn with_snow(mut cfg: RunConfig) -> RunConfig {
    cfg.tasks.push(TaskSpec {
        kind: TaskKind::Snow,
        train: DataSource::Synthetic { count: 6, size: 16, seed: 31 },
        test: DataSource::Synthetic { count: 2, size: 16, seed: 32 },
    });
    cfg
}

#[test]
fn one_task_sequence_has_one_row() {
    let mut cfg = tiny("full_method", &[]);
    cfg.tasks.truncate(1);
    let r = run_sequence(&cfg, &RunOptions::default()).unwrap();
    assert_eq!(r.rows.len(), 1);
    assert_eq!((r.rows[0].trained_through, r.rows[0].task), (1, 1));
}

#[test]
fn three_task_sequence_has_six_rows_with_forgetting() {
    let cfg = with_snow(tiny("full_method", &[]));
    let r = run_sequence(&cfg, &RunOptions::default()).unwrap();
    assert_eq!(r.rows.len(), 6);
    assert_eq!(r.averages.len(), 3);
    let kinds: Vec<&str> = r.final_rows().iter().map(|x| x.kind.as_str()).collect();
    assert_eq!(kinds, ["haze", "rain", "snow"]);
    let t1 = r.row(1, 1).unwrap().psnr_db;
    let later = r.row(3, 1).unwrap();
    assert!((later.forgetting_psnr_db - (t1 - later.psnr_db)).abs() < 1e-12);
}

#[test]
fn identical_configs_give_identical_checkpoints_and_reports() {
    let cfg = tiny("full_method", &[]);
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for d in &dirs {
        run_sequence(&cfg, &RunOptions { out_dir: Some(d.path().into()), ..Default::default() }).unwrap();
    }
    for f in [
        "report.csv",
        "report.json",
        "runlog.csv",
        "checkpoints/task_2.backbone.ckpt",
        "checkpoints/task_2.projector.ckpt",
        "checkpoints/task_2.buffer/buffer.json",
    ] {
        let a = fs::read(dirs[0].path().join(f)).unwrap();
        assert_eq!(a, fs::read(dirs[1].path().join(f)).unwrap(), "{f}");
    }
    assert_eq!(latest_boundary(dirs[0].path()), Some(2));
    let m = checkpoint::load_backbone(&dirs[0].path().join("checkpoints/task_2.backbone.ckpt")).unwrap();
    assert_eq!(m.version_tag(), 2);

    let other = tiny("full_method", &["seeds.init=9"]);
    let d = tempfile::tempdir().unwrap();
    run_sequence(&other, &RunOptions { out_dir: Some(d.path().into()), ..Default::default() }).unwrap();
    assert_ne!(
        fs::read(d.path().join("checkpoints/task_2.backbone.ckpt")).unwrap(),
        fs::read(dirs[0].path().join("checkpoints/task_2.backbone.ckpt")).unwrap()
    );
}

#[test]
fn overrides_are_recorded_in_artifacts() {
    let cfg = tiny("full_method", &["loss.lambda=0.8"]);
    let d = tempfile::tempdir().unwrap();
    run_sequence(&cfg, &RunOptions { out_dir: Some(d.path().into()), ..Default::default() }).unwrap();
    let report = TaskReport::from_json(&fs::read_to_string(d.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report.config.loss.lambda, 0.8);
    let saved = RunConfig::from_file(&d.path().join("config.json"), &[]).unwrap();
    assert_eq!(saved, cfg);
    let runlog = fs::read_to_string(d.path().join("runlog.csv")).unwrap();
    assert_eq!(runlog.lines().count(), 1 + 2 * 3);
}

#[test]
fn resume_rejects_a_different_config() {
    let cfg = tiny("full_method", &[]);
    let d = tempfile::tempdir().unwrap();
    let opts = RunOptions { out_dir: Some(d.path().into()), stop_after: Some(1), ..Default::default() };
    run_sequence(&cfg, &opts).unwrap();
    let changed = tiny("full_method", &["loss.alpha=0.5"]);
    let resume = RunOptions { out_dir: Some(d.path().into()), resume: true, ..Default::default() };
    assert_eq!(run_sequence(&changed, &resume).unwrap_err().code(), "config");
    assert_eq!(run_sequence(&cfg, &resume).unwrap().rows.len(), 3);
}

#[test]
fn joint_and_individual_modes() {
    let joint = run_sequence(&tiny("joint", &[]), &RunOptions::default()).unwrap();
    assert_eq!(joint.rows.len(), 2);
    assert!(joint.rows.iter().all(|r| r.trained_through == 2));

    let pooled = run_sequence(&tiny("joint_m", &[]), &RunOptions::default()).unwrap();
    assert_eq!(pooled.rows.len(), 3);

    let ind = run_sequence(&tiny("individual", &[]), &RunOptions::default()).unwrap();
    let pairs: Vec<(usize, usize)> = ind.rows.iter().map(|r| (r.trained_through, r.task)).collect();
    assert_eq!(pairs, [(1, 1), (2, 2)]);
}

#[test]
fn datasets_on_disk_train_like_synthetic_ones() {
    let d = tempfile::tempdir().unwrap();
    let mut cfg = tiny("finetune", &[]);
    let synthetic = run_sequence(&cfg, &RunOptions::default()).unwrap();
    for (i, task) in cfg.tasks.iter_mut().enumerate() {
        for (split, source, name) in [(Split::Train, &mut task.train, "train"), (Split::Test, &mut task.test, "test")] {
            let DataSource::Synthetic { count, size, seed } = *source else { unreachable!() };
            let path = d.path().join(format!("t{i}_{name}"));
            synthetic_dataset(&task.kind, count, size, split, seed).unwrap().save(&path).unwrap();
            *source = DataSource::Dir { path };
        }
    }
    let from_disk = run_sequence(&cfg, &RunOptions::default()).unwrap();
    assert_eq!(synthetic.rows, from_disk.rows);
}
