use std::path::Path;
use std::process::{Command, Output};

use magnet::datagen::Dataset;
use magnet::eval::MetricReport;
use magnet::experts::ExpertRegistry;

fn magnet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_magnet")).args(args).env("MAGNET_LOG", "warn").output().unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = magnet(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &str = r#"{"users": 4, "females": 2, "reps": 2}"#;
const QUICK: &str = r#"{"split": {"test_per_cell": 4, "val_per_cell": 2}, "train": {"max_epochs": 2, "patience": 2}}"#;

#[test]
fn datagen_preset_writes_the_full_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d.jsonl");
    ok(&["datagen", "--preset", "mts2d", "--seed", "7", "--out", s(&out)]);
    let ds = Dataset::load(&out).unwrap();
    assert_eq!(ds.trials.len(), 3840);
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 3841, "header line plus one line per trial");
}

#[test]
fn datagen_is_deterministic_and_honours_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("small.json");
    std::fs::write(&cfg, SMALL).unwrap();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    ok(&["datagen", "--seed", "3", "--config", s(&cfg), "--out", s(&a)]);
    ok(&["datagen", "--seed", "3", "--config", s(&cfg), "--out", s(&b)]);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(Dataset::load(&a).unwrap().trials.len(), 4 * 2 * 16 * 2);
}

#[test]
fn unknown_flag_prints_usage_and_exits_2() {
    let out = magnet(&["datagen", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(magnet(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn invalid_config_names_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"userz": 4}"#).unwrap();
    let out = magnet(&["datagen", "--config", s(&cfg), "--out", s(&dir.path().join("x.jsonl"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("userz"));
    std::fs::write(&cfg, r#"{"train": {"lr": -1.0}}"#).unwrap();
    let reg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data/experts_2d.json");
    let data = dir.path().join("d.jsonl");
    std::fs::write(dir.path().join("small.json"), SMALL).unwrap();
    ok(&["datagen", "--config", s(&dir.path().join("small.json")), "--out", s(&data)]);
    let out = magnet(&["train", "--data", s(&data), "--experts", s(&reg), "--config", s(&cfg), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("lr"));
}

#[test]
fn serve_without_a_model_is_a_validation_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_magnet"))
        .arg("serve")
        .env_remove("MAGNET_CHECKPOINT")
        .env_remove("MAGNET_EXPERTS")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--checkpoint"));
}

#[test]
fn pipeline_from_data_to_merged_report() {
    let dir = tempfile::tempdir().unwrap();
    let p = |n: &str| dir.path().join(n);
    std::fs::write(p("small.json"), SMALL).unwrap();
    std::fs::write(p("quick.json"), QUICK).unwrap();
    ok(&["datagen", "--seed", "1", "--config", s(&p("small.json")), "--out", s(&p("d.jsonl"))]);
    ok(&["fit-experts", "--ids", "s-f,s-h", "--out", s(&p("experts.json"))]);
    let reg = ExpertRegistry::load(p("experts.json")).unwrap();
    assert_eq!(reg.ids(), vec!["s-f", "s-h"]);

    let common = |cmd: &'static str, out: &str| {
        vec![cmd.to_string(), "--data".into(), s(&p("d.jsonl")).into(), "--experts".into(), s(&p("experts.json")).into(),
             "--config".into(), s(&p("quick.json")).into(), "--out".into(), s(&p(out)).into(), "--seeds".into(), "2".into()]
    };
    let args = |v: Vec<String>| v;
    let run = |v: Vec<String>| ok(&v.iter().map(String::as_str).collect::<Vec<_>>());

    let mut train = args(common("train", "train"));
    train.extend(["--shots".into(), "1".into()]);
    run(train);
    let tr = MetricReport::load_json(p("train/report.json")).unwrap();
    assert!(tr.rows.iter().all(|r| r.model == "MAGNeT" && r.shots == Some(1)));
    assert_eq!(tr.rows.len(), 2);
    let ckpts: Vec<_> = std::fs::read_dir(p("train/checkpoints")).unwrap().collect();
    assert_eq!(ckpts.len(), 2);

    let mut base = args(common("eval", "base"));
    base.extend(["--baselines".into(), "only".into()]);
    run(base);
    let br = MetricReport::load_json(p("base/report.json")).unwrap();
    let models: std::collections::BTreeSet<&str> = br.rows.iter().map(|r| r.model.as_str()).collect();
    assert_eq!(models.into_iter().collect::<Vec<_>>(), vec!["Border", "Distance", "Expert"]);

    let ck = p("train/checkpoints/MAGNeT_1shot_seed0.ckpt");
    let mut ev = args(common("eval", "ck"));
    ev.extend(["--checkpoint".into(), s(&ck).into(), "--baselines".into(), "skip".into()]);
    run(ev);
    let cr = MetricReport::load_json(p("ck/report.json")).unwrap();
    assert!(cr.rows.iter().all(|r| r.model == "MAGNeT (MAGNeT_1shot_seed0)"));

    let mut ab = args(common("ablate", "ablate"));
    ab.extend(["--drop".into(), "all".into(), "--shots".into(), "1".into()]);
    run(ab);
    let ar = MetricReport::load_json(p("ablate/report.json")).unwrap();
    assert!(ar.rows.iter().any(|r| r.model == "MAGNeT w/o all"));

    let out = ok(&["report", "--in", s(&p("train")), s(&p("base")), "--out", s(&p("merged"))]);
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.contains("| Border |"));
    assert!(table.contains("MAGNeT"));
    let merged = MetricReport::load_json(p("merged/report.json")).unwrap();
    let magnet_row = merged.find("MAGNeT", Some(1)).unwrap();
    assert_eq!(magnet_row.seeds, 2);
    assert!(magnet_row.e_at_1.unwrap().std.is_some());

    // eval without a model is refused with a hint
    let out = magnet(&common("eval", "none").iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--baselines only"));
}

#[test]
fn single_expert_fit_from_a_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("calib.jsonl");
    ok(&["datagen", "--preset", "calib-w-h", "--seed", "2", "--out", s(&data)]);
    let out = dir.path().join("e.json");
    ok(&["fit-experts", "--data", s(&data), "--id", "mine", "--out", s(&out)]);
    let reg = ExpertRegistry::load(&out).unwrap();
    assert_eq!(reg.ids(), vec!["mine"]);
}

#[test]
fn shipped_registries_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("e.json");
    ok(&["fit-experts", "--ids", "s-f,s-h,w-h", "--out", s(&out)]);
    let shipped = Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/data/experts_2d.json");
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(shipped).unwrap());
}
