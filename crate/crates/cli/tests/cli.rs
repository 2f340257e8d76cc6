use std::path::Path;
use std::process::{Command, Output};

fn retinagan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_retinagan"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = retinagan(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn end_to_end_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let (sim, real, paired) = (d.join("sim"), d.join("real"), d.join("paired"));
    ok(&["gen-data", "--out", s(&sim), "--num", "6", "--seed", "1", "--style", "sim"]);
    ok(&["gen-data", "--out", s(&real), "--num", "6", "--seed", "1", "--style", "real"]);
    ok(&["gen-data", "--out", s(&paired), "--num", "4", "--seed", "100", "--style", "paired"]);
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(paired.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.as_array().unwrap().len(), 8);

    let det = d.join("det.ckpt");
    let data = format!("{},{}", s(&sim), s(&real));
    ok(&["train-detector", "--data", &data, "--out", s(&det), "--steps", "2", "--batch-size", "2"]);

    let json = d.join("dets.json");
    let image = sim.join("images").join("1_sim.png");
    ok(&["detect", "--ckpt", s(&det), "--image", s(&image), "--out", s(&json)]);
    let dets: serde_json::Value = serde_json::from_slice(&std::fs::read(&json).unwrap()).unwrap();
    for key in ["boxes", "scores", "classes"] {
        assert!(dets[key].is_array(), "missing {key}");
    }

    let run = d.join("run");
    let gan = [
        "--sim", s(&sim), "--real", s(&real), "--detector", s(&det), "--steps", "2", "--batch-size", "2",
    ];
    let mut args = vec!["train-gan", "--out", s(&run), "--seed", "3"];
    args.extend(gan);
    ok(&args);
    let log = std::fs::read_to_string(run.join("losses.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    assert!(log.contains("\"total_G\""));
    let ckpt = run.join("generator.ckpt");
    assert!(ckpt.exists());

    let ens = d.join("ens");
    let mut args = vec!["ensemble", "--n", "2", "--out", s(&ens)];
    args.extend(gan);
    ok(&args);
    let m1 = ens.join("member_1").join("generator.ckpt");
    assert!(m1.exists());

    let translated = d.join("translated");
    let ckpts = format!("{},{}", s(&ckpt), s(&m1));
    ok(&["translate", "--ckpt", &ckpts, "--data", s(&paired), "--out", s(&translated)]);
    let records: serde_json::Value =
        serde_json::from_slice(&std::fs::read(translated.join("manifest.json")).unwrap()).unwrap();
    let records = records.as_array().unwrap();
    assert_eq!(records.len(), 8, "4 sim images times 2 members");
    assert!(records.iter().all(|r| r["domain"] == "real" && r["provenance"].is_string()));

    let report = d.join("report");
    let out = retinagan(&[
        "eval", "--detector", s(&det), "--ckpt", s(&ckpt), "--data", s(&paired), "--paired", s(&paired), "--out",
        s(&report), "--seed", "0",
    ]);
    let code = out.status.code().unwrap();
    assert!(code == 0 || code == 2, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(report.join("summary.csv")).unwrap();
    assert!(csv.starts_with("metric,value\n"));
    assert!(report.join("report.json").exists());
    assert_eq!(std::fs::read_dir(report.join("overlays")).unwrap().count(), 4);
}

#[test]
fn bad_inputs_fail_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let out = retinagan(&["gen-data", "--out", s(d), "--num", "1", "--style", "cartoon"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown style"));

    let cfg = d.join("bad.cfg");
    std::fs::write(&cfg, "steps = 1\nlearning_rate = 3\n").unwrap();
    let sim = d.join("sim");
    ok(&["gen-data", "--out", s(&sim), "--num", "2", "--style", "sim"]);
    let out = retinagan(&[
        "train-gan", "--sim", s(&sim), "--real", s(&sim), "--out", s(&d.join("run")), "--config", s(&cfg),
    ]);
    assert!(!out.status.success());

    let missing = retinagan(&["detect", "--ckpt", s(&d.join("none.ckpt")), "--image", s(&cfg)]);
    assert!(!missing.status.success());
}
