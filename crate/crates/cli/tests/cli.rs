use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use qi2::config::RunConfig;

fn tiny_cfg() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/tiny.cfg")
}

fn qi2(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qi2")).args(args).env_remove("QI2_THREADS").output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = qi2(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gradcheck_passes_on_tiny_config() {
    let out = ok(&["gradcheck", "--config", s(&tiny_cfg())]);
    let rows: Vec<(&str, f64)> = out.lines().map(|l| l.split_once('\t').unwrap()).map(|(n, e)| (n, e.parse().unwrap())).collect();
    assert!(rows.len() > 20);
    assert!(rows.iter().any(|(n, _)| *n == "mmdit_loss"));
    assert!(rows.iter().all(|(_, e)| *e < 1e-4));
}

#[test]
fn train_and_sample_twice_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg();
    let (vae, dit) = (dir.path().join("vae"), dir.path().join("dit"));
    ok(&["train-vae", "--config", s(&cfg), "--out", s(&vae)]);
    ok(&["train-dit", "--config", s(&cfg), "--out", s(&dit), "--vae", s(&vae.join("vae.ckpt"))]);
    let mut runs = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("s{k}"));
        ok(&["sample", "--config", s(&cfg), "--model", s(&dit), "--out", s(&out), "--steps", "40", "--cfg", "3", "--seed", "7"]);
        runs.push(std::fs::read(out.join("sample_000.png")).unwrap());
    }
    assert_eq!(runs[0], runs[1]);

    let resolved = RunConfig::load(&dir.path().join("s0/resolved.cfg")).unwrap();
    let mut expect = RunConfig::load(&cfg).unwrap();
    expect.sample_steps = 40;
    expect.sample_cfg = 3.0;
    assert_eq!(resolved, expect);

    let rl = dir.path().join("rl");
    ok(&["rlhf", "--config", s(&cfg), "--model", s(&dit), "--out", s(&rl)]);
    let log = std::fs::read_to_string(rl.join("rlhf_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 2);
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["objective_uncond_forwards"], 0);
        assert!(v["rollout_uncond_forwards"].as_u64().unwrap() > 0);
    }
    ok(&["sample", "--config", s(&cfg), "--model", s(&rl), "--out", s(&dir.path().join("s_rl")), "--nfe", "4"]);
}

#[test]
fn pipeline_stage1_matches_golden_report() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg();
    let corpus = dir.path().join("corpus");
    ok(&["gen-data", "--config", s(&cfg), "--kind", "pipeline", "--out", s(&corpus)]);
    let report = dir.path().join("out/report.json");
    ok(&["pipeline", "run", "--config", s(&cfg), "--stage", "1", "--in", s(&corpus.join("manifest.jsonl")), "--out", s(&dir.path().join("out/kept.jsonl")), "--report", s(&report)]);
    let golden = include_str!("../../core/data/stage1_report.golden.json");
    assert_eq!(std::fs::read_to_string(report).unwrap(), golden);
    assert!(dir.path().join("out/resolved.cfg").exists());
}

#[test]
fn promptforge_build_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg();
    let (a, b) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    ok(&["promptforge", "build", "--config", s(&cfg), "--seed", "3", "--out", s(&a)]);
    ok(&["promptforge", "build", "--config", s(&cfg), "--seed", "3", "--out", s(&b)]);
    let text = std::fs::read_to_string(&a).unwrap();
    assert_eq!(text, std::fs::read_to_string(&b).unwrap());
    for line in text.lines() {
        let t: qi2::promptforge::Triplet = serde_json::from_str(line).unwrap();
        qi2::promptforge::verify_triplet(&t).unwrap();
    }

    let input = dir.path().join("fine.txt");
    std::fs::write(&input, "a red fox in the snow, soft morning light, watercolor style\n\nan old \"OPEN\" sign on a wooden door\n").unwrap();
    let c = dir.path().join("c.jsonl");
    ok(&["promptforge", "build", "--config", s(&cfg), "--in", s(&input), "--out", s(&c)]);
    assert_eq!(std::fs::read_to_string(c).unwrap().lines().count(), 2);
}

fn write_ppm(path: &Path, pixels: &[u8], w: usize, h: usize) {
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    bytes.extend_from_slice(pixels);
    std::fs::write(path, bytes).unwrap();
}

#[test]
fn eval_prints_single_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg();
    let (a, b) = (dir.path().join("a.ppm"), dir.path().join("b.ppm"));
    let px: Vec<u8> = (0..16 * 16 * 3).map(|i| (i * 7 % 200) as u8).collect();
    write_ppm(&a, &px, 16, 16);
    write_ppm(&b, &px.iter().map(|v| v + 1).collect::<Vec<_>>(), 16, 16);
    let psnr: f64 = ok(&["eval", "psnr", "--config", s(&cfg), s(&a), s(&b)]).trim().parse().unwrap();
    assert!((psnr - 48.1308).abs() < 1e-4, "{psnr}");
    let ssim: f64 = ok(&["eval", "ssim", "--config", s(&cfg), s(&a), s(&a)]).trim().parse().unwrap();
    assert_eq!(ssim, 1.0);

    let dump = dir.path().join("d.tsv");
    std::fs::write(&dump, "# x | y\n0 0\t0 0\n1 1\t1 1\n").unwrap();
    let swd: f64 = ok(&["eval", "swd", "--config", s(&cfg), s(&dump)]).trim().parse().unwrap();
    assert_eq!(swd, 0.0);
    std::fs::write(&dump, "0 0 1\n").unwrap();
    assert_eq!(qi2(&["eval", "swd", "--config", s(&cfg), s(&dump)]).status.code(), Some(1));
}

#[test]
fn distill_dump_feeds_eval_swd() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_cfg();
    let out = dir.path().join("d");
    ok(&["distill", "--config", s(&cfg), "--out", s(&out)]);
    let summary: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    let swd: f64 = ok(&["eval", "swd", "--config", s(&cfg), s(&out.join("samples.tsv"))]).trim().parse().unwrap();
    assert!((swd - summary["sliced_wasserstein"].as_f64().unwrap()).abs() < 1e-6);

    let runs: Vec<PathBuf> = (0..2).map(|k| dir.path().join(format!("from_ckpt{k}"))).collect();
    for r in &runs {
        ok(&["distill", "--config", s(&cfg), "--out", s(r), "--teacher", s(&out.join("teacher.ckpt"))]);
    }
    let teacher = std::fs::read(out.join("teacher.ckpt")).unwrap();
    assert_eq!(std::fs::read(runs[0].join("teacher.ckpt")).unwrap(), teacher);
    assert_eq!(std::fs::read(runs[0].join("student.ckpt")).unwrap(), std::fs::read(runs[1].join("student.ckpt")).unwrap());
}

#[test]
fn failures_are_categorized() {
    let dir = tempfile::tempdir().unwrap();
    let out = s(dir.path());
    let missing = qi2(&["gradcheck"]);
    assert_eq!(missing.status.code(), Some(2));

    let gone = qi2(&["train-vae", "--config", "/nonexistent/run.cfg", "--out", out]);
    assert_eq!(gone.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&gone.stderr).starts_with("error[config]"));

    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "dit.depth = 3\n").unwrap();
    let unknown = qi2(&["gradcheck", "--config", s(&bad)]);
    assert_eq!(unknown.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&unknown.stderr).contains("dit.depth"));

    let corpus = dir.path().join("corpus");
    ok(&["gen-data", "--config", s(&tiny_cfg()), "--kind", "pipeline", "--out", s(&corpus)]);
    let stage = qi2(&["pipeline", "run", "--config", s(&tiny_cfg()), "--stage", "9", "--in", s(&corpus.join("manifest.jsonl")), "--out", s(&dir.path().join("k.jsonl")), "--report", s(&dir.path().join("r.json"))]);
    assert_eq!(stage.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&stage.stderr).starts_with("error[contract] run_stage_pipeline"));

    let threads = Command::new(env!("CARGO_BIN_EXE_qi2")).args(["gradcheck", "--config", s(&tiny_cfg())]).env("QI2_THREADS", "zero").output().unwrap();
    assert_eq!(threads.status.code(), Some(2));
}
