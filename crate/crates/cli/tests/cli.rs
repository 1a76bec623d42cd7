//! End-to-end runs of the `fmvit` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn fmvit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fmvit")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

struct Dir(TempDir);

impl Dir {
    fn new() -> Self {
        Dir(tempfile::tempdir().unwrap())
    }

    fn path(&self, name: &str) -> PathBuf {
        self.0.path().join(name)
    }

    fn arg(&self, name: &str) -> String {
        self.path(name).display().to_string()
    }
}

fn ok(args: &[&str]) -> String {
    let o = fmvit(args);
    assert_eq!(code(&o), 0, "{args:?}\nstdout: {}\nstderr: {}", stdout(&o), stderr(&o));
    stdout(&o)
}

fn note<'a>(text: &'a str, key: &str) -> &'a str {
    let prefix = format!("{key}: ");
    text.lines()
        .find_map(|l| l.strip_prefix(prefix.as_str()))
        .unwrap_or_else(|| panic!("no `{key}` in\n{text}"))
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn build_then_analyze_t_reports_the_stage_schedule() {
    let d = Dir::new();
    ok(&["build", "--variant", "T", "--out", &d.arg("t.fmvw")]);
    let out = ok(&["analyze", "--weights", &d.arg("t.fmvw"), "--input-size", "224"]);
    for (i, (side, frac)) in [(56, 4), (28, 8), (14, 16), (7, 32)].iter().enumerate() {
        let line = note(&out, &format!("stage {i}"));
        assert!(line.ends_with(&format!("x{side}x{side} (H/{frac})")), "{line}");
    }
    assert!(note(&out, "reference_params_M").contains("vs 2"));
    assert!(note(&out, "reference_gmacs_at_224").contains("vs 0.3"));
    assert!(note(&out, "caveat").contains("channel triples"));
    assert_eq!(
        note(&out, "flops_2x_macs").parse::<u64>().unwrap(),
        2 * note(&out, "macs").parse::<u64>().unwrap()
    );

    let layers = ok(&["--report-format", "columnar", "analyze", "--variant", "T", "--layers"]);
    assert!(layers.contains("# ops\n"));
    assert!(layers.lines().any(|l| l == "path\top\tparams\tmacs\tadds\toutput"));
}

#[test]
fn verify_against_itself_is_exact() {
    let d = Dir::new();
    ok(&["build", "--variant", "nano", "--seed", "5", "--random-bn", "--out", &d.arg("n.fmvw")]);
    let out = ok(&[
        "verify", "--weights", &d.arg("n.fmvw"), "--against", &d.arg("n.fmvw"), "--samples", "4", "--input-size", "64",
    ]);
    assert_eq!(note(&out, "end_to_end"), "0.000e0");
    assert_eq!(note(&out, "verdict"), "PASS");
    assert!(out.lines().filter(|l| l.ends_with(" ok")).count() >= 6);
}

#[test]
fn build_train_fuse_verify_pipeline() {
    let d = Dir::new();
    let (built, trained, fused) = (d.arg("b.fmvw"), d.arg("t.fmvw"), d.arg("f.fmvw"));
    ok(&["build", "--variant", "nano", "--seed", "1", "--out", &built]);
    let before = read(&d.path("b.fmvw"));
    let out = ok(&[
        "train", "--weights", &built, "--steps", "30", "--samples", "96", "--eval-samples", "64", "--warmup", "3",
        "--out", &trained, "--history", &d.arg("h.tsv"),
    ]);
    assert_eq!(read(&d.path("b.fmvw")), before, "train mutated its input");
    assert_eq!(note(&out, "fused_agreement"), "100.00%");
    let hist = String::from_utf8(read(&d.path("h.tsv"))).unwrap();
    assert!(hist.lines().any(|l| l == "step\tloss\tacc"));

    let trained_bytes = read(&d.path("t.fmvw"));
    let out = ok(&["fuse", "--weights", &trained, "--out", &fused]);
    assert!(note(&out, "parameters").contains("->"));
    assert_eq!(read(&d.path("t.fmvw")), trained_bytes, "fuse mutated its input");

    let out = ok(&["verify", "--weights", &trained, "--against", &fused, "--samples", "20", "--input-size", "32"]);
    assert_eq!(note(&out, "verdict"), "PASS");
    assert_eq!(note(&out, "forms"), "training vs deployed");
    assert_eq!(read(&d.path("t.fmvw")), trained_bytes);

    let strict = fmvit(&[
        "verify", "--weights", &trained, "--against", &fused, "--samples", "2", "--input-size", "32", "--tol", "1e-30",
    ]);
    assert_eq!(code(&strict), 5, "{}", stdout(&strict));
    assert_eq!(note(&stdout(&strict), "verdict"), "FAIL");
}

#[test]
fn build_is_deterministic_per_seed() {
    let d = Dir::new();
    for (name, seed) in [("a", "3"), ("b", "3"), ("c", "4")] {
        ok(&["build", "--variant", "nano", "--seed", seed, "--out", &d.arg(name)]);
    }
    assert_eq!(read(&d.path("a")), read(&d.path("b")));
    assert_ne!(read(&d.path("a")), read(&d.path("c")));
}

#[test]
fn corrupted_weights_exit_with_format_code() {
    let d = Dir::new();
    ok(&["build", "--variant", "nano", "--out", &d.arg("n.fmvw")]);
    let mut bytes = read(&d.path("n.fmvw"));
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(d.path("bad.fmvw"), &bytes).unwrap();
    let o = fmvit(&["fuse", "--weights", &d.arg("bad.fmvw"), "--out", &d.arg("x.fmvw")]);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("CRC mismatch"), "{}", stderr(&o));
    assert!(!d.path("x.fmvw").exists());

    let o = fmvit(&["analyze", "--weights", &d.arg("missing.fmvw")]);
    assert_eq!(code(&o), 4);
}

#[test]
fn bad_specs_exit_with_parse_code_and_position() {
    let d = Dir::new();
    std::fs::write(d.path("s.toml"), "schema_version = 1\nvariant = \"nano\"\n\n[reparam]\nbranches = 2\n").unwrap();
    let o = fmvit(&["build", "--spec", &d.arg("s.toml"), "--out", &d.arg("x")]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("line 5"), "{}", stderr(&o));

    std::fs::write(d.path("v.toml"), "schema_version = 1\nvariant = \"nano\"\nstem = [16, 8, 16]\n").unwrap();
    assert_eq!(code(&fmvit(&["analyze", "--spec", &d.arg("v.toml")])), 3);
    assert_eq!(code(&fmvit(&["analyze", "--variant", "Q"])), 3);

    std::fs::write(d.path("run.toml"), "[train]\nsteps = 5\nmomentum = 0.9\n").unwrap();
    let o = fmvit(&["train", "--variant", "nano", "--config", &d.arg("run.toml")]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("momentum"));
}

#[test]
fn flags_are_validated_before_compute() {
    let o = fmvit(&["analyze", "--variant", "T", "--input-size", "100"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("multiple of 32"));
    assert_eq!(code(&fmvit(&["analyze", "--variant", "T", "--spec", "x.toml"])), 2);
    assert_eq!(code(&fmvit(&["build", "--variant", "T"])), 2);
    assert_eq!(code(&fmvit(&["train", "--variant", "nano", "--classes", "50"])), 2);
    assert_eq!(code(&fmvit(&["train", "--variant", "nano", "--optimizer", "lbfgs"])), 3);
}

#[test]
fn spec_files_drive_every_command() {
    let d = Dir::new();
    let spec = "schema_version = 1\nvariant = \"nano\"\nclasses = 4\n\n[reparam]\nextras = 1\nscale_mode = \"scaled_by_sqrt_d\"\n";
    std::fs::write(d.path("s.toml"), spec).unwrap();
    ok(&["build", "--spec", &d.arg("s.toml"), "--out", &d.arg("m.fmvw")]);
    let out = ok(&["analyze", "--weights", &d.arg("m.fmvw"), "--input-size", "64"]);
    assert!(out.contains("1x4x1x1"), "{out}");
    let abl = ok(&["ablate", "--spec", &d.arg("s.toml"), "--count-size", "64"]);
    assert_eq!(abl.lines().filter(|l| l.starts_with("fmb=")).count(), 4);
    assert_eq!(std::fs::read_to_string(d.path("s.toml")).unwrap(), spec);
}

#[test]
fn spectrum_reads_images_and_is_deterministic() {
    let d = Dir::new();
    ok(&["build", "--variant", "nano", "--random-bn", "--out", &d.arg("n.fmvw")]);
    let mut ppm = b"P6\n# test card\n64 32\n255\n".to_vec();
    for y in 0..32u32 {
        for x in 0..64u32 {
            ppm.extend_from_slice(&[(x * 4) as u8, (y * 8) as u8, ((x + y) % 2 * 255) as u8]);
        }
    }
    std::fs::write(d.path("card.ppm"), &ppm).unwrap();
    let a = ok(&["spectrum", "--weights", &d.arg("n.fmvw"), "--image", &d.arg("card.ppm"), "--out", &d.arg("s.tsv")]);
    let b = ok(&["spectrum", "--weights", &d.arg("n.fmvw"), "--image", &d.arg("card.ppm")]);
    assert_eq!(a.replace(&format!("wrote: {}\n", d.arg("s.tsv")), ""), b);
    for tap in ["f1", "f2", "f3", "f4", "f5"] {
        assert!(a.lines().any(|l| l.split_whitespace().nth(1) == Some(tap)), "{tap} missing");
    }
    assert!(note(&a, "attention_tap").contains("not a guarantee"));
    let tsv = String::from_utf8(read(&d.path("s.tsv"))).unwrap();
    assert!(tsv.lines().any(|l| l.starts_with("block\tbranch\tr<=")));

    let seeded = ok(&["spectrum", "--weights", &d.arg("n.fmvw"), "--seed", "2", "--input-size", "64"]);
    assert_eq!(seeded, ok(&["spectrum", "--weights", &d.arg("n.fmvw"), "--seed", "2", "--input-size", "64"]));

    std::fs::write(d.path("gray.pgm"), b"P5 32 32 255\n").unwrap();
    let o = fmvit(&["spectrum", "--weights", &d.arg("n.fmvw"), "--image", &d.arg("gray.pgm")]);
    assert_eq!(code(&o), 4);
}

#[test]
fn baseline_training_runs_from_flags() {
    let out = ok(&[
        "--report-format", "columnar", "train", "--variant", "nano", "--baseline", "--steps", "20", "--samples", "64",
        "--eval-samples", "32", "--warmup", "2", "--generator", "colored-shape",
    ]);
    assert!(out.contains("# model: conv baseline"));
    assert!(out.contains("colored-shape 32x32"));
}
