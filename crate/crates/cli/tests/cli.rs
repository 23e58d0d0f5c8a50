use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_p2codec");

fn crop(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../core/tests/data/crops")
        .join(name)
}

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .output()
        .expect("spawn p2codec")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "p2codec {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn compress_then_decompress_restores_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let input = crop("coffee_1.ppm");
    let packed = dir.path().join("c.p2lc");
    let back = dir.path().join("c.ppm");
    let stdout = ok(&[
        "compress",
        s(&input),
        s(&packed),
        "--mode",
        "indep",
        "--patch",
        "8",
        "--workers",
        "3",
    ]);
    assert!(stdout.contains("verified"));
    ok(&["decompress", s(&packed), s(&back)]);
    assert_eq!(fs::read(&input).unwrap(), fs::read(&back).unwrap());
}

#[test]
fn raw_samples_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let raw = dir.path().join("in.raw");
    let samples: Vec<u8> = (0..10 * 7 * 3).map(|i| (i * 13 % 256) as u8).collect();
    fs::write(&raw, &samples).unwrap();
    let packed = dir.path().join("in.p2lc");
    let out = dir.path().join("out.raw");
    ok(&[
        "compress",
        s(&raw),
        s(&packed),
        "--raw",
        "10x7x3",
        "--prompt",
        "off",
        "--provider",
        "builtin:order2",
    ]);
    ok(&[
        "decompress",
        s(&packed),
        s(&out),
        "--provider",
        "builtin:order2",
    ]);
    assert_eq!(fs::read(&out).unwrap(), samples);
}

#[test]
fn wrong_provider_fails_with_nonzero_exit() {
    let dir = tempfile::tempdir().unwrap();
    let packed = dir.path().join("a.p2lc");
    ok(&["compress", s(&crop("chelsea_0.ppm")), s(&packed)]);
    let out = run(&[
        "decompress",
        s(&packed),
        s(&dir.path().join("a.ppm")),
        "--provider",
        "builtin:order0",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("wrong provider"));
}

#[test]
fn corrupt_container_fails() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.p2lc");
    fs::write(&bad, b"P2LC garbage").unwrap();
    let out = run(&["decompress", s(&bad), s(&dir.path().join("x.ppm"))]);
    assert!(!out.status.success());
}

#[test]
fn trace_writes_one_row_per_symbol() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("t.csv");
    ok(&[
        "trace",
        s(&crop("astronaut_2.ppm")),
        "--patch-index",
        "3",
        "--csv",
        s(&csv),
        "--patch",
        "8",
    ]);
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header.len(), 6 + 256);
    assert_eq!(header[0], "sequence");
    assert_eq!(lines.count(), 8 * 8 * 3);
}

#[test]
fn bench_writes_csv_and_reference_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    fs::create_dir(&corpus).unwrap();
    for name in ["coffee_0.ppm", "chelsea_2.ppm"] {
        fs::copy(crop(name), corpus.join(name)).unwrap();
    }
    let csv = dir.path().join("r.csv");
    let stdout = ok(&[
        "bench",
        s(&corpus),
        "--provider",
        "builtin:order0",
        "--grid",
        "joint/prompt,indep/no-prompt",
        "--csv",
        s(&csv),
    ]);
    assert!(stdout.contains("2.83") && stdout.contains("2.08"));
    let rows = fs::read_to_string(&csv).unwrap();
    assert_eq!(rows.lines().count(), 1 + 2 * 2);
}

#[test]
fn stdio_server_backs_a_remote_provider() {
    let dir = tempfile::tempdir().unwrap();
    let input = crop("chelsea_1.ppm");
    let packed = dir.path().join("r.p2lc");
    let back = dir.path().join("r.ppm");
    let provider = format!("remote:stdio:{BIN} serve-builtin --stdio --order 2");
    ok(&[
        "compress",
        s(&input),
        s(&packed),
        "--provider",
        &provider,
        "--mode",
        "indep",
    ]);
    ok(&["decompress", s(&packed), s(&back), "--provider", &provider]);
    assert_eq!(fs::read(&input).unwrap(), fs::read(&back).unwrap());
}

#[test]
fn unknown_provider_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "compress",
        s(&crop("coffee_2.ppm")),
        s(&dir.path().join("o.p2lc")),
        "--provider",
        "magic:model",
    ]);
    assert!(!out.status.success());
}
