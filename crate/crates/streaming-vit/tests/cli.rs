//! Black-box tests for the command line binary: artifact round-trips,
//! exit codes and the config plumbing.

use std::path::Path;
use std::process::Output;

use streaming_vit::io::{checksum_f32, read_features, read_sequence};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_streaming-vit")
}

fn run(args: &[&str]) -> Output {
    std::process::Command::new(bin()).args(args).output().unwrap()
}

fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{:?} exited {:?}: {}",
        args,
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn gen_writes_a_loadable_sequence_with_matching_checksums() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("clip.svsq");
    let stdout = run_ok(&[
        "gen",
        "--out",
        path.to_str().unwrap(),
        "--kind",
        "noise",
        "--frames",
        "3",
        "--height",
        "16",
        "--width",
        "24",
        "--seed",
        "11",
    ]);

    let seq = read_sequence(&path).unwrap();
    assert_eq!((seq.height, seq.width, seq.frames.len()), (16, 24, 3));
    for (t, frame) in seq.frames.iter().enumerate() {
        assert_eq!(frame.shape(), &[3, 16, 24]);
        let line = format!("frame {t}: checksum {:016x}", checksum_f32(frame.data()));
        assert!(stdout.contains(&line), "missing '{line}' in:\n{stdout}");
    }
}

#[test]
fn encode_round_trips_features_and_reports_total_macs() {
    let dir = tempfile::tempdir().unwrap();
    let seq = dir.path().join("clip.svsq");
    let feat = dir.path().join("clip.svft");
    run_ok(&["gen", "--out", seq.to_str().unwrap(), "--frames", "4", "--seed", "3"]);
    let stdout = run_ok(&[
        "encode",
        "--seq",
        seq.to_str().unwrap(),
        "--out",
        feat.to_str().unwrap(),
    ]);
    assert!(stdout.contains("MACs"), "no MAC total in:\n{stdout}");

    let dump = read_features(&feat).unwrap();
    assert_eq!((dump.rows, dump.cols, dump.channels), (8, 8, 32));
    assert_eq!(dump.frames.len(), 4);
    for rec in &dump.frames {
        assert_eq!(
            (rec.tokens.rows(), rec.tokens.cols(), rec.tokens.channels()),
            (8, 8, 32)
        );
        assert_eq!(rec.levels.len(), 4);
    }
}

#[test]
fn encode_rejects_sequences_that_do_not_fit_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let seq = dir.path().join("small.svsq");
    run_ok(&[
        "gen",
        "--out",
        seq.to_str().unwrap(),
        "--height",
        "16",
        "--width",
        "16",
        "--frames",
        "2",
    ]);
    let out = run(&["encode", "--seq", seq.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn encode_honors_config_files_and_dtype_overrides() {
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/compact.cfg");
    let dir = tempfile::tempdir().unwrap();
    let seq = dir.path().join("clip.svsq");
    run_ok(&["gen", "--out", seq.to_str().unwrap(), "--frames", "2"]);
    let f32_out = run_ok(&[
        "encode",
        "--seq",
        seq.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    let f64_out = run_ok(&[
        "encode",
        "--seq",
        seq.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--dtype",
        "f64",
    ]);
    assert!(f32_out.contains("(f32,"));
    assert!(f64_out.contains("(f64,"));
    assert_ne!(f32_out, f64_out);
}

#[test]
fn verify_passes_clean_and_fails_under_an_injected_fault() {
    let clean = run(&["verify", "--seeds", "1", "--frames", "4"]);
    assert_eq!(clean.status.code(), Some(0));
    let text = String::from_utf8(clean.stdout).unwrap();
    assert!(text.contains("equivalence"));
    assert!(!text.contains("FAIL"), "clean run reported failures:\n{text}");

    let broken = run(&[
        "verify",
        "--seeds",
        "1",
        "--frames",
        "4",
        "--inject-fault",
        "skip-memory-push",
    ]);
    assert_eq!(broken.status.code(), Some(1));
    let text = String::from_utf8(broken.stdout).unwrap();
    assert!(text.contains("FAIL"), "fault went unnoticed:\n{text}");
}

#[test]
fn flops_reconciles_closed_forms_with_instrumentation() {
    let stdout = run_ok(&["flops", "--frames", "4", "--instrumented"]);
    assert!(
        stdout.contains("closed form matches instrumented: yes"),
        "mismatch:\n{stdout}"
    );
    for mode in ["frame", "streaming"] {
        run_ok(&["flops", "--frames", "4", "--flop-mode", mode]);
    }

    // The dense-clip cost model wants global spatial attention, so the
    // windowed default config is rejected and the global preset works.
    let windowed = run(&["flops", "--frames", "4", "--flop-mode", "clip"]);
    assert_eq!(windowed.status.code(), Some(2));
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/vit_base_224.cfg");
    run_ok(&["flops", "--frames", "4", "--flop-mode", "clip", "--config", cfg.to_str().unwrap()]);
}

#[test]
fn gradcheck_command_reports_a_passing_sweep() {
    let stdout = run_ok(&["gradcheck", "--seeds", "1"]);
    assert!(stdout.contains("pass"), "unexpected output:\n{stdout}");
}

#[test]
fn unknown_fault_names_are_rejected() {
    let out = run(&["verify", "--seeds", "1", "--inject-fault", "drop-everything"]);
    assert_eq!(out.status.code(), Some(2));
}
