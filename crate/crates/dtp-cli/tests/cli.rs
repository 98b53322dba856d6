//! End-to-end tests of the `dtp` binary: every subcommand exercised
//! through real process invocations, plus the reproducibility and error
//! contracts.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dtp"))
}

fn scratch(tag: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("dtp_cli_{}_{tag}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

/// A configuration small enough that training and the ablation study run
/// in seconds.
fn write_micro_config(dir: &Path) -> PathBuf {
    let path = dir.join("micro.cfg");
    std::fs::write(
        &path,
        "train.steps = 6\n\
         train.batch = 3\n\
         train.patch = 8\n\
         data.pairs = 5\n\
         data.holdout = 2\n\
         data.hr_size = 32\n\
         sdr.width = 6\n\
         sdr.stages = 2\n\
         csr.width = 8\n\
         csr.reduction = 4\n",
    )
    .unwrap();
    path
}

fn assert_success(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Byte-compares every file in two directories.
fn assert_dirs_identical(a: &Path, b: &Path) {
    let list = |d: &Path| {
        let mut names: Vec<String> = std::fs::read_dir(d)
            .unwrap()
            .map(|e| e.unwrap().file_name().into_string().unwrap())
            .collect();
        names.sort();
        names
    };
    let names = list(a);
    assert_eq!(names, list(b), "directory listings differ");
    for name in names {
        let x = std::fs::read(a.join(&name)).unwrap();
        let y = std::fs::read(b.join(&name)).unwrap();
        assert_eq!(x, y, "file {name} differs between runs");
    }
}

#[test]
fn synth_runs_are_byte_identical() {
    let dir = scratch("synth");
    for run in ["a", "b"] {
        let out = bin()
            .args([
                "synth",
                "--out",
                dir.join(run).to_str().unwrap(),
                "--count",
                "3",
                "--size",
                "16",
                "--seed",
                "5",
            ])
            .output()
            .unwrap();
        assert_success(&out, "synth");
    }
    assert_dirs_identical(&dir.join("a"), &dir.join("b"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn train_is_reproducible_across_worker_counts() {
    let dir = scratch("train");
    let config = write_micro_config(&dir);
    for (run, threads) in [("a", "1"), ("b", "4")] {
        let out = bin()
            .args([
                "train",
                "--config",
                config.to_str().unwrap(),
                "--out",
                dir.join(run).to_str().unwrap(),
            ])
            .env("DTP_THREADS", threads)
            .output()
            .unwrap();
        assert_success(&out, "train");
    }
    for run in ["a", "b"] {
        assert!(dir.join(run).join("model.ckpt").exists());
        let trace = std::fs::read_to_string(dir.join(run).join("loss_trace.tsv")).unwrap();
        assert_eq!(trace.lines().count(), 7, "header plus one line per step");
        assert!(trace.starts_with("step\ttotal\treconstruction\tband_prior\n"));
    }
    assert_dirs_identical(&dir.join("a"), &dir.join("b"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn infer_upscales_and_emits_intermediate_images() {
    let dir = scratch("infer");
    let config = write_micro_config(&dir);
    let out = bin()
        .args([
            "synth",
            "--out",
            dir.join("pairs").to_str().unwrap(),
            "--count",
            "1",
            "--size",
            "32",
        ])
        .output()
        .unwrap();
    assert_success(&out, "synth");
    let out = bin()
        .args([
            "train",
            "--config",
            config.to_str().unwrap(),
            "--out",
            dir.join("run").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_success(&out, "train");
    let out = bin()
        .args([
            "infer",
            "--checkpoint",
            dir.join("run/model.ckpt").to_str().unwrap(),
            "--in",
            dir.join("pairs/pair000_lr.png").to_str().unwrap(),
            "--out",
            dir.join("sr/out.png").to_str().unwrap(),
            "--emit-subbands",
        ])
        .output()
        .unwrap();
    assert_success(&out, "infer");
    let img = dtp_core::imageio::read_image(&dir.join("sr/out.png")).unwrap();
    assert_eq!(img.shape(), &[32, 32, 3], "16x16 input must come back 32x32");
    for suffix in [
        "band_ll",
        "band_lh",
        "band_hl",
        "band_hh",
        "luminance",
        "texture_lh",
        "texture_hl",
        "texture_hh",
    ] {
        let path = dir.join(format!("sr/out_{suffix}.png"));
        assert!(path.exists(), "missing intermediate image {suffix}");
    }
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn evaluate_reports_capped_fidelity_for_identical_images() {
    let dir = scratch("evaluate");
    let out = bin()
        .args([
            "synth",
            "--out",
            dir.join("pairs").to_str().unwrap(),
            "--count",
            "2",
            "--size",
            "16",
        ])
        .output()
        .unwrap();
    assert_success(&out, "synth");
    // Use the clean halves as both prediction and reference.
    for sub in ["pred", "gt"] {
        std::fs::create_dir_all(dir.join(sub)).unwrap();
        for i in 0..2 {
            std::fs::copy(
                dir.join(format!("pairs/pair00{i}_hr.png")),
                dir.join(format!("{sub}/img{i}.png")),
            )
            .unwrap();
        }
    }
    let out = bin()
        .args([
            "evaluate",
            "--pred-dir",
            dir.join("pred").to_str().unwrap(),
            "--gt-dir",
            dir.join("gt").to_str().unwrap(),
            "--out",
            dir.join("report").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_success(&out, "evaluate");
    let report = std::fs::read_to_string(dir.join("report/report.tsv")).unwrap();
    assert!(report.contains("mean_psnr_db\t99.0000"), "report:\n{report}");
    assert!(report.contains("mean_ssim\t1.000000"), "report:\n{report}");
    assert!(report.contains("lpips\tn/a"), "report:\n{report}");
    for stem in ["img0", "img1"] {
        for side in ["pred", "gt"] {
            let hist = dir.join(format!("report/{stem}_{side}_hist.tsv"));
            let text = std::fs::read_to_string(&hist).unwrap();
            assert_eq!(text.lines().count(), 256, "one row per bin");
        }
    }
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn gradcheck_prints_pass_and_exits_zero() {
    let dir = scratch("gradcheck");
    let config = write_micro_config(&dir);
    let out = bin()
        .args(["gradcheck", "--config", config.to_str().unwrap()])
        .output()
        .unwrap();
    assert_success(&out, "gradcheck");
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("PASS"), "stdout:\n{stdout}");
    assert!(
        stdout.lines().filter(|l| l.starts_with("param ")).count() >= 20,
        "expected a per-parameter line for every group:\n{stdout}"
    );
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn ablate_writes_eight_row_tables() {
    let dir = scratch("ablate");
    let config = write_micro_config(&dir);
    let out = bin()
        .args([
            "ablate",
            "--config",
            config.to_str().unwrap(),
            "--out",
            dir.join("tables").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_success(&out, "ablate");
    let tsv = std::fs::read_to_string(dir.join("tables/ablation.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 9, "header plus eight variants:\n{tsv}");
    assert!(tsv.starts_with("variant\tfsd\tsdr\tcsr\tpsnr_db\tssim\t"));
    let text = std::fs::read_to_string(dir.join("tables/ablation.txt")).unwrap();
    assert!(text.contains("baseline") && text.contains("full"));
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn errors_use_the_machine_parsable_prefix() {
    let out = bin()
        .args([
            "infer",
            "--checkpoint",
            "/nonexistent/model.ckpt",
            "--in",
            "/nonexistent/input.png",
            "--out",
            "/tmp/never_written.png",
        ])
        .output()
        .unwrap();
    assert!(!out.status.success(), "missing checkpoint must fail");
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.starts_with("ERROR: "),
        "stderr must begin with the ERROR: prefix, got:\n{stderr}"
    );
    assert_eq!(stderr.lines().count(), 1, "one-line error, got:\n{stderr}");

    // Unknown flags are rejected with usage text and a nonzero status.
    let out = bin().args(["synth", "--no-such-flag"]).output().unwrap();
    assert!(!out.status.success());
}

#[test]
fn every_subcommand_documents_itself() {
    for sub in ["synth", "train", "infer", "ablate", "gradcheck", "evaluate"] {
        let out = bin().args([sub, "--help"]).output().unwrap();
        assert!(out.status.success(), "{sub} --help must exit 0");
        let text = String::from_utf8_lossy(&out.stdout);
        assert!(text.contains("--help"), "{sub} help is empty");
    }
}
