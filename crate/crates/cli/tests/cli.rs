use std::path::Path;
use std::process::{Command, Output};

use terrafuse::data::{MaskMap, Patch};
use terrafuse::fusion::{argmax_map, ProbMap};
use terrafuse::trainer::Checkpoint;

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_terrafuse"))
        .current_dir(dir)
        .env("TERRAFUSE_THREADS", "1")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

/// gen-data, two short trainings, predict, fuse and eval. Returns the files
/// each stage produced, relative to `dir`.
fn pipeline(dir: &Path) -> Vec<&'static str> {
    ok(
        dir,
        &[
            "gen-data",
            "--out",
            "data",
            "--patches",
            "5",
            "--size",
            "32",
            "--seed",
            "0",
        ],
    );
    for model in ["unet", "deeplab"] {
        let out = format!("{model}.tfw");
        ok(
            dir,
            &[
                "train", "--data", "data", "--model", model, "--epochs", "2", "--batch", "2",
                "--seed", "0", "--out", &out,
            ],
        );
        ok(
            dir,
            &[
                "predict",
                "--ckpt",
                &out,
                "--input",
                "data/patch_000[34].mcr",
                "--out",
                model,
            ],
        );
    }
    std::fs::create_dir_all(dir.join("fused")).unwrap();
    for id in ["patch_0003", "patch_0004"] {
        ok(
            dir,
            &[
                "fuse",
                "--a",
                &format!("unet/{id}.prb"),
                "--b",
                &format!("deeplab/{id}.prb"),
                "--out",
                &format!("fused/{id}.msk"),
            ],
        );
    }
    ok(
        dir,
        &[
            "eval",
            "--pred",
            "fused/*.msk",
            "--truth",
            "data/*.msk",
            "--report",
            "report.txt",
        ],
    );
    vec![
        "unet/patch_0003.prb",
        "deeplab/patch_0004.prb",
        "fused/patch_0003.msk",
        "fused/patch_0004.msk",
        "report.txt",
    ]
}

#[test]
fn pipeline_runs_and_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let files = pipeline(a.path());
    pipeline(b.path());

    let report = std::fs::read_to_string(a.path().join("report.txt")).unwrap();
    assert!(
        report.contains("foreground_iou=") && report.contains("mIoU"),
        "{report}"
    );

    for f in files {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert_eq!(x, y, "{f} differs between runs");
    }
    for f in ["unet.tfw", "deeplab.tfw"] {
        let x = Checkpoint::load(a.path().join(f)).unwrap();
        let y = Checkpoint::load(b.path().join(f)).unwrap();
        assert!(x.created.is_some());
        assert_eq!(
            x.canonical_bytes(),
            y.canonical_bytes(),
            "{f} differs between runs"
        );
    }

    // the validation patches only; training patches were not predicted
    assert!(!a.path().join("unet/patch_0000.prb").exists());
    let p = ProbMap::read(a.path().join("unet/patch_0003.prb")).unwrap();
    let patch = Patch::read(a.path().join("data/patch_0003.mcr")).unwrap();
    assert_eq!((p.height(), p.width()), (patch.height(), patch.width()));
}

#[test]
fn predict_output_does_not_depend_on_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &[
            "gen-data",
            "--out",
            "data",
            "--patches",
            "4",
            "--size",
            "16",
            "--seed",
            "1",
        ],
    );
    ok(
        d,
        &[
            "train", "--data", "data", "--model", "unet", "--epochs", "1", "--out", "m.tfw",
        ],
    );
    ok(
        d,
        &[
            "predict",
            "--ckpt",
            "m.tfw",
            "--input",
            "data/*.mcr",
            "--out",
            "one",
        ],
    );
    let out = Command::new(env!("CARGO_BIN_EXE_terrafuse"))
        .current_dir(d)
        .env("TERRAFUSE_THREADS", "3")
        .args([
            "predict",
            "--ckpt",
            "m.tfw",
            "--input",
            "data/*.mcr",
            "--out",
            "three",
        ])
        .output()
        .unwrap();
    assert!(out.status.success());
    for i in 0..4 {
        let name = format!("patch_{i:04}.prb");
        assert_eq!(
            std::fs::read(d.join("one").join(&name)).unwrap(),
            std::fs::read(d.join("three").join(&name)).unwrap()
        );
    }
}

fn write_probs(path: &Path, h: usize, w: usize, seed: u32) {
    let n = h * w;
    let mut data = vec![0.0f32; 3 * n];
    for i in 0..n {
        let raw = [
            1 + (i as u32 * 7 + seed) % 5,
            1 + (i as u32 * 3 + seed) % 4,
            1 + (i as u32 + seed) % 6,
        ];
        let s: u32 = raw.iter().sum();
        for c in 0..3 {
            data[c * n + i] = raw[c] as f32 / s as f32;
        }
    }
    ProbMap::new(h, w, data).unwrap().write(path).unwrap();
}

#[test]
fn fuse_alpha_one_is_the_first_input() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write_probs(&d.join("a.prb"), 4, 5, 0);
    write_probs(&d.join("b.prb"), 4, 5, 3);
    ok(
        d,
        &[
            "fuse", "--a", "a.prb", "--b", "b.prb", "--alpha", "1.0", "--out", "f.msk",
        ],
    );
    let a = ProbMap::read(d.join("a.prb")).unwrap();
    assert_eq!(MaskMap::read(d.join("f.msk")).unwrap(), argmax_map(&a));
    ok(
        d,
        &[
            "fuse", "--a", "a.prb", "--b", "b.prb", "--alpha", "0", "--out", "g.msk",
        ],
    );
    let b = ProbMap::read(d.join("b.prb")).unwrap();
    assert_eq!(MaskMap::read(d.join("g.msk")).unwrap(), argmax_map(&b));
}

#[test]
fn eval_of_identical_masks_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::create_dir(d.join("t")).unwrap();
    let m = MaskMap::new(2, 3, vec![0, 1, 2, 2, 1, 0]).unwrap();
    m.write(d.join("t/x.msk")).unwrap();
    ok(
        d,
        &[
            "eval", "--pred", "t/*.msk", "--truth", "t/*.msk", "--report", "r.txt",
        ],
    );
    let report = std::fs::read_to_string(d.join("r.txt")).unwrap();
    for key in [
        "foreground_iou",
        "miou",
        "terrace_f1",
        "wall_f1",
        "terrace_precision",
        "wall_recall",
    ] {
        assert!(report.contains(&format!("{key}=1\n")), "{key}: {report}");
    }
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&run(d, &["--help"])), 0);
    for sub in ["gen-data", "train", "predict", "fuse", "eval", "ablate"] {
        let out = run(d, &[sub, "--help"]);
        assert_eq!(code(&out), 0, "{sub}");
        assert!(!out.stdout.is_empty());
    }

    let usage = run(d, &["fuse", "--a", "x.prb"]);
    assert_eq!(code(&usage), 1);
    assert!(String::from_utf8_lossy(&usage.stderr).starts_with("error:"));
    assert_eq!(code(&run(d, &["frobnicate"])), 1);
    write_probs(&d.join("a.prb"), 2, 2, 0);
    assert_eq!(
        code(&run(
            d,
            &["fuse", "--a", "a.prb", "--b", "a.prb", "--alpha", "1.5", "--out", "f.msk"]
        )),
        1
    );

    std::fs::write(d.join("bad.prb"), b"PRB1\x02\x00").unwrap();
    let bad = run(
        d,
        &["fuse", "--a", "bad.prb", "--b", "a.prb", "--out", "f.msk"],
    );
    assert_eq!(code(&bad), 2);
    let msg = String::from_utf8_lossy(&bad.stderr);
    assert!(
        msg.starts_with("error:") && msg.contains("bad.prb"),
        "{msg}"
    );

    assert_eq!(
        code(&run(
            d,
            &[
                "fuse",
                "--a",
                "missing.prb",
                "--b",
                "a.prb",
                "--out",
                "f.msk"
            ]
        )),
        2
    );
    assert_eq!(
        code(&run(
            d,
            &[
                "eval",
                "--pred",
                "none/*.msk",
                "--truth",
                "a.prb",
                "--report",
                "r"
            ]
        )),
        2
    );
    assert_eq!(
        code(&run(
            d,
            &["train", "--data", "nowhere", "--model", "unet", "--out", "m.tfw"]
        )),
        2
    );

    std::fs::write(d.join("junk.tfw"), b"TFW1 not really").unwrap();
    assert_eq!(
        code(&run(
            d,
            &["predict", "--ckpt", "junk.tfw", "--input", "*.mcr", "--out", "o"]
        )),
        2
    );
}

#[test]
fn gen_data_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &[
            "gen-data",
            "--out",
            "a",
            "--patches",
            "3",
            "--size",
            "16",
            "--seed",
            "9",
        ],
    );
    ok(
        d,
        &[
            "gen-data",
            "--out",
            "b",
            "--patches",
            "3",
            "--size",
            "16",
            "--seed",
            "9",
        ],
    );
    for f in ["manifest.txt", "patch_0000.mcr", "patch_0002.msk"] {
        assert_eq!(
            std::fs::read(d.join("a").join(f)).unwrap(),
            std::fs::read(d.join("b").join(f)).unwrap()
        );
    }
    assert_eq!(
        code(&run(
            d,
            &["gen-data", "--out", "c", "--patches", "3", "--size", "20"]
        )),
        1
    );
}

#[test]
fn ablate_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(
        d,
        &[
            "gen-data",
            "--out",
            "data",
            "--patches",
            "5",
            "--size",
            "16",
            "--seed",
            "2",
        ],
    );
    ok(
        d,
        &[
            "train", "--data", "data", "--model", "unet", "--epochs", "1", "--out", "u.tfw",
        ],
    );
    ok(
        d,
        &[
            "train", "--data", "data", "--model", "deeplab", "--epochs", "1", "--out", "d.tfw",
        ],
    );
    ok(
        d,
        &[
            "ablate",
            "--ckpt-unet",
            "u.tfw",
            "--ckpt-deeplab",
            "d.tfw",
            "--data",
            "data",
            "--report",
            "abl.txt",
        ],
    );
    let text = std::fs::read_to_string(d.join("abl.txt")).unwrap();
    let r = terrafuse::ablation::AblationReport::parse(&text).unwrap();
    assert!((0.0..=1.0).contains(&r.baseline));
    ok(
        d,
        &[
            "ablate",
            "--single",
            "unet",
            "--ckpt-unet",
            "u.tfw",
            "--data",
            "data",
            "--report",
            "single.txt",
        ],
    );
    assert_eq!(
        code(&run(
            d,
            &[
                "ablate",
                "--ckpt-unet",
                "u.tfw",
                "--data",
                "data",
                "--report",
                "x"
            ]
        )),
        1
    );
}
