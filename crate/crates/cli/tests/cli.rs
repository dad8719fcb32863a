//! End-to-end tests of the command line: every subcommand, exit codes, and
//! byte-level reproducibility under a fixed seed.

use std::path::Path;
use std::process::{Command, Output};

use sinp_core::data::{decode_image, load_image, write_image, ImageRgb, SynthKind};
use sinp_core::nets::checkpoint::load_checkpoint;

fn sinp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sinp"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Train a tiny desk model into `dir` and return the checkpoint path.
fn train_tiny(dir: &Path, name: &str, extra: &[&str]) -> std::path::PathBuf {
    let ckpt = dir.join(name);
    let mut args = vec![
        "train",
        "--preset",
        "desk",
        "--data",
        "synth:stripes",
        "--steps",
        "4",
        "--phase2-steps",
        "0",
        "--seed",
        "7",
        "--set",
        "data_count=4",
        "--set",
        "batch_size=2",
    ];
    let ckpt_str = ckpt.display().to_string();
    args.push("--checkpoint");
    args.push(&ckpt_str);
    args.extend_from_slice(extra);
    let out = sinp(&args);
    assert_exit(&out, 0);
    ckpt
}

#[test]
fn help_lists_every_flag_and_exits_zero() {
    let out = sinp(&["--help"]);
    assert_exit(&out, 0);
    for cmd in ["train", "inpaint", "refine", "eval", "ablate"] {
        let text = String::from_utf8_lossy(&sinp(&[cmd, "--help"]).stdout).to_string();
        for flag in [
            "--preset",
            "--data",
            "--steps",
            "--phase2-steps",
            "--seed",
            "--checkpoint",
            "--in",
            "--out",
            "--k",
            "--report-dir",
            "--config",
            "--set",
        ] {
            assert!(text.contains(flag), "{cmd} --help missing {flag}");
        }
        assert!(text.contains("default"), "{cmd} --help shows defaults");
    }
}

#[test]
fn train_writes_reproducible_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let a = train_tiny(dir.path(), "a.sinp", &[]);
    let b = train_tiny(dir.path(), "b.sinp", &[]);
    let (ba, bb) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(!ba.is_empty());
    assert_eq!(ba, bb, "same seed must give bit-identical checkpoints");

    let ckpt = load_checkpoint(&a).unwrap();
    assert!(ckpt.disc.is_none(), "no phase 2, no discriminator");
}

#[test]
fn train_with_phase2_records_discriminator() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt_path = dir.path().join("p2.sinp");
    let out = sinp(&[
        "train",
        "--data",
        "synth:stripes",
        "--steps",
        "2",
        "--phase2-steps",
        "2",
        "--seed",
        "3",
        "--set",
        "data_count=4",
        "--set",
        "batch_size=2",
        "--checkpoint",
        &ckpt_path.display().to_string(),
    ]);
    assert_exit(&out, 0);
    let ckpt = load_checkpoint(&ckpt_path).unwrap();
    assert!(ckpt.disc.is_some());
    assert_eq!(ckpt.train.unwrap().step, 4);
}

#[test]
fn missing_dataset_exits_2_and_bad_key_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = sinp(&[
        "train",
        "--data",
        "/nonexistent/list.txt",
        "--checkpoint",
        &dir.path().join("x.sinp").display().to_string(),
    ]);
    assert_exit(&out, 2);

    let out = sinp(&["train", "--set", "bogus=1"]);
    assert_exit(&out, 1);

    let out = sinp(&["eval", "--checkpoint", "/nonexistent.sinp"]);
    assert_exit(&out, 2);
}

#[test]
fn inpaint_keeps_context_and_refine_zero_iterations_matches_inpaint() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path(), "m.sinp", &[]);

    // A 32x32 test image.
    let img = {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        sinp_core::data::synth_structured(SynthKind::Stripes, 32, &mut rng)
    };
    let in_path = dir.path().join("in.png");
    write_image(&in_path, &img).unwrap();

    let out_path = dir.path().join("out.png");
    let out = sinp(&[
        "inpaint",
        "--checkpoint",
        &ckpt.display().to_string(),
        "--in",
        &in_path.display().to_string(),
        "--out",
        &out_path.display().to_string(),
    ]);
    assert_exit(&out, 0);

    // Output decodes, context pixels match the input exactly (both sides of
    // the comparison went through the same 8-bit quantization).
    let result = load_image(&out_path).unwrap();
    let original = load_image(&in_path).unwrap();
    let hole = 12;
    let off = (32 - hole) / 2;
    for y in 0..32 {
        for x in 0..32 {
            let in_hole = y >= off && y < off + hole && x >= off && x < off + hole;
            if !in_hole {
                for c in 0..3 {
                    assert_eq!(result.get(y, x, c), original.get(y, x, c), "at ({y},{x})");
                }
            }
        }
    }

    // refine with 0 iterations reproduces the inpaint output bit for bit.
    let ref_path = dir.path().join("ref.png");
    let out = sinp(&[
        "refine",
        "--checkpoint",
        &ckpt.display().to_string(),
        "--in",
        &in_path.display().to_string(),
        "--out",
        &ref_path.display().to_string(),
        "--set",
        "refine_iters=0",
    ]);
    assert_exit(&out, 0);
    assert_eq!(
        std::fs::read(&out_path).unwrap(),
        std::fs::read(&ref_path).unwrap()
    );
}

#[test]
fn refine_runs_and_writes_trace() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path(), "r.sinp", &[]);
    let img = ImageRgb::filled(32, 32, [0.3, 0.5, 0.7]);
    let in_path = dir.path().join("flat.ppm");
    write_image(&in_path, &img).unwrap();
    let out_path = dir.path().join("refined.ppm");
    let report_dir = dir.path().join("reports");
    let out = sinp(&[
        "refine",
        "--checkpoint",
        &ckpt.display().to_string(),
        "--in",
        &in_path.display().to_string(),
        "--out",
        &out_path.display().to_string(),
        "--report-dir",
        &report_dir.display().to_string(),
        "--set",
        "refine_iters=2",
    ]);
    assert_exit(&out, 0);
    let trace = std::fs::read_to_string(report_dir.join("refine_trace.csv")).unwrap();
    assert!(trace.starts_with("scale,iteration,e_patch,e_guide,e_tv,e_total\n"));
    assert!(trace.lines().count() > 1);
    let bytes = std::fs::read(&out_path).unwrap();
    decode_image(&bytes).unwrap();
}

#[test]
fn geometry_mismatch_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path(), "g.sinp", &[]);
    let img = ImageRgb::filled(16, 16, [0.5, 0.5, 0.5]);
    let in_path = dir.path().join("small.png");
    write_image(&in_path, &img).unwrap();
    let out = sinp(&[
        "inpaint",
        "--checkpoint",
        &ckpt.display().to_string(),
        "--in",
        &in_path.display().to_string(),
        "--out",
        &dir.path().join("o.png").display().to_string(),
    ]);
    assert_exit(&out, 1);
}

#[test]
fn eval_and_ablate_write_ordered_reports() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = train_tiny(dir.path(), "e.sinp", &[]);
    let report_dir = dir.path().join("reports");
    let out = sinp(&[
        "eval",
        "--checkpoint",
        &ckpt.display().to_string(),
        "--data",
        "synth:stripes",
        "--seed",
        "42",
        "--set",
        "data_count=3",
        "--report-dir",
        &report_dir.display().to_string(),
    ]);
    assert_exit(&out, 0);
    let csv = std::fs::read_to_string(report_dir.join("eval.csv")).unwrap();
    // Columns ordered l1, l2, PSNR.
    assert!(csv.starts_with("image,l1_pct,l2_pct,psnr_db\n"));

    // Rerunning is byte-reproducible.
    let again_dir = dir.path().join("reports2");
    let out = sinp(&[
        "eval",
        "--checkpoint",
        &ckpt.display().to_string(),
        "--data",
        "synth:stripes",
        "--seed",
        "42",
        "--set",
        "data_count=3",
        "--report-dir",
        &again_dir.display().to_string(),
    ]);
    assert_exit(&out, 0);
    assert_eq!(
        std::fs::read(report_dir.join("eval.csv")).unwrap(),
        std::fs::read(again_dir.join("eval.csv")).unwrap()
    );

    let out = sinp(&[
        "ablate",
        "--checkpoint",
        &ckpt.display().to_string(),
        "--data",
        "synth:stripes",
        "--seed",
        "42",
        "--k",
        "2,4,8",
        "--set",
        "data_count=3",
        "--report-dir",
        &report_dir.display().to_string(),
    ]);
    assert_exit(&out, 0);
    let csv = std::fs::read_to_string(report_dir.join("ablation.csv")).unwrap();
    let ks: Vec<&str> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(ks, vec!["2", "4", "8"], "rows follow the requested order");
}

#[test]
fn checkpoints_are_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, threads: &str| {
        let ckpt = dir.path().join(name);
        let out = Command::new(env!("CARGO_BIN_EXE_sinp"))
            .env("RAYON_NUM_THREADS", threads)
            .args([
                "train",
                "--data",
                "synth:mixed",
                "--steps",
                "3",
                "--phase2-steps",
                "2",
                "--seed",
                "11",
                "--set",
                "data_count=4",
                "--set",
                "batch_size=4",
                "--checkpoint",
                &ckpt.display().to_string(),
            ])
            .output()
            .unwrap();
        assert_exit(&out, 0);
        std::fs::read(&ckpt).unwrap()
    };
    let single = run("t1.sinp", "1");
    let multi = run("t4.sinp", "4");
    assert_eq!(single, multi, "thread count must not change the result");
}

#[test]
fn training_accepts_fixed_feature_weights_from_a_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut featnet = sinp_core::nets::FeatureNetParams::init(
        &sinp_core::nets::FeatureNetConfig::desk(),
        99,
    );
    featnet.channel_mean = [0.4, 0.5, 0.6];
    let fpath = dir.path().join("features.sinp");
    sinp_core::nets::checkpoint::save_featnet(&fpath, &featnet).unwrap();

    let ckpt_path = dir.path().join("model.sinp");
    let out = sinp(&[
        "train",
        "--data",
        "synth:stripes",
        "--steps",
        "2",
        "--phase2-steps",
        "0",
        "--seed",
        "1",
        "--set",
        "data_count=2",
        "--set",
        "batch_size=1",
        "--set",
        &format!("featnet={}", fpath.display()),
        "--checkpoint",
        &ckpt_path.display().to_string(),
    ]);
    assert_exit(&out, 0);
    let ckpt = load_checkpoint(&ckpt_path).unwrap();
    assert_eq!(ckpt.featnet, featnet, "feature net taken from the file, frozen");
}

#[test]
fn resume_continues_to_the_same_result() {
    let dir = tempfile::tempdir().unwrap();
    // Uninterrupted 6-step run.
    let full = train_tiny(dir.path(), "full.sinp", &["--set", "steps=6"]);
    // 3 steps, then resume to 6.
    let part = train_tiny(dir.path(), "part.sinp", &["--set", "steps=3"]);
    let out = sinp(&[
        "train",
        "--preset",
        "desk",
        "--data",
        "synth:stripes",
        "--steps",
        "6",
        "--phase2-steps",
        "0",
        "--seed",
        "7",
        "--set",
        "data_count=4",
        "--set",
        "batch_size=2",
        "--set",
        "resume=1",
        "--checkpoint",
        &part.display().to_string(),
    ]);
    assert_exit(&out, 0);
    assert_eq!(
        std::fs::read(&full).unwrap(),
        std::fs::read(&part).unwrap(),
        "resumed run must reproduce the uninterrupted checkpoint"
    );
}
