use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use image::{Rgb, RgbImage};
use poseedit::conditioning::neutral_skeleton;
use poseedit::config::RunConfig;
use poseedit::dataset::{read_manifest, MANIFEST_FILE};
use poseedit::diffusion::{load_checkpoint, UNetDenoiser};
use poseedit::synthetic::{scripted_videos, write_video_fixture};
use tempfile::TempDir;

fn poseedit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_poseedit"))
        .args(args)
        .current_dir(dir)
        .env_remove("POSEEDIT_CAPTIONER_URL")
        .env_remove("POSEEDIT_CAPTIONER_KEY")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn ok(out: Output) -> Output {
    assert!(out.status.success(), "stdout: {}\nstderr: {}", String::from_utf8_lossy(&out.stdout), String::from_utf8_lossy(&out.stderr));
    out
}

/// A miniature model so training and sampling take well under a second.
fn tiny_config(dir: &Path, extra: &str) -> PathBuf {
    let text = format!(
        "seed = 3\n{extra}\n[paths]\ncheckpoints = \"ckpt\"\nreports = \"reports\"\n\
         [model]\nresolution = 8\nbase_width = 4\nattention_dim = 4\ncontext_width = 4\n\
         [diffusion.sampling]\nsteps = 10\n"
    );
    let path = dir.join("run.toml");
    fs::write(&path, text).unwrap();
    path
}

fn built_dataset(dir: &Path) -> PathBuf {
    let input = dir.join("videos");
    write_video_fixture(&input, &scripted_videos()).unwrap();
    let output = dir.join("dataset");
    ok(poseedit(dir, &["dataset", "build", "--input", "videos", "--output", "dataset"]));
    output
}

fn edit_inputs(dir: &Path) {
    RgbImage::from_fn(24, 20, |x, y| Rgb([(x * 10) as u8, (y * 12) as u8, 60])).save(dir.join("scene.png")).unwrap();
    RgbImage::from_fn(16, 16, |x, _| Rgb([200, (x * 15) as u8, 30])).save(dir.join("person.png")).unwrap();
    fs::write(dir.join("pose.json"), serde_json::to_string(&neutral_skeleton(24.0, 20.0)).unwrap()).unwrap();
}

fn edit_args<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    let mut args = vec![
        "--config", "run.toml", "edit", "--checkpoint", "ckpt/final.ckpt", "--scene", "scene.png", "--reference",
        "person.png", "--mask-bbox", "4,3,17,19",
    ];
    args.extend_from_slice(extra);
    args
}

#[test]
fn dataset_build_on_empty_input_writes_an_empty_manifest() {
    let tmp = TempDir::new().unwrap();
    fs::create_dir(tmp.path().join("videos")).unwrap();
    ok(poseedit(tmp.path(), &["dataset", "build", "--input", "videos", "--output", "out"]));
    assert_eq!(fs::read_to_string(tmp.path().join("out").join(MANIFEST_FILE)).unwrap(), "");
}

#[test]
fn dataset_build_input_errors_exit_2() {
    let tmp = TempDir::new().unwrap();
    assert_eq!(code(&poseedit(tmp.path(), &["dataset", "build", "--input", "missing", "--output", "out"])), 2);
    built_dataset(tmp.path());
    let again = poseedit(tmp.path(), &["dataset", "build", "--input", "videos", "--output", "dataset"]);
    assert_eq!(code(&again), 2, "existing manifest needs --overwrite");
    ok(poseedit(tmp.path(), &["dataset", "build", "--input", "videos", "--output", "dataset", "--overwrite"]));
}

#[test]
fn dataset_build_output_does_not_depend_on_jobs() {
    let tmp = TempDir::new().unwrap();
    built_dataset(tmp.path());
    ok(poseedit(tmp.path(), &["dataset", "build", "--input", "videos", "--output", "parallel", "--jobs", "3"]));
    let read = |d: &str| fs::read(tmp.path().join(d).join(MANIFEST_FILE)).unwrap();
    assert_eq!(read("dataset"), read("parallel"));
    let records = read_manifest(&tmp.path().join("dataset").join(MANIFEST_FILE)).unwrap();
    for r in &records {
        let mask = image::open(tmp.path().join("dataset").join(&r.mask_path)).unwrap().to_luma8();
        for (x, y, p) in mask.enumerate_pixels() {
            assert_eq!(p[0] > 0, r.mask_bbox.contains(x, y), "{} at ({x},{y})", r.pair_id);
        }
    }
}

fn copy_tree(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for e in fs::read_dir(from).unwrap() {
        let e = e.unwrap();
        if e.path().is_dir() {
            copy_tree(&e.path(), &to.join(e.file_name()));
        } else {
            fs::copy(e.path(), to.join(e.file_name())).unwrap();
        }
    }
}

#[test]
fn stub_captions_are_deterministic_and_keep_records() {
    let tmp = TempDir::new().unwrap();
    let dataset = built_dataset(tmp.path());
    let copy = tmp.path().join("copy");
    copy_tree(&dataset, &copy);
    let before = read_manifest(&dataset.join(MANIFEST_FILE)).unwrap();
    for d in ["dataset", "copy"] {
        ok(poseedit(tmp.path(), &["caption", "--manifest", &format!("{d}/{MANIFEST_FILE}"), "--stub"]));
    }
    let after = read_manifest(&dataset.join(MANIFEST_FILE)).unwrap();
    assert_eq!(after, read_manifest(&copy.join(MANIFEST_FILE)).unwrap());
    assert_eq!(after.len(), before.len());
    for (a, b) in after.iter().zip(&before) {
        assert_eq!(a.pair_id, b.pair_id);
        assert!(a.caption.as_deref().is_some_and(|c| c.ends_with('.')));
    }
    let log = fs::read_to_string(dataset.join("captions.jsonl")).unwrap();
    assert_eq!(log.lines().count(), after.len());

    let kept = poseedit(tmp.path(), &["caption", "--manifest", &format!("dataset/{MANIFEST_FILE}"), "--stub", "--no-overwrite"]);
    ok(kept);
    assert_eq!(read_manifest(&dataset.join(MANIFEST_FILE)).unwrap(), after);
}

#[test]
fn captioner_problems_exit_3_without_touching_the_manifest() {
    let tmp = TempDir::new().unwrap();
    let dataset = built_dataset(tmp.path());
    let manifest = format!("dataset/{MANIFEST_FILE}");
    let before = fs::read(dataset.join(MANIFEST_FILE)).unwrap();
    assert_eq!(code(&poseedit(tmp.path(), &["caption", "--manifest", &manifest])), 3);

    fs::write(
        tmp.path().join("unreachable.toml"),
        "[caption]\nendpoint = \"http://127.0.0.1:9/caption\"\ntimeout_secs = 2\n[caption.retry]\nmax_retries = 1\nbase_delay_ms = 1\n",
    )
    .unwrap();
    let out = poseedit(tmp.path(), &["--config", "unreachable.toml", "caption", "--manifest", &manifest]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(fs::read(dataset.join(MANIFEST_FILE)).unwrap(), before);
    assert!(!dataset.join("captions.jsonl").exists());
}

#[test]
fn train_then_edit_is_seeded_and_keeps_the_scene() {
    let tmp = TempDir::new().unwrap();
    tiny_config(tmp.path(), "");
    edit_inputs(tmp.path());
    ok(poseedit(tmp.path(), &["--config", "run.toml", "train", "--synthetic", "4", "--epochs", "2"]));
    for f in ["ckpt/final.ckpt", "ckpt/epoch_0002.ckpt", "ckpt/loss.csv", "ckpt/train_summary.json"] {
        assert!(tmp.path().join(f).is_file(), "{f}");
    }
    let csv = fs::read_to_string(tmp.path().join("ckpt/loss.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2 * 4);

    let run = |out: &str| {
        ok(poseedit(tmp.path(), &edit_args(&["--target-pose", "pose.json", "--caption", "The person waves.", "--out", out, "--overlay"])));
        image::open(tmp.path().join(out)).unwrap().to_rgb8()
    };
    let (a, b) = (run("a.png"), run("b.png"));
    assert_eq!(a, b);
    assert!(tmp.path().join("a_overlay.png").is_file());
    let scene = image::open(tmp.path().join("scene.png")).unwrap().to_rgb8();
    assert_eq!(a.dimensions(), scene.dimensions());
    for (x, y, p) in a.enumerate_pixels() {
        if !((4..17).contains(&x) && (3..19).contains(&y)) {
            assert_eq!(p, scene.get_pixel(x, y), "({x},{y})");
        }
    }
    let other_seed = poseedit(tmp.path(), &[&["--seed", "9"][..], &edit_args(&["--target-pose", "pose.json", "--out", "c.png"])].concat());
    ok(other_seed);
    assert_ne!(image::open(tmp.path().join("c.png")).unwrap().to_rgb8(), a);
}

#[test]
fn modality_mismatches_exit_5() {
    let tmp = TempDir::new().unwrap();
    tiny_config(tmp.path(), "");
    edit_inputs(tmp.path());
    ok(poseedit(tmp.path(), &["--config", "run.toml", "train", "--variant", "c1", "--synthetic", "2", "--epochs", "0"]));
    assert_eq!(code(&poseedit(tmp.path(), &edit_args(&["--caption", "The person waves."]))), 5);
    assert_eq!(code(&poseedit(tmp.path(), &edit_args(&["--target-pose", "pose.json"]))), 5);
    ok(poseedit(tmp.path(), &edit_args(&["--out", "plain.png"])));

    ok(poseedit(tmp.path(), &["--config", "run.toml", "train", "--variant", "c4", "--synthetic", "2", "--epochs", "0"]));
    assert_eq!(code(&poseedit(tmp.path(), &edit_args(&["--caption", "The person waves."]))), 5, "c4 needs a pose");
}

#[test]
fn bad_arguments_exit_2() {
    let tmp = TempDir::new().unwrap();
    tiny_config(tmp.path(), "");
    edit_inputs(tmp.path());
    ok(poseedit(tmp.path(), &["--config", "run.toml", "train", "--variant", "c1", "--synthetic", "2", "--epochs", "0"]));
    let zero_area = ["--config", "run.toml", "edit", "--scene", "scene.png", "--reference", "person.png", "--mask-bbox", "5,5,5,9"];
    let out = poseedit(tmp.path(), &zero_area);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("zero area"));
    assert_eq!(code(&poseedit(tmp.path(), &edit_args(&[]).iter().map(|a| if *a == "4,3,17,19" { "4,3,30,19" } else { a }).collect::<Vec<_>>())), 2);
    assert_eq!(code(&poseedit(tmp.path(), &["train", "--variant", "c9"])), 2);
    fs::write(tmp.path().join("broken.toml"), "[train]\ncond_dropout = 2.0\n").unwrap();
    assert_eq!(code(&poseedit(tmp.path(), &["--config", "broken.toml", "synth", "ratings", "--out", "r.csv"])), 2);
    assert_eq!(code(&poseedit(tmp.path(), &["--config", "run.toml", "train", "--manifest", "none.jsonl"])), 2);
}

#[test]
fn zero_epochs_save_the_initial_weights() {
    let tmp = TempDir::new().unwrap();
    let cfg_path = tiny_config(tmp.path(), "");
    ok(poseedit(tmp.path(), &["--config", "run.toml", "train", "--synthetic", "2", "--epochs", "0"]));
    let ckpt = load_checkpoint(&tmp.path().join("ckpt/final.ckpt")).unwrap();
    assert_eq!(ckpt.epoch, 0);
    let cfg = RunConfig::load(&cfg_path).unwrap();
    let init = UNetDenoiser::new(cfg.model.clone(), &cfg.diffusion.schedule().unwrap(), cfg.seed);
    assert_eq!(&ckpt.params, poseedit::diffusion::NoiseModel::params(&init));
    assert_eq!(fs::read_to_string(tmp.path().join("ckpt/loss.csv")).unwrap(), "step,epoch,loss\n");
}

#[test]
fn diverging_training_exits_4() {
    let tmp = TempDir::new().unwrap();
    tiny_config(tmp.path(), "[train]\nlearning_rate = 1e200\ncosine_floor = 1.0\n");
    let out = poseedit(tmp.path(), &["--config", "run.toml", "train", "--synthetic", "2", "--epochs", "5"]);
    assert_eq!(code(&out), 4, "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("ckpt/train_summary.json")).unwrap()).unwrap();
    assert!(summary["aborted_at"].is_u64());
}

fn image_dir(dir: &Path, name: &str, shift: u8) -> PathBuf {
    let d = dir.join(name);
    fs::create_dir_all(&d).unwrap();
    for i in 0..4u8 {
        RgbImage::from_fn(20, 20, |x, y| Rgb([(x as u8 * 9).wrapping_add(i * 40 + shift), (y as u8) * 11, i * 50]))
            .save(d.join(format!("img_{i}.png")))
            .unwrap();
    }
    d
}

#[test]
fn eval_scores_directories_and_reports_missing_poses() {
    let tmp = TempDir::new().unwrap();
    image_dir(tmp.path(), "real", 0);
    image_dir(tmp.path(), "same", 0);
    image_dir(tmp.path(), "shifted", 90);
    let out = poseedit(tmp.path(), &["eval", "--reference", "real", "--generated", "a=same", "--generated", "b=shifted", "--out", "e.json"]);
    ok(out);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("e.json")).unwrap()).unwrap();
    let fid_a = report["configs"]["a"]["fid"].as_f64().unwrap();
    let fid_b = report["configs"]["b"]["fid"].as_f64().unwrap();
    assert!(fid_a <= 1e-6, "{fid_a}");
    assert!(fid_b > fid_a);
    assert!(report["configs"]["a"]["pckh"].is_null());
    assert!(!report["warnings"].as_array().unwrap().is_empty());

    let pose = serde_json::to_string(&neutral_skeleton(20.0, 20.0)).unwrap();
    let lines: String = (0..4).map(|i| format!("{{\"image\":\"img_{i}.png\",\"keypoints\":{pose}}}\n")).collect();
    for d in ["real", "same"] {
        fs::write(tmp.path().join(d).join("image_poses.jsonl"), &lines).unwrap();
    }
    ok(poseedit(tmp.path(), &["eval", "--reference", "real", "--generated", "same", "--out", "p.json"]));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("p.json")).unwrap()).unwrap();
    assert_eq!(report["configs"]["same"]["pckh"]["mean"].as_f64(), Some(1.0));
}

#[test]
fn ratings_round_trip_and_bad_files_exit_6() {
    let tmp = TempDir::new().unwrap();
    ok(poseedit(tmp.path(), &["synth", "ratings", "--out", "r.csv"]));
    let out = ok(poseedit(tmp.path(), &["eval", "--ratings", "r.csv", "--out", "e.json"]));
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(table.contains("68.5%") && table.contains("N/A"), "{table}");

    fs::write(tmp.path().join("bad.csv"), "scene_id,config,question,rater_id,score\ns1,c4,identity,r1,7\n").unwrap();
    assert_eq!(code(&poseedit(tmp.path(), &["eval", "--ratings", "bad.csv"])), 6);
    fs::write(tmp.path().join("header.csv"), "scene,config\n").unwrap();
    assert_eq!(code(&poseedit(tmp.path(), &["eval", "--ratings", "header.csv"])), 6);
    assert_eq!(code(&poseedit(tmp.path(), &["eval", "--ratings", "absent.csv"])), 6);
}

#[test]
fn synth_videos_feed_the_pipeline() {
    let tmp = TempDir::new().unwrap();
    ok(poseedit(tmp.path(), &["synth", "videos", "--out", "vids"]));
    ok(poseedit(tmp.path(), &["--seed", "1", "dataset", "build", "--input", "vids", "--output", "ds"]));
    let stats: serde_json::Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("ds/stats.json")).unwrap()).unwrap();
    assert_eq!(stats["seed"], 1);
    assert_eq!(read_manifest(&tmp.path().join("ds").join(MANIFEST_FILE)).unwrap().len(), 12);
}
