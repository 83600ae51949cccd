use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stymam::config::Profile;
use stymam::data;
use stymam::discriminator::Discriminator;
use stymam::generator::Generator;
use stymam::training;
use stymam::Tensor;

fn stymam(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stymam"))
        .args(args)
        .env_remove("STYMAM_SEED")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn wave(h: usize, w: usize, phase: f64) -> Tensor {
    Tensor::from_fn([h, w, 3], |i| {
        let (y, x, c) = ((i / 3) / w, (i / 3) % w, i % 3);
        0.8 * (0.3 * x as f64 + 0.2 * y as f64 + phase + c as f64).sin()
    })
}

fn write_dataset(dir: &Path, n: usize, size: usize, phase: f64) {
    fs::create_dir_all(dir).unwrap();
    for i in 0..n {
        data::save_image(&dir.join(format!("{i}.ppm")), &wave(size, size, phase + i as f64)).unwrap();
    }
}

fn desk_checkpoint(dir: &Path, zero: bool) -> PathBuf {
    let mut g = Generator::new(Profile::Desk.generator(), 3).unwrap();
    if zero {
        for t in g.params.tensors_mut() {
            t.data_mut().fill(0.0);
        }
    }
    let d = Discriminator::new(Profile::Desk.discriminator(), 4).unwrap();
    let path = dir.join(if zero { "zero.ckpt" } else { "model.ckpt" });
    training::save_models(&path, &g, &d).unwrap();
    path
}

#[test]
fn missing_config_is_a_config_error_naming_the_path() {
    let o = stymam(&["train", "--config", "/definitely/not/here.cfg"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("/definitely/not/here.cfg"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "max_steps = 1\nlearning_rate = 0.1\n").unwrap();
    let o = stymam(&["train", "--config", p(&cfg)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("learning_rate"));
    assert!(stderr(&o).contains("line 2"));
}

#[test]
fn bad_flags_are_usage_errors() {
    assert_eq!(code(&stymam(&["scan-viz", "--height", "4"])), 2);
    assert_eq!(code(&stymam(&["gradcheck", "--profile", "huge"])), 2);
    assert_eq!(code(&stymam(&["frobnicate"])), 2);
}

#[test]
fn scan_viz_matches_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let prefix = dir.path().join("order");
    let o = stymam(&[
        "scan-viz",
        "--height",
        "4",
        "--width",
        "4",
        "--strip",
        "2",
        "--out",
        p(&prefix),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(dir.path().join("order.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("t,row,col"));
    let flat: Vec<usize> = lines
        .enumerate()
        .map(|(t, l)| {
            let f: Vec<usize> = l.split(',').map(|x| x.parse().unwrap()).collect();
            assert_eq!(f[0], t);
            f[1] * 4 + f[2]
        })
        .collect();
    assert_eq!(flat, [0, 4, 5, 1, 2, 6, 7, 3, 11, 15, 14, 10, 9, 13, 12, 8]);

    let img = image::open(dir.path().join("order.pgm")).unwrap().to_luma8();
    assert_eq!(img.dimensions(), (4, 4));
    assert_eq!(img.get_pixel(0, 0).0[0], 0);
    assert_eq!(img.get_pixel(0, 2).0[0], 255);
    assert_eq!(img.get_pixel(3, 0).0[0], 119);
}

#[test]
fn scan_viz_pgm_is_width_by_height_and_single_row_is_monotone() {
    let dir = tempfile::tempdir().unwrap();
    let prefix = dir.path().join("row");
    let o = stymam(&[
        "scan-viz",
        "--height",
        "1",
        "--width",
        "9",
        "--strip",
        "1",
        "--out",
        p(&prefix),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let img = image::open(dir.path().join("row.pgm")).unwrap().to_luma8();
    assert_eq!(img.dimensions(), (9, 1));
    let row: Vec<u8> = (0..9).map(|x| img.get_pixel(x, 0).0[0]).collect();
    assert!(row.windows(2).all(|w| w[0] < w[1]), "{row:?}");

    let prefix = dir.path().join("tall");
    let o = stymam(&[
        "scan-viz",
        "--height",
        "6",
        "--width",
        "3",
        "--strip",
        "2",
        "--orientation",
        "v",
        "--out",
        p(&prefix),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let img = image::open(dir.path().join("tall.pgm")).unwrap().to_luma8();
    assert_eq!(img.dimensions(), (3, 6));
    let csv = fs::read_to_string(dir.path().join("tall.csv")).unwrap();
    assert_eq!(csv.lines().count(), 19);
}

#[test]
fn stylize_is_deterministic_and_preserves_odd_extents() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = desk_checkpoint(dir.path(), false);
    let input = dir.path().join("in.ppm");
    data::save_image(&input, &wave(30, 30, 0.0)).unwrap();
    let outs: Vec<PathBuf> = (0..2).map(|i| dir.path().join(format!("out{i}.ppm"))).collect();
    for out in &outs {
        let o = stymam(&["stylize", "--checkpoint", p(&ckpt), "--in", p(&input), "--out", p(out)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    assert_eq!(fs::read(&outs[0]).unwrap(), fs::read(&outs[1]).unwrap());
    assert_eq!(data::load_image(&outs[0]).unwrap().shape(), &[30, 30, 3]);

    let sized = dir.path().join("sized.png");
    let o = stymam(&[
        "stylize",
        "--checkpoint",
        p(&ckpt),
        "--in",
        p(&input),
        "--out",
        p(&sized),
        "--size",
        "24",
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(data::load_image(&sized).unwrap().shape(), &[24, 24, 3]);
}

#[test]
fn zero_weight_generator_gives_mid_gray() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = desk_checkpoint(dir.path(), true);
    let input = dir.path().join("in.ppm");
    data::save_image(&input, &wave(16, 20, 1.0)).unwrap();
    let out = dir.path().join("out.ppm");
    let o = stymam(&["stylize", "--checkpoint", p(&ckpt), "--in", p(&input), "--out", p(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let img = image::open(&out).unwrap().to_rgb8();
    assert_eq!(img.dimensions(), (20, 16));
    assert!(img.as_raw().iter().all(|&b| b == 128));
}

#[test]
fn checkpoint_failures_exit_with_checkpoint_code() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("in.ppm");
    data::save_image(&input, &wave(16, 16, 0.0)).unwrap();
    let out = dir.path().join("out.ppm");
    let run = |ckpt: &Path| stymam(&["stylize", "--checkpoint", p(ckpt), "--in", p(&input), "--out", p(&out)]);

    let mut wide = Profile::Desk.generator();
    wide.channels = 16;
    let g = Generator::new(wide, 1).unwrap();
    let d = Discriminator::new(Profile::Desk.discriminator(), 1).unwrap();
    let mismatched = dir.path().join("wide.ckpt");
    training::save_models(&mismatched, &g, &d).unwrap();
    let o = run(&mismatched);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("shape"), "{}", stderr(&o));

    let garbage = dir.path().join("garbage.ckpt");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    assert_eq!(code(&run(&garbage)), 4);
    assert_eq!(code(&run(&dir.path().join("absent.ckpt"))), 4);
    assert!(!out.exists());
}

#[test]
fn stylize_unreadable_image_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = desk_checkpoint(dir.path(), false);
    let input = dir.path().join("in.png");
    fs::write(&input, b"nope").unwrap();
    let out = dir.path().join("out.ppm");
    let o = stymam(&["stylize", "--checkpoint", p(&ckpt), "--in", p(&input), "--out", p(&out)]);
    assert_eq!(code(&o), 3);
}

#[test]
fn selftest_passes_and_detects_mutation() {
    let o = stymam(&["selftest"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("PASS ssm-oracle"));

    let o = stymam(&["selftest", "--mutate", "ssm-oracle"]);
    assert_eq!(code(&o), 1);
    let out = stdout(&o);
    assert!(out.contains("FAIL ssm-oracle"));
    assert!(out.lines().last().unwrap().contains("ssm-oracle"));
}

#[test]
fn gradcheck_desk_passes() {
    let o = stymam(&["gradcheck", "--profile", "desk"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).contains("grad-end-to-end"));
}

fn train_config(dir: &Path, extra: &str) -> PathBuf {
    let cfg = dir.join("train.cfg");
    fs::write(
        &cfg,
        format!(
            "# tiny run\nprofile = desk\nimage_size = 16\nmax_steps = 3\nbatch_size = 1\n\
             content_dir = content\nstyle_dir = style\nout_dir = run\n{extra}"
        ),
    )
    .unwrap();
    cfg
}

#[test]
fn train_writes_one_metrics_row_per_step() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&dir.path().join("content"), 1, 16, 0.0);
    write_dataset(&dir.path().join("style"), 1, 16, 2.0);
    let cfg = train_config(dir.path(), "checkpoint_every = 2\n");
    let o = stymam(&["train", "--config", p(&cfg), "--seed", "11"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let run = dir.path().join("run");
    let csv = fs::read_to_string(run.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], training::METRICS_HEADER);
    assert_eq!(lines.len(), 4);
    for (i, line) in lines[1..].iter().enumerate() {
        let f: Vec<f64> = line.split(',').map(|x| x.parse().unwrap()).collect();
        assert_eq!(f[0] as usize, i + 1);
        assert!(f.iter().all(|v| v.is_finite()));
    }
    assert!(run.join("checkpoint-000002.ckpt").exists());
    assert!(run.join("final.ckpt").exists());

    let styled = dir.path().join("styled.ppm");
    let content = dir.path().join("content").join("0.ppm");
    let o = stymam(&[
        "stylize",
        "--checkpoint",
        p(&run.join("final.ckpt")),
        "--in",
        p(&content),
        "--out",
        p(&styled),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn seed_flag_and_environment_drive_training() {
    let dir = tempfile::tempdir().unwrap();
    write_dataset(&dir.path().join("content"), 2, 16, 0.0);
    write_dataset(&dir.path().join("style"), 2, 16, 2.0);
    let cfg = train_config(dir.path(), "max_steps = 2\n");
    let metrics = |envseed: Option<&str>, flag: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_stymam"));
        cmd.args(["train", "--config", p(&cfg)]).env_remove("STYMAM_SEED");
        if let Some(s) = envseed {
            cmd.env("STYMAM_SEED", s);
        }
        if let Some(s) = flag {
            cmd.args(["--seed", s]);
        }
        let o = cmd.output().unwrap();
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        fs::read_to_string(dir.path().join("run/metrics.csv")).unwrap()
    };
    let env5 = metrics(Some("5"), None);
    assert_eq!(env5, metrics(None, Some("5")));
    assert_eq!(env5, metrics(Some("9"), Some("5")));
    assert_ne!(env5, metrics(Some("9"), None));

    let mut cmd = Command::new(env!("CARGO_BIN_EXE_stymam"));
    let o = cmd
        .args(["train", "--config", p(&cfg)])
        .env("STYMAM_SEED", "abc")
        .output()
        .unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn empty_data_directory_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    fs::create_dir_all(dir.path().join("content")).unwrap();
    write_dataset(&dir.path().join("style"), 1, 16, 0.0);
    let cfg = train_config(dir.path(), "");
    let o = stymam(&["train", "--config", p(&cfg)]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("content"));
}
