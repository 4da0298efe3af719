use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gablab::grid::Grid;
use gablab_core::autodiff::OpKind;
use gablab_core::checkpoint::{load_checkpoint, save_checkpoint};
use gablab_core::erf::{central_patch_index, locality_report, ErfMap};
use gablab_core::rpe::RpeKind;
use gablab_core::vit::{ViTConfig, ViTModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tempfile::TempDir;

const MINIMAL: &str = "[training]\nsteps = 10\nbatch_size = 4\n";

fn gablab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gablab")).args(args).output().expect("spawn gablab")
}

fn ok(args: &[&str]) -> String {
    let out = gablab(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fails(args: &[&str]) -> String {
    let out = gablab(args);
    assert!(!out.status.success(), "{args:?} unexpectedly succeeded");
    String::from_utf8(out.stderr).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn key(text: &str, name: &str) -> String {
    text.lines()
        .find_map(|l| l.strip_prefix(name).and_then(|r| r.strip_prefix('=')))
        .unwrap_or_else(|| panic!("no {name} in {text}"))
        .to_string()
}

fn grid_file(p: &Path) -> Grid {
    Grid::parse(&fs::read_to_string(p.with_extension("grid")).unwrap()).unwrap()
}

/// 16x16 images, 4x4 patch grid.
fn grid4_config(rpe_kind: RpeKind, use_gab: bool) -> ViTConfig {
    ViTConfig { image_height: 16, image_width: 16, embed_dim: 16, rpe_kind, use_gab, ..ViTConfig::default() }
}

fn saved(dir: &Path, name: &str, cfg: ViTConfig) -> PathBuf {
    let path = dir.join(name);
    save_checkpoint(&ViTModel::new(cfg, 1).unwrap(), &path).unwrap();
    path
}

fn trained(dir: &Path) -> PathBuf {
    let cfg = dir.join("run.toml");
    fs::write(&cfg, MINIMAL).unwrap();
    let ckpt = dir.join("model.ckpt");
    ok(&["train", "--config", s(&cfg), "--output", s(&ckpt)]);
    ckpt
}

#[test]
fn train_writes_checkpoint_and_one_csv_row_per_step() {
    let dir = TempDir::new().unwrap();
    let ckpt = trained(dir.path());
    assert!(load_checkpoint(&ckpt).is_ok());
    let csv = fs::read_to_string(ckpt.with_extension("csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,loss,a_0,sigma_0,a_1,sigma_1");
    assert_eq!(lines.len(), 11);
    assert!(lines[10].starts_with("10,"));
    assert!(lines[1].split(',').skip(1).all(|v| v.split('.').nth(1).is_some_and(|d| d.len() == 6)));
}

#[test]
fn train_rejects_missing_output_directory() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, MINIMAL).unwrap();
    let missing = dir.path().join("nowhere");
    let err = fails(&["train", "--config", s(&cfg), "--output", s(&missing.join("m.ckpt"))]);
    assert!(err.contains(s(&missing)), "{err}");
}

#[test]
fn train_reports_config_line() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "[training]\nsteps = 10\nlearning_rate = -1.0\n").unwrap();
    let err = fails(&["train", "--config", s(&cfg), "--output", s(&dir.path().join("m.ckpt"))]);
    assert!(err.contains("line 3"), "{err}");
}

#[test]
fn same_seed_gives_identical_csv() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let (ca, cb) = (trained(a.path()), trained(b.path()));
    assert_eq!(fs::read(ca.with_extension("csv")).unwrap(), fs::read(cb.with_extension("csv")).unwrap());
    assert_eq!(fs::read(ca).unwrap(), fs::read(cb).unwrap());
}

#[test]
fn erf_single_image_and_repeat_runs_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let ckpt = saved(dir.path(), "m.ckpt", grid4_config(RpeKind::RelPosMlp, true));
    let one = dir.path().join("one.pgm");
    let out = ok(&["erf", s(&ckpt), "--images", "noise:7:1", "--output", s(&one)]);
    assert_eq!(key(&out, "sample_count"), "1");
    assert!(fs::read(&one).unwrap().starts_with(b"P5\n16 16\n65535\n"));

    let (a, b) = (dir.path().join("a.pgm"), dir.path().join("b.pgm"));
    let first = ok(&["erf", s(&ckpt), "--images", "noise:7:64", "--output", s(&a)]);
    let second = ok(&["erf", s(&ckpt), "--images", "noise:7:64", "--output", s(&b)]);
    assert_eq!(first, second);
    for ext in ["pgm", "meta", "grid"] {
        assert_eq!(fs::read(a.with_extension(ext)).unwrap(), fs::read(b.with_extension(ext)).unwrap(), "{ext}");
    }
}

#[test]
fn printed_adjacency_ratio_matches_exported_grid() {
    let dir = TempDir::new().unwrap();
    let ckpt = saved(dir.path(), "m.ckpt", grid4_config(RpeKind::RelPosBias, true));
    let out_path = dir.path().join("erf.pgm");
    let out = ok(&["erf", s(&ckpt), "--images", "noise:3:16", "--output", s(&out_path)]);
    let grid = grid_file(&out_path);
    let cfg = load_checkpoint(&ckpt).unwrap().config().clone();
    let map = ErfMap {
        height: grid.height,
        width: grid.width,
        values: grid.values,
        target_patch: central_patch_index(4, 4),
        sample_count: 16,
        config: cfg,
    };
    let offline = locality_report(&map).unwrap();
    assert_eq!(key(&out, "adjacency_ratio"), format!("{:.6}", offline.adjacency_ratio.unwrap()));
    assert_eq!(key(&out, "far_mass"), format!("{:.6}", offline.far_mass));
}

#[test]
fn erf_on_small_grid_skips_locality() {
    let dir = TempDir::new().unwrap();
    let ckpt = saved(dir.path(), "m.ckpt", ViTConfig::default());
    let out = ok(&["erf", s(&ckpt), "--images", "noise:1:2", "--output", s(&dir.path().join("e.pgm"))]);
    assert!(key(&out, "locality").starts_with("unavailable"), "{out}");
}

#[test]
fn erf_rejects_mismatched_images() {
    let dir = TempDir::new().unwrap();
    let ckpt = saved(dir.path(), "m.ckpt", ViTConfig::default());
    let imgs = dir.path().join("imgs");
    fs::create_dir(&imgs).unwrap();
    let mut bytes = b"P5\n4 4\n255\n".to_vec();
    bytes.extend([0u8; 16]);
    fs::write(imgs.join("a.pgm"), bytes).unwrap();
    let err = fails(&["erf", s(&ckpt), "--images", s(&imgs), "--output", s(&dir.path().join("e.pgm"))]);
    assert!(err.contains("model expects"), "{err}");
}

#[test]
fn gab_slice_peaks_at_central_cell() {
    let dir = TempDir::new().unwrap();
    let ckpt = saved(dir.path(), "m.ckpt", grid4_config(RpeKind::RelPosMlp, true));
    let centre = central_patch_index(4, 4);
    let out_path = dir.path().join("gab.pgm");
    let patch = centre.to_string();
    ok(&["rpe-slice", s(&ckpt), "--layer", "1", "--patch", &patch, "--component", "gab", "--output", s(&out_path)]);
    let grid = grid_file(&out_path);
    let peak = grid.values.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
    assert_eq!(peak, centre);
}

#[test]
fn zero_table_slice_is_flagged_constant() {
    let dir = TempDir::new().unwrap();
    let ckpt = saved(dir.path(), "m.ckpt", grid4_config(RpeKind::RelPosBias, false));
    let out_path = dir.path().join("rpe.pgm");
    let out =
        ok(&["rpe-slice", s(&ckpt), "--layer", "0", "--patch", "5", "--component", "rpe", "--output", s(&out_path)]);
    assert_eq!(key(&out, "constant"), "true");
    let meta = fs::read_to_string(out_path.with_extension("meta")).unwrap();
    assert!(meta.contains("constant=true"), "{meta}");
    let pgm = fs::read(&out_path).unwrap();
    assert!(pgm[pgm.len() - 32..].iter().all(|&b| b == 0));
}

#[test]
fn both_is_sum_of_components() {
    let dir = TempDir::new().unwrap();
    let ckpt = saved(dir.path(), "m.ckpt", grid4_config(RpeKind::RelPosMlp, true));
    let slice = |component: &str| {
        let p = dir.path().join(format!("{component}.pgm"));
        ok(&["rpe-slice", s(&ckpt), "--layer", "0", "--patch", "6", "--component", component, "--output", s(&p)]);
        grid_file(&p).values
    };
    let (rpe, gab, both) = (slice("rpe"), slice("gab"), slice("both"));
    for i in 0..16 {
        assert!((rpe[i] + gab[i] - both[i]).abs() <= 1e-6, "cell {i}");
    }
}

#[test]
fn slice_rejects_out_of_range_indices() {
    let dir = TempDir::new().unwrap();
    let ckpt = saved(dir.path(), "m.ckpt", grid4_config(RpeKind::RelPosMlp, true));
    let out = dir.path().join("x.pgm");
    let err = fails(&["rpe-slice", s(&ckpt), "--layer", "2", "--patch", "0", "--output", s(&out)]);
    assert!(err.contains("0..=1"), "{err}");
    let err = fails(&["rpe-slice", s(&ckpt), "--layer", "0", "--patch", "16", "--output", s(&out)]);
    assert!(err.contains("0..=15"), "{err}");
}

#[test]
fn slice_of_absent_component_fails() {
    let dir = TempDir::new().unwrap();
    let ckpt = saved(dir.path(), "m.ckpt", grid4_config(RpeKind::None, false));
    let out = dir.path().join("x.pgm");
    for component in ["rpe", "gab", "both"] {
        fails(&["rpe-slice", s(&ckpt), "--layer", "0", "--patch", "0", "--component", component, "--output", s(&out)]);
    }
}

#[test]
fn fit_recovers_synthetic_sigma() {
    let dir = TempDir::new().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (h, w) = (41, 41);
    let values: Vec<f32> = (0..h * w)
        .map(|i| {
            let (y, x) = ((i / w) as f32 - 20.0, (i % w) as f32 - 20.0);
            (-(x * x + y * y) / 50.0).exp() + rng.random_range(-1e-5..1e-5)
        })
        .collect();
    let path = dir.path().join("g.grid");
    fs::write(&path, Grid::new(h, w, values).unwrap().to_text()).unwrap();
    let out = ok(&["fit", s(&path)]);
    let keys: Vec<&str> = out.lines().map(|l| l.split('=').next().unwrap()).collect();
    assert_eq!(
        keys,
        ["r_squared", "sigma_x", "sigma_y", "amplitude", "center_x", "center_y", "converged", "iterations"]
    );
    for k in ["sigma_x", "sigma_y"] {
        let v: f64 = key(&out, k).parse().unwrap();
        assert!((v - 5.0).abs() <= 1e-3, "{k} = {v}");
    }
    assert!(key(&out, "r_squared").parse::<f64>().unwrap() >= 0.999);
}

#[test]
fn fit_reads_exported_heatmaps() {
    let dir = TempDir::new().unwrap();
    let ckpt = saved(dir.path(), "m.ckpt", grid4_config(RpeKind::None, true));
    let p = dir.path().join("gab.pgm");
    ok(&["rpe-slice", s(&ckpt), "--layer", "0", "--patch", "5", "--component", "gab", "--output", s(&p)]);
    let from_pgm = ok(&["fit", s(&p)]);
    let from_grid = ok(&["fit", s(&p.with_extension("grid"))]);
    let cx = |t: &str| key(t, "center_x").parse::<f64>().unwrap();
    assert!((cx(&from_pgm) - 1.0).abs() < 1e-3 && (cx(&from_grid) - 1.0).abs() < 1e-3);
}

#[test]
fn fit_rejects_constant_grid() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("c.grid");
    fs::write(&path, Grid::new(5, 5, vec![0.5; 25]).unwrap().to_text()).unwrap();
    let err = fails(&["fit", s(&path)]);
    assert!(err.contains("R² undefined for constant input"), "{err}");
}

#[test]
fn reinit_zero_table_leaves_erf_unchanged() {
    let dir = TempDir::new().unwrap();
    let ckpt = saved(dir.path(), "m.ckpt", grid4_config(RpeKind::RelPosBias, false));
    let outdir = dir.path().join("cmp");
    let out = ok(&["reinit", s(&ckpt), "--component", "rpe", "--outdir", s(&outdir), "--images", "noise:2:8"]);
    assert_eq!(fs::read(outdir.join("before.pgm")).unwrap(), fs::read(outdir.join("after.pgm")).unwrap());
    assert_eq!(key(&out, "before_adjacency_ratio"), key(&out, "after_adjacency_ratio"));
    assert_eq!(fs::read_to_string(outdir.join("comparison.txt")).unwrap(), out);
}

#[test]
fn reinit_same_seed_repeats() {
    let dir = TempDir::new().unwrap();
    let ckpt = saved(dir.path(), "m.ckpt", grid4_config(RpeKind::RelPosMlp, true));
    let run = |name: &str| {
        let outdir = dir.path().join(name);
        let out = ok(&[
            "reinit",
            s(&ckpt),
            "--component",
            "gab",
            "--seed",
            "9",
            "--outdir",
            s(&outdir),
            "--images",
            "noise:2:8",
        ]);
        (out, fs::read(outdir.join("after.pgm")).unwrap())
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn reinit_absent_component_fails() {
    let dir = TempDir::new().unwrap();
    let ckpt = saved(dir.path(), "m.ckpt", grid4_config(RpeKind::None, false));
    let err = fails(&["reinit", s(&ckpt), "--component", "gab", "--outdir", s(&dir.path().join("o"))]);
    assert!(err.contains("no Gaussian attention bias"), "{err}");
}

#[test]
fn gradcheck_passes_and_lists_every_op_once() {
    let out = ok(&["gradcheck"]);
    for op in OpKind::ALL {
        let prefix = format!("op:{} ", op.name());
        assert_eq!(out.lines().filter(|l| l.starts_with(&prefix)).count(), 1, "{op}");
    }
    for check in ["gab_amplitude", "gab_sigma", "input_gradient"] {
        assert!(out.lines().any(|l| l.starts_with(check)), "{check}");
    }
    assert!(out.lines().all(|l| l.ends_with("status=pass")));
}

#[test]
fn corrupted_backward_is_named() {
    for op in ["softmax", "gather"] {
        let out = gablab(&["gradcheck", "--corrupt-op", op]);
        assert!(!out.status.success());
        let err = String::from_utf8(out.stderr).unwrap();
        assert!(err.contains(&format!("op:{op}")), "{err}");
        let stdout = String::from_utf8(out.stdout).unwrap();
        assert!(stdout.contains(&format!("op:{op} ")) && stdout.contains("status=FAIL"));
    }
}

#[test]
fn gradcheck_rejects_oversized_config() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("big.toml");
    fs::write(&cfg, "[model]\nimage_height = 32\nimage_width = 32\nembed_dim = 512\nnum_heads = 8\n").unwrap();
    let err = fails(&["gradcheck", "--config", s(&cfg)]);
    assert!(err.contains("4096"), "{err}");
}

#[test]
fn per_head_slices_average_to_default_slice() {
    let dir = TempDir::new().unwrap();
    let ckpt = saved(dir.path(), "m.ckpt", grid4_config(RpeKind::RelPosMlp, false));
    let slice = |head: Option<&str>| {
        let p = dir.path().join(format!("h{}.pgm", head.unwrap_or("avg")));
        let mut args =
            vec!["rpe-slice", s(&ckpt), "--layer", "1", "--patch", "9", "--component", "rpe", "--output", s(&p)];
        args.extend(head.map(|h| ["--head", h]).into_iter().flatten());
        ok(&args);
        grid_file(&p).values
    };
    let (h0, h1, avg) = (slice(Some("0")), slice(Some("1")), slice(None));
    assert_ne!(h0, h1);
    for i in 0..16 {
        assert!(((h0[i] + h1[i]) / 2.0 - avg[i]).abs() <= 1e-6, "cell {i}");
    }
    let err = fails(&[
        "rpe-slice",
        s(&ckpt),
        "--layer",
        "0",
        "--patch",
        "0",
        "--head",
        "2",
        "--output",
        s(&dir.path().join("x.pgm")),
    ]);
    assert!(err.contains("0..=1"), "{err}");
}
