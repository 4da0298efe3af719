//! Subcommand implementations. Each writes its report to `out` and its
//! artifacts to disk.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use gablab_core::audit::run_gradcheck;
use gablab_core::autodiff::{OpKind, Tensor};
use gablab_core::checkpoint::{load_checkpoint, save_checkpoint};
use gablab_core::erf::{
    central_patch_index, erf_dataset, locality_report, reinitialized, Component, ErfMap, LocalityReport,
};
use gablab_core::fit::{fit, FitProblem};
use gablab_core::gaussian_bias::gab_bias_tensor;
use gablab_core::rpe::extract_rpe_slice;
use gablab_core::train::{train, TrainReport};
use gablab_core::vit::{ViTConfig, ViTModel};

use crate::config::RunConfig;
use crate::grid::Grid;
use crate::heatmap::{read_heatmap_values, Heatmap};
use crate::images::ImageSource;
use crate::{Command, ReinitComponent, SliceComponent};

pub fn run(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::Train { config, output, csv } => cmd_train(&config, &output, csv.as_deref(), out),
        Command::Erf { checkpoint, images, output, target } => cmd_erf(&checkpoint, &images, &output, target, out),
        Command::RpeSlice { checkpoint, layer, patch, component, head, output } => {
            cmd_rpe_slice(&checkpoint, SliceRequest { layer, patch, component, head }, &output, out)
        }
        Command::Fit { input } => cmd_fit(&input, out),
        Command::Reinit { checkpoint, component, seed, outdir, images } => {
            cmd_reinit(&checkpoint, component, seed, &outdir, &images, out)
        }
        Command::Gradcheck { config, seed, corrupt_op } => {
            cmd_gradcheck(config.as_deref(), seed, corrupt_op.as_deref(), out)
        }
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() && !dir.is_dir() => {
            bail!("output directory {} does not exist (for {})", dir.display(), path.display())
        }
        _ => Ok(()),
    }
}

/// `step,loss,a_0,sigma_0,...` with one row per step, 6 decimals.
pub fn loss_csv(report: &TrainReport, num_layers: usize, with_gab: bool) -> String {
    let mut s = String::from("step,loss");
    if with_gab {
        for l in 0..num_layers {
            let _ = write!(s, ",a_{l},sigma_{l}");
        }
    }
    s.push('\n');
    for (i, loss) in report.losses.iter().enumerate() {
        let _ = write!(s, "{},{loss:.6}", i + 1);
        for (a, sigma) in &report.gab_trajectory[i] {
            let _ = write!(s, ",{a:.6},{sigma:.6}");
        }
        s.push('\n');
    }
    s
}

pub fn cmd_train(config: &Path, output: &Path, csv: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let csv_path = csv.map_or_else(|| output.with_extension("csv"), Path::to_path_buf);
    ensure_parent(output)?;
    ensure_parent(&csv_path)?;
    let mut model = ViTModel::new(cfg.model.clone(), cfg.training.seed)?;
    let report = train(&mut model, &cfg.dataset(), &cfg.training)?;
    save_checkpoint(&model, output)?;
    fs::write(&csv_path, loss_csv(&report, cfg.model.num_layers, cfg.model.use_gab))
        .with_context(|| format!("cannot write {}", csv_path.display()))?;
    writeln!(out, "steps={}", report.losses.len())?;
    if let (Some(first), Some(last)) = (report.losses.first(), report.losses.last()) {
        writeln!(out, "initial_loss={first:.6}")?;
        writeln!(out, "final_loss={last:.6}")?;
    }
    if let Some(params) = report.gab_trajectory.last() {
        for (l, (a, sigma)) in params.iter().enumerate() {
            writeln!(out, "a_{l}={a:.6}")?;
            writeln!(out, "sigma_{l}={sigma:.6}")?;
        }
    }
    writeln!(out, "checkpoint={}", output.display())?;
    writeln!(out, "csv={}", csv_path.display())?;
    Ok(())
}

fn load_model(path: &Path) -> Result<ViTModel> {
    load_checkpoint(path).with_context(|| format!("cannot load checkpoint {}", path.display()))
}

pub fn write_locality(out: &mut dyn Write, prefix: &str, report: &LocalityReport) -> Result<()> {
    writeln!(out, "{prefix}self_mass={:.6}", report.self_mass)?;
    writeln!(out, "{prefix}adjacent_mass={:.6}", report.adjacent_mass)?;
    writeln!(out, "{prefix}far_mass={:.6}", report.far_mass)?;
    match report.adjacency_ratio {
        Some(r) => writeln!(out, "{prefix}adjacency_ratio={r:.6}")?,
        None => writeln!(out, "{prefix}adjacency_ratio=undefined")?,
    }
    Ok(())
}

fn erf_heatmap(map: &ErfMap) -> Result<Heatmap> {
    Ok(Heatmap {
        grid: Grid::new(map.height, map.width, map.values.clone())?,
        target_patch: Some(map.target_patch),
        sample_count: Some(map.sample_count),
    })
}

fn resolve_target(cfg: &ViTConfig, target: Option<usize>) -> Result<usize> {
    let n = cfg.num_patches();
    match target {
        Some(t) if t >= n => bail!("target patch {t} out of range: valid patches are 0..={}", n - 1),
        Some(t) => Ok(t),
        None => Ok(central_patch_index(cfg.grid_h(), cfg.grid_w())),
    }
}

pub fn cmd_erf(
    checkpoint: &Path,
    images: &str,
    output: &Path,
    target: Option<usize>,
    out: &mut dyn Write,
) -> Result<()> {
    let model = load_model(checkpoint)?;
    let cfg = model.config().clone();
    let source: ImageSource = images.parse()?;
    let target = resolve_target(&cfg, target)?;
    ensure_parent(output)?;
    let imgs = source.load(cfg.image_shape())?;
    let map = erf_dataset(&model, imgs, target)?;
    let norm = erf_heatmap(&map)?.write(output)?;
    writeln!(out, "target_patch={target}")?;
    writeln!(out, "sample_count={}", map.sample_count)?;
    writeln!(out, "min={:.6}", norm.min)?;
    writeln!(out, "max={:.6}", norm.max)?;
    match locality_report(&map) {
        Ok(report) => write_locality(out, "", &report)?,
        Err(e) => writeln!(out, "locality=unavailable ({e})")?,
    }
    Ok(())
}

#[derive(Clone, Copy, Debug)]
pub struct SliceRequest {
    pub layer: usize,
    pub patch: usize,
    pub component: SliceComponent,
    /// One head of the relative bias; `None` averages over heads.
    pub head: Option<usize>,
}

/// The `[grid_h x grid_w]` bias slice of `patch` in `layer`.
pub fn bias_slice(model: &ViTModel, request: SliceRequest) -> Result<Tensor> {
    let SliceRequest { layer, patch, component, head } = request;
    let cfg = model.config();
    let (gh, gw, n) = (cfg.grid_h(), cfg.grid_w(), cfg.num_patches());
    if layer >= cfg.num_layers {
        bail!("layer {layer} out of range: valid layers are 0..={}", cfg.num_layers.saturating_sub(1));
    }
    if patch >= n {
        bail!("patch {patch} out of range: valid patches are 0..={}", n - 1);
    }
    let rpe = || -> Result<Tensor> {
        let rpe = model.rpe.as_ref().ok_or_else(|| anyhow!("model has no relative position bias"))?;
        let bias = rpe.materialize_tensor(layer)?;
        let bias = match head {
            Some(h) if h >= cfg.num_heads => {
                bail!("head {h} out of range: valid heads are 0..={}", cfg.num_heads - 1)
            }
            Some(h) => Tensor::new(&[1, n, n], bias.data()[h * n * n..(h + 1) * n * n].to_vec())?,
            None => bias,
        };
        Ok(extract_rpe_slice(&bias, patch, gh, gw)?)
    };
    let gab = || -> Result<Tensor> {
        let params = model.gab.as_ref().ok_or_else(|| anyhow!("model has no Gaussian attention bias"))?;
        let (a, sigma) = params.get(layer);
        let bias = gab_bias_tensor(a, sigma, gh, gw)?.reshape(&[1, n, n])?;
        Ok(extract_rpe_slice(&bias, patch, gh, gw)?)
    };
    match component {
        SliceComponent::Rpe => rpe(),
        SliceComponent::Gab => gab(),
        SliceComponent::Both => {
            let (r, g) =
                (model.rpe.as_ref().map(|_| rpe()).transpose()?, model.gab.as_ref().map(|_| gab()).transpose()?);
            match (r, g) {
                (Some(mut r), Some(g)) => {
                    r.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
                    Ok(r)
                }
                (Some(only), None) | (None, Some(only)) => Ok(only),
                (None, None) => bail!("model has neither a relative position bias nor a Gaussian attention bias"),
            }
        }
    }
}

pub fn cmd_rpe_slice(checkpoint: &Path, request: SliceRequest, output: &Path, out: &mut dyn Write) -> Result<()> {
    let model = load_model(checkpoint)?;
    let slice = bias_slice(&model, request)?;
    ensure_parent(output)?;
    let [h, w] = *slice.shape() else { unreachable!("slices are 2-D") };
    let heatmap =
        Heatmap { grid: Grid::new(h, w, slice.into_data())?, target_patch: Some(request.patch), sample_count: None };
    let norm = heatmap.write(output)?;
    writeln!(out, "min={:.6}", norm.min)?;
    writeln!(out, "max={:.6}", norm.max)?;
    writeln!(out, "constant={}", norm.constant)?;
    Ok(())
}

/// Grid from a raw grid file or an exported graymap.
pub fn read_grid(path: &Path) -> Result<Grid> {
    let bytes = fs::read(path).with_context(|| format!("cannot read {}", path.display()))?;
    if bytes.starts_with(b"P5") {
        read_heatmap_values(path)
    } else {
        let text =
            String::from_utf8(bytes).with_context(|| format!("{} is neither a graymap nor text", path.display()))?;
        Grid::parse(&text).with_context(|| format!("cannot parse {}", path.display()))
    }
}

pub fn cmd_fit(input: &Path, out: &mut dyn Write) -> Result<()> {
    let grid = read_grid(input)?;
    let result = fit(&FitProblem::from_f32(grid.height, grid.width, &grid.values))?;
    write!(out, "{}", result.to_record())?;
    Ok(())
}

pub fn cmd_reinit(
    checkpoint: &Path,
    component: ReinitComponent,
    seed: u64,
    outdir: &Path,
    images: &str,
    out: &mut dyn Write,
) -> Result<()> {
    let model = load_model(checkpoint)?;
    let component = match component {
        ReinitComponent::Ape => Component::Ape,
        ReinitComponent::Rpe => Component::Rpe,
        ReinitComponent::Gab => Component::Gab,
    };
    let changed = reinitialized(&model, component, seed)?;
    let cfg = model.config().clone();
    let imgs = images.parse::<ImageSource>()?.load(cfg.image_shape())?;
    let target = central_patch_index(cfg.grid_h(), cfg.grid_w());
    fs::create_dir_all(outdir).with_context(|| format!("cannot create {}", outdir.display()))?;
    let mut record: Vec<u8> = Vec::new();
    writeln!(record, "component={}", format!("{component:?}").to_lowercase())?;
    writeln!(record, "seed={seed}")?;
    for (name, m) in [("before", &model), ("after", &changed)] {
        let map = erf_dataset(m, imgs.iter().cloned(), target)?;
        erf_heatmap(&map)?.write(&outdir.join(format!("{name}.pgm")))?;
        let report = locality_report(&map)?;
        write_locality(&mut record, &format!("{name}_"), &report)?;
    }
    let path: PathBuf = outdir.join("comparison.txt");
    fs::write(&path, &record).with_context(|| format!("cannot write {}", path.display()))?;
    out.write_all(&record)?;
    Ok(())
}

pub fn cmd_gradcheck(config: Option<&Path>, seed: u64, corrupt: Option<&str>, out: &mut dyn Write) -> Result<()> {
    let model_cfg = match config {
        Some(p) => RunConfig::load(p)?.model,
        None => ViTConfig::default(),
    };
    let fault =
        corrupt.map(|name| OpKind::from_name(name).ok_or_else(|| anyhow!("unknown op {name:?}"))).transpose()?;
    let report = run_gradcheck(&model_cfg, seed, fault)?;
    for c in &report.checks {
        writeln!(
            out,
            "{} max_rel_error={:.6} max_abs_error={:.6} evaluated={} status={}",
            c.name,
            c.max_rel_error,
            c.max_abs_error,
            c.evaluated,
            if c.passed { "pass" } else { "FAIL" }
        )?;
    }
    let failed: Vec<&str> = report.failures().map(|c| c.name.as_str()).collect();
    if !failed.is_empty() {
        bail!("gradient check failed: {}", failed.join(", "));
    }
    Ok(())
}
