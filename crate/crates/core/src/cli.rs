//! The `c2p` command line.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::datasets::{build_pools_for_manifest, generate_dataset, write_atomic, DatasetManifest, MANIFEST_NAME};
use crate::error::{invalid, Error, Result};
use crate::network::AttentionKind;
use crate::trainer::{
    evaluate, evaluate_network, read_logs, run as run_training, Checkpoint, EvalReport, EpochLog, RegularizerMode,
    TrainConfig, Trainer, LOG_NAME,
};

#[derive(Debug, Parser)]
#[command(name = "c2p", version, about = "Synthetic-haze dehazing with curricular contrastive regularization")]
pub struct Cli {
    /// TOML training configuration.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate synthetic hazy/clear pairs and a manifest.
    Synth(SynthArgs),
    /// Build consensual-negative pools for a manifest.
    Negatives(NegativesArgs),
    /// Train a network.
    Train(TrainArgs),
    /// Evaluate a checkpoint on full images.
    Eval(EvalArgs),
    /// Train and evaluate the four ablation variants.
    Ablate(AblateArgs),
    /// Render epoch-log curves.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 96)]
    pub size: usize,
    /// Also build pools of this many negatives.
    #[arg(long)]
    pub negatives: Option<usize>,
}

#[derive(Debug, Args)]
pub struct NegativesArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub z: usize,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Continue from a checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Manifest to evaluate on; defaults to the training manifest.
    #[arg(long)]
    pub eval_manifest: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub logs: PathBuf,
}

/// Parses `argv` and runs it, returning the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli, &argv) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", one_line(&e.to_string()));
            1
        }
    }
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn resolve_config(cli: &Cli) -> Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn execute(cli: &Cli, argv: &[OsString]) -> Result<()> {
    let out = &cli.out;
    match &cli.command {
        Command::Synth(a) => {
            let seed = cli.seed.unwrap_or(0);
            create_dir(out)?;
            let mut manifest = generate_dataset(a.n, a.size, seed, out)?;
            if let Some(z) = a.negatives {
                build_pools_for_manifest(&mut manifest, z, seed)?;
            }
            let inputs = manifest_inputs(&manifest)?;
            write_metadata(out, "synth", argv, json!({"n": a.n, "size": a.size, "seed": seed, "negatives": a.negatives}), &inputs)?;
            println!("wrote {} entries to {}", manifest.entries.len(), out.join(MANIFEST_NAME).display());
        }
        Command::Negatives(a) => {
            let seed = cli.seed.unwrap_or(0);
            let mut manifest = DatasetManifest::load(&a.manifest)?;
            build_pools_for_manifest(&mut manifest, a.z, seed)?;
            create_dir(out)?;
            write_metadata(out, "negatives", argv, json!({"z": a.z, "seed": seed}), &manifest_inputs(&manifest)?)?;
            println!("built {} negatives for {} entries", a.z, manifest.entries.len());
        }
        Command::Train(a) => {
            let manifest = DatasetManifest::load(&a.manifest)?;
            let mut inputs = manifest_inputs(&manifest)?;
            let mut trainer = match &a.resume {
                Some(path) => {
                    inputs.push(path.clone());
                    Trainer::resume(Checkpoint::load(path)?, &manifest)?
                }
                None => {
                    let mut cfg = resolve_config(cli)?;
                    if let Some(epochs) = a.epochs {
                        cfg.epochs = epochs;
                    }
                    Trainer::new(cfg, &manifest)?
                }
            };
            create_dir(out)?;
            write_metadata(out, "train", argv, serde_json::to_value(trainer.config())?, &inputs)?;
            let outcome = run_training(&mut trainer, Some(out))?;
            if let (Some(first), Some(last)) = (outcome.logs.first(), outcome.logs.last()) {
                println!(
                    "epochs {}..={}: calibration psnr {:.2} dB before, {:.2} dB after",
                    first.epoch, last.epoch, first.avg_psnr, outcome.final_avg_psnr
                );
            }
        }
        Command::Eval(a) => {
            let manifest = DatasetManifest::load(&a.manifest)?;
            let ckpt = Checkpoint::load(&a.checkpoint)?;
            let report = evaluate(&ckpt, &manifest)?;
            create_dir(out)?;
            let mut inputs = manifest_inputs(&manifest)?;
            inputs.push(a.checkpoint.clone());
            write_metadata(out, "eval", argv, serde_json::to_value(&ckpt.config)?, &inputs)?;
            write_json(&out.join("report.json"), &report)?;
            println!("mean psnr {:.3} dB, mean ssim {:.4} (hazy input {:.3} dB)", report.mean_psnr, report.mean_ssim, report.hazy_psnr);
        }
        Command::Ablate(a) => {
            let mut cfg = resolve_config(cli)?;
            if let Some(epochs) = a.epochs {
                cfg.epochs = epochs;
            }
            let manifest = DatasetManifest::load(&a.manifest)?;
            let eval_manifest = match &a.eval_manifest {
                Some(p) => DatasetManifest::load(p)?,
                None => manifest.clone(),
            };
            create_dir(out)?;
            let mut inputs = manifest_inputs(&manifest)?;
            if a.eval_manifest.is_some() {
                inputs.extend(manifest_inputs(&eval_manifest)?);
            }
            write_metadata(out, "ablate", argv, serde_json::to_value(&cfg)?, &inputs)?;
            let rows = ablate(&cfg, &manifest, &eval_manifest, out)?;
            write_json(&out.join("ablation.json"), &rows)?;
            let table = ablation_table(&rows);
            fs::write(out.join("ablation.md"), &table).map_err(|e| Error::io(out.join("ablation.md"), e))?;
            print!("{table}");
        }
        Command::Plot(a) => {
            let logs = read_logs(&a.logs)?;
            if logs.is_empty() {
                return Err(invalid(format!("{} holds no epoch logs", a.logs.display())));
            }
            let dir = out.join("plots");
            create_dir(&dir)?;
            let written = plot_logs(&logs, &dir)?;
            write_metadata(out, "plot", argv, json!({}), std::slice::from_ref(&a.logs))?;
            for path in written {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub psnr: f64,
    pub ssim: f64,
    pub hazy_psnr: f64,
}

/// The four variants: pixel-attention base, PDU, PDU with canonical
/// consensual regularization, PDU with the curricular regularizer.
pub fn ablation_variants(base: &TrainConfig) -> Vec<(&'static str, TrainConfig)> {
    let with = |attention, lambda, regularizer| {
        let mut c = base.clone();
        c.network.attention = attention;
        c.lambda = lambda;
        c.regularizer = regularizer;
        c
    };
    let lambda = if base.lambda > 0.0 { base.lambda } else { TrainConfig::default().lambda };
    vec![
        ("base", with(AttentionKind::PixelAttention, 0.0, RegularizerMode::Curricular)),
        ("+pdu", with(AttentionKind::Pdu, 0.0, RegularizerMode::Curricular)),
        ("+cr_consensual_no_cl", with(AttentionKind::Pdu, lambda, RegularizerMode::Canonical)),
        ("+c2r", with(AttentionKind::Pdu, lambda, RegularizerMode::Curricular)),
    ]
}

fn ablate(cfg: &TrainConfig, manifest: &DatasetManifest, eval_manifest: &DatasetManifest, out: &Path) -> Result<Vec<AblationRow>> {
    ablation_variants(cfg)
        .into_iter()
        .map(|(name, variant)| {
            let dir = out.join("ablate").join(name.trim_start_matches('+'));
            create_dir(&dir)?;
            let log = dir.join(LOG_NAME);
            if log.exists() {
                fs::remove_file(&log).map_err(|e| Error::io(&log, e))?;
            }
            let mut trainer = Trainer::new(variant, manifest)?;
            run_training(&mut trainer, Some(&dir))?;
            let report: EvalReport = evaluate_network(trainer.network(), eval_manifest)?;
            write_json(&dir.join("report.json"), &report)?;
            Ok(AblationRow { variant: name.into(), psnr: report.mean_psnr, ssim: report.mean_ssim, hazy_psnr: report.hazy_psnr })
        })
        .collect()
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::from("| variant | PSNR (dB) | SSIM |\n|---|---|---|\n");
    for r in rows {
        s.push_str(&format!("| {} | {:.3} | {:.4} |\n", r.variant, r.psnr, r.ssim));
    }
    s
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Manifest file plus every file it references.
fn manifest_inputs(manifest: &DatasetManifest) -> Result<Vec<PathBuf>> {
    let mut paths = vec![manifest.root.join(MANIFEST_NAME)];
    for e in &manifest.entries {
        for rel in [&e.clear_path, &e.hazy_path, &e.depth_path].into_iter().chain(e.negatives.iter().map(|n| &n.path)) {
            paths.push(manifest.path_of(rel));
        }
    }
    Ok(paths)
}

/// SHA-256 over git's blob framing: `"blob <len>\0" + content`.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex(&h.finalize())
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn write_metadata(out: &Path, command: &str, argv: &[OsString], resolved: serde_json::Value, inputs: &[PathBuf]) -> Result<()> {
    let mut files = Vec::with_capacity(inputs.len());
    let mut combined = Sha256::new();
    for path in inputs {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let hash = blob_hash(&bytes);
        combined.update(hash.as_bytes());
        files.push(json!({"path": path.display().to_string(), "hash": hash}));
    }
    let meta = json!({
        "command": command,
        "argv": argv.iter().map(|a| a.to_string_lossy().into_owned()).collect::<Vec<_>>(),
        "version": env!("CARGO_PKG_VERSION"),
        "resolved": resolved,
        "input_hash": hex(&combined.finalize()),
        "inputs": files,
    });
    write_json(&out.join(format!("run-{command}.json")), &meta)
}

fn plot_err(e: impl std::fmt::Display) -> Error {
    invalid(format!("plot rendering failed: {e}"))
}

fn line_chart(path: &Path, title: &str, y_label: &str, series: &[(&str, Vec<(f64, f64)>)]) -> Result<()> {
    use plotters::prelude::*;
    let points = series.iter().flat_map(|(_, p)| p.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in points.filter(|(x, y)| x.is_finite() && y.is_finite()) {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    let pad = ((y1 - y0) * 0.05).max(1e-6);
    let root = SVGBackend::new(path, (800, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(64)
        .build_cartesian_2d(x0..x1, (y0 - pad)..(y1 + pad))
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("epoch").y_desc(y_label).draw().map_err(plot_err)?;
    for (i, (name, pts)) in series.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(*name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color.stroke_width(2)));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.85))
        .border_style(BLACK)
        .draw()
        .map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

type Series<'a> = (&'a str, Vec<(f64, f64)>);
type Chart<'a> = (&'a str, &'a str, &'a str, Vec<Series<'a>>);

/// Writes `avg_psnr.svg`, `losses.svg` and `difficulty.svg` under `dir`.
pub fn plot_logs(logs: &[EpochLog], dir: &Path) -> Result<Vec<PathBuf>> {
    let pts = |f: fn(&EpochLog) -> f64| logs.iter().map(|l| (l.epoch as f64, f(l))).collect::<Vec<_>>();
    let charts: [Chart; 3] = [
        ("avg_psnr.svg", "Calibration PSNR", "dB", vec![("avg_psnr", pts(|l| l.avg_psnr))]),
        (
            "losses.svg",
            "Loss components",
            "loss",
            vec![
                ("total", pts(|l| l.mean_total_loss)),
                ("fidelity", pts(|l| l.mean_fidelity)),
                ("regularizer", pts(|l| l.mean_rstar)),
            ],
        ),
        (
            "difficulty.svg",
            "Negative difficulty",
            "count",
            vec![("hard", pts(|l| l.n_hard as f64)), ("ultra-hard", pts(|l| l.n_ultrahard as f64))],
        ),
    ];
    let mut written = Vec::new();
    for (name, title, y, series) in charts {
        let path = dir.join(name);
        line_chart(&path, title, y, &series)?;
        written.push(path);
    }
    Ok(written)
}
