//! Command-line driver for the RGB-thermal detection pipeline: dataset
//! synthesis, training, scenario evaluation, blackout simulation, and report
//! generation. Exit codes: 0 success, 1 runtime error, 2 usage error.

mod svg;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rgbt_detect::augment::MaskingPolicy;
use rgbt_detect::blackout::{apply_scenario, Scenario};
use rgbt_detect::ckpt::load_model;
use rgbt_detect::config::ExperimentConfig;
use rgbt_detect::data::{
    generate_dataset, load_scene, write_gray_png, write_rgb_png, Dataset,
};
use rgbt_detect::mask::ModalityMask;
use rgbt_detect::train::{evaluate_scenarios, train, MrTable, Subset};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

/// Environment variable overriding every config seed, for sweep scripting.
const SEED_ENV: &str = "RGBT_SEED";

#[derive(Parser)]
#[command(
    name = "rgbt-detect",
    version,
    about = "RGB-thermal pedestrian detection experiments",
    after_help = "Set RGBT_SEED to override the config seeds (synthesis and training)."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset
    Synth(SynthArgs),
    /// Train a detector on a generated dataset
    Train(TrainArgs),
    /// Evaluate a checkpoint under blackout scenarios
    Eval(EvalArgs),
    /// Write blackout-applied image pairs and their masks
    Simulate(SimulateArgs),
    /// Build charts and a markdown summary from eval metrics
    Report(ReportArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Experiment config JSON (defaults when omitted)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset output directory
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Ablation {
    /// Replace hybrid attention with a pass-through
    NoHa,
    /// Disable masking augmentation
    NoMasking,
}

#[derive(Args)]
struct TrainArgs {
    /// Experiment config JSON (defaults when omitted)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset directory (from `synth`)
    #[arg(long)]
    data: PathBuf,
    /// Output directory for checkpoint and history
    #[arg(long)]
    out: PathBuf,
    /// Ablations to apply, repeatable
    #[arg(long = "ablate", value_enum)]
    ablate: Vec<Ablation>,
}

fn parse_scenario(s: &str) -> Result<Scenario, String> {
    Scenario::from_flag(s).map_err(|e| e.to_string())
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint file (from `train`)
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Scenario flag, repeatable; all six when omitted
    #[arg(long = "scenario", value_parser = parse_scenario)]
    scenarios: Vec<Scenario>,
    /// Dataset split to evaluate
    #[arg(long, default_value = "test")]
    split: String,
    /// Experiment config JSON supplying evaluation settings
    #[arg(long)]
    config: Option<PathBuf>,
    /// Write the table as JSON to this path
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Scenario to apply
    #[arg(long, value_parser = parse_scenario)]
    scenario: Scenario,
    /// Dataset split to read
    #[arg(long, default_value = "test")]
    split: String,
    /// Output directory for PNG pairs and masks
    #[arg(long)]
    out: PathBuf,
    /// Cap on the number of scenes written
    #[arg(long)]
    limit: Option<usize>,
}

#[derive(Args)]
struct ReportArgs {
    /// Metrics JSON files from `eval --out`; the first is the baseline
    #[arg(long = "metrics", required = true, num_args = 1..)]
    metrics: Vec<PathBuf>,
    /// Series label per metrics file (defaults to the file stem)
    #[arg(long = "label", num_args = 1..)]
    labels: Vec<String>,
    /// Output directory for charts, CSVs, and summary
    #[arg(long)]
    out: PathBuf,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli.command) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}

fn run(command: Command) -> anyhow::Result<()> {
    match command {
        Command::Synth(args) => cmd_synth(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::Simulate(args) => cmd_simulate(args),
        Command::Report(args) => cmd_report(args),
    }
}

fn load_config(path: &Option<PathBuf>) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match path {
        Some(p) => ExperimentConfig::load(p)
            .with_context(|| format!("loading config {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = env_seed()? {
        cfg.synth.seed = seed;
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn env_seed() -> anyhow::Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => {
            let seed = v
                .parse::<u64>()
                .with_context(|| format!("{SEED_ENV} must be an unsigned integer, got {v:?}"))?;
            Ok(Some(seed))
        }
        Err(std::env::VarError::NotPresent) => Ok(None),
        Err(e) => Err(e).context(SEED_ENV),
    }
}

fn cmd_synth(args: SynthArgs) -> anyhow::Result<()> {
    let cfg = load_config(&args.config)?;
    generate_dataset(&cfg.synth, &args.out)?;
    println!("{}", args.out.join("manifest.json").display());
    Ok(())
}

fn cmd_train(args: TrainArgs) -> anyhow::Result<()> {
    let mut cfg = load_config(&args.config)?;
    for a in &args.ablate {
        match a {
            Ablation::NoHa => cfg.model.use_ha = false,
            Ablation::NoMasking => cfg.masking = MaskingPolicy::disabled(),
        }
    }
    let dataset = Dataset::open(&args.data)?;
    let outcome = train(
        &dataset,
        &cfg.model,
        &cfg.train,
        &cfg.masking,
        &cfg.baseline_aug,
        &cfg.eval,
        &args.out,
    )?;
    cfg.save(&args.out.join("experiment.json"))?;
    println!("checkpoint: {}", outcome.checkpoint.display());
    println!(
        "epochs: {} (best at {}), val MR {:.2}",
        outcome.epochs_run, outcome.best_epoch, outcome.best_val_mr
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> anyhow::Result<()> {
    let cfg = load_config(&args.config)?;
    let model = load_model(&args.checkpoint)?;
    let dataset = Dataset::open(&args.data)?;
    let scenarios = if args.scenarios.is_empty() {
        Scenario::ALL.to_vec()
    } else {
        args.scenarios.clone()
    };
    let table = evaluate_scenarios(&model, &dataset, &args.split, &scenarios, &cfg.eval)?;
    print!("{}", format_table(&table, &scenarios));
    if let Some(out) = &args.out {
        let json = serde_json::to_vec_pretty(&table)?;
        std::fs::write(out, json).with_context(|| out.display().to_string())?;
        println!("wrote {}", out.display());
    }
    Ok(())
}

/// Aligned text table: one scenario per row, one subset per column.
fn format_table(table: &MrTable, scenarios: &[Scenario]) -> String {
    let mut out = format!("{:<22} {:>8} {:>8} {:>8}\n", "scenario", "all", "day", "night");
    for &sc in scenarios {
        let cell = |subset| {
            table
                .get(sc, subset)
                .map_or("-".to_string(), |c| format!("{:.2}", c.mr))
        };
        out.push_str(&format!(
            "{:<22} {:>8} {:>8} {:>8}\n",
            sc.flag(),
            cell(Subset::All),
            cell(Subset::Day),
            cell(Subset::Night),
        ));
    }
    out
}

fn cmd_simulate(args: SimulateArgs) -> anyhow::Result<()> {
    let dataset = Dataset::open(&args.data)?;
    let ids = dataset.manifest.split(&args.split)?;
    let n = args.limit.unwrap_or(ids.len()).min(ids.len());
    std::fs::create_dir_all(&args.out).with_context(|| args.out.display().to_string())?;
    for id in &ids[..n] {
        let pair = load_scene(&dataset.root, id)?;
        let (masked, m_rgb, m_thermal) = apply_scenario(&pair, args.scenario)?;
        write_rgb_png(&args.out.join(format!("{id}_rgb.png")), &masked.rgb)?;
        write_gray_png(&args.out.join(format!("{id}_thermal.png")), &masked.thermal)?;
        write_mask_png(&args.out.join(format!("{id}_mask_rgb.png")), &m_rgb)?;
        write_mask_png(&args.out.join(format!("{id}_mask_thermal.png")), &m_thermal)?;
    }
    println!("wrote {n} scene(s) under {}", args.out.display());
    Ok(())
}

/// 1-bit grayscale PNG: bit 1 where the modality has data.
fn write_mask_png(path: &Path, mask: &ModalityMask) -> anyhow::Result<()> {
    let (h, w) = (mask.h(), mask.w());
    let mut packed = Vec::with_capacity(h * w.div_ceil(8));
    for y in 0..h {
        let mut byte = 0u8;
        let mut nbits = 0u32;
        for x in 0..w {
            byte = (byte << 1) | mask.get(y, x);
            nbits += 1;
            if nbits == 8 {
                packed.push(byte);
                byte = 0;
                nbits = 0;
            }
        }
        if nbits > 0 {
            packed.push(byte << (8 - nbits));
        }
    }
    let file = std::fs::File::create(path).with_context(|| path.display().to_string())?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::One);
    let mut writer = enc.write_header().context("png header")?;
    writer.write_image_data(&packed).context("png payload")?;
    Ok(())
}

struct Series {
    label: String,
    table: MrTable,
}

fn cmd_report(args: ReportArgs) -> anyhow::Result<()> {
    if !args.labels.is_empty() && args.labels.len() != args.metrics.len() {
        bail!(
            "{} labels for {} metrics files",
            args.labels.len(),
            args.metrics.len()
        );
    }
    let mut series = Vec::new();
    for (i, path) in args.metrics.iter().enumerate() {
        let bytes =
            std::fs::read(path).with_context(|| path.display().to_string())?;
        let table: MrTable = serde_json::from_slice(&bytes)
            .with_context(|| format!("parsing {}", path.display()))?;
        let label = args.labels.get(i).cloned().unwrap_or_else(|| {
            path.file_stem()
                .map_or_else(|| format!("series{i}"), |s| s.to_string_lossy().into_owned())
        });
        series.push(Series { label, table });
    }
    std::fs::create_dir_all(&args.out).with_context(|| args.out.display().to_string())?;

    let scenarios: Vec<Scenario> = Scenario::ALL
        .into_iter()
        .filter(|&sc| series.iter().any(|s| s.table.get(sc, Subset::All).is_some()))
        .collect();

    write_bar_outputs(&args.out, &scenarios, &series)?;
    write_curve_outputs(&args.out, &scenarios, &series)?;
    write_summary(&args.out.join("summary.md"), &scenarios, &series)?;
    println!("wrote report under {}", args.out.display());
    Ok(())
}

fn write_bar_outputs(out: &Path, scenarios: &[Scenario], series: &[Series]) -> anyhow::Result<()> {
    let groups: Vec<String> = scenarios.iter().map(|s| s.flag().to_string()).collect();
    let bars: Vec<(String, Vec<f64>)> = series
        .iter()
        .map(|s| {
            let vals = scenarios
                .iter()
                .map(|&sc| s.table.get(sc, Subset::All).map_or(f64::NAN, |c| c.mr))
                .collect();
            (s.label.clone(), vals)
        })
        .collect();
    let svg = svg::bar_chart("log-average miss rate by scenario (all)", &groups, &bars);
    std::fs::write(out.join("bar_mr.svg"), svg)?;

    let mut csv = String::from("scenario");
    for s in series {
        csv.push_str(&format!(",{}", s.label));
    }
    csv.push('\n');
    for (gi, g) in groups.iter().enumerate() {
        csv.push_str(g);
        for (_, vals) in &bars {
            csv.push_str(&format!(",{}", vals[gi]));
        }
        csv.push('\n');
    }
    std::fs::write(out.join("bar_mr.csv"), csv)?;
    Ok(())
}

fn write_curve_outputs(
    out: &Path,
    scenarios: &[Scenario],
    series: &[Series],
) -> anyhow::Result<()> {
    for &sc in scenarios {
        let mut lines = Vec::new();
        let mut csv = String::from("label,threshold,fppi,miss_rate\n");
        for s in series {
            let Some(cell) = s.table.get(sc, Subset::All) else {
                continue;
            };
            let pts: Vec<(f64, f64)> = cell
                .curve
                .fppi
                .iter()
                .zip(&cell.curve.miss_rate)
                .map(|(&f, &m)| (f, m))
                .collect();
            for ((f, m), t) in pts.iter().zip(&cell.curve.thresholds) {
                csv.push_str(&format!("{},{t},{f},{m}\n", s.label));
            }
            lines.push((s.label.clone(), pts));
        }
        let svg = svg::loglog_curves(&format!("miss rate vs fppi: {}", sc.flag()), &lines);
        std::fs::write(out.join(format!("curve_{}.svg", sc.flag())), svg)?;
        std::fs::write(out.join(format!("curve_{}.csv", sc.flag())), csv)?;
    }
    Ok(())
}

/// Markdown summary with one MR table per series and, when several series are
/// given, a comparison whose "avg diff" column is the mean over all shared
/// scenario/subset cells of (series MR − baseline MR); negative is better.
fn write_summary(path: &Path, scenarios: &[Scenario], series: &[Series]) -> anyhow::Result<()> {
    let mut md = String::from("# Evaluation summary\n");
    for s in series {
        md.push_str(&format!(
            "\n## {} (split: {})\n\n| scenario | all | day | night |\n|---|---|---|---|\n",
            s.label, s.table.split
        ));
        for &sc in scenarios {
            let cell = |subset| {
                s.table
                    .get(sc, subset)
                    .map_or("-".to_string(), |c| format!("{:.2}", c.mr))
            };
            md.push_str(&format!(
                "| {} | {} | {} | {} |\n",
                sc.flag(),
                cell(Subset::All),
                cell(Subset::Day),
                cell(Subset::Night),
            ));
        }
    }
    if series.len() > 1 {
        let base = &series[0];
        md.push_str(&format!(
            "\n## Comparison vs {}\n\n| series | avg diff (pp) | cells |\n|---|---|---|\n",
            base.label
        ));
        for s in &series[1..] {
            let mut diffs = Vec::new();
            for cell in &s.table.cells {
                if let Some(b) = base.table.get(cell.scenario, cell.subset) {
                    diffs.push(cell.mr - b.mr);
                }
            }
            let avg = if diffs.is_empty() {
                f64::NAN
            } else {
                diffs.iter().sum::<f64>() / diffs.len() as f64
            };
            md.push_str(&format!("| {} | {:+.2} | {} |\n", s.label, avg, diffs.len()));
        }
    }
    std::fs::write(path, md).with_context(|| path.display().to_string())?;
    Ok(())
}
