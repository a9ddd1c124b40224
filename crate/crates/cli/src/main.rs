//! Operator-facing driver: coarsen gridded containers, train the two-stage
//! model, sample ensembles, score the comparison table, run hyperparameter
//! sweeps, and render qualitative panels.

mod plot;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use scalesr_core::data::denormalize;
use scalesr_core::diffusion::{sample_ensemble, Conditioning, NoiseSchedule};
use scalesr_core::field::SRFactors;
use scalesr_core::gridio::{read_container, write_container, ContainerMeta};
use scalesr_core::metrics::MetricReport;
use scalesr_core::train::{
    det_predict, eval_samples, evaluate_det_only, evaluate_full, load_run, run_baselines,
    train_run, BaselineKind, METRICS_FILE,
};
use scalesr_core::tune::{run_sweep, TuneGrid};
use scalesr_core::{Preset, RunConfig};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(name = "scalesr", about = "Scale-adaptive spatiotemporal super-resolution")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Run configuration JSON; unset fields come from the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base preset: desk or paper.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    fold: Option<usize>,
    /// Super-resolution factor pair, e.g. 4x2.
    #[arg(long, value_parser = parse_factors)]
    factors: Option<SRFactors>,
    /// Ensemble members generated at evaluation time.
    #[arg(long)]
    members: Option<usize>,
    /// Ablate temporal, spatial, and cross attention.
    #[arg(long)]
    no_attention: bool,
    /// Skip the diffusion stage (mean predictor only).
    #[arg(long)]
    deterministic_only: bool,
    /// Disable the mass-conservation transform.
    #[arg(long)]
    no_mc: bool,
}

fn parse_factors(s: &str) -> Result<SRFactors, String> {
    let (a, b) = s
        .split_once(['x', 'X'])
        .ok_or_else(|| format!("expected SxT (e.g. 4x2), got {s}"))?;
    let s_f: usize = a.trim().parse().map_err(|_| format!("bad spatial factor {a}"))?;
    let t_f: usize = b.trim().parse().map_err(|_| format!("bad temporal factor {b}"))?;
    SRFactors::new(s_f, t_f).map_err(|e| e.to_string())
}

impl ConfigArgs {
    /// defaults <- preset <- config file <- flags, in that order.
    fn resolve(&self) -> anyhow::Result<RunConfig> {
        let preset = match &self.preset {
            Some(p) => p.parse::<Preset>()?,
            None => Preset::Desk,
        };
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)
                .with_context(|| format!("loading config {}", path.display()))?,
            None => RunConfig::preset(preset),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(fold) = self.fold {
            cfg.fold = fold;
        }
        if let Some(f) = self.factors {
            cfg.factors = f;
        }
        if let Some(k) = self.members {
            cfg.train.eval_members = k;
        }
        if self.no_attention {
            cfg.net.temporal_attention = false;
            cfg.net.spatial_attention = false;
            cfg.net.cross_attention = false;
        }
        if self.no_mc {
            cfg.hyper.conservation.enabled = false;
        }
        if let Ok(threads) = std::env::var("SCALESR_THREADS") {
            let n: usize = threads
                .parse()
                .map_err(|_| anyhow!("SCALESR_THREADS must be an integer"))?;
            cfg.train.threads = n;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Block-average a gridded container down by the factor pair.
    Coarsen {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long, value_parser = parse_factors)]
        factors: SRFactors,
    },
    /// Train the two-stage model into a run directory.
    Train {
        #[arg(long)]
        run_dir: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Draw ensemble members for the evaluation samples of a finished run.
    Sample {
        #[arg(long)]
        run_dir: PathBuf,
        #[arg(long, default_value_t = 3)]
        members: usize,
        #[arg(long, default_value_t = 17)]
        seed: u64,
        /// Output directory (default: <run_dir>/samples).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score the comparison table on the validation split.
    Evaluate {
        #[arg(long)]
        run_dir: PathBuf,
        /// A run trained with --no-attention, scored as the ablation row.
        #[arg(long)]
        ablation_run: Option<PathBuf>,
        #[arg(long, default_value_t = 17)]
        seed: u64,
        /// Report unit-carrying metrics in mm/h instead of normalized units.
        #[arg(long)]
        denormalize: bool,
    },
    /// Hyperparameter sweep over a candidate grid.
    Sweep {
        /// TuneGrid JSON: candidate lists plus the elbow threshold.
        #[arg(long)]
        grid: PathBuf,
        #[arg(long)]
        run_root: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Render a qualitative panel: mean, members, and target per frame row.
    Plot {
        #[arg(long)]
        run_dir: PathBuf,
        /// Index into the evaluation samples.
        #[arg(long, default_value_t = 0)]
        sample: usize,
        #[arg(long, default_value_t = 3)]
        members: usize,
        #[arg(long, default_value_t = 17)]
        seed: u64,
        /// Output file (default: <run_dir>/panel.png).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        let payload = serde_json::json!({
            "error": e.to_string(),
            "chain": e.chain().skip(1).map(|c| c.to_string()).collect::<Vec<_>>(),
        });
        eprintln!("{payload}");
        std::process::exit(1);
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.cmd {
        Cmd::Coarsen { input, output, factors } => cmd_coarsen(&input, &output, factors),
        Cmd::Train { run_dir, cfg } => cmd_train(&run_dir, &cfg),
        Cmd::Sample { run_dir, members, seed, out } => cmd_sample(&run_dir, members, seed, out),
        Cmd::Evaluate { run_dir, ablation_run, seed, denormalize } => {
            cmd_evaluate(&run_dir, ablation_run.as_deref(), seed, denormalize)
        }
        Cmd::Sweep { grid, run_root, cfg } => cmd_sweep(&grid, &run_root, &cfg),
        Cmd::Plot { run_dir, sample, members, seed, out } => {
            cmd_plot(&run_dir, sample, members, seed, out)
        }
    }
}

fn cmd_coarsen(input: &Path, output: &Path, factors: SRFactors) -> anyhow::Result<()> {
    let (meta, data) = read_container(input)?;
    let (nt, ny, nx) = (meta.shape[0], meta.shape[1], meta.shape[2]);
    if ny % factors.s != 0 || nx % factors.s != 0 {
        bail!("spatial factor {} does not divide the {ny}x{nx} grid", factors.s);
    }
    let nt_out = nt / factors.t;
    if nt_out == 0 {
        bail!("temporal factor {} exceeds the {nt} available frames", factors.t);
    }
    let (oy, ox) = (ny / factors.s, nx / factors.s);
    let mut out_data = BTreeMap::new();
    let mut checks = serde_json::Map::new();
    for (var, values) in &data {
        let mut out = vec![0.0f32; nt_out * oy * ox];
        let mut hr_sum = 0.0f64;
        let mut lr_sum_exact = 0.0f64;
        let norm = 1.0 / (factors.t * factors.s * factors.s) as f64;
        for bt in 0..nt_out {
            for by in 0..oy {
                for bx in 0..ox {
                    let mut acc = 0.0f64;
                    for k in 0..factors.t {
                        let t = bt * factors.t + k;
                        for dy in 0..factors.s {
                            let row = (t * ny + by * factors.s + dy) * nx + bx * factors.s;
                            for dx in 0..factors.s {
                                acc += values[row + dx] as f64;
                            }
                        }
                    }
                    hr_sum += acc;
                    let mean = acc * norm;
                    lr_sum_exact += mean;
                    out[(bt * oy + by) * ox + bx] = mean as f32;
                }
            }
        }
        // Mass identity on the frames that entered the averaging.
        let implied = (factors.s * factors.s * factors.t) as f64 * lr_sum_exact;
        let rel_err = (implied - hr_sum).abs() / hr_sum.abs().max(1.0);
        if rel_err > 1e-10 {
            bail!("mass identity violated for {var}: relative error {rel_err}");
        }
        checks.insert(
            var.clone(),
            serde_json::json!({
                "hr_sum": hr_sum,
                "lr_implied_sum": implied,
                "relative_error": rel_err,
                "frames_used": nt_out * factors.t,
            }),
        );
        out_data.insert(var.clone(), out);
    }
    let out_meta = ContainerMeta {
        dims: meta.dims.clone(),
        shape: vec![nt_out, oy, ox],
        variables: meta.variables.clone(),
        units: meta.units.clone(),
        missing_value: meta.missing_value,
    };
    write_container(output, &out_meta, &out_data)?;
    std::fs::write(
        output.join("checksum.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "factors": {"s": factors.s, "t": factors.t},
            "mass_identity": checks,
        }))?,
    )?;
    println!(
        "coarsened {} -> {} ({}x{} S={} T={})",
        input.display(),
        output.display(),
        oy,
        ox,
        factors.s,
        factors.t
    );
    Ok(())
}

fn cmd_train(run_dir: &Path, args: &ConfigArgs) -> anyhow::Result<()> {
    let cfg = args.resolve()?;
    configure_threads(cfg.train.threads)?;
    let outcome = train_run(&cfg, run_dir, args.deterministic_only)?;
    println!(
        "det: best val loss {:.6e} at epoch {} ({})",
        outcome.det_record.best_val_loss,
        outcome.det_record.best_epoch,
        outcome.det_record.stop_reason
    );
    if let Some(rec) = &outcome.dif_record {
        println!(
            "dif: best val loss {:.6e} at epoch {} ({})",
            rec.best_val_loss, rec.best_epoch, rec.stop_reason
        );
    }
    println!("run directory: {}", run_dir.display());
    Ok(())
}

fn configure_threads(threads: usize) -> anyhow::Result<()> {
    if threads > 1 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .ok();
    }
    Ok(())
}

fn cmd_sample(run_dir: &Path, members: usize, seed: u64, out: Option<PathBuf>) -> anyhow::Result<()> {
    let (mut cfg, det, dif) = load_run(run_dir)?;
    let dif = dif.ok_or_else(|| anyhow!("run has no diffusion weights; train without --deterministic-only"))?;
    cfg.train.eval_members = members;
    let samples = eval_samples(&cfg)?;
    let schedule = NoiseSchedule::new(cfg.hyper.schedule)?;
    let out_dir = out.unwrap_or_else(|| run_dir.join("samples"));
    std::fs::create_dir_all(&out_dir)?;
    let spec = cfg.hyper.conservation;
    for (i, ps) in samples.iter().enumerate() {
        let d = det_predict(&det, ps, &spec, cfg.factors)?;
        let cond = Conditioning {
            lr_context: ps.sample.lr_context.clone(),
            topography: ps.sample.topography.clone(),
            det_mean: d.clone(),
            factors: cfg.factors,
        };
        let drawn = sample_ensemble(&cond, &dif, &schedule, Some(&spec), members, seed, i as u64)?;
        let (h, w) = d.frame_shape();
        let t = d.len();
        let mut variables = vec!["det_mean".to_string(), "target".to_string()];
        let mut data = BTreeMap::new();
        let flat = |seq: &scalesr_core::field::FieldSequence| -> Vec<f32> {
            seq.frames()
                .iter()
                .flat_map(|f| f.values().iter().map(|&v| v as f32))
                .collect()
        };
        data.insert("det_mean".to_string(), flat(&d));
        data.insert("target".to_string(), flat(&ps.sample.hr_target));
        for (k, m) in drawn.iter().enumerate() {
            let name = format!("member_{k:02}");
            variables.push(name.clone());
            data.insert(name, flat(m));
        }
        let meta = ContainerMeta {
            dims: vec!["time".into(), "y".into(), "x".into()],
            shape: vec![t, h, w],
            variables,
            units: BTreeMap::new(),
            missing_value: None,
        };
        write_container(&out_dir.join(format!("sample_{i:04}")), &meta, &data)?;
    }
    println!("wrote {} forecasts to {}", samples.len(), out_dir.display());
    Ok(())
}

fn report_to_json(r: &MetricReport, denorm: Option<f64>) -> MetricReport {
    match denorm {
        None => *r,
        Some(cap) => MetricReport {
            mse: r.mse * cap * cap,
            mae: denormalize(r.mae, cap),
            pe99: denormalize(r.pe99, cap),
            lsd: r.lsd,
            emd: denormalize(r.emd, cap),
            ssim: r.ssim,
            pitd: r.pitd,
            crps: denormalize(r.crps, cap),
        },
    }
}

fn cmd_evaluate(
    run_dir: &Path,
    ablation_run: Option<&Path>,
    seed: u64,
    denorm: bool,
) -> anyhow::Result<()> {
    let (cfg, det, dif) = load_run(run_dir)?;
    configure_threads(cfg.train.threads)?;
    let samples = eval_samples(&cfg)?;
    let split = scalesr_core::train::build_split(&cfg)?;
    let cap = denorm.then_some(split.cap_value);
    let spec = cfg.hyper.conservation;

    let mut rows: Vec<(String, MetricReport)> = Vec::new();
    if let Some(dif) = &dif {
        rows.push((
            "full".to_string(),
            evaluate_full(&det, dif, &samples, &cfg, seed)?,
        ));
    }
    rows.push((
        "deterministic".to_string(),
        evaluate_det_only(&det, &samples, &spec, cfg.factors, seed)?,
    ));
    if let Some(ab) = ablation_run {
        let (ab_cfg, ab_det, ab_dif) = load_run(ab)?;
        if ab_cfg.net.temporal_attention || ab_cfg.net.spatial_attention {
            bail!("--ablation-run must point at a run trained with --no-attention");
        }
        let ab_dif = ab_dif.ok_or_else(|| anyhow!("ablation run has no diffusion weights"))?;
        let ab_samples = eval_samples(&ab_cfg)?;
        rows.push((
            "no_attention".to_string(),
            evaluate_full(&ab_det, &ab_dif, &ab_samples, &ab_cfg, seed)?,
        ));
    }
    rows.push((
        "bicubic".to_string(),
        run_baselines(&samples, BaselineKind::Bicubic, seed)?,
    ));
    rows.push((
        "nearest".to_string(),
        run_baselines(&samples, BaselineKind::Nearest, seed)?,
    ));

    let mut json = serde_json::Map::new();
    println!(
        "{:<14} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10} {:>10}",
        "model", "mse", "mae", "pe99", "lsd", "emd", "ssim", "pitd", "crps"
    );
    for (name, report) in &rows {
        let r = report_to_json(report, cap);
        println!(
            "{:<14} {:>10.3e} {:>10.3e} {:>10.3e} {:>10.3e} {:>10.3e} {:>10.3e} {:>10.3e} {:>10.3e}",
            name, r.mse, r.mae, r.pe99, r.lsd, r.emd, r.ssim, r.pitd, r.crps
        );
        json.insert(name.clone(), serde_json::to_value(r)?);
    }
    let path = run_dir.join(METRICS_FILE);
    std::fs::write(&path, serde_json::to_string_pretty(&json)?)?;
    println!("wrote {}", path.display());
    Ok(())
}

fn cmd_sweep(grid_path: &Path, run_root: &Path, args: &ConfigArgs) -> anyhow::Result<()> {
    let cfg = args.resolve()?;
    configure_threads(cfg.train.threads)?;
    let grid: TuneGrid = serde_json::from_str(&std::fs::read_to_string(grid_path)?)?;
    let result = run_sweep(&cfg, &grid, Some(run_root))?;
    println!(
        "selected L={} (A_T={}), beta_max={}, F exponent {} alpha {}",
        result.context_len,
        result.attention_time,
        result.beta_max,
        result.conservation.exponent,
        result.conservation.alpha
    );
    println!("manifest: {}", run_root.join("sweep.json").display());
    Ok(())
}

fn cmd_plot(
    run_dir: &Path,
    sample_idx: usize,
    members: usize,
    seed: u64,
    out: Option<PathBuf>,
) -> anyhow::Result<()> {
    let (mut cfg, det, dif) = load_run(run_dir)?;
    let dif = dif.ok_or_else(|| anyhow!("run has no diffusion weights"))?;
    cfg.train.eval_members = members;
    let samples = eval_samples(&cfg)?;
    let ps = samples
        .get(sample_idx)
        .ok_or_else(|| anyhow!("sample {sample_idx} outside 0..{}", samples.len()))?;
    let spec = cfg.hyper.conservation;
    let d = det_predict(&det, ps, &spec, cfg.factors)?;
    let schedule = NoiseSchedule::new(cfg.hyper.schedule)?;
    let cond = Conditioning {
        lr_context: ps.sample.lr_context.clone(),
        topography: ps.sample.topography.clone(),
        det_mean: d.clone(),
        factors: cfg.factors,
    };
    let drawn = sample_ensemble(&cond, &dif, &schedule, Some(&spec), members, seed, sample_idx as u64)?;
    let out_path = out.unwrap_or_else(|| run_dir.join("panel.png"));
    plot::render_panel(&d, &drawn, &ps.sample.hr_target, &out_path)?;
    println!("wrote {}", out_path.display());
    Ok(())
}
