//! Command-line surface. Every subcommand accepts an optional JSON config
//! (`--config`) whose fields individual flags override, supports
//! `--print-config` to emit the resolved configuration without running,
//! and writes machine-readable CSV/JSON outputs.
//!
//! Exit codes: 0 success, 2 usage error (bad flags, missing input file,
//! config schema violation), 1 runtime error. `KANO_THREADS` caps the
//! worker pool (0 or unset = automatic).

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::cube::{Cube, Kernel};
use crate::degrade::{degrade, default_kernel_size, DegradationSpec};
use crate::error::{KanoError, Result};
use crate::io::{
    load_checkpoint, read_cube, read_kernel_csv, read_png, save_checkpoint, write_atomic,
    write_cube, write_kernel_csv, write_png,
};
use crate::metrics::full_report;
use crate::train::{synth_dataset, train_on, TrainConfig};
use crate::unfold::{run_unfolding, stage_diagnostics, Backbone, KanoModel};

#[derive(Parser)]
#[command(name = "kano", version, about = "Blind super-resolution by KAN-based deep unfolding")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Apply a known degradation to a clean cube or image
    Degrade(DegradeArgs),
    /// Train a model on procedurally generated data
    Train(TrainArgs),
    /// Run the unfolding pipeline on an observation
    Infer(InferArgs),
    /// Compute all six metrics between a reference and a test cube
    Eval(EvalArgs),
    /// Summary statistics of a kernel CSV
    InspectKernel(InspectArgs),
    /// Train KAN and MLP kernel backbones on identical data and compare
    CompareBackbones(CompareArgs),
    /// Write a synthetic dataset to disk
    GenData(GenDataArgs),
}

fn load_cube_auto(path: &Path) -> Result<Cube> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => read_png(path),
        _ => read_cube(path),
    }
}

fn save_cube_auto(path: &Path, cube: &Cube) -> Result<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => write_png(path, cube),
        _ => write_cube(path, cube),
    }
}

fn read_json_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path)?;
    serde_json::from_slice(&bytes)
        .map_err(|e| KanoError::Config(format!("{}: {e}", path.display())))
}

// ---- degrade --------------------------------------------------------------

#[derive(Args)]
struct DegradeArgs {
    /// JSON file with DegradationSpec fields
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long = "in")]
    input: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    kernel_out: Option<PathBuf>,
    #[arg(long)]
    scale: Option<usize>,
    #[arg(long)]
    kernel_size: Option<usize>,
    #[arg(long)]
    sigma_x: Option<f64>,
    #[arg(long)]
    sigma_y: Option<f64>,
    #[arg(long)]
    theta: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Print the resolved spec as JSON and exit
    #[arg(long)]
    print_config: bool,
}

fn cmd_degrade(a: DegradeArgs) -> Result<()> {
    let mut spec = match &a.config {
        Some(p) => read_json_config::<DegradationSpec>(p)?,
        None => DegradationSpec {
            scale: 2,
            kernel_size: 0,
            sigma_x: 1.5,
            sigma_y: 1.5,
            theta: 0.0,
            noise_level: 0.0,
            seed: 0,
        },
    };
    if let Some(v) = a.scale {
        spec.scale = v;
    }
    if let Some(v) = a.kernel_size {
        spec.kernel_size = v;
    }
    if let Some(v) = a.sigma_x {
        spec.sigma_x = v;
    }
    if let Some(v) = a.sigma_y {
        spec.sigma_y = v;
    }
    if let Some(v) = a.theta {
        spec.theta = v;
    }
    if let Some(v) = a.noise {
        spec.noise_level = v;
    }
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    if spec.kernel_size == 0 {
        spec.kernel_size = default_kernel_size(spec.scale);
    }
    if a.print_config {
        println!("{}", serde_json::to_string_pretty(&spec).unwrap());
        return Ok(());
    }
    let input = a
        .input
        .ok_or_else(|| KanoError::Config("degrade requires --in".into()))?;
    let out = a
        .out
        .ok_or_else(|| KanoError::Config("degrade requires --out".into()))?;
    let x = load_cube_auto(&input)?;
    let (y, k) = degrade(&x, &spec)?;
    save_cube_auto(&out, &y)?;
    if let Some(kp) = a.kernel_out {
        write_kernel_csv(&kp, &k)?;
    }
    Ok(())
}

// ---- train ----------------------------------------------------------------

#[derive(Args)]
struct TrainArgs {
    /// JSON file with TrainConfig fields
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    scale: Option<usize>,
    #[arg(long)]
    stages: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// kan or mlp
    #[arg(long)]
    backbone: Option<String>,
    #[arg(long)]
    print_config: bool,
}

fn resolve_train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &a.config {
        Some(p) => read_json_config::<TrainConfig>(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.patch {
        cfg.patch = v;
    }
    if let Some(v) = a.batch {
        cfg.batch = v;
    }
    if let Some(v) = a.scale {
        cfg.scale = v;
    }
    if let Some(v) = a.stages {
        cfg.stages = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = &a.backbone {
        cfg.backbone = match v.as_str() {
            "kan" => Backbone::Kan,
            "mlp" => Backbone::Mlp,
            other => {
                return Err(KanoError::Config(format!(
                    "backbone must be kan or mlp, got {other}"
                )))
            }
        };
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = resolve_train_config(&a)?;
    if a.print_config {
        println!("{}", serde_json::to_string_pretty(&cfg).unwrap());
        return Ok(());
    }
    let out = a
        .out
        .ok_or_else(|| KanoError::Config("train requires --out".into()))?;
    let (model, log) = train_on(&cfg, None)?;
    save_checkpoint(&out, &model)?;
    if let Some(lp) = a.log {
        write_atomic(&lp, log.to_csv().as_bytes())?;
    }
    Ok(())
}

// ---- infer ----------------------------------------------------------------

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    kernel_out: Option<PathBuf>,
    /// Per-stage diagnostics CSV; reference columns need --ref/--ref-kernel
    #[arg(long)]
    stages_out: Option<PathBuf>,
    /// Ground-truth cube for diagnostic MSE columns
    #[arg(long = "ref")]
    reference: Option<PathBuf>,
    /// Ground-truth kernel CSV for the kernel_mse column
    #[arg(long)]
    ref_kernel: Option<PathBuf>,
}

fn cmd_infer(a: InferArgs) -> Result<()> {
    let model = load_checkpoint(&a.model)?;
    let y = load_cube_auto(&a.input)?;
    let stages = run_unfolding(&y, &model)?;
    let last = stages.last().expect("at least one stage");
    save_cube_auto(&a.out, &last.x)?;
    if let Some(kp) = &a.kernel_out {
        write_kernel_csv(kp, &last.k)?;
    }
    if let Some(sp) = &a.stages_out {
        let mut csv = String::from("stage,mse_O,mse_S,mse_X,kernel_mse\n");
        match (&a.reference, &a.ref_kernel) {
            (Some(rp), rk) => {
                let x_gt = load_cube_auto(rp)?;
                let k_gt = match rk {
                    Some(p) => Some(read_kernel_csv(p)?),
                    None => None,
                };
                let fallback = Kernel::uniform(model.config.kernel_size);
                let diags =
                    stage_diagnostics(&stages, &x_gt, k_gt.as_ref().unwrap_or(&fallback));
                for d in diags {
                    let km = if k_gt.is_some() {
                        format!("{}", d.kernel_mse)
                    } else {
                        "nan".into()
                    };
                    csv.push_str(&format!(
                        "{},{},{},{},{km}\n",
                        d.stage, d.mse_o, d.mse_s, d.mse_x
                    ));
                }
            }
            (None, _) => {
                // without a reference only the sparse-component energy is
                // well defined
                for (i, s) in stages.iter().enumerate() {
                    let n = s.s.data.len() as f64;
                    let mse_s = s.s.data.mapv(|v| v * v).sum() / n;
                    csv.push_str(&format!("{},nan,{},nan,nan\n", i + 1, mse_s));
                }
            }
        }
        write_atomic(sp, csv.as_bytes())?;
    }
    Ok(())
}

// ---- eval -----------------------------------------------------------------

#[derive(Args)]
struct EvalArgs {
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    test: PathBuf,
    #[arg(long, default_value_t = 2)]
    scale: usize,
    #[arg(long, default_value_t = 1.0)]
    peak: f64,
    /// Write the CSV here instead of stdout
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let r = load_cube_auto(&a.reference)?;
    let t = load_cube_auto(&a.test)?;
    let rep = full_report(&r, &t, a.peak, a.scale)?;
    let csv = format!(
        "{}\n{}\n",
        crate::metrics::MetricReport::csv_header(),
        rep.csv_row()
    );
    match a.out {
        Some(p) => write_atomic(&p, csv.as_bytes())?,
        None => print!("{csv}"),
    }
    Ok(())
}

// ---- inspect-kernel -------------------------------------------------------

#[derive(Args)]
struct InspectArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn cmd_inspect(a: InspectArgs) -> Result<()> {
    let k = read_kernel_csv(&a.input)?;
    let v = k.values();
    let n = k.size();
    let c = (n / 2) as f64;
    let (mut mx, mut my, mut m2x, mut m2y, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            let w = v[[i, j]];
            mx += w * (j as f64 - c);
            my += w * (i as f64 - c);
        }
    }
    for i in 0..n {
        for j in 0..n {
            let w = v[[i, j]];
            let dx = j as f64 - c - mx;
            let dy = i as f64 - c - my;
            m2x += w * dx * dx;
            m2y += w * dy * dy;
            mxy += w * dx * dy;
        }
    }
    let report = serde_json::json!({
        "size": n,
        "sum": v.sum(),
        "min": v.iter().cloned().fold(f64::INFINITY, f64::min),
        "max": v.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        "centroid": [mx, my],
        "second_moments": { "xx": m2x, "yy": m2y, "xy": mxy },
    });
    let text = serde_json::to_string_pretty(&report).unwrap();
    match a.out {
        Some(p) => write_atomic(&p, text.as_bytes())?,
        None => println!("{text}"),
    }
    Ok(())
}

// ---- compare-backbones ----------------------------------------------------

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Outputs land at <prefix>_curves.csv and <prefix>_report.json
    #[arg(long)]
    out_prefix: PathBuf,
    #[arg(long)]
    print_config: bool,
}

fn cmd_compare(a: CompareArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => read_json_config::<TrainConfig>(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.steps {
        cfg.steps = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    if a.print_config {
        println!("{}", serde_json::to_string_pretty(&cfg).unwrap());
        return Ok(());
    }

    let dataset = synth_dataset(cfg.n_images, &cfg, cfg.seed)?;
    let mut kan_cfg = cfg.clone();
    kan_cfg.backbone = Backbone::Kan;
    let mut mlp_cfg = cfg.clone();
    mlp_cfg.backbone = Backbone::Mlp;
    let (kan_model, kan_log) = train_on(&kan_cfg, Some(&dataset))?;
    let (mlp_model, mlp_log) = train_on(&mlp_cfg, Some(&dataset))?;

    let mut curves = String::from("step,kernel_loss_kan,kernel_loss_mlp\n");
    for (a_row, b_row) in kan_log.rows.iter().zip(mlp_log.rows.iter()) {
        curves.push_str(&format!(
            "{},{},{}\n",
            a_row.step, a_row.loss_k, b_row.loss_k
        ));
    }
    let curves_path = with_suffix(&a.out_prefix, "_curves.csv");
    write_atomic(&curves_path, curves.as_bytes())?;

    let probe_cfg = {
        let mut c = cfg.clone();
        c.seed = cfg.seed.wrapping_add(1);
        c
    };
    let probes = synth_dataset(4, &probe_cfg, probe_cfg.seed)?;
    let kernel_mse = |model: &KanoModel| -> Result<f64> {
        let mut acc = 0.0;
        for p in &probes {
            let stages = run_unfolding(&p.y, model)?;
            acc += stages.last().unwrap().k.mse(&p.k_gt);
        }
        Ok(acc / probes.len() as f64)
    };
    let pk = kan_model.param_count();
    let pm = mlp_model.param_count();
    let report = serde_json::json!({
        "params_kan": pk,
        "params_mlp": pm,
        "param_rel_diff": (pk as f64 - pm as f64).abs() / pk as f64,
        "final_kernel_mse_kan": kernel_mse(&kan_model)?,
        "final_kernel_mse_mlp": kernel_mse(&mlp_model)?,
    });
    let report_path = with_suffix(&a.out_prefix, "_report.json");
    write_atomic(&report_path, serde_json::to_string_pretty(&report).unwrap().as_bytes())?;
    Ok(())
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut name = prefix.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    prefix.with_file_name(name)
}

// ---- gen-data -------------------------------------------------------------

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 8)]
    count: usize,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    print_config: bool,
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => read_json_config::<TrainConfig>(p)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    cfg.validate()?;
    if a.print_config {
        println!("{}", serde_json::to_string_pretty(&cfg).unwrap());
        return Ok(());
    }
    fs::create_dir_all(&a.out_dir)?;
    let pairs = synth_dataset(a.count, &cfg, cfg.seed)?;
    let mut manifest =
        String::from("index,x,y,kernel,scale,kernel_size,sigma_x,sigma_y,theta,noise_level,seed\n");
    for (i, p) in pairs.iter().enumerate() {
        let xp = a.out_dir.join(format!("x_{i:04}.kanc"));
        let yp = a.out_dir.join(format!("y_{i:04}.kanc"));
        let kp = a.out_dir.join(format!("k_{i:04}.csv"));
        write_cube(&xp, &p.x_gt)?;
        write_cube(&yp, &p.y)?;
        write_kernel_csv(&kp, &p.k_gt)?;
        manifest.push_str(&format!(
            "{i},x_{i:04}.kanc,y_{i:04}.kanc,k_{i:04}.csv,{},{},{},{},{},{},{}\n",
            p.spec.scale,
            p.spec.kernel_size,
            p.spec.sigma_x,
            p.spec.sigma_y,
            p.spec.theta,
            p.spec.noise_level,
            p.spec.seed
        ));
    }
    write_atomic(&a.out_dir.join("manifest.csv"), manifest.as_bytes())?;
    Ok(())
}

// ---- entry ----------------------------------------------------------------

fn init_threads() {
    if let Ok(v) = std::env::var("KANO_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n > 0 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn usage_error(err: &KanoError) -> bool {
    match err {
        KanoError::Config(_) => true,
        KanoError::Io(e) => e.kind() == std::io::ErrorKind::NotFound,
        _ => false,
    }
}

/// Parse `argv` and run; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            // clap handles help/version as "errors" with success status
            let code = if e.exit_code() == 0 { 0 } else { 2 };
            let _ = e.print();
            return code;
        }
    };
    init_threads();
    let result = match cli.command {
        Command::Degrade(a) => cmd_degrade(a),
        Command::Train(a) => cmd_train(a),
        Command::Infer(a) => cmd_infer(a),
        Command::Eval(a) => cmd_eval(a),
        Command::InspectKernel(a) => cmd_inspect(a),
        Command::CompareBackbones(a) => cmd_compare(a),
        Command::GenData(a) => cmd_gen_data(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if usage_error(&e) {
                2
            } else {
                1
            }
        }
    }
}
