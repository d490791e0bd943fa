use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use partreg::backbone::{load_features, Backbone, BackboneSpec, FeatureMap};
use partreg::energy::{latent_to_params, EnergyConfig, Problem};
use partreg::error::{Error, Result};
use partreg::eval::eval;
use partreg::geometry::warp_extract;
use partreg::heatmap::{blob, multiplier};
use partreg::io::{self, ResultDoc};
use partreg::parts::{select_from_features, SelectConfig};
use partreg::solver::{register, scale_range, SolveConfig};
use partreg::synth::{reference_image, synth_dataset, SynthConfig, Truth};

#[derive(Parser)]
#[command(name = "partreg", version, about = "Parts-based image registration")]
struct Cli {
    /// Worker threads (0 = rayon default). Results do not depend on it.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Learn part locations on a reference image over a dataset.
    SelectParts(SelectArgs),
    /// Register one image against a part model.
    Register(RegisterArgs),
    /// Write synthetic scenes with ground truth.
    Synth(SynthArgs),
    /// Score registration results against ground truth.
    Eval(EvalArgs),
    /// Write part, denoised, blob and multiplier heatmaps for a registration.
    DumpHeatmaps(DumpArgs),
    /// Write built-in backbone features of an image as a PBRF tensor.
    Features(FeaturesArgs),
}

#[derive(Args)]
struct SelectArgs {
    #[arg(long)]
    reference: PathBuf,
    /// Directory of 224x224 PGM images.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 9)]
    n: usize,
    #[arg(long, default_value_t = 0.1)]
    lambda: f64,
    #[arg(long, default_value_t = 200)]
    iters: usize,
    #[arg(long, default_value_t = 0.01)]
    step: f64,
    /// `builtin`, or `file:<dir>` holding `<stem>.pbrf` for every image.
    #[arg(long, default_value = "builtin")]
    backbone: String,
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `start:end:step`, inclusive.
    #[arg(long, default_value = "0.65:1.20:0.05")]
    scales: String,
    #[arg(long, default_value_t = 1e-6)]
    lambda: f64,
    #[arg(long, default_value_t = 100)]
    iters: usize,
    #[arg(long, default_value_t = 0.05)]
    step: f64,
    /// `builtin`, or `file:<features>` with features of the input image.
    #[arg(long, default_value = "builtin")]
    backbone: String,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    count: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 224)]
    side: usize,
    #[arg(long, default_value_t = 0.8)]
    scale_min: f64,
    #[arg(long, default_value_t = 1.2)]
    scale_max: f64,
    #[arg(long, default_value_t = 0.1)]
    max_angle: f64,
    #[arg(long, default_value_t = 0.8)]
    shift_fraction: f64,
    #[arg(long, default_value_t = 3)]
    max_clutter: usize,
    #[arg(long, default_value_t = 0.03)]
    noise: f64,
}

#[derive(Args)]
struct EvalArgs {
    /// Directory of `<stem>.json` result documents.
    #[arg(long)]
    results: PathBuf,
    /// Directory of `<stem>.truth.json` files.
    #[arg(long)]
    truth: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DumpArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    model: PathBuf,
    /// Result document whose best latents are used.
    #[arg(long)]
    latents: PathBuf,
    #[arg(long)]
    outdir: PathBuf,
}

#[derive(Args)]
struct FeaturesArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let line = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("invalid arguments");
            let line = line.trim();
            eprintln!("{}", if line.starts_with("error:") { line.to_string() } else { format!("error: {line}") });
            return ExitCode::from(2);
        }
    };
    if cli.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cli.threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    let outcome = match cli.command {
        Command::SelectParts(a) => cmd_select(a),
        Command::Register(a) => cmd_register(a),
        Command::Synth(a) => cmd_synth(a),
        Command::Eval(a) => cmd_eval(a),
        Command::DumpHeatmaps(a) => cmd_dump(a),
        Command::Features(a) => cmd_features(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

enum BackboneArg {
    Builtin,
    File(PathBuf),
}

fn parse_backbone(s: &str) -> Result<BackboneArg> {
    if s == "builtin" {
        Ok(BackboneArg::Builtin)
    } else if let Some(p) = s.strip_prefix("file:") {
        Ok(BackboneArg::File(PathBuf::from(p)))
    } else {
        Err(Error::Usage(format!("unknown backbone {s:?}; expected builtin or file:<path>")))
    }
}

fn parse_scales(s: &str) -> Result<Vec<f64>> {
    let parts: Vec<&str> = s.split(':').collect();
    let nums = parts
        .iter()
        .map(|p| p.trim().parse::<f64>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| Error::Usage(format!("invalid scale list {s:?}")))?;
    match nums.as_slice() {
        [single] => Ok(vec![*single]),
        [start, end, step] if *step > 0.0 && end >= start => Ok(scale_range(*start, *end, *step)),
        _ => Err(Error::Usage(format!("invalid scale list {s:?}; expected start:end:step"))),
    }
}

fn file_stem(p: &Path) -> String {
    p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default()
}

fn cmd_select(a: SelectArgs) -> Result<()> {
    let cfg = SelectConfig {
        parts: a.n,
        lambda: a.lambda,
        iterations: a.iters,
        step: a.step,
        ..SelectConfig::default()
    };
    cfg.validate()?;
    let backbone_arg = parse_backbone(&a.backbone)?;
    let reference = io::read_pgm(&a.reference)?;
    let paths = io::list_pgms(&a.dataset)?;
    if paths.is_empty() {
        return Err(Error::Config(format!("no PGM images in {}", a.dataset.display())));
    }
    let (spec, ref_features, features) = match backbone_arg {
        BackboneArg::Builtin => {
            let spec = BackboneSpec::default();
            let bb = Backbone::from_spec(&spec)?;
            let rf = bb.extract_features(&reference)?;
            let fs = paths
                .iter()
                .map(|p| bb.extract_features(&io::read_pgm(p)?))
                .collect::<Result<Vec<_>>>()?;
            (spec, rf, fs)
        }
        BackboneArg::File(dir) => {
            let load = |p: &Path| load_features(&dir.join(format!("{}.pbrf", file_stem(p))));
            let rf = load(&a.reference)?;
            let fs = paths.iter().map(|p| load(p)).collect::<Result<Vec<FeatureMap>>>()?;
            let spec = BackboneSpec::FeatureFile {
                path: dir.clone(),
                rows: rf.rows(),
                cols: rf.cols(),
                channels: rf.channels(),
            };
            (spec, rf, fs)
        }
    };
    let sel = select_from_features(&ref_features, &features, &spec, &cfg)?;
    io::save_model(&a.out, &sel.model)
}

fn cmd_register(a: RegisterArgs) -> Result<()> {
    let scales = parse_scales(&a.scales)?;
    let backbone_arg = parse_backbone(&a.backbone)?;
    let u = io::read_pgm(&a.input)?;
    let model = io::load_model(&a.model)?;
    let backbone = match backbone_arg {
        BackboneArg::Builtin => Backbone::from_spec(&model.backbone)?,
        BackboneArg::File(p) => Backbone::Precomputed(load_features(&p)?),
    };
    let cfg = SolveConfig {
        iterations: a.iters,
        step_v: a.step,
        step_w: a.step,
        scales,
        energy: EnergyConfig {
            lambda: a.lambda,
            ..EnergyConfig::default()
        },
        ..SolveConfig::default()
    };
    let result = register(&u, &model, &backbone, &cfg)?;
    let name = a.input.file_name().map(|s| s.to_string_lossy().into_owned());
    ResultDoc::from_result(&result, name).save(&a.out)
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        side: a.side,
        scale_min: a.scale_min,
        scale_max: a.scale_max,
        max_angle: a.max_angle,
        shift_fraction: a.shift_fraction,
        max_clutter: a.max_clutter,
        noise_sigma: a.noise,
    };
    let samples = synth_dataset(a.seed, a.count, &cfg)?;
    let dir = a.out.join("samples");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    io::write_pgm(&a.out.join("reference.pgm"), &reference_image(224)?)?;
    for s in &samples {
        let stem = format!("sample_{:04}", s.truth.index);
        io::write_pgm(&dir.join(format!("{stem}.pgm")), &s.image)?;
        write_json(&dir.join(format!("{stem}.truth.json")), &s.truth)?;
    }
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    use std::io::Write;
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Usage(e.to_string()))?;
    s.push('\n');
    io::write_atomic(path, |w| w.write_all(s.as_bytes()))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let mut truth_files: Vec<PathBuf> = std::fs::read_dir(&a.truth)
        .map_err(|e| Error::io(&a.truth, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.to_string_lossy().ends_with(".truth.json"))
        .collect();
    truth_files.sort();
    let (mut results, mut truths) = (Vec::new(), Vec::new());
    for tf in &truth_files {
        let name = tf.file_name().unwrap().to_string_lossy();
        let stem = name.trim_end_matches(".truth.json");
        let rp = a.results.join(format!("{stem}.json"));
        if !rp.exists() {
            return Err(Error::Usage(format!("no result {} for truth {}", rp.display(), tf.display())));
        }
        let text = std::fs::read_to_string(tf).map_err(|e| Error::io(tf, e))?;
        let truth: Truth = serde_json::from_str(&text).map_err(|e| Error::Usage(format!("{}: {e}", tf.display())))?;
        truths.push(truth.warp());
        results.push(ResultDoc::load(&rp)?.warp_params());
    }
    let metrics = eval(&results, &truths)?;
    write_json(&a.out, &metrics)
}

fn cmd_dump(a: DumpArgs) -> Result<()> {
    let u = io::read_pgm(&a.input)?;
    let model = io::load_model(&a.model)?;
    let doc = ResultDoc::load(&a.latents)?;
    let lp = doc.latent_params();
    if lp.parts() != model.len() {
        return Err(Error::Usage(format!(
            "result has latents for {} parts, model has {}",
            lp.parts(),
            model.len()
        )));
    }
    let backbone = Backbone::from_spec(&model.backbone)?;
    let cfg = EnergyConfig::default();
    let problem = Problem::new(&u, &model, &backbone, cfg)?;
    let (eps, theta) = latent_to_params(&lp);
    let hs = problem.heatmaps(&theta)?;
    let gs = problem.denoised(&theta)?;
    std::fs::create_dir_all(&a.outdir).map_err(|e| Error::io(&a.outdir, e))?;
    let (rows, cols) = model.grid;
    for i in 0..model.len() {
        let k = blob(model.locations[i] + eps[i], rows, cols, cfg.heat.sigma_blob);
        let m = multiplier(&hs, i, &model.locations, &cfg.heat)?;
        for (tag, map) in [("h", &hs[i]), ("g", &gs[i]), ("k", &k), ("m", &m)] {
            let path = a.outdir.join(format!("{tag}_{:02}.pgm", i + 1));
            io::write_gray8(&path, cols, rows, &map.to_gray8())?;
        }
    }
    let patch = warp_extract(&u, &theta, model.patch_size)?;
    io::write_pgm(&a.outdir.join("patch.pgm"), &patch)
}

fn cmd_features(a: FeaturesArgs) -> Result<()> {
    let img = io::read_pgm(&a.input)?;
    let fm = Backbone::builtin().extract_features(&img)?;
    partreg::backbone::store_features(&a.out, &fm.to_raw())
}
