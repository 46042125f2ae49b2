//! Command-line front end for the `uwenhance` pipeline.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use uwenhance::checkpoint::load_model;
use uwenhance::degradation::{
    list_images, synthesize_dataset, write_procedural_sources, ParamRanges, SynthDatasetSpec,
};
use uwenhance::gradcheck::{self, Scope};
use uwenhance::imaging::{load_image, save_image};
use uwenhance::metrics::{evaluate_dataset, niqe_fit, NiqeModel};
use uwenhance::model::AblationSetting;
use uwenhance::training::{self, RunConfig};
use uwenhance::{Error, Model, ModelConfig};

pub const DATA_ROOT_ENV: &str = "UWENHANCE_DATA_ROOT";

pub const EXIT_OK: u8 = 0;
pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;
pub const EXIT_IO: u8 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "uwenhance",
    version,
    about = "Underwater image enhancement: data synthesis, training, inference and evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize degraded/clean training pairs with the underwater imaging model.
    Synth(SynthArgs),
    /// Train a model from a TOML run configuration.
    Train(TrainArgs),
    /// Enhance one image or every image of a directory.
    Enhance(EnhanceArgs),
    /// Compute quality metrics of a directory of images.
    Evaluate(EvaluateArgs),
    /// Report parameters, MACs and median inference time.
    Benchmark(BenchmarkArgs),
    /// Train every ablation setting with the same data and schedule.
    Ablate(AblateArgs),
    /// Fit a NIQE model to a directory of pristine images.
    NiqeFit(NiqeFitArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Directory of clean source images; procedural scenes are generated when omitted.
    #[arg(long)]
    pub source: Option<PathBuf>,
    /// Number of pairs to write.
    #[arg(long, default_value_t = 200)]
    pub count: usize,
    /// Seed for the degradation parameters and procedural scenes.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory [default: $UWENHANCE_DATA_ROOT/synth].
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Size HxW of procedural scenes.
    #[arg(long, default_value = "64x64")]
    pub size: String,
    /// Number of procedural scenes to draw pairs from (0: one per pair).
    #[arg(long, default_value_t = 0)]
    pub scenes: usize,
    /// JSON file with degradation parameter ranges.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML file with [model] and [train] sections.
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides both the model and the training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the run output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the dataset manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Continue from the checkpoints in the output directory.
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct EnhanceArgs {
    /// Model checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Image file or directory of images.
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory; outputs keep the input file names as PNG.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Directory of images to score.
    #[arg(long)]
    pub pred: PathBuf,
    /// Directory of references with matching file names; enables PSNR, SSIM and MSE.
    #[arg(long = "ref")]
    pub reference: Option<PathBuf>,
    /// NIQE model from `niqe-fit`; enables NIQE.
    #[arg(long)]
    pub niqe_model: Option<PathBuf>,
    /// Output directory for report.txt and report.jsonl.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BenchmarkArgs {
    /// TOML run configuration; only the [model] section is used.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Model checkpoint; its configuration and weights are used.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Image size HxW.
    #[arg(long, default_value = "720x1080")]
    pub size: String,
    /// Timed repetitions.
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    /// Untimed warm-up passes.
    #[arg(long, default_value_t = 1)]
    pub warmup: usize,
    /// Seed for the input image and initial weights.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for benchmark.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// TOML run configuration shared by every setting.
    #[arg(long)]
    pub config: PathBuf,
    /// Comma-separated settings (s1, tfe, in, tfe_afgm, tfe_mcam, tfe_ca, full).
    #[arg(
        long,
        value_delimiter = ',',
        default_value = "s1,tfe,in,tfe_afgm,tfe_mcam,tfe_ca,full"
    )]
    pub settings: Vec<String>,
    /// Overrides the training seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; each setting trains into a subdirectory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the dataset manifest.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct NiqeFitArgs {
    /// Directory of pristine images.
    #[arg(long)]
    pub pristine: PathBuf,
    /// Square patch side in pixels.
    #[arg(long, default_value_t = 96)]
    pub patch: usize,
    /// Output model file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// afgm, mcam, tfe, gsm, losses, full or all.
    #[arg(long, default_value = "all")]
    pub scope: String,
    /// Seed for weights and inputs.
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Output directory for gradcheck.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// A command failure with its process exit status.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure {
            code: exit_code(&e),
            message: e.to_string(),
        }
    }
}

/// Exit status for a core error.
pub fn exit_code(e: &Error) -> u8 {
    if e.is_validation() || matches!(e, Error::Serde(_) | Error::UnsupportedImage { .. }) {
        EXIT_VALIDATION
    } else if e.is_numeric() {
        EXIT_NUMERIC
    } else {
        EXIT_IO
    }
}

/// Parses `HxW`.
pub fn parse_size(s: &str) -> Result<(usize, usize), Error> {
    let bad = || Error::InvalidArgument(format!("size must look like HxW, got `{s}`"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    if h == 0 || w == 0 {
        return Err(bad());
    }
    Ok((h, w))
}

fn create_dir(p: &Path) -> Result<(), Error> {
    fs::create_dir_all(p).map_err(|e| Error::Io {
        path: p.to_path_buf(),
        source: e,
    })
}

fn write_text(p: &Path, text: &str) -> Result<(), Error> {
    fs::write(p, text).map_err(|e| Error::Io {
        path: p.to_path_buf(),
        source: e,
    })
}

fn require_file(p: &Path, what: &str) -> Result<(), Error> {
    if !p.is_file() {
        return Err(Error::InvalidArgument(format!(
            "{what} {} does not exist",
            p.display()
        )));
    }
    Ok(())
}

fn require_dir(p: &Path, what: &str) -> Result<(), Error> {
    if !p.is_dir() {
        return Err(Error::InvalidArgument(format!(
            "{what} {} is not a directory",
            p.display()
        )));
    }
    Ok(())
}

/// Runs one parsed command, printing progress to stdout.
pub fn run(cli: Cli) -> Result<(), Failure> {
    let r = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Enhance(a) => enhance(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Benchmark(a) => benchmark(a),
        Command::Ablate(a) => ablate(a),
        Command::NiqeFit(a) => niqe(a),
        Command::Gradcheck(a) => return grad(a),
    };
    r.map_err(Failure::from)
}

fn synth(a: SynthArgs) -> Result<(), Error> {
    let out = match a.out {
        Some(p) => p,
        None => match std::env::var_os(DATA_ROOT_ENV) {
            Some(root) => PathBuf::from(root).join("synth"),
            None => {
                return Err(Error::InvalidArgument(format!(
                    "--out is required when {DATA_ROOT_ENV} is not set"
                )))
            }
        },
    };
    if a.count == 0 {
        return Err(Error::InvalidArgument("--count must be at least 1".into()));
    }
    let (h, w) = parse_size(&a.size)?;
    let ranges = match &a.config {
        Some(p) => {
            require_file(p, "parameter range file")?;
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            let r: ParamRanges = serde_json::from_str(&text)?;
            r.validate()?;
            r
        }
        None => ParamRanges::default(),
    };
    let source = match a.source {
        Some(s) => {
            require_dir(&s, "source")?;
            s
        }
        None => {
            let dir = out.join("sources");
            let n = if a.scenes == 0 { a.count } else { a.scenes };
            write_procedural_sources(&dir, n, h, w, a.seed)?;
            dir
        }
    };
    let records = synthesize_dataset(&SynthDatasetSpec {
        source_dir: source,
        count: a.count,
        param_ranges: ranges,
        seed: a.seed,
        output_dir: out.clone(),
    })?;
    println!("wrote {} pairs to {}", records.len(), out.display());
    Ok(())
}

fn load_run(
    config: &Path,
    seed: Option<u64>,
    out: Option<PathBuf>,
    manifest: Option<PathBuf>,
) -> Result<RunConfig, Error> {
    require_file(config, "config")?;
    let mut run = RunConfig::load(config)?;
    if let Some(s) = seed {
        run.model.seed = s;
        run.train.seed = s;
    }
    if let Some(o) = out {
        run.train.out_dir = o;
    }
    if let Some(m) = manifest {
        run.train.manifest = m;
    }
    run.validate()?;
    require_file(&run.train.manifest, "manifest")?;
    Ok(run)
}

fn train(a: TrainArgs) -> Result<(), Error> {
    let run = load_run(&a.config, a.seed, a.out, a.manifest)?;
    let outcome = if a.resume {
        training::resume(&run)?
    } else {
        training::train(&run)?
    };
    for e in &outcome.log.epochs {
        match &e.validation {
            Some(v) => println!(
                "epoch {:>3}  loss {:.5}  val psnr {:.3} (input {:.3})  ssim {:.4} (input {:.4})  {:.1}s",
                e.epoch + 1,
                e.mean_loss,
                v.psnr,
                v.baseline_psnr,
                v.ssim,
                v.baseline_ssim,
                e.seconds
            ),
            None => println!("epoch {:>3}  loss {:.5}  {:.1}s", e.epoch + 1, e.mean_loss, e.seconds),
        }
    }
    println!("checkpoint {}", outcome.checkpoint.display());
    Ok(())
}

fn enhance(a: EnhanceArgs) -> Result<(), Error> {
    require_file(&a.checkpoint, "checkpoint")?;
    let inputs = if a.input.is_dir() {
        list_images(&a.input)?
    } else {
        require_file(&a.input, "input")?;
        vec![a.input.clone()]
    };
    if inputs.is_empty() {
        return Err(Error::Dataset(format!(
            "no images found in {}",
            a.input.display()
        )));
    }
    let (cfg, ws) = load_model(&a.checkpoint)?;
    let model = Model::new(&cfg)?;
    create_dir(&a.out)?;
    for p in &inputs {
        let img = load_image(p)?;
        let t = Instant::now();
        let out = model.enhance(&ws, &img)?;
        let secs = t.elapsed().as_secs_f64();
        let stem = p
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let dest = a.out.join(format!("{stem}.png"));
        save_image(&out, &dest)?;
        println!(
            "{}  {}x{}  {:.4}s",
            dest.display(),
            img.width(),
            img.height(),
            secs
        );
    }
    Ok(())
}

fn evaluate(a: EvaluateArgs) -> Result<(), Error> {
    require_dir(&a.pred, "--pred")?;
    if let Some(r) = &a.reference {
        require_dir(r, "--ref")?;
    }
    let niqe = match &a.niqe_model {
        Some(p) => {
            require_file(p, "NIQE model")?;
            Some(NiqeModel::load(p)?)
        }
        None => None,
    };
    let report = evaluate_dataset(&a.pred, a.reference.as_deref(), niqe.as_ref())?;
    create_dir(&a.out)?;
    let table = report.to_table();
    write_text(&a.out.join("report.txt"), &table)?;
    write_text(&a.out.join("report.jsonl"), &report.to_jsonl()?)?;
    print!("{table}");
    Ok(())
}

fn benchmark(a: BenchmarkArgs) -> Result<(), Error> {
    let (h, w) = parse_size(&a.size)?;
    if a.reps == 0 {
        return Err(Error::InvalidArgument("--reps must be at least 1".into()));
    }
    let (mut cfg, weights) = match (&a.checkpoint, &a.config) {
        (Some(_), Some(_)) => {
            return Err(Error::InvalidArgument(
                "give either --checkpoint or --config, not both".into(),
            ))
        }
        (Some(c), None) => {
            require_file(c, "checkpoint")?;
            let (cfg, ws) = load_model(c)?;
            (cfg, Some(ws))
        }
        (None, Some(c)) => {
            require_file(c, "config")?;
            (RunConfig::load(c)?.model, None)
        }
        (None, None) => (ModelConfig::default(), None),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    if h.min(w) < cfg.min_size() {
        return Err(Error::InvalidArgument(format!(
            "size must be at least {0}x{0}",
            cfg.min_size()
        )));
    }
    let report = training::benchmark(&cfg, weights.as_ref(), h, w, a.reps, a.warmup)?;
    if let Some(o) = &a.out {
        create_dir(o)?;
        write_text(
            &o.join("benchmark.json"),
            &serde_json::to_string_pretty(&report)?,
        )?;
    }
    print!("{}", report.to_text());
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<(), Error> {
    let settings = a
        .settings
        .iter()
        .map(|s| AblationSetting::from_str(s))
        .collect::<Result<Vec<_>, _>>()?;
    if settings.is_empty() {
        return Err(Error::InvalidArgument("no ablation settings given".into()));
    }
    let mut run = load_run(&a.config, None, a.out, a.manifest)?;
    if let Some(s) = a.seed {
        run.train.seed = s;
    }
    let table = training::run_ablation(&run, &settings)?;
    let text = table.to_table();
    write_text(&run.train.out_dir.join("ablation.txt"), &text)?;
    write_text(
        &run.train.out_dir.join("ablation.json"),
        &serde_json::to_string_pretty(&table)?,
    )?;
    print!("{text}");
    Ok(())
}

fn niqe(a: NiqeFitArgs) -> Result<(), Error> {
    require_dir(&a.pristine, "--pristine")?;
    if a.patch < 4 || a.patch % 2 != 0 {
        return Err(Error::InvalidArgument(
            "--patch must be even and at least 4".into(),
        ));
    }
    let model = niqe_fit(&a.pristine, a.patch)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    model.save(&a.out)?;
    println!(
        "fitted NIQE model (patch {}, ridge {}) -> {}",
        model.patch,
        model.regularized,
        a.out.display()
    );
    Ok(())
}

fn grad(a: GradcheckArgs) -> Result<(), Failure> {
    let scopes: Vec<Scope> = if a.scope.eq_ignore_ascii_case("all") {
        Scope::ALL.to_vec()
    } else {
        vec![Scope::from_str(&a.scope)?]
    };
    let mut reports = Vec::with_capacity(scopes.len());
    for s in scopes {
        let r = gradcheck::run(s, a.seed)?;
        print!("{}", r.to_text());
        reports.push(r);
    }
    if let Some(o) = &a.out {
        create_dir(o)?;
        let json = serde_json::to_string_pretty(&reports).map_err(Error::from)?;
        write_text(&o.join("gradcheck.json"), &json)?;
    }
    if let Some(bad) = reports.iter().find(|r| !r.passed()) {
        return Err(Failure {
            code: EXIT_NUMERIC,
            message: format!(
                "gradient check failed for scope {} (max relative error {:.3e})",
                bad.scope,
                bad.max_error()
            ),
        });
    }
    Ok(())
}
