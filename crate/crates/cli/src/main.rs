//! `dhi` command-line driver.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numerical failure.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use dhi_core::data::{generate, read_manifest, GenConfig, Split};
use dhi_core::detector::{ModelConfig, PostProcess};
use dhi_core::gradcheck::run_suite;
use dhi_core::operators::OperatorKind;
use dhi_core::profiler::{emit_comparison, profile_model, published_delta_csv};
use dhi_core::train::{eval_to_dir, train_to_dir, TrainConfig, CONFIG_FILE, DEFAULT_LR};
use dhi_core::Error;

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "dhi", version, about = "RGB-D detection with depth-aware hyper-involution")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic RGB-D detection dataset.
    GenData(GenArgs),
    /// Train a detector from scratch.
    Train(TrainArgs),
    /// Evaluate saved weights with VOC-style AP.
    Eval(EvalArgs),
    /// Parameter-count comparison and per-layer FLOP table.
    Profile(ProfileArgs),
    /// Finite-difference check of every differentiable op.
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
struct GenArgs {
    /// Number of training images.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    count: u64,
    /// Number of test images.
    #[arg(long, default_value_t = 0)]
    test_count: usize,
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(1..))]
    classes: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 96, value_parser = clap::value_parser!(u64).range(8..))]
    size: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Preset {
    /// 416-pixel input with the full-width backbone.
    Full,
    /// 96-pixel input with a narrow backbone.
    Desk,
}

impl Preset {
    fn config(self) -> ModelConfig {
        match self {
            Preset::Full => ModelConfig::default(),
            Preset::Desk => ModelConfig::desk(),
        }
    }
}

/// Model configuration sources, applied in order: preset, file, flags.
#[derive(Args, Debug)]
struct ModelArgs {
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set input_size=128`.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_pair)]
    set: Vec<(String, String)>,
}

fn parse_pair(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("`{s}` is not KEY=VALUE"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

impl ModelArgs {
    /// Builds the config and returns the keys given explicitly by file or
    /// flags.
    fn resolve(&self, default: Preset, flags: &[(&str, Option<String>)]) -> Result<(ModelConfig, BTreeMap<String, String>), Error> {
        let mut cfg = self.preset.unwrap_or(default).config();
        let mut explicit = BTreeMap::new();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Format {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            let pairs = dhi_core::detector::config::parse_kv(&text)?;
            cfg.apply(&pairs)?;
            explicit.extend(pairs);
        }
        for (k, v) in &self.set {
            cfg.set(k, v)?;
            explicit.insert(k.clone(), v.clone());
        }
        for (k, v) in flags {
            if let Some(v) = v {
                cfg.set(k, v)?;
                explicit.insert(k.to_string(), v.clone());
            }
        }
        cfg.validate()?;
        Ok((cfg, explicit))
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    #[arg(long, default_value_t = DEFAULT_LR)]
    lr: f64,
    /// Depth-weighting sharpness (default 9.5).
    #[arg(long)]
    gamma: Option<f64>,
    /// imq, gaussian, triangular or wendland.
    #[arg(long)]
    weighting: Option<String>,
    #[arg(long)]
    kernel_size: Option<usize>,
    #[arg(long, default_value_t = 8)]
    batch_size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Training augmentation: none, hflip or dihedral.
    #[arg(long, default_value = "dihedral")]
    augment: String,
    #[command(flatten)]
    model: ModelArgs,
    /// Output directory for weights.dhi, model.cfg and loss.csv.
    #[arg(long)]
    out: PathBuf,
}

fn parse_iou(s: &str) -> Result<f64, String> {
    match s.parse::<f64>() {
        Ok(v) if v > 0.0 && v < 1.0 => Ok(v),
        Ok(v) => Err(format!("{v} is outside (0, 1)")),
        Err(e) => Err(e.to_string()),
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitArg {
    Train,
    Test,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    weights: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "0.5", value_parser = parse_iou)]
    iou: f64,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Model config; defaults to `model.cfg` next to the weights.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory; defaults to `eval/` next to the weights.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct ProfileArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Scale the backward pass of one op to exercise failure reporting.
    #[arg(long, hide = true)]
    corrupt_op: Option<String>,
}

/// A failed command with its exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_numerical() {
            EXIT_NUMERIC
        } else if e.is_data_error() {
            EXIT_DATA
        } else {
            EXIT_USAGE
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type CmdResult = Result<(), Failure>;

fn write_out(dir: &Path, name: &str, text: &str) -> Result<(), Error> {
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| Error::Format {
        path,
        reason: e.to_string(),
    })
}

fn create_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Format {
        path: dir.to_path_buf(),
        reason: e.to_string(),
    })
}

fn gen_data(a: GenArgs) -> CmdResult {
    let cfg = GenConfig {
        count: a.count as usize,
        test_count: a.test_count,
        classes: a.classes as usize,
        size: a.size as usize,
        seed: a.seed,
    };
    let start = std::time::Instant::now();
    let m = generate(&a.out, &cfg)?;
    let secs = start.elapsed().as_secs_f64();
    info!(
        "generated {} images in {secs:.2}s ({:.1} images/s)",
        m.train.len() + m.test.len(),
        (m.train.len() + m.test.len()) as f64 / secs.max(1e-9)
    );
    println!(
        "wrote {} train and {} test images to {}",
        m.train.len(),
        m.test.len(),
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> CmdResult {
    let manifest = read_manifest(&a.data)?;
    let flags = [
        ("gamma", a.gamma.map(|v| v.to_string())),
        ("weighting", a.weighting.clone()),
        ("kernel_size", a.kernel_size.map(|v| v.to_string())),
    ];
    let (mut cfg, explicit) = a.model.resolve(Preset::Desk, &flags)?;
    if !explicit.contains_key("classes") {
        cfg.classes = manifest.classes;
    } else if cfg.classes != manifest.classes {
        return Err(Error::Data(format!(
            "config has {} classes, dataset has {}",
            cfg.classes, manifest.classes
        ))
        .into());
    }
    let tc = TrainConfig {
        epochs: a.epochs,
        lr: a.lr,
        batch_size: a.batch_size,
        seed: a.seed,
        augment: a.augment.parse()?,
        ..TrainConfig::default()
    };
    info!("training {} epochs on {} images", tc.epochs, manifest.train.len());
    let (_, history) = train_to_dir(&a.data, &a.out, cfg, &tc)?;
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        println!(
            "loss {:.5} -> {:.5} over {} epochs; outputs in {}",
            first.parts.total(),
            last.parts.total(),
            history.len(),
            a.out.display()
        );
    }
    Ok(())
}

fn eval(a: EvalArgs) -> CmdResult {
    let parent = a.weights.parent().unwrap_or(Path::new(".")).to_path_buf();
    let cfg_path = a.config.clone().unwrap_or_else(|| parent.join(CONFIG_FILE));
    let cfg = ModelConfig::load(&cfg_path)?;
    let out = a.out.clone().unwrap_or_else(|| parent.join("eval"));
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Test => Split::Test,
    };
    let e = eval_to_dir(&a.weights, cfg, &a.data, split, &out, &PostProcess::default(), a.iou)?;
    print!("{}", e.table_text());
    match e.map {
        Some(_) => Ok(()),
        None => Err(Failure {
            code: EXIT_DATA,
            message: "mAP is undefined: the split has no ground-truth boxes".into(),
        }),
    }
}

fn profile(a: ProfileArgs) -> CmdResult {
    let (cfg, _) = a.model.resolve(Preset::Full, &[])?;
    create_dir(&a.out)?;
    let kinds = OperatorKind::ALL;
    let sizes = [1, 3, 5, 7, 9];
    let trainable = emit_comparison(&kinds, &sizes, false);
    write_out(&a.out, "params_comparison.csv", &trainable)?;
    write_out(&a.out, "params_comparison_bn_stats.csv", &emit_comparison(&kinds, &sizes, true))?;
    write_out(&a.out, "params_published_delta.csv", &published_delta_csv())?;
    let p = profile_model(&cfg)?;
    write_out(&a.out, "model_profile.csv", &p.table_csv())?;
    write_out(&a.out, "model_profile.txt", &p.table_text())?;
    write_out(&a.out, "model.cfg", &cfg.to_kv())?;
    print!("{trainable}");
    println!(
        "model: {} params, {:.4} GFLOPs at {}x{}; tables in {}",
        p.total_params(),
        p.gflops(),
        cfg.input_size,
        cfg.input_size,
        a.out.display()
    );
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> CmdResult {
    let results = run_suite(a.seed, a.corrupt_op.as_deref())?;
    let mut failed = 0;
    for r in &results {
        println!(
            "{:<6} {:<36} seed {:<4} n={:<6} h={:<6.0e} rel_err {:.3e}",
            if r.passed { "ok" } else { "FAIL" },
            r.name,
            r.seed,
            r.scalars,
            r.step,
            r.rel_error
        );
        failed += usize::from(!r.passed);
    }
    println!("{} checks, {failed} failed", results.len());
    if failed > 0 {
        return Err(Failure {
            code: EXIT_NUMERIC,
            message: format!("{failed} gradient checks failed"),
        });
    }
    Ok(())
}

fn init_threads() -> CmdResult {
    let Ok(v) = std::env::var("DHI_THREADS") else { return Ok(()) };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| Failure {
        code: EXIT_USAGE,
        message: format!("DHI_THREADS must be a positive integer, got `{v}`"),
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure {
            code: EXIT_USAGE,
            message: e.to_string(),
        })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    let result = init_threads().and_then(|()| match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Profile(a) => profile(a),
        Command::Gradcheck(a) => gradcheck(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
