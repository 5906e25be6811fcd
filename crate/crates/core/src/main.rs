use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use floro::geoposition::{
    absolute_2d_sincos, geo_sincos_embedding, normalize_mercator, patch_centroids, GeoTransform, MercatorBounds,
    PatchGrid,
};
use floro::kv::KvMap;
use floro::probe::{ablation_run, FeatureSet, PeMode, ProbeConfig, ProbeReport};
use floro::synthcorpus::{build_corpus, load_split, CorpusManifest, Profile, ScenarioConfig, Split};
use floro::trainer::{load_checkpoint, train, TrainConfig};
use floro::Error;

const SEED_ENV: &str = "FLORO_SEED";
const RUN_FILE: &str = "run.txt";

#[derive(Parser)]
#[command(name = "floro", version, about = "Multimodal masked autoencoder pretraining and probing")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multimodal corpus.
    GenData(GenData),
    /// Pretrain the masked autoencoder on a corpus.
    Pretrain(Pretrain),
    /// Linear-probe a frozen encoder checkpoint.
    Probe(ProbeArgs),
    /// Print a checkpoint summary or positional-encoding tables.
    Inspect(Inspect),
}

#[derive(Args)]
struct GenData {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 256)]
    chips: usize,
    #[arg(long, default_value_t = 32)]
    size: usize,
    /// Comma-separated source profiles; chips are split evenly between them.
    #[arg(long, value_delimiter = ',', default_value = "S1S2,HIGHRES_OPT_ELEV,UAV_MS_DSM,UAV_RGB_DSM")]
    profiles: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Pretrain {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `key = value` file overriding the toy defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr: Option<f64>,
    /// Full checkpoint to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PeArg {
    Abs,
    Geo,
    Both,
}

#[derive(Args)]
struct ProbeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "both")]
    pe: PeArg,
    #[arg(long, default_value_t = 100)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct Inspect {
    #[arg(long, conflicts_with = "geo")]
    ckpt: Option<PathBuf>,
    /// Origin and pixel size, "O_x O_y D_x D_y".
    #[arg(long, allow_hyphen_values = true)]
    geo: Option<String>,
    #[arg(long, num_args = 2, value_names = ["ROWS", "COLS"], default_values_t = [2, 2])]
    grid: Vec<usize>,
    #[arg(long, default_value_t = 16)]
    patch: usize,
    #[arg(long, default_value_t = 8)]
    dim: usize,
}

enum Failure {
    Usage(String),
    Run(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Run(e)
    }
}

type CliResult = std::result::Result<(), Failure>;

fn usage(msg: impl Into<String>) -> Failure {
    Failure::Usage(msg.into())
}

fn resolve_seed(flag: Option<u64>) -> std::result::Result<u64, Failure> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| usage(format!("{SEED_ENV}={v:?} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

fn write_text(path: &Path, text: &str) -> floro::Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn create_dir(path: &Path) -> floro::Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn require_dir(path: &Path) -> floro::Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::Io {
            path: path.to_path_buf(),
            source: std::io::Error::new(std::io::ErrorKind::NotFound, "directory not found"),
        })
    }
}

fn gen_data(a: GenData) -> CliResult {
    let seed = resolve_seed(a.seed)?;
    if a.chips < 10 {
        return Err(usage(format!("--chips must be at least 10, got {}", a.chips)));
    }
    let profiles: Vec<Profile> = a
        .profiles
        .iter()
        .map(|p| p.parse::<Profile>().map_err(|e| usage(e.to_string())))
        .collect::<std::result::Result<_, _>>()?;
    if profiles.is_empty() {
        return Err(usage("--profiles is empty"));
    }
    if a.chips / profiles.len() < 10 {
        return Err(usage(format!(
            "--chips {} gives fewer than 10 chips for each of {} profiles",
            a.chips,
            profiles.len()
        )));
    }
    let scenarios: Vec<(ScenarioConfig, usize)> = profiles
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let share = a.chips / profiles.len() + usize::from(i < a.chips % profiles.len());
            (ScenarioConfig::new(p, a.size), share)
        })
        .collect();
    for (sc, _) in &scenarios {
        sc.validate().map_err(|e| usage(e.to_string()))?;
    }
    let manifest = build_corpus(&scenarios, seed, &a.out)?;
    let mut run = KvMap::default();
    run.insert("command", "gen-data");
    run.insert("chips", a.chips);
    run.insert("size", a.size);
    run.insert("profiles", profiles.iter().map(|p| p.name()).collect::<Vec<_>>().join(","));
    run.insert("seed", seed);
    write_text(&a.out.join(RUN_FILE), &run.to_text())?;
    let count = |s| manifest.split(s).count();
    println!(
        "wrote {} chips to {} (train {}, val {}, test {})",
        manifest.entries.len(),
        a.out.display(),
        count(Split::Train),
        count(Split::Val),
        count(Split::Test)
    );
    Ok(())
}

fn pretrain(a: Pretrain) -> CliResult {
    let mut overrides = match &a.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
            KvMap::parse(&text).map_err(|e| usage(format!("{}: {e}", path.display())))?
        }
        None => KvMap::default(),
    };
    if let Some(e) = a.epochs {
        overrides.insert("epochs", e);
    }
    if let Some(lr) = a.lr {
        overrides.insert("lr", lr);
    }
    // flag, then config file, then the environment fallback
    if a.seed.is_some() || overrides.get("seed").is_none() {
        overrides.insert("seed", resolve_seed(a.seed)?);
    }
    let config = TrainConfig::from_kv(&overrides, &TrainConfig::toy()).map_err(|e| usage(e.to_string()))?;
    require_dir(&a.data)?;
    let manifest = CorpusManifest::read(&a.data)?;
    let samples: Vec<_> = load_split(&a.data, &manifest, Split::Train)?
        .into_iter()
        .map(|(_, s)| s)
        .collect();
    let resume = a.resume.as_deref().map(load_checkpoint).transpose()?;
    if let Some(ck) = &resume {
        log::info!("resuming after epoch {}", ck.epoch);
    }
    let report = train(&samples, &config, Some(&a.out), resume)?;
    let mut run = config.to_kv();
    run.insert("command", "pretrain");
    run.insert("data", a.data.display());
    if let Some(r) = &a.resume {
        run.insert("resume", r.display());
    }
    write_text(&a.out.join(RUN_FILE), &run.to_text())?;
    if let (Some(first), Some(last)) = (report.epochs.first(), report.epochs.last()) {
        println!(
            "epochs {}..{}: mean loss {:.6} -> {:.6}",
            first.epoch, last.epoch, first.mean_total, last.mean_total
        );
    }
    println!("checkpoints in {}", a.out.display());
    Ok(())
}

fn write_report(dir: &Path, r: &ProbeReport) -> floro::Result<()> {
    let stem = r.pe_mode.to_string();
    write_text(&dir.join(format!("{stem}_metrics.txt")), &r.metrics_text())?;
    write_text(&dir.join(format!("{stem}_confusion.csv")), &r.confusion_csv())?;
    write_text(&dir.join(format!("{stem}_curve.csv")), &r.curve_csv())
}

fn probe(a: ProbeArgs) -> CliResult {
    let seed = resolve_seed(a.seed)?;
    if a.epochs == 0 || a.batch == 0 || a.lr.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(usage("--epochs, --batch and --lr must be positive"));
    }
    let ckpt = load_checkpoint(&a.ckpt)?;
    require_dir(&a.data)?;
    let manifest = CorpusManifest::read(&a.data)?;
    let load = |s| -> floro::Result<Vec<_>> {
        Ok(load_split(&a.data, &manifest, s)?.into_iter().map(|(_, x)| x).collect())
    };
    let (train_set, val_set) = (load(Split::Train)?, load(Split::Val)?);
    let num_classes = manifest
        .entries
        .iter()
        .filter_map(|e| e.label)
        .max()
        .map_or(0, |m| m + 1);
    let config = ProbeConfig {
        pe_mode: PeMode::AbsOnly,
        epochs: a.epochs,
        batch_size: a.batch,
        lr: a.lr,
        seed,
    };
    create_dir(&a.out)?;
    let mut run = KvMap::default();
    run.insert("command", "probe");
    run.insert("data", a.data.display());
    run.insert("ckpt", a.ckpt.display());
    run.insert("epochs", a.epochs);
    run.insert("batch", a.batch);
    run.insert("lr", a.lr);
    run.insert("seed", seed);
    run.insert("classes", num_classes);
    let single = |mode| -> floro::Result<ProbeReport> {
        FeatureSet::extract(&train_set, &val_set, &ckpt.params, &ckpt.model, mode)?.probe(num_classes, &config)
    };
    match a.pe {
        PeArg::Abs | PeArg::Geo => {
            let mode = if matches!(a.pe, PeArg::Abs) { PeMode::AbsOnly } else { PeMode::AbsPlusGeo };
            run.insert("pe", mode);
            let r = single(mode)?;
            write_report(&a.out, &r)?;
            println!(
                "{mode}: overall accuracy {:.4}, macro F1 {:.4}",
                r.overall_accuracy(),
                r.metrics.macro_f1
            );
        }
        PeArg::Both => {
            run.insert("pe", "both");
            let reports = ablation_run(&train_set, &val_set, &ckpt.params, &ckpt.model, num_classes, &config, &[seed])?;
            let r = &reports[0];
            write_report(&a.out, &r.abs)?;
            write_report(&a.out, &r.geo)?;
            write_text(&a.out.join("ablation.txt"), &r.summary())?;
            print!("{}", r.summary());
        }
    }
    write_text(&a.out.join(RUN_FILE), &run.to_text())?;
    Ok(())
}

fn inspect(a: Inspect) -> CliResult {
    use std::fmt::Write as _;
    let mut out = String::new();
    if let Some(path) = &a.ckpt {
        let ck = load_checkpoint(path)?;
        writeln!(out, "kind: {}", if ck.is_encoder_only() { "encoder" } else { "full" }).expect("write to string");
        writeln!(out, "epoch: {}", ck.epoch).expect("write to string");
        writeln!(out, "seed: {}", ck.seed).expect("write to string");
        out.push_str(&ck.model.to_kv().to_text());
        writeln!(out, "parameters: {}", ck.params.num_elements()).expect("write to string");
        for (name, t) in ck.params.iter() {
            writeln!(out, "  {name} {:?}", t.shape()).expect("write to string");
        }
        if let Some(opt) = &ck.optimizer {
            writeln!(out, "optimizer step: {}", opt.step).expect("write to string");
        }
        emit(&out);
        return Ok(());
    }
    let Some(geo) = &a.geo else {
        return Err(usage("inspect needs --ckpt or --geo"));
    };
    let nums: Vec<f64> = geo
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| usage(format!("--geo expects four numbers, got {geo:?}")))?;
    let [ox, oy, dx, dy] = nums[..] else {
        return Err(usage(format!("--geo expects four numbers, got {geo:?}")));
    };
    let gt = GeoTransform::north_up(ox, oy, dx, dy);
    let grid = PatchGrid::new(a.grid[0], a.grid[1], a.patch).map_err(|e| usage(e.to_string()))?;
    if a.dim == 0 || a.dim % 4 != 0 {
        return Err(usage(format!("--dim must be a positive multiple of 4, got {}", a.dim)));
    }
    let centroids = patch_centroids(&gt, &grid).map_err(|e| usage(e.to_string()))?;
    let norm = normalize_mercator(&centroids, &MercatorBounds::default())?;
    let geo_pe = geo_sincos_embedding(&norm, a.dim)?;
    let abs_pe = absolute_2d_sincos(&grid, a.dim)?;
    writeln!(out, "geotransform: {gt}").expect("write to string");
    writeln!(out, "grid: {}x{} patches of {} px, dim {}", grid.rows, grid.cols, grid.patch_size, a.dim).expect("write to string");
    for (i, ((c, n), (g, p))) in centroids
        .iter()
        .zip(&norm)
        .zip(geo_pe.data().chunks(a.dim).zip(abs_pe.data().chunks(a.dim)))
        .enumerate()
    {
        writeln!(out, "patch {} (row {}, col {})", i, i / grid.cols, i % grid.cols).expect("write to string");
        writeln!(out, "  centroid   C_x {} C_y {}", c.0, c.1).expect("write to string");
        writeln!(out, "  normalized N_x {} N_y {}", n.0, n.1).expect("write to string");
        writeln!(out, "  geo pe     {}", join(g)).expect("write to string");
        writeln!(out, "  abs pe     {}", join(p)).expect("write to string");
    }
    emit(&out);
    Ok(())
}

/// Writes to stdout, ignoring a reader that went away early.
fn emit(text: &str) {
    use std::io::Write;
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Pretrain(a) => pretrain(a),
        Command::Probe(a) => probe(a),
        Command::Inspect(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
