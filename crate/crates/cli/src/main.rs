//! `keepcore`: synthetic data, oracle training, offline map generation,
//! KEEP-augmented training, evaluation and map rendering.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 numeric failure (including
//! an oracle that trains below its Dice gate).

use std::fmt;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use keepcore::augment::AugmentSpec;
use keepcore::keep::{keep_augment, KeepAudit};
use keepcore::metrics::{summarize, summary_csv};
use keepcore::pipeline::dataset::{load_image, save_labels};
use keepcore::pipeline::{
    derive_seed, evaluate, generate_maps, render_map, synth_dataset, train_oracle, train_with_keep, DatasetManifest,
    MapArchive, Mode, RunConfig, TrainReport,
};
use keepcore::tensor::io as kct;
use keepcore::{ImportanceMap, OracleNet};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "keepcore", version, about = "Importance maps and core-preserving augmentation for segmentation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Top-level seed; replaces the config's and re-derives every stream seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for map generation and augmentation.
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Output directory; replaces `outputs` from the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset to <out>/data.
    Synth {
        #[command(flatten)]
        common: Common,
        /// Number of samples; defaults to the config's `synth.count`.
        #[arg(long)]
        count: Option<usize>,
    },
    /// Pre-train the oracle on clean images and save <out>/oracle.kco.
    TrainOracle {
        #[command(flatten)]
        common: Common,
        /// Dataset manifest [default: <out>/data/manifest.json].
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Generate one importance map per image into <out>/maps.
    Sage {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Oracle weights [default: config `oracle.weights`, then <out>/oracle.kco].
        #[arg(long)]
        oracle: Option<PathBuf>,
        /// Perturbation budget in intensity units; overrides the config [default: 0.05].
        #[arg(long)]
        epsilon: Option<f64>,
        /// Optimisation steps per image; overrides the config [default: 200].
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Write KEEP-augmented copies of every sample to <out>/keep.
    KeepAug {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Map archive [default: <out>/maps].
        #[arg(long)]
        maps: Option<PathBuf>,
    },
    /// Train a segmentation model with the configured augmentation.
    Train {
        #[command(flatten)]
        common: Common,
        /// `baseline_aug` or `keep_core`.
        #[arg(long)]
        mode: Mode,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Map archive for keep_core [default: <out>/maps].
        #[arg(long)]
        maps: Option<PathBuf>,
    },
    /// Score saved weights on the held-out split.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Model weights to evaluate.
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Render a map as a PGM, or as a PPM overlay when an image is given.
    Render {
        /// KCW1 map file.
        #[arg(long)]
        map: PathBuf,
        /// Image to blend under the map.
        #[arg(long)]
        image: Option<PathBuf>,
        /// Output file.
        #[arg(long)]
        out: PathBuf,
    },
}

enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numeric(m) => f.write_str(m),
        }
    }
}

impl From<keepcore::Error> for Failure {
    fn from(e: keepcore::Error) -> Self {
        match e {
            keepcore::Error::NonFinite(_) => Failure::Numeric(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code())
        }
    }
}

/// Loaded configuration plus the resolved output directory.
struct Setup {
    cfg: RunConfig,
    out: PathBuf,
    workers: usize,
}

impl Setup {
    fn new(common: &Common) -> Result<Self, Failure> {
        let mut cfg = RunConfig::load(&common.config)?;
        if let Some(seed) = common.seed {
            cfg.reseed(seed);
        }
        if let Some(out) = &common.out {
            cfg.outputs = out.clone();
        }
        if common.workers == 0 {
            return Err(Failure::Usage("--workers must be at least 1".into()));
        }
        cfg.validate()?;
        let out = cfg.outputs.clone();
        create_dir(&out)?;
        Ok(Setup {
            cfg,
            out,
            workers: common.workers,
        })
    }

    fn manifest(&self, given: &Option<PathBuf>) -> Result<DatasetManifest, Failure> {
        let path = given.clone().unwrap_or_else(|| self.out.join("data").join("manifest.json"));
        Ok(DatasetManifest::load(path)?)
    }

    fn maps(&self, given: &Option<PathBuf>) -> PathBuf {
        given.clone().unwrap_or_else(|| self.out.join("maps"))
    }
}

fn create_dir(dir: &Path) -> Outcome {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Outcome {
    std::fs::write(path, bytes).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Outcome {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    write(path, text)
}

#[derive(Serialize)]
struct TrainSummary<'a> {
    mode: Mode,
    weights_hash: String,
    best_epoch: usize,
    train_dice: f64,
    test_dice: f64,
    epoch_loss: &'a [f64],
    val_dice: &'a [f64],
}

impl<'a> TrainSummary<'a> {
    fn of(r: &'a TrainReport) -> Self {
        TrainSummary {
            mode: r.mode,
            weights_hash: r.model.weights_hash(),
            best_epoch: r.best_epoch,
            train_dice: r.train_dice,
            test_dice: r.test_dice(),
            epoch_loss: &r.epoch_loss,
            val_dice: &r.val_dice,
        }
    }
}

fn run(command: Command) -> Outcome {
    match command {
        Command::Synth { common, count } => {
            let s = Setup::new(&common)?;
            let n = count.unwrap_or(s.cfg.synth.count);
            if n == 0 {
                return Err(Failure::Usage("--count must be at least 1".into()));
            }
            let m = synth_dataset(&s.cfg.synth, n, &s.out.join("data"))?;
            println!("wrote {} samples to {}", m.len(), s.out.join("data").display());
            Ok(())
        }
        Command::TrainOracle { common, manifest } => {
            let s = Setup::new(&common)?;
            let m = s.manifest(&manifest)?;
            let report = train_oracle(&m, &s.cfg)?;
            let path = s.out.join("oracle.kco");
            report.model.save(&path)?;
            write_json(&s.out.join("oracle.json"), &TrainSummary::of(&report))?;
            println!(
                "oracle saved to {}; train dice {:.4}, best epoch {}",
                path.display(),
                report.train_dice,
                report.best_epoch
            );
            let gate = s.cfg.training.dice_gate;
            if report.train_dice < gate {
                eprintln!("warning: train dice {:.4} is below the gate {gate}", report.train_dice);
                return Err(Failure::Numeric(format!(
                    "oracle did not converge (dice {:.4} < {gate}); weights were saved",
                    report.train_dice
                )));
            }
            Ok(())
        }
        Command::Sage {
            common,
            manifest,
            oracle,
            epsilon,
            steps,
        } => {
            let mut s = Setup::new(&common)?;
            if let Some(e) = epsilon {
                s.cfg.sage.epsilon = e;
            }
            if let Some(n) = steps {
                s.cfg.sage.steps = n;
            }
            s.cfg.sage.validate().map_err(|e| Failure::Usage(e.to_string()))?;
            let m = s.manifest(&manifest)?;
            let path = oracle
                .or_else(|| s.cfg.oracle.weights.clone())
                .unwrap_or_else(|| s.out.join("oracle.kco"));
            let net = OracleNet::load(&path)?.frozen();
            if net.num_classes() != m.num_classes {
                return Err(Failure::Data(format!(
                    "oracle predicts {} classes, dataset has {}",
                    net.num_classes(),
                    m.num_classes
                )));
            }
            let dir = s.maps(&None);
            let archive = generate_maps(&m, &net, &s.cfg.sage, s.workers, &dir)?;
            println!("wrote {} maps to {}", archive.index.entries.len(), dir.display());
            if !archive.is_complete() {
                for f in &archive.index.failures {
                    eprintln!("{}: {}", f.image_id, f.error);
                }
                return Err(Failure::Data(format!("{} images failed", archive.index.failures.len())));
            }
            Ok(())
        }
        Command::KeepAug { common, manifest, maps } => {
            let s = Setup::new(&common)?;
            let m = s.manifest(&manifest)?;
            let archive = MapArchive::open(s.maps(&maps))?;
            keep_aug(&s, &m, &archive)
        }
        Command::Train {
            common,
            mode,
            manifest,
            maps,
        } => {
            let s = Setup::new(&common)?;
            let m = s.manifest(&manifest)?;
            let archive = match mode {
                Mode::KeepCore => {
                    let dir = s.maps(&maps);
                    if !dir.join(keepcore::pipeline::maps::INDEX_FILE).exists() {
                        return Err(Failure::Data(format!(
                            "keep_core needs importance maps; no archive at {}",
                            dir.display()
                        )));
                    }
                    Some(MapArchive::open(dir)?)
                }
                Mode::BaselineAug => None,
            };
            let report = train_with_keep(&m, archive.as_ref(), &s.cfg, mode)?;
            let name = match mode {
                Mode::BaselineAug => "baseline_aug",
                Mode::KeepCore => "keep_core",
            };
            let dir = s.out.join(format!("train_{name}"));
            create_dir(&dir)?;
            report.model.save(dir.join("model.kco"))?;
            write(&dir.join("report.csv"), report.csv())?;
            write_json(&dir.join("summary.json"), &TrainSummary::of(&report))?;
            println!("{name}: test dice {:.4}, best epoch {}", report.test_dice(), report.best_epoch);
            print!("{}", report.csv());
            Ok(())
        }
        Command::Eval {
            common,
            weights,
            manifest,
        } => {
            let s = Setup::new(&common)?;
            let m = s.manifest(&manifest)?;
            let net = OracleNet::load(&weights)?.frozen();
            let records = evaluate(&net, &m, &s.cfg)?;
            let csv = summary_csv(&summarize(&records));
            let dir = s.out.join("eval");
            create_dir(&dir)?;
            write(&dir.join("metrics.csv"), &csv)?;
            print!("{csv}");
            Ok(())
        }
        Command::Render { map, image, out } => {
            let w = ImportanceMap::load(&map)?;
            let img = image.as_deref().map(load_image).transpose()?;
            render_map(&w, img.as_ref())?.save(&out)?;
            println!("wrote {}", out.display());
            Ok(())
        }
    }
}

/// Augments every sample with its map; the partner for mixing kinds is the
/// next sample in manifest order.
fn keep_aug(s: &Setup, m: &DatasetManifest, archive: &MapArchive) -> Outcome {
    let samples = m.load_all()?;
    if samples.is_empty() {
        return Ok(());
    }
    let dir = s.out.join("keep");
    for sub in ["images", "labels"] {
        create_dir(&dir.join(sub))?;
    }
    let aug: &AugmentSpec = &s.cfg.augment;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(s.workers)
        .build()
        .map_err(|e| Failure::Usage(e.to_string()))?;
    let one = |i: usize| -> Result<KeepAudit, Failure> {
        let x = &samples[i];
        let w = archive
            .load(&x.id)?
            .ok_or_else(|| Failure::Data(format!("{}: no map in the archive", x.id)))?;
        let partner = &samples[(i + 1) % samples.len()];
        let partner = aug.needs_partner().then_some((&partner.image, &partner.labels));
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(s.cfg.keep.seed, &["keep-aug", &x.id]));
        let out = keep_augment(&x.image, &x.labels, &w, aug, &s.cfg.keep, &mut rng, partner)?;
        kct::save(&out.sample.image, dir.join("images").join(format!("{}.kct", x.id)))?;
        save_labels(&out.sample.labels, &dir.join("labels").join(format!("{}.pgm", x.id)))?;
        Ok(out.audit(x.id.clone()))
    };
    let audits: Vec<KeepAudit> = pool.install(|| (0..samples.len()).into_par_iter().map(one).collect::<Result<_, _>>())?;
    write_json(&dir.join("audit.json"), &audits)?;
    println!("wrote {} augmented samples to {}", audits.len(), dir.display());
    Ok(())
}
