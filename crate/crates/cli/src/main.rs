use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use hmode::checkpoint::{read_header, Checkpoint};
use hmode::config::TrainConfig;
use hmode::data::{load_dataset, load_image, synth_dataset, write_dataset, SyntheticSceneSpec};
use hmode::train::{evaluate, predict_density, write_density_dump, StepRecord, Trainer, FINAL_CHECKPOINT};
use hmode::{gradcheck, Element, Error, Result};

#[derive(Parser)]
#[command(name = "hmode", version, about = "Crowd counting with hierarchical mixtures of density experts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model on an annotated image directory.
    Train {
        /// Flat `key = value` config file; defaults apply to missing keys.
        #[arg(long, conflicts_with = "resume")]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint, reusing its config.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Print every n-th step.
        #[arg(long, default_value_t = 10)]
        log_every: u64,
        #[command(flatten)]
        overrides: Box<Overrides>,
    },
    /// Full-image evaluation of a checkpoint.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Per-image CSV report.
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Summary JSON file; the summary is always printed.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Finite-difference check of every parameter gradient at 64 bits.
    Gradcheck {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Write a synthetic dataset described by a JSON spec.
    Synth {
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Dump the predicted density of one image.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// One flag per config key, applied after the config file and `HMODE_SEED`.
#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long = "lr_halve_at", alias = "lr-halve-at")]
    lr_halve_at: Option<String>,
    #[arg(long = "batch_size", alias = "batch-size")]
    batch_size: Option<String>,
    #[arg(long)]
    k: Option<String>,
    #[arg(long)]
    n: Option<String>,
    #[arg(long = "w_divisor", alias = "w-divisor")]
    w_divisor: Option<String>,
    #[arg(long)]
    s: Option<String>,
    #[arg(long)]
    sigma: Option<String>,
    #[arg(long)]
    crop: Option<String>,
    #[arg(long = "hflip_prob", alias = "hflip-prob")]
    hflip_prob: Option<String>,
    #[arg(long = "fusion_mode", alias = "fusion-mode")]
    fusion_mode: Option<String>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    precision: Option<String>,
    #[arg(long = "max_steps", alias = "max-steps")]
    max_steps: Option<String>,
    #[arg(long = "save_every", alias = "save-every")]
    save_every: Option<String>,
}

impl Overrides {
    fn pairs(&self) -> [(&'static str, &Option<String>); 17] {
        [
            ("lr", &self.lr),
            ("epochs", &self.epochs),
            ("lr_halve_at", &self.lr_halve_at),
            ("batch_size", &self.batch_size),
            ("k", &self.k),
            ("n", &self.n),
            ("w_divisor", &self.w_divisor),
            ("s", &self.s),
            ("sigma", &self.sigma),
            ("crop", &self.crop),
            ("hflip_prob", &self.hflip_prob),
            ("fusion_mode", &self.fusion_mode),
            ("preset", &self.preset),
            ("seed", &self.seed),
            ("precision", &self.precision),
            ("max_steps", &self.max_steps),
            ("save_every", &self.save_every),
        ]
    }

    fn apply(&self, cfg: &mut TrainConfig) -> Result<()> {
        for (key, value) in self.pairs() {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        cfg.validate()
    }
}

/// Synthetic dataset description; scene fields default to
/// [`SyntheticSceneSpec::new`].
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SynthFile {
    images: usize,
    image_size: (usize, usize),
    count_range: Option<(usize, usize)>,
    cluster_count: Option<usize>,
    blob_radius: Option<f64>,
    #[serde(default)]
    seed: u64,
}

impl SynthFile {
    fn scene(&self) -> SyntheticSceneSpec {
        let d = SyntheticSceneSpec::new(self.image_size, self.seed);
        SyntheticSceneSpec {
            count_range: self.count_range.unwrap_or(d.count_range),
            cluster_count: self.cluster_count.unwrap_or(d.cluster_count),
            blob_radius: self.blob_radius.unwrap_or(d.blob_radius),
            ..d
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::load(p),
        None => {
            let mut cfg = TrainConfig::default();
            cfg.apply_env()?;
            Ok(cfg)
        }
    }
}

fn print_step(r: &StepRecord) {
    let mut line = format!(
        "epoch {:>4} step {:>6} lr {:.2e} loss {:.6e} des {:.6e} rel {:.6e}",
        r.epoch, r.step, r.lr, r.loss.total, r.loss.density, r.loss.relative
    );
    if let Some(a) = r.loss.attention {
        line += &format!(" att {a:.6e}");
    }
    if let Some(e) = r.loss.importance {
        line += &format!(" eim {e:.6e}");
    }
    println!("{line} batch_mae {:.3}", r.batch_mae);
}

fn train<T: Element>(mut trainer: Trainer<T>, data: &Path, out: &Path, log_every: u64) -> Result<()> {
    let dataset = load_dataset(data)?;
    if dataset.is_empty() {
        return Err(Error::Dataset(format!("no images under {}", data.display())));
    }
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.into(),
        source: e,
    })?;
    println!(
        "training on {} images, {} parameters, {}-bit",
        dataset.len(),
        trainer.model.param_count(),
        T::BITS
    );
    let every = log_every.max(1);
    let shown = |r: &StepRecord| r.step.is_multiple_of(every) || r.step == 1;
    let records = trainer.run(&dataset, Some(out), |r| {
        if shown(r) {
            print_step(r);
        }
    })?;
    if let Some(last) = records.last().filter(|r| !shown(r)) {
        print_step(last);
    }
    println!("wrote {}", out.join(FINAL_CHECKPOINT).display());
    Ok(())
}

fn start_training<T: Element>(cfg: TrainConfig, resume: Option<&Path>, overrides: &Overrides) -> Result<Trainer<T>> {
    match resume {
        None => Trainer::new(cfg),
        Some(path) => {
            let mut ck = Checkpoint::<T>::load(path)?;
            overrides.apply(&mut ck.header.config)?;
            Trainer::from_checkpoint(&ck)
        }
    }
}

fn load_trainer<T: Element>(path: &Path) -> Result<Trainer<T>> {
    Trainer::from_checkpoint(&Checkpoint::<T>::load(path)?)
}

fn eval_at<T: Element>(ckpt: &Path, data: &Path, csv: Option<&Path>, json: Option<&Path>) -> Result<()> {
    let trainer = load_trainer::<T>(ckpt)?;
    let dataset = load_dataset(data)?;
    if dataset.is_empty() {
        return Err(Error::Dataset(format!("no images under {}", data.display())));
    }
    let report = evaluate(&trainer.model, &dataset, trainer.config.sigma)?;
    if let Some(path) = csv {
        report.write_csv(path)?;
    }
    let summary = report.summary_json();
    if let Some(path) = json {
        std::fs::write(path, &summary).map_err(|e| Error::Io {
            path: path.into(),
            source: e,
        })?;
    }
    println!("{summary}");
    Ok(())
}

fn predict_at<T: Element>(ckpt: &Path, image: &Path, out: &Path) -> Result<()> {
    let trainer = load_trainer::<T>(ckpt)?;
    let density = predict_density(&trainer.model, &load_image(image)?)?;
    write_density_dump(out, &density)?;
    println!("{}", density.data().iter().map(|&v| v as f64).sum::<f64>());
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Train {
            config,
            data,
            out,
            resume,
            log_every,
            overrides,
        } => {
            let (mut cfg, resume) = match &resume {
                Some(p) => (read_header(p)?.config, Some(p.as_path())),
                None => (load_config(config.as_deref())?, None),
            };
            overrides.apply(&mut cfg)?;
            match cfg.precision {
                64 => train(start_training::<f64>(cfg, resume, &overrides)?, &data, &out, log_every)?,
                _ => train(start_training::<f32>(cfg, resume, &overrides)?, &data, &out, log_every)?,
            }
        }
        Command::Eval { ckpt, data, csv, json } => match read_header(&ckpt)?.precision {
            64 => eval_at::<f64>(&ckpt, &data, csv.as_deref(), json.as_deref())?,
            _ => eval_at::<f32>(&ckpt, &data, csv.as_deref(), json.as_deref())?,
        },
        Command::Gradcheck { config } => {
            let report = gradcheck::run(&load_config(config.as_deref())?)?;
            println!("{report}");
            if !report.passed() {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Synth { spec, out } => {
            let text = std::fs::read_to_string(&spec).map_err(|e| Error::Io {
                path: spec.clone(),
                source: e,
            })?;
            let file: SynthFile = serde_json::from_str(&text)?;
            let items = synth_dataset(&file.scene(), file.images)?;
            write_dataset(&out, &items)?;
            let heads: usize = items.iter().map(|i| i.count()).sum();
            println!("wrote {} images with {heads} heads to {}", items.len(), out.display());
        }
        Command::Predict { ckpt, image, out } => match read_header(&ckpt)?.precision {
            64 => predict_at::<f64>(&ckpt, &image, &out)?,
            _ => predict_at::<f32>(&ckpt, &image, &out)?,
        },
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
