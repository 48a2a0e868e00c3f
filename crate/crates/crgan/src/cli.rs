//! The `crgan` command line: one subcommand per pipeline stage.
//!
//! Every stage writes into a subdirectory of `--out` and reads what earlier
//! stages left there. Manifests carry the hash of the configuration file
//! that produced them; flag overrides are recorded in the manifests
//! themselves.

use std::fs;
use std::path::{Path, PathBuf};

use candle_core::DType;
use clap::{Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::artifacts::{
    load_backbone, load_classifier, require, save_backbone, save_classifier, sha256_file, write_csv, write_toml,
    BackboneManifest, ClassifierManifest, DatasetManifest, EvaluationManifest, SynthesisManifest, Workspace,
    BACKBONE_WEIGHTS, DATA_MANIFEST, EVALUATION_MANIFEST, FINETUNE_TELEMETRY, METRICS, SSL_TELEMETRY,
    SYNTHESIS_MANIFEST,
};
use crate::checkpoint::{dtype_name, list_checkpoints, load_manifest, load_trainer};
use crate::config::PipelineConfig;
use crate::data::{load_chip_dataset, save_dataset, toy, Dataset, Split};
use crate::fewshot::{evaluate, finetune, render_table, sample_k_shot, Classifier, FinetuneMode, MetricRecord};
use crate::gradcheck::{run_suite, TOLERANCE};
use crate::pipeline::{synthesize_dataset, train_gan, GanRun};
use crate::report::{build_report, classifier_dirs};
use crate::ssl::{simclr_pretrain_with, Backbone};
use crate::trainer::{NegativesMode, Trainer};
use crate::{Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "crgan",
    version,
    about = "Few-shot generative augmentation with a consistency-regularized GAN"
)]
pub struct Cli {
    /// Pipeline configuration file. Without it the preset is used.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Built-in configuration used when no file is given.
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    pub preset: Preset,
    /// Workspace root holding every stage's output.
    #[arg(long, global = true, default_value = "crgan-out")]
    pub out: PathBuf,
    /// Seed of this stage.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// 64-pixel models at full size.
    Paper,
    /// 32-pixel models for a single CPU core.
    Desk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Negatives {
    Union,
    BatchOnly,
    BankOnly,
}

impl From<Negatives> for NegativesMode {
    fn from(n: Negatives) -> Self {
        match n {
            Negatives::Union => Self::Union,
            Negatives::BatchOnly => Self::BatchOnly,
            Negatives::BankOnly => Self::BankOnly,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Init {
    /// Encoder from `pretrain`.
    Pretrained,
    /// Randomly initialised encoder of the same architecture.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Tune {
    Full,
    Head,
}

impl From<Tune> for FinetuneMode {
    fn from(t: Tune) -> Self {
        match t {
            Tune::Full => Self::Full,
            Tune::Head => Self::Head,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic speckled-target dataset.
    MakeToyData,
    /// Train the GAN on the real training split.
    TrainGan {
        /// Labeled chip folder; defaults to the workspace data.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Resume from this checkpoint directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<u64>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        checkpoint_every: Option<u64>,
        #[arg(long)]
        mask_p: Option<f64>,
        #[arg(long)]
        disable_fr: bool,
        #[arg(long)]
        disable_ms: bool,
        /// Plain feature distances instead of the alignment-uniform form.
        #[arg(long)]
        use_eq8_distance: bool,
        #[arg(long, value_enum)]
        negatives: Option<Negatives>,
        /// Turn off quarter-turn and flip augmentation of real batches.
        #[arg(long)]
        no_augment: bool,
    },
    /// Write generated images from a checkpoint.
    Synthesize {
        /// Checkpoint directory; defaults to the latest one.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
    },
    /// Contrastively pretrain an encoder on the synthetic images.
    Pretrain {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Fine-tune k-shot classifiers, one per seed.
    Finetune {
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, value_enum, default_value_t = Init::Pretrained)]
        init: Init,
        #[arg(long, value_enum)]
        mode: Option<Tune>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Score every fine-tuned classifier on the test split.
    Evaluate {
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Check every analytic loss gradient against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
    },
    /// Render loss curves, sample grids and the metric table.
    Report {
        /// Render even when inputs carry different config hashes.
        #[arg(long)]
        force: bool,
    },
}

struct Context {
    config: PipelineConfig,
    hash: String,
    ws: Workspace,
    seed: Option<u64>,
}

impl Context {
    fn dtype(&self) -> Result<DType> {
        self.config.dtype()
    }

    fn dataset(&self, data: Option<&Path>) -> Result<Dataset> {
        let root = match data {
            Some(p) => p.to_path_buf(),
            None => {
                let root = self.ws.data();
                require(&root.join(DATA_MANIFEST), "dataset", "make-toy-data")?;
                root
            }
        };
        load_chip_dataset(&root, self.config.model.image_size)
    }
}

/// Runs one subcommand.
pub fn run(cli: Cli) -> Result<()> {
    let config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => match cli.preset {
            Preset::Paper => PipelineConfig::paper(),
            Preset::Desk => PipelineConfig::desk(),
        },
    };
    let hash = config.hash()?;
    let cx = Context {
        config,
        hash,
        ws: Workspace::new(&cli.out),
        seed: cli.seed,
    };
    match cli.command {
        Command::MakeToyData => make_toy_data(&cx),
        Command::TrainGan {
            data,
            checkpoint,
            iterations,
            batch_size,
            checkpoint_every,
            mask_p,
            disable_fr,
            disable_ms,
            use_eq8_distance,
            negatives,
            no_augment,
        } => {
            let mut train = cx.config.train.clone();
            if let Some(seed) = cx.seed {
                train.seed = seed;
            }
            if let Some(v) = iterations {
                train.iterations = v;
            }
            if let Some(v) = batch_size {
                train.batch_size = v;
            }
            if let Some(v) = checkpoint_every {
                train.checkpoint_every = v;
            }
            if let Some(v) = mask_p {
                train.mask_p = v;
            }
            if let Some(v) = negatives {
                train.negatives = v.into();
            }
            train.disable_fr |= disable_fr;
            train.disable_ms |= disable_ms;
            train.use_eq8_distance |= use_eq8_distance;
            train.augment &= !no_augment;
            train.validate()?;
            let images = cx.dataset(data.as_deref())?.images(Split::Train);
            train_gan_stage(&cx, images, train, checkpoint.as_deref(), iterations)
        }
        Command::Synthesize { checkpoint, count } => synthesize(&cx, checkpoint, count),
        Command::Pretrain { epochs } => pretrain(&cx, epochs),
        Command::Finetune {
            data,
            k,
            init,
            mode,
            epochs,
        } => {
            let mut cfg = cx.config.finetune.clone();
            if let Some(k) = k {
                cfg.shots = k;
            }
            if let Some(m) = mode {
                cfg.mode = m.into();
            }
            if let Some(e) = epochs {
                cfg.epochs = e;
            }
            if let Some(seed) = cx.seed {
                cfg.seeds = vec![seed];
            }
            cfg.validate()?;
            let ds = cx.dataset(data.as_deref())?;
            finetune_stage(&cx, &ds, &cfg, init)
        }
        Command::Evaluate { data } => {
            let ds = cx.dataset(data.as_deref())?;
            evaluate_stage(&cx, &ds)
        }
        Command::Gradcheck { instances } => gradcheck(cx.seed.unwrap_or(0), instances),
        Command::Report { force } => {
            let summary = build_report(&cx.ws, force)?;
            for p in summary.loss_curves.iter().chain(&summary.sample_grids) {
                println!("wrote {}", p.display());
            }
            if let Some(table) = summary.table {
                print!("{table}");
            }
            Ok(())
        }
    }
}

fn make_toy_data(cx: &Context) -> Result<()> {
    let d = &cx.config.data;
    let seed = cx.seed.unwrap_or(0);
    let side = cx.config.model.image_size;
    let ds = toy::make_toy_split(d.toy_classes, d.toy_train_per_class, d.toy_test_per_class, side, seed)?;
    let root = cx.ws.data();
    save_dataset(&ds, &root)?;
    let manifest = DatasetManifest {
        config_hash: cx.hash.clone(),
        seed,
        image_size: side,
        classes: ds.class_names.clone(),
        train_chips: ds.split(Split::Train).len(),
        test_chips: ds.split(Split::Test).len(),
    };
    write_toml(&root.join(DATA_MANIFEST), &manifest)?;
    println!(
        "wrote {} train and {} test chips to {}",
        manifest.train_chips,
        manifest.test_chips,
        root.display()
    );
    Ok(())
}

fn train_gan_stage(
    cx: &Context,
    images: Vec<Vec<f32>>,
    train: crate::trainer::TrainConfig,
    resume: Option<&Path>,
    iterations: Option<u64>,
) -> Result<()> {
    let run = GanRun {
        out: cx.ws.gan(),
        config_hash: cx.hash.clone(),
        final_checkpoint: true,
    };
    let mut trainer = match resume {
        Some(dir) => {
            let mut t = load_trainer(&require(dir, "checkpoint", "train-gan")?, images)?;
            if let Some(n) = iterations {
                t.state.config.iterations = n;
            }
            log::info!("resuming at iteration {}", t.iteration);
            t
        }
        None => {
            let stale = run.checkpoints();
            if stale.is_dir() {
                log::warn!("removing checkpoints of an earlier run in {}", stale.display());
                fs::remove_dir_all(&stale).map_err(|e| Error::io(&stale, e))?;
            }
            Trainer::new(images, cx.config.model.clone(), train, cx.dtype()?)?
        }
    };
    let summary = train_gan(&mut trainer, &run)?;
    if let Some(last) = summary.rows.last() {
        println!(
            "iteration {}: d={:.4} g={:.4} ir={:.4}",
            last.iteration, last.d_objective, last.g_objective, last.g_ir
        );
    }
    for dir in &summary.checkpoints {
        println!("checkpoint {}", dir.display());
    }
    Ok(())
}

fn latest_checkpoint(ws: &Workspace) -> Result<PathBuf> {
    let root = ws.gan().join("checkpoints");
    list_checkpoints(&root)?
        .pop()
        .map(|(_, dir)| dir)
        .ok_or(Error::MissingArtifact {
            what: "GAN checkpoint",
            path: root,
            producer: "train-gan",
        })
}

fn warn_on_hash(what: &str, theirs: &str, ours: &str) {
    if theirs != ours {
        log::warn!("{what} was produced under config hash {theirs}, current config is {ours}");
    }
}

fn synthesize(cx: &Context, checkpoint: Option<PathBuf>, count: Option<usize>) -> Result<()> {
    let dir = match checkpoint {
        Some(d) => require(&d, "checkpoint", "train-gan")?,
        None => latest_checkpoint(&cx.ws)?,
    };
    warn_on_hash("checkpoint", &load_manifest(&dir)?.config_hash, &cx.hash);
    let count = count.unwrap_or(cx.config.synthesis.count);
    let out = cx.ws.synthetic();
    if out.is_dir() {
        fs::remove_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    }
    let m = synthesize_dataset(
        &dir,
        count,
        cx.seed.unwrap_or(0),
        cx.config.synthesis.batch_size,
        &out,
        &cx.hash,
    )?;
    println!(
        "wrote {} images from iteration {} to {}",
        m.count,
        m.checkpoint_iteration,
        out.display()
    );
    Ok(())
}

fn pretrain(cx: &Context, epochs: Option<usize>) -> Result<()> {
    let dir = cx.ws.synthetic();
    let synth = SynthesisManifest::load(&dir)?;
    warn_on_hash("synthetic set", &synth.config_hash, &cx.hash);
    let images = synth.images(&dir)?;
    let mut cfg = cx.config.ssl.clone();
    if let Some(e) = epochs {
        cfg.epochs = e;
    }
    let seed = cx.seed.unwrap_or(0);
    let dtype = cx.dtype()?;
    let out = cx.ws.encoder();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let pre = simclr_pretrain_with(&images, synth.image_size, &cfg, seed, dtype, |row| {
        log::info!("epoch {} nt-xent {:.4}", row.epoch, row.nt_xent);
    })?;
    write_csv(&out.join(SSL_TELEMETRY), &pre.history)?;
    let manifest = BackboneManifest {
        config_hash: cx.hash.clone(),
        synthesis_hash: sha256_file(&dir.join(SYNTHESIS_MANIFEST))?,
        seed,
        dtype: dtype_name(dtype).to_string(),
        image_size: synth.image_size,
        backbone: cfg.backbone,
        final_nt_xent: pre.history.last().map_or(f64::NAN, |r| r.nt_xent),
    };
    save_backbone(&out, &pre.backbone, &manifest)?;
    println!(
        "encoder written to {} (final nt-xent {:.4})",
        out.display(),
        manifest.final_nt_xent
    );
    Ok(())
}

fn finetune_stage(cx: &Context, ds: &Dataset, cfg: &crate::fewshot::FinetuneConfig, init: Init) -> Result<()> {
    let dtype = cx.dtype()?;
    let pretrained = match init {
        Init::Pretrained => {
            let (b, m) = load_backbone(&cx.ws.encoder())?;
            warn_on_hash("encoder", &m.config_hash, &cx.hash);
            if m.image_size != ds.image_size {
                return Err(Error::Validation(format!(
                    "encoder was trained on {} px images, dataset has {} px",
                    m.image_size, ds.image_size
                )));
            }
            Some((b, sha256_file(&cx.ws.encoder().join(BACKBONE_WEIGHTS))?))
        }
        Init::Random => None,
    };
    let backbone_cfg = pretrained.as_ref().map_or(cx.config.ssl.backbone, |(b, _)| *b.config());
    let method = match (init, cfg.mode) {
        (Init::Pretrained, FinetuneMode::Full) => "crgan-ssl",
        (Init::Pretrained, FinetuneMode::Head) => "crgan-ssl-head",
        (Init::Random, FinetuneMode::Full) => "random-init",
        (Init::Random, FinetuneMode::Head) => "random-init-head",
    };
    for &seed in &cfg.seeds {
        let shots = sample_k_shot(ds, cfg.shots, seed)?;
        let backbone = match &pretrained {
            Some((b, _)) => b.duplicate()?,
            None => Backbone::new(backbone_cfg, &mut ChaCha8Rng::seed_from_u64(seed), dtype)?,
        };
        let classifier = Classifier::new(backbone, ds.num_classes(), seed)?;
        let history = finetune(&classifier, &shots, cfg, seed)?;
        let dir = cx.ws.finetune().join(format!("{method}_k{}_seed{seed}", cfg.shots));
        let manifest = ClassifierManifest {
            config_hash: cx.hash.clone(),
            backbone_hash: pretrained
                .as_ref()
                .map_or_else(|| "random".to_string(), |(_, h)| h.clone()),
            method: method.to_string(),
            mode: cfg.mode,
            k: cfg.shots,
            seed,
            dtype: dtype_name(dtype).to_string(),
            image_size: ds.image_size,
            backbone: backbone_cfg,
            class_names: ds.class_names.clone(),
            final_loss: history.last().map_or(f64::NAN, |r| r.loss),
        };
        save_classifier(&dir, &classifier, &manifest)?;
        write_csv(&dir.join(FINETUNE_TELEMETRY), &history)?;
        println!(
            "{method} k={} seed={seed}: final loss {:.4} -> {}",
            cfg.shots,
            manifest.final_loss,
            dir.display()
        );
    }
    Ok(())
}

fn evaluate_stage(cx: &Context, ds: &Dataset) -> Result<()> {
    let dirs = classifier_dirs(&cx.ws.finetune())?;
    if dirs.is_empty() {
        return Err(Error::MissingArtifact {
            what: "fine-tuned classifier",
            path: cx.ws.finetune(),
            producer: "finetune",
        });
    }
    let mut records = Vec::with_capacity(dirs.len());
    let mut hashes = Vec::with_capacity(dirs.len());
    for dir in &dirs {
        let (classifier, m) = load_classifier(dir)?;
        if m.class_names != ds.class_names {
            return Err(Error::Validation(format!(
                "{} was trained on classes {:?}, dataset has {:?}",
                dir.display(),
                m.class_names,
                ds.class_names
            )));
        }
        warn_on_hash("classifier", &m.config_hash, &cx.hash);
        let metrics = evaluate(&classifier, ds)?;
        records.push(MetricRecord::new(&m.method, m.k, m.seed, &metrics));
        hashes.push(m.config_hash);
    }
    let out = cx.ws.evaluate();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    write_csv(&out.join(METRICS), &records)?;
    write_toml(
        &out.join(EVALUATION_MANIFEST),
        &EvaluationManifest {
            config_hash: cx.hash.clone(),
            classifier_hashes: hashes,
            records: records.len(),
        },
    )?;
    print!("{}", render_table(&records)?);
    Ok(())
}

fn gradcheck(seed: u64, instances: usize) -> Result<()> {
    let results = run_suite(instances, seed)?;
    println!("{:<20} {:>9} {:>14}  status", "loss", "instances", "max rel err");
    for r in &results {
        let status = if r.passed { "ok" } else { "FAIL" };
        println!(
            "{:<20} {:>9} {:>14.3e}  {status}",
            r.loss, r.instances, r.max_relative_error
        );
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.loss).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(format!(
            "gradient check above {TOLERANCE:e} for {}",
            failed.join(", ")
        )))
    }
}
