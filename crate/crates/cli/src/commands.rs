use std::path::{Path, PathBuf};

use spoofcl::backbone::Backbone;
use spoofcl::checkpoint::Checkpoint;
use spoofcl::config::{ModelSnapshot, RunConfig};
use spoofcl::frontend::{load_audio, save_wav_f32};
use spoofcl::metrics::{compute_eer, export_embeddings, write_scores};
use spoofcl::rng::RngStream;
use spoofcl::stage1::run_stage1;
use spoofcl::stage2::{run_stage2, Classifier};
use spoofcl::synthetic::{make_synthetic, SyntheticSpec};
use spoofcl::Error;

use crate::augspec::{self, SpecError};
use crate::{Command, ConfigArgs};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] Error),
    #[error(transparent)]
    Augmentation(#[from] SpecError),
}

impl CliError {
    /// 2 for bad input or configuration, 3 for training divergence, 1 otherwise.
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Augmentation(_) => 2,
            CliError::Core(Error::Divergence(_) | Error::NonFinite(_)) => 3,
            CliError::Core(Error::Shape(_) | Error::MissingGrad(_)) => 1,
            CliError::Core(_) => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

pub fn run(command: Command, workers: usize) -> Result<()> {
    match command {
        Command::TrainStage1 { config } => {
            let cfg = load_config(&config)?;
            log_resolved("train-stage1", &cfg, workers);
            let train = cfg.load_dataset(&cfg.data.train_manifest)?;
            let val = cfg.load_dataset(&cfg.data.val_manifest)?;
            let out_dir = cfg.data.output_dir.join("stage1");
            create_and_snapshot(&out_dir, &cfg)?;
            let outcome = run_stage1(&cfg, &train, &val, &out_dir)?;
            log::info!("selected stage1 epoch {}", outcome.best_epoch);
            println!("{}", outcome.best_checkpoint.display());
        }
        Command::TrainStage2 { config, backbone } => {
            let cfg = load_config(&config)?;
            log_resolved("train-stage2", &cfg, workers);
            if backbone.is_none() {
                log::warn!("no --backbone given; the encoder starts from a random initialization");
            }
            let train = cfg.load_dataset(&cfg.data.train_manifest)?;
            let val = cfg.load_dataset(&cfg.data.val_manifest)?;
            let out_dir = cfg.data.output_dir.join("stage2");
            create_and_snapshot(&out_dir, &cfg)?;
            let outcome = run_stage2(&cfg, backbone.as_deref(), &train, &val, &out_dir)?;
            log::info!("selected stage2 epoch {}", outcome.best_epoch);
            println!("{}", outcome.best_checkpoint.display());
        }
        Command::Evaluate { model, manifest, scores } => {
            let mut clf = Classifier::load(&model)?;
            clf.config.data.cache_dir = None;
            log_resolved("evaluate", &clf.config, workers);
            let data = clf.config.load_dataset(&manifest)?;
            let records = clf.score(&data, &clf.config.feature_pipeline()?)?;
            write_scores(&records, &scores)?;
            println!("EER\t{:.4}", compute_eer(&records)?);
        }
        Command::ExportEmbeddings { model, manifest, out } => {
            let ckpt = Checkpoint::load(&model)?;
            let mut run = ModelSnapshot::from_value(&ckpt.config)?.run;
            run.data.cache_dir = None;
            log_resolved("export-embeddings", &run, workers);
            let store = ckpt.to_store()?;
            let bb = Backbone::bind(&run.backbone, &store)?;
            let data = run.load_dataset(&manifest)?;
            export_embeddings(&bb, &store, &data, &run.feature_pipeline()?, &out)?;
            log::info!("wrote {} embeddings to {}", data.len(), out.display());
        }
        Command::Augment {
            input,
            output,
            aug,
            seed,
        } => {
            let aug = augspec::parse(&aug)?;
            log::info!("augment {} with {aug:?}, seed {seed}", input.display());
            let wave = load_audio(&input, Default::default())?;
            let out = aug.apply_waveform(&wave, &mut RngStream::new(seed, 0).rng())?;
            save_wav_f32(&output, &out)?;
        }
        Command::DefaultConfig => println!("{}", RunConfig::default().to_json_pretty()),
        Command::MakeSynthetic {
            out,
            n_train,
            n_val,
            n_test,
            seed,
            min_seconds,
            max_seconds,
        } => {
            let spec = SyntheticSpec {
                n_train,
                n_val,
                n_test,
                seed,
                min_seconds,
                max_seconds,
                ..SyntheticSpec::default()
            };
            log::info!("synthetic corpus {spec:?}");
            let paths = make_synthetic(&out, &spec)?;
            for p in [paths.train, paths.val, paths.test] {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

/// Reads the config, applies overrides and resolves relative paths against
/// the config file's directory.
pub fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    if !args.config.exists() {
        return Err(Error::Config(format!("config file not found: {}", args.config.display())).into());
    }
    let mut cfg = RunConfig::load(&args.config)?.with_overrides(&args.overrides)?;
    let base = args.config.parent().unwrap_or(Path::new(""));
    let resolve = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    };
    resolve(&mut cfg.data.train_manifest);
    resolve(&mut cfg.data.val_manifest);
    resolve(&mut cfg.data.output_dir);
    cfg.data.test_manifest.as_mut().map(resolve);
    cfg.data.cache_dir.as_mut().map(resolve);
    cfg.stage1.init_checkpoint.as_mut().map(resolve);
    cfg.validate()?;
    Ok(cfg)
}

fn log_resolved(command: &str, cfg: &RunConfig, workers: usize) {
    log::info!(
        "{command}: stage1 seed {}, stage2 seed {}, workers {workers}",
        cfg.stage1.seed,
        cfg.stage2.seed
    );
    log::info!("resolved configuration:\n{}", cfg.to_json_pretty());
}

fn create_and_snapshot(dir: &Path, cfg: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    cfg.save(&dir.join("resolved_config.json"))?;
    Ok(())
}
