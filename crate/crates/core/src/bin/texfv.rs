use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use texfv::error::{Error, Result};
use texfv::features::LocalDescriptorSet;
use texfv::fisher::Variant;
use texfv::io::tfv::{self, Record};
use texfv::io::Bundle;
use texfv::pipeline::synthetic::{write_corpus, SyntheticSpec};
use texfv::pipeline::{
    compute_metrics, describe, encode_images, extract_features, feature_path, fit_mixture, fit_reducer, load_dataset,
    make_splits, predict_all, pretrain, round_config, run_on_dataset, to_phi, train_classifier, Dataset, EvalReport,
    ImageFeatures, NoObserver, PipelineConfig, Split,
};
use texfv::tensor::Tensor;

#[derive(Parser)]
#[command(name = "texfv", version, about = "Texture recognition with Fisher Vectors over autoencoder features")]
struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Run configuration (flat `key = value` file).
    #[arg(long)]
    config: PathBuf,
    /// Overrides every stage seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Descriptor variant: fv, fvfc, fvae or fcfvae.
    #[arg(long)]
    variant: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the autoencoder on the first round's training images.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Bundle to write.
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the descriptor reduction and optionally dump per-image descriptors.
    Features {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bundle: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Directory for one TFV1 descriptor file per image.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// Fit the Gaussian mixture on training descriptors.
    Gmm {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the fused descriptor of every image to a TFV1 file.
    Encode {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the one-vs-rest classifier.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bundle: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a trained bundle on the first round's test images.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        bundle: PathBuf,
        /// Report file; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every round of the protocol end to end.
    Pipeline {
        #[command(flatten)]
        common: Common,
        /// Report file; printed to stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also save the first round's models.
        #[arg(long)]
        bundle_out: Option<PathBuf>,
    },
    /// Write the synthetic texture corpus as PNG files.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 40)]
        per_class: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(common: &Common) -> Result<PipelineConfig> {
    let mut cfg = PipelineConfig::from_file(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.set_seed(seed);
    }
    if let Some(v) = &common.variant {
        cfg.variant = v.parse()?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Dataset, first-round split and the configuration for that round.
fn first_round(common: &Common) -> Result<(PipelineConfig, Dataset, Split)> {
    let cfg = round_config(&load_config(common)?, 0);
    let dataset = load_dataset(&cfg.dataset)?;
    let split = make_splits(&dataset, &cfg.protocol)?.swap_remove(0);
    Ok((cfg, dataset, split))
}

fn require<'a, T>(value: &'a Option<T>, what: &str) -> Result<&'a T> {
    value.as_ref().ok_or_else(|| Error::invalid(format!("bundle has no {what} stage")))
}

fn features_from(cfg: &PipelineConfig, dataset: &Dataset, bundle: &Bundle) -> Result<Vec<ImageFeatures>> {
    if cfg.needs_autoencoder() {
        require(&bundle.autoencoder, "autoencoder")?;
    }
    extract_features(cfg, dataset, bundle.autoencoder.as_ref())
}

fn descriptors_from(cfg: &PipelineConfig, dataset: &Dataset, bundle: &Bundle) -> Result<(Vec<ImageFeatures>, Vec<LocalDescriptorSet>)> {
    let features = features_from(cfg, dataset, bundle)?;
    let descriptors = describe(require(&bundle.reducer, "feature")?, &features)?;
    Ok((features, descriptors))
}

fn variant_of(common: &Common, cfg: &PipelineConfig, bundle: &Bundle) -> Variant {
    if common.variant.is_some() {
        cfg.variant
    } else {
        bundle.variant.unwrap_or(cfg.variant)
    }
}

fn write_report(report: &EvalReport, out: Option<&Path>) -> Result<()> {
    match out {
        Some(path) => std::fs::write(path, report.to_tsv()).map_err(|e| Error::io(path, e))?,
        None => print!("{}", report.to_tsv()),
    }
    eprintln!("{}", report.summary());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { common, out } => {
            let (cfg, dataset, split) = first_round(&common)?;
            let pool: Vec<usize> = if cfg.transductive { (0..dataset.len()).collect() } else { split.train };
            let model = pretrain(&dataset, &pool, &cfg.autoencoder)?;
            Bundle { autoencoder: Some(model), class_names: dataset.class_names, ..Default::default() }.save(&out)?;
        }
        Command::Features { common, bundle, out, dump } => {
            let (cfg, dataset, split) = first_round(&common)?;
            let mut b = match &bundle {
                Some(p) => Bundle::load(p)?,
                None => Bundle::default(),
            };
            let features = features_from(&cfg, &dataset, &b)?;
            let reducer = fit_reducer(&cfg, &features, &split.train)?;
            if let Some(dir) = dump {
                for (rec, set) in dataset.records.iter().zip(describe(&reducer, &features)?) {
                    let path = feature_path(&dir, &rec.path);
                    if let Some(parent) = path.parent() {
                        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                    }
                    let records = cfg
                        .taps
                        .taps
                        .iter()
                        .map(|&tap| {
                            let rows: Vec<usize> = (0..set.len()).filter(|&r| set.taps()[r] == tap).collect();
                            let data = rows.iter().flat_map(|&r| set.row(r).iter().copied()).collect();
                            Ok(Record::new(tap, Tensor::new(vec![rows.len(), set.dim()], data)?))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    tfv::write_file(&path, &records)?;
                }
            }
            b.reducer = Some(reducer);
            b.class_names = dataset.class_names;
            b.save(&out)?;
        }
        Command::Gmm { common, bundle, out } => {
            let (cfg, dataset, split) = first_round(&common)?;
            let mut b = Bundle::load(&bundle)?;
            let (_, descriptors) = descriptors_from(&cfg, &dataset, &b)?;
            b.gmm = Some(fit_mixture(&cfg.em, cfg.gmm_max_descriptors, &descriptors, &split.train)?);
            b.save(&out)?;
        }
        Command::Encode { common, bundle, out } => {
            let (cfg, dataset, _) = first_round(&common)?;
            let b = Bundle::load(&bundle)?;
            let (features, descriptors) = descriptors_from(&cfg, &dataset, &b)?;
            let variant = variant_of(&common, &cfg, &b);
            let fused = encode_images(variant, require(&b.gmm, "mixture")?, &descriptors, &features)?;
            let records: Vec<Record> = fused
                .iter()
                .enumerate()
                .map(|(i, f)| Record::new(i as u32, Tensor::from_vec(to_phi(f).values.iter().map(|&v| v as f32).collect())))
                .collect();
            tfv::write_file(&out, &records)?;
        }
        Command::Train { common, bundle, out } => {
            let (cfg, dataset, split) = first_round(&common)?;
            let mut b = Bundle::load(&bundle)?;
            let (features, descriptors) = descriptors_from(&cfg, &dataset, &b)?;
            let variant = variant_of(&common, &cfg, &b);
            let fused = encode_images(variant, require(&b.gmm, "mixture")?, &descriptors, &features)?;
            let phis: Vec<_> = fused.iter().map(to_phi).collect();
            b.svm = Some(train_classifier(&cfg.svm, &phis, &dataset.labels(), &split.train)?);
            b.variant = Some(variant);
            b.class_names = dataset.class_names;
            b.save(&out)?;
        }
        Command::Eval { common, bundle, out } => {
            let (cfg, dataset, split) = first_round(&common)?;
            let b = Bundle::load(&bundle)?;
            let (features, descriptors) = descriptors_from(&cfg, &dataset, &b)?;
            let variant = variant_of(&common, &cfg, &b);
            let fused = encode_images(variant, require(&b.gmm, "mixture")?, &descriptors, &features)?;
            let phis: Vec<_> = fused.iter().map(to_phi).collect();
            let predicted = predict_all(require(&b.svm, "classifier")?, &phis, &split.test)?;
            let labels = dataset.labels();
            let truth: Vec<u32> = split.test.iter().map(|&i| labels[i]).collect();
            let metrics = compute_metrics(&truth, &predicted, dataset.class_names.len())?;
            let len = fused.first().map_or(0, |f| f.len());
            write_report(&EvalReport::new(variant, dataset.class_names, len, vec![metrics]), out.as_deref())?;
        }
        Command::Pipeline { common, out, bundle_out } => {
            let cfg = load_config(&common)?;
            let dataset = load_dataset(&cfg.dataset)?;
            let (report, bundle) = run_on_dataset(&cfg, &dataset, &NoObserver)?;
            if let Some(path) = bundle_out {
                bundle.save(path)?;
            }
            write_report(&report, out.as_deref())?;
        }
        Command::Synth { out, per_class, size, seed } => {
            let spec = SyntheticSpec { per_class, size, seed, ..Default::default() };
            let ds = write_corpus(&spec, &out)?;
            eprintln!("wrote {} images to {}", ds.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
