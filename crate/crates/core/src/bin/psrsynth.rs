use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use psrsynth::autoencoder::Domain;
use psrsynth::checkpoint::Checkpoint;
use psrsynth::conditioning::Streams;
use psrsynth::phantom::Labels;
use psrsynth::pipeline::*;
use psrsynth::volumes::{read_volume, write_volume};

#[derive(Parser)]
#[command(name = "psrsynth", version, about = "Conditional latent diffusion for PSR synthesis from T1/FLAIR")]
struct Cli {
    /// TOML run configuration; built-in reference config when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (`out_dir`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Override any config key, e.g. `--set stage2.lr=5e-4`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone, Default)]
struct StreamFlags {
    #[arg(long)]
    no_semantic: bool,
    #[arg(long)]
    no_controlnet: bool,
    #[arg(long)]
    no_lora: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the phantom cohort and pretraining pool as VOL1 files.
    GenData {
        #[arg(long)]
        n_subjects: Option<usize>,
        #[arg(long)]
        n_pretrain: Option<usize>,
        #[arg(long)]
        n_lesions: Option<usize>,
        #[arg(long)]
        seed_base: Option<u64>,
    },
    /// Train one autoencoder on the pretraining pool.
    TrainAe {
        #[arg(long)]
        domain: Domain,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fine-tune the conditioning encoder toward the frozen PSR encoder.
    Align {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Unconditional backbone pretraining on PSR latents.
    Pretrain {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from `<out>/backbone.ckpt`.
        #[arg(long)]
        resume: bool,
    },
    /// Stage-2 adapter training on the cohort (or its fold-training split).
    TrainLdm {
        #[command(flatten)]
        streams: StreamFlags,
        #[arg(long)]
        adapt_cond_encoder: bool,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Hold out this fold's validation seeds.
        #[arg(long)]
        fold: Option<usize>,
        #[arg(long, default_value = "conditional.ckpt")]
        name: String,
    },
    /// Synthesize a PSR volume from T1/FLAIR.
    Synthesize {
        #[arg(long)]
        t1: PathBuf,
        #[arg(long)]
        flair: PathBuf,
        #[arg(long)]
        output: PathBuf,
        /// Conditional checkpoint; defaults to `<out>/conditional.ckpt`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Sample the frozen backbone alone.
        #[arg(long)]
        unconditional: bool,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        eta: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Score a synthesized PSR volume against ground truth.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Write combined-region ROC points here.
        #[arg(long)]
        roc: Option<PathBuf>,
    },
    /// Stream-subset ablation on one fold.
    Ablate {
        #[arg(long, default_value_t = 0)]
        fold: usize,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// K-fold cross-validation against semantic-only and unconditional baselines.
    RunFolds {
        #[arg(long)]
        folds: Option<usize>,
        #[command(flatten)]
        streams: StreamFlags,
        #[arg(long)]
        steps: Option<usize>,
    },
}

#[derive(serde::Serialize)]
struct AeRow {
    step: usize,
    total: f64,
    l1: f64,
    kl: f64,
    edge: f64,
    adv: f64,
    d_loss: f64,
}

fn set_key(root: &mut toml::Table, key: &str, raw: &str) -> anyhow::Result<()> {
    let value: toml::Value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .map(|mut t| t.remove("v").expect("parsed key"))
        .unwrap_or_else(|_| toml::Value::String(raw.to_string()));
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().context("empty key")?;
    let mut t = root;
    for p in parts {
        t = t
            .entry(p)
            .or_insert_with(|| toml::Value::Table(Default::default()))
            .as_table_mut()
            .with_context(|| format!("{p} in {key} is not a table"))?;
    }
    t.insert(last.to_string(), value);
    Ok(())
}

fn load_config(cli: &Cli) -> anyhow::Result<RunConfig> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut table: toml::Table = toml::from_str(&base.to_toml()?)?;
    for kv in &cli.set {
        let (k, v) = kv.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got {kv:?}"))?;
        set_key(&mut table, k.trim(), v.trim())?;
    }
    let mut cfg = RunConfig::from_toml(&toml::to_string(&table)?)?;
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    Ok(cfg)
}

fn apply_streams(cfg: &mut RunConfig, f: &StreamFlags) {
    let s = &mut cfg.adapters.streams;
    s.semantic &= !f.no_semantic;
    s.control &= !f.no_controlnet;
    s.lora &= !f.no_lora;
}

fn ckpt(path: &Path, what: &str) -> anyhow::Result<Checkpoint> {
    if !path.exists() {
        bail!(psrsynth::Error::MissingComponent(format!("{what} checkpoint {}", path.display())));
    }
    Ok(Checkpoint::load(path)?)
}

struct Paths(PathBuf);

impl Paths {
    fn ae(&self, d: Domain) -> PathBuf {
        self.0.join(format!("ae_{}.ckpt", d.as_str()))
    }
    fn aligned(&self) -> PathBuf {
        self.0.join("ae_cond_aligned.ckpt")
    }
    fn backbone(&self) -> PathBuf {
        self.0.join("backbone.ckpt")
    }
    fn logs(&self, name: &str) -> PathBuf {
        self.0.join("logs").join(name)
    }
}

fn stage1(p: &Paths) -> anyhow::Result<Stage1> {
    Ok(Stage1 {
        ae_psr: ae_from_checkpoint(&ckpt(&p.ae(Domain::Psr), "PSR autoencoder")?, Domain::Psr)?,
        ae_cond: ae_from_checkpoint(&ckpt(&p.aligned(), "aligned conditioning autoencoder")?, Domain::Cond)?,
    })
}

fn backbone(p: &Paths) -> anyhow::Result<Backbone> {
    Ok(backbone_from_checkpoint(&ckpt(&p.backbone(), "backbone")?)?)
}

fn dataset(cfg: &RunConfig) -> anyhow::Result<Dataset> {
    let m = cfg.manifest_path();
    load_dataset(&m).with_context(|| format!("loading dataset {} (run gen-data first)", m.display()))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = load_config(&cli)?;
    let p = Paths(cfg.out_dir.clone());
    match cli.cmd {
        Cmd::GenData {
            n_subjects,
            n_pretrain,
            n_lesions,
            seed_base,
        } => {
            let d = &mut cfg.data;
            d.n_subjects = n_subjects.unwrap_or(d.n_subjects);
            d.n_pretrain = n_pretrain.unwrap_or(d.n_pretrain);
            d.n_lesions = n_lesions.unwrap_or(d.n_lesions);
            d.seed_base = seed_base.unwrap_or(d.seed_base);
            let ds = generate_dataset(&cfg.data)?;
            let dir = cfg.manifest_path().parent().map(Path::to_path_buf).unwrap_or_default();
            let m = write_dataset(&ds, &dir)?;
            println!("wrote {} cohort + {} pretraining subjects, manifest {}", ds.cohort.len(), ds.pretrain.len(), m.display());
        }
        Cmd::TrainAe { domain, steps, lr, seed } => {
            let t = match domain {
                Domain::Psr => &mut cfg.train_ae_psr,
                Domain::Cond => &mut cfg.train_ae_cond,
            };
            t.steps = steps.unwrap_or(t.steps);
            t.lr = lr.unwrap_or(t.lr);
            t.seed = seed.unwrap_or(t.seed);
            let ds = dataset(&cfg)?;
            let (ae, disc, logs) = train_autoencoder(&cfg, &ds, domain)?;
            let rows: Vec<AeRow> = logs
                .iter()
                .map(|l| AeRow {
                    step: l.step,
                    total: l.loss.total,
                    l1: l.loss.l1,
                    kl: l.loss.kl,
                    edge: l.loss.edge,
                    adv: l.loss.adv,
                    d_loss: l.d_loss,
                })
                .collect();
            write_rows(&p.logs(&format!("ae_{}.csv", domain.as_str())), &rows)?;
            ae_checkpoint(&cfg.to_toml()?, &ae, Some(&disc), false)?.save(p.ae(domain))?;
            println!("saved {}", p.ae(domain).display());
        }
        Cmd::Align { steps, lr, seed } => {
            let a = &mut cfg.align;
            a.steps = steps.unwrap_or(a.steps);
            a.lr = lr.unwrap_or(a.lr);
            a.seed = seed.unwrap_or(a.seed);
            let ds = dataset(&cfg)?;
            let psr = ae_from_checkpoint(&ckpt(&p.ae(Domain::Psr), "PSR autoencoder")?, Domain::Psr)?;
            let mut cond = ae_from_checkpoint(&ckpt(&p.ae(Domain::Cond), "conditioning autoencoder")?, Domain::Cond)?;
            let logs = align_cond_encoder(&cfg.align, &cfg.normalize, &mut cond, &psr, &ds.pretrain)?;
            write_rows(&p.logs("align.csv"), &logs)?;
            ae_checkpoint(&cfg.to_toml()?, &cond, None, true)?.save(p.aligned())?;
            println!("saved {}", p.aligned().display());
        }
        Cmd::Pretrain { steps, seed, resume } => {
            cfg.pretrain.steps = steps.unwrap_or(cfg.pretrain.steps);
            cfg.pretrain.seed = seed.unwrap_or(cfg.pretrain.seed);
            let ds = dataset(&cfg)?;
            let psr = ae_from_checkpoint(&ckpt(&p.ae(Domain::Psr), "PSR autoencoder")?, Domain::Psr)?;
            let state = if resume {
                Some(resume_state(&ckpt(&p.backbone(), "backbone")?)?)
            } else {
                None
            };
            let (state, scale, logs) = pretrain_backbone(&cfg, &psr, &ds, state, cfg.pretrain.steps)?;
            let log = p.logs("pretrain.csv");
            if resume && log.exists() {
                let mut text = std::fs::read_to_string(&log)?;
                for l in &logs {
                    text.push_str(&format!("{},{}\n", l.step, l.loss));
                }
                std::fs::write(&log, text)?;
            } else {
                write_rows(&log, &logs)?;
            }
            backbone_checkpoint(&cfg.to_toml()?, &cfg, &state, scale)?.save(p.backbone())?;
            println!("saved {} at step {}", p.backbone().display(), state.step);
        }
        Cmd::TrainLdm {
            streams,
            adapt_cond_encoder,
            steps,
            seed,
            fold,
            name,
        } => {
            apply_streams(&mut cfg, &streams);
            cfg.stage2.adapt_cond_encoder |= adapt_cond_encoder;
            cfg.stage2.steps = steps.unwrap_or(cfg.stage2.steps);
            cfg.stage2.seed = seed.unwrap_or(cfg.stage2.seed);
            let ds = dataset(&cfg)?;
            let s1 = stage1(&p)?;
            let bb = backbone(&p)?;
            let mut seeds = ds.cohort_seeds();
            if let Some(k) = fold {
                let f = assign_folds(&seeds, cfg.folds)?;
                seeds = seeds.into_iter().zip(f).filter(|(_, g)| *g != k).map(|(s, _)| s).collect();
            }
            let lat = encode_subjects(&s1, bb.latent_scale, &ds.cohort, &cfg.normalize, &cfg.sample)?.select(&seeds)?;
            let run = train_stage2(&cfg.stage2, &cfg.adapters, &bb, &s1, &lat)?;
            let stem = name.trim_end_matches(".ckpt");
            write_rows(&p.logs(&format!("{stem}_stage2.csv")), &run.logs)?;
            write_json(&p.logs(&format!("{stem}_audit.json")), &run.audit)?;
            let mut c = run.model.to_checkpoint(&cfg.to_toml()?)?;
            c.step = cfg.stage2.steps as u64;
            c.save(p.0.join(&name))?;
            println!(
                "saved {} ({}; {} trainable parameters; freeze audit passed)",
                p.0.join(&name).display(),
                cfg.adapters.streams.label(),
                run.audit.trainable_params
            );
        }
        Cmd::Synthesize {
            t1,
            flair,
            output,
            checkpoint,
            unconditional,
            steps,
            eta,
            seed,
        } => {
            cfg.sample.steps = steps.unwrap_or(cfg.sample.steps);
            cfg.sample.eta = eta.unwrap_or(cfg.sample.eta);
            cfg.sample.seed = seed.unwrap_or(cfg.sample.seed);
            let model = if unconditional {
                ConditionalModel::unconditional(&backbone(&p)?, &stage1(&p)?)
            } else {
                let path = checkpoint.unwrap_or_else(|| p.0.join("conditional.ckpt"));
                ConditionalModel::from_checkpoint(&ckpt(&path, "conditional")?)?
            };
            let v = synthesize_volume(&model, &read_volume(&t1)?, &read_volume(&flair)?, &cfg.normalize, &cfg.sample, cfg.sample.seed)?;
            write_volume(&v, &output)?;
            println!("wrote {}", output.display());
        }
        Cmd::Eval { pred, gt, labels, roc } => {
            let pred = read_volume(&pred)?;
            let labels = Labels::from_volume(&read_volume(&labels)?)?;
            let m = evaluate_volume(&pred, &read_volume(&gt)?, &labels, &cfg)?;
            if let Some(r) = roc {
                write_roc(&r, &pooled_roc(&[&pred], &[&labels])?)?;
            }
            println!("{}", serde_json::to_string_pretty(&m)?);
        }
        Cmd::Ablate { fold, steps } => {
            cfg.stage2.steps = steps.unwrap_or(cfg.stage2.steps);
            let ds = dataset(&cfg)?;
            let rows = ablate(&cfg, &ds, &stage1(&p)?, &backbone(&p)?, fold)?;
            write_rows(&p.0.join("ablation.csv"), &rows)?;
            for r in &rows {
                println!(
                    "{:<12} trainable {:>8}  psnr {:.2}  ssim {:.4}  auc {:.3}  val noise {:.4}",
                    r.label, r.trainable_params, r.psnr, r.ssim, r.auc_combined, r.val_noise_loss
                );
            }
        }
        Cmd::RunFolds { folds, streams, steps } => {
            cfg.folds = folds.unwrap_or(cfg.folds);
            cfg.stage2.steps = steps.unwrap_or(cfg.stage2.steps);
            apply_streams(&mut cfg, &streams);
            if cfg.adapters.streams == Streams::NONE {
                bail!("all conditioning streams disabled");
            }
            let ds = dataset(&cfg)?;
            let r = run_folds(&cfg, &ds, &stage1(&p)?, &backbone(&p)?)?;
            let dir = p.0.join("folds");
            write_cv(&dir, &r)?;
            for (m, s) in &r.summary.methods {
                println!(
                    "{m:<14} psnr {:.2}±{:.2}  ssim {:.4}±{:.4}  auc {:.3}±{:.3}",
                    s.psnr.mean, s.psnr.sd, s.ssim.mean, s.ssim.sd, s.auc_combined.mean, s.auc_combined.sd
                );
            }
            println!("wrote {}", dir.display());
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e:#}");
        std::process::exit(1);
    }
}
