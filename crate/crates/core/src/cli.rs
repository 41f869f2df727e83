//! Command-line surface: data synthesis, both training phases, evaluation,
//! heatmap and embedding export, and the ablation matrix.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::cmz::{center_zoom, AttentionMap};
use crate::config::{Arm, Config, LossKind};
use crate::datasets::{generate_synthetic, Split};
use crate::error::{Error, Result};
use crate::evaluation::{export_embeddings, format_report, heatmap_export, write_report, Branch, MetricsReport};
use crate::trainer::{
    evaluate, load_dataset, load_model, train_head, train_representation, Checkpoint, Dataset, HEAD_CHECKPOINT,
    REPR_CHECKPOINT,
};

#[derive(Debug, Parser)]
#[command(name = "cdnet", version, about = "Contrastive disentangled network for fine-grained categorization")]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML configuration file; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dotted-key override such as `loss_cfg.lambda=0.4`; repeatable.
    #[arg(long = "override", value_name = "K=V", global = true)]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out", global = true)]
    pub out: PathBuf,
    /// Run seed (the generator seed for `synth`).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Parallel ablation arms.
    #[arg(long, default_value_t = 1, global = true)]
    pub jobs: usize,
}

#[derive(Debug, Clone, Args)]
pub struct CheckpointArgs {
    /// Checkpoint path; defaults to the phase checkpoint under `--out`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: Split,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic dataset and its manifest into `--out`.
    Synth,
    /// Phase one: representation learning.
    TrainRepr,
    /// Phase two: linear head on frozen features.
    TrainHead {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Metrics, confusion matrix, AUC and DB score for one split.
    Eval(CheckpointArgs),
    /// Attention overlays for the global and local branches.
    Heatmap {
        #[command(flatten)]
        ckpt: CheckpointArgs,
        /// Maximum number of images.
        #[arg(long, default_value_t = 16)]
        limit: usize,
    },
    /// Normalized head-input features as a binary array with a JSON sidecar.
    Embed(CheckpointArgs),
    /// Train and evaluate every ablation arm over the configured seeds.
    Ablate,
}

impl Common {
    fn config(&self, synth: bool) -> Result<Config> {
        let mut cfg = Config::load(self.config.as_deref(), &self.overrides)?;
        if let Some(seed) = self.seed {
            if synth {
                cfg.synth.seed = seed;
            } else {
                cfg.train.seed = seed;
            }
        }
        Ok(cfg)
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    let c = &cli.common;
    match &cli.command {
        Command::Synth => cmd_synth(&c.config(true)?, &c.out),
        Command::TrainRepr => cmd_train_repr(&c.config(false)?, &c.out),
        Command::TrainHead { checkpoint } => {
            let path = checkpoint.clone().unwrap_or_else(|| c.out.join(REPR_CHECKPOINT));
            cmd_train_head(&c.config(false)?, &path, &c.out)
        }
        Command::Eval(a) => {
            cmd_eval(&c.config(false)?, &checkpoint_path(a, &c.out), a.split, &c.out).map(|_| ())
        }
        Command::Heatmap { ckpt, limit } => cmd_heatmap(&c.config(false)?, &checkpoint_path(ckpt, &c.out), ckpt.split, *limit, &c.out),
        Command::Embed(a) => cmd_embed(&c.config(false)?, &checkpoint_path(a, &c.out), a.split, &c.out),
        Command::Ablate => cmd_ablate(&c.config(false)?, &c.out, c.jobs).map(|_| ()),
    }
}

fn checkpoint_path(a: &CheckpointArgs, out: &Path) -> PathBuf {
    a.checkpoint.clone().unwrap_or_else(|| out.join(HEAD_CHECKPOINT))
}

pub fn cmd_synth(cfg: &Config, out: &Path) -> Result<()> {
    let manifest = generate_synthetic(&cfg.synth, out)?;
    println!("{:<20} {:>7} {:>7} {:>7}", "class", "train", "val", "test");
    let counts: Vec<Vec<usize>> = Split::ALL.iter().map(|s| manifest.class_counts(*s)).collect();
    for (i, name) in manifest.classes.iter().enumerate() {
        println!("{:<20} {:>7} {:>7} {:>7}", name, counts[0][i], counts[1][i], counts[2][i]);
    }
    println!("manifest checksum {}", manifest.checksum()?);
    Ok(())
}

fn write_config_echo(cfg: &Config, out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join("config.toml");
    std::fs::write(&path, cfg.to_toml()?).map_err(|e| Error::io(&path, e))
}

pub fn cmd_train_repr(cfg: &Config, out: &Path) -> Result<()> {
    let data = load_dataset(cfg)?;
    write_config_echo(cfg, out)?;
    let r = train_representation(cfg, &data, out)?;
    let last = r.history.iter().rev().find(|h| h.split == "train").and_then(|h| h.loss);
    println!(
        "representation: {} epochs, {} steps, {} skipped, final loss {}",
        cfg.train.epochs,
        r.steps,
        r.skipped,
        last.map_or("n/a".to_string(), |v| format!("{v:.5}"))
    );
    println!("checkpoint {}", out.join(REPR_CHECKPOINT).display());
    Ok(())
}

pub fn cmd_train_head(cfg: &Config, repr: &Path, out: &Path) -> Result<()> {
    let ckpt = Checkpoint::load(repr)?;
    let data = load_dataset(cfg)?;
    write_config_echo(cfg, out)?;
    let h = train_head(cfg, &data, &ckpt, out)?;
    println!("head: {} epochs, train accuracy {:.4}", cfg.train.head_epochs, h.train_accuracy);
    println!("checkpoint {}", out.join(HEAD_CHECKPOINT).display());
    Ok(())
}

fn split_samples(data: &Dataset, split: Split) -> Result<&[crate::datasets::ImageSample]> {
    let s = data.split(split);
    if s.is_empty() {
        return Err(Error::Config(format!("the {} split is empty", split.as_str())));
    }
    Ok(s)
}

fn load_for_inference(cfg: &Config, path: &Path) -> Result<(Checkpoint, Dataset)> {
    let ckpt = Checkpoint::load(path)?;
    let data = load_dataset(cfg)?;
    crate::trainer::check_compatible(&ckpt, &data)?;
    Ok((ckpt, data))
}

pub fn cmd_eval(cfg: &Config, path: &Path, split: Split, out: &Path) -> Result<MetricsReport> {
    let (ckpt, data) = load_for_inference(cfg, path)?;
    let model = load_model(&ckpt)?;
    let ev = evaluate(&model, split_samples(&data, split)?, &cfg.cmz, cfg.train.head_batch_size)?;
    write_report(&ev.report, &data.classes, out, &format!("eval_{}", split.as_str()))?;
    println!("{}", format_report(&ev.report));
    Ok(ev.report)
}

pub fn cmd_heatmap(cfg: &Config, path: &Path, split: Split, limit: usize, out: &Path) -> Result<()> {
    let (ckpt, data) = load_for_inference(cfg, path)?;
    let model = load_model(&ckpt)?;
    if !model.spec.kind.uses_attention() {
        return Err(Error::Config("the checkpoint has no localization branch to visualize".into()));
    }
    let samples = &split_samples(&data, split)?[..limit.min(data.split(split).len())];
    let mut items = Vec::new();
    for s in samples {
        let global = model.encode(&model.to_tensor(&[&s.pixels])?, false)?;
        let att = AttentionMap::from_batch(&global.bundle.expect("attention").att_s)?.remove(0);
        let zoom = center_zoom(&s.pixels, &att, &cfg.cmz);
        let local = model.encode(&model.to_tensor(&[&zoom.pixels])?, false)?;
        let local_att = AttentionMap::from_batch(&local.bundle.expect("attention").att_s)?.remove(0);
        items.push((s.id.clone(), Branch::Global, s.pixels.clone(), att));
        items.push((s.id.clone(), Branch::Local, zoom.pixels, local_att));
    }
    let paths = heatmap_export(&items, &out.join("heatmaps"))?;
    println!("wrote {} overlays to {}", paths.len(), out.join("heatmaps").display());
    Ok(())
}

pub fn cmd_embed(cfg: &Config, path: &Path, split: Split, out: &Path) -> Result<()> {
    let (ckpt, data) = load_for_inference(cfg, path)?;
    let model = load_model(&ckpt)?;
    let ev = evaluate(&model, split_samples(&data, split)?, &cfg.cmz, cfg.train.head_batch_size)?;
    let file = out.join("embeddings").join(format!("{}.bin", split.as_str()));
    export_embeddings(&file, &ev.features, &ev.labels, &ev.ids)?;
    println!("{} × {} features written to {}", ev.features.len(), ev.features.first().map_or(0, |r| r.len()), file.display());
    Ok(())
}

/// One ablation arm: a loss kind plus an optional trade-off weight.
#[derive(Debug, Clone, PartialEq)]
pub struct ArmSpec {
    pub name: String,
    pub loss: LossKind,
    pub lambda: Option<f64>,
}

pub fn arm_specs(cfg: &Config) -> Vec<ArmSpec> {
    let mut arms: Vec<ArmSpec> =
        cfg.ablate.arms.iter().map(|a| ArmSpec { name: a.name().to_string(), loss: a.loss(), lambda: None }).collect();
    for &l in &cfg.ablate.lambdas {
        arms.push(ArmSpec { name: format!("{}_lambda_{l}", Arm::Cdnet.name()), loss: LossKind::Hcd, lambda: Some(l) });
    }
    arms
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub arm: String,
    pub seed: u64,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    /// Sample standard deviation; absent with a single seed.
    pub std: Option<f64>,
    pub n: usize,
}

impl Stat {
    pub fn of(values: &[f64]) -> Option<Stat> {
        let n = values.len();
        if n == 0 {
            return None;
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = (n > 1).then(|| (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt());
        Some(Stat { mean, std, n })
    }

    fn cell(s: &Option<Stat>, scale: f64) -> String {
        match s {
            None => "n/a".into(),
            Some(s) => match s.std {
                Some(sd) => format!("{:.2} ± {:.2}", s.mean * scale, sd * scale),
                None => format!("{:.2}", s.mean * scale),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmRow {
    pub arm: String,
    pub f1: Option<Stat>,
    pub acc: Option<Stat>,
    pub auc: Option<Stat>,
    pub db_score: Option<Stat>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub split: Split,
    pub data_checksum: String,
    pub seeds: Vec<u64>,
    pub rows: Vec<ArmRow>,
    pub runs: Vec<RunResult>,
}

impl AblationTable {
    pub fn to_markdown(&self) -> String {
        let mut s = format!(
            "Split `{}`, seeds {:?}, data checksum `{}`\n\n| arm | macro F1 (%) | accuracy (%) | AUC (%) | DB score |\n|---|---|---|---|---|\n",
            self.split.as_str(),
            self.seeds,
            self.data_checksum
        );
        for r in &self.rows {
            s.push_str(&format!(
                "| {} | {} | {} | {} | {} |\n",
                r.arm,
                Stat::cell(&r.f1, 100.0),
                Stat::cell(&r.acc, 100.0),
                Stat::cell(&r.auc, 100.0),
                Stat::cell(&r.db_score, 1.0)
            ));
        }
        s
    }
}

fn run_arm(cfg: &Config, data: &Dataset, arm: &ArmSpec, seed: u64, out: &Path) -> Result<RunResult> {
    let mut c = cfg.clone();
    c.train.loss = arm.loss;
    c.train.seed = seed;
    if let Some(l) = arm.lambda {
        c.loss.lambda = l;
    }
    let dir = out.join(&arm.name).join(format!("seed_{seed}"));
    let repr = train_representation(&c, data, &dir)?;
    let head = train_head(&c, data, &repr.checkpoint, &dir)?;
    let model = load_model(&head.checkpoint)?;
    let ev = evaluate(&model, split_samples(data, c.ablate.split)?, &c.cmz, c.train.head_batch_size)?;
    write_report(&ev.report, &data.classes, &dir, &format!("eval_{}", c.ablate.split.as_str()))?;
    log::info!("{} seed {seed}: {}", arm.name, format_report(&ev.report));
    Ok(RunResult { arm: arm.name.clone(), seed, report: ev.report })
}

/// Every arm × seed on one shared dataset; `jobs > 1` runs arms on worker
/// threads. Writes `ablation.md` and `ablation.json` under `out`.
pub fn cmd_ablate(cfg: &Config, out: &Path, jobs: usize) -> Result<AblationTable> {
    let data = load_dataset(cfg)?;
    let arms = arm_specs(cfg);
    if arms.is_empty() || cfg.ablate.seeds.is_empty() {
        return Err(Error::Config("ablate needs at least one arm and one seed".into()));
    }
    let ab_dir = out.join("ablate");
    write_config_echo(cfg, out)?;
    let tasks: Vec<(usize, u64)> =
        (0..arms.len()).flat_map(|a| cfg.ablate.seeds.iter().map(move |&s| (a, s))).collect();
    let results: Vec<Result<RunResult>> = if jobs <= 1 {
        tasks.iter().map(|&(a, s)| run_arm(cfg, &data, &arms[a], s, &ab_dir)).collect()
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots: Vec<std::sync::Mutex<Option<Result<RunResult>>>> = tasks.iter().map(|_| Default::default()).collect();
        std::thread::scope(|scope| {
            for _ in 0..jobs.min(tasks.len()) {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    let Some(&(a, s)) = tasks.get(i) else { break };
                    let r = run_arm(cfg, &data, &arms[a], s, &ab_dir);
                    *slots[i].lock().unwrap() = Some(r);
                });
            }
        });
        slots.into_iter().map(|m| m.into_inner().unwrap().expect("every task ran")).collect()
    };
    let runs = results.into_iter().collect::<Result<Vec<_>>>()?;

    let rows = arms
        .iter()
        .map(|arm| {
            let mine: Vec<&RunResult> = runs.iter().filter(|r| r.arm == arm.name).collect();
            let pick = |f: &dyn Fn(&MetricsReport) -> Option<f64>| Stat::of(&mine.iter().filter_map(|r| f(&r.report)).collect::<Vec<_>>());
            ArmRow {
                arm: arm.name.clone(),
                f1: pick(&|r| Some(r.macro_avg.f1)),
                acc: pick(&|r| Some(r.macro_avg.acc)),
                auc: pick(&|r| r.auc),
                db_score: pick(&|r| r.db_score),
            }
        })
        .collect();
    let table = AblationTable {
        split: cfg.ablate.split,
        data_checksum: data.checksum.clone(),
        seeds: cfg.ablate.seeds.clone(),
        rows,
        runs,
    };
    let md = out.join("ablation.md");
    std::fs::write(&md, table.to_markdown()).map_err(|e| Error::io(&md, e))?;
    let js = out.join("ablation.json");
    std::fs::write(&js, serde_json::to_string_pretty(&table)?).map_err(|e| Error::io(&js, e))?;
    print!("{}", table.to_markdown());
    Ok(table)
}

/// Top-level entry used by the binary: runs and maps errors to exit codes.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            let cat = e.category();
            eprintln!("error [{}]: {e}", format!("{cat:?}").to_lowercase());
            cat.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stats_use_the_sample_deviation() {
        let s = Stat::of(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(s.mean, 2.0);
        assert_eq!(s.std, Some(1.0));
        assert_eq!(Stat::of(&[4.0]).unwrap().std, None);
        assert!(Stat::of(&[]).is_none());
    }

    #[test]
    fn lambda_arms_follow_the_base_arms() {
        let mut cfg = Config::default();
        cfg.ablate.lambdas = vec![0.02, 0.4];
        let names: Vec<String> = arm_specs(&cfg).into_iter().map(|a| a.name).collect();
        assert_eq!(names, ["ce_baseline", "wsll", "wsll_cmz", "cdnet", "supcon", "cdnet_lambda_0.02", "cdnet_lambda_0.4"]);
    }

    #[test]
    fn flags_parse() {
        let cli = Cli::try_parse_from([
            "cdnet", "eval", "--split", "val", "--override", "loss=supcon", "--override", "loss_cfg.lambda=0.4", "--seed", "3",
        ])
        .unwrap();
        assert_eq!(cli.common.overrides.len(), 2);
        assert_eq!(cli.common.seed, Some(3));
        assert!(matches!(cli.command, Command::Eval(CheckpointArgs { split: Split::Val, .. })));
        let cfg = cli.common.config(false).unwrap();
        assert_eq!(cfg.train.loss, LossKind::Supcon);
        assert_eq!(cfg.loss.lambda, 0.4);
        assert_eq!(cfg.train.seed, 3);
    }

    #[test]
    fn errors_map_to_exit_codes() {
        assert_eq!(main_with_args(["cdnet", "train-repr", "--override", "nope.key=1"]), 2);
        let dir = tempfile::tempdir().unwrap();
        let missing = dir.path().join("none.ckpt");
        assert_eq!(main_with_args(["cdnet", "eval", "--checkpoint", missing.to_str().unwrap()]), 3);
    }
}
