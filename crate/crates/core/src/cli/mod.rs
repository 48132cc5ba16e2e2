//! The `linequant` command line: one subcommand per pipeline stage, driven by
//! a sectioned TOML run file whose keys can be overridden with `--set`.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration, 3 I/O,
//! 4 insufficient data, 5 missing artifact, 6 empty input.

mod config;
mod plot;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

pub use config::{ModelSection, QuantizerSection, RunConfig};
pub use plot::{load_series, render_svg, write_csv, Series};

use crate::dataset::{make_corpus, Corpus, LineImage, LineSample, Split, LINE_HEIGHT};
use crate::error::{Error, Result};
use crate::eval::evaluate_model;
use crate::finetune::{run_finetuning, InitSource, Progress};
use crate::model::{load_checkpoint, save_checkpoint, ModelParams};
use crate::pretrain::run_pretraining;
use crate::quantizer::{fit_codebook, label_corpus, read_label_store, trigram_report, Codebook, FeatureExtractor};

#[derive(Debug, Parser)]
#[command(name = "linequant", version, about = "Masked label pre-training for text-line recognizers")]
pub struct Cli {
    /// Run file with [data], [quantizer], [model], [pretrain] and [finetune] sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides every seed in the run file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Worker threads for data preparation and labeling.
    #[arg(long, global = true, env = "LINEQUANT_THREADS")]
    pub threads: Option<usize>,
    /// Overrides one key, e.g. `--set pretrain.iterations=0`.
    #[arg(long = "set", global = true, value_name = "SECTION.KEY=VALUE")]
    pub overrides: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Val => Split::Val,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum InitArg {
    Scratch,
    Pretrained,
    Transfer,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render the synthetic corpus described by [data].
    GenData,
    /// Fit the K-Means codebook on frozen-stem patch features.
    FitQuantizer {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Assign a cluster label to every patch of every line.
    Label {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        codebook: PathBuf,
    },
    /// Masked label pre-training of the encoder.
    Pretrain {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        labels: PathBuf,
    },
    /// Supervised fine-tuning of the recognizer.
    Finetune {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, value_enum, default_value = "scratch")]
        init: InitArg,
        /// Checkpoint for `--init pretrained` or `--init transfer`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Greedy-decode a split and report CER.
    Eval {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
    },
    /// Most frequent label trigrams with example crops.
    Trigrams {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Line chart (SVG) and CSV of one metric over iterations.
    Plot {
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        /// Metric key; defaults to val_cer, masked_acc or loss.
        #[arg(long)]
        metric: Option<String>,
    },
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Io { .. } => 3,
        Error::InsufficientData(_) => 4,
        Error::MissingArtifact(_) => 5,
        Error::EmptyInput(_) => 6,
        _ => 1,
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(path.to_path_buf()))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Appends JSON lines to a fresh file as they are produced.
struct JsonLines {
    path: PathBuf,
    file: fs::File,
}

impl JsonLines {
    fn create(path: PathBuf) -> Result<Self> {
        let file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
        Ok(JsonLines { path, file })
    }

    fn push(&mut self, row: &impl serde::Serialize) -> Result<()> {
        let mut line = serde_json::to_vec(row).map_err(|e| Error::Data(e.to_string()))?;
        line.push(b'\n');
        self.file.write_all(&line).map_err(|e| Error::io(&self.path, e))
    }
}

fn load_split(manifest: &Path, split: Split) -> Result<Vec<LineSample>> {
    require(manifest)?;
    Corpus::open(manifest)?.samples(Some(split))
}

pub fn run(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        // a second call in one process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global();
    }
    let mut cfg = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    if let Some(seed) = cli.seed {
        cfg.set_seed(seed);
    }
    let out = cli.out.as_path();
    create_dir(out)?;
    let snapshot = |name: &str| -> Result<()> { write_file(&out.join(format!("{name}.resolved.toml")), cfg.to_toml()?.as_bytes()) };

    match &cli.command {
        Command::GenData => {
            snapshot("gen-data")?;
            let manifest = make_corpus(&cfg.data, out)?;
            println!("{}", manifest.display());
        }
        Command::FitQuantizer { manifest } => {
            let train = load_split(manifest, Split::Train)?;
            let fx = FeatureExtractor::new(cfg.quantizer.extractor())?;
            let cb = fit_codebook(&train, &fx, &cfg.quantizer.kmeans(), cfg.quantizer.fit_lines)?;
            let path = out.join("codebook.lqkm");
            cb.save(&path)?;
            snapshot("fit-quantizer")?;
            println!("codebook {} (k={}, dim={})", path.display(), cb.k(), cb.dim());
            println!("inertia {:.6}", cb.meta.inertia);
        }
        Command::Label { manifest, codebook } => {
            require(manifest)?;
            require(codebook)?;
            let cb = Codebook::load(codebook)?;
            let spec = cb
                .meta
                .extractor
                .clone()
                .ok_or_else(|| Error::Config(format!("{} records no feature extractor", codebook.display())))?;
            let fx = FeatureExtractor::new(spec)?;
            let path = out.join("labels.jsonl");
            let records = label_corpus(manifest, &fx, &cb, &path)?;
            snapshot("label")?;
            println!("{} lines labeled -> {}", records.len(), path.display());
        }
        Command::Pretrain { manifest, labels } => {
            require(labels)?;
            let train = load_split(manifest, Split::Train)?;
            let held = load_split(manifest, Split::Val)?;
            let store = read_label_store(labels)?;
            let params = ModelParams::init(cfg.pretraining_model(), cfg.pretrain.seed)?;
            snapshot("pretrain")?;
            let mut log = JsonLines::create(out.join("pretrain_metrics.jsonl"))?;
            let mut failed = None;
            let outcome = run_pretraining(&cfg.pretrain, &train, &held, &store, params, |m| {
                if let Err(e) = log.push(m) {
                    failed.get_or_insert(e);
                }
                let acc = m.masked_acc.map_or("-".to_string(), |a| format!("{a:.4}"));
                eprintln!("iter {} loss {:.4} masked_acc {acc} p {} lr {:e}", m.iter, m.loss, m.p, m.lr);
            })?;
            if let Some(e) = failed {
                return Err(e);
            }
            let path = out.join("pretrain.ckpt");
            save_checkpoint(&outcome.checkpoint, &path)?;
            println!("{}", path.display());
        }
        Command::Finetune { manifest, init, checkpoint } => {
            let train = load_split(manifest, Split::Train)?;
            let val = load_split(manifest, Split::Val)?;
            let source = match (init, checkpoint) {
                (InitArg::Scratch, _) => InitSource::Scratch,
                (_, None) => return Err(Error::Config("--init pretrained/transfer needs --checkpoint".into())),
                (InitArg::Pretrained, Some(p)) => InitSource::PretrainedEncoder(load_checkpoint(p)?.params),
                (InitArg::Transfer, Some(p)) => InitSource::TransferFullModel(load_checkpoint(p)?.params),
            };
            snapshot("finetune")?;
            let mut log = JsonLines::create(out.join("finetune_metrics.jsonl"))?;
            let mut failed = None;
            let outcome = run_finetuning(&cfg.finetune, &cfg.recognizer_model(), &source, &train, &val, |p| {
                if let Progress::Metrics(m) = p {
                    if let Err(e) = log.push(m) {
                        failed.get_or_insert(e);
                    }
                    let loss = m.loss.map_or("-".to_string(), |l| format!("{l:.4}"));
                    eprintln!("iter {} loss {loss} val_cer {:.4} lr {:e} [{}]", m.iter, m.val_cer, m.lr, m.trainable.join(","));
                }
            })?;
            if let Some(e) = failed {
                return Err(e);
            }
            save_checkpoint(&outcome.last, &out.join("finetune_last.ckpt"))?;
            let best = out.join("finetune_best.ckpt");
            save_checkpoint(&outcome.best, &best)?;
            println!("{} (val CER {:.4} at iteration {})", best.display(), outcome.best_cer, outcome.best.iteration);
        }
        Command::Eval { manifest, checkpoint, split } => {
            require(checkpoint)?;
            let samples = load_split(manifest, (*split).into())?;
            if samples.is_empty() {
                return Err(Error::EmptyInput(format!("split {} of {} is empty", Split::from(*split), manifest.display())));
            }
            let params = load_checkpoint(checkpoint)?.params;
            let report = evaluate_model(&params, &samples, cfg.finetune.max_decode_len, 32)?;
            let path = out.join(format!("eval_{}.json", Split::from(*split)));
            let json = serde_json::to_vec_pretty(&report).map_err(|e| Error::Data(e.to_string()))?;
            write_file(&path, &json)?;
            snapshot("eval")?;
            println!("{} lines, {} edits / {} chars -> {}", report.lines.len(), report.total_edits, report.total_ref_chars, path.display());
            println!("CER {:.4}", report.cer);
        }
        Command::Trigrams { manifest, labels, top } => {
            require(manifest)?;
            require(labels)?;
            let samples = Corpus::open(manifest)?.samples(None)?;
            let store = read_label_store(labels)?;
            let groups = trigram_report(&store, &samples, *top)?;
            if groups.is_empty() {
                return Err(Error::EmptyInput("no label trigrams (lines shorter than 3 patches)".into()));
            }
            let dir = out.join("trigrams");
            create_dir(&dir)?;
            let mut summary = Vec::new();
            for (rank, g) in groups.iter().enumerate() {
                let file = format!("group_{rank:02}_{}-{}-{}.pgm", g.key[0], g.key[1], g.key[2]);
                contact_sheet(g.crops.iter().map(|c| &c.image).collect())?.save_pgm(&dir.join(&file))?;
                summary.push(serde_json::json!({
                    "rank": rank,
                    "key": g.key,
                    "count": g.count,
                    "image": file,
                    "crops": g.crops.iter().map(|c| serde_json::json!({"id": c.id, "patch": c.patch})).collect::<Vec<_>>(),
                }));
                println!("{:>2}  {:?}  x{}", rank, g.key, g.count);
            }
            let json = serde_json::to_vec_pretty(&summary).map_err(|e| Error::Data(e.to_string()))?;
            write_file(&dir.join("trigrams.json"), &json)?;
            snapshot("trigrams")?;
        }
        Command::Plot { metrics, metric } => {
            let mut series = Vec::new();
            let mut chosen = metric.clone();
            for path in metrics {
                require(path)?;
                let (s, m) = load_series(path, chosen.as_deref())?;
                chosen = Some(m);
                series.push(s);
            }
            let metric = chosen.unwrap_or_else(|| "loss".into());
            if series.iter().all(|s| s.points.is_empty()) {
                return Err(Error::EmptyInput("metrics files contain no rows".into()));
            }
            let svg = render_svg(&series, &metric)?;
            write_file(&out.join("plot.svg"), svg.as_bytes())?;
            write_file(&out.join("plot.csv"), &write_csv(&series, &metric)?)?;
            println!("{}", out.join("plot.svg").display());
        }
    }
    Ok(())
}

/// Crops side by side, separated by 4 mid-gray columns.
fn contact_sheet(crops: Vec<&LineImage>) -> Result<LineImage> {
    const GAP: usize = 4;
    let width = crops.iter().map(|c| c.width() + GAP).sum::<usize>().saturating_sub(GAP).max(1);
    let mut sheet = LineImage::filled(LINE_HEIGHT, width, 0.5);
    let mut x0 = 0;
    for c in crops {
        for y in 0..LINE_HEIGHT {
            for x in 0..c.width() {
                sheet.set(x0 + x, y, c.get(x, y));
            }
        }
        x0 += c.width() + GAP;
    }
    Ok(sheet)
}
