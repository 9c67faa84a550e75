use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use mwp_core::config::RunConfig;
use mwp_core::dataset::{self, Dataset, GeneratorConfig, Split, SplitIndex, WasteRecord};
use mwp_core::eval::{ablation_csv, evaluate, run_ablation};
use mwp_core::explain::{attach_narration, explain, NarrationEndpoint};
use mwp_core::features::{feature_audit, write_audit_csv};
use mwp_core::gradsuite::{run_suite, TOLERANCE};
use mwp_core::loss::LossKind;
use mwp_core::model::{Batch, FusionMode};
use mwp_core::train::{prepare, train, TrainOptions, TrainRequest, TrainState};
use mwp_core::{Error, Result};

const CONFIG_ECHO: &str = "run_config.toml";
const SPLIT_FILE: &str = "split.json";

#[derive(Parser)]
#[command(name = "mwp", version, about = "Multimodal weight prediction: data, training, evaluation and explanation")]
struct Cli {
    /// Worker threads for data generation and matrix products. Results are
    /// bitwise reproducible only with 1.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Only warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write a synthetic dataset.
    Generate {
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Generator settings (TOML); defaults otherwise.
        #[arg(long)]
        generator: Option<PathBuf>,
    },
    /// Train a model on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: Overrides,
        /// Continue from a full checkpoint (`final.ckpt`).
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many completed epochs.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Metrics for one split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Defaults to `split.json` next to the checkpoint.
        #[arg(long)]
        split_index: Option<PathBuf>,
        /// Defaults to the checkpoint's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Predict the weight of records in a metadata CSV.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        record: PathBuf,
        /// 0-based data row; all rows when omitted.
        #[arg(long)]
        row: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Explain one prediction.
    Explain {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        record: PathBuf,
        #[arg(long, default_value_t = 0)]
        row: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the gradient-check suite.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: u64,
    },
    /// Train the ablation matrix.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        overrides: Overrides,
        /// Train variants concurrently.
        #[arg(long)]
        parallel: bool,
    },
}

#[derive(Args)]
struct Common {
    /// Run configuration file (`section.key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct Overrides {
    #[arg(long)]
    fusion: Option<FusionMode>,
    #[arg(long)]
    stages: Option<usize>,
    #[arg(long)]
    loss: Option<LossKind>,
    #[arg(long)]
    epochs: Option<usize>,
    /// Training seed (initialisation, shuffling, augmentation, dropout).
    #[arg(long)]
    seed: Option<u64>,
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p),
            None => Ok(RunConfig::default()),
        }
    }
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(m) = self.fusion {
            cfg.model.fusion.mode = m;
        }
        if let Some(s) = self.stages {
            cfg.model.fusion.stages = s;
        }
        if let Some(l) = self.loss {
            cfg.train.loss = l;
        }
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
            if cfg.train.warmup_epochs >= e {
                cfg.train.warmup_epochs = e / 4;
                log::info!("warm-up shortened to {} epochs to fit --epochs {e}", cfg.train.warmup_epochs);
            }
        }
        cfg.validate()
    }
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn json<T: Serialize>(v: &T) -> String {
    serde_json::to_string_pretty(v).expect("serialisable") + "\n"
}

#[derive(Serialize, Deserialize)]
struct SplitFile {
    hash: String,
    #[serde(flatten)]
    index: SplitIndex,
}

fn read_split(path: &Path) -> Result<SplitIndex> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let f: SplitFile =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    if f.index.hash() != f.hash {
        return Err(Error::Config(format!("{}: stored hash does not match its ids", path.display())));
    }
    Ok(f.index)
}

fn cmd_generate(out: &Path, common: &Common, n: Option<usize>, seed: Option<u64>, generator: Option<&Path>) -> Result<()> {
    let mut cfg = common.load()?;
    if let Some(n) = n {
        cfg.data.n = n;
    }
    if let Some(s) = seed {
        cfg.data.seed = s;
    }
    let gen = match generator {
        Some(p) => GeneratorConfig::from_toml(&fs::read_to_string(p).map_err(|e| Error::io(p, e))?)?,
        None => GeneratorConfig { image_side: cfg.model.vit.image_side, ..Default::default() },
    };
    let records = dataset::generate(&gen, cfg.data.n, cfg.data.seed)?;
    let ds = Dataset { records, vocabulary: gen.vocabulary() };
    ds.save(out)?;
    write(&out.join("generator.toml"), gen.to_toml())?;
    let samples: Vec<_> = ds.records.iter().map(|r| (r.geometry, r.weight_kg)).collect();
    let mut audit = Vec::new();
    write_audit_csv(&feature_audit(&samples)?, &mut audit)?;
    write(&out.join("feature_audit.csv"), audit)?;
    write(&out.join(CONFIG_ECHO), cfg.echo())?;
    log::info!("wrote {} records to {}", ds.records.len(), out.display());
    Ok(())
}

fn cmd_train(
    data: &Path,
    out: &Path,
    common: &Common,
    overrides: &Overrides,
    resume: Option<&Path>,
    stop_after: Option<usize>,
) -> Result<()> {
    let mut cfg = common.load()?;
    overrides.apply(&mut cfg)?;
    let ds = Dataset::load(data)?;
    let split = ds.split(cfg.data.split, cfg.data.seed)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write(&out.join(SPLIT_FILE), json(&SplitFile { hash: split.hash(), index: split.clone() }))?;
    write(&out.join(CONFIG_ECHO), cfg.echo())?;
    let resume = resume.map(TrainState::load).transpose()?;
    let req = TrainRequest {
        train: ds.subset(&split, Split::Train)?,
        val: ds.subset(&split, Split::Val)?,
        model: cfg.model.clone(),
        config: cfg.train.clone(),
        vocabulary: ds.vocabulary.clone(),
        split_hash: split.hash(),
    };
    let opts = TrainOptions { resume, stop_after, out_dir: Some(out.to_path_buf()), observer: None };
    let outcome = train(req, opts)?;
    let s = &outcome.state;
    log::info!("best validation MAE {:.3} kg at epoch {}", s.best_val_mae, s.best_epoch);
    Ok(())
}

fn cmd_eval(checkpoint: &Path, data: &Path, split: Split, split_index: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let state = TrainState::load(checkpoint)?;
    let ckpt_dir = checkpoint.parent().unwrap_or(Path::new("."));
    let index_path = split_index.map(Path::to_path_buf).unwrap_or_else(|| ckpt_dir.join(SPLIT_FILE));
    let index = read_split(&index_path)?;
    if index.hash() != state.split_hash {
        return Err(Error::Config(format!(
            "split index {} has hash {}, but the checkpoint expects {}",
            index_path.display(),
            index.hash(),
            state.split_hash
        )));
    }
    let ds = Dataset::load(data)?;
    let records = ds.subset(&index, split)?;
    let (report, _) = evaluate(&state, &records, split, &state.split_hash)?;
    let out = out.unwrap_or(ckpt_dir);
    write(&out.join(format!("metrics_{split}.json")), report.to_json() + "\n")?;
    write(&out.join(format!("metrics_{split}.csv")), report.to_csv())?;
    let m = &report.metrics;
    println!(
        "{split}: n={} MAE={:.3} kg RMSE={:.3} kg MAPE={:.2}% R2={:.4}",
        m.n, m.mae_kg, m.rmse_kg, m.mape_pct, m.r2
    );
    Ok(())
}

fn read_rows(state: &TrainState, record: &Path, row: Option<usize>) -> Result<Vec<WasteRecord>> {
    let mut rows = dataset::load_records(record, &state.vocabulary)?;
    if let Some(k) = row {
        if k >= rows.len() {
            return Err(Error::Index(format!("row {k} requested but {} has {} rows", record.display(), rows.len())));
        }
        rows = vec![rows.swap_remove(k)];
    }
    Ok(rows)
}

#[derive(Serialize)]
struct Prediction {
    id: u64,
    category: String,
    prediction_kg: f64,
    actual_kg: f64,
}

fn cmd_predict(checkpoint: &Path, record: &Path, row: Option<usize>, out: Option<&Path>) -> Result<()> {
    let state = TrainState::load(checkpoint)?;
    let rows = read_rows(&state, record, row)?;
    let refs: Vec<&WasteRecord> = rows.iter().collect();
    let items = prepare(&refs, &state.standardizer)?;
    let model = state.inference_model();
    let mut preds = Vec::with_capacity(items.len());
    for p in &items {
        let batch = Batch::new(&[&p.record.image], &[p.features], &model.cfg.vit)?;
        preds.push(Prediction {
            id: p.record.id,
            category: state.vocabulary[p.record.category].clone(),
            prediction_kg: model.predict(&batch)?[0],
            actual_kg: p.record.weight_kg,
        });
    }
    let text = json(&preds);
    match out {
        Some(path) => write(path, &text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_explain(checkpoint: &Path, record: &Path, row: usize, out: &Path) -> Result<()> {
    let state = TrainState::load(checkpoint)?;
    let rows = read_rows(&state, record, Some(row))?;
    let items = prepare(&[&rows[0]], &state.standardizer)?;
    let r = items[0].record;
    let model = state.inference_model();
    let mut report = explain(
        &model,
        &r.image,
        &items[0].features,
        state.modal_category,
        &state.vocabulary[r.category],
        Some(r.weight_kg),
    )?;
    attach_narration(&mut report, NarrationEndpoint::from_env().as_ref());
    write(&out.join("report.txt"), &report.rendered_text)?;
    write(&out.join("report.json"), report.to_json() + "\n")?;
    print!("{}", report.rendered_text);
    let ok = report.efficiency_gap.abs() < 1e-6;
    println!(
        "efficiency check: |sum(phi) - (f(x) - f(baseline))| = {:.3e} ({})",
        report.efficiency_gap.abs(),
        if ok { "pass" } else { "FAIL" }
    );
    if !ok {
        return Err(Error::Numeric(format!("Shapley efficiency gap {:e}", report.efficiency_gap)));
    }
    Ok(())
}

fn cmd_gradcheck(seeds: u64) -> Result<()> {
    let rows = run_suite(seeds)?;
    println!("{:<16} {:>6} {:>9} {:>14}  result", "operation", "seeds", "compared", "max_rel_err");
    for r in &rows {
        println!(
            "{:<16} {:>6} {:>9} {:>14.3e}  {}",
            r.name,
            r.seeds,
            r.compared,
            r.max_rel_error,
            if r.pass { "pass" } else { "FAIL" }
        );
    }
    let failed: Vec<_> = rows.iter().filter(|r| !r.pass).map(|r| format!("{} ({:e})", r.name, r.max_rel_error)).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Numeric(format!("gradient check above {TOLERANCE:e}: {}", failed.join(", "))))
    }
}

fn cmd_ablate(data: &Path, out: &Path, common: &Common, overrides: &Overrides, parallel: bool) -> Result<()> {
    let mut cfg = common.load()?;
    overrides.apply(&mut cfg)?;
    let ds = Dataset::load(data)?;
    let split = ds.split(cfg.data.split, cfg.data.seed)?;
    let rows = run_ablation(&ds.records, &ds.vocabulary, &split, &cfg, parallel)?;
    write(&out.join("ablation.csv"), ablation_csv(&rows))?;
    write(&out.join("ablation.json"), json(&rows))?;
    write(&out.join(SPLIT_FILE), json(&SplitFile { hash: split.hash(), index: split }))?;
    write(&out.join(CONFIG_ECHO), cfg.echo())?;
    print!("{}", ablation_csv(&rows));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    match cli.cmd {
        Cmd::Generate { out, common, n, seed, generator } => cmd_generate(&out, &common, n, seed, generator.as_deref()),
        Cmd::Train { data, out, common, overrides, resume, stop_after } => {
            cmd_train(&data, &out, &common, &overrides, resume.as_deref(), stop_after)
        }
        Cmd::Eval { checkpoint, data, split, split_index, out } => {
            cmd_eval(&checkpoint, &data, split, split_index.as_deref(), out.as_deref())
        }
        Cmd::Predict { checkpoint, record, row, out } => cmd_predict(&checkpoint, &record, row, out.as_deref()),
        Cmd::Explain { checkpoint, record, row, out } => cmd_explain(&checkpoint, &record, row, &out),
        Cmd::Gradcheck { seeds } => cmd_gradcheck(seeds),
        Cmd::Ablate { data, out, common, overrides, parallel } => cmd_ablate(&data, &out, &common, &overrides, parallel),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
