//! Command implementations behind the `gf2cnn` binary.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use gf2cnn::checkpoint::{read_checkpoint, write_checkpoint};
use gf2cnn::config::Config;
use gf2cnn::data::Dataset;
use gf2cnn::memplan::{format_kb, mb, weight_size};
use gf2cnn::nn::{insert_compression, CompressionConfig, CompressionMode, Model, NetworkGraph};
use gf2cnn::train::{
    calibrate_model, evaluate, finite_diff_check, metrics_csv, prepare_compressed, retrain_from_quantized, train,
    GradCheckConfig, GradCheckReport,
};
use gf2cnn::Error;

/// Exit codes, one per failure class.
pub mod exit {
    pub const OTHER: i32 = 1;
    pub const CONFIG: i32 = 3;
    pub const GRAPH: i32 = 4;
    pub const CHECKPOINT: i32 = 5;
    pub const IO: i32 = 6;
    pub const NON_FINITE: i32 = 7;
    pub const GRADCHECK: i32 = 8;
}

/// Returned when the finite-difference check ran but did not pass.
#[derive(Debug)]
pub struct GradCheckFailed {
    pub max_rel_err: f64,
    pub tolerance: f64,
}

impl fmt::Display for GradCheckFailed {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "gradient check FAILED: max relative error {:.3e} > {:.1e}", self.max_rel_err, self.tolerance)
    }
}

impl std::error::Error for GradCheckFailed {}

pub fn exit_code(err: &anyhow::Error) -> i32 {
    if err.downcast_ref::<GradCheckFailed>().is_some() {
        return exit::GRADCHECK;
    }
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return match e {
                Error::Config(_) => exit::CONFIG,
                Error::Graph(_) | Error::Plan(_) => exit::GRAPH,
                Error::Checkpoint(_) => exit::CHECKPOINT,
                Error::Io(_) | Error::Format { .. } => exit::IO,
                Error::NonFinite(_) => exit::NON_FINITE,
                _ => exit::OTHER,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return exit::IO;
        }
    }
    exit::OTHER
}

/// Options shared by every command.
#[derive(Clone, Debug, Default)]
pub struct Common {
    pub config: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub bits: Option<u8>,
    pub mode: Option<CompressionMode>,
}

struct Loaded {
    cfg: Config,
    base: NetworkGraph,
}

fn load(c: &Common) -> Result<Loaded> {
    let cfg = Config::load(&c.config)?;
    let base = cfg.build_graph().with_context(|| format!("building the network in {}", c.config.display()))?;
    Ok(Loaded { cfg, base })
}

fn datasets(c: &Common, cfg: &Config) -> Result<(Dataset, Dataset)> {
    let Some(src) = &cfg.data else {
        return Err(Error::Config("config has no [data] section".into()).into());
    };
    let base = c.config.parent().unwrap_or(Path::new("."));
    src.load(base).context("loading the dataset")
}

fn out_dir(c: &Common) -> Result<PathBuf> {
    let dir = c.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn checkpoint_path(c: &Common) -> Result<&Path> {
    match &c.checkpoint {
        Some(p) => Ok(p),
        None => Err(Error::Checkpoint("this command needs --checkpoint".into()).into()),
    }
}

/// Compression settings for commands that change the graph; `force_mode`
/// pins the mode (quantize uses `none`).
fn compression(c: &Common, cfg: &Config, force_mode: Option<CompressionMode>) -> Result<CompressionConfig> {
    let mode = force_mode.or(c.mode);
    match cfg.compression_with(c.bits, mode)? {
        Some(cc) => Ok(cc),
        None => Err(Error::Config("config has no [compression] section".into()).into()),
    }
}

/// The graph a checkpoint was written for: compressed when `--bits` or
/// `--mode` is given, the base graph otherwise.
fn eval_graph(c: &Common, l: &Loaded) -> Result<NetworkGraph> {
    if c.bits.is_none() && c.mode.is_none() {
        return Ok(l.base.clone());
    }
    let cc = compression(c, &l.cfg, None)?;
    let (g, _, _) = insert_compression(&l.base, &l.cfg.fusion_plan(), &cc)?;
    Ok(g)
}

pub fn cmd_train(c: &Common) -> Result<String> {
    let l = load(c)?;
    let (train_set, test_set) = datasets(c, &l.cfg)?;
    let mut tc = l.cfg.train.clone();
    if let Some(s) = c.seed {
        tc.seed = s;
    }
    let mut model = Model::init(l.base.clone(), tc.seed)?;
    let log = train(&mut model, &train_set, &test_set, &tc)?;
    let dir = out_dir(c)?;
    write_checkpoint(&dir.join("model.ckpt"), &model)?;
    write(&dir.join("metrics.csv"), &metrics_csv(&log))?;
    let last = log.last().expect("at least one evaluation");
    Ok(format!(
        "trained {} iterations: loss {:.4} top1 {:.4} top5 {:.4}\nwrote {}",
        model.iteration,
        last.loss,
        last.top1,
        last.top5,
        dir.join("model.ckpt").display()
    ))
}

pub fn cmd_eval(c: &Common) -> Result<String> {
    let l = load(c)?;
    let graph = eval_graph(c, &l)?;
    let model = read_checkpoint(checkpoint_path(c)?, &graph)?;
    let (_, test_set) = datasets(c, &l.cfg)?;
    let r = evaluate(&model, &test_set, 64)?;
    let line = format!("loss {:.6} top1 {:.6} top5 {:.6}", r.loss, r.top1, r.top5);
    if let Some(dir) = &c.out {
        fs::create_dir_all(dir)?;
        write(
            &dir.join("eval.csv"),
            &format!("loss,top1,top5\n{:.6},{:.6},{:.6}\n", r.loss, r.top1, r.top5),
        )?;
    }
    Ok(line)
}

/// Inserts quantizers only, calibrates, evaluates without retraining.
pub fn cmd_quantize(c: &Common) -> Result<String> {
    let l = load(c)?;
    let float = read_checkpoint(checkpoint_path(c)?, &l.base)?;
    let cc = compression(c, &l.cfg, Some(CompressionMode::None))?;
    let (train_set, test_set) = datasets(c, &l.cfg)?;
    let (model, _, _) = prepare_compressed(&float, &l.cfg.fusion_plan(), &cc, &train_set, l.cfg.finetune_config())?;
    let r = evaluate(&model, &test_set, 64)?;
    let dir = out_dir(c)?;
    write_checkpoint(&dir.join("quantized.ckpt"), &model)?;
    write(
        &dir.join("eval.csv"),
        &format!("loss,top1,top5\n{:.6},{:.6},{:.6}\n", r.loss, r.top1, r.top5),
    )?;
    Ok(format!(
        "uint{} quantized, not retrained: loss {:.6} top1 {:.6} top5 {:.6}\nwrote {}",
        cc.bits,
        r.loss,
        r.top1,
        r.top5,
        dir.join("quantized.ckpt").display()
    ))
}

/// Quantizes and (depending on the mode) compresses, then retrains.
pub fn cmd_compress(c: &Common) -> Result<String> {
    let l = load(c)?;
    let float = read_checkpoint(checkpoint_path(c)?, &l.base)?;
    let cc = compression(c, &l.cfg, None)?;
    let (train_set, test_set) = datasets(c, &l.cfg)?;
    let mut tc = l.cfg.finetune_config().clone();
    if let Some(s) = c.seed {
        tc.seed = s;
    }
    let out = retrain_from_quantized(&float, &l.cfg.fusion_plan(), &cc, &train_set, &test_set, &tc)?;
    let dir = out_dir(c)?;
    write_checkpoint(&dir.join("compressed.ckpt"), &out.model)?;
    write(&dir.join("metrics.csv"), &metrics_csv(&out.metrics))?;
    let first = out.metrics.first().expect("evaluated");
    let last = out.metrics.last().expect("evaluated");
    Ok(format!(
        "uint{} {}: before retraining top1 {:.6}, after {} iterations top1 {:.6} top5 {:.6}\nwrote {}",
        cc.bits,
        cc.mode,
        first.top1,
        out.model.iteration,
        last.top1,
        last.top5,
        dir.join("compressed.ckpt").display()
    ))
}

pub fn cmd_memplan(c: &Common) -> Result<String> {
    let l = load(c)?;
    let table = l.cfg.memory_table()?;
    let mut text = table.to_text();
    let bits = l.cfg.memplan.as_ref().map(|m| m.weight_bits.clone()).unwrap_or_default();
    for b in bits {
        let bytes = weight_size(&l.base, b)?;
        text.push_str(&format!("Weights at {b} bits: {:.1} MB ({} KB)\n", mb(bytes), format_kb(bytes)));
    }
    if let Some(dir) = &c.out {
        fs::create_dir_all(dir)?;
        write(&dir.join("memplan.csv"), &table.to_csv())?;
        write(&dir.join("memplan.txt"), &text)?;
        for (label, report) in &table.columns {
            let file: String = label
                .chars()
                .map(|ch| if ch.is_ascii_alphanumeric() { ch.to_ascii_lowercase() } else { '_' })
                .collect();
            write(&dir.join(format!("edges_{file}.csv")), &report.to_csv())?;
        }
    }
    Ok(text)
}

pub fn format_report(r: &GradCheckReport) -> String {
    let mut s = String::from("layer                         checked  skipped  max_rel_err\n");
    for l in &r.layers {
        s.push_str(&format!("{:<30}{:>7}  {:>7}  {:.3e}\n", l.layer, l.checked, l.skipped, l.max_rel_err));
    }
    s.push_str(&format!(
        "{}: max relative error {:.3e}, tolerance {:.1e}\n",
        if r.pass { "PASS" } else { "FAIL" },
        r.max_rel_err,
        r.tolerance
    ));
    s
}

/// Double-precision check on a few training samples. Uses the checkpoint
/// when given, a seeded initialisation otherwise; quantizers are calibrated
/// on the training set when the checkpoint does not carry them.
pub fn cmd_gradcheck(c: &Common) -> Result<String> {
    let l = load(c)?;
    let graph = eval_graph(c, &l)?;
    let seed = c.seed.unwrap_or(0);
    let mut model = match &c.checkpoint {
        Some(p) => read_checkpoint(p, &graph)?,
        None => Model::init(graph, seed)?,
    };
    let (train_set, _) = datasets(c, &l.cfg)?;
    if model.quant.is_empty() && model.graph.layers.iter().any(|x| x.op.kind() == "quantize") {
        calibrate_model(&mut model, &train_set, l.cfg.train.calibration_samples, 64)?;
    }
    let mut gc = l.cfg.gradcheck.clone().unwrap_or_else(GradCheckConfig::double);
    gc.seed = seed;
    let batch = train_set.take(2);
    let x = batch.images.cast::<f64>();
    let report = finite_diff_check::<f64>(&model, &x, &batch.labels, &gc)?;
    let text = format_report(&report);
    if let Some(dir) = &c.out {
        fs::create_dir_all(dir)?;
        write(&dir.join("gradcheck.txt"), &text)?;
    }
    if !report.pass {
        print!("{text}");
        return Err(GradCheckFailed {
            max_rel_err: report.max_rel_err,
            tolerance: report.tolerance,
        }
        .into());
    }
    Ok(text)
}
