//! Subcommands of the `locomt` binary.
//!
//! Each command takes a resolved [`RunConfig`] and an output directory, writes
//! its artifacts atomically and returns a human-readable report with a
//! [`Status`]. Errors map to exit code 2.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use locomt_core::attention::bottleneck_mask;
use locomt_core::config::RunConfig;
use locomt_core::costmodel::{format_cost, verify_ordering, CostReport};
use locomt_core::data::{DataSpec, Dataset};
use locomt_core::model::{save_checkpoint, FusionPattern, ModelParams};
use locomt_core::numerics::{Mask, Rng};
use locomt_core::training::{gradcheck_with, metrics_csv, train_toy, ParamGrads, Split};
use locomt_core::viewconfig::{make_strategy, KeyScope, ModalityLayout, Strategy};

#[derive(Parser, Debug)]
#[command(
    name = "locomt",
    version,
    about = "Per-head view-restricted multimodal attention laboratory"
)]
pub struct Cli {
    /// Run configuration file (flat `key = value`); defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the configured output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Attention cost of every pattern per fusion layer, and the ordering check.
    Cost,
    /// Per-head attention masks as text grids and PGM images.
    Mask,
    /// Per-layer head allocation of a two-modality strategy.
    Strategy {
        #[arg(long)]
        kind: Strategy,
        #[arg(long)]
        heads: usize,
        #[arg(long)]
        fusion_layers: usize,
    },
    /// Finite-difference check of every parameter gradient.
    Gradcheck,
    /// Train on the synthetic parity task.
    Train,
    /// Write the synthetic dataset file.
    GenData,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Ok,
    Violated,
}

impl Status {
    pub fn code(self) -> u8 {
        match self {
            Status::Ok => 0,
            Status::Violated => 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Outcome {
    pub status: Status,
    pub report: String,
}

impl Outcome {
    fn ok(report: String) -> Self {
        Self {
            status: Status::Ok,
            report,
        }
    }
}

/// Loads the config file (or defaults) and applies command-line overrides.
pub fn load_config(path: Option<&Path>, seed: Option<u64>, out: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            RunConfig::parse(&text).with_context(|| format!("in {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
        // A random strategy depends on the seed.
        cfg.validate()?;
    }
    if let Some(o) = out {
        cfg.out_dir = o.to_string_lossy().into_owned();
    }
    Ok(cfg)
}

/// Writes `bytes` to `dir/name` through a temporary file and a rename.
pub fn write_atomic(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf> {
    let path = dir.join(name);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let file_name = path.file_name().context("output path has no file name")?;
    let tmp = path.with_file_name(format!(".{}.tmp{}", file_name.to_string_lossy(), std::process::id()));
    let mut file = fs::File::create(&tmp).with_context(|| format!("creating {}", tmp.display()))?;
    file.write_all(bytes)?;
    file.sync_all()?;
    fs::rename(&tmp, &path).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    let cfg = load_config(cli.config.as_deref(), cli.seed, cli.out.as_deref())?;
    let out = PathBuf::from(&cfg.out_dir);
    match &cli.command {
        Command::Cost => cmd_cost(&cfg, &out),
        Command::Mask => cmd_mask(&cfg, &out),
        Command::Strategy {
            kind,
            heads,
            fusion_layers,
        } => cmd_strategy(*kind, *heads, *fusion_layers, cfg.seed, &out),
        Command::Gradcheck => cmd_gradcheck(&cfg, &out),
        Command::Train => cmd_train(&cfg, &out),
        Command::GenData => cmd_gen_data(&cfg, &out),
    }
}

/// Runs `f` on a pool capped by `LOCOMT_THREADS` when it is set.
pub fn with_thread_cap<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    match std::env::var("LOCOMT_THREADS") {
        Ok(v) => {
            let n: usize = v.trim().parse().context("LOCOMT_THREADS must be a positive integer")?;
            if n == 0 {
                bail!("LOCOMT_THREADS must be a positive integer");
            }
            let pool = rayon::ThreadPoolBuilder::new().num_threads(n).build()?;
            Ok(pool.install(f))
        }
        Err(_) => Ok(f()),
    }
}

/// Writes `cost.csv` with columns `pattern,layer,cost`: one row per pattern
/// and fusion layer plus a `gap` row. The cross row is omitted when there are
/// more than two modalities. Violated when any layer breaks the chain.
pub fn cmd_cost(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let queries = cfg.cost_queries()?;
    let mut csv = String::from("pattern,layer,cost\n");
    let mut report = String::new();
    let mut holds = true;
    for (layer, q) in queries.iter().enumerate() {
        let r = CostReport::compute(q)?;
        let verdict = verify_ordering(q)?;
        let mut row = |name: &str, c: &locomt_core::costmodel::Cost| {
            let _ = writeln!(csv, "{name},{layer},{}", format_cost(c));
        };
        row("self", &r.c_self);
        if let Some(c) = &r.c_cross {
            row("cross", c);
        }
        row("multi", &r.c_multi);
        row("bottleneck", &r.c_bottle);
        row("locomt", &r.c_locomt);
        row("gap", &r.gap);
        holds &= verdict.chain_holds();
        let _ = writeln!(report, "fusion layer {layer}:\n{verdict}");
    }
    let path = write_atomic(out, "cost.csv", csv.as_bytes())?;
    let _ = write!(report, "{csv}wrote {}", path.display());
    Ok(Outcome {
        status: if holds { Status::Ok } else { Status::Violated },
        report,
    })
}

fn mask_text(allowed: &Mask, marked: Option<&Mask>) -> String {
    let mut s = String::with_capacity(allowed.rows() * (allowed.cols() + 1));
    for r in 0..allowed.rows() {
        for c in 0..allowed.cols() {
            s.push(match (allowed.get(r, c), marked.is_some_and(|m| m.get(r, c))) {
                (false, _) => '.',
                (true, true) => 'B',
                (true, false) => '#',
            });
        }
        s.push('\n');
    }
    s
}

fn mask_pgm(allowed: &Mask, marked: Option<&Mask>) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", allowed.cols(), allowed.rows()).into_bytes();
    for r in 0..allowed.rows() {
        for c in 0..allowed.cols() {
            out.push(match (allowed.get(r, c), marked.is_some_and(|m| m.get(r, c))) {
                (false, _) => 0,
                (true, true) => 128,
                (true, false) => 255,
            });
        }
    }
    out
}

/// Renders every head of every layer over the raw modality tokens into
/// `masks/layer{l}_head{h}.{txt,pgm}`.
pub fn cmd_mask(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let model = cfg.model_config()?;
    let layout = ModalityLayout::new(cfg.data.lengths.clone())?;
    let mut report = String::new();
    for layer in 0..model.layers {
        let fusion = model.fusion_index(layer);
        for head in 0..model.n_heads {
            let (allowed, marked) = match fusion {
                None => (KeyScope::Own.mask(&layout), None),
                Some(_) if model.pattern == FusionPattern::Bottleneck => {
                    let (a, m) = bottleneck_mask(&layout, model.bottleneck_tokens);
                    (a, Some(m))
                }
                Some(f) => (model.fusion_scopes(f)[head].mask(&layout), None),
            };
            let text = mask_text(&allowed, marked.as_ref());
            let stem = format!("masks/layer{layer}_head{head}");
            write_atomic(out, &format!("{stem}.txt"), text.as_bytes())?;
            write_atomic(out, &format!("{stem}.pgm"), &mask_pgm(&allowed, marked.as_ref()))?;
            let kind = if fusion.is_some() { "fusion" } else { "unimodal" };
            let _ = writeln!(report, "layer {layer} ({kind}) head {head}:\n{text}");
        }
    }
    let _ = write!(report, "wrote {}", out.join("masks").display());
    Ok(Outcome::ok(report))
}

/// Writes `strategy.csv` with columns `layer,p0,p12`.
pub fn cmd_strategy(kind: Strategy, heads: usize, fusion_layers: usize, seed: u64, out: &Path) -> Result<Outcome> {
    if heads == 0 || fusion_layers == 0 {
        bail!("strategies need at least one head and one fusion layer");
    }
    let mut rng = Rng::new(seed).fork();
    let plan = make_strategy(kind, heads, fusion_layers, 2, &mut rng)?;
    let mut csv = String::from("layer,p0,p12\n");
    for (layer, a) in plan.iter().enumerate() {
        let f = a.frequencies(2);
        let _ = writeln!(csv, "{layer},{},{}", f[0], f[1]);
    }
    let path = write_atomic(out, "strategy.csv", csv.as_bytes())?;
    Ok(Outcome::ok(format!("{csv}wrote {}", path.display())))
}

/// The model and batch the gradient check runs on.
pub fn gradcheck_inputs(
    cfg: &RunConfig,
) -> Result<(
    locomt_core::model::ModelConfig,
    ModelParams,
    Vec<locomt_core::model::Sample>,
)> {
    let model = cfg.model_config()?;
    let spec = DataSpec {
        train_samples: cfg.gradcheck.samples,
        test_samples: 0,
        ..cfg.data.clone()
    };
    let data = Dataset::generate(&spec, cfg.seed)?;
    let mut rng = Rng::new(cfg.seed);
    let params = ModelParams::init(&model, cfg.gradcheck.init_std, &mut rng.fork())?;
    Ok((model, params, data.samples))
}

pub fn cmd_gradcheck(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    cmd_gradcheck_with(cfg, out, |_| {})
}

/// [`cmd_gradcheck`] with a hook applied to the analytic gradients, for
/// negative controls.
pub fn cmd_gradcheck_with(cfg: &RunConfig, out: &Path, tamper: impl Fn(&mut ParamGrads)) -> Result<Outcome> {
    let (model, params, batch) = gradcheck_inputs(cfg)?;
    let report = gradcheck_with(
        &model,
        &params,
        &batch,
        cfg.gradcheck.epsilon,
        cfg.gradcheck.threshold,
        tamper,
    )?;
    let path = write_atomic(out, "gradcheck.csv", report.to_csv().as_bytes())?;
    let passed = report.passed();
    let text = format!(
        "{} parameter tensors, max relative error {:.3e} (threshold {:.1e}): {}\nwrote {}",
        report.entries.len(),
        report.max_rel_error(),
        report.threshold,
        if passed { "pass" } else { "FAIL" },
        path.display()
    );
    Ok(Outcome {
        status: if passed { Status::Ok } else { Status::Violated },
        report: text,
    })
}

/// Writes `metrics.csv`, `checkpoint.bin` and the resolved `config.txt`.
pub fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let model = cfg.model_config()?;
    let data = Dataset::generate(&cfg.data, cfg.seed)?;
    let result = train_toy(&model, &cfg.train, data.train(), data.test(), cfg.seed)?;
    let csv = metrics_csv(&result.trace);
    write_atomic(out, "metrics.csv", csv.as_bytes())?;
    write_atomic(out, "checkpoint.bin", &save_checkpoint(&result.params))?;
    write_atomic(out, "config.txt", cfg.to_text().as_bytes())?;
    let mut report = String::new();
    for split in [Split::Train, Split::Test] {
        if let Some(m) = result.trace.iter().rev().find(|m| m.split == split) {
            let _ = writeln!(
                report,
                "epoch {} {}: loss {:.4}, accuracy {:.4}",
                m.epoch,
                split.name(),
                m.loss,
                m.accuracy
            );
        }
    }
    let _ = write!(report, "wrote {}", out.display());
    Ok(Outcome::ok(report))
}

/// Writes `dataset.bin`.
pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<Outcome> {
    let data = Dataset::generate(&cfg.data, cfg.seed)?;
    let path = write_atomic(out, "dataset.bin", &data.to_bytes())?;
    Ok(Outcome::ok(format!(
        "{} samples ({} train) wrote {}",
        data.samples.len(),
        data.spec.train_samples,
        path.display()
    )))
}
