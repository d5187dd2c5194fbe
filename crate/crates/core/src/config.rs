//! Flat `key = value` run configuration.
//!
//! Keys are grouped by prefix (`data.`, `model.`, `train.`, `gradcheck.`,
//! `out.`) plus a top-level `seed`. Blank lines and `#` comments are ignored.
//! Unknown or repeated keys are errors. Every key has a default, so an empty
//! file describes the reference toy experiment.

use std::collections::HashSet;
use std::fmt::Write as _;

use crate::costmodel::CostQuery;
use crate::data::DataSpec;
use crate::error::{Error, Result};
use crate::model::{FusionPattern, ModelConfig};
use crate::numerics::Rng;
use crate::training::TrainConfig;
use crate::viewconfig::{make_strategy, LayerPlan, ModalityLayout, Strategy, ViewAssignment};

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub samples: usize,
    pub epsilon: f64,
    pub threshold: f64,
    pub init_std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSpec,
    pub d: usize,
    pub heads: usize,
    pub layers: usize,
    pub fusion_layers: usize,
    /// Defaults to `4 * d` when unset.
    pub d_ff: Option<usize>,
    pub classes: usize,
    pub pattern: FusionPattern,
    /// One frequency vector per fusion layer, or a single one for all.
    pub frequencies: Option<Vec<Vec<usize>>>,
    pub strategy: Option<Strategy>,
    pub bottleneck_tokens: usize,
    pub train: TrainConfig,
    pub gradcheck: GradcheckConfig,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            data: DataSpec {
                lengths: vec![6, 4],
                feature_dims: vec![4, 4],
                train_samples: 2048,
                test_samples: 512,
                noise: 1.0,
            },
            d: 16,
            heads: 2,
            layers: 2,
            fusion_layers: 1,
            d_ff: None,
            classes: 2,
            pattern: FusionPattern::LoCoMT,
            frequencies: Some(vec![vec![1, 1]]),
            strategy: None,
            bottleneck_tokens: 1,
            train: TrainConfig::default(),
            gradcheck: GradcheckConfig {
                samples: 2,
                epsilon: 1e-4,
                threshold: 1e-4,
                init_std: 0.3,
            },
            out_dir: "out".into(),
        }
    }
}

fn config_err(line: usize, msg: impl std::fmt::Display) -> Error {
    Error::Format {
        what: "config",
        detail: if line == 0 {
            msg.to_string()
        } else {
            format!("line {line}: {msg}")
        },
    }
}

fn parse_num<T: std::str::FromStr>(line: usize, key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| config_err(line, format!("{key}: {e}")))
}

fn parse_list(line: usize, key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|p| parse_num(line, key, p.trim())).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        let mut seen = HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let content = raw.split('#').next().unwrap().trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content
                .split_once('=')
                .ok_or_else(|| config_err(line, "expected `key = value`"))?;
            let (key, v) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(config_err(line, format!("duplicate key `{key}`")));
            }
            cfg.set(line, key, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn set(&mut self, line: usize, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_num(line, key, v)?,
            "data.lengths" => self.data.lengths = parse_list(line, key, v)?,
            "data.feature_dims" => self.data.feature_dims = parse_list(line, key, v)?,
            "data.train_samples" => self.data.train_samples = parse_num(line, key, v)?,
            "data.test_samples" => self.data.test_samples = parse_num(line, key, v)?,
            "data.noise" => self.data.noise = parse_num(line, key, v)?,
            "model.d" => self.d = parse_num(line, key, v)?,
            "model.heads" => self.heads = parse_num(line, key, v)?,
            "model.layers" => self.layers = parse_num(line, key, v)?,
            "model.fusion_layers" => self.fusion_layers = parse_num(line, key, v)?,
            "model.d_ff" => self.d_ff = Some(parse_num(line, key, v)?),
            "model.classes" => self.classes = parse_num(line, key, v)?,
            "model.pattern" => self.pattern = v.parse().map_err(|e| config_err(line, e))?,
            "model.frequencies" => {
                self.frequencies = if v.is_empty() {
                    None
                } else {
                    Some(
                        v.split(';')
                            .map(|l| parse_list(line, key, l.trim()))
                            .collect::<Result<_>>()?,
                    )
                };
            }
            "model.strategy" => {
                self.strategy = if v.is_empty() {
                    None
                } else {
                    Some(v.parse().map_err(|e| config_err(line, e))?)
                };
            }
            "model.bottleneck_tokens" => self.bottleneck_tokens = parse_num(line, key, v)?,
            "train.epochs" => self.train.epochs = parse_num(line, key, v)?,
            "train.batch_size" => self.train.batch_size = parse_num(line, key, v)?,
            "train.lr" => self.train.base_lr = parse_num(line, key, v)?,
            "train.momentum" => self.train.momentum = parse_num(line, key, v)?,
            "train.warmup_fraction" => self.train.warmup_fraction = parse_num(line, key, v)?,
            "train.init_std" => self.train.init_std = parse_num(line, key, v)?,
            "gradcheck.samples" => self.gradcheck.samples = parse_num(line, key, v)?,
            "gradcheck.epsilon" => self.gradcheck.epsilon = parse_num(line, key, v)?,
            "gradcheck.threshold" => self.gradcheck.threshold = parse_num(line, key, v)?,
            "gradcheck.init_std" => self.gradcheck.init_std = parse_num(line, key, v)?,
            "out.dir" => self.out_dir = v.to_string(),
            other => return Err(config_err(line, format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "data.lengths = {}", join(&self.data.lengths));
        let _ = writeln!(s, "data.feature_dims = {}", join(&self.data.feature_dims));
        let _ = writeln!(s, "data.train_samples = {}", self.data.train_samples);
        let _ = writeln!(s, "data.test_samples = {}", self.data.test_samples);
        let _ = writeln!(s, "data.noise = {:?}", self.data.noise);
        let _ = writeln!(s, "model.d = {}", self.d);
        let _ = writeln!(s, "model.heads = {}", self.heads);
        let _ = writeln!(s, "model.layers = {}", self.layers);
        let _ = writeln!(s, "model.fusion_layers = {}", self.fusion_layers);
        if let Some(d_ff) = self.d_ff {
            let _ = writeln!(s, "model.d_ff = {d_ff}");
        }
        let _ = writeln!(s, "model.classes = {}", self.classes);
        let _ = writeln!(s, "model.pattern = {}", self.pattern);
        let freqs = self
            .frequencies
            .as_ref()
            .map(|f| f.iter().map(|l| join(l)).collect::<Vec<_>>().join(";"))
            .unwrap_or_default();
        let _ = writeln!(s, "model.frequencies = {freqs}");
        let strategy = self.strategy.map(|k| k.name()).unwrap_or_default();
        let _ = writeln!(s, "model.strategy = {strategy}");
        let _ = writeln!(s, "model.bottleneck_tokens = {}", self.bottleneck_tokens);
        let _ = writeln!(s, "train.epochs = {}", self.train.epochs);
        let _ = writeln!(s, "train.batch_size = {}", self.train.batch_size);
        let _ = writeln!(s, "train.lr = {:?}", self.train.base_lr);
        let _ = writeln!(s, "train.momentum = {:?}", self.train.momentum);
        let _ = writeln!(s, "train.warmup_fraction = {:?}", self.train.warmup_fraction);
        let _ = writeln!(s, "train.init_std = {:?}", self.train.init_std);
        let _ = writeln!(s, "gradcheck.samples = {}", self.gradcheck.samples);
        let _ = writeln!(s, "gradcheck.epsilon = {:?}", self.gradcheck.epsilon);
        let _ = writeln!(s, "gradcheck.threshold = {:?}", self.gradcheck.threshold);
        let _ = writeln!(s, "gradcheck.init_std = {:?}", self.gradcheck.init_std);
        let _ = writeln!(s, "out.dir = {}", self.out_dir);
        s
    }

    /// Cross-field checks, including a full [`ModelConfig`] validation.
    pub fn validate(&self) -> Result<()> {
        if self.frequencies.is_some() && self.strategy.is_some() {
            return Err(config_err(0, "set model.frequencies or model.strategy, not both"));
        }
        if self.data.lengths.len() != self.data.feature_dims.len() {
            return Err(config_err(0, "data.lengths and data.feature_dims differ in count"));
        }
        if self.train.batch_size == 0 || self.train.epochs == 0 {
            return Err(config_err(0, "train.batch_size and train.epochs must be positive"));
        }
        if !(0.0..=1.0).contains(&self.train.warmup_fraction) {
            return Err(config_err(0, "train.warmup_fraction must lie in [0, 1]"));
        }
        if self.gradcheck.samples == 0 || self.gradcheck.epsilon <= 0.0 {
            return Err(config_err(
                0,
                "gradcheck.samples and gradcheck.epsilon must be positive",
            ));
        }
        self.model_config()?.validate()
    }

    /// Fusion-layer assignments from explicit frequencies or a strategy, if
    /// either is configured.
    pub fn fusion_assignments(&self) -> Result<Option<Vec<ViewAssignment>>> {
        let m = self.data.lengths.len();
        if let Some(freqs) = &self.frequencies {
            let per_layer: Vec<&Vec<usize>> = match freqs.len() {
                1 => vec![&freqs[0]; self.fusion_layers],
                n if n == self.fusion_layers => freqs.iter().collect(),
                n => {
                    return Err(Error::Frequency(format!(
                        "{n} frequency vectors for {} fusion layers",
                        self.fusion_layers
                    )))
                }
            };
            let assignments = per_layer
                .into_iter()
                .map(|f| {
                    let a = ViewAssignment::from_frequencies(m, f)?;
                    if a.n_heads() != self.heads {
                        return Err(Error::Frequency(format!(
                            "frequencies {} use {} heads, model.heads = {}",
                            join(f),
                            a.n_heads(),
                            self.heads
                        )));
                    }
                    Ok(a)
                })
                .collect::<Result<_>>()?;
            return Ok(Some(assignments));
        }
        if let Some(kind) = self.strategy {
            if self.fusion_layers == 0 {
                return Ok(Some(Vec::new()));
            }
            let mut rng = Rng::new(self.seed).fork();
            return make_strategy(kind, self.heads, self.fusion_layers, m, &mut rng).map(Some);
        }
        Ok(None)
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        let plan = match self.fusion_assignments()? {
            Some(a) => Some(LayerPlan::new(self.layers, a)?),
            None if self.fusion_layers == 0 => Some(LayerPlan::new(self.layers, Vec::new())?),
            None => None,
        };
        Ok(ModelConfig {
            lengths: self.data.lengths.clone(),
            feature_dims: self.data.feature_dims.clone(),
            d: self.d,
            n_heads: self.heads,
            layers: self.layers,
            fusion_layers: self.fusion_layers,
            d_ff: self.d_ff.unwrap_or(4 * self.d),
            num_classes: self.classes,
            pattern: self.pattern,
            plan,
            bottleneck_tokens: self.bottleneck_tokens,
        })
    }

    /// One cost query per fusion layer over the raw modality lengths.
    pub fn cost_queries(&self) -> Result<Vec<CostQuery>> {
        let layout = ModalityLayout::new(self.data.lengths.clone())?;
        let assignments = self
            .fusion_assignments()?
            .ok_or_else(|| Error::Frequency("cost analysis needs model.frequencies or model.strategy".into()))?;
        if assignments.is_empty() {
            return Err(Error::Frequency("cost analysis needs at least one fusion layer".into()));
        }
        assignments
            .iter()
            .map(|a| {
                CostQuery::new(
                    layout.clone(),
                    self.d,
                    self.heads,
                    a.frequencies(layout.modalities()),
                    self.bottleneck_tokens,
                )
            })
            .collect()
    }
}
