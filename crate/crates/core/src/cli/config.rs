//! Run configuration: a flat TOML table, overridden by `SMPQ_*` environment
//! variables, overridden by command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::SyntheticKind;
use crate::error::{Error, Result};
use crate::nn::OptimizerKind;
use crate::quant::BitWidth;
use crate::search::{AlphaObjective, Budget, SearchConfig, SearchMethod};
use crate::supernet::{EdgeId, EdgeKind, SearchSpace};

pub const ENV_PREFIX: &str = "SMPQ_";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetSource {
    Synthetic,
    Idx,
}

/// Starting weights for the policies ranked in the correlation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CorrelationEval {
    /// Each method's searched supernet weights.
    Inherited,
    /// The shared pre-search initialization, so both methods' policies are
    /// scored against the same accuracies.
    Scratch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSource,
    pub synthetic: SyntheticKind,
    pub samples: usize,
    pub classes: usize,
    pub noise: f64,
    pub idx_images: Option<PathBuf>,
    pub idx_labels: Option<PathBuf>,
    /// Keep only the first `idx_limit` IDX samples.
    pub idx_limit: Option<usize>,
    pub val_fraction: f64,

    pub hidden: Vec<usize>,
    pub conv_channels: Vec<usize>,
    pub kernel: usize,

    pub search_space: String,
    pub weight_bits: Option<Vec<u32>>,
    pub act_bits: Option<Vec<u32>>,
    /// `layer:kind:bit`, e.g. `1:weight:3`.
    pub plant_noise: Option<String>,

    pub preset: String,
    pub method: SearchMethod,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub rounds_per_epoch: usize,
    pub permutations: usize,
    pub truncation: f64,
    pub xi: f64,
    pub beta: f64,
    pub lambda: f64,
    pub epsilon: f64,
    pub convergence_scale: f64,
    pub budget_ratio: Option<f64>,
    pub budget_bops: Option<f64>,
    pub mu: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub alpha_learning_rate: f64,
    pub alpha_objective: AlphaObjective,
    pub calibration_samples: usize,
    pub threads: usize,
    pub seed: u64,

    pub finetune_epochs: usize,
    pub finetune_learning_rate: Option<f64>,
    /// Write a supernet checkpoint every N epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,

    pub correlation_k: usize,
    pub correlation_seeds: Vec<u64>,
    pub probe_epochs: usize,
    pub correlation_eval: CorrelationEval,
    /// `layer:kind`.
    pub pitfall_edge: String,
    /// Two `layer:kind:bit` edits.
    pub interaction_edits: Option<Vec<String>>,

    #[serde(skip_serializing)]
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let s = SearchConfig::default();
        Self {
            dataset: DatasetSource::Synthetic,
            synthetic: SyntheticKind::Gaussians,
            samples: 600,
            classes: 3,
            noise: 0.3,
            idx_images: None,
            idx_labels: None,
            idx_limit: None,
            val_fraction: 0.25,
            hidden: vec![16],
            conv_channels: Vec::new(),
            kernel: 3,
            search_space: "s2".into(),
            weight_bits: None,
            act_bits: None,
            plant_noise: None,
            preset: "default".into(),
            method: s.method,
            epochs: s.epochs,
            warmup_epochs: s.warmup_epochs,
            rounds_per_epoch: s.rounds_per_epoch,
            permutations: s.permutations,
            truncation: s.truncation,
            xi: s.xi,
            beta: s.beta,
            lambda: s.lambda,
            epsilon: s.epsilon,
            convergence_scale: s.convergence_scale,
            budget_ratio: None,
            budget_bops: None,
            mu: s.mu,
            learning_rate: s.learning_rate,
            batch_size: s.batch_size,
            optimizer: s.optimizer,
            alpha_learning_rate: s.alpha_learning_rate,
            alpha_objective: s.alpha_objective,
            calibration_samples: s.calibration_samples,
            threads: s.threads,
            seed: s.seed,
            finetune_epochs: 10,
            finetune_learning_rate: None,
            checkpoint_every: 0,
            correlation_k: 10,
            correlation_seeds: vec![0, 1, 2, 3, 4],
            probe_epochs: 10,
            correlation_eval: CorrelationEval::Inherited,
            pitfall_edge: "0:weight".into(),
            interaction_edits: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

/// Values given on the command line; `None` leaves the lower layers alone.
#[derive(Debug, Clone, Default)]
pub struct CliOverrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub threads: Option<usize>,
    pub method: Option<SearchMethod>,
}

fn parse_env_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Resolves defaults < file < environment < flags and validates the result.
pub fn load_config<I>(path: Option<&Path>, env: I, cli: &CliOverrides) -> Result<RunConfig>
where
    I: IntoIterator<Item = (String, String)>,
{
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
            text.parse::<toml::Table>()
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    let mut env: Vec<(String, String)> = env
        .into_iter()
        .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|k| (k.to_ascii_lowercase(), v)))
        .collect();
    env.sort();
    for (k, v) in env {
        table.insert(k, parse_env_value(&v));
    }
    if let Some(s) = cli.seed {
        table.insert("seed".into(), toml::Value::Integer(s as i64));
    }
    if let Some(o) = &cli.out_dir {
        table.insert("out_dir".into(), toml::Value::String(o.display().to_string()));
    }
    if let Some(t) = cli.threads {
        table.insert("threads".into(), toml::Value::Integer(t as i64));
    }
    if let Some(m) = cli.method {
        let m = match m {
            SearchMethod::Smpq => "smpq",
            SearchMethod::Dmpq => "dmpq",
        };
        table.insert("method".into(), toml::Value::String(m.into()));
    }
    if let Some(toml::Value::String(name)) = table.get("preset") {
        let p = SearchConfig::preset(name)?;
        for (k, v) in [("beta", p.beta), ("lambda", p.lambda), ("xi", p.xi)] {
            table.entry(k).or_insert(toml::Value::Float(v));
        }
    }
    let cfg: RunConfig = table
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Parses `layer:kind`.
pub fn parse_edge(s: &str) -> Result<EdgeId> {
    let mut parts = s.split(':');
    let (Some(l), Some(k), None) = (parts.next(), parts.next(), parts.next()) else {
        return Err(Error::Config(format!("edge {s:?} is not of the form layer:kind")));
    };
    let layer = l
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad layer index in {s:?}")))?;
    let kind = match k.trim() {
        "weight" | "w" => EdgeKind::Weight,
        "activation" | "act" | "a" => EdgeKind::Activation,
        other => return Err(Error::Config(format!("bad edge kind {other:?} in {s:?}"))),
    };
    Ok(EdgeId { layer, kind })
}

/// Parses `layer:kind:bit`.
pub fn parse_edge_bit(s: &str) -> Result<(EdgeId, BitWidth)> {
    let (edge, bit) = s
        .rsplit_once(':')
        .ok_or_else(|| Error::Config(format!("{s:?} is not of the form layer:kind:bit")))?;
    let bit: u32 = bit
        .trim()
        .parse()
        .map_err(|_| Error::Config(format!("bad bit-width in {s:?}")))?;
    Ok((parse_edge(edge)?, BitWidth::new(bit).map_err(|e| Error::Config(e.to_string()))?))
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.budget_ratio.is_some() && self.budget_bops.is_some() {
            return bad("set at most one of budget_ratio and budget_bops".into());
        }
        if self.dataset == DatasetSource::Idx && (self.idx_images.is_none() || self.idx_labels.is_none()) {
            return bad("dataset = \"idx\" needs idx_images and idx_labels".into());
        }
        if self.samples == 0 || self.classes < 2 {
            return bad("samples must be positive and classes at least 2".into());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction must lie in (0, 1), got {}", self.val_fraction));
        }
        if self.hidden.contains(&0) || self.conv_channels.contains(&0) {
            return bad("layer widths must be positive".into());
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return bad(format!("kernel must be odd, got {}", self.kernel));
        }
        if self.correlation_k < 5 || self.correlation_seeds.is_empty() {
            return bad("correlation_k must be at least 5 and correlation_seeds non-empty".into());
        }
        if self.finetune_learning_rate.is_some_and(|lr| !(lr >= 0.0 && lr.is_finite())) {
            return bad("finetune_learning_rate must be non-negative".into());
        }
        self.space()?;
        if let Some(p) = &self.plant_noise {
            parse_edge_bit(p)?;
        }
        parse_edge(&self.pitfall_edge)?;
        if let Some(e) = &self.interaction_edits {
            if e.len() != 2 {
                return bad(format!("interaction_edits needs exactly two entries, got {}", e.len()));
            }
            for s in e {
                parse_edge_bit(s)?;
            }
        }
        self.search_config().validate()
    }

    pub fn space(&self) -> Result<SearchSpace> {
        let base = SearchSpace::preset(&self.search_space).map_err(|e| Error::Config(e.to_string()))?;
        let bits = |v: &Option<Vec<u32>>, fallback: &Vec<BitWidth>| -> Result<Vec<BitWidth>> {
            match v {
                Some(v) => v
                    .iter()
                    .map(|&b| BitWidth::new(b).map_err(|e| Error::Config(e.to_string())))
                    .collect(),
                None => Ok(fallback.clone()),
            }
        };
        let w = bits(&self.weight_bits, &base.weight_bits)?;
        let a = bits(&self.act_bits, &base.act_bits)?;
        let name = if self.weight_bits.is_some() || self.act_bits.is_some() {
            "custom".to_string()
        } else {
            base.name.clone()
        };
        SearchSpace::new(name, w, a).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn budget(&self) -> Budget {
        match (self.budget_ratio, self.budget_bops) {
            (_, Some(b)) => Budget::Bops(b),
            (Some(r), None) => Budget::Ratio(r),
            (None, None) => SearchConfig::default().budget,
        }
    }

    pub fn search_config(&self) -> SearchConfig {
        SearchConfig {
            method: self.method,
            epochs: self.epochs,
            warmup_epochs: self.warmup_epochs,
            rounds_per_epoch: self.rounds_per_epoch,
            permutations: self.permutations,
            truncation: self.truncation,
            xi: self.xi,
            beta: self.beta,
            lambda: self.lambda,
            epsilon: self.epsilon,
            convergence_scale: self.convergence_scale,
            budget: self.budget(),
            mu: self.mu,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            optimizer: self.optimizer,
            alpha_learning_rate: self.alpha_learning_rate,
            alpha_objective: self.alpha_objective,
            calibration_samples: self.calibration_samples,
            threads: self.threads,
            seed: self.seed,
        }
    }

    /// Resolved configuration as JSON, for provenance. Thread count is left
    /// out because results do not depend on it.
    pub fn to_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("threads");
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(text: &str) -> tempfile::NamedTempFile {
        let f = tempfile::NamedTempFile::new().unwrap();
        std::fs::write(f.path(), text).unwrap();
        f
    }

    fn none() -> Vec<(String, String)> {
        Vec::new()
    }

    #[test]
    fn defaults_validate() {
        let c = load_config(None, none(), &CliOverrides::default()).unwrap();
        assert_eq!(c, RunConfig::default());
        assert_eq!(c.search_config(), SearchConfig::default());
    }

    #[test]
    fn unknown_key_is_named() {
        let f = write("epochs = 2\nbogus_key = 1\n");
        let e = load_config(Some(f.path()), none(), &CliOverrides::default()).unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        assert!(e.to_string().contains("bogus_key"), "{e}");
    }

    #[test]
    fn precedence_flag_env_file() {
        let f = write("seed = 1\nepochs = 4\nthreads = 2\n");
        let env = vec![
            ("SMPQ_SEED".to_string(), "2".to_string()),
            ("SMPQ_EPOCHS".to_string(), "5".to_string()),
            ("OTHER".to_string(), "x".to_string()),
        ];
        let cli = CliOverrides { seed: Some(3), ..Default::default() };
        let c = load_config(Some(f.path()), env, &cli).unwrap();
        assert_eq!((c.seed, c.epochs, c.threads), (3, 5, 2));
    }

    #[test]
    fn env_strings_and_lists() {
        let env = vec![
            ("SMPQ_SYNTHETIC".to_string(), "moons".to_string()),
            ("SMPQ_HIDDEN".to_string(), "[8, 8]".to_string()),
        ];
        let c = load_config(None, env, &CliOverrides::default()).unwrap();
        assert_eq!(c.synthetic, SyntheticKind::Moons);
        assert_eq!(c.hidden, vec![8, 8]);
    }

    #[test]
    fn preset_fills_but_does_not_override() {
        let f = write("preset = \"ablation-optimal\"\n");
        let c = load_config(Some(f.path()), none(), &CliOverrides::default()).unwrap();
        assert_eq!((c.beta, c.lambda, c.xi), (0.75, 0.25, 0.05));
        let f = write("preset = \"ablation-optimal\"\nxi = 0.2\n");
        let c = load_config(Some(f.path()), none(), &CliOverrides::default()).unwrap();
        assert_eq!(c.xi, 0.2);
    }

    #[test]
    fn invalid_values_rejected() {
        for text in [
            "beta = 0.5\n",
            "budget_ratio = 4.0\nbudget_bops = 10.0\n",
            "dataset = \"idx\"\n",
            "search_space = \"s9\"\n",
            "weight_bits = [4, 2]\n",
            "plant_noise = \"0:weigh:3\"\n",
            "val_fraction = 1.0\n",
        ] {
            let f = write(text);
            assert!(load_config(Some(f.path()), none(), &CliOverrides::default()).is_err(), "{text}");
        }
    }

    #[test]
    fn explicit_bits_override_preset() {
        let f = write("search_space = \"s3\"\nweight_bits = [2, 4]\n");
        let c = load_config(Some(f.path()), none(), &CliOverrides::default()).unwrap();
        let s = c.space().unwrap();
        assert_eq!(s.weight_bits.len(), 2);
        assert_eq!(s.act_bits.len(), 7);
    }

    #[test]
    fn edge_parsing() {
        assert_eq!(parse_edge("1:act").unwrap(), EdgeId { layer: 1, kind: EdgeKind::Activation });
        let (e, b) = parse_edge_bit("0:weight:3").unwrap();
        assert_eq!((e.layer, e.kind, b.bits()), (0, EdgeKind::Weight, 3));
        assert!(parse_edge("x:weight").is_err());
        assert!(parse_edge_bit("0:weight:33").is_err());
    }

    #[test]
    fn provenance_omits_output_location() {
        let j = RunConfig::default().to_json();
        assert!(j.get("out_dir").is_none());
        assert!(j.get("threads").is_none());
        assert_eq!(j["seed"], 0);
    }
}
