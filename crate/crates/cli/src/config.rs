//! `key = value` run configuration with `#` comments and dotted keys.

use std::collections::BTreeMap;
use std::path::Path;

use iman_core::clusterer::ClusterConfig;
use iman_core::dataio::SyntheticSpec;
use iman_core::losses::LossWeights;
use iman_core::pipeline::{SourceLoss, TrainConfig};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Every key a config file may set.
pub const KNOWN_KEYS: &[&str] = &[
    "seed",
    "data.classes",
    "data.per_class",
    "data.dim",
    "data.spread",
    "data.angular_jitter",
    "data.radial_jitter",
    "data.noise",
    "data.rotation_deg",
    "data.translation",
    "model.layers",
    "loss.source",
    "loss.alpha",
    "loss.beta",
    "loss.gamma",
    "loss.scale",
    "loss.margin",
    "cluster.lambda",
    "cluster.min_size",
    "adapt.layers",
    "adapt.bandwidth_scales",
    "train.batch_size",
    "train.momentum",
    "train.weight_decay",
    "train.lr_pretrain",
    "train.lr_preadapt",
    "train.lr_miadapt",
    "train.epochs_pretrain",
    "train.epochs_preadapt",
    "train.epochs_miadapt",
    "train.max_iterations",
    "train.convergence_tol",
    "eval.far",
    "eval.k_pos",
    "eval.k_neg",
];

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub data: SyntheticSpec,
    pub far: Vec<f64>,
    pub k_pos: usize,
    pub k_neg: usize,
    pub seed: u64,
    pub hash: String,
}

/// Parsed `key → value` entries, keyed in sorted order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Entries(BTreeMap<String, String>);

impl Entries {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut map = BTreeMap::new();
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::usage(format!("config line {}: expected `key = value`", no + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !KNOWN_KEYS.contains(&key) {
                return Err(CliError::usage(format!(
                    "config line {}: unknown key `{key}`",
                    no + 1
                )));
            }
            if map.insert(key.to_string(), value.to_string()).is_some() {
                return Err(CliError::usage(format!(
                    "config line {}: duplicate key `{key}`",
                    no + 1
                )));
            }
        }
        Ok(Self(map))
    }

    /// SHA-256 over the sorted `key=value` lines; comments, blank lines,
    /// spacing and key order do not affect it.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.0 {
            h.update(k.as_bytes());
            h.update(b"=");
            h.update(v.as_bytes());
            h.update(b"\n");
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.0
            .get(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|e| CliError::usage(format!("config key `{key}`: {v:?}: {e}")))
            })
            .transpose()
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, CliError>
    where
        T::Err: std::fmt::Display,
    {
        self.0
            .get(key)
            .map(|v| parse_list(v).map_err(|e| CliError::usage(format!("config key `{key}`: {e}"))))
            .transpose()
    }
}

pub fn parse_list<T: std::str::FromStr>(text: &str) -> Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    text.split(',')
        .map(|t| t.trim().parse::<T>().map_err(|e| format!("{t:?}: {e}")))
        .collect()
}

pub const DEFAULT_FAR: [f64; 3] = [0.001, 0.01, 0.1];
pub const DEFAULT_K: usize = 3000;

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| CliError::io(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_str(&text)
    }

    pub fn from_str(text: &str) -> Result<Self, CliError> {
        let e = Entries::parse(text)?;
        let mut seed: u64 = e.get("seed")?.unwrap_or(0);
        if let Ok(v) = std::env::var("IMAN_SEED") {
            seed = v
                .trim()
                .parse()
                .map_err(|err| CliError::usage(format!("IMAN_SEED={v:?}: {err}")))?;
        }

        let mut data = SyntheticSpec {
            seed,
            ..SyntheticSpec::default()
        };
        macro_rules! set {
            ($target:expr, $key:expr) => {
                if let Some(v) = e.get($key)? {
                    $target = v;
                }
            };
        }
        set!(data.classes, "data.classes");
        set!(data.per_class, "data.per_class");
        set!(data.dim, "data.dim");
        set!(data.spread, "data.spread");
        set!(data.angular_jitter, "data.angular_jitter");
        set!(data.radial_jitter, "data.radial_jitter");
        set!(data.noise, "data.noise");
        set!(data.rotation_deg, "data.rotation_deg");
        match e.list("data.translation")? {
            Some(t) => data.translation = t,
            None if data.dim != 2 => {
                let mut t = vec![0.0; data.dim];
                for (dst, src) in t.iter_mut().zip(&SyntheticSpec::default().translation) {
                    *dst = *src;
                }
                data.translation = t;
            }
            None => {}
        }

        let mut train = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        if let Some(dims) = e.list("model.layers")? {
            train.layer_dims = dims;
        } else if data.dim != train.layer_dims[0] {
            train.layer_dims[0] = data.dim;
        }
        let source: Option<String> = e.get("loss.source")?;
        match source.as_deref() {
            None | Some("softmax") => {}
            Some("angular") => {
                train.source_loss = SourceLoss::Angular {
                    scale: iman_core::losses::DEFAULT_ARC_SCALE,
                    margin: iman_core::losses::DEFAULT_ARC_MARGIN,
                };
                train.weights = LossWeights::angular();
            }
            Some(other) => {
                return Err(CliError::usage(format!(
                    "config key `loss.source`: expected softmax or angular, found {other:?}"
                )))
            }
        }
        if let SourceLoss::Angular { scale, margin } = &mut train.source_loss {
            set!(*scale, "loss.scale");
            set!(*margin, "loss.margin");
        } else if e.0.contains_key("loss.scale") || e.0.contains_key("loss.margin") {
            return Err(CliError::usage(
                "loss.scale and loss.margin need loss.source = angular".to_string(),
            ));
        }
        set!(train.weights.alpha, "loss.alpha");
        set!(train.weights.beta, "loss.beta");
        set!(train.weights.gamma, "loss.gamma");
        let mut lambda = train.cluster.lambda;
        let mut min_size = train.cluster.min_size;
        set!(lambda, "cluster.lambda");
        set!(min_size, "cluster.min_size");
        train.cluster =
            ClusterConfig::new(lambda, min_size).map_err(|err| CliError::usage(err.to_string()))?;
        if let Some(l) = e.list("adapt.layers")? {
            train.adapt_layers = Some(l);
        }
        if let Some(s) = e.list("adapt.bandwidth_scales")? {
            train.bandwidth_scales = s;
        }
        set!(train.batch_size, "train.batch_size");
        set!(train.momentum, "train.momentum");
        set!(train.weight_decay, "train.weight_decay");
        set!(train.lr_pretrain, "train.lr_pretrain");
        set!(train.lr_preadapt, "train.lr_preadapt");
        set!(train.lr_miadapt, "train.lr_miadapt");
        set!(train.epochs_pretrain, "train.epochs_pretrain");
        set!(train.epochs_preadapt, "train.epochs_preadapt");
        set!(train.epochs_miadapt, "train.epochs_miadapt");
        set!(train.max_iterations, "train.max_iterations");
        set!(train.convergence_tol, "train.convergence_tol");
        train
            .validate()
            .map_err(|err| CliError::usage(format!("config: {err}")))?;
        data.validate()
            .map_err(|err| CliError::usage(format!("config: {err}")))?;

        Ok(Self {
            train,
            data,
            far: e.list("eval.far")?.unwrap_or_else(|| DEFAULT_FAR.to_vec()),
            k_pos: e.get("eval.k_pos")?.unwrap_or(DEFAULT_K),
            k_neg: e.get("eval.k_neg")?.unwrap_or(DEFAULT_K),
            seed,
            hash: e.hash(),
        })
    }
}
