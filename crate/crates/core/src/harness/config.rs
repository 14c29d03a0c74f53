//! Experiment configuration and the `key = value` config-file format.
//!
//! Keys are the CLI flag names without the leading dashes. Every key has a
//! default, listed in [`KEYS`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use super::data::{generate_synthetic, load_csv_dataset, CsvSchema, SyntheticDatasetSpec};
use crate::cluster::{Arch, ClusterConfig, SamplingMode, ScheduleMode, TreeSpec, VirtualTiming};
use crate::error::{Error, Result};
use crate::model::{Activation, Dataset, ModelSpec};
use crate::protocol::{LearningRatePolicy, LrMode, SyncPolicy};

/// Every recognised key with a one-line description (shown by the CLI).
pub const KEYS: &[(&str, &str)] = &[
    ("protocol", "hardsync | softsync | async (default hardsync)"),
    ("n", "softsync splitting parameter, 1 <= n <= learners (default 1)"),
    ("learners", "number of learners, lambda (default 4)"),
    ("batch", "per-learner mini-batch size, mu (default 16)"),
    ("alpha0", "base learning rate (default 0.05)"),
    ("ref-batch", "reference batch B of the hardsync rescale rule (default 128)"),
    ("lr-mode", "rescale | modulated | unmodulated (default: rescale for hardsync, modulated otherwise)"),
    ("momentum", "server momentum in [0,1) (default 0)"),
    ("weight-decay", "L2 coefficient (default 0)"),
    ("epochs", "training epochs (default 10)"),
    ("max-updates", "stop after this many updates (default unlimited)"),
    ("seed", "run seed (default 1)"),
    ("seeds", "comma-separated seeds for multi-seed commands (default: seed)"),
    ("hidden", "comma-separated hidden-layer widths, empty for none (default 32)"),
    ("activation", "tanh | sigmoid | relu (default tanh)"),
    ("classes", "synthetic classes (default 10)"),
    ("dims", "synthetic feature dimensions (default 32)"),
    ("samples-per-class", "synthetic examples per class (default 600)"),
    ("separation", "synthetic class-centre spread (default 0.5)"),
    ("label-noise", "synthetic label-noise probability (default 0)"),
    ("test-fraction", "held-out fraction (default 1/6 synthetic, 0 for CSV)"),
    ("data-seed", "synthetic dataset seed (default 1)"),
    ("data-csv", "load a CSV dataset instead of generating one"),
    ("label-column", "CSV label column name (default label)"),
    ("mode", "virtual | threads (default virtual)"),
    ("arch", "base | adv | advstar (default base)"),
    ("learners-per-leaf", "learners under each leaf server (default 4)"),
    ("tree-fanout", "children per interior server (default 4)"),
    ("tree-depth", "minimum server levels below the root (default 1)"),
    ("broadcast-fanout", "learner broadcast-tree fanout for advstar (default 2)"),
    ("compute-per-sample", "virtual compute seconds per example (default 0.001)"),
    ("compute-jitter", "relative spread of virtual compute times (default 0.1)"),
    ("random-start", "stagger learner start times, true | false (default true)"),
    ("bandwidth", "virtual link bandwidth in bytes/s, inf for free transfers (default inf)"),
    ("link-latency", "virtual one-way link latency in seconds (default 0)"),
    ("link-jitter", "relative spread of link latency (default 0)"),
    ("sampling", "independent | round-robin (default independent)"),
    ("divergence-factor", "divergence threshold as a multiple of the initial loss (default 10)"),
    ("out", "output directory (default out)"),
    ("grid-learners", "sweep: comma-separated learner counts"),
    ("grid-batch", "sweep: comma-separated batch sizes"),
    ("grid-n", "sweep: comma-separated n values; 0 means hardsync, 'lambda' means n = learners"),
    ("products", "mu-lambda: comma-separated mu*lambda products (default 32,128,512)"),
    ("lambdas", "mu-lambda: candidate learner counts (default 4,8,16)"),
];

/// Parsed `key = value` pairs with the line each came from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues {
    pub entries: BTreeMap<String, (String, usize)>,
}

impl KeyValues {
    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    pub fn set(&mut self, key: &str, value: impl Into<String>) {
        self.entries.insert(key.to_string(), (value.into(), 0));
    }

    /// `other` wins on conflicts.
    pub fn merged_with(&self, other: &KeyValues) -> KeyValues {
        let mut out = self.clone();
        for (k, v) in &other.entries {
            out.entries.insert(k.clone(), v.clone());
        }
        out
    }

    pub fn check_known(&self) -> Result<()> {
        for (k, (_, line)) in &self.entries {
            if !KEYS.iter().any(|(name, _)| name == k) {
                let message = format!("unknown key '{k}'");
                return Err(if *line > 0 {
                    Error::Parse { line: *line, message }
                } else {
                    Error::Config(message)
                });
            }
        }
        Ok(())
    }

    fn parse<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some((v, line)) => v.parse::<T>().map(Some).map_err(|e| {
                let message = format!("invalid value '{v}' for {key}: {e}");
                if *line > 0 {
                    Error::Parse { line: *line, message }
                } else {
                    Error::Config(message)
                }
            }),
        }
    }

    fn list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: std::fmt::Display,
    {
        match self.get(key) {
            None => Ok(None),
            Some(v) => parse_list(v)
                .map(Some)
                .map_err(|e| Error::Config(format!("invalid list for {key}: {e}"))),
        }
    }
}

pub fn parse_list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, String>
where
    T::Err: std::fmt::Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<T>().map_err(|e| format!("'{s}': {e}")))
        .collect()
}

/// Parse the config-file format: `key = value` per line, `#` starts a
/// comment, blank lines are ignored.
pub fn parse_key_values(text: &str) -> Result<KeyValues> {
    let mut kv = KeyValues::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (k, v) = content.split_once('=').ok_or_else(|| Error::Parse {
            line,
            message: format!("expected 'key = value', found '{content}'"),
        })?;
        let k = k.trim();
        if k.is_empty() {
            return Err(Error::Parse {
                line,
                message: "empty key".into(),
            });
        }
        if kv.entries.insert(k.to_string(), (v.trim().to_string(), line)).is_some() {
            return Err(Error::Parse {
                line,
                message: format!("duplicate key '{k}'"),
            });
        }
    }
    Ok(kv)
}

pub fn read_config_file(path: &Path) -> Result<KeyValues> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_key_values(&text)
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticDatasetSpec),
    Csv { path: PathBuf, schema: CsvSchema },
}

/// One experiment: protocol, cluster shape, optimiser, data and runtime.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub policy: SyncPolicy,
    pub learners: usize,
    pub batch: usize,
    pub alpha0: f64,
    pub ref_batch: usize,
    pub lr_mode: LrMode,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: u64,
    pub max_updates: Option<u64>,
    pub seeds: Vec<u64>,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub data: DataSource,
    pub mode: ScheduleMode,
    pub arch: Arch,
    pub tree: TreeSpec,
    pub broadcast_fanout: usize,
    pub timing: VirtualTiming,
    pub sampling: SamplingMode,
    pub divergence_factor: f64,
    pub out: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            policy: SyncPolicy::Hardsync,
            learners: 4,
            batch: 16,
            alpha0: 0.05,
            ref_batch: 128,
            lr_mode: LrMode::HardsyncRescale,
            momentum: 0.0,
            weight_decay: 0.0,
            epochs: 10,
            max_updates: None,
            seeds: vec![1],
            hidden: vec![32],
            activation: Activation::Tanh,
            data: DataSource::Synthetic(SyntheticDatasetSpec::default()),
            mode: ScheduleMode::Virtual,
            arch: Arch::Base,
            tree: TreeSpec::default(),
            broadcast_fanout: 2,
            timing: VirtualTiming::default(),
            sampling: SamplingMode::Independent,
            divergence_factor: 10.0,
            out: PathBuf::from("out"),
        }
    }
}

/// The learning-rate mode used when none is given.
pub fn default_lr_mode(policy: SyncPolicy) -> LrMode {
    match policy {
        SyncPolicy::Hardsync => LrMode::HardsyncRescale,
        _ => LrMode::StalenessModulated,
    }
}

impl ExperimentConfig {
    /// Build a config from defaults overridden by `kv`. Returns notes about
    /// defaults that were filled in on the user's behalf.
    pub fn from_key_values(kv: &KeyValues) -> Result<(Self, Vec<String>)> {
        kv.check_known()?;
        let mut notes = Vec::new();
        let mut c = ExperimentConfig::default();
        if let Some(v) = kv.parse::<usize>("learners")? {
            c.learners = v;
        }
        let n = kv.parse::<usize>("n")?;
        let protocol = kv.get("protocol").unwrap_or("hardsync").trim().to_ascii_lowercase();
        c.policy = match protocol.as_str() {
            "hardsync" => {
                if n.is_some() {
                    return Err(Error::Config("--n applies only to --protocol softsync".into()));
                }
                SyncPolicy::Hardsync
            }
            "softsync" => match n {
                Some(n) => SyncPolicy::Softsync(n),
                None => {
                    notes.push("--protocol softsync without --n: using n = 1".to_string());
                    SyncPolicy::Softsync(1)
                }
            },
            "async" => {
                if n.is_some() {
                    return Err(Error::Config("--n applies only to --protocol softsync".into()));
                }
                SyncPolicy::Async
            }
            other => return Err(Error::Config(format!("unknown protocol '{other}' (hardsync|softsync|async)"))),
        };
        if let Some(v) = kv.parse("batch")? {
            c.batch = v;
        }
        if let Some(v) = kv.parse("alpha0")? {
            c.alpha0 = v;
        }
        if let Some(v) = kv.parse("ref-batch")? {
            c.ref_batch = v;
        }
        c.lr_mode = match kv.parse::<LrMode>("lr-mode")? {
            Some(m) => m,
            None => default_lr_mode(c.policy),
        };
        if let Some(v) = kv.parse("momentum")? {
            c.momentum = v;
        }
        if let Some(v) = kv.parse("weight-decay")? {
            c.weight_decay = v;
        }
        if let Some(v) = kv.parse("epochs")? {
            c.epochs = v;
        }
        c.max_updates = kv.parse("max-updates")?;
        if let Some(v) = kv.parse::<u64>("seed")? {
            c.seeds = vec![v];
        }
        if let Some(v) = kv.list::<u64>("seeds")? {
            c.seeds = v;
        }
        if let Some(v) = kv.list::<usize>("hidden")? {
            c.hidden = v;
        }
        if let Some(v) = kv.parse("activation")? {
            c.activation = v;
        }
        let csv_path = kv.get("data-csv").map(PathBuf::from);
        c.data = match csv_path {
            Some(path) => {
                let mut schema = CsvSchema::default();
                if let Some(v) = kv.get("label-column") {
                    schema.label_column = v.to_string();
                }
                if let Some(v) = kv.parse("test-fraction")? {
                    schema.test_fraction = v;
                }
                schema.classes = kv.parse("classes")?;
                DataSource::Csv { path, schema }
            }
            None => {
                let mut s = SyntheticDatasetSpec::default();
                if let Some(v) = kv.parse("classes")? {
                    s.classes = v;
                }
                if let Some(v) = kv.parse("dims")? {
                    s.dims = v;
                }
                if let Some(v) = kv.parse("samples-per-class")? {
                    s.samples_per_class = v;
                }
                if let Some(v) = kv.parse("separation")? {
                    s.separation = v;
                }
                if let Some(v) = kv.parse("label-noise")? {
                    s.label_noise = v;
                }
                if let Some(v) = kv.parse("test-fraction")? {
                    s.test_fraction = v;
                }
                if let Some(v) = kv.parse("data-seed")? {
                    s.seed = v;
                }
                DataSource::Synthetic(s)
            }
        };
        if let Some(v) = kv.parse("mode")? {
            c.mode = v;
        }
        if let Some(v) = kv.parse("arch")? {
            c.arch = v;
        }
        if let Some(v) = kv.parse("learners-per-leaf")? {
            c.tree.learners_per_leaf = v;
        }
        if let Some(v) = kv.parse("tree-fanout")? {
            c.tree.fanout = v;
        }
        if let Some(v) = kv.parse("tree-depth")? {
            c.tree.min_depth = v;
        }
        if let Some(v) = kv.parse("broadcast-fanout")? {
            c.broadcast_fanout = v;
        }
        if let Some(v) = kv.parse("compute-per-sample")? {
            c.timing.compute_per_sample = v;
        }
        if let Some(v) = kv.parse("compute-jitter")? {
            c.timing.compute_jitter = v;
        }
        if let Some(v) = kv.parse("random-start")? {
            c.timing.random_start = v;
        }
        if let Some(v) = kv.parse("bandwidth")? {
            c.timing.bandwidth = v;
        }
        if let Some(v) = kv.parse("link-latency")? {
            c.timing.link_latency = v;
        }
        if let Some(v) = kv.parse("link-jitter")? {
            c.timing.link_jitter = v;
        }
        if let Some(v) = kv.parse("sampling")? {
            c.sampling = v;
        }
        if let Some(v) = kv.parse("divergence-factor")? {
            c.divergence_factor = v;
        }
        if let Some(v) = kv.get("out") {
            c.out = PathBuf::from(v);
        }
        c.validate()?;
        Ok((c, notes))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if let DataSource::Synthetic(s) = &self.data {
            s.validate()?;
        }
        let probe = self.cluster_config_for(self.seeds[0], self.input_dims_hint(), self.classes_hint())?;
        probe.validate()
    }

    fn input_dims_hint(&self) -> usize {
        match &self.data {
            DataSource::Synthetic(s) => s.dims,
            DataSource::Csv { .. } => 1,
        }
    }

    fn classes_hint(&self) -> usize {
        match &self.data {
            DataSource::Synthetic(s) => s.classes,
            DataSource::Csv { schema, .. } => schema.classes.unwrap_or(2),
        }
    }

    pub fn model_spec(&self, input: usize, classes: usize) -> Result<ModelSpec> {
        let mut sizes = vec![input];
        sizes.extend_from_slice(&self.hidden);
        sizes.push(classes);
        ModelSpec::uniform(sizes, self.activation)
    }

    fn cluster_config_for(&self, seed: u64, input: usize, classes: usize) -> Result<ClusterConfig> {
        let lr = LearningRatePolicy::new(self.alpha0, self.ref_batch, self.lr_mode)?;
        let mut cc = ClusterConfig::new(self.model_spec(input, classes)?, self.policy, self.learners, self.batch, lr);
        cc.momentum = self.momentum;
        cc.weight_decay = self.weight_decay;
        cc.epochs = self.epochs;
        cc.max_updates = self.max_updates;
        cc.seed = seed;
        cc.arch = self.arch;
        cc.tree = self.tree;
        cc.broadcast_fanout = self.broadcast_fanout;
        cc.mode = self.mode;
        cc.timing = self.timing.clone();
        cc.sampling = self.sampling;
        cc.divergence_factor = self.divergence_factor;
        Ok(cc)
    }

    /// Cluster configuration for one seed, sized to `train`.
    pub fn cluster_config(&self, seed: u64, train: &Dataset) -> Result<ClusterConfig> {
        let cc = self.cluster_config_for(seed, train.dims(), train.classes)?;
        cc.validate()?;
        Ok(cc)
    }

    /// Load or generate the `(train, test)` datasets.
    pub fn datasets(&self) -> Result<(Arc<Dataset>, Arc<Dataset>)> {
        let (train, test) = match &self.data {
            DataSource::Synthetic(s) => generate_synthetic(s)?,
            DataSource::Csv { path, schema } => load_csv_dataset(path, schema)?,
        };
        Ok((Arc::new(train), Arc::new(test)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kv(text: &str) -> KeyValues {
        parse_key_values(text).unwrap()
    }

    #[test]
    fn file_format() {
        let k = kv("# comment\nlearners = 8\n\nbatch=4 # trailing\n");
        assert_eq!(k.get("learners"), Some("8"));
        assert_eq!(k.get("batch"), Some("4"));
        assert!(matches!(parse_key_values("a = 1\nnonsense\n"), Err(Error::Parse { line: 2, .. })));
        assert!(matches!(parse_key_values("a = 1\na = 2\n"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn later_source_wins() {
        let file = kv("learners = 8\nbatch = 4\n");
        let mut flags = KeyValues::default();
        flags.set("learners", "2");
        let m = file.merged_with(&flags);
        let (c, _) = ExperimentConfig::from_key_values(&m).unwrap();
        assert_eq!((c.learners, c.batch), (2, 4));
    }

    #[test]
    fn softsync_defaults_and_bounds() {
        let (c, notes) = ExperimentConfig::from_key_values(&kv("protocol = softsync\n")).unwrap();
        assert_eq!(c.policy, SyncPolicy::Softsync(1));
        assert_eq!(c.lr_mode, LrMode::StalenessModulated);
        assert_eq!(notes.len(), 1);
        let err = ExperimentConfig::from_key_values(&kv("protocol = softsync\nn = 31\nlearners = 30\n")).unwrap_err();
        assert!(err.to_string().contains("1 <= n <= lambda"), "{err}");
        assert!(ExperimentConfig::from_key_values(&kv("protocol = hardsync\nn = 2\n")).is_err());
        assert!(ExperimentConfig::from_key_values(&kv("bogus = 1\n")).is_err());
        assert!(ExperimentConfig::from_key_values(&kv("learners = -1\n")).is_err());
    }

    #[test]
    fn every_key_is_accepted() {
        let mut k = KeyValues::default();
        k.set("hidden", "");
        k.set("seeds", "3,4");
        k.set("sampling", "round-robin");
        k.set("random-start", "false");
        k.set("bandwidth", "inf");
        let (c, _) = ExperimentConfig::from_key_values(&k).unwrap();
        assert!(c.hidden.is_empty());
        assert_eq!(c.seeds, vec![3, 4]);
        assert!(!c.timing.random_start);
        assert!(c.timing.bandwidth.is_infinite());
    }
}
