use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::protocol::{LearningRatePolicy, SyncPolicy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Arch {
    /// One parameter server; every learner talks to it directly.
    Base,
    /// A tree of parameter servers that aggregate gradients on the way up.
    Adv,
    /// The `Adv` tree plus learner-side weight broadcast, double-buffered
    /// weights and non-blocking ordered pushes.
    AdvStar,
}

impl std::str::FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "base" => Ok(Arch::Base),
            "adv" => Ok(Arch::Adv),
            "advstar" | "adv*" => Ok(Arch::AdvStar),
            other => Err(Error::Config(format!("unknown architecture '{other}' (base|adv|advstar)"))),
        }
    }
}

impl std::fmt::Display for Arch {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Arch::Base => "base",
            Arch::Adv => "adv",
            Arch::AdvStar => "advstar",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ScheduleMode {
    /// One OS thread per node, wall-clock timing.
    Threads,
    /// Deterministic discrete-event simulation.
    Virtual,
}

impl std::str::FromStr for ScheduleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "threads" => Ok(ScheduleMode::Threads),
            "virtual" => Ok(ScheduleMode::Virtual),
            other => Err(Error::Config(format!("unknown mode '{other}' (threads|virtual)"))),
        }
    }
}

impl std::fmt::Display for ScheduleMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ScheduleMode::Threads => "threads",
            ScheduleMode::Virtual => "virtual",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SamplingMode {
    /// Each learner samples with replacement from its own RNG stream.
    Independent,
    /// One global with-replacement index stream cut into chunks of `mu`;
    /// learner `l` takes chunk `b*lambda + l` for its batch `b`.
    RoundRobin,
}

impl std::str::FromStr for SamplingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "independent" => Ok(SamplingMode::Independent),
            "round-robin" | "roundrobin" => Ok(SamplingMode::RoundRobin),
            other => Err(Error::Config(format!("unknown sampling mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for SamplingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SamplingMode::Independent => "independent",
            SamplingMode::RoundRobin => "round-robin",
        })
    }
}

/// Shape of the parameter-server tree used by `Adv` and `AdvStar`.
///
/// Learners are split into contiguous groups of `learners_per_leaf` under
/// leaf servers; levels of internal servers with at most `fanout` children
/// are added until the root has at most `fanout` children and there are at
/// least `min_depth` server levels below the root.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TreeSpec {
    pub learners_per_leaf: usize,
    pub fanout: usize,
    pub min_depth: usize,
}

impl Default for TreeSpec {
    fn default() -> Self {
        Self {
            learners_per_leaf: 4,
            fanout: 4,
            min_depth: 1,
        }
    }
}

/// Cost model for virtual-time runs. Times are in virtual seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct VirtualTiming {
    /// Compute time per training example.
    pub compute_per_sample: f64,
    /// Each batch's compute time is scaled by a factor drawn uniformly from
    /// `[1 - jitter, 1 + jitter]`.
    pub compute_jitter: f64,
    /// Per-learner slowdown factors; empty means all 1.
    pub learner_speeds: Vec<f64>,
    /// Start each learner at a uniform offset within one compute period.
    pub random_start: bool,
    /// Link bandwidth in bytes per virtual second; infinity makes transfers
    /// free.
    pub bandwidth: f64,
    /// Mean one-way link latency.
    pub link_latency: f64,
    /// Link latency is scaled by a factor uniform in `[1 - j, 1 + j]`.
    pub link_jitter: f64,
}

impl Default for VirtualTiming {
    fn default() -> Self {
        Self {
            compute_per_sample: 1e-3,
            compute_jitter: 0.1,
            learner_speeds: Vec::new(),
            random_start: true,
            bandwidth: f64::INFINITY,
            link_latency: 0.0,
            link_jitter: 0.0,
        }
    }
}

impl VirtualTiming {
    pub fn speed(&self, learner: usize) -> f64 {
        self.learner_speeds.get(learner).copied().unwrap_or(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("virtual timing: {what}")));
        if !(self.compute_per_sample > 0.0 && self.compute_per_sample.is_finite()) {
            return bad("compute_per_sample must be > 0");
        }
        if !(0.0..1.0).contains(&self.compute_jitter) || !(0.0..1.0).contains(&self.link_jitter) {
            return bad("jitter must be in [0, 1)");
        }
        if self.learner_speeds.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return bad("learner speeds must be > 0");
        }
        if !(self.bandwidth > 0.0) {
            return bad("bandwidth must be > 0");
        }
        if !(self.link_latency >= 0.0 && self.link_latency.is_finite()) {
            return bad("link latency must be >= 0");
        }
        Ok(())
    }
}

/// Everything a single training run needs.
#[derive(Debug, Clone)]
pub struct ClusterConfig {
    pub model: ModelSpec,
    pub policy: SyncPolicy,
    pub learners: usize,
    pub batch: usize,
    pub lr: LearningRatePolicy,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: u64,
    /// Stop after this many updates even if epochs remain.
    pub max_updates: Option<u64>,
    pub seed: u64,
    pub arch: Arch,
    pub tree: TreeSpec,
    /// Fanout of the learner broadcast tree (`AdvStar` only).
    pub broadcast_fanout: usize,
    pub mode: ScheduleMode,
    pub timing: VirtualTiming,
    pub sampling: SamplingMode,
    /// An epoch whose mean training loss exceeds this multiple of the
    /// initial loss marks the run diverged.
    pub divergence_factor: f64,
    pub stop_on_divergence: bool,
}

impl ClusterConfig {
    pub fn new(model: ModelSpec, policy: SyncPolicy, learners: usize, batch: usize, lr: LearningRatePolicy) -> Self {
        Self {
            model,
            policy,
            learners,
            batch,
            lr,
            momentum: 0.0,
            weight_decay: 0.0,
            epochs: 1,
            max_updates: None,
            seed: 0,
            arch: Arch::Base,
            tree: TreeSpec::default(),
            broadcast_fanout: 2,
            mode: ScheduleMode::Virtual,
            timing: VirtualTiming::default(),
            sampling: SamplingMode::Independent,
            divergence_factor: 10.0,
            stop_on_divergence: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.policy.validate(self.learners)?;
        self.lr.validate()?;
        if self.batch == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0,1) (got {})", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight decay must be >= 0 (got {})", self.weight_decay)));
        }
        if self.arch != Arch::Base && (self.tree.learners_per_leaf == 0 || self.tree.fanout == 0) {
            return Err(Error::Config("tree learners_per_leaf and fanout must be >= 1".into()));
        }
        if self.arch == Arch::AdvStar && self.broadcast_fanout == 0 {
            return Err(Error::Config("broadcast fanout must be >= 1".into()));
        }
        if !(self.divergence_factor > 1.0) {
            return Err(Error::Config("divergence factor must be > 1".into()));
        }
        if self.timing.learner_speeds.len() > self.learners {
            return Err(Error::Config("more learner speeds than learners".into()));
        }
        self.timing.validate()
    }
}
