use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use stalesgd_core::cluster::write_checkpoint;
use stalesgd_core::harness::csvio::{write_rows_to_path, IncrementalWriter};
use stalesgd_core::harness::experiments::RunFailure;
use stalesgd_core::harness::{
    factorizations, grid, lr_modulation_ab, mu_lambda_suite, read_config_file, run_experiment, sweep_tradeoff,
    ExperimentConfig, KeyValues, KEYS, LR_AB_BATCH, LR_AB_CSV_HEADER, LR_AB_LEARNERS, LR_AB_STABILITY_EDGE_ALPHA0,
    MU_LAMBDA_CSV_HEADER, TRADEOFF_CSV_HEADER,
};
use stalesgd_core::{Error, RunLog, SyncPolicy};

#[derive(Parser)]
#[command(name = "stalesgd", version, about = "Parameter-server SGD experiments under hardsync, n-softsync and async")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration per seed and write its CSV logs and checkpoint.
    Train(Common),
    /// Run a (protocol, learners, batch) grid and write tradeoff.csv.
    Sweep(Common),
    /// Run every learners x batch factorisation of fixed products and write mu_lambda.csv.
    MuLambda(Common),
    /// Compare the staleness-modulated and unmodulated learning rates and write lr_ab.csv.
    LrAb(Common),
    /// Train once and report the staleness distribution.
    Staleness(Common),
    /// List every configuration key.
    Keys,
}

#[derive(Clone, Copy, ValueEnum)]
enum Protocol {
    Hardsync,
    Softsync,
    Async,
}

#[derive(Clone, Copy, ValueEnum)]
enum ArchArg {
    Base,
    Adv,
    Advstar,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Threads,
    Virtual,
}

#[derive(Args)]
struct Common {
    #[arg(long, value_enum)]
    protocol: Option<Protocol>,
    /// Softsync splitting parameter, 1 <= n <= learners.
    #[arg(long)]
    n: Option<usize>,
    /// Number of learners (lambda).
    #[arg(long)]
    learners: Option<usize>,
    /// Per-learner mini-batch size (mu).
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    alpha0: Option<f64>,
    /// Reference batch size for the hardsync rescale rule.
    #[arg(long)]
    ref_batch: Option<usize>,
    #[arg(long)]
    epochs: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    arch: Option<ArchArg>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Config file of `key = value` lines; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Any other configuration key (see `stalesgd keys`), repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e.into())
    }
}

fn usage(e: impl std::fmt::Display) -> Failure {
    Failure::Usage(e.to_string())
}

fn note(msg: &str) {
    eprintln!("note: {msg}");
}

impl Common {
    fn flags(&self) -> Result<KeyValues, Failure> {
        let mut kv = KeyValues::default();
        if let Some(p) = self.protocol {
            let name = match p {
                Protocol::Hardsync => "hardsync",
                Protocol::Softsync => "softsync",
                Protocol::Async => "async",
            };
            kv.set("protocol", name);
        }
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                kv.set(k, v);
            }
        };
        put("n", self.n.map(|v| v.to_string()));
        put("learners", self.learners.map(|v| v.to_string()));
        put("batch", self.batch.map(|v| v.to_string()));
        put("alpha0", self.alpha0.map(|v| v.to_string()));
        put("ref-batch", self.ref_batch.map(|v| v.to_string()));
        put("epochs", self.epochs.map(|v| v.to_string()));
        put("seed", self.seed.map(|v| v.to_string()));
        put(
            "arch",
            self.arch.map(|a| {
                match a {
                    ArchArg::Base => "base",
                    ArchArg::Adv => "adv",
                    ArchArg::Advstar => "advstar",
                }
                .to_string()
            }),
        );
        put(
            "mode",
            self.mode.map(|m| {
                match m {
                    ModeArg::Threads => "threads",
                    ModeArg::Virtual => "virtual",
                }
                .to_string()
            }),
        );
        put("out", self.out.as_ref().map(|p| p.display().to_string()));
        for item in &self.set {
            let (k, v) = item
                .split_once('=')
                .ok_or_else(|| usage(format!("--set expects KEY=VALUE, got '{item}'")))?;
            let k = k.trim();
            if kv.get(k).is_some() {
                return Err(usage(format!("'{k}' is given both as a flag and with --set")));
            }
            kv.set(k, v.trim());
        }
        Ok(kv)
    }

    /// Command defaults, then the config file, then flags.
    fn settings(&self, defaults: KeyValues) -> Result<KeyValues, Failure> {
        let file = match &self.config {
            Some(p) => read_config_file(p).map_err(|e| usage(format!("{}: {e}", p.display())))?,
            None => KeyValues::default(),
        };
        let flags = self.flags()?;
        let mut kv = defaults.merged_with(&file).merged_with(&flags);
        // An explicit single seed replaces a default seed list.
        if (file.get("seed").is_some() || flags.get("seed").is_some())
            && file.get("seeds").is_none()
            && flags.get("seeds").is_none()
        {
            kv.entries.remove("seeds");
        }
        Ok(kv)
    }
}

fn build(kv: &KeyValues) -> Result<ExperimentConfig, Failure> {
    let (cfg, notes) = ExperimentConfig::from_key_values(kv).map_err(usage)?;
    for n in &notes {
        note(n);
    }
    Ok(cfg)
}

fn take_list<T: std::str::FromStr>(kv: &mut KeyValues, key: &str) -> Result<Option<Vec<String>>, Failure>
where
    T::Err: std::fmt::Display,
{
    match kv.entries.remove(key) {
        None => Ok(None),
        Some((v, _)) => {
            let items: Vec<String> = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
            for s in &items {
                if s != "lambda" {
                    s.parse::<T>().map_err(|e| usage(format!("invalid entry '{s}' for {key}: {e}")))?;
                }
            }
            Ok(Some(items))
        }
    }
}

fn parse_items(items: &[String]) -> Vec<usize> {
    items.iter().map(|s| if s == "lambda" { usize::MAX } else { s.parse().unwrap() }).collect()
}

fn create_out(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn summarize(seed: u64, log: &RunLog) -> anyhow::Result<String> {
    let st = log.staleness_stats().ok();
    Ok(format!(
        "seed {seed}: updates {} final_test_error {:.4} mean_staleness {} time {:.3} diverged {} sha256 {}",
        log.updates,
        log.final_test_error,
        st.map(|s| format!("{:.3}", s.run_mean)).unwrap_or_else(|| "-".into()),
        log.total_time,
        log.diverged,
        log.checksum()?,
    ))
}

fn report_abort(log: &RunLog) {
    if let Some(why) = &log.abort {
        note(&format!("run stopped early: {why}"));
    } else if log.diverged {
        note("run diverged: training loss exceeded the divergence threshold");
    }
}

fn train(c: &Common) -> Result<(), Failure> {
    let cfg = build(&c.settings(KeyValues::default())?)?;
    let (train, test) = cfg.datasets().context("loading data")?;
    for &seed in &cfg.seeds {
        let dir = if cfg.seeds.len() > 1 {
            cfg.out.join(format!("seed-{seed}"))
        } else {
            cfg.out.clone()
        };
        let log = run_experiment(&cfg, seed, &train, &test).with_context(|| format!("seed {seed}"))?;
        create_out(&dir)?;
        log.write_csvs(&dir).context("writing CSV logs")?;
        write_checkpoint(&dir.join("final.ckpt"), &log.final_weights, log.final_timestamp)
            .context("writing checkpoint")?;
        report_abort(&log);
        println!("{}", summarize(seed, &log)?);
    }
    Ok(())
}

fn staleness_cmd(c: &Common) -> Result<(), Failure> {
    let mut defaults = KeyValues::default();
    if c.settings(KeyValues::default())?.get("protocol").is_none() {
        defaults.set("protocol", "softsync");
        defaults.set("n", "1");
    }
    defaults.set("learners", "30");
    defaults.set("batch", "4");
    defaults.set("epochs", "2");
    let kv = c.settings(defaults)?;
    let cfg = build(&kv)?;
    let (train, test) = cfg.datasets().context("loading data")?;
    let seed = cfg.seeds[0];
    let log = run_experiment(&cfg, seed, &train, &test)?;
    create_out(&cfg.out)?;
    log.write_csvs(&cfg.out).context("writing CSV logs")?;
    report_abort(&log);
    let st = log.staleness_stats().context("no updates were applied")?;
    println!("{}", summarize(seed, &log)?);
    println!("policy {} learners {} gradients {}", cfg.policy, cfg.learners, st.gradient_count());
    println!("staleness,count,fraction");
    let total = st.histogram.total() as f64;
    for (s, n) in &st.histogram.counts {
        println!("{s},{n},{:.6}", *n as f64 / total);
    }
    Ok(())
}

fn print_failures(failures: &[RunFailure]) {
    for f in failures {
        eprintln!(
            "error: run {} learners {} batch {} seed {} failed: {}",
            f.cell.policy, f.cell.lambda, f.cell.mu, f.seed, f.error
        );
    }
}

fn sweep(c: &Common) -> Result<(), Failure> {
    let mut kv = c.settings(KeyValues::default())?;
    let learners = take_list::<usize>(&mut kv, "grid-learners")?;
    let batches = take_list::<usize>(&mut kv, "grid-batch")?;
    let ns = take_list::<usize>(&mut kv, "grid-n")?;
    // the grid owns the protocol
    if kv.get("protocol").is_some() || kv.get("n").is_some() {
        note("sweep takes protocols from grid-n; --protocol and --n are ignored");
        kv.entries.remove("protocol");
        kv.entries.remove("n");
    }
    let cfg = build(&kv)?;
    let lambdas = learners.map(|l| parse_items(&l)).unwrap_or_else(|| vec![cfg.learners]);
    let mus = batches.map(|b| parse_items(&b)).unwrap_or_else(|| vec![cfg.batch]);
    let ns = ns.map(|n| parse_items(&n)).unwrap_or_else(|| vec![0, 1, usize::MAX]);
    if lambdas.contains(&usize::MAX) || mus.contains(&usize::MAX) {
        return Err(usage("'lambda' is only meaningful in grid-n"));
    }
    let cells = grid(&lambdas, &mus, &ns);
    if cells.is_empty() {
        return Err(usage("the sweep grid is empty (every n exceeds its learner count?)"));
    }
    for cell in &cells {
        let mut probe = cfg.clone();
        probe.policy = cell.policy;
        probe.learners = cell.lambda;
        probe.batch = cell.mu;
        probe.validate().map_err(usage)?;
    }
    create_out(&cfg.out)?;
    let path = cfg.out.join("tradeoff.csv");
    let file = std::fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?;
    let mut sink = IncrementalWriter::new(file, &TRADEOFF_CSV_HEADER).context("writing tradeoff.csv")?;
    let out = sweep_tradeoff(&cfg, &cells, Some(&mut sink))?;
    for r in &out.rows {
        println!(
            "{} n={} learners={} batch={} seed={} staleness={:.3} error={:.4} time={:.3} updates={}",
            r.policy, r.n, r.lambda, r.mu, r.seed, r.measured_mean_staleness, r.final_test_error, r.total_time, r.updates
        );
    }
    print_failures(&out.failures);
    if !out.failures.is_empty() {
        return Err(Failure::Runtime(anyhow::anyhow!("{} of {} runs failed", out.failures.len(), out.failures.len() + out.rows.len())));
    }
    Ok(())
}

fn mu_lambda(c: &Common) -> Result<(), Failure> {
    let mut defaults = KeyValues::default();
    defaults.set("seeds", "1,2,3,4,5");
    if c.settings(KeyValues::default())?.get("protocol").is_none() {
        defaults.set("protocol", "softsync");
        defaults.set("n", "1");
    }
    let mut kv = c.settings(defaults)?;
    let products = take_list::<usize>(&mut kv, "products")?.map(|p| parse_items(&p)).unwrap_or_else(|| vec![32, 128, 512]);
    let lambdas = take_list::<usize>(&mut kv, "lambdas")?.map(|l| parse_items(&l)).unwrap_or_else(|| vec![4, 8, 16]);
    if products.contains(&usize::MAX) || lambdas.contains(&usize::MAX) {
        return Err(usage("'lambda' is not a valid product or learner count"));
    }
    let cfg = build(&kv)?;
    let policy = cfg.policy;
    let cells = factorizations(&products, &lambdas, |_| policy);
    if cells.is_empty() {
        return Err(usage("no learner count divides any product"));
    }
    for cell in &cells {
        cell.policy.validate(cell.lambda).map_err(usage)?;
    }
    let report = mu_lambda_suite(&cfg, &cells)?;
    create_out(&cfg.out)?;
    write_rows_to_path(&cfg.out.join("mu_lambda.csv"), &MU_LAMBDA_CSV_HEADER, &report.rows)
        .context("writing mu_lambda.csv")?;
    for g in &report.groups {
        let means: Vec<String> = g.config_means.iter().map(|m| format!("{m:.4}")).collect();
        print!(
            "product {}: mean_error {:.4} config_means [{}] spread {:.4} seed_std {:.4}",
            g.product,
            g.mean,
            means.join(", "),
            g.spread,
            g.seed_std
        );
        match g.max_weight_distance {
            Some(d) => println!(" max_weight_distance {d:.3e}"),
            None => println!(),
        }
    }
    Ok(())
}

fn lr_ab(c: &Common) -> Result<(), Failure> {
    let mut defaults = KeyValues::default();
    defaults.set("learners", LR_AB_LEARNERS.to_string());
    defaults.set("batch", LR_AB_BATCH.to_string());
    defaults.set("alpha0", LR_AB_STABILITY_EDGE_ALPHA0.to_string());
    defaults.set("seeds", "1,2,3");
    let mut kv = c.settings(defaults)?;
    if let Some(p) = kv.get("protocol") {
        if !p.trim().eq_ignore_ascii_case("softsync") {
            return Err(usage(format!("lr-ab compares learning rates under softsync, not {p}")));
        }
    }
    let n = match kv.entries.remove("n") {
        Some((v, _)) => Some(v.parse::<usize>().map_err(|e| usage(format!("invalid value '{v}' for n: {e}")))?),
        None => None,
    };
    kv.entries.remove("protocol");
    kv.entries.remove("lr-mode");
    let cfg = build(&kv)?;
    let n = n.unwrap_or(cfg.learners);
    SyncPolicy::Softsync(n).validate(cfg.learners).map_err(usage)?;
    let rows = lr_modulation_ab(&cfg, n)?;
    create_out(&cfg.out)?;
    write_rows_to_path(&cfg.out.join("lr_ab.csv"), &LR_AB_CSV_HEADER, &rows).context("writing lr_ab.csv")?;
    for r in &rows {
        println!(
            "n={} seed={} {}: final_test_error {:.4} diverged {}",
            r.n, r.seed, r.mode, r.final_test_error, r.diverged
        );
    }
    Ok(())
}

fn keys() {
    for (k, d) in KEYS {
        println!("{k:<20} {d}");
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(c) => train(c),
        Command::Sweep(c) => sweep(c),
        Command::MuLambda(c) => mu_lambda(c),
        Command::LrAb(c) => lr_ab(c),
        Command::Staleness(c) => staleness_cmd(c),
        Command::Keys => {
            keys();
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
