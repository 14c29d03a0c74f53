use stalesgd_core::clock::read_staleness_csv;
use stalesgd_core::cluster::{read_checkpoint, read_epochs_csv, read_timing_csv, write_checkpoint};
use stalesgd_core::harness::csvio::{read_rows, IncrementalWriter};
use stalesgd_core::harness::experiments::LR_AB_CSV_HEADER;
use stalesgd_core::harness::*;
use stalesgd_core::*;

fn tiny() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        epochs: 1,
        ..ExperimentConfig::default()
    };
    if let DataSource::Synthetic(s) = &mut cfg.data {
        s.samples_per_class = 40;
    }
    cfg
}

#[test]
fn run_csvs_round_trip() {
    let mut cfg = tiny();
    cfg.policy = SyncPolicy::Softsync(2);
    cfg.lr_mode = LrMode::StalenessModulated;
    cfg.epochs = 2;
    let (tr, te) = cfg.datasets().unwrap();
    let log = run_experiment(&cfg, 1, &tr, &te).unwrap();
    let dir = tempfile::tempdir().unwrap();
    log.write_csvs(dir.path()).unwrap();

    assert_eq!(read_epochs_csv(&dir.path().join("epochs.csv")).unwrap(), log.epochs);
    assert_eq!(read_timing_csv(&dir.path().join("timing.csv")).unwrap(), log.timing);
    let st = read_staleness_csv(&dir.path().join("staleness.csv")).unwrap();
    assert_eq!(st.len(), log.records.len());
    for (row, rec) in st.iter().zip(&log.records) {
        assert_eq!(row.server_ts, rec.update_index.0);
        assert_eq!(row.num_contributors, rec.contributors.len());
        assert_eq!(row.max_staleness, rec.max_staleness());
        assert_eq!(row.mean_staleness, average_staleness(rec).unwrap());
    }
    let header = std::fs::read_to_string(dir.path().join("staleness.csv")).unwrap();
    assert!(header.starts_with("update_index,server_ts,num_contributors,mean_staleness,max_staleness\n"));
}

#[test]
fn reading_a_csv_with_the_wrong_header_fails() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("x.csv");
    std::fs::write(&p, "a,b\n1,2\n").unwrap();
    assert!(read_epochs_csv(&p).is_err());
}

#[test]
fn checkpoint_of_a_finished_run_restores_it() {
    let cfg = tiny();
    let (tr, te) = cfg.datasets().unwrap();
    let log = run_experiment(&cfg, 2, &tr, &te).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("final.ckpt");
    write_checkpoint(&p, &log.final_weights, log.final_timestamp).unwrap();
    let (w, ts) = read_checkpoint(&p).unwrap();
    assert_eq!(w, log.final_weights);
    assert_eq!(ts, log.final_timestamp);
    assert_eq!(evaluate(&w, &te).unwrap(), log.final_test_error);
    assert_eq!(&std::fs::read(&p).unwrap()[..4], b"RDRA");
}

#[test]
fn sweep_writes_one_row_per_cell_and_seed() {
    let mut cfg = tiny();
    cfg.seeds = vec![1, 2];
    let cells = grid(&[2, 4], &[4], &[0, 1, usize::MAX]);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("tradeoff.csv");
    let mut w = IncrementalWriter::new(std::fs::File::create(&p).unwrap(), &TRADEOFF_CSV_HEADER).unwrap();
    let out = sweep_tradeoff(&cfg, &cells, Some(&mut w)).unwrap();
    drop(w);
    assert!(out.failures.is_empty());
    assert_eq!(out.rows.len(), cells.len() * 2);
    let back: Vec<TradeoffRow> = read_rows(&p, &TRADEOFF_CSV_HEADER).unwrap();
    assert_eq!(back, out.rows);
    for r in &out.rows {
        match r.policy.as_str() {
            "hardsync" => assert_eq!(r.measured_mean_staleness, 0.0),
            _ => assert!(r.n >= 1 && r.n <= r.lambda),
        }
    }
}

#[test]
fn hardsync_mu_lambda_groups_agree_on_weights() {
    let mut cfg = tiny();
    cfg.sampling = SamplingMode::RoundRobin;
    cfg.max_updates = Some(20);
    cfg.epochs = 100;
    let cells = factorizations(&[8], &[1, 2, 4], |_| SyncPolicy::Hardsync);
    let rep = mu_lambda_suite(&cfg, &cells).unwrap();
    assert_eq!(rep.rows.len(), 3);
    let d = rep.groups[0].max_weight_distance.unwrap();
    assert!(d < 1e-9, "{d}");
    assert_eq!(rep.groups[0].spread, 0.0);
}

#[test]
fn lr_ab_rows_cover_both_modes() {
    let mut cfg = tiny();
    cfg.learners = 4;
    cfg.seeds = vec![1, 2];
    let rows = lr_modulation_ab(&cfg, 4).unwrap();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows.iter().filter(|r| r.mode == "modulated").count(), 2);
    assert_eq!(LR_AB_CSV_HEADER.len(), 5);
    assert!(lr_modulation_ab(&cfg, 5).is_err());
}

#[test]
fn config_file_and_overrides() {
    let file = parse_key_values(
        "# experiment\nprotocol = softsync\nn = 2\nlearners = 8  \nbatch=4\nseeds = 1,2,3\n",
    )
    .unwrap();
    let mut flags = KeyValues::default();
    flags.set("batch", "16");
    let (cfg, notes) = ExperimentConfig::from_key_values(&file.merged_with(&flags)).unwrap();
    assert!(notes.is_empty());
    assert_eq!(cfg.policy, SyncPolicy::Softsync(2));
    assert_eq!((cfg.learners, cfg.batch), (8, 16));
    assert_eq!(cfg.seeds, vec![1, 2, 3]);
    assert_eq!(cfg.lr_mode, LrMode::StalenessModulated);
}

#[test]
fn softsync_without_n_defaults_to_one_with_a_note() {
    let kv = parse_key_values("protocol = softsync\n").unwrap();
    let (cfg, notes) = ExperimentConfig::from_key_values(&kv).unwrap();
    assert_eq!(cfg.policy, SyncPolicy::Softsync(1));
    assert_eq!(notes.len(), 1);
}

#[test]
fn n_above_lambda_is_rejected() {
    let kv = parse_key_values("protocol = softsync\nn = 31\nlearners = 30\n").unwrap();
    let err = ExperimentConfig::from_key_values(&kv).unwrap_err();
    assert!(err.to_string().contains("1 <= n <= lambda"), "{err}");
}

#[test]
fn unknown_keys_and_malformed_lines_are_rejected() {
    assert!(ExperimentConfig::from_key_values(&parse_key_values("colour = red\n").unwrap()).is_err());
    assert!(parse_key_values("just words\n").is_err());
    assert!(parse_key_values("a = 1\na = 2\n").is_err());
}

#[test]
fn csv_dataset_trains() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("d.csv");
    let mut text = String::from("x1,x2,label\n");
    let mut rng = RngStream::new(3, 0);
    for i in 0..200 {
        let y = i % 2;
        let c = if y == 0 { -2.0 } else { 2.0 };
        text.push_str(&format!("{},{},{y}\n", c + rng.gaussian() * 0.3, rng.gaussian()));
    }
    std::fs::write(&p, text).unwrap();
    let kv = parse_key_values(&format!("data-csv = {}\ntest-fraction = 0.25\nepochs = 5\n", p.display())).unwrap();
    let (cfg, _) = ExperimentConfig::from_key_values(&kv).unwrap();
    let (tr, te) = cfg.datasets().unwrap();
    assert_eq!((tr.len(), te.len()), (150, 50));
    let log = run_experiment(&cfg, 1, &tr, &te).unwrap();
    assert!(log.final_test_error < 0.05, "{}", log.final_test_error);
}

#[test]
fn lr_modes_coincide_at_n_one() {
    let mut cfg = tiny();
    cfg.learners = 3;
    let rows = lr_modulation_ab(&cfg, 1).unwrap();
    assert_eq!(rows[0].final_test_error, rows[1].final_test_error);
    assert_eq!(rows[0].diverged, rows[1].diverged);
}
