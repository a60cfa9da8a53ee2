use std::path::{Path, PathBuf};
use std::process::Command;

use stepq::cost::CostModel;
use stepq::diffusion::{read_csv, sample, SamplerConfig};
use stepq::nn::Checkpoint;
use stepq::numerics::Rng;
use stepq::quant::{BankFile, QuantContext, QuantizerBank};
use stepq_cli::artifacts::{self as art, EliteFile, LogLine, PoolFile, SampleMeta};
use stepq_cli::commands::{self, Context};
use stepq_cli::{CliError, RunConfig};

const CONFIG: &str = r#"{
  "dataset": "data.csv",
  "data": {"samples": 1024},
  "net": {"hidden": 16, "emb_dim": 8, "hidden_layers": 2, "attention_tokens": 4},
  "train": {"steps": 200, "batch_size": 64},
  "calibration": {"samples": 64, "iterations": 40},
  "search": {"population": 10, "mutations": 5, "crossovers": 3, "elite": 4, "initial": 10, "epochs": 3},
  "presample": {"count": 40, "seeds": [0, 1, 2]},
  "fitness_samples": 128,
  "seed": 7
}"#;

struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        Self::with_config(CONFIG)
    }

    fn with_config(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        std::fs::write(root.join("config.json"), config).unwrap();
        Self { _dir: dir, root }
    }

    fn config_path(&self) -> PathBuf {
        self.root.join("config.json")
    }

    fn ctx(&self, workers: usize) -> Context {
        Context::new(RunConfig::load(&self.config_path()).unwrap(), self.root.join("out"), workers).unwrap()
    }

    fn out(&self, name: &str) -> PathBuf {
        self.root.join("out").join(name)
    }

    fn bytes(&self, name: &str) -> Vec<u8> {
        std::fs::read(self.out(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
    }

    /// make-data, train, calibrate, presample, search.
    fn pipeline(&self) -> commands::SearchSummary {
        let ctx = self.ctx(1);
        commands::cmd_make_data(&ctx).unwrap();
        commands::cmd_train(&ctx).unwrap();
        commands::cmd_calibrate(&ctx, None).unwrap();
        commands::cmd_presample(&ctx).unwrap();
        commands::cmd_search(&ctx, None, None, None).unwrap()
    }
}

fn stepq(args: &[&str], cwd: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_stepq")).args(args).current_dir(cwd).output().unwrap()
}

#[test]
fn pipeline_artifacts_are_reproducible() {
    let (a, b) = (Fixture::new(), Fixture::new());
    let sa = a.pipeline();
    let sb = b.pipeline();
    assert_eq!(sa, sb);
    for name in [art::CHECKPOINT, art::BANK, art::CALIBRATION, art::POOL, art::SEARCH_LOG, art::ELITE] {
        assert_eq!(a.bytes(name), b.bytes(name), "{name} differs between identical runs");
    }
    // A different seed changes the artifacts.
    let c = Fixture::new();
    let mut ctx = c.ctx(1);
    ctx.config.seed = 8;
    commands::cmd_make_data(&ctx).unwrap();
    commands::cmd_train(&ctx).unwrap();
    assert_ne!(a.bytes(art::CHECKPOINT), c.bytes(art::CHECKPOINT));
}

#[test]
fn artifacts_are_complete_and_consistent() {
    let f = Fixture::new();
    let summary = f.pipeline();
    let ctx = f.ctx(1);
    let hash = ctx.config.hash();

    let ck: Checkpoint = art::read_json(&f.out(art::CHECKPOINT)).unwrap();
    assert_eq!(ck.config_hash.as_deref(), Some(hash.as_str()));
    assert_eq!(ck.loss_history.len(), 200);
    let net = ck.restore().unwrap();

    let bank = QuantizerBank::from_file(&art::read_json::<BankFile>(&f.out(art::BANK)).unwrap()).unwrap();
    let bits = ctx.config.quant.bank_bits();
    for slot in 0..net.slots().len() {
        for q in 0..2 {
            for &b in &bits {
                assert!(bank.params(slot, q, b).is_ok());
            }
        }
    }
    let calib: art::CalibrationFile = art::read_json(&f.out(art::CALIBRATION)).unwrap();
    assert_eq!(calib.blocks.len(), net.num_blocks());
    assert!(calib.blocks.iter().all(|r| r.final_loss.values().all(|l| l.is_finite())));

    let elite: EliteFile = art::read_json(&f.out(art::ELITE)).unwrap();
    assert_eq!(elite, summary.elite);
    assert_eq!(elite.config_hash, hash);
    assert!(!elite.elite.is_empty() && elite.elite.len() <= 4);
    let cost = CostModel::from_net(&net);
    for r in &elite.elite {
        let recomputed = cost.overall_bitops(&r.candidate.policy, r.candidate.timesteps.len()).unwrap();
        assert_eq!(recomputed, r.cost.overall_bitops);
        assert!(recomputed <= elite.budget.limit);
    }
    let table = commands::summary_table(&elite);
    let first_row = table.lines().nth(2).unwrap();
    assert!(first_row.contains(&format!("{:.4e}", elite.elite[0].cost.overall_bitops as f64)), "{table}");

    let log = art::read_log(&f.out(art::SEARCH_LOG)).unwrap();
    assert_eq!(log.len(), 10 + 2 * 10);
    assert!(log.iter().all(|l| l.config_hash == hash && l.overall_bitops <= elite.budget.limit));
    assert!(elite.best_history.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn presample_ignores_worker_count() {
    let f = Fixture::new();
    let one = commands::cmd_presample(&f.ctx(1)).unwrap();
    let bytes_one = f.bytes(art::POOL);
    let eight = commands::cmd_presample(&f.ctx(8)).unwrap();
    assert_eq!(one, eight);
    assert_eq!(bytes_one, f.bytes(art::POOL));
    let net = stepq::nn::DenoiserNet::new(&f.ctx(1).config.net, &mut Rng::new(0)).unwrap();
    let cost = CostModel::from_net(&net);
    let steps = f.ctx(1).config.grouping.groups;
    for p in &one.policies {
        assert!(cost.overall_bitops(p, steps).unwrap() <= one.budget.limit);
    }
}

#[test]
fn interrupted_search_resumes_from_last_complete_epoch() {
    let (full, cut) = (Fixture::new(), Fixture::new());
    full.pipeline();
    let ctx = cut.ctx(1);
    commands::cmd_make_data(&ctx).unwrap();
    commands::cmd_train(&ctx).unwrap();
    commands::cmd_calibrate(&ctx, None).unwrap();
    commands::cmd_presample(&ctx).unwrap();

    // One full epoch plus part of the next, as if killed mid-epoch.
    let full_log = std::fs::read_to_string(full.out(art::SEARCH_LOG)).unwrap();
    let partial: String = full_log.lines().take(14).map(|l| format!("{l}\n")).collect();
    std::fs::write(cut.out(art::SEARCH_LOG), partial).unwrap();
    let summary = commands::cmd_search(&ctx, None, None, None).unwrap();
    assert_eq!(summary.resumed_epochs, 1);
    assert_eq!(full.bytes(art::SEARCH_LOG), cut.bytes(art::SEARCH_LOG));
    assert_eq!(full.bytes(art::ELITE), cut.bytes(art::ELITE));

    // A finished log replays without new evaluations.
    let again = commands::cmd_search(&ctx, None, None, None).unwrap();
    assert_eq!(again.resumed_epochs, 3);
    assert_eq!(full.bytes(art::SEARCH_LOG), cut.bytes(art::SEARCH_LOG));

    // A log from another config is refused.
    let mut other = cut.ctx(1);
    other.config.search.p_mut = 0.5;
    assert!(matches!(commands::cmd_search(&other, None, None, None), Err(CliError::BadInput(_))));
}

#[test]
fn samples_reproduce_from_their_sidecar() {
    let f = Fixture::new();
    f.pipeline();
    let ctx = f.ctx(1);
    let elite = f.out(art::ELITE);
    let s = commands::cmd_sample(&ctx, None, None, &elite, 300, true).unwrap();
    assert!(s.frechet.unwrap().is_finite());
    assert!(s.plot.as_ref().unwrap().exists());
    let csv = f.bytes(art::SAMPLES);

    let meta: SampleMeta = art::read_json(&f.out(art::SAMPLES_META)).unwrap();
    assert_eq!(meta.n, 300);
    let net = art::read_json::<Checkpoint>(&f.out(art::CHECKPOINT)).unwrap().restore().unwrap();
    let bank = QuantizerBank::from_file(&art::read_json::<BankFile>(&f.out(art::BANK)).unwrap()).unwrap();
    let quant = QuantContext::new(&bank, &meta.candidate.policy);
    let again = sample(
        &net,
        &ctx.config.schedule().unwrap(),
        &SamplerConfig::new(meta.candidate.timesteps.clone()),
        Some(&quant),
        meta.n,
        &mut Rng::new(meta.seed),
    )
    .unwrap();
    assert_eq!(read_csv(&f.out(art::SAMPLES)).unwrap(), again);
    commands::cmd_sample(&ctx, None, None, &elite, 300, false).unwrap();
    assert_eq!(csv, f.bytes(art::SAMPLES));

    commands::cmd_sample(&ctx, None, None, &elite, 0, false).unwrap();
    assert_eq!(std::fs::read_to_string(f.out(art::SAMPLES)).unwrap().trim_end(), "x0,x1");

    let bad = f.root.join("bad.json");
    std::fs::write(&bad, r#"{"timesteps": [5, 3], "policy": []}"#).unwrap();
    assert!(matches!(commands::cmd_sample(&ctx, None, None, &bad, 10, false), Err(CliError::BadInput(_))));
}

#[test]
fn report_summarizes_the_log() {
    let f = Fixture::new();
    f.pipeline();
    let ctx = f.ctx(1);
    let report = commands::cmd_report(&ctx, None, Some(&f.out(art::ELITE))).unwrap();
    assert_eq!(report.curve.len(), 3);
    let bests: Vec<f64> = report.curve.iter().map(|r| r.best.unwrap()).collect();
    assert!(bests.windows(2).all(|w| w[1] <= w[0]), "{bests:?}");
    let k = report.elite.len();
    let slots = report.slots;
    assert_eq!(report.weight_hist.values().sum::<usize>(), k * slots);
    assert_eq!(report.act_hist.values().sum::<usize>(), k * slots);
    for g in &report.groups {
        assert_eq!(g.counts.values().sum::<usize>(), k);
        assert!(g.counts.keys().all(|t| (g.start..g.end).contains(t)));
    }
    assert!(f.out(art::REPORT_MD).exists() && f.out(art::REPORT_CSV).exists());

    // Report from the log alone ranks the same elite.
    let from_log = commands::cmd_report(&ctx, None, None).unwrap();
    assert_eq!(from_log.elite, report.elite);

    // Mixed hashes are refused.
    let mut lines = art::read_log(&f.out(art::SEARCH_LOG)).unwrap();
    lines[3].config_hash = "0".repeat(64);
    let mixed = f.root.join("mixed.jsonl");
    art::write_log(&mixed, &lines, false).unwrap();
    assert!(matches!(commands::cmd_report(&ctx, Some(&mixed), None), Err(CliError::BadInput(_))));
    let mut other = f.ctx(1);
    other.config.seed = 99;
    assert!(matches!(commands::cmd_report(&other, None, None), Err(CliError::BadInput(_))));

    let empty = f.root.join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let nothing = commands::cmd_report(&ctx, Some(&empty), None).unwrap();
    assert!(nothing.curve.is_empty() && nothing.elite.is_empty());
}

#[test]
fn binary_exit_codes() {
    let f = Fixture::new();
    let cfg = f.config_path();
    let cfg = cfg.to_str().unwrap();

    let missing = stepq(&["--config", cfg, "train"], &f.root);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("does not exist"));

    assert_eq!(stepq(&["--config", cfg, "make-data"], &f.root).status.code(), Some(0));
    let trained = stepq(&["--config", cfg, "train"], &f.root);
    assert_eq!(trained.status.code(), Some(0), "{}", String::from_utf8_lossy(&trained.stderr));
    assert!(f.out(art::CHECKPOINT).exists());

    let empty_log = f.root.join("none.jsonl");
    std::fs::write(&empty_log, "").unwrap();
    let report = stepq(&["--config", cfg, "report", "--log", empty_log.to_str().unwrap()], &f.root);
    assert_eq!(report.status.code(), Some(0));

    let corrupt = f.root.join("corrupt.jsonl");
    std::fs::write(&corrupt, "{not json\n").unwrap();
    assert_eq!(stepq(&["--config", cfg, "report", "--log", corrupt.to_str().unwrap()], &f.root).status.code(), Some(2));

    let broken = f.root.join("broken.json");
    std::fs::write(&broken, r#"{"grouping": {"groups": 1}}"#).unwrap();
    assert_eq!(stepq(&["--config", broken.to_str().unwrap(), "presample"], &f.root).status.code(), Some(2));
    std::fs::write(&broken, r#"{"unknown_field": 1}"#).unwrap();
    assert_eq!(stepq(&["--config", broken.to_str().unwrap(), "presample"], &f.root).status.code(), Some(2));
}

#[test]
fn pool_from_another_config_is_refused() {
    let f = Fixture::new();
    let ctx = f.ctx(1);
    commands::cmd_make_data(&ctx).unwrap();
    commands::cmd_train(&ctx).unwrap();
    commands::cmd_calibrate(&ctx, None).unwrap();
    let mut pool: PoolFile = {
        commands::cmd_presample(&ctx).unwrap();
        art::read_json(&f.out(art::POOL)).unwrap()
    };
    pool.config_hash = "f".repeat(64);
    art::write_json(&f.out(art::POOL), &pool).unwrap();
    assert!(matches!(commands::cmd_search(&ctx, None, None, None), Err(CliError::BadInput(_))));
    let _: Vec<LogLine> = art::read_log(&f.out(art::SEARCH_LOG)).unwrap();
}
