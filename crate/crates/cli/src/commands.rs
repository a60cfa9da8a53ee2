use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use stepq::cost::CostModel;
use stepq::diffusion::{calibration_set, fit, read_csv, sample, write_csv, SamplerConfig};
use stepq::metrics::frechet_distance;
use stepq::nn::{Checkpoint, DenoiserNet};
use stepq::numerics::{gaussian_stats, GaussianStats, Tensor};
use stepq::quant::{calibrate_all, BankFile, CalibConfig, QuantContext, QuantizerBank};
use stepq::search::{complete_epochs, presample_pool, run_search, DiffusionFitness, SearchRun, SearchState};

use crate::artifacts::{self as art, EliteFile, EliteRecord, LogLine, PoolFile, SampleMeta};
use crate::config::{RunConfig, Stage};

use crate::error::{bad_input, CliError, CliResult};

/// Resolved command-line context shared by every command.
#[derive(Debug, Clone)]
pub struct Context {
    pub config: RunConfig,
    pub out: PathBuf,
    pub workers: usize,
}

impl Context {
    pub fn new(config: RunConfig, out: PathBuf, workers: usize) -> CliResult<Self> {
        config.validate()?;
        Ok(Self { config, out, workers: workers.max(1) })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        art::out_path(&self.out, name)
    }

    fn hash(&self) -> String {
        self.config.hash()
    }

    fn dataset(&self) -> CliResult<Tensor> {
        let path = &self.config.dataset;
        if !path.exists() {
            return Err(bad_input(format!("dataset {} does not exist", path.display())));
        }
        let data = read_csv(path).map_err(|e| bad_input(format!("{}: {e}", path.display())))?;
        if data.cols() != self.config.net.data_dim {
            return Err(bad_input(format!(
                "{}: {} columns, the network expects {}",
                path.display(),
                data.cols(),
                self.config.net.data_dim
            )));
        }
        Ok(data)
    }

    fn reference(&self) -> CliResult<GaussianStats> {
        Ok(gaussian_stats(&self.dataset()?)?)
    }

    fn load_net(&self, checkpoint: Option<&Path>) -> CliResult<DenoiserNet> {
        let path = checkpoint.map_or_else(|| self.path(art::CHECKPOINT), Path::to_path_buf);
        let ck: Checkpoint = art::read_json(&path)?;
        ck.restore().map_err(|e| bad_input(format!("{}: {e}", path.display())))
    }

    fn load_bank(&self, bank: Option<&Path>, net: &DenoiserNet) -> CliResult<QuantizerBank> {
        let path = bank.map_or_else(|| self.path(art::BANK), Path::to_path_buf);
        let file: BankFile = art::read_json(&path)?;
        let bank = QuantizerBank::from_file(&file).map_err(|e| bad_input(format!("{}: {e}", path.display())))?;
        bank.check_matches(net).map_err(|e| bad_input(format!("{}: {e}", path.display())))?;
        let missing: Vec<u8> =
            self.config.quant.bank_bits().into_iter().filter(|b| !bank.bits().contains(b)).collect();
        if !missing.is_empty() {
            return Err(bad_input(format!("{}: no quantizer entries for bit-widths {missing:?}", path.display())));
        }
        if bank.calibrated_blocks < net.num_blocks() {
            log::warn!("bank is calibrated for {} of {} blocks", bank.calibrated_blocks, net.num_blocks());
        }
        Ok(bank)
    }

    /// The network shape without trained weights: enough for costs and slots.
    fn architecture(&self) -> CliResult<DenoiserNet> {
        Ok(DenoiserNet::new(&self.config.net, &mut self.config.rng_for(Stage::Init))?)
    }
}

/// Writes a mixture dataset to the configured dataset path.
pub fn cmd_make_data(ctx: &Context) -> CliResult<PathBuf> {
    let data = ctx.config.data.mixture.sample(ctx.config.data.samples, &mut ctx.config.rng_for(Stage::Data))?;
    let path = ctx.config.dataset.clone();
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| art::io_err(dir, e))?;
    }
    write_csv(&path, &data, data.cols()).map_err(|e| CliError::Internal(format!("{}: {e}", path.display())))?;
    Ok(path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub path: PathBuf,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Mean of the last `min(100, len)` losses.
pub fn tail_mean(losses: &[f64]) -> f64 {
    let tail = &losses[losses.len().saturating_sub(100)..];
    tail.iter().sum::<f64>() / tail.len().max(1) as f64
}

pub fn cmd_train(ctx: &Context) -> CliResult<TrainSummary> {
    let data = ctx.dataset()?;
    let sched = ctx.config.schedule()?;
    let mut net = ctx.architecture()?;
    let history = fit(&mut net, &sched, &data, &ctx.config.train_config(), &mut ctx.config.rng_for(Stage::Train))
        .map_err(|e| CliError::Internal(e.to_string()))?;
    let mut ck = Checkpoint::new(&ctx.config.net, &net, ctx.config.seed_for(Stage::Train), history.clone());
    ck.config_hash = Some(ctx.hash());
    let path = ctx.path(art::CHECKPOINT);
    art::write_json(&path, &ck)?;
    Ok(TrainSummary {
        path,
        steps: history.len(),
        initial_loss: history.first().copied().unwrap_or(f64::NAN),
        final_loss: tail_mean(&history),
    })
}

pub fn cmd_calibrate(ctx: &Context, checkpoint: Option<&Path>) -> CliResult<art::CalibrationFile> {
    let net = ctx.load_net(checkpoint)?;
    let data = ctx.dataset()?;
    let sched = ctx.config.schedule()?;
    let mut rng = ctx.config.rng_for(Stage::Calibration);
    let calib = calibration_set(&sched, &data, ctx.config.calibration.samples, &mut rng)?;
    let mut bank = QuantizerBank::init_minmax(&net, &ctx.config.quant.bank_bits(), &calib.x, &calib.ts)?;
    let cc = CalibConfig {
        iterations: ctx.config.calibration.iterations,
        lr: ctx.config.calibration.lr,
        seed: ctx.config.seed_for(Stage::Calibration),
    };
    let reports = calibrate_all(&net, &mut bank, &calib, &cc)?;
    for r in &reports {
        if r.final_loss.values().any(|l| !l.is_finite()) {
            return Err(CliError::Internal(format!("block {} has a non-finite reconstruction loss", r.block)));
        }
    }
    art::write_json(&ctx.path(art::BANK), &bank.to_file(Some(ctx.hash())))?;
    let file = art::CalibrationFile { config_hash: ctx.hash(), blocks: reports };
    art::write_json(&ctx.path(art::CALIBRATION), &file)?;
    Ok(file)
}

pub fn cmd_presample(ctx: &Context) -> CliResult<PoolFile> {
    let net = ctx.architecture()?;
    let space = ctx.config.space(&net)?;
    let constraint = ctx.config.constraint(&net)?;
    let p = &ctx.config.presample;
    let pool = presample_pool(&space, &constraint, p.count, &p.seeds, ctx.workers)?;
    let file = PoolFile { config_hash: ctx.hash(), budget: constraint.budget, seeds: pool.seeds, policies: pool.policies };
    art::write_json(&ctx.path(art::POOL), &file)?;
    Ok(file)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSummary {
    pub elite: EliteFile,
    pub resumed_epochs: usize,
}

pub fn cmd_search(
    ctx: &Context,
    checkpoint: Option<&Path>,
    bank: Option<&Path>,
    pool: Option<&Path>,
) -> CliResult<SearchSummary> {
    let net = ctx.load_net(checkpoint)?;
    let bank = ctx.load_bank(bank, &net)?;
    let sched = ctx.config.schedule()?;
    let reference = ctx.reference()?;
    let space = ctx.config.space(&net)?;
    let constraint = ctx.config.constraint(&net)?;
    let hash = ctx.hash();

    let pool_policies = if ctx.config.presample.use_pool {
        let path = pool.map_or_else(|| ctx.path(art::POOL), Path::to_path_buf);
        if path.exists() {
            let file: PoolFile = art::read_json(&path)?;
            if file.config_hash != hash {
                return Err(bad_input(format!("{}: pool was built from a different config", path.display())));
            }
            Some(file.policies)
        } else {
            let p = &ctx.config.presample;
            Some(presample_pool(&space, &constraint, p.count, &p.seeds, ctx.workers)?.policies)
        }
    } else {
        None
    };

    let log_path = ctx.path(art::SEARCH_LOG);
    let previous = art::read_log(&log_path)?;
    if let Some(line) = previous.iter().find(|l| l.config_hash != hash) {
        return Err(bad_input(format!(
            "{}: log line for epoch {} comes from config {}; move the log away to start over",
            log_path.display(),
            line.epoch,
            line.config_hash
        )));
    }
    let records: Vec<_> = previous.iter().map(LogLine::record).collect();
    let replay = complete_epochs(&records);
    let resumed_epochs = replay.last().map_or(0, |r| r.epoch + 1);
    std::fs::create_dir_all(&ctx.out).map_err(|e| art::io_err(&ctx.out, e))?;
    let kept: Vec<LogLine> = replay.iter().map(|r| LogLine::new(&hash, r)).collect();
    art::write_log(&log_path, &kept, false)?;

    let fitness = DiffusionFitness {
        net: &net,
        sched: &sched,
        bank: &bank,
        reference: &reference,
        samples: ctx.config.fitness_samples,
    };
    let run = SearchRun {
        space: &space,
        constraint: &constraint,
        pool: pool_policies.as_deref(),
        workers: ctx.workers,
        resume: &replay,
    };
    let calls_before = bank.calibration_calls();
    let state = run_search(&ctx.config.search_config(), &run, &fitness, &mut |_, new| {
        let lines: Vec<LogLine> = new.iter().map(|r| LogLine::new(&hash, r)).collect();
        art::write_log(&log_path, &lines, true).map_err(|e| stepq::Error::Io(std::io::Error::other(e.to_string())))
    })?;
    if bank.calibration_calls() != calls_before {
        return Err(CliError::Internal("search triggered a calibration call".into()));
    }
    let elite = elite_file(&hash, &constraint.cost, &constraint.budget, &state)?;
    art::write_json(&ctx.path(art::ELITE), &elite)?;
    Ok(SearchSummary { elite, resumed_epochs })
}

fn elite_file(
    hash: &str,
    cost: &CostModel,
    budget: &stepq::cost::Budget,
    state: &SearchState,
) -> CliResult<EliteFile> {
    let elite = state
        .elite
        .iter()
        .enumerate()
        .map(|(i, e)| {
            let report = cost.report(&e.candidate.policy, e.candidate.timesteps.len())?;
            if report.overall_bitops > budget.limit {
                return Err(CliError::Internal(format!("elite {i} exceeds the budget")));
            }
            Ok(EliteRecord::from_entry(i + 1, e, report))
        })
        .collect::<CliResult<_>>()?;
    Ok(EliteFile {
        config_hash: hash.to_string(),
        budget: budget.clone(),
        epochs: state.epoch,
        best_history: state.best_history.clone(),
        elite,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleSummary {
    pub csv: PathBuf,
    pub meta: SampleMeta,
    pub frechet: Option<f64>,
    pub plot: Option<PathBuf>,
}

pub fn cmd_sample(
    ctx: &Context,
    checkpoint: Option<&Path>,
    bank: Option<&Path>,
    candidate: &Path,
    n: usize,
    plot: bool,
) -> CliResult<SampleSummary> {
    let net = ctx.load_net(checkpoint)?;
    let bank = ctx.load_bank(bank, &net)?;
    let sched = ctx.config.schedule()?;
    let candidate = art::read_candidate(candidate)?;
    let space = ctx.config.space(&net)?;
    space.check_policy(&candidate.policy).map_err(|e| bad_input(format!("malformed candidate: {e}")))?;
    SamplerConfig::new(candidate.timesteps.clone())
        .validate(&sched)
        .map_err(|e| bad_input(format!("malformed candidate: {e}")))?;
    let cost = CostModel::from_net(&net);
    let overall_bitops = cost.overall_bitops(&candidate.policy, candidate.timesteps.len())?;
    let seed = ctx.config.seed_for(Stage::Sample);
    let quant = QuantContext::new(&bank, &candidate.policy);
    let x = sample(
        &net,
        &sched,
        &SamplerConfig::new(candidate.timesteps.clone()),
        Some(&quant),
        n,
        &mut stepq::numerics::Rng::new(seed),
    )?;
    let csv = ctx.path(art::SAMPLES);
    std::fs::create_dir_all(&ctx.out).map_err(|e| art::io_err(&ctx.out, e))?;
    write_csv(&csv, &x, net.output_dim()).map_err(|e| CliError::Internal(e.to_string()))?;
    let meta = SampleMeta { config_hash: ctx.hash(), seed, n, candidate, overall_bitops };
    art::write_json(&ctx.path(art::SAMPLES_META), &meta)?;
    let frechet = if n >= 2 { Some(frechet_distance(&ctx.reference()?, &gaussian_stats(&x)?)?) } else { None };
    let plot = if plot {
        let path = ctx.path(art::SAMPLES_PLOT);
        crate::plot::scatter(&path, &ctx.dataset()?, &x)?;
        Some(path)
    } else {
        None
    };
    Ok(SampleSummary { csv, meta, frechet, plot })
}

pub fn cmd_report(ctx: &Context, log: Option<&Path>, elite: Option<&Path>) -> CliResult<crate::report::Report> {
    let log_path = log.map_or_else(|| ctx.path(art::SEARCH_LOG), Path::to_path_buf);
    let lines = art::read_log(&log_path)?;
    let elite_file: Option<EliteFile> = match elite {
        Some(p) => Some(art::read_json(p)?),
        None => None,
    };
    if let Some(h) = crate::report::log_hash(&lines)? {
        if h != ctx.hash() {
            return Err(bad_input(format!(
                "{}: log comes from config {h}, not the given config {}",
                log_path.display(),
                ctx.hash()
            )));
        }
    }
    let report = crate::report::build(&lines, elite_file.as_ref(), ctx.config.search.elite, &ctx.config.grouping()?)?;
    crate::report::write(&ctx.out, &report)?;
    Ok(report)
}

/// Summary table of the elite: steps, bit histogram, BitOPs, fitness.
pub fn summary_table(elite: &EliteFile) -> String {
    use std::fmt::Write as _;
    let mut s = format!("budget: {} ({} BitOPs)\n", elite.budget.reference, elite.budget.limit);
    s.push_str("rank  steps  W bits               A bits             overall BitOPs    fitness\n");
    for r in &elite.elite {
        let hist = |f: fn(&stepq::quant::SlotBits) -> u8| {
            let mut h = std::collections::BTreeMap::new();
            for b in &r.candidate.policy {
                *h.entry(f(b)).or_insert(0usize) += 1;
            }
            h.iter().map(|(b, n)| format!("{b}:{n}")).collect::<Vec<_>>().join(" ")
        };
        let _ = writeln!(
            s,
            "{:>4}  {:>5}  {:<20} {:<18} {:>14.4e}  {:.6}",
            r.rank,
            r.candidate.timesteps.len(),
            hist(|b| b.w),
            hist(|b| b.a),
            r.cost.overall_bitops as f64,
            r.fitness
        );
    }
    s
}
