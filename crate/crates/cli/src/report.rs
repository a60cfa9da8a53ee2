use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use stepq::grouping::GroupingScheme;
use stepq::search::Candidate;

use crate::artifacts::{EliteFile, LogLine};
use crate::error::{bad_input, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub evaluated: usize,
    pub failed: usize,
    pub epoch_best: Option<f64>,
    /// Best fitness seen up to and including this epoch.
    pub best: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupCounts {
    pub group: usize,
    pub start: usize,
    pub end: usize,
    /// Selected timestep → number of elites choosing it.
    pub counts: BTreeMap<usize, usize>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Report {
    pub config_hash: Option<String>,
    pub curve: Vec<EpochRow>,
    pub elite: Vec<(Candidate, f64)>,
    pub slots: usize,
    pub weight_hist: BTreeMap<u8, usize>,
    pub act_hist: BTreeMap<u8, usize>,
    pub groups: Vec<GroupCounts>,
}

/// The single config hash shared by every line, if any.
pub fn log_hash(lines: &[LogLine]) -> CliResult<Option<String>> {
    let Some(first) = lines.first() else { return Ok(None) };
    if let Some(other) = lines.iter().find(|l| l.config_hash != first.config_hash) {
        return Err(bad_input(format!(
            "log mixes config hashes {} and {}",
            first.config_hash, other.config_hash
        )));
    }
    Ok(Some(first.config_hash.clone()))
}

/// Best `k` distinct candidates of the log, ranked by (fitness, epoch, index).
pub fn log_elite(lines: &[LogLine], k: usize) -> Vec<(Candidate, f64)> {
    let mut ok: Vec<&LogLine> = lines.iter().filter(|l| l.fitness.is_some_and(f64::is_finite)).collect();
    ok.sort_by(|a, b| {
        a.fitness.unwrap().total_cmp(&b.fitness.unwrap()).then(a.epoch.cmp(&b.epoch)).then(a.index.cmp(&b.index))
    });
    let mut out: Vec<(Candidate, f64)> = Vec::new();
    for l in ok {
        if out.len() == k {
            break;
        }
        if !out.iter().any(|(c, _)| *c == l.candidate) {
            out.push((l.candidate.clone(), l.fitness.unwrap()));
        }
    }
    out
}

pub fn best_curve(lines: &[LogLine]) -> Vec<EpochRow> {
    let mut by_epoch: BTreeMap<usize, Vec<&LogLine>> = BTreeMap::new();
    for l in lines {
        by_epoch.entry(l.epoch).or_default().push(l);
    }
    let mut best: Option<f64> = None;
    by_epoch
        .into_iter()
        .map(|(epoch, ls)| {
            let finite = ls.iter().filter_map(|l| l.fitness).filter(|f| f.is_finite());
            let epoch_best = finite.reduce(f64::min);
            if let Some(f) = epoch_best {
                best = Some(best.map_or(f, |b| b.min(f)));
            }
            EpochRow {
                epoch,
                evaluated: ls.len(),
                failed: ls.iter().filter(|l| !l.fitness.is_some_and(f64::is_finite)).count(),
                epoch_best,
                best,
            }
        })
        .collect()
}

pub fn build(lines: &[LogLine], elite_file: Option<&EliteFile>, k: usize, grouping: &GroupingScheme) -> CliResult<Report> {
    let hash = log_hash(lines)?;
    if let (Some(h), Some(e)) = (&hash, elite_file) {
        if *h != e.config_hash {
            return Err(bad_input(format!("elite file hash {} does not match log hash {h}", e.config_hash)));
        }
    }
    let elite = match elite_file {
        Some(e) => e.elite.iter().map(|r| (r.candidate.clone(), r.fitness)).collect(),
        None => log_elite(lines, k),
    };
    let slots = elite.first().map_or(0, |(c, _)| c.policy.len());
    let mut weight_hist = BTreeMap::new();
    let mut act_hist = BTreeMap::new();
    let mut groups: Vec<GroupCounts> = (0..grouping.num_groups())
        .map(|h| {
            let r = grouping.range(h);
            GroupCounts { group: h + 1, start: r.start, end: r.end, counts: BTreeMap::new() }
        })
        .collect();
    for (c, _) in &elite {
        if c.policy.len() != slots {
            return Err(bad_input("elite candidates have differing slot counts"));
        }
        for b in &c.policy {
            *weight_hist.entry(b.w).or_insert(0) += 1;
            *act_hist.entry(b.a).or_insert(0) += 1;
        }
        for &t in &c.timesteps {
            let h = grouping.group_of(t).map_err(|e| bad_input(e.to_string()))?;
            *groups[h].counts.entry(t).or_insert(0) += 1;
        }
    }
    Ok(Report { config_hash: hash, curve: best_curve(lines), elite, slots, weight_hist, act_hist, groups })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".into(), |f| format!("{f:.6}"))
}

pub fn markdown(r: &Report) -> String {
    let mut s = String::from("# Search report\n\n");
    if r.curve.is_empty() {
        s.push_str("The search log is empty.\n");
        return s;
    }
    if let Some(h) = &r.config_hash {
        let _ = writeln!(s, "Config hash: `{h}`\n");
    }
    s.push_str("## Best fitness per epoch\n\n| epoch | evaluated | failed | epoch best | best so far |\n|---|---|---|---|---|\n");
    for row in &r.curve {
        let _ = writeln!(
            s,
            "| {} | {} | {} | {} | {} |",
            row.epoch,
            row.evaluated,
            row.failed,
            fmt_opt(row.epoch_best),
            fmt_opt(row.best)
        );
    }
    let _ = write!(
        s,
        "\n## Bit-width allocation over {} elites × {} slots\n\n| bits | weight | activation |\n|---|---|---|\n",
        r.elite.len(),
        r.slots
    );
    let bits: std::collections::BTreeSet<u8> = r.weight_hist.keys().chain(r.act_hist.keys()).copied().collect();
    for b in bits {
        let w = r.weight_hist.get(&b).copied().unwrap_or(0);
        let a = r.act_hist.get(&b).copied().unwrap_or(0);
        let _ = writeln!(s, "| {b} | {w} | {a} |");
    }
    s.push_str("\n## Timestep selections per group\n\n| group | range | selections |\n|---|---|---|\n");
    for g in &r.groups {
        let picks: Vec<String> = g.counts.iter().map(|(t, n)| format!("{t}×{n}")).collect();
        let _ = writeln!(s, "| {} | [{}, {}) | {} |", g.group, g.start, g.end, picks.join(", "));
    }
    s
}

/// Long-format CSV: `section,key,value`.
pub fn csv(r: &Report) -> String {
    let mut s = String::from("section,key,value\n");
    for row in &r.curve {
        let _ = writeln!(s, "best_fitness,{},{}", row.epoch, row.best.map_or(String::new(), |f| f.to_string()));
    }
    for (b, n) in &r.weight_hist {
        let _ = writeln!(s, "weight_bits,{b},{n}");
    }
    for (b, n) in &r.act_hist {
        let _ = writeln!(s, "act_bits,{b},{n}");
    }
    for g in &r.groups {
        for (t, n) in &g.counts {
            let _ = writeln!(s, "group_{},{t},{n}", g.group);
        }
    }
    s
}

pub fn write(out: &Path, r: &Report) -> CliResult<()> {
    std::fs::create_dir_all(out).map_err(|e| crate::artifacts::io_err(out, e))?;
    for (name, text) in [(crate::artifacts::REPORT_MD, markdown(r)), (crate::artifacts::REPORT_CSV, csv(r))] {
        let path = out.join(name);
        std::fs::write(&path, text).map_err(|e| crate::artifacts::io_err(&path, e))?;
    }
    Ok(())
}
