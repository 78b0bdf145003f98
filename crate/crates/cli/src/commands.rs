//! Command implementations. Each works per seed (and per grid cell) on the
//! artifacts under `<output_dir>/seed_<s>/`.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use grip_core::attack::{forcing_attack, vulnerability, ForcingMode, ForcingPolicy};
use grip_core::constraints::{capture_retain_cache, RetainCache};
use grip_core::moe::{read_checkpoint, write_checkpoint, MoENetwork};
use grip_core::routing::SelectionTrace;
use grip_core::unlearn::{
    generate_task, init_network, pretrain, sweep_eps, unlearn_run, Enforcement, Objective, PretrainReport, RunReport,
    SweepRow, SyntheticTask, UnlearnConfig, SWEEP_EPS,
};
use log::warn;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::ExperimentConfig;
use crate::error::{CliError, Result};

pub const CHECKPOINT: &str = "model.ckpt";
pub const CACHE: &str = "retain.cache";
pub const TRACE: &str = "pre_trace.txt";
pub const PRETRAIN_REPORT: &str = "pretrain.json";
pub const RUNS_DIR: &str = "runs";
pub const SWEEP_CSV: &str = "sweep_eps.csv";
pub const UNLEARN_CSV: &str = "unlearn.csv";
pub const ATTACK_CSV: &str = "attack.csv";
pub const SUMMARY_CSV: &str = "summary.csv";
/// The fully resolved config of the last `pretrain`, reusable via `--config`.
pub const RESOLVED_CONFIG: &str = "config.toml";

pub const SWEEP_HEADER: [&str; 9] =
    ["seed", "eps", "rs", "rs_retain", "rs_cached", "fa", "ra", "empty_nullspaces", "empty_pairs"];
pub const ATTACK_HEADER: [&str; 10] = [
    "seed",
    "objective",
    "enforcement",
    "mode",
    "total_queries",
    "shifted_queries",
    "normal_fa",
    "forced_fa",
    "vulnerability",
    "chance",
];

/// Shared state of one invocation.
pub struct Ctx {
    pub cfg: ExperimentConfig,
    stats: Option<Mutex<File>>,
}

impl Ctx {
    pub fn new(cfg: ExperimentConfig, stats: Option<&Path>) -> Result<Self> {
        let stats = stats
            .map(|p| {
                if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
                }
                File::create(p).map(Mutex::new).map_err(|e| CliError::io(p, e))
            })
            .transpose()?;
        Ok(Self { cfg, stats })
    }

    /// Appends one JSON line to the `--stats` stream.
    fn stat(&self, value: serde_json::Value) {
        if let Some(f) = &self.stats {
            let mut f = f.lock().expect("stats lock");
            if let Err(e) = writeln!(f, "{value}") {
                warn!("could not write stats line: {e}");
            }
        }
    }

    fn task(&self, seed: u64) -> Result<SyntheticTask> {
        Ok(generate_task(&self.cfg.task_for(seed))?)
    }
}

/// Runs `f` over `items` on up to `threads` workers, keeping input order.
pub fn par_map<T: Sync, R: Send>(threads: usize, items: &[T], f: impl Fn(&T) -> Result<R> + Sync) -> Vec<Result<R>> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<Result<R>>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    slots.into_iter().map(|m| m.into_inner().expect("slot lock").expect("every item ran")).collect()
}

/// First error of `results`, or all values.
fn collect<R>(results: Vec<Result<R>>) -> Result<Vec<R>> {
    results.into_iter().collect()
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value).expect("serializable") + "\n"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::artifact(path, format!("invalid JSON: {e}")))
}

fn write_csv<S: AsRef<str>>(path: &Path, header: &[&str], rows: &[Vec<S>]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::csv(path, e))?;
    w.write_record(header).map_err(|e| CliError::csv(path, e))?;
    for r in rows {
        w.write_record(r.iter().map(AsRef::as_ref)).map_err(|e| CliError::csv(path, e))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

/// Header and rows of a CSV file.
pub fn read_csv(path: &Path) -> Result<(Vec<String>, Vec<Vec<String>>)> {
    let mut r = csv::Reader::from_path(path).map_err(|e| CliError::csv(path, e))?;
    let header = r.headers().map_err(|e| CliError::csv(path, e))?.iter().map(String::from).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|r| r.iter().map(String::from).collect()))
        .collect::<std::result::Result<Vec<Vec<String>>, _>>()
        .map_err(|e| CliError::csv(path, e))?;
    Ok((header, rows))
}

fn require(path: PathBuf, hint: &str) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(CliError::artifact(&path, format!("missing; {hint}")))
    }
}

fn load_pre(ctx: &Ctx, seed: u64) -> Result<MoENetwork> {
    let p = require(ctx.cfg.seed_dir(seed).join(CHECKPOINT), "run `grip pretrain` with the same config first")?;
    let net = read_checkpoint(&p)?;
    if net.shape() != ctx.cfg.shape {
        return Err(CliError::artifact(&p, "network shape differs from the config; rerun `grip pretrain`"));
    }
    Ok(net)
}

#[derive(Serialize, Deserialize)]
pub struct PretrainArtifact {
    pub seed: u64,
    pub config: ExperimentConfig,
    pub report: PretrainReport,
}

#[derive(Serialize, Deserialize)]
pub struct RunArtifact {
    pub seed: u64,
    pub config: ExperimentConfig,
    pub report: RunReport,
}

/// Trains the reference network of each seed and writes its checkpoint,
/// retain cache and pre-unlearning selection trace.
pub fn cmd_pretrain(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    create_dir(&cfg.output_dir)?;
    write_text(&cfg.output_dir.join(RESOLVED_CONFIG), &cfg.to_toml())?;
    let results = par_map(cfg.threads, &cfg.seeds, |&seed| {
        let t = Instant::now();
        let task = ctx.task(seed)?;
        let net0 = init_network(cfg.shape, cfg.pretrain.router_scale, seed)?;
        let (net, report) = pretrain(&net0, &task, &cfg.pretrain)?;
        let dir = cfg.seed_dir(seed);
        create_dir(&dir)?;
        write_checkpoint(&net, &dir.join(CHECKPOINT))?;
        let retain = &task.retain_train;
        capture_retain_cache(&net, &retain.ids, &retain.inputs)?.write(&dir.join(CACHE))?;
        let eval = task.eval_set();
        SelectionTrace::capture(&net, "pre", &eval.ids, &eval.inputs)?.write(&dir.join(TRACE))?;
        ctx.stat(json!({
            "command": "pretrain", "seed": seed, "elapsed_s": t.elapsed().as_secs_f64(),
            "train_accuracy": report.train_accuracy, "max_specialization": report.max_specialization,
        }));
        println!(
            "seed {seed}: train acc {:.3}, retain test {:.3}, forget test {:.3}, specialization {:.2}",
            report.train_accuracy, report.retain_test_accuracy, report.forget_test_accuracy, report.max_specialization
        );
        write_json(&dir.join(PRETRAIN_REPORT), &PretrainArtifact { seed, config: cfg.clone(), report })
    });
    collect(results).map(|_| ())
}

/// Cells of the unlearning grid selected by the flags.
#[derive(Clone, Debug, Default)]
pub struct GridSpec {
    pub objective: Option<Objective>,
    pub enforcement: Option<Enforcement>,
    pub full: bool,
}

impl GridSpec {
    pub fn cells(&self, cfg: &UnlearnConfig) -> Vec<(Objective, Enforcement)> {
        let objectives = match (self.full, self.objective) {
            (_, Some(o)) => vec![o],
            (true, None) => Objective::ALL.to_vec(),
            (false, None) => vec![cfg.objective],
        };
        let modes = match (self.full, self.enforcement) {
            (_, Some(e)) => vec![e],
            (true, None) => Enforcement::ALL.to_vec(),
            (false, None) => vec![cfg.enforcement],
        };
        objectives.iter().flat_map(|&o| modes.iter().map(move |&e| (o, e))).collect()
    }
}

fn cell_stem(o: Objective, e: Enforcement) -> String {
    format!("{o}_{e}")
}

/// Runs every selected `(objective, enforcement)` cell for each seed.
pub fn cmd_unlearn(ctx: &Ctx, grid: &GridSpec) -> Result<()> {
    let cfg = &ctx.cfg;
    let cells = grid.cells(&cfg.unlearn);
    let nets = collect(par_map(cfg.threads, &cfg.seeds, |&s| load_pre(ctx, s)))?;
    let jobs: Vec<(usize, Objective, Enforcement)> =
        (0..cfg.seeds.len()).flat_map(|i| cells.iter().map(move |&(o, e)| (i, o, e))).collect();
    let results = par_map(cfg.threads, &jobs, |&(i, objective, enforcement)| {
        let seed = cfg.seeds[i];
        let task = ctx.task(seed)?;
        let ucfg = UnlearnConfig { objective, enforcement, seed, ..cfg.unlearn.clone() };
        let (net, report) = unlearn_run(&nets[i], &task, &ucfg, None)?;
        let dir = cfg.seed_dir(seed).join(RUNS_DIR);
        create_dir(&dir)?;
        let stem = cell_stem(objective, enforcement);
        write_checkpoint(&net, &dir.join(format!("{stem}.ckpt")))?;
        let row = report.csv_row();
        write_csv(&dir.join(format!("{stem}.csv")), &RunReport::CSV_HEADER, std::slice::from_ref(&row))?;
        ctx.stat(json!({
            "command": "unlearn", "seed": seed, "objective": objective, "enforcement": enforcement,
            "steps": report.steps_run, "rs": report.rs, "rs_cached": report.rs_cached,
            "fa": report.fa_post, "ra": report.ra_post, "vulnerability": report.attack.vulnerability,
            "machinery_flops": report.cost.machinery_flops, "run_s": report.cost.run_s,
        }));
        println!(
            "seed {seed} {objective:>3} {enforcement:<15} steps {:>4}  RS {:.3}  cached RS {:.3}  FA {:.3} -> {:.3}  RA {:.3} -> {:.3}",
            report.steps_run, report.rs, report.rs_cached, report.fa_pre, report.fa_post, report.ra_pre, report.ra_post
        );
        write_json(&dir.join(format!("{stem}.json")), &RunArtifact { seed, config: cfg.clone(), report })?;
        Ok(row)
    });
    let rows = collect(results)?;
    create_dir(&cfg.output_dir)?;
    write_csv(&cfg.output_dir.join(UNLEARN_CSV), &RunReport::CSV_HEADER, &rows)
}

fn sweep_row(seed: u64, r: &SweepRow) -> Vec<String> {
    let pairs: Vec<String> = r.empty_nullspaces.iter().map(|(l, j)| format!("{l}:{j}")).collect();
    vec![
        seed.to_string(),
        format!("{:e}", r.eps),
        r.rs.to_string(),
        r.rs_retain.to_string(),
        r.rs_cached.to_string(),
        r.fa.to_string(),
        r.ra.to_string(),
        r.empty_nullspaces.len().to_string(),
        pairs.join(";"),
    ]
}

/// Expert-specific runs at each null-space threshold.
pub fn cmd_sweep_eps(ctx: &Ctx, objective: Option<Objective>, relative: bool) -> Result<()> {
    let cfg = &ctx.cfg;
    let results = par_map(cfg.threads, &cfg.seeds, |&seed| {
        let net = load_pre(ctx, seed)?;
        let task = ctx.task(seed)?;
        let base = UnlearnConfig {
            objective: objective.unwrap_or(cfg.unlearn.objective),
            eps_relative: relative || cfg.unlearn.eps_relative,
            seed,
            ..cfg.unlearn.clone()
        };
        let rows = sweep_eps(&net, &task, &base, &SWEEP_EPS)?;
        if let Some(r) = rows.iter().find(|r| ![r.rs, r.rs_retain, r.rs_cached, r.fa, r.ra].iter().all(|v| v.is_finite())) {
            return Err(CliError::Failed(format!("seed {seed}: non-finite metrics at eps {:e}", r.eps)));
        }
        let out: Vec<Vec<String>> = rows.iter().map(|r| sweep_row(seed, r)).collect();
        write_csv(&cfg.seed_dir(seed).join(SWEEP_CSV), &SWEEP_HEADER, &out)?;
        for r in &rows {
            let flag = if r.empty_nullspaces.is_empty() {
                String::new()
            } else {
                let layers: std::collections::BTreeSet<usize> = r.empty_nullspaces.iter().map(|p| p.0).collect();
                format!("  empty null spaces: {} (layers {layers:?})", r.empty_nullspaces.len())
            };
            println!(
                "seed {seed} eps {:.0e}: RS {:.3}  cached RS {:.3}  FA {:.3}  RA {:.3}{flag}",
                r.eps, r.rs, r.rs_cached, r.fa, r.ra
            );
            ctx.stat(json!({
                "command": "sweep-eps", "seed": seed, "eps": r.eps, "rs": r.rs, "fa": r.fa, "ra": r.ra,
                "empty_nullspaces": r.empty_nullspaces.len(),
            }));
        }
        Ok(out)
    });
    let rows: Vec<Vec<String>> = collect(results)?.into_iter().flatten().collect();
    create_dir(&cfg.output_dir)?;
    write_csv(&cfg.output_dir.join(SWEEP_CSV), &SWEEP_HEADER, &rows)
}

/// Unlearned checkpoints of a seed as `(objective, enforcement, path)`.
fn run_checkpoints(dir: &Path) -> Result<Vec<(Objective, Enforcement, PathBuf)>> {
    let mut out = Vec::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).map_err(|e| CliError::io(dir, e))? {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("ckpt") {
            continue;
        }
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or_default();
        let parsed = stem
            .split_once('_')
            .and_then(|(o, e)| Some((o.parse::<Objective>().ok()?, e.parse::<Enforcement>().ok()?)));
        match parsed {
            Some((o, e)) => out.push((o, e, path)),
            None => warn!("ignoring unrecognized checkpoint {}", path.display()),
        }
    }
    out.sort_by_key(|(o, e, _)| (Objective::ALL.iter().position(|x| x == o), Enforcement::ALL.iter().position(|x| x == e)));
    Ok(out)
}

/// Expert forcing on each unlearned checkpoint, plus the pre-unlearning
/// control forced through its own selections.
pub fn cmd_attack(ctx: &Ctx, policy: &ForcingPolicy) -> Result<()> {
    let cfg = &ctx.cfg;
    policy.resolved_m(cfg.shape.experts, cfg.shape.k).map_err(|e| CliError::Usage(e.to_string()))?;
    let chance = 1.0 / cfg.shape.classes as f64;
    let results = par_map(cfg.threads, &cfg.seeds, |&seed| {
        let dir = cfg.seed_dir(seed);
        let pre_net = load_pre(ctx, seed)?;
        let pre = SelectionTrace::read(&require(dir.join(TRACE), "run `grip pretrain` first")?)?;
        let task = ctx.task(seed)?;
        let ft = &task.forget_test;
        let mut rows = Vec::new();
        let mut push = |o: &str, e: &str, p: &ForcingPolicy, r: &grip_core::attack::AttackReport, v: f64| {
            rows.push(vec![
                seed.to_string(),
                o.to_string(),
                e.to_string(),
                p.mode.to_string(),
                r.total_queries.to_string(),
                r.shifted_queries.to_string(),
                r.normal_fa.to_string(),
                r.forced_fa.to_string(),
                v.to_string(),
                chance.to_string(),
            ]);
        };
        let control = ForcingPolicy { mode: ForcingMode::PreSelection, ..policy.clone() };
        let r = forcing_attack(&pre_net, &ft.ids, &ft.inputs, &ft.labels, &control, &pre)?;
        push("-", "pre", &control, &r, vulnerability(r.normal_fa, r.forced_fa, cfg.shape.classes));
        let ckpts = run_checkpoints(&dir.join(RUNS_DIR))?;
        if ckpts.is_empty() {
            warn!("seed {seed}: no unlearned checkpoints under {}", dir.join(RUNS_DIR).display());
        }
        for (o, e, path) in ckpts {
            let net = read_checkpoint(&path)?;
            let r = forcing_attack(&net, &ft.ids, &ft.inputs, &ft.labels, policy, &pre)?;
            ctx.stat(json!({
                "command": "attack", "seed": seed, "objective": o, "enforcement": e,
                "normal_fa": r.normal_fa, "forced_fa": r.forced_fa, "vulnerability": r.vulnerability,
            }));
            push(o.name(), e.name(), policy, &r, r.vulnerability);
        }
        Ok(rows)
    });
    let rows: Vec<Vec<String>> = collect(results)?.into_iter().flatten().collect();
    create_dir(&cfg.output_dir)?;
    write_csv(&cfg.output_dir.join(ATTACK_CSV), &ATTACK_HEADER, &rows)?;
    println!("{:<16} {:>5} {:>10} {:>10} {:>13}", "enforcement", "runs", "normal FA", "forced FA", "vulnerability");
    let mut by_mode: BTreeMap<String, Vec<[f64; 3]>> = BTreeMap::new();
    for r in &rows {
        let v = |i: usize| r[i].parse::<f64>().unwrap_or(f64::NAN);
        by_mode.entry(r[2].clone()).or_default().push([v(6), v(7), v(8)]);
    }
    for (mode, vals) in by_mode {
        let m = |k: usize| vals.iter().map(|v| v[k]).sum::<f64>() / vals.len() as f64;
        println!("{mode:<16} {:>5} {:>10.3} {:>10.3} {:>13.3}", vals.len(), m(0), m(1), m(2));
    }
    Ok(())
}

/// One checked artifact.
#[derive(Debug)]
pub struct Check {
    pub path: PathBuf,
    pub problem: Option<String>,
}

fn check(path: &Path, f: impl FnOnce() -> Result<()>) -> Check {
    Check { path: path.to_path_buf(), problem: f().err().map(|e| e.to_string()) }
}

fn check_csv(path: &Path, header: &[&str], expect_rows: Option<usize>) -> Result<()> {
    let (h, rows) = read_csv(path)?;
    if h != header {
        return Err(CliError::artifact(path, format!("header {h:?} differs from {header:?}")));
    }
    if let Some(n) = expect_rows {
        if rows.len() != n {
            return Err(CliError::artifact(path, format!("{} rows, expected {n}", rows.len())));
        }
    }
    Ok(())
}

/// Parses every artifact of the configured seeds without running anything.
pub fn validate_artifacts(cfg: &ExperimentConfig) -> Result<Vec<Check>> {
    let mut out = Vec::new();
    for &seed in &cfg.seeds {
        let dir = cfg.seed_dir(seed);
        let ckpt = dir.join(CHECKPOINT);
        out.push(check(&ckpt, || {
            let net = read_checkpoint(&ckpt)?;
            if net.shape() != cfg.shape {
                return Err(CliError::artifact(&ckpt, "shape differs from the config"));
            }
            Ok(())
        }));
        let cache = dir.join(CACHE);
        out.push(check(&cache, || {
            let c = RetainCache::read(&cache)?;
            if c.num_inputs() != cfg.task.retain_train || c.num_layers() != cfg.shape.layers {
                return Err(CliError::artifact(&cache, "cache dimensions differ from the config"));
            }
            Ok(())
        }));
        let trace = dir.join(TRACE);
        out.push(check(&trace, || {
            let t = SelectionTrace::read(&trace)?;
            if t.len() != cfg.task.retain_test + cfg.task.forget_test {
                return Err(CliError::artifact(&trace, "trace does not cover the evaluation queries"));
            }
            Ok(())
        }));
        let rep = dir.join(PRETRAIN_REPORT);
        out.push(check(&rep, || read_json::<PretrainArtifact>(&rep).map(|_| ())));
        let sweep = dir.join(SWEEP_CSV);
        if sweep.exists() {
            out.push(check(&sweep, || check_csv(&sweep, &SWEEP_HEADER, Some(SWEEP_EPS.len()))));
        }
        let runs = dir.join(RUNS_DIR);
        for (o, e, path) in run_checkpoints(&runs)? {
            out.push(check(&path, || read_checkpoint(&path).map(|_| ()).map_err(Into::into)));
            let stem = runs.join(cell_stem(o, e));
            let json_path = stem.with_extension("json");
            out.push(check(&json_path, || {
                let a: RunArtifact = read_json(&json_path)?;
                if !a.report.is_well_formed() {
                    return Err(CliError::artifact(&json_path, "report has out-of-range metrics"));
                }
                Ok(())
            }));
            let csv_path = stem.with_extension("csv");
            out.push(check(&csv_path, || check_csv(&csv_path, &RunReport::CSV_HEADER, Some(1))));
        }
    }
    for (name, header) in [(UNLEARN_CSV, &RunReport::CSV_HEADER[..]), (SWEEP_CSV, &SWEEP_HEADER[..]), (ATTACK_CSV, &ATTACK_HEADER[..])] {
        let p = cfg.output_dir.join(name);
        if p.exists() {
            out.push(check(&p, || check_csv(&p, header, None)));
        }
    }
    Ok(out)
}

pub fn cmd_validate(ctx: &Ctx) -> Result<()> {
    let checks = validate_artifacts(&ctx.cfg)?;
    let mut bad = 0;
    for c in &checks {
        match &c.problem {
            None => println!("ok      {}", c.path.display()),
            Some(p) => {
                bad += 1;
                println!("INVALID {}: {p}", c.path.display());
            }
        }
    }
    println!("{} artifacts checked, {bad} invalid", checks.len());
    if bad > 0 {
        return Err(CliError::Failed(format!("{bad} invalid artifacts")));
    }
    Ok(())
}

fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = if v.len() > 1 { v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    (m, var.sqrt())
}

pub const SUMMARY_METRICS: [&str; 6] = ["rs", "rs_cached", "fa_post", "ra_post", "vulnerability", "machinery_flops"];

/// Aggregates the per-cell CSVs of every configured seed into
/// `summary.csv`: mean and sample standard deviation per
/// `(objective, enforcement)`.
pub fn cmd_report(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    let mut groups: BTreeMap<(usize, usize), Vec<Vec<f64>>> = BTreeMap::new();
    let mut files = 0;
    for &seed in &cfg.seeds {
        for (o, e, _) in run_checkpoints(&cfg.seed_dir(seed).join(RUNS_DIR))? {
            let path = cfg.seed_dir(seed).join(RUNS_DIR).join(cell_stem(o, e)).with_extension("csv");
            let (header, rows) = read_csv(&path)?;
            let idx: Vec<usize> = SUMMARY_METRICS
                .iter()
                .map(|m| header.iter().position(|h| h == m).ok_or_else(|| CliError::artifact(&path, format!("no column {m}"))))
                .collect::<Result<_>>()?;
            for row in rows {
                let vals = idx
                    .iter()
                    .map(|&i| row[i].parse::<f64>().map_err(|_| CliError::artifact(&path, format!("bad number '{}'", row[i]))))
                    .collect::<Result<Vec<f64>>>()?;
                let key = (
                    Objective::ALL.iter().position(|x| *x == o).unwrap_or(0),
                    Enforcement::ALL.iter().position(|x| *x == e).unwrap_or(0),
                );
                groups.entry(key).or_default().push(vals);
            }
            files += 1;
        }
    }
    if files == 0 {
        return Err(CliError::artifact(&cfg.output_dir, "no unlearning results; run `grip unlearn` first"));
    }
    let mut header = vec!["objective".to_string(), "enforcement".to_string(), "n".to_string()];
    for m in SUMMARY_METRICS {
        header.push(format!("{m}_mean"));
        header.push(format!("{m}_sd"));
    }
    let mut rows = Vec::new();
    println!("{:<4} {:<16} {:>3} {:>7} {:>9} {:>7} {:>7} {:>8}", "obj", "enforcement", "n", "RS", "cached", "FA", "RA", "vuln");
    for ((o, e), vals) in &groups {
        let (o, e) = (Objective::ALL[*o], Enforcement::ALL[*e]);
        let mut row = vec![o.to_string(), e.to_string(), vals.len().to_string()];
        let mut means = Vec::new();
        for k in 0..SUMMARY_METRICS.len() {
            let (m, sd) = mean_sd(&vals.iter().map(|v| v[k]).collect::<Vec<_>>());
            means.push(m);
            row.push(m.to_string());
            row.push(sd.to_string());
        }
        println!(
            "{:<4} {:<16} {:>3} {:>7.3} {:>9.3} {:>7.3} {:>7.3} {:>8.2}",
            o.name(), e.name(), vals.len(), means[0], means[1], means[2], means[3], means[4]
        );
        rows.push(row);
    }
    let header_refs: Vec<&str> = header.iter().map(String::as_str).collect();
    create_dir(&cfg.output_dir)?;
    write_csv(&cfg.output_dir.join(SUMMARY_CSV), &header_refs, &rows)
}
