use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::run_dir::RunDir;
use crate::analysis::{
    adjacent_generations, default_resample_step, export_uncertainty_map, filter_fraction, filter_threshold, histogram,
    knn_precision_recall, mean_pairwise_distance, quintile_groups, resample_variants, skip_consistency_report,
    spearman, stack_fields, write_histogram, write_pgm16, write_skip_report, UncertaintyTable, KNN_K,
};
use crate::continuous::{continuous_check, write_continuous_report, QuadratureConfig, QuadratureRule};
use crate::error::{Error, Result};
use crate::field::PixelField;
use crate::laplace::{fit_lastlayer, LaplacePosterior};
use crate::moments::{
    append_results, initial_latent, read_results, run_bayesdiff, AnalyticGammaTable, BayesDiffConfig, ResultRow,
    SamplerKind, SkipSchedule, TrajectoryRecord,
};
use crate::oracle::{verify_kind, write_report, AffineSetup, KindVerdict};
use crate::predictor::LastLayerPredictor;
use crate::schedule::NoiseSchedule;
use crate::score_model::{train_map, window_means, Dataset, ScoreNet};
use crate::seed::derive_seed;

/// Trains the MAP network, fits its last-layer posterior and writes the
/// checkpoint, posterior, dataset descriptor and loss curve.
pub fn cmd_train(cfg: &ExperimentConfig) -> Result<RunDir> {
    let dir = RunDir::open(cfg, true)?;
    let data = Dataset::from_descriptor(&cfg.dataset)?;
    let s = cfg.schedule.build()?;
    let init = ScoreNet::new(cfg.net.clone(), cfg.model_seed)?;
    let start = Instant::now();
    let out = train_map(&init, &data, &s, &cfg.train)?;
    let post = fit_lastlayer(&out.net, &data, &s, &cfg.laplace)?;
    out.net.save(&dir.checkpoint())?;
    post.save(&dir.posterior())?;
    fs::write(dir.dataset(), serde_json::to_string_pretty(data.descriptor())?)?;
    let mut file = fs::File::create(dir.losses())?;
    writeln!(file, "step,loss")?;
    for (i, l) in out.losses.iter().enumerate() {
        writeln!(file, "{i},{l:e}")?;
    }
    match window_means(&out.losses) {
        Some((first, last)) => println!(
            "trained {} steps in {:.1}s: loss {first:.4} -> {last:.4}",
            cfg.train.steps,
            start.elapsed().as_secs_f64()
        ),
        None => println!("trained {} steps", cfg.train.steps),
    }
    println!("wrote {}", dir.root().display());
    Ok(dir)
}

/// Trained artifacts of a run directory, checked against the config.
pub struct Loaded {
    pub dir: RunDir,
    pub net: ScoreNet,
    pub posterior: LaplacePosterior,
    pub schedule: NoiseSchedule,
}

impl Loaded {
    pub fn open(cfg: &ExperimentConfig) -> Result<Self> {
        let dir = RunDir::open(cfg, false)?;
        dir.require(&dir.checkpoint())?;
        dir.require(&dir.posterior())?;
        let net = ScoreNet::load(&dir.checkpoint())?;
        let posterior = LaplacePosterior::load(&dir.posterior())?;
        posterior.check_compatible(&net)?;
        let schedule = cfg.schedule.build()?;
        if net.shape() != cfg.dataset.shape {
            return Err(Error::ShapeMismatch { expected: cfg.dataset.shape.len(), got: net.dim() });
        }
        if net.config().time_scale != schedule.num_steps() as f64 {
            return Err(Error::Schedule(format!(
                "checkpoint was trained for {} steps, schedule has {}",
                net.config().time_scale,
                schedule.num_steps()
            )));
        }
        Ok(Self { dir, net, posterior, schedule })
    }

    pub fn predictor<'a>(&'a self, cfg: &ExperimentConfig) -> Result<LastLayerPredictor<'a>> {
        LastLayerPredictor::new(&self.net, &self.posterior, cfg.gamma)
    }
}

#[derive(Serialize, Deserialize)]
struct CachedTable {
    samples: usize,
    table: AnalyticGammaTable,
}

/// The Analytic-DPM Gamma table of the MAP network, estimated once and
/// cached in the run directory.
pub fn analytic_table(cfg: &ExperimentConfig, loaded: &Loaded) -> Result<AnalyticGammaTable> {
    let path = loaded.dir.analytic_table();
    if let Ok(text) = fs::read_to_string(&path) {
        let cached: CachedTable = serde_json::from_str(&text)?;
        if cached.samples == cfg.uq.analytic_samples && cached.table.values().len() == loaded.schedule.num_steps() {
            return Ok(cached.table);
        }
    }
    let data = Dataset::from_descriptor(&cfg.dataset)?;
    let seed = derive_seed(cfg.train.seed, "analytic-table", 0);
    let table = AnalyticGammaTable::estimate(&loaded.net, &data, &loaded.schedule, cfg.uq.analytic_samples, seed)?;
    let cached = CachedTable { samples: cfg.uq.analytic_samples, table };
    fs::write(&path, serde_json::to_string(&cached)?)?;
    Ok(cached.table)
}

/// The engine configuration for one sampler as configured, with seed 0;
/// generation `i` replaces the seed.
pub fn engine_config(
    cfg: &ExperimentConfig,
    loaded: &Loaded,
    kind: SamplerKind,
    mc_samples: usize,
    skip: usize,
) -> Result<BayesDiffConfig> {
    let mut run = BayesDiffConfig::new(kind, mc_samples, 0)
        .with_skip(SkipSchedule::interval(skip, loaded.schedule.num_steps())?)
        .with_scheme(cfg.uq.scheme)
        .with_var_init(cfg.uq.var_init);
    if kind == SamplerKind::AnalyticDpm {
        run = run.with_analytic(analytic_table(cfg, loaded)?);
    }
    Ok(run)
}

#[derive(Debug, Clone, Default)]
pub struct UqOptions {
    pub samplers: Option<Vec<SamplerKind>>,
    pub mc_samples: Option<usize>,
    pub skip: Option<usize>,
    pub n: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct UqSummary {
    pub kind: SamplerKind,
    pub skip_desc: String,
    pub rows: Vec<ResultRow>,
    pub mean: f64,
    pub std: f64,
    pub skewness: f64,
    pub seconds: f64,
}

/// Runs BayesDiff for `n` seeds per sampler, appends result rows and saves
/// every trajectory.
pub fn cmd_uq(cfg: &ExperimentConfig, opts: &UqOptions) -> Result<Vec<UqSummary>> {
    let loaded = Loaded::open(cfg)?;
    let pred = loaded.predictor(cfg)?;
    let samplers = opts.samplers.clone().unwrap_or_else(|| cfg.uq.samplers.clone());
    let mc_samples = opts.mc_samples.unwrap_or(cfg.uq.mc_samples);
    let skip = opts.skip.unwrap_or(cfg.uq.skip);
    let n = opts.n.unwrap_or(cfg.uq.n);
    if mc_samples == 0 || n == 0 {
        return Err(Error::InvalidArgument("--s and --n must be at least 1".into()));
    }
    let shape = cfg.dataset.shape;
    let mut summaries = Vec::new();
    for kind in samplers {
        let run = engine_config(cfg, &loaded, kind, mc_samples, skip)?;
        let skip_desc = run.skip.as_ref().map(SkipSchedule::describe).unwrap_or_default();
        let start = Instant::now();
        let rows = (0..n)
            .into_par_iter()
            .map(|i| {
                let seed = cfg.uq.seed + i as u64;
                let (res, traj) = run_bayesdiff(
                    &initial_latent(shape, seed),
                    &pred,
                    &loaded.schedule,
                    &BayesDiffConfig { seed, ..run.clone() },
                )?;
                traj.save(&loaded.dir.trajectory(kind, &skip_desc, mc_samples, seed))?;
                Ok(ResultRow {
                    run_id: i,
                    seed,
                    kind,
                    mc_samples,
                    skip_desc: skip_desc.clone(),
                    image_uncertainty: res.image_uncertainty,
                    nfe_count: res.nfe_count,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let seconds = start.elapsed().as_secs_f64();
        append_results(&loaded.dir.results(), &rows)?;
        let table = UncertaintyTable::new(rows.clone())?;
        println!(
            "{kind} {skip_desc} S={mc_samples}: {n} runs in {seconds:.2}s, image uncertainty mean {:.6e} std {:.6e} skewness {:.4}",
            table.mean(),
            table.std(),
            table.skewness()
        );
        summaries.push(UqSummary {
            kind,
            skip_desc,
            mean: table.mean(),
            std: table.std(),
            skewness: table.skewness(),
            rows,
            seconds,
        });
    }
    Ok(summaries)
}

#[derive(Debug, Clone, Default)]
pub struct VerifyOptions {
    pub only: Option<SamplerKind>,
    pub tolerance: Option<f64>,
}

/// Three-way check of the engine on a few-pixel affine model; the report
/// lands in `reports/verify.csv` when the output directory exists.
pub fn cmd_verify(cfg: &ExperimentConfig, opts: &VerifyOptions) -> Result<Vec<KindVerdict>> {
    let v = &cfg.verify;
    let tolerance = opts.tolerance.unwrap_or(v.tolerance);
    let setup = AffineSetup::new(v.pixels, v.steps)?;
    let kinds: Vec<SamplerKind> = match opts.only {
        Some(k) => vec![k],
        None => SamplerKind::ALL.to_vec(),
    };
    let mut verdicts = Vec::new();
    for kind in kinds {
        let verdict = verify_kind(&setup, kind, v.mc_samples, v.ensemble, tolerance, v.seed)?;
        println!(
            "{} {kind}: closed-form rel {:.2e} (<= {:.0e}), max |z| mean {:.2} var {:.2} (<= {tolerance})",
            if verdict.passed() { "PASS" } else { "FAIL" },
            verdict.closed_form_rel,
            crate::oracle::CLOSED_FORM_RTOL,
            verdict.max_z_mean,
            verdict.max_z_var,
        );
        verdicts.push(verdict);
    }
    let dir = cfg.output_dir.join("reports");
    fs::create_dir_all(&dir)?;
    let rows: Vec<_> = verdicts.iter().flat_map(|v| v.rows.clone()).collect();
    write_report(&dir.join("verify.csv"), &rows)?;
    Ok(verdicts)
}

/// Which stored runs a report reads.
#[derive(Debug, Clone, Default)]
pub struct Selection {
    pub sampler: Option<SamplerKind>,
    pub skip: Option<usize>,
    pub mc_samples: Option<usize>,
}

/// Result rows of the selected (sampler, skip, S) combination; repeated
/// seeds from reruns collapse to their last row.
pub fn select_rows(cfg: &ExperimentConfig, dir: &RunDir, sel: &Selection) -> Result<Vec<ResultRow>> {
    dir.require(&dir.results())?;
    let kind = sel.sampler.unwrap_or(cfg.uq.samplers[0]);
    let mc = sel.mc_samples.unwrap_or(cfg.uq.mc_samples);
    let skip = SkipSchedule::interval(sel.skip.unwrap_or(cfg.uq.skip), cfg.schedule.steps())?.describe();
    let mut by_seed = BTreeMap::new();
    for row in read_results(&dir.results())? {
        if row.kind == kind && row.mc_samples == mc && row.skip_desc == skip {
            by_seed.insert(row.seed, row);
        }
    }
    let mut rows: Vec<ResultRow> = by_seed.into_values().collect();
    rows.sort_by_key(|r| r.run_id);
    if rows.is_empty() {
        return Err(Error::MissingInput(format!(
            "no results for {kind} {skip} S={mc} in {} (run `uq` first)",
            dir.results().display()
        )));
    }
    Ok(rows)
}

fn final_sample(dir: &RunDir, row: &ResultRow) -> Result<(PixelField, PixelField)> {
    let path = dir.trajectory_of(row);
    dir.require(&path)?;
    let traj = TrajectoryRecord::load(&path)?;
    let last = traj.state_at(0)?;
    Ok((last.sample.clone(), last.var.clone()))
}

#[derive(Debug, Clone)]
pub enum ReportCommand {
    Filter { fraction: Option<f64>, bins: usize },
    Quintiles,
    SkipConsistency { intervals: Vec<usize>, seeds: usize },
    Resample { run_id: usize, t_star: Option<usize>, n: usize },
    Adjacent { seeds: usize, eta: f64, n: usize },
    ContinuousCheck { intervals: Vec<(usize, usize)>, run_id: usize, rule: QuadratureRule },
}

/// Runs one report and returns the files it wrote.
pub fn cmd_report(cfg: &ExperimentConfig, sel: &Selection, cmd: &ReportCommand) -> Result<Vec<PathBuf>> {
    match cmd {
        ReportCommand::Filter { fraction, bins } => report_filter(cfg, sel, *fraction, *bins),
        ReportCommand::Quintiles => report_quintiles(cfg, sel),
        ReportCommand::SkipConsistency { intervals, seeds } => report_skip(cfg, sel, intervals, *seeds),
        ReportCommand::Resample { run_id, t_star, n } => report_resample(cfg, sel, *run_id, *t_star, *n),
        ReportCommand::Adjacent { seeds, eta, n } => report_adjacent(cfg, sel, *seeds, *eta, *n),
        ReportCommand::ContinuousCheck { intervals, run_id, rule } => {
            report_continuous(cfg, sel, intervals, *run_id, *rule)
        }
    }
}

fn report_filter(cfg: &ExperimentConfig, sel: &Selection, fraction: Option<f64>, bins: usize) -> Result<Vec<PathBuf>> {
    let dir = RunDir::open(cfg, false)?;
    let table = UncertaintyTable::new(select_rows(cfg, &dir, sel)?)?;
    let outcome = match fraction {
        Some(f) => filter_fraction(&table, f)?,
        None => filter_threshold(&table)?,
    };
    let reports = dir.reports()?;
    let path = reports.join("filter.csv");
    let mut file = fs::File::create(&path)?;
    writeln!(file, "run_id,seed,image_uncertainty,kept")?;
    for (rows, kept) in [(&outcome.kept, true), (&outcome.removed, false)] {
        for r in rows {
            writeln!(file, "{},{},{:e},{kept}", r.run_id, r.seed, r.image_uncertainty)?;
        }
    }
    let hist_path = reports.join("histogram.csv");
    write_histogram(&hist_path, &histogram(&table.scores(), bins)?)?;
    println!(
        "{} rows: mean {:.6e} std {:.6e} skewness {:.4}; threshold {:.6e} keeps {:.1}% ({} removed)",
        table.len(),
        table.mean(),
        table.std(),
        table.skewness(),
        outcome.threshold,
        100.0 * outcome.kept_fraction(),
        outcome.removed.len()
    );
    Ok(vec![path, hist_path])
}

fn report_quintiles(cfg: &ExperimentConfig, sel: &Selection) -> Result<Vec<PathBuf>> {
    let dir = RunDir::open(cfg, false)?;
    let table = UncertaintyTable::new(select_rows(cfg, &dir, sel)?)?;
    let q = quintile_groups(&table);
    let data = Dataset::from_descriptor(&cfg.dataset)?;
    let path = dir.reports()?.join("quintiles.csv");
    let mut file = fs::File::create(&path)?;
    writeln!(file, "group,count,mean_uncertainty,precision,recall")?;
    for (g, rows) in q.groups.iter().enumerate() {
        let samples = rows.iter().map(|r| final_sample(&dir, r).map(|(x, _)| x)).collect::<Result<Vec<_>>>()?;
        let gen = stack_fields(&samples)?;
        let k = KNN_K.min(rows.len().saturating_sub(1)).max(1);
        let (p, r) = knn_precision_recall(data.samples().view(), gen.view(), k)?;
        let mean = rows.iter().map(|r| r.image_uncertainty).sum::<f64>() / rows.len() as f64;
        writeln!(file, "{g},{},{mean:e},{p:.6},{r:.6}", rows.len())?;
        println!("group {g} (n={}): mean uncertainty {mean:.6e} precision {p:.4} recall {r:.4}", rows.len());
    }
    if q.remainder > 0 {
        println!("{} remainder rows assigned to the last group", q.remainder);
    }
    Ok(vec![path])
}

fn report_skip(cfg: &ExperimentConfig, sel: &Selection, intervals: &[usize], seeds: usize) -> Result<Vec<PathBuf>> {
    let loaded = Loaded::open(cfg)?;
    let pred = loaded.predictor(cfg)?;
    let kind = sel.sampler.unwrap_or(cfg.uq.samplers[0]);
    let mc = sel.mc_samples.unwrap_or(cfg.uq.mc_samples);
    let run = engine_config(cfg, &loaded, kind, mc, 0)?;
    let seed_list: Vec<u64> = (0..seeds as u64).map(|i| cfg.uq.seed + i).collect();
    let rows = skip_consistency_report(&seed_list, cfg.dataset.shape, intervals, &pred, &loaded.schedule, &run)?;
    let path = loaded.dir.reports()?.join("skip_consistency.csv");
    write_skip_report(&path, &rows)?;
    for r in &rows {
        println!(
            "interval {}: spearman {:.4} top-9 {} bottom-9 {} nfe {} (formula {}) {:.2}s",
            r.interval, r.spearman, r.top_overlap, r.bottom_overlap, r.nfe_per_run, r.expected_nfe, r.seconds
        );
    }
    Ok(vec![path])
}

fn report_resample(
    cfg: &ExperimentConfig,
    sel: &Selection,
    run_id: usize,
    t_star: Option<usize>,
    n: usize,
) -> Result<Vec<PathBuf>> {
    let loaded = Loaded::open(cfg)?;
    let rows = select_rows(cfg, &loaded.dir, sel)?;
    let row = rows
        .iter()
        .find(|r| r.run_id == run_id)
        .ok_or_else(|| Error::MissingInput(format!("run_id {run_id} in the selected results")))?;
    let path = loaded.dir.trajectory_of(row);
    loaded.dir.require(&path)?;
    let traj = TrajectoryRecord::load(&path)?;
    let t_star = t_star.unwrap_or_else(|| default_resample_step(loaded.schedule.num_steps()));
    let analytic = (row.kind == SamplerKind::AnalyticDpm).then(|| analytic_table(cfg, &loaded)).transpose()?;
    let variants = resample_variants(
        &traj,
        t_star,
        n,
        &loaded.net,
        &loaded.schedule,
        row.kind,
        derive_seed(row.seed, "resample-report", 0),
        analytic.as_ref(),
    )?;
    let out = loaded.dir.reports()?.join(format!("resample_run{run_id}"));
    fs::create_dir_all(&out)?;
    let original = traj.state_at(0)?;
    export_uncertainty_map(&out.join("uncertainty.pgm"), &original.var)?;
    write_pgm16(&out.join("original.pgm"), &original.sample)?;
    let csv = out.join("variants.csv");
    let mut file = fs::File::create(&csv)?;
    writeln!(file, "variant,distance_to_original")?;
    for (i, v) in variants.iter().enumerate() {
        write_pgm16(&out.join(format!("variant{i}.pgm")), v)?;
        let d = v.data() - original.sample.data();
        writeln!(file, "{i},{:e}", d.dot(&d).sqrt())?;
    }
    println!(
        "{n} variants of run {run_id} from t = {t_star}: mean pairwise distance {:.6e}",
        mean_pairwise_distance(&variants)
    );
    Ok(vec![out])
}

fn report_adjacent(cfg: &ExperimentConfig, sel: &Selection, seeds: usize, eta: f64, n: usize) -> Result<Vec<PathBuf>> {
    let loaded = Loaded::open(cfg)?;
    let pred = loaded.predictor(cfg)?;
    let kind = sel.sampler.unwrap_or(cfg.uq.samplers[0]);
    let mc = sel.mc_samples.unwrap_or(cfg.uq.mc_samples);
    let run = engine_config(cfg, &loaded, kind, mc, sel.skip.unwrap_or(cfg.uq.skip))?;
    let shape = cfg.dataset.shape;
    let rows = (0..seeds as u64)
        .into_par_iter()
        .map(|i| {
            let seed = cfg.uq.seed + i;
            let x_t = initial_latent(shape, seed);
            let (res, _) = run_bayesdiff(&x_t, &pred, &loaded.schedule, &BayesDiffConfig { seed, ..run.clone() })?;
            let variants = adjacent_generations(
                &x_t,
                eta,
                n,
                &loaded.net,
                &loaded.schedule,
                kind,
                derive_seed(seed, "adjacent-report", 0),
                run.analytic.as_ref(),
            )?;
            Ok((seed, res.image_uncertainty, mean_pairwise_distance(&variants)))
        })
        .collect::<Result<Vec<_>>>()?;
    let path = loaded.dir.reports()?.join("adjacent.csv");
    let mut file = fs::File::create(&path)?;
    writeln!(file, "seed,image_uncertainty,variant_spread")?;
    for (seed, u, d) in &rows {
        writeln!(file, "{seed},{u:e},{d:e}")?;
    }
    let us: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let ds: Vec<f64> = rows.iter().map(|r| r.2).collect();
    println!("{seeds} base seeds, eta {eta}: spearman(uncertainty, spread) = {:.4}", spearman(&us, &ds)?);
    Ok(vec![path])
}

fn report_continuous(
    cfg: &ExperimentConfig,
    sel: &Selection,
    intervals: &[(usize, usize)],
    run_id: usize,
    rule: QuadratureRule,
) -> Result<Vec<PathBuf>> {
    let dir = RunDir::open(cfg, false)?;
    let rows = select_rows(cfg, &dir, sel)?;
    let row = rows
        .iter()
        .find(|r| r.run_id == run_id)
        .ok_or_else(|| Error::MissingInput(format!("run_id {run_id} in the selected results")))?;
    let path = dir.trajectory_of(row);
    dir.require(&path)?;
    let traj = TrajectoryRecord::load(&path)?;
    let s = cfg.schedule.build()?;
    let out = continuous_check(&traj, &s, &QuadratureConfig { rule }, intervals)?;
    let csv = dir.reports()?.join("continuous.csv");
    write_continuous_report(&csv, &out)?;
    for r in &out {
        println!("[{}, {}] {}: relative l2 gap {:.4e}", r.i, r.j, r.rule.name(), r.l2_rel_gap);
    }
    Ok(vec![csv])
}
