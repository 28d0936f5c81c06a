use std::path::{Path, PathBuf};
use std::time::Instant;

use mpa_autodiff::{Real, Tensor};
use rayon::prelude::*;

use super::config::{AblationFlags, ExperimentConfig, Precision};
use super::metrics::{column_means, fg_iou, mean_std};
use super::report::{
    AblationTable, CellResult, EpisodeResult, EpisodeStatus, PrelimTables, Report, Summary, Verdict, SCHEMA_VERSION,
};
use super::svg::{line_chart, Series};
use crate::dmp::{adapt_episode, infer, sequential_predictions, AdaptConfig, AdaptationLog, Episode, Sample};
use crate::encoder::{init_encoder, EncoderParams};
use crate::error::{MpaError, Result};
use crate::hpa::{build_chain, generate_views, AugStrategy};
use crate::synthbench::{gen_sample, mix, sample_episode, write_image_png, write_mask_png, DomainSpec};

/// Largest tolerated rise of IoU (points) from one level or position to the next.
pub const ORDER_TOLERANCE: f64 = 1.0;
/// Required mIoU gap between consecutive ablation stages.
pub const STAGE_GAP: f64 = 1.0;
/// Required margin of the progressive strategy over each fixed strategy.
pub const PROGRESSIVE_MARGIN: f64 = 0.5;
/// Sequential-chain positions compared against each other.
pub const CHAIN_POSITIONS: [usize; 3] = [1, 3, 6];

/// Seed of episode `index` under run seed `seed`.
pub fn episode_seed(seed: u64, index: usize) -> u64 {
    mix(seed, index as u64)
}

#[derive(Clone, Debug)]
struct Job {
    seed: u64,
    index: usize,
    spec: DomainSpec,
    category: u32,
}

fn jobs(cfg: &ExperimentConfig) -> Result<Vec<Job>> {
    let specs = cfg.domain_specs()?;
    let mut out = Vec::with_capacity(cfg.seeds.len() * cfg.episodes);
    for &seed in &cfg.seeds {
        for index in 0..cfg.episodes {
            out.push(Job {
                seed,
                index,
                spec: specs[index % specs.len()].clone(),
                category: (index as u32) % cfg.categories,
            });
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default)]
struct Extras {
    levels: bool,
    sequential: bool,
}

struct Preview {
    support: Sample,
    query: Sample,
    pred: Tensor<f64>,
}

struct Outcome {
    result: EpisodeResult,
    log: AdaptationLog,
    level_iou: Vec<Option<f64>>,
    seq_iou: Vec<Option<f64>>,
    preview: Option<Preview>,
}

fn query_seed(episode_seed: u64, q: usize) -> u64 {
    mix(episode_seed, 0x0071_e4e5 + q as u64)
}

/// IoU × 100 of support→view predictions per augmentation level, averaged over queries.
fn level_table<T: Real>(p: &EncoderParams<T>, ep: &Episode, eseed: u64, cfg: &AdaptConfig) -> Result<Vec<f64>> {
    let n = cfg.hpa.n_max;
    let mut acc = vec![0.0; n];
    for (qi, q) in ep.eval_queries.iter().enumerate() {
        let seed = query_seed(eseed, qi);
        for (level, slot) in acc.iter_mut().enumerate() {
            let (image, mask) = build_chain(level + 1, seed, &cfg.hpa)?.apply(&q.image, &q.mask)?;
            let pred = infer(p, &ep.supports, &image, cfg.temperature, &cfg.ssp)?;
            *slot += fg_iou(&pred.hard, &mask)?;
        }
    }
    Ok(acc.iter().map(|v| 100.0 * v / ep.eval_queries.len() as f64).collect())
}

/// IoU × 100 at each position of a sequential chain over cumulative views of each query.
fn sequential_table<T: Real>(p: &EncoderParams<T>, ep: &Episode, eseed: u64, cfg: &AdaptConfig) -> Result<Vec<f64>> {
    let n = cfg.hpa.n_max;
    let mut acc = vec![0.0; n];
    for (qi, q) in ep.eval_queries.iter().enumerate() {
        let views = generate_views(&q.image, &q.mask, n, query_seed(eseed, qi), &cfg.hpa)?;
        let samples: Vec<Sample> =
            views.views.into_iter().map(|v| Sample { image: v.image, mask: v.mask }).collect();
        let preds = sequential_predictions(p, &ep.supports, &samples, cfg.temperature, &cfg.ssp)?;
        for ((slot, pred), s) in acc.iter_mut().zip(&preds).zip(&samples) {
            *slot += fg_iou(pred, &s.mask)?;
        }
    }
    Ok(acc.iter().map(|v| 100.0 * v / ep.eval_queries.len() as f64).collect())
}

fn run_job<T: Real>(job: &Job, cfg: &ExperimentConfig, adapt: &AdaptConfig, extras: Extras) -> Outcome {
    let eseed = episode_seed(job.seed, job.index);
    let mut result = EpisodeResult {
        seed: job.seed,
        index: job.index,
        domain: job.spec.name.clone(),
        category_id: job.category,
        status: EpisodeStatus::Failed,
        error: None,
        query_iou: Vec::new(),
        iou: None,
        final_n: 0,
        final_loss: None,
        fallbacks: 0,
    };
    let mut outcome = Outcome {
        result: result.clone(),
        log: AdaptationLog::default(),
        level_iou: Vec::new(),
        seq_iou: Vec::new(),
        preview: None,
    };
    let attempt = || -> Result<Outcome> {
        let ep = sample_episode(&job.spec, job.category, cfg.k_shot, cfg.n_eval, eseed)?;
        let enc = init_encoder::<T>(mix(eseed, 0x000e_4c0d), &cfg.encoder)?;
        let (params, log) = adapt_episode(&ep, &enc, adapt, eseed)?;
        let mut ious = Vec::with_capacity(ep.eval_queries.len());
        let mut first_pred = None;
        for q in &ep.eval_queries {
            let pred = infer(&params, &ep.supports, &q.image, adapt.temperature, &adapt.ssp)?;
            ious.push(fg_iou(&pred.hard, &q.mask)?);
            first_pred.get_or_insert(pred.hard);
        }
        let mut r = result.clone();
        r.status = EpisodeStatus::Ok;
        r.iou = Some(ious.iter().sum::<f64>() / ious.len() as f64);
        r.query_iou = ious;
        r.final_n = log.records.last().map_or(1, |l| l.current_n);
        r.final_loss = log.records.last().map(|l| l.breakdown.total);
        r.fallbacks = log.records.iter().map(|l| l.fallbacks).sum();
        let level_iou = if extras.levels { level_table(&params, &ep, eseed, adapt)? } else { Vec::new() };
        let seq_iou = if extras.sequential { sequential_table(&params, &ep, eseed, adapt)? } else { Vec::new() };
        Ok(Outcome {
            result: r,
            log,
            level_iou: level_iou.into_iter().map(Some).collect(),
            seq_iou: seq_iou.into_iter().map(Some).collect(),
            preview: first_pred.map(|pred| Preview {
                support: ep.supports[0].clone(),
                query: ep.eval_queries[0].clone(),
                pred,
            }),
        })
    };
    match attempt() {
        Ok(o) => o,
        Err(e) => {
            result.error = Some(e.to_string());
            outcome.result = result;
            outcome
        }
    }
}

fn run_jobs(cfg: &ExperimentConfig, adapt: &AdaptConfig, extras: Extras) -> Result<Vec<Outcome>> {
    let jobs = jobs(cfg)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| MpaError::config(format!("cannot start {} workers: {e}", cfg.workers)))?;
    Ok(pool.install(|| {
        jobs.par_iter()
            .map(|job| match cfg.precision {
                Precision::F32 => run_job::<f32>(job, cfg, adapt, extras),
                Precision::F64 => run_job::<f64>(job, cfg, adapt, extras),
            })
            .collect()
    }))
}

fn summarise(outcomes: &[Outcome]) -> Summary {
    let ious: Vec<f64> = outcomes.iter().filter_map(|o| o.result.iou).map(|v| 100.0 * v).collect();
    let (miou_mean, miou_std) = mean_std(&ious);
    Summary { miou_mean, miou_std, episodes_ok: ious.len(), episodes_failed: outcomes.len() - ious.len() }
}

fn epoch_means(outcomes: &[Outcome], f: impl Fn(&crate::dmp::EpochRecord) -> f64) -> Vec<f64> {
    let logs: Vec<&AdaptationLog> =
        outcomes.iter().filter(|o| o.result.status == EpisodeStatus::Ok).map(|o| &o.log).collect();
    let len = logs.iter().map(|l| l.records.len()).max().unwrap_or(0);
    (0..len)
        .map(|e| {
            let vals: Vec<f64> = logs.iter().filter_map(|l| l.records.get(e)).map(&f).collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        })
        .collect()
}

fn base_report(command: &str, cfg: &ExperimentConfig, outcomes: &[Outcome]) -> Report {
    let n_max = cfg.hpa.n_max;
    let level_rows: Vec<Vec<Option<f64>>> = outcomes.iter().map(|o| o.level_iou.clone()).collect();
    Report {
        schema_version: SCHEMA_VERSION,
        command: command.to_string(),
        config: cfg.clone(),
        summary: summarise(outcomes),
        episodes: outcomes.iter().map(|o| o.result.clone()).collect(),
        per_view_iou: column_means(&level_rows, n_max),
        loss_curve: epoch_means(outcomes, |r| r.breakdown.total),
        scheduler_trace: epoch_means(outcomes, |r| r.current_n as f64),
        prelim: None,
        ablation: None,
        wall_clock_seconds: 0.0,
    }
}

fn write_outputs(report: &Report, outcomes: &[Outcome], cfg: &ExperimentConfig) -> Result<()> {
    let Some(dir) = &cfg.output_dir else { return Ok(()) };
    report.write(dir)?;
    let curves = dir.join("curves");
    std::fs::create_dir_all(&curves)?;
    std::fs::write(
        curves.join("loss.svg"),
        line_chart("mean total loss per epoch", &[Series { label: "total", values: &report.loss_curve }]),
    )?;
    std::fs::write(
        curves.join("views.svg"),
        line_chart("mean active views per epoch", &[Series { label: "N", values: &report.scheduler_trace }]),
    )?;
    let nan = |v: &[Option<f64>]| v.iter().map(|x| x.unwrap_or(f64::NAN)).collect::<Vec<_>>();
    if let Some(p) = &report.prelim {
        let (a, b) = (nan(&p.level_iou), nan(&p.sequential_iou));
        std::fs::write(
            curves.join("prelim.svg"),
            line_chart(
                "IoU by augmentation level and chain position",
                &[Series { label: "level", values: &a }, Series { label: "sequential position", values: &b }],
            ),
        )?;
    }
    if let Some(t) = &report.ablation {
        let per_seed: Vec<(String, Vec<f64>)> = t.cells.iter().map(|c| (c.name.clone(), c.per_seed_miou.clone())).collect();
        let series: Vec<Series> = per_seed.iter().map(|(n, v)| Series { label: n, values: v }).collect();
        std::fs::write(curves.join("ablation.svg"), line_chart("mIoU per seed by cell", &series))?;
    }
    let logs = dir.join("logs");
    std::fs::create_dir_all(&logs)?;
    for o in outcomes.iter().filter(|o| !o.log.records.is_empty()) {
        std::fs::write(logs.join(format!("s{}_e{}.jsonl", o.result.seed, o.result.index)), o.log.to_jsonl()?)?;
    }
    let samples = dir.join("samples");
    std::fs::create_dir_all(&samples)?;
    for o in outcomes.iter().filter(|o| o.preview.is_some()).take(cfg.sample_pngs) {
        let p = o.preview.as_ref().expect("filtered");
        let stem = format!("s{}_e{}", o.result.seed, o.result.index);
        write_image_png(&samples.join(format!("{stem}_support.png")), &p.support.image)?;
        write_mask_png(&samples.join(format!("{stem}_support_mask.png")), &p.support.mask)?;
        write_image_png(&samples.join(format!("{stem}_query.png")), &p.query.image)?;
        write_mask_png(&samples.join(format!("{stem}_query_mask.png")), &p.query.mask)?;
        write_mask_png(&samples.join(format!("{stem}_pred.png")), &p.pred)?;
    }
    Ok(())
}

/// Adapts on every episode and evaluates on its held-out queries.
pub fn run_adaptation(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let start = Instant::now();
    let outcomes = run_jobs(cfg, &cfg.adapt_config(), Extras { levels: true, sequential: false })?;
    let mut report = base_report("adapt", cfg, &outcomes);
    report.wall_clock_seconds = start.elapsed().as_secs_f64();
    write_outputs(&report, &outcomes, cfg)?;
    Ok(report)
}

/// Inference only: the initial encoder's mIoU (no adaptation epochs).
pub fn run_evaluation(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let start = Instant::now();
    let mut adapt = cfg.adapt_config();
    adapt.max_epochs = 0;
    let outcomes = run_jobs(cfg, &adapt, Extras { levels: true, sequential: false })?;
    let mut report = base_report("eval", cfg, &outcomes);
    report.wall_clock_seconds = start.elapsed().as_secs_f64();
    write_outputs(&report, &outcomes, cfg)?;
    Ok(report)
}

/// Non-increasing within `tol`: no step rises by more than `tol`.
fn non_increasing(values: &[f64], tol: f64) -> bool {
    values.windows(2).all(|w| w[1] <= w[0] + tol)
}

fn describe(values: &[f64]) -> String {
    values.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>().join(" → ")
}

/// Level-wise and chain-position IoU tables on adapted models.
pub fn run_preliminary_tables(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let start = Instant::now();
    let outcomes = run_jobs(cfg, &cfg.adapt_config(), Extras { levels: true, sequential: true })?;
    let n_max = cfg.hpa.n_max;
    let mut report = base_report("prelim", cfg, &outcomes);
    let seq_rows: Vec<Vec<Option<f64>>> = outcomes.iter().map(|o| o.seq_iou.clone()).collect();
    let level_iou = report.per_view_iou.clone();
    let sequential_iou = column_means(&seq_rows, n_max);
    let positions: Vec<usize> = CHAIN_POSITIONS.iter().copied().filter(|&p| p <= n_max).collect();

    let levels: Vec<f64> = level_iou.iter().flatten().copied().collect();
    let chain: Vec<f64> = positions.iter().filter_map(|&p| sequential_iou[p - 1]).collect();
    let verdicts = vec![
        Verdict {
            name: "level_iou_non_increasing".into(),
            detail: format!("{} (rise tolerance {ORDER_TOLERANCE})", describe(&levels)),
            pass: levels.len() == n_max && non_increasing(&levels, ORDER_TOLERANCE),
        },
        Verdict {
            name: "sequential_iou_ordering".into(),
            detail: format!("positions {positions:?}: {} (rise tolerance {ORDER_TOLERANCE})", describe(&chain)),
            pass: chain.len() == positions.len() && non_increasing(&chain, ORDER_TOLERANCE),
        },
    ];
    report.prelim = Some(PrelimTables { level_iou, sequential_iou, positions, verdicts });
    report.wall_clock_seconds = start.elapsed().as_secs_f64();
    write_outputs(&report, &outcomes, cfg)?;
    Ok(report)
}

/// Named method variants compared by [`run_ablations`].
pub fn ablation_cells() -> Vec<(&'static str, &'static str, AblationFlags)> {
    let full = AblationFlags::default();
    vec![
        (
            "baseline",
            "parallel chain, one fixed simple view",
            AblationFlags { hpa_on: false, dmp_sequential_on: false, ..full },
        ),
        (
            "hpa",
            "one view whose augmentation level grows, parallel chain only",
            AblationFlags { dmp_sequential_on: false, progressive_on: false, fixed_views: 1, ..full },
        ),
        (
            "hpa_multi",
            "progressive cumulative views, parallel chain only",
            AblationFlags { dmp_sequential_on: false, ..full },
        ),
        ("full", "progressive cumulative views, both chains", full),
        (
            "always_one",
            "one view whose augmentation level grows, both chains",
            AblationFlags { progressive_on: false, fixed_views: 1, ..full },
        ),
        ("always_simple", "progressive view count, one simple op per view", AblationFlags { strategy: AugStrategy::Simple, ..full }),
        (
            "replacement",
            "progressive view count, only the newest ladder op per view",
            AblationFlags { strategy: AugStrategy::Replacement, ..full },
        ),
    ]
}

fn ordering_verdicts(table: &[CellResult]) -> Vec<Verdict> {
    let m = |name: &str| table.iter().find(|c| c.name == name).map_or(f64::NAN, |c| c.miou_mean);
    let (base, hpa, full) = (m("baseline"), m("hpa"), m("full"));
    let (one, simple, repl) = (m("always_one"), m("always_simple"), m("replacement"));
    vec![
        Verdict {
            name: "baseline_lt_hpa_lt_full".into(),
            detail: format!("{base:.2} < {hpa:.2} < {full:.2} (gap ≥ {STAGE_GAP})"),
            pass: hpa - base >= STAGE_GAP && full - hpa >= STAGE_GAP,
        },
        Verdict {
            name: "progressive_beats_fixed".into(),
            detail: format!(
                "progressive {full:.2} vs always-one {one:.2} and always-simple {simple:.2} (margin ≥ {PROGRESSIVE_MARGIN})"
            ),
            pass: full - one >= PROGRESSIVE_MARGIN && full - simple >= PROGRESSIVE_MARGIN,
        },
        Verdict {
            name: "cumulative_ge_replacement_ge_simple".into(),
            detail: format!("{full:.2} ≥ {repl:.2} ≥ {simple:.2}"),
            pass: full >= repl && repl >= simple,
        },
    ]
}

/// Runs every cell of [`ablation_cells`] on the same episodes and seeds.
pub fn run_ablations(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let start = Instant::now();
    let mut cells = Vec::new();
    let mut full_outcomes = Vec::new();
    for (name, description, flags) in ablation_cells() {
        let cell_cfg = ExperimentConfig { flags, ..cfg.clone() };
        let outcomes = run_jobs(&cell_cfg, &cell_cfg.adapt_config(), Extras::default())?;
        let per_seed_miou: Vec<f64> = cfg
            .seeds
            .iter()
            .map(|&s| {
                let v: Vec<f64> = outcomes.iter().filter(|o| o.result.seed == s).filter_map(|o| o.result.iou).collect();
                100.0 * mean_std(&v).0
            })
            .collect();
        let summary = summarise(&outcomes);
        cells.push(CellResult {
            name: name.into(),
            description: description.into(),
            flags,
            miou_mean: summary.miou_mean,
            miou_std: mean_std(&per_seed_miou).1,
            per_seed_miou,
            episodes_failed: summary.episodes_failed,
            episodes: outcomes.iter().map(|o| o.result.clone()).collect(),
        });
        if name == "full" {
            full_outcomes = outcomes;
        }
    }
    let mut report = base_report("ablate", cfg, &full_outcomes);
    let verdicts = ordering_verdicts(&cells);
    report.ablation = Some(AblationTable { cells, verdicts });
    report.wall_clock_seconds = start.elapsed().as_secs_f64();
    write_outputs(&report, &full_outcomes, cfg)?;
    Ok(report)
}

/// Writes each configured domain's spec and a few samples; returns the files written.
pub fn generate_data(cfg: &ExperimentConfig, dir: &Path, per_domain: usize) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let mut written = Vec::new();
    let domains = dir.join("domains");
    let samples = dir.join("samples");
    std::fs::create_dir_all(&domains)?;
    std::fs::create_dir_all(&samples)?;
    for spec in cfg.domain_specs()? {
        let path = domains.join(format!("{}.json", spec.name));
        std::fs::write(&path, spec.to_json()?)?;
        written.push(path);
        for i in 0..per_domain {
            let seed = cfg.seeds[0];
            let s = gen_sample(&spec, (i as u32) % cfg.categories, mix(seed, i as u64))?;
            for (suffix, is_mask) in [("image", false), ("mask", true)] {
                let path = samples.join(format!("{}_{i}_{suffix}.png", spec.name));
                if is_mask {
                    write_mask_png(&path, &s.mask)?;
                } else {
                    write_image_png(&path, &s.image)?;
                }
                written.push(path);
            }
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn tiny() -> ExperimentConfig {
        let mut c = ExperimentConfig {
            episodes: 2,
            n_eval: 2,
            encoder: EncoderConfig { widths: vec![8, 8], strides: vec![2, 1], ..Default::default() },
            ..Default::default()
        };
        c.dmp.max_epochs = 3;
        c
    }

    #[test]
    fn non_increasing_respects_tolerance() {
        assert!(non_increasing(&[50.0, 50.9, 49.0], 1.0));
        assert!(!non_increasing(&[50.0, 51.5], 1.0));
    }

    #[test]
    fn adaptation_report_is_complete_and_deterministic() {
        let a = run_adaptation(&tiny()).unwrap();
        let b = run_adaptation(&tiny()).unwrap();
        assert_eq!(a.canonical_json().unwrap(), b.canonical_json().unwrap());
        assert_eq!(a.summary.episodes_ok, 2);
        assert_eq!(a.per_view_iou.len(), 6);
        assert_eq!(a.loss_curve.len(), 3);
        assert!((0.0..=100.0).contains(&a.summary.miou_mean));
        assert_eq!(Report::from_json(&a.to_json().unwrap()).unwrap(), a);
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let one = run_evaluation(&tiny()).unwrap();
        let two = run_evaluation(&ExperimentConfig { workers: 2, ..tiny() }).unwrap();
        assert_eq!(one.episodes, two.episodes);
        assert!(one.loss_curve.is_empty());
    }

    #[test]
    fn outputs_are_written() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig { output_dir: Some(dir.path().to_path_buf()), sample_pngs: 1, ..tiny() };
        run_adaptation(&cfg).unwrap();
        for f in ["report.json", "report.csv", "curves/loss.svg", "curves/views.svg", "samples/s0_e0_pred.png", "logs/s0_e1.jsonl"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let csv = std::fs::read_to_string(dir.path().join("report.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
    }

    #[test]
    fn single_view_ladder_gives_one_prelim_column() {
        let mut cfg = tiny();
        cfg.episodes = 1;
        cfg.hpa.n_max = 1;
        let r = run_preliminary_tables(&cfg).unwrap();
        let p = r.prelim.unwrap();
        assert_eq!(p.sequential_iou.len(), 1);
        assert_eq!(p.positions, vec![1]);
    }

    #[test]
    fn gen_data_writes_specs_and_pngs() {
        let dir = tempfile::tempdir().unwrap();
        let files = generate_data(&tiny(), dir.path(), 2).unwrap();
        assert_eq!(files.len(), 5);
        assert!(files.iter().all(|f| f.exists()));
    }

    #[test]
    fn ablation_table_has_every_cell_and_verdict() {
        let cfg = ExperimentConfig { episodes: 1, seeds: vec![0, 1], ..tiny() };
        let r = run_ablations(&cfg).unwrap();
        let t = r.ablation.as_ref().unwrap();
        assert_eq!(t.cells.len(), ablation_cells().len());
        assert!(t.cells.iter().all(|c| c.per_seed_miou.len() == 2 && c.episodes.len() == 2));
        assert_eq!(t.verdicts.len(), 3);
        assert_eq!(r.to_csv().lines().count(), 1 + 2 * t.cells.len());
        assert_eq!(t.cell("full").unwrap().episodes, r.episodes);
    }
}
