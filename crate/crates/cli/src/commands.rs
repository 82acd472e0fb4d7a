use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, Context};
use rayon::prelude::*;

use fewshot::adapt::{run_2sfs, run_single_stage};
use fewshot::checkpoint::{load_checkpoint, save_checkpoint};
use fewshot::dynamics::{detect_breakpoint, parse_grid, sweep_alpha, sweep_budget, SweepRow, SweepTable};
use fewshot::infer::{Metrics, Protocol};
use fewshot::model::{pretrain as pretrain_model, DualEncoder, LEXICON};
use fewshot::synth::{make_task, make_universe, save_data, split_base_novel, DataBundle, FewShotTask, Split, Universe, UniverseConfig, World};

use crate::config::{ExperimentConfig, OUT_ENV};
use crate::output::{self, MetricsRow, RunRecord, SeedRecord, VERSION};

/// Exit code 2 for usage and configuration problems, 3 for everything else.
pub enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }

    pub fn error(&self) -> &anyhow::Error {
        match self {
            Failure::Usage(e) | Failure::Runtime(e) => e,
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        let usage = e.chain().any(|c| matches!(c.downcast_ref::<fewshot::Error>(), Some(fewshot::Error::Config(_) | fewshot::Error::Argument(_))));
        if usage {
            Failure::Usage(e)
        } else {
            Failure::Runtime(e)
        }
    }
}

impl From<fewshot::Error> for Failure {
    fn from(e: fewshot::Error) -> Self {
        anyhow::Error::from(e).into()
    }
}

type Outcome = Result<(), Failure>;

pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<ExperimentConfig, Failure> {
    ExperimentConfig::load(path, overrides).map_err(Failure::Usage)
}

fn out_dir(cfg: &ExperimentConfig) -> Result<PathBuf, Failure> {
    let dir = cfg.output_dir();
    std::fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    Ok(dir)
}

fn file_name(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

pub fn pretrain(cfg: &ExperimentConfig) -> Outcome {
    let start = Instant::now();
    let dir = out_dir(cfg)?;
    let world = World::new(cfg.world())?;
    let universe = make_universe(&world, &UniverseConfig::pretraining(&world.config))?;
    let mut model = DualEncoder::new(cfg.model_config(), &world.vocabulary(), cfg.model.init_seed)?;
    eprintln!("pretraining {} parameters on {} samples for {} steps", model.param_count(), universe.samples.len(), cfg.pretrain.steps);
    let report = pretrain_model(&mut model, &universe, &cfg.pretrain)?;
    let ckpt = dir.join("pretrained.ckpt");
    save_checkpoint(&ckpt, &model, None, &cfg.hash())?;
    println!("final contrastive loss {:.4}", report.final_loss);
    println!("zero-shot accuracy on held-out samples {:.2}%", report.zero_shot_acc);
    println!("temperature {:.3}", report.tau);
    let record = serde_json::json!({
        "command": "pretrain",
        "config_hash": cfg.hash(),
        "version": VERSION,
        "duration_s": start.elapsed().as_secs_f64(),
        "report": report,
        "files": [file_name(&ckpt)],
    });
    output::write_json(&dir.join("pretrain.json"), &record)?;
    Ok(())
}

struct Prepared {
    model: DualEncoder,
    universe: Universe,
    split: Split,
}

fn prepare(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<Prepared, Failure> {
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| cfg.output_dir().join("pretrained.ckpt"));
    let ck = load_checkpoint(&path).with_context(|| format!("cannot load checkpoint {}", path.display())).map_err(Failure::Runtime)?;
    if ck.model.config != cfg.model_config() {
        return Err(Failure::Usage(anyhow!("checkpoint architecture {:?} does not match the config {:?}", ck.model.config, cfg.model_config())));
    }
    if ck.model.strategy.is_some() {
        return Err(Failure::Usage(anyhow!("{} is an adapted checkpoint; pass a pretrained one", path.display())));
    }
    let world = World::new(cfg.world())?;
    if ck.model.params[LEXICON].values != world.vocabulary().features {
        return Err(Failure::Usage(anyhow!("checkpoint lexicon does not match the data section of the config")));
    }
    let spec = cfg.task_spec();
    let universe = make_universe(&world, &spec.universe)?;
    let split = match cfg.protocol {
        Protocol::BaseToNovel => split_base_novel(&universe.class_ids)?,
        Protocol::AllToAll => Split::all_to_all(&universe.class_ids),
    };
    Ok(Prepared { model: ck.model, universe, split })
}

fn task_for(cfg: &ExperimentConfig, p: &Prepared, seed: u64) -> fewshot::Result<FewShotTask> {
    make_task(&p.universe, &p.split, cfg.adapt.k, cfg.task_spec().eval_per_class, seed)
}

fn metrics_row(cfg: &ExperimentConfig, seed: u64, alpha: f64, m: &Metrics) -> MetricsRow {
    MetricsRow {
        protocol: m.protocol.to_string(),
        seed: seed.to_string(),
        peft: cfg.adapt.peft.to_string(),
        alpha,
        m: cfg.adapt.m_per_shot,
        k: cfg.adapt.k,
        base_acc: m.base_acc,
        novel_acc: m.novel_acc,
        hm: m.hm,
        text_encoder_calls: m.text_encoder_calls as f64,
    }
}

/// Runs the two-stage procedure (or stage one alone) for every seed.
pub fn adapt(cfg: &ExperimentConfig, checkpoint: Option<&Path>, single: bool) -> Outcome {
    let start = Instant::now();
    let p = prepare(cfg, checkpoint)?;
    let dir = out_dir(cfg)?;
    let hash = cfg.hash();
    let prefix = if single { "single_stage" } else { "adapt" };
    let strategy = cfg.adapt.peft;
    eprintln!("{prefix}: {strategy} on {} seeds, protocol {}", cfg.seeds.len(), cfg.protocol);
    let runs = cfg
        .seeds
        .par_iter()
        .map(|&seed| -> fewshot::Result<_> {
            let task = task_for(cfg, &p, seed)?;
            let config = cfg.adapt_config(seed);
            let peft = cfg.peft_options(seed);
            if single {
                let r = run_single_stage(&p.model, strategy, &peft, &task, &config)?;
                let classifier = fewshot::adapt::init_classifier(&r.model, &task.base)?;
                Ok((seed, r.model, classifier, r.curve, r.metrics, 1.0))
            } else {
                let r = run_2sfs(&p.model, strategy, &peft, &task, &config)?;
                Ok((seed, r.model, r.classifier, r.curve, r.metrics, cfg.adapt.alpha))
            }
        })
        .collect::<fewshot::Result<Vec<_>>>()?;
    let mut rows = Vec::new();
    let mut seeds = Vec::new();
    let mut files = Vec::new();
    for (seed, model, classifier, mut curve, metrics, alpha) in runs {
        curve.config_hash = hash.clone();
        let curve_path = dir.join(format!("{prefix}_curve_seed{seed}.csv"));
        output::write_curve(&curve_path, &curve)?;
        let ckpt_path = dir.join(format!("{prefix}_seed{seed}.ckpt"));
        save_checkpoint(&ckpt_path, &model, Some(&classifier), &hash)?;
        let breakpoint = if curve.records.len() >= 3 && cfg.breakpoint.window <= curve.records.len() && cfg.protocol == Protocol::BaseToNovel {
            detect_breakpoint(&curve, cfg.breakpoint.window, cfg.breakpoint.margin)?
        } else {
            None
        };
        if single {
            match &breakpoint {
                Some(b) => eprintln!("seed {seed}: breakpoint at iteration {} (novel {:.2} -> {:.2})", b.iter, b.peak_novel, b.final_novel),
                None => eprintln!("seed {seed}: no breakpoint"),
            }
        }
        rows.push(metrics_row(cfg, seed, alpha, &metrics));
        seeds.push(SeedRecord { seed, metrics: Some(metrics), breakpoint, sweep: None });
        files.push(file_name(&curve_path));
        files.push(file_name(&ckpt_path));
    }
    let rows = output::with_mean(rows);
    let metrics_path = dir.join(format!("{prefix}_metrics.csv"));
    output::write_metrics(&metrics_path, &hash, &rows)?;
    files.insert(0, file_name(&metrics_path));
    print_rows(&rows);
    let record = RunRecord { command: prefix.replace('_', "-"), config_hash: hash, version: VERSION.into(), duration_s: start.elapsed().as_secs_f64(), seeds, files };
    output::write_json(&dir.join(format!("{prefix}_run.json")), &record)?;
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|v| format!("{v:.2}")).unwrap_or_else(|| "-".into())
}

fn print_rows(rows: &[MetricsRow]) {
    println!("{:>6} {:>9} {:>9} {:>9} {:>10}", "seed", "base", "novel", "hm", "text_calls");
    for r in rows {
        println!("{:>6} {:>9.2} {:>9} {:>9} {:>10}", r.seed, r.base_acc, fmt_opt(r.novel_acc), fmt_opt(r.hm), r.text_encoder_calls);
    }
}

/// Averages per-seed sweep tables cell by cell.
fn mean_table(tables: &[SweepTable]) -> SweepTable {
    let n = tables.len() as f64;
    let avg = |f: &dyn Fn(&SweepRow) -> Option<f64>, i: usize| tables.iter().map(|t| f(&t.rows[i])).sum::<Option<f64>>().map(|s| s / n);
    let rows: Vec<SweepRow> = (0..tables[0].rows.len())
        .map(|i| SweepRow {
            param: tables[0].rows[i].param,
            m: tables[0].rows[i].m,
            base_acc: avg(&|r| Some(r.base_acc), i).expect("base accuracy always present"),
            novel_acc: avg(&|r| r.novel_acc, i),
            hm: avg(&|r| r.hm, i),
        })
        .collect();
    let scores: Vec<f64> = rows.iter().map(SweepRow::score).collect();
    let best = rows[fewshot::model::argmax(&scores)].param;
    SweepTable { rows, best }
}

pub fn sweep(cfg: &ExperimentConfig, checkpoint: Option<&Path>, param: &str, grid: Option<&str>) -> Outcome {
    let start = Instant::now();
    let grid_spec = match (param, grid) {
        (_, Some(g)) => g,
        ("alpha", None) => "0.2:0.8:0.1",
        ("budget", None) => "100,300,500",
        (other, None) => return Err(Failure::Usage(anyhow!("unknown sweep parameter {other:?}; use alpha or budget"))),
    };
    let values = parse_grid(grid_spec)?;
    let budgets: Vec<usize> = if param == "budget" {
        values
            .iter()
            .map(|&v| if v >= 1.0 && v.fract() == 0.0 { Ok(v as usize) } else { Err(Failure::Usage(anyhow!("budget grid values must be positive integers, got {v}"))) })
            .collect::<Result<_, _>>()?
    } else if param == "alpha" {
        Vec::new()
    } else {
        return Err(Failure::Usage(anyhow!("unknown sweep parameter {param:?}; use alpha or budget")));
    };
    let p = prepare(cfg, checkpoint)?;
    let dir = out_dir(cfg)?;
    let hash = cfg.hash();
    eprintln!("sweep {param} over {} values, {} seeds", values.len(), cfg.seeds.len());
    let tables = cfg
        .seeds
        .iter()
        .map(|&seed| {
            let task = task_for(cfg, &p, seed)?;
            let config = cfg.adapt_config(seed);
            let peft = cfg.peft_options(seed);
            if param == "alpha" {
                sweep_alpha(&p.model, cfg.adapt.peft, &peft, &task, &config, &values)
            } else {
                sweep_budget(&p.model, cfg.adapt.peft, &peft, &task, &config, &budgets)
            }
        })
        .collect::<fewshot::Result<Vec<_>>>()?;
    let table = mean_table(&tables);
    let path = dir.join(format!("sweep_{param}.csv"));
    output::write_sweep(&path, &hash, &table)?;
    println!("{:>8} {:>9} {:>9} {:>9}", param, "base", "novel", "hm");
    for r in &table.rows {
        println!("{:>8} {:>9.2} {:>9} {:>9}", r.param, r.base_acc, fmt_opt(r.novel_acc), fmt_opt(r.hm));
    }
    println!("best {param} = {}", table.best);
    let seeds = cfg.seeds.iter().zip(tables).map(|(&seed, t)| SeedRecord { seed, metrics: None, breakpoint: None, sweep: Some(t) }).collect();
    let record = RunRecord { command: format!("sweep-{param}"), config_hash: hash, version: VERSION.into(), duration_s: start.elapsed().as_secs_f64(), seeds, files: vec![file_name(&path)] };
    output::write_json(&dir.join(format!("sweep_{param}_run.json")), &record)?;
    Ok(())
}

pub fn data_gen(cfg: &ExperimentConfig) -> Outcome {
    let dir = out_dir(cfg)?;
    let world = World::new(cfg.world())?;
    let spec = cfg.task_spec();
    let universe = make_universe(&world, &spec.universe)?;
    let split = match cfg.protocol {
        Protocol::BaseToNovel => split_base_novel(&universe.class_ids)?,
        Protocol::AllToAll => Split::all_to_all(&universe.class_ids),
    };
    let task = make_task(&universe, &split, cfg.adapt.k, spec.eval_per_class, cfg.seeds[0])?;
    let path = dir.join("data.json");
    let bundle = DataBundle { universe, task: Some(task), config_hash: cfg.hash() };
    save_data(&path, &bundle)?;
    let t = bundle.task.as_ref().expect("task present");
    println!("{} classes, {} samples; {} base, {} novel, {} shots -> {}", bundle.universe.class_ids.len(), bundle.universe.samples.len(), t.base.len(), t.novel.len(), t.shots.len(), path.display());
    Ok(())
}

pub fn report(dir: Option<PathBuf>) -> Outcome {
    let dir = dir.or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from)).unwrap_or_else(|| PathBuf::from("out"));
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
        .with_context(|| format!("cannot read {}", dir.display()))
        .map_err(Failure::Usage)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.file_name().map(|n| n.to_string_lossy().ends_with("_run.json")).unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Failure::Usage(anyhow!("no run records in {}", dir.display())));
    }
    for path in paths {
        let text = std::fs::read_to_string(&path).with_context(|| format!("cannot read {}", path.display()))?;
        let record: RunRecord = serde_json::from_str(&text).with_context(|| format!("{} is not a run record", path.display()))?;
        println!("{} ({}, config {}, {:.1}s)", record.command, record.version, &record.config_hash[..12.min(record.config_hash.len())], record.duration_s);
        for s in &record.seeds {
            if let Some(m) = &s.metrics {
                let bp = s.breakpoint.map(|b| format!("  breakpoint@{}", b.iter)).unwrap_or_default();
                println!("  seed {:>3}  base {:>6.2}  novel {:>6}  hm {:>6}  text calls {}{bp}", s.seed, m.base_acc, fmt_opt(m.novel_acc), fmt_opt(m.hm), m.text_encoder_calls);
            }
            if let Some(t) = &s.sweep {
                println!("  seed {:>3}  best {}", s.seed, t.best);
            }
        }
    }
    Ok(())
}
