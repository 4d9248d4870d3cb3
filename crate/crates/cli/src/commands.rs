use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{ArgGroup, Args};
use log::info;
use serde::Serialize;

use distmatch::baselines::{herding_coreset, random_coreset};
use distmatch::condense::{condense_with, NormMode};
use distmatch::config::{parse_config_str, RunConfig};
use distmatch::continual::{curve_csv, run_incremental, IncrementalSchedule, MemoryBuilder, MemoryOptions};
use distmatch::datasets::{load_dataset, load_train_test, Split};
use distmatch::evaluation::{cross_architecture_eval, evaluate_sets, evaluate_synthetic, train_on_set, EvalResult};
use distmatch::export::save_grid;
use distmatch::nas::{
    nas_report, report_csv, scale_widths, score_architectures, validation_split, NasBudget, NasMethodRun,
};
use distmatch::networks::{enumerate_search_space, stratified_subsample};
use distmatch::repro::derive_seed;
use distmatch::report::RunReport;
use distmatch::synthetic::{load_condensed, save_condensed, SyntheticSet};
use distmatch::{Error, Result};

use crate::{Common, EvalFlags};

/// Config file (if any) with the global flags applied; not yet materialised.
fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::Load {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            parse_config_str(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(d) = &common.dataset {
        cfg.dataset.name.clone_from(d);
    }
    if let Some(r) = &common.data_dir {
        cfg.dataset.root = Some(r.clone());
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if common.workers.is_some() {
        cfg.workers = common.workers;
    }
    Ok(cfg)
}

fn apply_eval_flags(cfg: &mut RunConfig, f: &EvalFlags) {
    let e = &mut cfg.eval;
    if let Some(a) = &f.arch {
        e.arch.clone_from(a);
    }
    if f.eval_width.is_some() {
        e.width = f.eval_width;
    }
    set(&mut e.repeats, f.repeats);
    set(&mut e.nets, f.nets);
    set(&mut e.epochs, f.epochs);
    set(&mut e.lr, f.eval_lr);
    set(&mut e.batch_size, f.batch_size);
    if let Some(a) = &f.eval_aug {
        e.augmentation.clone_from(a);
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn sidecar(path: &Path) -> PathBuf {
    path.with_extension("report.json")
}

/// Writes the report, then checks every artifact it lists.
fn finish(common: &Common, mut report: RunReport, default_path: PathBuf, start: Instant) -> Result<()> {
    report.wall_time_secs = start.elapsed().as_secs_f64();
    report.artifacts = report.artifacts.iter().map(std::path::absolute).collect::<std::io::Result<_>>()?;
    let path = common.report.clone().unwrap_or(default_path);
    report.write(&path)?;
    report.verify_artifacts()?;
    println!("report: {}", path.display());
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text)?;
    Ok(())
}

fn print_result(r: &EvalResult) {
    println!(
        "{}: {:.2} +- {:.2} over {} networks ({:.1}s)",
        r.arch,
        r.mean,
        r.std,
        r.accuracies.len(),
        r.wall_time_secs
    );
}

#[derive(Args, Debug)]
pub struct CondenseArgs {
    #[arg(long)]
    ipc: Option<usize>,
    /// Outer iterations K.
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Embedding architecture sampled at every iteration.
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    real_batch: Option<usize>,
    /// `default`, `none` or a comma list of crop,scale,rotate,noise,cutout,flip,color.
    #[arg(long)]
    aug: Option<String>,
    #[arg(long)]
    nets_per_iter: Option<usize>,
    /// Directory of pretrained checkpoints to sample embedders from.
    #[arg(long)]
    pool: Option<PathBuf>,
    /// Accuracy bucket such as `40-50`.
    #[arg(long, requires = "pool")]
    bucket: Option<String>,
    /// `synthetic-stats` or `per-class-batch`.
    #[arg(long)]
    norm_mode: Option<String>,
    #[arg(long, short, default_value = "condensed.dmc")]
    out: PathBuf,
    /// JSONL log of the augmentation drawn at every iteration.
    #[arg(long)]
    log_aug: Option<PathBuf>,
    /// Also render the result as a PNG grid.
    #[arg(long)]
    grid: Option<PathBuf>,
}

fn parse_norm_mode(s: &str) -> Result<NormMode> {
    match s.replace('_', "-").as_str() {
        "synthetic-stats" => Ok(NormMode::SyntheticStats),
        "per-class-batch" => Ok(NormMode::PerClassBatch),
        _ => Err(Error::Config(format!("unknown norm mode {s:?}"))),
    }
}

#[derive(Serialize)]
struct AugLine<'a> {
    iteration: usize,
    loss: f64,
    classes: &'a [usize],
    aug: &'a [Vec<distmatch::augmentation::AugmentationParams>],
}

pub fn condense(common: &Common, a: &CondenseArgs) -> Result<ExitCode> {
    let start = Instant::now();
    let mut cfg = load_config(common)?;
    let c = &mut cfg.condense;
    set(&mut c.ipc, a.ipc);
    if a.iters.is_some() {
        c.iterations = a.iters;
    }
    if a.lr.is_some() {
        c.lr = a.lr;
    }
    if let Some(arch) = &a.arch {
        c.arch.clone_from(arch);
    }
    if a.width.is_some() {
        c.width = a.width;
    }
    set(&mut c.real_batch, a.real_batch);
    if let Some(aug) = &a.aug {
        c.augmentation.clone_from(aug);
    }
    set(&mut c.nets_per_iter, a.nets_per_iter);
    if a.pool.is_some() {
        c.sampler_pool.clone_from(&a.pool);
        c.sampler_bucket.clone_from(&a.bucket);
    }
    if let Some(m) = &a.norm_mode {
        c.norm_mode = parse_norm_mode(m)?;
    }
    cfg.materialize()?;
    let ccfg = cfg.condense_config()?;
    let real = load_dataset(&cfg.dataset_spec()?, Split::Train)?;
    info!("condensing {} images into {} per class", real.len(), ccfg.ipc);

    let mut log = a.log_aug.as_deref().map(File::create).transpose()?.map(BufWriter::new);
    let mut log_err = None;
    let (synth, creport) = condense_with(&real, &ccfg, |it| {
        if let (Some(w), None) = (log.as_mut(), log_err.as_ref()) {
            let line = AugLine {
                iteration: it.iteration,
                loss: it.loss,
                classes: it.classes,
                aug: it.aug,
            };
            let res = serde_json::to_string(&line)
                .map_err(std::io::Error::from)
                .and_then(|s| writeln!(w, "{s}"));
            if let Err(e) = res {
                log_err = Some(e);
            }
        }
        if it.iteration % 100 == 0 {
            info!("iteration {}: loss {:.4}", it.iteration, it.loss);
        }
    })?;
    if let Some(e) = log_err {
        return Err(e.into());
    }
    if let Some(mut w) = log {
        w.flush()?;
    }

    save_condensed(&synth, &a.out)?;
    let mut report = RunReport::new("condense", &cfg, cfg.seed)?;
    for purpose in ["init", "sampler"] {
        report.seeds.insert(purpose.into(), derive_seed(cfg.seed, purpose, 0));
    }
    report.artifacts.push(a.out.clone());
    if let Some(g) = &a.grid {
        save_grid(&synth, g, 4)?;
        report.artifacts.push(g.clone());
    }
    if let Some(l) = &a.log_aug {
        report.artifacts.push(l.clone());
    }
    report.set_results(&creport)?;
    println!(
        "wrote {} ({} images, final loss {:.4})",
        a.out.display(),
        synth.labels().len(),
        creport.loss_curve.last().map_or(f64::NAN, |p| p.loss)
    );
    finish(common, report, sidecar(&a.out), start)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("source").required(true).args(["synthetic", "whole"])))]
pub struct EvalArgs {
    /// Condensed sets (.dmc); the first `--repeats` are used.
    #[arg(long, num_args = 1..)]
    synthetic: Vec<PathBuf>,
    /// Train on the whole training set instead.
    #[arg(long)]
    whole: bool,
    /// Comma list of test architectures (cross-architecture table).
    #[arg(long, conflicts_with = "whole")]
    archs: Option<String>,
    #[command(flatten)]
    flags: EvalFlags,
    /// Also write `arch,mean,std,runs` rows here.
    #[arg(long)]
    csv: Option<PathBuf>,
}

pub fn eval(common: &Common, a: &EvalArgs) -> Result<ExitCode> {
    let start = Instant::now();
    let mut cfg = load_config(common)?;
    apply_eval_flags(&mut cfg, &a.flags);
    let mut sets = a.synthetic.iter().map(|p| load_condensed(p)).collect::<Result<Vec<SyntheticSet>>>()?;
    if common.dataset.is_none() && common.config.is_none() {
        if let Some(first) = sets.first() {
            cfg.dataset.name.clone_from(&first.meta.dataset);
        }
    }
    cfg.materialize()?;
    sets.truncate(cfg.eval.repeats);
    let spec = cfg.dataset_spec()?;
    let protocol = cfg.eval_protocol(spec.image_shape[0])?;

    let results = if a.whole {
        let (train, test) = load_train_test(&spec)?;
        vec![evaluate_sets(&[train], &test, &cfg.eval_arch()?, &protocol)?]
    } else {
        let test = load_dataset(&spec, Split::Test)?;
        match &a.archs {
            Some(list) => {
                let labels: Vec<String> = list.split(',').map(|s| s.trim().to_string()).collect();
                cross_architecture_eval(&sets, &test, &labels, &protocol)?
            }
            None => vec![evaluate_synthetic(&sets, &test, &cfg.eval_arch()?, &protocol)?],
        }
    };
    results.iter().for_each(print_result);

    let mut report = RunReport::new("eval", &cfg, cfg.seed)?;
    report.seeds.insert("eval".into(), derive_seed(cfg.seed, "eval", 0));
    if let Some(path) = &a.csv {
        let mut text = String::from("arch,mean,std,runs\n");
        for r in &results {
            text.push_str(&format!("{},{:.4},{:.4},{}\n", r.arch, r.mean, r.std, r.accuracies.len()));
        }
        write_text(path, &text)?;
        report.artifacts.push(path.clone());
    }
    report.set_results(&results)?;
    finish(common, report, PathBuf::from("eval.report.json"), start)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Args, Debug)]
pub struct BaselineArgs {
    /// `random` or `herding`.
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    ipc: Option<usize>,
    /// Epochs for the herding embedder (eval architecture, whole training set).
    #[arg(long)]
    herding_epochs: Option<usize>,
    #[command(flatten)]
    flags: EvalFlags,
    #[arg(long, short, default_value = "coreset.dmc")]
    out: PathBuf,
}

pub fn baseline(common: &Common, a: &BaselineArgs) -> Result<ExitCode> {
    let start = Instant::now();
    let mut cfg = load_config(common)?;
    apply_eval_flags(&mut cfg, &a.flags);
    if let Some(m) = &a.method {
        cfg.baseline.method.clone_from(m);
    }
    set(&mut cfg.condense.ipc, a.ipc);
    set(&mut cfg.baseline.herding_epochs, a.herding_epochs);
    cfg.materialize()?;
    let spec = cfg.dataset_spec()?;
    let real = load_dataset(&spec, Split::Train)?;
    let ipc = cfg.condense.ipc;
    let mut report = RunReport::new("baseline", &cfg, cfg.seed)?;
    let coreset = if cfg.baseline.method == "herding" {
        let mut recipe = cfg.train_recipe(spec.image_shape[0])?;
        recipe.epochs = cfg.baseline.herding_epochs;
        let seed = derive_seed(cfg.seed, "herding", 0);
        report.seeds.insert("herding".into(), seed);
        info!("training the herding embedder for {} epochs", recipe.epochs);
        let net = train_on_set(&real, &cfg.eval_arch()?, &recipe, seed)?;
        herding_coreset(&real, ipc, &net)?
    } else {
        random_coreset(&real, ipc, cfg.seed)?
    };
    let set = coreset.to_synthetic(spec.name.as_str(), &cfg.baseline.method, cfg.seed)?;
    save_condensed(&set, &a.out)?;
    report.artifacts.push(a.out.clone());
    report.set_results(&serde_json::json!({ "method": cfg.baseline.method, "selection": coreset.selection }))?;
    println!("wrote {} ({} images, {})", a.out.display(), set.labels().len(), cfg.baseline.method);
    finish(common, report, sidecar(&a.out), start)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Args, Debug)]
pub struct ClArgs {
    #[arg(long)]
    steps: Option<usize>,
    /// Memory images per class.
    #[arg(long)]
    budget: Option<usize>,
    /// `random`, `herding` or `dm`.
    #[arg(long)]
    builder: Option<String>,
    /// Condensation iterations for the DM builder.
    #[arg(long)]
    iters: Option<usize>,
    #[command(flatten)]
    flags: EvalFlags,
    #[arg(long, default_value = "cl")]
    out_dir: PathBuf,
}

pub fn cl(common: &Common, a: &ClArgs) -> Result<ExitCode> {
    let start = Instant::now();
    let mut cfg = load_config(common)?;
    apply_eval_flags(&mut cfg, &a.flags);
    set(&mut cfg.continual.steps, a.steps);
    set(&mut cfg.continual.budget, a.budget);
    if let Some(b) = &a.builder {
        cfg.continual.builder = MemoryBuilder::parse(b)?;
    }
    if a.iters.is_some() {
        cfg.condense.iterations = a.iters;
    }
    cfg.materialize()?;
    let spec = cfg.dataset_spec()?;
    let (train, test) = load_train_test(&spec)?;
    let mut herding_recipe = cfg.train_recipe(spec.image_shape[0])?;
    herding_recipe.epochs = cfg.baseline.herding_epochs;
    let opts = MemoryOptions {
        condense: cfg.condense_config()?,
        herding_arch: cfg.eval_arch()?,
        herding_recipe,
    };
    let c = &cfg.continual;
    let schedule = IncrementalSchedule::random_split(spec.num_classes, c.steps, c.budget, c.builder, cfg.seed)?;
    let curve = run_incremental(
        &train,
        &test,
        &schedule,
        &opts,
        &cfg.eval_arch()?,
        &cfg.eval_protocol(spec.image_shape[0])?,
    )?;
    for s in &curve {
        println!(
            "step {}: {} classes, memory {}, accuracy {:.2} +- {:.2}",
            s.step,
            s.classes_seen.len(),
            s.memory_size,
            s.mean,
            s.std
        );
    }

    std::fs::create_dir_all(&a.out_dir)?;
    let json = a.out_dir.join("curve.json");
    let csv = a.out_dir.join("curve.csv");
    write_text(&json, &serde_json::to_string_pretty(&curve)?)?;
    write_text(&csv, &curve_csv(&curve))?;
    let mut report = RunReport::new("cl", &cfg, cfg.seed)?;
    report.seeds.insert("classes".into(), derive_seed(cfg.seed, "classes", 0));
    report.artifacts = vec![json, csv];
    report.set_results(&serde_json::json!({ "schedule": schedule, "curve": curve }))?;
    finish(common, report, a.out_dir.join("report.json"), start)?;
    Ok(ExitCode::SUCCESS)
}

#[derive(Args, Debug)]
pub struct NasArgs {
    /// Architectures drawn from the grid.
    #[arg(long)]
    subsample: Option<usize>,
    #[arg(long)]
    proxy_ipc: Option<usize>,
    #[arg(long)]
    proxy_epochs: Option<usize>,
    #[arg(long)]
    reference_epochs: Option<usize>,
    #[arg(long)]
    early_epochs: Option<usize>,
    /// Trainings per architecture.
    #[arg(long)]
    nas_repeats: Option<usize>,
    /// Top fraction the correlation is computed on.
    #[arg(long)]
    slice: Option<f64>,
    /// Divide the grid's widths (toy-scale runs).
    #[arg(long)]
    width_divisor: Option<usize>,
    /// Condensation iterations for the DM proxy.
    #[arg(long)]
    iters: Option<usize>,
    #[command(flatten)]
    flags: EvalFlags,
    #[arg(long, default_value = "nas")]
    out_dir: PathBuf,
}

pub fn nas(common: &Common, a: &NasArgs) -> Result<ExitCode> {
    let start = Instant::now();
    let mut cfg = load_config(common)?;
    apply_eval_flags(&mut cfg, &a.flags);
    let n = &mut cfg.nas;
    set(&mut n.subsample, a.subsample);
    set(&mut n.proxy_ipc, a.proxy_ipc);
    set(&mut n.proxy_epochs, a.proxy_epochs);
    set(&mut n.reference_epochs, a.reference_epochs);
    set(&mut n.early_epochs, a.early_epochs);
    set(&mut n.repeats, a.nas_repeats);
    set(&mut n.slice, a.slice);
    set(&mut n.width_divisor, a.width_divisor);
    if a.iters.is_some() {
        cfg.condense.iterations = a.iters;
    }
    cfg.condense.ipc = cfg.nas.proxy_ipc;
    cfg.condense.lr = None;
    cfg.materialize()?;
    let n = cfg.nas.clone();
    let spec = cfg.dataset_spec()?;
    let (full, test) = load_train_test(&spec)?;
    let (train, val) = validation_split(&full, n.val_fraction, cfg.seed)?;
    let grid = enumerate_search_space(spec.image_shape, spec.num_classes);
    let space = scale_widths(&stratified_subsample(&grid, n.subsample, cfg.seed), n.width_divisor);
    info!("{} architectures, {} training / {} validation images", space.len(), train.len(), val.len());

    let budget = |epochs| -> Result<NasBudget> {
        let mut recipe = cfg.train_recipe(spec.image_shape[0])?;
        recipe.epochs = epochs;
        Ok(NasBudget {
            recipe,
            repeats: n.repeats,
            workers: cfg.workers(),
        })
    };
    let minutes = |t: Instant| t.elapsed().as_secs_f64() / 60.0;

    let t = Instant::now();
    let reference = score_architectures(&train, &val, Some(&test), &space, &budget(n.reference_epochs)?)?;
    let reference_time = minutes(t);
    let reference_scores: Vec<f64> = reference.iter().map(|s| s.accuracy).collect();
    let performance: Vec<f64> = reference.iter().map(|s| s.test_accuracy.unwrap_or(f64::NAN)).collect();

    let t = Instant::now();
    let (synth, _) = condense_with(&train, &cfg.condense_config()?, |_| {})?;
    let dm = score_architectures(&synth.to_labeled(), &val, None, &space, &budget(n.proxy_epochs)?)?;
    let dm_time = minutes(t);

    let t = Instant::now();
    let random = random_coreset(&train, n.proxy_ipc, cfg.seed)?.set;
    let rnd = score_architectures(&random, &val, None, &space, &budget(n.proxy_epochs)?)?;
    let random_time = minutes(t);

    let t = Instant::now();
    let early = score_architectures(&train, &val, None, &space, &budget(n.early_epochs)?)?;
    let early_time = minutes(t);

    let scores = |s: &[distmatch::nas::ArchScore]| s.iter().map(|x| x.accuracy).collect::<Vec<f64>>();
    let proxy_images = n.proxy_ipc * spec.num_classes;
    let methods = vec![
        NasMethodRun {
            method: "random".into(),
            scores: scores(&rnd),
            time_minutes: random_time,
            storage_images: proxy_images,
        },
        NasMethodRun {
            method: "dm".into(),
            scores: scores(&dm),
            time_minutes: dm_time,
            storage_images: proxy_images,
        },
        NasMethodRun {
            method: "early-stopping".into(),
            scores: scores(&early),
            time_minutes: early_time,
            storage_images: train.len(),
        },
        NasMethodRun {
            method: "whole".into(),
            scores: reference_scores.clone(),
            time_minutes: reference_time,
            storage_images: train.len(),
        },
    ];
    let rows = nas_report(&methods, &reference_scores, &performance, n.slice);
    print!("{}", report_csv(&rows));

    std::fs::create_dir_all(&a.out_dir)?;
    let table = a.out_dir.join("table.csv");
    let table_json = a.out_dir.join("table.json");
    let scatter = a.out_dir.join("scatter.csv");
    write_text(&table, &report_csv(&rows))?;
    write_text(&table_json, &serde_json::to_string_pretty(&rows)?)?;
    let mut text = String::from("index,label,reference,test,dm,random,early_stopping\n");
    for (i, r) in reference.iter().enumerate() {
        text.push_str(&format!(
            "{},{},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
            r.index, r.label, r.accuracy, performance[i], dm[i].accuracy, rnd[i].accuracy, early[i].accuracy
        ));
    }
    write_text(&scatter, &text)?;

    let mut report = RunReport::new("nas", &cfg, cfg.seed)?;
    report.seeds.insert("validation".into(), derive_seed(cfg.seed, "validation", 0));
    report.artifacts = vec![table, table_json, scatter];
    report.set_results(&serde_json::json!({
        "architectures": space.iter().map(ToString::to_string).collect::<Vec<_>>(),
        "rows": rows,
        "reference": reference,
        "dm": dm,
        "random": rnd,
        "early_stopping": early,
    }))?;
    finish(common, report, a.out_dir.join("report.json"), start)?;
    Ok(ExitCode::SUCCESS)
}

pub fn verify_appendix(common: &Common) -> Result<ExitCode> {
    let start = Instant::now();
    let seed = common.seed.unwrap_or(0);
    let r = distmatch::analysis::verify_appendix(seed)?;
    println!("closed form vs backprop: {:.3e}", r.closed_form_max_diff);
    println!("gradient row sums:       {:.3e}", r.row_sum_max);
    println!("uniform-case error:      {:.3e}", r.uniform_max_error);
    println!("network uniform error:   {:.3e}", r.network.uniform_max_error);
    println!("tolerance {:.0e}: {}", r.tolerance, if r.passed { "passed" } else { "FAILED" });
    let mut report = RunReport::new("verify-appendix", &serde_json::json!({ "seed": seed }), seed)?;
    report.set_results(&r)?;
    finish(common, report, PathBuf::from("verify-appendix.report.json"), start)?;
    Ok(if r.passed { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long)]
    synthetic: PathBuf,
    #[arg(long, short, default_value = "grid.png")]
    out: PathBuf,
    /// Pixel magnification.
    #[arg(long, default_value_t = 4)]
    zoom: u32,
}

pub fn export_grid(common: &Common, a: &ExportArgs) -> Result<ExitCode> {
    let start = Instant::now();
    let set = load_condensed(&a.synthetic)?;
    save_grid(&set, &a.out, a.zoom)?;
    println!("wrote {} ({} classes x {} images)", a.out.display(), set.num_classes(), set.ipc());
    let mut report = RunReport::new(
        "export-grid",
        &serde_json::json!({ "synthetic": a.synthetic, "zoom": a.zoom }),
        set.meta.seed,
    )?;
    report.artifacts.push(a.out.clone());
    report.set_results(&set.meta)?;
    finish(common, report, sidecar(&a.out), start)?;
    Ok(ExitCode::SUCCESS)
}
