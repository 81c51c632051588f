use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use promptpfn::bench::{
    export_decision_grid, load_csv, mean_rank_and_wins, significance_suite, zscore_table, ExperimentReport, ResultRow,
    DEFAULT_SPLIT,
};
use promptpfn::context::{
    apply_transform, select_features, sketch, sketch_quality, FeatureSelectConfig, FeatureSelectMethod,
    FeatureTransform, LabelMode, SketchConfig, SketchMethod,
};
use promptpfn::data::TabularDataset;
use promptpfn::fairness::{tune_fair, FairnessSpec};
use promptpfn::metrics::accuracy;
use promptpfn::orchestrator::{route, run_search, DatasetMeta, Fitted, Variant};
use promptpfn::pfn::{
    class_slice, load_checkpoint, predict_zero_shot, pretrain, save_checkpoint, zero_shot_context, PfnConfig, PfnModel,
    Prediction, Rows, DEFAULT_CONTEXT_BUDGET,
};
use promptpfn::prior::{task_stream, PriorConfig};
use promptpfn::tuning::{
    extend_classes, init_prompt, load_ensemble, load_prompt, predict, save_ensemble, save_prompt, tune, EvalMode,
    TuneConfig,
};
use promptpfn::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::{Command, DataArgs, LabelModeArg, ModeArg, RowsArg, SelectArg, SketchArg, VariantArg};

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&read_text(path)?)?)
}

fn open_model(path: &Path) -> Result<PfnModel> {
    load_checkpoint(path).map_err(|e| match e {
        Error::Io(io) => Error::Config(format!("checkpoint {}: {io}", path.display())),
        other => other,
    })
}

fn load_data(args: &DataArgs, seed: u64) -> Result<TabularDataset> {
    load_csv(&args.data, &args.label, DEFAULT_SPLIT, seed)
}

fn variant(v: VariantArg) -> Variant {
    match v {
        VariantArg::Standard => Variant::Standard,
        VariantArg::Medium => Variant::Medium,
        VariantArg::Light => Variant::Light,
    }
}

fn variant_name(v: Variant) -> &'static str {
    match v {
        Variant::Standard => "standard",
        Variant::Medium => "medium",
        Variant::Light => "light",
    }
}

pub fn run(cmd: Command) -> Result<()> {
    match cmd {
        Command::Pretrain {
            config,
            model_config,
            steps,
            lr,
            common,
        } => {
            let prior = PriorConfig::from_json(&read_text(&config)?)?;
            let cfg = match model_config {
                Some(p) => read_json(&p)?,
                None => PfnConfig {
                    d_max: prior.d_max,
                    c_max: prior.c_max,
                    ..PfnConfig::default()
                },
            };
            if prior.d_max > cfg.d_max || prior.c_max > cfg.c_max {
                return Err(Error::Config(format!(
                    "prior (d_max {}, c_max {}) exceeds the model (d_max {}, c_max {})",
                    prior.d_max, prior.c_max, cfg.d_max, cfg.c_max
                )));
            }
            let mut model = PfnModel::new(cfg, common.seed)?;
            let report = pretrain(&mut model, task_stream(prior, common.seed)?, steps, lr, common.seed)?;
            save_checkpoint(&model, &common.out)?;
            write_json(&common.out.join("pretrain_report.json"), &report)?;
            match report.losses.last() {
                Some(l) => println!("pretrained {steps} steps in {:.1}s, final loss {l:.4}", report.seconds),
                None => println!("no pretraining steps requested"),
            }
            Ok(())
        }
        Command::Tune {
            model,
            data,
            variant: v,
            config,
            common,
        } => tune_cmd(&model, &data, variant(v), config.as_deref(), &common.out, common.seed),
        Command::Predict {
            model,
            data,
            prompt,
            ensemble,
            transform,
            mode,
            rows,
            context,
            common,
        } => {
            let model = open_model(&model)?;
            let mut ds = load_data(&data, common.seed)?;
            if let Some(t) = transform {
                ds = apply_transform(&ds, &FeatureTransform::from_json(&read_text(&t)?)?)?;
            }
            let rows = match rows {
                RowsArg::All => ds.all_rows(),
                RowsArg::Train => ds.split.train.clone(),
                RowsArg::Val => ds.split.val.clone(),
                RowsArg::Test => ds.split.test.clone(),
            };
            let mode = match mode {
                ModeArg::C => EvalMode::C,
                ModeArg::Nc => EvalMode::Nc,
                ModeArg::Best => EvalMode::Best,
            };
            let pred = if let Some(dir) = prompt {
                predict(&model, &load_prompt(&dir)?, &ds, &rows, mode, context, common.seed)?
            } else if let Some(dir) = ensemble {
                load_ensemble(&dir)?.predict(&model, &ds, &rows, mode, context, common.seed)?
            } else {
                predict_zero_shot(&model, &ds, &rows, context, common.seed)?
            };
            fs::create_dir_all(&common.out)?;
            write_predictions(&common.out.join("predictions.csv"), &ds, &rows, &pred)?;
            let acc = if rows.is_empty() {
                None
            } else {
                Some(accuracy(&pred.labels, &ds.gather_labels(&rows))?)
            };
            write_json(
                &common.out.join("metrics.json"),
                &json!({ "rows": rows.len(), "accuracy": acc }),
            )?;
            if let Some(a) = acc {
                println!("accuracy {a:.4} on {} rows", rows.len());
            }
            Ok(())
        }
        Command::Sketch {
            data,
            method,
            n,
            label_mode,
            common,
        } => {
            let ds = load_data(&data, common.seed)?;
            let cfg = SketchConfig {
                method: match method {
                    SketchArg::Random => SketchMethod::Random,
                    SketchArg::Kmeans => SketchMethod::Kmeans,
                    SketchArg::CoresetFps => SketchMethod::CoresetFps,
                },
                n,
                label_mode: match label_mode {
                    LabelModeArg::Proportional => LabelMode::Proportional,
                    LabelModeArg::Equal => LabelMode::Equal,
                },
                seed: common.seed,
            };
            let result = sketch(&ds, &ds.split.train, &cfg)?;
            let quality = sketch_quality(&ds, &result.indices);
            fs::create_dir_all(&common.out)?;
            write_json(
                &common.out.join("sketch.json"),
                &json!({ "config": cfg, "indices": result.indices, "clamped": result.clamped, "quality": quality }),
            )?;
            println!(
                "sketched {} of {} training rows",
                result.indices.len(),
                ds.split.train.len()
            );
            Ok(())
        }
        Command::SelectFeatures {
            data,
            method,
            d_target,
            common,
        } => {
            let ds = load_data(&data, common.seed)?;
            let method = match method {
                SelectArg::Random => FeatureSelectMethod::Random,
                SelectArg::Mi => FeatureSelectMethod::MutualInformation,
                SelectArg::Pca => FeatureSelectMethod::Pca,
            };
            let sel = select_features(
                &ds,
                &ds.split.train,
                &FeatureSelectConfig::new(method, d_target, common.seed),
            )?;
            fs::create_dir_all(&common.out)?;
            fs::write(common.out.join("transform.json"), sel.transform.to_json()?)?;
            write_json(
                &common.out.join("selection.json"),
                &json!({ "scores": sel.scores, "degenerate": sel.degenerate, "output_width": sel.transform.output_width() }),
            )?;
            println!("{} -> {} features", ds.n_features(), sel.transform.output_width());
            Ok(())
        }
        Command::FairTune {
            model,
            data,
            spec,
            config,
            common,
        } => {
            let model = open_model(&model)?;
            let ds = load_data(&data, common.seed)?;
            let spec = FairnessSpec::from_json(&read_text(&spec)?)?;
            let mut cfg: TuneConfig = match config {
                Some(p) => read_json(&p)?,
                None => TuneConfig::default(),
            };
            cfg.seed = common.seed;
            let start = Instant::now();
            let prompt = init_prompt(&cfg, &ds, &model, None)?;
            let (fitted, trace, report) = tune_fair(&model, prompt, &ds, &cfg, &spec)?;
            fs::create_dir_all(&common.out)?;
            save_prompt(&fitted, &common.out.join("prompt"))?;
            write_json(&common.out.join("trace.json"), &trace)?;
            write_json(&common.out.join("fair_report.json"), &report)?;
            let mut row = result_row(&ds, &format!("fair-lambda-{}", spec.lambda), report.accuracy, start);
            row.extra.insert("dp".into(), report.dp);
            ExperimentReport::append(&common.out.join("report.jsonl"), &row)?;
            println!(
                "accuracy {:.4}, demographic parity gap {:.4}",
                report.accuracy, report.dp
            );
            Ok(())
        }
        Command::Bench {
            suite,
            model,
            variant: v,
            common,
        } => bench_cmd(&suite, &model, variant(v), &common.out, common.seed),
        Command::Stats { report, alpha, out } => {
            let mut rep = ExperimentReport::load(&report)?;
            let ranks = mean_rank_and_wins(&rep)?;
            let summary = rep.refresh()?.clone();
            let z = zscore_table(&rep);
            let significance = match significance_suite(&rep, alpha) {
                Ok(s) => json!(s),
                Err(e) => json!({ "skipped": e.to_string() }),
            };
            let value =
                json!({ "summary": summary, "ranks_and_wins": ranks, "zscores": z, "significance": significance });
            match out {
                Some(dir) => {
                    fs::create_dir_all(&dir)?;
                    write_json(&dir.join("stats.json"), &value)?;
                }
                None => println!("{}", serde_json::to_string_pretty(&value)?),
            }
            Ok(())
        }
        Command::GridExport {
            model,
            data,
            prompt,
            resolution,
            common,
        } => {
            let model = open_model(&model)?;
            let ds = load_data(&data, common.seed)?;
            if ds.n_features() != 2 {
                return Err(Error::Shape {
                    op: "decision grid",
                    left: vec![ds.n_features()],
                    right: vec![2],
                });
            }
            let bounds: Vec<(f64, f64)> = (0..2)
                .map(|j| {
                    let col = (0..ds.n_rows()).map(|r| ds.row(r)[j]);
                    let lo = col.clone().fold(f64::INFINITY, f64::min);
                    let hi = col.fold(f64::NEG_INFINITY, f64::max);
                    let pad = 0.1 * (hi - lo).max(1e-9);
                    (lo - pad, hi + pad)
                })
                .collect();
            let prompt = prompt.map(|p| load_prompt(&p)).transpose()?;
            let k = ds.class_count;
            let context = if prompt.is_some() {
                Vec::new()
            } else {
                zero_shot_context(&ds, &ds.split.train, DEFAULT_CONTEXT_BUDGET, common.seed)?
            };
            let cx = ds.gather_features(&context);
            let cy = ds.gather_labels(&context);
            let predict_points = |pts: &[f64]| {
                let probs = model.forward_chunked(
                    Rows::new(&cx, 2),
                    &cy,
                    Rows::new(pts, 2),
                    prompt.as_ref().map(|p| p.as_ref()),
                    promptpfn::pfn::QUERY_CHUNK,
                )?;
                class_slice(&probs, k)
            };
            fs::create_dir_all(&common.out)?;
            let file = fs::File::create(common.out.join("grid.csv"))?;
            let n = export_decision_grid(predict_points, &bounds, resolution, file)?;
            println!("wrote {n} grid rows");
            Ok(())
        }
    }
}

fn result_row(ds: &TabularDataset, algorithm: &str, acc: f64, start: Instant) -> ResultRow {
    ResultRow {
        dataset: ds.name.clone(),
        algorithm: algorithm.to_string(),
        fold: 0,
        accuracy: acc,
        runtime_seconds: start.elapsed().as_secs_f64(),
        extra: Default::default(),
    }
}

fn write_predictions(path: &Path, ds: &TabularDataset, rows: &[usize], pred: &Prediction) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let k = pred.probs.shape()[1];
    let mut header = vec!["row".to_string(), "label".to_string(), "predicted".to_string()];
    header.extend((0..k).map(|c| format!("p_{c}")));
    w.write_record(&header)?;
    for (i, &r) in rows.iter().enumerate() {
        let mut rec = vec![r.to_string(), ds.labels()[r].to_string(), pred.labels[i].to_string()];
        rec.extend(pred.probs.row(i).iter().map(|p| p.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn tune_cmd(model: &Path, data: &DataArgs, v: Variant, config: Option<&Path>, out: &Path, seed: u64) -> Result<()> {
    let model = open_model(model)?;
    let ds = load_data(data, seed)?;
    fs::create_dir_all(out)?;
    let start = Instant::now();
    let (algorithm, acc) = match config {
        Some(path) => {
            let mut cfg: TuneConfig = read_json(path)?;
            cfg.seed = seed;
            let head = if ds.class_count > model.config().c_max {
                Some(extend_classes(&model, ds.class_count, seed)?)
            } else {
                None
            };
            let prompt = init_prompt(&cfg, &ds, &model, head)?;
            let (fitted, trace) = tune(&model, prompt, &ds, &cfg)?;
            save_prompt(&fitted, &out.join("prompt"))?;
            write_json(&out.join("trace.json"), &trace)?;
            let test = &ds.split.test;
            let pred = predict(&model, &fitted, &ds, test, cfg.eval_mode, cfg.ctx_upper_bound, seed)?;
            (
                "prompt-tuning".to_string(),
                accuracy(&pred.labels, &ds.gather_labels(test))?,
            )
        }
        None => {
            let decision = route(&DatasetMeta::of(&ds), model.config(), v);
            write_json(&out.join("decision.json"), &decision)?;
            let (outcome, winner) = run_search(&model, &ds, &decision, seed)?;
            write_json(&out.join("search.json"), &outcome)?;
            if let Some(t) = &winner.transform {
                fs::write(out.join("transform.json"), t.to_json()?)?;
            }
            match &winner.fitted {
                Fitted::ZeroShot => write_json(&out.join("zero_shot.json"), &json!({ "winner": "zero-shot" }))?,
                Fitted::Prompt(p) => save_prompt(p, &out.join("prompt"))?,
                Fitted::Ensemble(e) => save_ensemble(e, &out.join("ensemble"))?,
            }
            (format!("routed-{}", variant_name(v)), outcome.test_accuracy)
        }
    };
    let row = result_row(&ds, &algorithm, acc, start);
    ExperimentReport::append(&out.join("report.jsonl"), &row)?;
    println!("{algorithm}: test accuracy {acc:.4}");
    Ok(())
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SuiteEntry {
    path: PathBuf,
    #[serde(default = "default_label")]
    label: String,
}

fn default_label() -> String {
    "label".into()
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Suite {
    datasets: Vec<SuiteEntry>,
    #[serde(default = "one")]
    folds: usize,
}

fn one() -> usize {
    1
}

fn bench_cmd(suite_path: &Path, model: &Path, v: Variant, out: &Path, seed: u64) -> Result<()> {
    let suite: Suite = read_json(suite_path)?;
    let base = suite_path.parent().unwrap_or(Path::new("."));
    let model = open_model(model)?;
    fs::create_dir_all(out)?;
    let results = out.join("results.jsonl");
    if results.exists() {
        fs::remove_file(&results)?;
    }
    for entry in &suite.datasets {
        let path = if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            base.join(&entry.path)
        };
        for fold in 0..suite.folds {
            let fold_seed = seed.wrapping_add(fold as u64);
            let ds = load_csv(&path, &entry.label, DEFAULT_SPLIT, fold_seed)?;
            let test = &ds.split.test;
            let truth = ds.gather_labels(test);

            let start = Instant::now();
            let zs = predict_zero_shot(&model, &ds, test, DEFAULT_CONTEXT_BUDGET, fold_seed)?;
            let mut row = result_row(&ds, "zero-shot", accuracy(&zs.labels, &truth)?, start);
            row.fold = fold;
            ExperimentReport::append(&results, &row)?;

            let start = Instant::now();
            let decision = route(&DatasetMeta::of(&ds), model.config(), v);
            let (outcome, _) = run_search(&model, &ds, &decision, fold_seed)?;
            let mut row = result_row(
                &ds,
                &format!("routed-{}", variant_name(v)),
                outcome.test_accuracy,
                start,
            );
            row.fold = fold;
            ExperimentReport::append(&results, &row)?;
            println!("{} fold {fold}: zero-shot vs tuned done", ds.name);
        }
    }
    Ok(())
}
