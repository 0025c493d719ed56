use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mhattnsurv::attnmap::{attention_map, parse_coords};
use mhattnsurv::cv::{ablation_runner, nested_cv, stratified_kfold, FoldPlan};
use mhattnsurv::data::{
    filter_background_patch, generate_synthetic, load_bag, load_dataset, parse_ppm, write_dataset, Dataset,
};
use mhattnsurv::eval::{evaluate, head_correlations, headwise_cindex, predictions_csv, RiskPrediction};
use mhattnsurv::model::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, Precision};
use mhattnsurv::numerics::fnv1a;
use mhattnsurv::train::{history_csv, init_model, predict_model, sample_eval_bags, train_kind};
use mhattnsurv::{Error, Model, Result, RngStream, SurvivalModel, TrainConfig};
use serde::Serialize;
use serde_json::json;

use crate::config::{
    load_config, AblateRun, AttnmapRun, CvRun, EvalRun, FilterRun, PrecisionName, SynthRun, TrainRun,
};
use crate::Common;

/// Output directory: `--out`, then the config's `out`, then a per-command
/// default in the working directory.
fn out_dir(common: &Common, from_config: &Option<PathBuf>, command: &str) -> Result<PathBuf> {
    let dir = common
        .out
        .clone()
        .or_else(|| from_config.clone())
        .unwrap_or_else(|| PathBuf::from(format!("mhattnsurv-{command}")));
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    Ok(dir)
}

fn write(dir: &Path, name: &str, bytes: impl AsRef<[u8]>) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<()> {
    write(dir, name, serde_json::to_string_pretty(value)? + "\n")
}

/// Writes the resolved configuration next to the outputs. The output
/// directory is left out so that runs into different directories produce
/// identical trees.
fn write_effective<T: Serialize>(dir: &Path, run: &T) -> Result<()> {
    let mut value = serde_json::to_value(run)?;
    if let Some(map) = value.as_object_mut() {
        map.remove("out");
    }
    write_json(dir, "effective_config.json", &value)
}

fn config_hash(config: &TrainConfig) -> Result<String> {
    Ok(format!("{:016x}", fnv1a(&serde_json::to_string(config)?)))
}

pub fn synth(common: &Common) -> Result<()> {
    let mut run: SynthRun = load_config(&common.config)?;
    if let Some(seed) = common.seed {
        run.synthetic.seed = seed;
    }
    let dir = out_dir(common, &run.out, "synth")?;
    let generated = generate_synthetic(&run.synthetic)?;
    for w in &generated.warnings {
        eprintln!("warning: {w}");
    }
    write_dataset(&dir, &generated.dataset)?;
    write(&dir, "truth.csv", generated.truth_csv())?;
    write_json(
        &dir,
        "synth_summary.json",
        &json!({
            "summary": generated.dataset.summary(),
            "oracle_cindex": generated.oracle_cindex().ok(),
            "warnings": generated.warnings,
        }),
    )?;
    write_effective(&dir, &run)
}

pub fn train(common: &Common) -> Result<()> {
    let mut run: TrainRun = load_config(&common.config)?;
    if let Some(seed) = common.seed {
        run.train.seed = seed;
    }
    run.train.validate()?;
    let dir = out_dir(common, &run.out, "train")?;
    let data = load_dataset(&run.dataset)?;
    let events = data.events(&data.all_indices());
    let mut rng = RngStream::new(run.train.seed, "split");
    let folds = stratified_kfold(&events, run.validation_folds, &mut rng)?;
    let val_idx = folds[0].clone();
    let train_idx: Vec<usize> = folds[1..].concat();
    let mut train_idx = train_idx;
    train_idx.sort_unstable();

    let init = init_model(run.model, &data, &train_idx, &run.train)?;
    let outcome = train_kind(init, &data, &train_idx, &val_idx, &run.train)?;
    let meta = CheckpointMeta {
        seed: run.train.seed,
        config_hash: config_hash(&run.train)?,
        best_val_cindex: Some(outcome.best_val_cindex),
        steps: outcome.steps,
        best_epoch: Some(outcome.best_epoch as u64),
    };
    let precision = match run.checkpoint_precision {
        PrecisionName::F32 => Precision::F32,
        PrecisionName::F64 => Precision::F64,
    };
    save_checkpoint(
        dir.join("model.mhck"),
        &Checkpoint {
            model: outcome.best.clone(),
            optimizer: Some(outcome.optimizer.clone()),
            meta,
        },
        precision,
    )?;
    write(&dir, "history.csv", history_csv(&outcome.history))?;
    let ids = |idx: &[usize]| -> Vec<&str> { idx.iter().map(|&i| data.records[i].id.as_str()).collect() };
    write_json(
        &dir,
        "train_summary.json",
        &json!({
            "model": run.model,
            "best_val_cindex": outcome.best_val_cindex,
            "best_epoch": outcome.best_epoch,
            "steps": outcome.steps,
            "train_patients": ids(&train_idx),
            "validation_patients": ids(&val_idx),
        }),
    )?;
    write_effective(&dir, &run)
}

fn select_patients(data: &Dataset, ids: Option<&[String]>) -> Result<Vec<usize>> {
    let Some(ids) = ids else {
        return Ok(data.all_indices());
    };
    let index: HashMap<&str, usize> = data
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.id.as_str(), i))
        .collect();
    ids.iter()
        .map(|id| {
            index
                .get(id.as_str())
                .copied()
                .ok_or_else(|| Error::Domain(format!("unknown patient {id}")))
        })
        .collect()
}

fn read_predictions(path: &Path) -> Result<HashMap<String, f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = HashMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (n == 0 && line.starts_with("id,")) {
            continue;
        }
        let bad = || Error::Config(format!("{}:{}: expected `id,risk`", path.display(), n + 1));
        let (id, risk) = line.split_once(',').ok_or_else(bad)?;
        let risk: f64 = risk.trim().parse().map_err(|_| bad())?;
        if out.insert(id.trim().to_string(), risk).is_some() {
            return Err(Error::Config(format!("{}: patient {id} listed twice", path.display())));
        }
    }
    Ok(out)
}

fn correlations_csv(name: &str, m: &[Vec<Option<f64>>], out: &mut String) {
    for (i, row) in m.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            let v = v.map(|x| x.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{name},{},{},{v}", i + 1, j + 1);
        }
    }
}

pub fn eval(common: &Common) -> Result<()> {
    let mut run: EvalRun = load_config(&common.config)?;
    if let Some(seed) = common.seed {
        run.seed = seed;
    }
    let dir = out_dir(common, &run.out, "eval")?;
    let data = load_dataset(&run.dataset)?;
    let idx = select_patients(&data, run.patients.as_deref())?;
    let times = data.times(&idx);
    let events = data.events(&idx);

    let mut extra = serde_json::Map::new();
    let risks = match (&run.checkpoint, &run.predictions) {
        (Some(path), None) => {
            let ck = load_checkpoint(path)?;
            if ck.model.dim() != data.d {
                return Err(Error::Dimension(format!(
                    "checkpoint has d = {}, dataset has d = {}",
                    ck.model.dim(),
                    data.d
                )));
            }
            let bags = sample_eval_bags(&data, &idx, run.test_patches, run.seed, "test")?;
            let risks = predict_model(&ck.model, &bags)?;
            if let Model::MhAttn(params) = &ck.model {
                let heads = headwise_cindex(params, &bags, &times, &events)?;
                let corr = head_correlations(params, &bags)?;
                let mut csv = String::from("head,cindex\n");
                for (h, c) in heads.per_head.iter().enumerate() {
                    let _ = writeln!(csv, "{},{c}", h + 1);
                }
                let _ = writeln!(csv, "all,{}", heads.all_heads);
                write(&dir, "heads.csv", csv)?;
                let mut csv = String::from("matrix,head_i,head_j,pearson\n");
                correlations_csv("attention", &corr.attention, &mut csv);
                correlations_csv("patch_risk", &corr.patch_risk, &mut csv);
                write(&dir, "head_correlations.csv", csv)?;
                extra.insert("headwise".into(), serde_json::to_value(heads)?);
                extra.insert("head_correlations".into(), serde_json::to_value(corr)?);
            }
            risks
        }
        (None, Some(path)) => {
            let table = read_predictions(path)?;
            idx.iter()
                .map(|&i| {
                    let id = &data.records[i].id;
                    table
                        .get(id)
                        .copied()
                        .ok_or_else(|| Error::Domain(format!("no prediction for patient {id}")))
                })
                .collect::<Result<Vec<_>>>()?
        }
        _ => {
            return Err(Error::Config(
                "exactly one of `checkpoint` and `predictions` must be set".into(),
            ))
        }
    };

    let report = evaluate(&risks, &times, &events, &run.horizons)?;
    let preds: Vec<RiskPrediction> = idx
        .iter()
        .zip(&risks)
        .map(|(&i, &risk)| RiskPrediction {
            id: data.records[i].id.clone(),
            risk,
        })
        .collect();
    write(&dir, "metrics.csv", report.metrics_csv())?;
    write(&dir, "km.csv", report.km_csv())?;
    write(&dir, "predictions.csv", predictions_csv(&preds))?;
    let mut summary = serde_json::to_value(&report)?;
    if let Some(map) = summary.as_object_mut() {
        map.extend(extra);
    }
    write_json(&dir, "metrics.json", &summary)?;
    write_effective(&dir, &run)
}

pub fn cv(common: &Common) -> Result<()> {
    let mut run: CvRun = load_config(&common.config)?;
    if let Some(seed) = common.seed {
        run.train.seed = seed;
    }
    run.grid.validate()?;
    let dir = out_dir(common, &run.out, "cv")?;
    let data = load_dataset(&run.dataset)?;
    let plan = FoldPlan::new(
        &data,
        run.outer_folds,
        run.inner_folds,
        run.split_seed.unwrap_or(run.train.seed),
    )?;
    let report = nested_cv(&data, &plan, &run.grid.dropout_rates, &run.train, run.model)?;
    write_json(&dir, "fold_plan.json", &plan)?;
    write_json(&dir, "cv_report.json", &report)?;
    write(&dir, "cv_folds.csv", report.folds_csv())?;
    write(&dir, "cv_grid.csv", report.grid_csv())?;
    write(&dir, "cv_predictions.csv", report.predictions_csv())?;
    write_effective(&dir, &run)
}

pub fn ablate(common: &Common) -> Result<()> {
    let mut run: AblateRun = load_config(&common.config)?;
    if let Some(seed) = common.seed {
        run.train.seed = seed;
    }
    run.grid.validate()?;
    let dir = out_dir(common, &run.out, "ablate")?;
    let data = load_dataset(&run.dataset)?;
    let plan = FoldPlan::new(
        &data,
        run.outer_folds,
        run.inner_folds,
        run.split_seed.unwrap_or(run.train.seed),
    )?;
    let (table, reports) = ablation_runner(&data, &plan, &run.grid.head_counts, &run.grid.dropout_rates, &run.train)?;
    write_json(&dir, "fold_plan.json", &plan)?;
    write(&dir, "ablation.csv", table.to_csv())?;
    write_json(&dir, "ablation.json", &json!({ "table": table, "reports": reports }))?;
    write_effective(&dir, &run)
}

pub fn attnmap(common: &Common) -> Result<()> {
    let mut run: AttnmapRun = load_config(&common.config)?;
    if let Some(seed) = common.seed {
        run.seed = seed;
    }
    let dir = out_dir(common, &run.out, "attnmap")?;
    let ck = load_checkpoint(&run.checkpoint)?;
    let Model::MhAttn(model) = ck.model else {
        return Err(Error::Usage(format!(
            "attention maps need a multi-head checkpoint, got {}",
            ck.model.kind()
        )));
    };
    let bag = load_bag(&run.bag)?;
    if bag.d() != model.dim() {
        return Err(Error::Dimension(format!(
            "checkpoint has d = {}, bag has d = {}",
            model.dim(),
            bag.d()
        )));
    }
    let coords = match &run.coords {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            Some(parse_coords(&text, bag.n())?)
        }
        None => None,
    };
    let mut rng = RngStream::new(run.seed, "attnmap");
    let map = attention_map(&model, &bag.features, run.passes, run.group_size, &mut rng)?;
    write(&dir, "attention.csv", map.to_csv(coords.as_deref()))?;
    write_effective(&dir, &run)?;
    if run.images.unwrap_or(coords.is_some()) {
        let coords = coords.ok_or_else(|| {
            Error::Usage("heatmaps requested but no `coords` table given; attention.csv was written".into())
        })?;
        for head in 0..model.heads {
            write(&dir, &format!("head_{}.pgm", head + 1), map.heatmap_pgm(head, &coords)?)?;
        }
    }
    Ok(())
}

fn expand_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let mut found: Vec<PathBuf> = std::fs::read_dir(input)
                .map_err(|e| Error::io(input, e))?
                .filter_map(|entry| entry.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")))
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(input.clone());
        }
    }
    Ok(files)
}

pub fn filter_patches(common: &Common) -> Result<()> {
    let run: FilterRun = load_config(&common.config)?;
    let dir = out_dir(common, &run.out, "filter-patches")?;
    let mut csv = String::from("path,purple_count,keep\n");
    let (mut kept, mut total) = (0, 0);
    for path in expand_inputs(&run.inputs)? {
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let decision = parse_ppm(&bytes)
            .and_then(|raster| filter_background_patch(&raster, &run.filter))
            .map_err(|e| Error::Domain(format!("{}: {e}", path.display())))?;
        let _ = writeln!(
            csv,
            "{},{},{}",
            path.display(),
            decision.purple_count,
            u8::from(decision.keep)
        );
        kept += usize::from(decision.keep);
        total += 1;
    }
    write(&dir, "filter.csv", csv)?;
    write_json(&dir, "filter_summary.json", &json!({ "patches": total, "kept": kept }))?;
    write_effective(&dir, &run)
}
