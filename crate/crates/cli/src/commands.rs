//! Subcommand bodies. Each writes its artifacts plus `resolved_config.toml`
//! into its output directory, where it has one.

use std::fs;
use std::path::Path;
use std::time::Instant;

use eegfm::bench::run_benchmark;
use eegfm::data_io::{
    build_dataset, generate_synthetic, load_split, prepare_dataset, synthetic_corpus,
    write_manifest, write_recording, Corpus, Sample, Split,
};
use eegfm::dsp::PatchedSignal;
use eegfm::model::{build_model, read_checkpoint, sample_mask, write_checkpoint, Batch, Model};
use eegfm::montage::build_region_map;
use eegfm::numeric::{finite_diff_check_with, Tensor, DEFAULT_REL_FLOOR};
use eegfm::train::{epochs_csv, evaluate, finetune_with, pretrain_with, trace_csv};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::settings::{Settings, PRETRAIN_BASE, TEST_BASE, TRAIN_BASE, VAL_BASE};
use crate::CliError;

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";
pub const CHECKPOINT_FILE: &str = "model.ckpt";

fn write_resolved(s: &Settings, dir: &Path) -> Result<(), CliError> {
    fs::write(dir.join(RESOLVED_CONFIG_FILE), s.to_dotted())?;
    Ok(())
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

fn synthetic_base(split: Split) -> u64 {
    match split {
        Split::Train => TRAIN_BASE,
        Split::Val => VAL_BASE,
        Split::Test => TEST_BASE,
    }
}

fn synthetic_count(s: &Settings, split: Split) -> usize {
    match split {
        Split::Train => s.synthetic.train,
        Split::Val => s.synthetic.val,
        Split::Test => s.synthetic.test,
    }
}

fn synthetic_range(s: &Settings, first: u64, count: usize) -> Result<Option<Corpus>, CliError> {
    if count == 0 {
        return Ok(None);
    }
    let spec = s.synthetic_spec()?;
    Ok(Some(synthetic_corpus(
        &spec,
        first,
        count,
        &s.preprocess_config(),
        s.data.segments,
    )?))
}

/// One split from `data`, or from the synthetic generator when `data` is
/// absent; `None` when the split is empty.
fn load(s: &Settings, data: Option<&Path>, split: Split) -> Result<Option<Corpus>, CliError> {
    match data {
        Some(dir) => {
            if build_dataset(dir)?.split(split).is_empty() {
                return Ok(None);
            }
            Ok(Some(load_split(
                dir,
                split,
                &s.preprocess_config(),
                s.data.segments,
            )?))
        }
        None => synthetic_range(s, synthetic_base(split), synthetic_count(s, split)),
    }
}

/// Samples of `other`, after checking it shares the reference montage.
fn same_montage(
    reference: &Corpus,
    other: Option<Corpus>,
    what: &str,
) -> Result<Vec<Sample>, CliError> {
    match other {
        None => Ok(Vec::new()),
        Some(c) if c.labels == reference.labels => Ok(c.samples),
        Some(c) => Err(CliError::Runtime(format!(
            "{what} montage {:?} differs from the training montage {:?}",
            c.labels, reference.labels
        ))),
    }
}

fn require(corpus: Option<Corpus>, what: &str) -> Result<Corpus, CliError> {
    corpus.ok_or_else(|| CliError::Runtime(format!("the {what} split is empty")))
}

fn check_checkpoint_montage(model: &Model, corpus: &Corpus) -> Result<(), CliError> {
    if model.region_map != corpus.region_map {
        return Err(CliError::Runtime(format!(
            "checkpoint was trained on a different montage than the data ({:?})",
            corpus.labels
        )));
    }
    Ok(())
}

pub fn preprocess(s: &Settings, input: &Path, output: &Path) -> Result<(), CliError> {
    fs::create_dir_all(output)?;
    let count = prepare_dataset(input, output, &s.preprocess_config())?;
    write_resolved(s, output)?;
    log::info!("prepared {count} recordings into {}", output.display());
    Ok(())
}

pub fn gen_synthetic(s: &Settings, output: &Path) -> Result<(), CliError> {
    let spec = s.synthetic_spec()?;
    let mut rows = Vec::new();
    for split in [Split::Train, Split::Val, Split::Test] {
        let count = synthetic_count(s, split);
        if count > 0 {
            fs::create_dir_all(output.join(split.to_string()))?;
        }
        for i in 0..count {
            let (rec, label) = generate_synthetic(&spec, synthetic_base(split) + i as u64)?;
            let rel = format!("{split}/{split}_{i:05}.eegr");
            write_recording(&rec, output.join(&rel))?;
            rows.push((rel, label as f64, split));
        }
    }
    fs::create_dir_all(output)?;
    write_manifest(output, &rows)?;
    write_resolved(s, output)?;
    log::info!(
        "wrote {} recordings ({} train / {} val / {} test, {} classes) to {}",
        rows.len(),
        s.synthetic.train,
        s.synthetic.val,
        s.synthetic.test,
        spec.class_count(),
        output.display()
    );
    Ok(())
}

pub fn pretrain(s: &Settings, data: Option<&Path>, out: &Path) -> Result<(), CliError> {
    let train = match data {
        Some(_) => require(load(s, data, Split::Train)?, "train")?,
        None => require(
            synthetic_range(s, PRETRAIN_BASE, s.synthetic.pretrain_count)?,
            "pretraining",
        )?,
    };
    let val = same_montage(&train, load(s, data, Split::Val)?, "validation")?;
    let mut model = build_model(&s.model_config(), &train.region_map, s.seed)?;
    let cfg = s.pretrain_config();
    let batches_per_epoch = train.samples.len().div_ceil(cfg.batch_size.max(1));
    let total = cfg.steps.unwrap_or(cfg.epochs * batches_per_epoch);
    log::info!(
        "pretraining {} parameters on {} samples ({} validation) for {total} steps",
        model.params.numel(),
        train.samples.len(),
        val.len()
    );
    let every = (total / 20).max(1);
    let t0 = Instant::now();
    let outcome = pretrain_with(&mut model, &train.samples, &val, &cfg, s.seed, &mut |r| {
        if r.step % every == 0 || r.step + 1 == total {
            log::info!(
                "step {:>5} epoch {:>3} lr {:.3e} loss {:.6} grad norm {:.3}",
                r.step,
                r.epoch,
                r.lr,
                r.loss,
                r.grad_norm
            );
        }
    })?;
    let seconds = t0.elapsed().as_secs_f64();

    fs::create_dir_all(out)?;
    fs::write(out.join("loss_trace.csv"), trace_csv(&outcome.trace))?;
    let mut val_csv = String::from("epoch,val_loss\n");
    for (e, l) in outcome.val_losses.iter().enumerate() {
        val_csv.push_str(&format!("{e},{l}\n"));
    }
    fs::write(out.join("val_loss.csv"), val_csv)?;
    write_checkpoint(&model, out.join(CHECKPOINT_FILE))?;
    write_resolved(s, out)?;
    let first = outcome.trace.first().map(|r| r.loss);
    let last = outcome.trace.last().map(|r| r.loss);
    write_json(
        &out.join("summary.json"),
        &json!({
            "steps": outcome.trace.len(),
            "initial_loss": first,
            "final_loss": last,
            "selected_epoch": outcome.selected_epoch,
            "parameters": model.params.numel(),
        }),
    )?;
    log::info!(
        "loss {:.6} -> {:.6} in {seconds:.1} s; kept epoch {}; artifacts in {}",
        first.unwrap_or(f64::NAN),
        last.unwrap_or(f64::NAN),
        outcome.selected_epoch,
        out.display()
    );
    Ok(())
}

pub fn finetune(
    s: &Settings,
    data: Option<&Path>,
    checkpoint: Option<&Path>,
    out: &Path,
) -> Result<(), CliError> {
    let train = require(load(s, data, Split::Train)?, "train")?;
    let val = same_montage(&train, load(s, data, Split::Val)?, "validation")?;
    let test = same_montage(&train, load(s, data, Split::Test)?, "test")?;
    let mut model = match checkpoint {
        Some(path) => {
            let model = read_checkpoint(path)?;
            check_checkpoint_montage(&model, &train)?;
            if model.config != s.model_config() {
                log::warn!("model.*, cst.* and ssa.* settings are taken from the checkpoint, not the configuration");
            }
            log::info!("initialized from {}", path.display());
            model
        }
        None => {
            log::info!("random initialization (no --checkpoint)");
            build_model(&s.model_config(), &train.region_map, s.seed)?
        }
    };
    let kind = s.task_kind();
    log::info!(
        "fine-tuning for {kind:?} on {} / {} / {} train / val / test samples",
        train.samples.len(),
        val.len(),
        test.len()
    );
    let outcome = finetune_with(
        &mut model,
        kind,
        &train.samples,
        &val,
        &test,
        &s.finetune_config(),
        s.seed,
        &mut |e| {
            log::info!(
                "epoch {:>3} lr {:.3e} train loss {:.6} val score {:.4}",
                e.epoch,
                e.lr,
                e.train_loss,
                e.val_score
            )
        },
    )?;

    fs::create_dir_all(out)?;
    fs::write(out.join("epochs.csv"), epochs_csv(&outcome.epochs))?;
    write_checkpoint(&model, out.join(CHECKPOINT_FILE))?;
    write_resolved(s, out)?;
    if let Some(report) = &outcome.test_report {
        fs::write(out.join("test_metrics.json"), report.to_json()? + "\n")?;
        fs::write(out.join("test_metrics.csv"), report.to_csv())?;
        for (name, value) in &report.metrics {
            log::info!("test {name} = {value:.4}");
        }
    }
    log::info!(
        "kept epoch {}; artifacts in {}",
        outcome.best_epoch,
        out.display()
    );
    Ok(())
}

pub fn eval(
    s: &Settings,
    checkpoint: &Path,
    data: Option<&Path>,
    split: Split,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let model = read_checkpoint(checkpoint)?;
    if model.head.is_none() {
        return Err(CliError::Runtime(format!(
            "{} has no task head; evaluate a fine-tuned checkpoint",
            checkpoint.display()
        )));
    }
    let corpus = require(load(s, data, split)?, &split.to_string())?;
    check_checkpoint_montage(&model, &corpus)?;
    let report = evaluate(&model, &corpus.samples, s.finetune.batch_size)?;
    print!("{}", report.to_csv());
    if let Some(path) = out {
        fs::write(path, report.to_json()? + "\n")?;
    }
    log::info!("evaluated {} {split} samples", report.count);
    Ok(())
}

pub fn gradcheck(s: &Settings, out: Option<&Path>) -> Result<(), CliError> {
    let labels = s.synthetic_labels()?;
    let rm = build_region_map(&labels)?;
    let mut cfg = s.model_config();
    cfg.dropout = 0.0;
    let model = build_model(&cfg, &rm, s.seed)?;
    let elements = model.params.numel();
    if elements > s.gradcheck.max_elements {
        return Err(CliError::Runtime(format!(
            "model has {elements} parameter elements, above gradcheck.max_elements = {}; use a desk-scale configuration",
            s.gradcheck.max_elements
        )));
    }
    let (c, n, t) = (labels.len(), s.data.segments, s.preprocess.patch_len);
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let signals = (0..s.gradcheck.batch.max(1))
        .map(|_| PatchedSignal::new(Tensor::randn(&[c, n, t], 0.5, &mut rng)))
        .collect::<Result<Vec<_>, _>>()?;
    let refs: Vec<&PatchedSignal> = signals.iter().collect();
    let batch = Batch::new(&refs)?;
    let masks = (0..signals.len() as u64)
        .map(|i| sample_mask(n, cfg.mask_ratio, s.seed.wrapping_add(i)))
        .collect::<Result<Vec<_>, _>>()?;
    log::info!(
        "checking {elements} elements in {} parameter tensors ({:?} differences, eps {:e})",
        model.params.len(),
        s.gradcheck.stencil,
        s.gradcheck.eps
    );
    let t0 = Instant::now();
    let mut store = model.params.clone();
    let report = finite_diff_check_with(
        |g, p| model.pretrain_loss(g, p, &batch, &masks),
        &mut store,
        s.gradcheck.eps,
        DEFAULT_REL_FLOOR,
        s.gradcheck.stencil.into(),
    )?;
    let seconds = t0.elapsed().as_secs_f64();
    let pass = report.max_rel_err <= s.gradcheck.tolerance;
    println!(
        "max relative error {:.3e} at {}[{}] (analytic {:.6e}, numeric {:.6e}); {} elements in {seconds:.1} s: {}",
        report.max_rel_err,
        report.worst_param,
        report.worst_index,
        report.analytic,
        report.numeric,
        report.elements,
        if pass { "PASS" } else { "FAIL" }
    );
    if let Some(path) = out {
        write_json(
            path,
            &json!({
                "max_rel_err": report.max_rel_err,
                "worst_param": report.worst_param,
                "worst_index": report.worst_index,
                "analytic": report.analytic,
                "numeric": report.numeric,
                "elements": report.elements,
                "eps": s.gradcheck.eps,
                "stencil": s.gradcheck.stencil,
                "tolerance": s.gradcheck.tolerance,
                "pass": pass,
            }),
        )?;
    }
    if !pass {
        return Err(CliError::Runtime(format!(
            "gradient check exceeded tolerance {:e}",
            s.gradcheck.tolerance
        )));
    }
    Ok(())
}

pub fn bench(s: &Settings, out: Option<&Path>) -> Result<(), CliError> {
    let sizes = s.bench_sizes()?;
    let variants = s.bench_variants()?;
    let b = &s.bench;
    let report = run_benchmark(&sizes, &variants, b.d, b.window, b.repeats)?;
    let csv = report.to_csv();
    match out {
        Some(path) => fs::write(path, &csv)?,
        None => print!("{csv}"),
    }
    for fit in &report.slopes {
        log::info!(
            "{}: log-log slope of score entries {:.3}, of wall-clock {:.3}",
            fit.variant,
            fit.count_slope,
            fit.time_slope
        );
    }
    Ok(())
}
