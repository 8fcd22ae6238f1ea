//! Command implementations. Each returns a `pemi_core::Result` so `main`
//! can map error categories onto exit codes.

use crate::config::RunConfig;
use pemi_core::checkpoint::{load_checkpoint, save_checkpoint};
use pemi_core::data::{class_stats, generate_synthetic, parse_dataset, write_dataset, Instance};
use pemi_core::encoder::{EncoderConfig, EncoderModel};
use pemi_core::error::{Error, Result};
use pemi_core::export::{embedding_rows, rows_to_csv, rows_to_svg};
use pemi_core::hlr::{render_weight_table, LabelHierarchy};
use pemi_core::metrics::MetricsReport;
use pemi_core::model::{count_trainable, PemiModel};
use pemi_core::parallel::ExecMode;
use pemi_core::template::{parse_layout, Vocab};
use pemi_core::train::{evaluate, fit};
use std::fmt::Write as _;
use std::path::Path;

fn encode_set(model: &PemiModel, set: &[Instance]) -> Result<Vec<(pemi_core::template::ModifiedInput, Vec<usize>)>> {
    set.iter()
        .enumerate()
        .map(|(i, inst)| model.encode_instance(inst, i + 1))
        .collect()
}

fn render_metrics(report: &MetricsReport) -> String {
    let mut out = String::new();
    for level in &report.per_level {
        let _ = writeln!(
            out,
            "level {}: macro-F1 {:.4}  accuracy {:.4}",
            level.level, level.macro_f1, level.accuracy
        );
        for (label, f1) in &level.per_class_f1 {
            let _ = writeln!(out, "  {label}: {:.4}", f1);
        }
    }
    out
}

pub fn cmd_train(config: &RunConfig, seed_override: Option<u64>, out_override: Option<&Path>) -> Result<()> {
    let hierarchy = LabelHierarchy::load(config.paths.require("hierarchy")?)?;
    let train_set = parse_dataset(config.paths.require("train")?, &hierarchy)?;
    let dev_set = parse_dataset(config.paths.require("dev")?, &hierarchy)?;
    let out_dir = match out_override {
        Some(p) => p.to_path_buf(),
        None => config.paths.require("out")?.to_path_buf(),
    };

    let mut train_config = config.train.clone();
    if let Some(seed) = seed_override {
        train_config.seed = seed;
    }
    let lambda = train_config.resolved_lambda(hierarchy.num_levels())?;

    let corpus: Vec<String> = train_set
        .iter()
        .flat_map(|i| [i.arg1.clone(), i.arg2.clone()])
        .collect();
    let vocab = Vocab::build(corpus, 1)?;
    let encoder_config = EncoderConfig {
        vocab_size: vocab.len(),
        d_model: config.encoder.d_model,
        n_layers: config.encoder.n_layers,
        n_heads: config.encoder.n_heads,
        d_ff: config.encoder.d_ff,
        max_seq_len: config.encoder.max_seq_len,
        seed: config.encoder.seed,
    };
    let encoder = EncoderModel::init(&encoder_config)?;
    let template = parse_layout(&config.layout)?;
    let mut model = PemiModel::build(
        encoder,
        template,
        vocab,
        hierarchy.clone(),
        train_config.seed,
        config.normalization,
        config.encoder.prompt_positional,
        config.warm_start,
    )?;

    let breakdown = model.breakdown();
    log::info!(
        "trainable parameters: prompt {} + bottom {} + units {} = {}",
        breakdown.prompt,
        breakdown.bottom,
        breakdown.units,
        breakdown.total()
    );

    let outcome = fit(&mut model, &train_set, &dev_set, &train_config, ExecMode::default())?;
    outcome.best.restore(&mut model);

    std::fs::create_dir_all(&out_dir)?;
    std::fs::write(out_dir.join("train_log.jsonl"), outcome.log_jsonl())?;
    let ckpt_dir = out_dir.join("checkpoint");
    save_checkpoint(&ckpt_dir, &model, &lambda)?;
    println!(
        "trained {} steps, best dev summed macro-F1 {:.4}",
        outcome.steps, outcome.best_score
    );
    println!("checkpoint written to {}", ckpt_dir.display());

    if let Some(test_path) = config.paths.test.as_deref() {
        if test_path.exists() {
            let test_set = parse_dataset(test_path, &hierarchy)?;
            let encoded = encode_set(&model, &test_set)?;
            let report = evaluate(&model, &encoded, ExecMode::default())?;
            print!("{}", render_metrics(&report));
            std::fs::write(
                out_dir.join("test_metrics.json"),
                serde_json::to_string_pretty(&report).map_err(Error::Json)?,
            )?;
        }
    }
    Ok(())
}

pub fn cmd_eval(checkpoint: &Path, data: &Path, out: Option<&Path>) -> Result<()> {
    let (model, _) = load_checkpoint(checkpoint)?;
    let dataset = parse_dataset(data, &model.hierarchy).map_err(|e| match e {
        // a dataset that does not fit the checkpoint's hierarchy is a
        // compatibility problem, not a file-format problem
        Error::Data { line, message } => Error::Data {
            line,
            message: format!("dataset incompatible with checkpoint hierarchy: {message}"),
        },
        other => other,
    })?;
    let encoded = encode_set(&model, &dataset)?;
    let report = evaluate(&model, &encoded, ExecMode::default())?;
    print!("{}", render_metrics(&report));
    let json = serde_json::to_string_pretty(&report).map_err(Error::Json)?;
    if let Some(out) = out {
        if let Some(parent) = out.parent() {
            std::fs::create_dir_all(parent)?;
        }
        std::fs::write(out, &json)?;
    }
    Ok(())
}

pub fn cmd_predict(checkpoint: &Path, arg1: &str, arg2: &str, out: Option<&Path>) -> Result<()> {
    let (model, _) = load_checkpoint(checkpoint)?;
    let probs = model.predict(arg1, arg2)?;
    let mut records = Vec::new();
    for (zi, level_probs) in probs.iter().enumerate() {
        let labels = model.hierarchy.level_labels(zi + 1);
        let mut ranked: Vec<(String, f32)> = labels
            .iter()
            .cloned()
            .zip(level_probs.iter().copied())
            .collect();
        ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(3);
        let line = ranked
            .iter()
            .map(|(l, p)| format!("{l} ({p:.4})"))
            .collect::<Vec<_>>()
            .join(", ");
        println!("level {}: {line}", zi + 1);
        records.push(serde_json::json!({
            "level": zi + 1,
            "top": ranked
                .iter()
                .map(|(l, p)| serde_json::json!({"label": l, "prob": p}))
                .collect::<Vec<_>>(),
        }));
    }
    if let Some(out) = out {
        std::fs::write(
            out,
            serde_json::to_string_pretty(&serde_json::json!({ "levels": records }))
                .map_err(Error::Json)?,
        )?;
    }
    Ok(())
}

pub fn cmd_gen_synth(config: &RunConfig, seed_override: Option<u64>) -> Result<()> {
    let hierarchy = LabelHierarchy::load(config.paths.require("hierarchy")?)?;
    let seed = seed_override.unwrap_or(config.train.seed);
    let bundle = generate_synthetic(&hierarchy, config.synth.per_label, config.synth.vocab_size, seed)?;
    for (key, split) in [
        ("train", &bundle.train),
        ("dev", &bundle.dev),
        ("test", &bundle.test),
    ] {
        let path = config.paths.require(key)?;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        write_dataset(path, split)?;
        println!("{key}: {} instances -> {}", split.len(), path.display());
    }
    print!("{}", class_stats(&bundle, &hierarchy).render());
    Ok(())
}

pub fn cmd_inspect_weights(checkpoint: &Path) -> Result<()> {
    let (model, _) = load_checkpoint(checkpoint)?;
    print!("{}", render_weight_table(&model.verbalizer, &model.hierarchy)?);
    Ok(())
}

pub fn cmd_export_embeddings(checkpoint: &Path, out_dir: &Path, level_range: Option<(usize, usize)>) -> Result<()> {
    let (model, _) = load_checkpoint(checkpoint)?;
    let (from, to) = level_range.unwrap_or((1, model.hierarchy.num_levels()));
    let rows = embedding_rows(&model, from, to)?;
    std::fs::create_dir_all(out_dir)?;
    std::fs::write(out_dir.join("embeddings.csv"), rows_to_csv(&rows))?;
    std::fs::write(
        out_dir.join("embeddings.svg"),
        rows_to_svg(&rows, &model.hierarchy),
    )?;
    println!(
        "exported {} labels (levels {from}..{to}) to {}",
        rows.len(),
        out_dir.display()
    );
    Ok(())
}

pub fn cmd_count_params(config: Option<&RunConfig>, checkpoint: Option<&Path>) -> Result<()> {
    let breakdown = match (config, checkpoint) {
        (_, Some(ckpt)) => {
            let (model, _) = load_checkpoint(ckpt)?;
            model.breakdown()
        }
        (Some(cfg), None) => {
            let hierarchy = LabelHierarchy::load(cfg.paths.require("hierarchy")?)?;
            let template = parse_layout(&cfg.layout)?;
            count_trainable(
                template.prompt_count(),
                cfg.encoder.d_model,
                hierarchy.bottom_size(),
                hierarchy.edge_count(),
            )
        }
        (None, None) => {
            return Err(Error::Config(
                "count-params needs --config or --checkpoint".into(),
            ));
        }
    };
    println!("prompt:            {:>10}", breakdown.prompt);
    println!("bottom_embeddings: {:>10}", breakdown.bottom);
    println!("weight_units:      {:>10}", breakdown.units);
    println!("total:             {:>10}", breakdown.total());
    Ok(())
}
