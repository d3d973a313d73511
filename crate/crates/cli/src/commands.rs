use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use kgr_core::degreembed::{
    load_checkpoint, save_checkpoint, train, Checkpoint, DegreEmbed,
};
use kgr_core::evalrank::{evaluate, KnownAnswers};
use kgr_core::kgdata::{load_dataset, RelationId, SplitDataset, Vocabulary};
use kgr_core::report::sig6;
use kgr_core::rulemine::{extract_rules, write_rules_tsv};
use kgr_core::saturation::{saturation_report, write_saturation_tsv, SaturationOptions};
use kgr_core::sparseops::build_operators;

use crate::config::RunConfig;

/// The data directory given on the command line does not exist.
#[derive(Debug)]
pub struct MissingData(pub PathBuf);

impl fmt::Display for MissingData {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "data directory {} does not exist", self.0.display())
    }
}

impl std::error::Error for MissingData {}

fn load_data(cfg: &RunConfig, inverse: bool) -> Result<SplitDataset> {
    let Some(dir) = &cfg.data else {
        bail!("no data directory given (use --data or `data` in the config)");
    };
    if !dir.is_dir() {
        return Err(MissingData(dir.clone()).into());
    }
    let data = load_dataset(dir, inverse)?;
    eprintln!(
        "loaded {}: {} entities, {} relations, {}/{}/{}/{} facts/train/valid/test",
        dir.display(),
        data.vocab.num_entities(),
        data.vocab.num_base_relations(),
        data.facts.len(),
        data.train.len(),
        data.valid.len(),
        data.test.len()
    );
    Ok(data)
}

/// Dataset plus the model stored in the configured checkpoint.
fn load_model(cfg: &RunConfig) -> Result<(SplitDataset, DegreEmbed)> {
    let path = cfg.ckpt_path();
    let ckpt = load_checkpoint(&path)?;
    let data = load_data(cfg, ckpt.header.hyperparams.inverse)?;
    let (model, _) = ckpt.restore(&data)?;
    Ok((data, model))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    Ok(BufWriter::new(f))
}

fn resolve_heads(names: &[String], vocab: &Vocabulary) -> Result<Vec<RelationId>> {
    if names.is_empty() {
        return Ok((0..vocab.num_base_relations() as u32).map(RelationId).collect());
    }
    names
        .iter()
        .map(|n| vocab.relation_id(n).with_context(|| format!("unknown relation {n:?}")))
        .collect()
}

pub fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let hp = cfg.model.clone();
    hp.validate()?;
    let data = load_data(cfg, hp.inverse)?;
    let mut model = DegreEmbed::new(hp, &data.vocab, &data.graph())?;
    eprintln!("model has {} parameters", model.store.num_scalars());

    let out = cfg.out_dir();
    let log_path = out.join("train.log.jsonl");
    let mut log = create(&log_path)?;
    let mut io_err = None;
    let outcome = train(&mut model, &data, |rec| {
        eprintln!(
            "epoch {:>3}  loss {:.6}  valid MRR {:.4}  ({:.1}s)",
            rec.epoch, rec.train_loss, rec.valid_mrr, rec.elapsed_s
        );
        let line = serde_json::to_string(rec).expect("log record serializes");
        if let Err(e) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            io_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = io_err {
        return Err(e).with_context(|| format!("writing {}", log_path.display()));
    }
    if outcome.skipped_batches > 0 {
        eprintln!("warning: {} batches skipped on non-finite values", outcome.skipped_batches);
    }
    eprintln!(
        "best epoch {} with valid MRR {:.4}",
        outcome.best_epoch, outcome.best_valid_mrr
    );

    let ckpt_path = cfg.ckpt_path();
    if let Some(dir) = ckpt_path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let ckpt = Checkpoint::new(
        &model,
        &data.vocab,
        &outcome.adam,
        outcome.epochs_run,
        outcome.best_valid_mrr,
    );
    save_checkpoint(&ckpt_path, &ckpt)?;
    eprintln!("wrote {}", ckpt_path.display());
    Ok(())
}

pub fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let (data, model) = load_model(cfg)?;
    let split = &cfg.eval.split;
    let triples = data
        .split(split)
        .with_context(|| format!("unknown split {split:?}"))?;
    let ops = build_operators(&data.graph(), &data.vocab);
    let known = KnownAnswers::new(&data);
    let metrics = evaluate(&model, &data, &ops, &known, triples);
    let json = serde_json::to_string_pretty(&metrics)?;
    let path = cfg.out_dir().join("metrics.json");
    let mut w = create(&path)?;
    writeln!(w, "{json}")?;
    w.flush()?;
    println!("{json}");
    Ok(())
}

pub fn cmd_rules(cfg: &RunConfig) -> Result<()> {
    let (data, model) = load_model(cfg)?;
    let heads = resolve_heads(&cfg.rules.heads, &data.vocab)?;
    if cfg.rules.top_n == 0 {
        bail!("rules.top_n must be positive");
    }
    let rules: Vec<_> = heads
        .iter()
        .zip(model.attention_for(&heads))
        .flat_map(|(&h, attn)| extract_rules(h, &attn, cfg.rules.top_n, cfg.rules.min_normalized))
        .collect();
    let path = cfg.out_dir().join("rules.tsv");
    let mut w = create(&path)?;
    write_rules_tsv(&mut w, &rules, &data.vocab)?;
    w.flush()?;
    eprintln!("wrote {} rules to {}", rules.len(), path.display());
    Ok(())
}

pub fn cmd_saturation(cfg: &RunConfig) -> Result<()> {
    let data = load_data(cfg, false)?;
    let heads = resolve_heads(&cfg.saturation.heads, &data.vocab)?;
    let opts = SaturationOptions {
        max_len: cfg.saturation.max_len,
        include_unary: cfg.saturation.include_unary,
    };
    if opts.max_len < opts.min_len() {
        bail!("saturation.max_len must be at least {}", opts.min_len());
    }
    let records = saturation_report(&data.graph(), &data.vocab, &heads, opts, cfg.saturation.top_n);
    let path = cfg.out_dir().join("saturation.tsv");
    let mut w = create(&path)?;
    write_saturation_tsv(&mut w, &records, &data.vocab)?;
    w.flush()?;
    eprintln!("wrote {} patterns to {}", records.len(), path.display());
    Ok(())
}

pub fn cmd_export_embeddings(cfg: &RunConfig) -> Result<()> {
    let (data, model) = load_model(cfg)?;
    let emb = model.entity_embeddings();
    let path = cfg.out_dir().join("embeddings.tsv");
    let mut w = create(&path)?;
    write!(w, "entity\tsignature")?;
    for i in 0..emb.cols() {
        write!(w, "\th{i}")?;
    }
    writeln!(w)?;
    for (i, (name, sig)) in data
        .vocab
        .entity_names()
        .zip(model.entity_signatures())
        .enumerate()
    {
        write!(w, "{name}\t{sig}")?;
        for x in emb.row(i) {
            write!(w, "\t{}", sig6(*x))?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    eprintln!("wrote {} embeddings to {}", emb.rows(), path.display());
    Ok(())
}
