//! Implementations of the six subcommands. Every command that produces an
//! artifact also writes a run manifest next to it and refuses to overwrite
//! existing files unless `--force` is given.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;

use slotforge_core::bteval::{format_table, score_corpus, segmentation_to_bt, Aggregation, MetricsReport};
use slotforge_core::corpus::{derive_bt_gold, load_jsonl, split_by_intent, Corpus, Vocab};
use slotforge_core::encoder::{
    encode, init_params, load_checkpoint, EncoderConfig, EncoderParams,
};
use slotforge_core::probing::{
    branching_baseline, build_tree, export_impact, impact_matrix, import_impact, pool_segments,
    segments_at_depth, BlockAgg, BranchSide, DistanceMetric, Provenance, Segmentation,
};
use slotforge_core::trainer::{parse_config, segment_utterance, train, tune_depth};

use crate::manifest::{guard_overwrite, write_text, RunManifest};
use crate::{BaselineArg, Command, DumpArg, UsageError};

/// One line of the predictions JSONL written by `segment` and read by `eval`.
#[derive(Debug, Serialize, Deserialize)]
struct PredRecord {
    id: String,
    /// Token count, so consumers can cross-check against their own corpus.
    t: usize,
    /// Inclusive (start, end) spans covering [0, t-1].
    spans: Vec<(usize, usize)>,
    provenance: Provenance,
}

impl PredRecord {
    fn new(id: &str, t: usize, seg: Segmentation) -> Self {
        PredRecord {
            id: id.to_string(),
            t,
            spans: seg.spans,
            provenance: seg.provenance,
        }
    }
}

pub(crate) fn run(cmd: Command, force: bool) -> Result<()> {
    match cmd {
        Command::Split { corpus, ratio, seed, out } => cmd_split(&corpus, ratio, seed, &out, force),
        Command::Segment { corpus, checkpoint, depth, baseline, impact_dir, out } => {
            cmd_segment(&corpus, checkpoint.as_deref(), depth, baseline, impact_dir.as_deref(), &out, force)
        }
        Command::Train { train, valid, config, out_dir } => {
            cmd_train(&train, &valid, &config, &out_dir, force)
        }
        Command::Eval { pred, gold_corpus, out, macro_agg } => {
            cmd_eval(&pred, &gold_corpus, &out, macro_agg, force)
        }
        Command::TuneDepth { valid, checkpoint, dmin, dmax } => {
            cmd_tune_depth(&valid, &checkpoint, dmin, dmax)
        }
        Command::Inspect { corpus, checkpoint, utterance_id, dump, depth, out } => {
            cmd_inspect(&corpus, checkpoint.as_deref(), &utterance_id, dump, depth, &out, force)
        }
    }
}

/// The `SLOTFORGE_SEED` environment variable overrides any configured seed.
fn resolve_seed(configured: u64) -> Result<u64> {
    match std::env::var("SLOTFORGE_SEED") {
        Ok(raw) => {
            let seed = raw.trim().parse::<u64>().map_err(|_| {
                UsageError(format!(
                    "SLOTFORGE_SEED must be a non-negative integer, got `{raw}`"
                ))
            })?;
            if seed != configured {
                log::info!("SLOTFORGE_SEED={seed} overrides configured seed {configured}");
            }
            Ok(seed)
        }
        Err(std::env::VarError::NotPresent) => Ok(configured),
        Err(e) => Err(UsageError(format!("SLOTFORGE_SEED is not readable: {e}")).into()),
    }
}

/// Loads the checkpoint when given; otherwise initializes a fresh encoder
/// seeded from `SLOTFORGE_SEED` (default 0) and warns, naming the seed.
fn load_or_fresh_encoder(
    checkpoint: Option<&Path>,
    corpus: &Corpus,
    manifest: &mut RunManifest,
) -> Result<(EncoderConfig, EncoderParams, Vocab)> {
    match checkpoint {
        Some(path) => {
            manifest.add_input(path)?;
            let (cfg, params, vocab) =
                load_checkpoint(path).with_context(|| format!("loading `{}`", path.display()))?;
            manifest.seed = Some(cfg.seed);
            Ok((cfg, params, vocab))
        }
        None => {
            let seed = resolve_seed(0)?;
            log::warn!(
                "no checkpoint given; probing a fresh randomly initialized encoder (seed {seed})"
            );
            manifest.seed = Some(seed);
            let vocab = corpus.vocab().clone();
            let mut cfg = EncoderConfig::new(vocab.len());
            cfg.seed = seed;
            // Leave room for the classification marker prepended to every row.
            let longest = corpus.max_tokens();
            if longest + 1 > cfg.max_len {
                cfg.max_len = longest + 1;
            }
            let params = init_params(&cfg)?;
            Ok((cfg, params, vocab))
        }
    }
}

fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_text(path, &text)
}

fn cmd_split(corpus_path: &Path, ratio: f64, seed: u64, out: &Path, force: bool) -> Result<()> {
    let seed = resolve_seed(seed)?;
    let corpus = load_jsonl(corpus_path)?;
    let spec = split_by_intent(&corpus, ratio, seed)?;
    let p1_path = out.with_extension("p1.jsonl");
    let p2_path = out.with_extension("p2.jsonl");
    for p in [out, &p1_path, &p2_path] {
        guard_overwrite(p, force)?;
    }

    let mut manifest = RunManifest::new("split", json!({ "ratio": ratio, "seed": seed }));
    manifest.seed = Some(seed);
    manifest.add_input(corpus_path)?;

    write_json_pretty(out, &spec)?;
    corpus.filter_intents(&spec.p1_intents).write_jsonl(&p1_path)?;
    corpus.filter_intents(&spec.p2_intents).write_jsonl(&p2_path)?;
    for p in [out, &p1_path, &p2_path] {
        manifest.add_output(p);
    }
    manifest.write_next_to(out, force)?;

    println!(
        "split {} intents into {} / {}; wrote {}, {}, {}",
        corpus.intents().len(),
        spec.p1_intents.len(),
        spec.p2_intents.len(),
        out.display(),
        p1_path.display(),
        p2_path.display()
    );
    Ok(())
}

fn cmd_segment(
    corpus_path: &Path,
    checkpoint: Option<&Path>,
    depth: usize,
    baseline: BaselineArg,
    impact_dir: Option<&Path>,
    out: &Path,
    force: bool,
) -> Result<()> {
    let corpus = load_jsonl(corpus_path)?;
    guard_overwrite(out, force)?;

    let baseline_name = match baseline {
        BaselineArg::Upl => "upl",
        BaselineArg::Lb => "lb",
        BaselineArg::Rb => "rb",
    };
    let mut manifest = RunManifest::new(
        "segment",
        json!({
            "depth": depth,
            "baseline": baseline_name,
            "impact_dir": impact_dir.map(|d| d.display().to_string()),
            "metric": "euclidean",
            "block_agg": "mean",
        }),
    );
    manifest.add_input(corpus_path)?;

    let records: Vec<PredRecord> = match baseline {
        BaselineArg::Lb | BaselineArg::Rb => {
            let side = if baseline == BaselineArg::Lb {
                BranchSide::Left
            } else {
                BranchSide::Right
            };
            corpus
                .utterances
                .iter()
                .map(|u| PredRecord::new(&u.id, u.len(), branching_baseline(u.len(), depth, side)))
                .collect()
        }
        BaselineArg::Upl => {
            if let Some(dir) = impact_dir {
                let mut recs = Vec::with_capacity(corpus.utterances.len());
                for u in &corpus.utterances {
                    let path = dir.join(format!("{}.impact", u.id));
                    let im = import_impact(&path)
                        .with_context(|| format!("importing impact matrix for `{}`", u.id))?;
                    if im.utterance_id() != u.id {
                        bail!(
                            "impact file `{}` is for utterance `{}`, expected `{}`",
                            path.display(),
                            im.utterance_id(),
                            u.id
                        );
                    }
                    if im.t() != u.len() {
                        bail!(
                            "impact matrix for `{}` has T={} but the utterance has {} tokens",
                            u.id,
                            im.t(),
                            u.len()
                        );
                    }
                    manifest.add_input(&path)?;
                    let tree = build_tree(im.matrix(), depth, BlockAgg::Mean)?;
                    recs.push(PredRecord::new(&u.id, u.len(), segments_at_depth(&tree, depth)?));
                }
                recs
            } else {
                let (enc_cfg, params, vocab) =
                    load_or_fresh_encoder(checkpoint, &corpus, &mut manifest)?;
                let segs: Vec<Segmentation> = corpus
                    .utterances
                    .par_iter()
                    .map(|u| {
                        segment_utterance(
                            &params,
                            &enc_cfg,
                            &vocab,
                            u,
                            depth,
                            DistanceMetric::Euclidean,
                            BlockAgg::Mean,
                        )
                    })
                    .collect::<slotforge_core::Result<Vec<_>>>()?;
                corpus
                    .utterances
                    .iter()
                    .zip(segs)
                    .map(|(u, seg)| PredRecord::new(&u.id, u.len(), seg))
                    .collect()
            }
        }
    };

    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    write_text(out, &text)?;
    manifest.add_output(out);
    manifest.write_next_to(out, force)?;

    println!(
        "segmented {} utterances ({} baseline, depth {}) -> {}",
        records.len(),
        baseline_name,
        depth,
        out.display()
    );
    Ok(())
}

fn cmd_train(
    train_path: &Path,
    valid_path: &Path,
    config_path: &Path,
    out_dir: &Path,
    force: bool,
) -> Result<()> {
    let text = fs::read_to_string(config_path)
        .with_context(|| format!("reading `{}`", config_path.display()))?;
    let mut cfg = parse_config(&text)?;
    cfg.seed = resolve_seed(cfg.seed)?;

    let c_train = load_jsonl(train_path)?;
    let c_valid = load_jsonl(valid_path)?;

    fs::create_dir_all(out_dir)
        .with_context(|| format!("creating `{}`", out_dir.display()))?;
    let ckpt_path = out_dir.join("encoder.ckpt");
    let report_path = out_dir.join("train_report.json");
    for p in [&ckpt_path, &report_path] {
        guard_overwrite(p, force)?;
    }

    let mut manifest = RunManifest::new("train", serde_json::to_value(&cfg)?);
    manifest.seed = Some(cfg.seed);
    for p in [train_path, valid_path, config_path] {
        manifest.add_input(p)?;
    }

    let (report, _params) = train(&c_train, &c_valid, &cfg, &ckpt_path)?;
    write_json_pretty(&report_path, &report)?;
    manifest.add_output(&ckpt_path);
    manifest.add_output(&report_path);
    manifest.write_next_to(out_dir, force)?;

    for e in 0..report.epochs {
        println!(
            "epoch {:>3}: mean loss {:.4}  valid H-Mean {:.4}  ({:.1}s)",
            e + 1,
            report.mean_total[e],
            report.valid_h_mean[e],
            report.epoch_seconds[e]
        );
    }
    println!(
        "baseline H-Mean {:.4}; best epoch {} with H-Mean {:.4}",
        report.baseline_h_mean, report.best_epoch, report.best_h_mean
    );
    println!("checkpoint: {}", ckpt_path.display());
    Ok(())
}

/// Metrics JSON written by `eval`: summed-count metrics always, per-utterance
/// means only when requested.
#[derive(Serialize)]
struct EvalOutput<'a> {
    micro: &'a MetricsReport,
    #[serde(rename = "macro", skip_serializing_if = "Option::is_none")]
    macro_agg: Option<&'a MetricsReport>,
}

fn cmd_eval(
    pred_path: &Path,
    gold_path: &Path,
    out: &Path,
    macro_agg: bool,
    force: bool,
) -> Result<()> {
    guard_overwrite(out, force)?;
    let corpus = load_jsonl(gold_path)?;
    let text = fs::read_to_string(pred_path)
        .with_context(|| format!("reading `{}`", pred_path.display()))?;

    let mut by_id: HashMap<String, PredRecord> = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: PredRecord = serde_json::from_str(line)
            .with_context(|| format!("{}:{}", pred_path.display(), lineno + 1))?;
        let id = rec.id.clone();
        if by_id.insert(id.clone(), rec).is_some() {
            bail!("duplicate prediction for utterance `{id}`");
        }
    }

    let mut preds = Vec::with_capacity(corpus.utterances.len());
    let mut golds = Vec::with_capacity(corpus.utterances.len());
    for u in &corpus.utterances {
        let rec = by_id
            .get(&u.id)
            .ok_or_else(|| anyhow!("no prediction for utterance `{}`", u.id))?;
        if rec.t != u.len() {
            bail!(
                "prediction for `{}` says T={} but the gold utterance has {} tokens",
                u.id,
                rec.t,
                u.len()
            );
        }
        let seg = Segmentation {
            spans: rec.spans.clone(),
            provenance: rec.provenance.clone(),
        };
        preds.push(segmentation_to_bt(&seg, u.len())?);
        golds.push(derive_bt_gold(u));
    }

    let micro = score_corpus(&preds, &golds, Aggregation::Micro)?;
    println!("{}", format_table(&micro));
    let macro_report = if macro_agg {
        let m = score_corpus(&preds, &golds, Aggregation::Macro)?;
        println!();
        println!("macro (mean of per-utterance metrics):");
        println!("{}", format_table(&m));
        Some(m)
    } else {
        None
    };

    let mut manifest = RunManifest::new("eval", json!({ "macro": macro_agg }));
    manifest.add_input(pred_path)?;
    manifest.add_input(gold_path)?;
    write_json_pretty(
        out,
        &EvalOutput {
            micro: &micro,
            macro_agg: macro_report.as_ref(),
        },
    )?;
    manifest.add_output(out);
    manifest.write_next_to(out, force)?;
    Ok(())
}

fn cmd_tune_depth(valid_path: &Path, checkpoint: &Path, dmin: usize, dmax: usize) -> Result<()> {
    if dmin > dmax {
        return Err(UsageError(format!("--dmin {dmin} must not exceed --dmax {dmax}")).into());
    }
    let (enc_cfg, params, vocab) =
        load_checkpoint(checkpoint).with_context(|| format!("loading `{}`", checkpoint.display()))?;
    let corpus = load_jsonl(valid_path)?;
    let depths: Vec<usize> = (dmin..=dmax).collect();
    let (best, table) = tune_depth(
        &params,
        &enc_cfg,
        &vocab,
        &corpus,
        DistanceMetric::Euclidean,
        BlockAgg::Mean,
        &depths,
    )?;
    println!("depth  H-Mean");
    for (d, h) in &table {
        println!("{:>5}  {:>6.2}", d, h * 100.0);
    }
    println!("best depth: {best}");
    Ok(())
}

fn cmd_inspect(
    corpus_path: &Path,
    checkpoint: Option<&Path>,
    utterance_id: &str,
    dump: DumpArg,
    depth: usize,
    out: &Path,
    force: bool,
) -> Result<()> {
    let corpus = load_jsonl(corpus_path)?;
    let u = corpus.by_id(utterance_id).ok_or_else(|| {
        anyhow!(
            "utterance `{}` not found in `{}` ({} utterances)",
            utterance_id,
            corpus_path.display(),
            corpus.len()
        )
    })?;
    guard_overwrite(out, force)?;

    let dump_name = match dump {
        DumpArg::Impact => "impact",
        DumpArg::Tree => "tree",
        DumpArg::Segsim => "segsim",
    };
    let mut manifest = RunManifest::new(
        "inspect",
        json!({
            "utterance_id": utterance_id,
            "dump": dump_name,
            "depth": depth,
            "metric": "euclidean",
            "block_agg": "mean",
        }),
    );
    manifest.add_input(corpus_path)?;
    let (enc_cfg, params, vocab) = load_or_fresh_encoder(checkpoint, &corpus, &mut manifest)?;
    let im = impact_matrix(&params, &enc_cfg, &vocab, u, DistanceMetric::Euclidean)?;

    match dump {
        DumpArg::Impact => export_impact(out, &im)?,
        DumpArg::Tree => {
            let tree = build_tree(im.matrix(), depth, BlockAgg::Mean)?;
            write_json_pretty(out, &tree)?;
        }
        DumpArg::Segsim => {
            let tree = build_tree(im.matrix(), depth, BlockAgg::Mean)?;
            let seg = segments_at_depth(&tree, depth)?;
            let ids = vocab.encode(&u.tokens);
            let emb = encode(&params, &enc_cfg, &ids, &BTreeSet::new())?;
            let sm = pool_segments(&emb, &seg)?;
            let labels: Vec<String> =
                seg.spans.iter().map(|(s, e)| format!("{s}:{e}")).collect();
            let mut text = String::from("span");
            for l in &labels {
                text.push(',');
                text.push_str(l);
            }
            text.push('\n');
            for i in 0..labels.len() {
                text.push_str(&labels[i]);
                for j in 0..labels.len() {
                    let a = sm.rows.row(i);
                    let b = sm.rows.row(j);
                    let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
                    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let cos = if na == 0.0 || nb == 0.0 { 0.0 } else { dot / (na * nb) };
                    text.push_str(&format!(",{cos:.6}"));
                }
                text.push('\n');
            }
            write_text(out, &text)?;
        }
    }
    manifest.add_output(out);
    manifest.write_next_to(out, force)?;
    println!("wrote {}", out.display());
    Ok(())
}
