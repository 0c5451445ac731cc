use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use fewer::bench::{self, ManifestSource, TimingReport};
use fewer::dataset::{self, read_features, SynthConfig, UtteranceRecord};
use fewer::evaluate;
use fewer::model::{load_model, save_model, Aggregator, EstimatorModel, ModelConfig};
use fewer::training::{self, Example, TrainConfig};
use fewer::wer::{self, Normalization, ScoredPair};
use fewer::{Error, Estimator};

use crate::config::Settings;
use crate::{BenchArgs, CliError, CurateArgs, EvalArgs, PredictArgs, ScoreArgs, SynthArgs, TrainArgs};

type Result<T> = std::result::Result<T, CliError>;

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    Ok(())
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    s.push('\n');
    write_text(path, &s)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn score(a: ScoreArgs, s: &mut Settings) -> Result<()> {
    let manifest: PathBuf = s.required("manifest", a.manifest)?;
    let out: PathBuf = s.required("out", a.out)?;
    let clamp = s.get("clamp", a.clamp, true)?;
    let lowercase = s.get("lowercase", a.lowercase, true)?;
    let errors_path = s.get("errors", a.errors, with_suffix(&out, ".errors.jsonl"))?;
    s.log("score");

    let records = dataset::load_manifest(&manifest)?;
    let norm = Normalization { lowercase };
    let mut scored = Vec::with_capacity(records.len());
    let mut failures = Vec::new();
    for r in &records {
        match wer::score_record(r, norm, clamp) {
            Ok(p) => scored.push(p),
            Err(e) => failures.push(json!({ "id": r.id, "error": e.to_string() })),
        }
    }
    if !failures.is_empty() {
        log::warn!("{} of {} records could not be scored", failures.len(), records.len());
        dataset::write_jsonl(&errors_path, &failures)?;
    }
    if scored.is_empty() {
        return Err(Error::Data(format!("no record in {} could be scored", manifest.display())).into());
    }
    dataset::write_jsonl(&out, &scored)?;
    let corpus = wer::weighted_wer_by_words(scored.iter().map(|p| &p.counts))?;
    log::info!("scored {} records, corpus WER {:.2}%", scored.len(), 100.0 * corpus);
    Ok(())
}

pub fn curate(a: CurateArgs, s: &mut Settings) -> Result<()> {
    let manifest: PathBuf = s.required("manifest", a.manifest)?;
    let out: PathBuf = s.required("out", a.out)?;
    let max_dur = s.get("max-dur", a.max_dur, 10.0)?;
    let bins = s.get("bins", a.bins, 100usize)?;
    let seed = s.seed(a.seed)?;
    let stats_path: Option<PathBuf> = s.optional("stats", a.stats)?;
    s.log("curate");

    let scored = dataset::load_scored(&manifest)?;
    let before = scored.len();
    let kept = dataset::filter_by_duration(scored, max_dur);
    log::info!("duration filter kept {} of {before} records", kept.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (curated, summary) = dataset::balance_zero_wer(kept, bins, &mut rng)?;
    log::info!(
        "zero-WER pairs {} -> {} (cap from bins {} and {}: {} + {})",
        summary.zero_wer_before,
        summary.zero_wer_kept,
        summary.second.0,
        summary.third.0,
        summary.second.1,
        summary.third.1
    );
    dataset::write_jsonl(&out, &curated)?;
    let stats = dataset::compute_stats(&curated)?;
    let label = out.file_stem().map_or("curated".into(), |s| s.to_string_lossy().into_owned());
    let table = dataset::render_stats_table(&[(label.as_str(), &stats)]);
    print!("{table}");
    if let Some(p) = stats_path {
        write_text(&p, &table)?;
    }
    Ok(())
}

/// Speech and text feature dims of the first record.
fn feature_dims(pairs: &[ScoredPair], base: &Path) -> Result<(usize, usize)> {
    let first = pairs
        .first()
        .ok_or_else(|| Error::Data("training manifest is empty".into()))?;
    let (sp, tp) = first.record.feature_paths(base);
    Ok((read_features(&sp)?.dim(), read_features(&tp)?.dim()))
}

fn parse_seeds(list: &str) -> Result<Vec<u64>> {
    list.split(',')
        .map(|p| {
            p.trim()
                .parse()
                .map_err(|e| CliError::Config(format!("seed list {list:?}: {e}")))
        })
        .collect()
}

pub fn train(a: TrainArgs, s: &mut Settings) -> Result<()> {
    let train_path: PathBuf = s.required("train", a.train)?;
    let dev_path: PathBuf = s.required("dev", a.dev)?;
    let agg: String = s.get("agg", a.agg, "avg".into())?;
    let aggregator: Aggregator = agg.parse().map_err(|e: Error| CliError::Config(e.to_string()))?;
    let defaults = TrainConfig::default();
    let cfg = TrainConfig {
        lr_max: s.get("lr", a.lr, defaults.lr_max)?,
        t_max_epochs: s.get("tmax", a.tmax, defaults.t_max_epochs)?,
        max_epochs: s.get("max-epochs", a.max_epochs, defaults.max_epochs)?,
        patience: s.get("patience", a.patience, defaults.patience)?,
        batch_size: s.get("batch", a.batch, defaults.batch_size)?,
        dropout: s.get("dropout", a.dropout, defaults.dropout)?,
        seed: s.seed(a.seed)?,
        ..defaults
    };
    let seeds: Option<String> = s.optional("seeds", a.seeds)?;
    let out: PathBuf = s.required("out", a.out)?;
    let history: PathBuf = s.get("history", a.history, with_suffix(&out, ".history.csv"))?;
    s.log("train");
    cfg.validate()?;

    let train_pairs = dataset::load_scored(&train_path)?;
    let dev_pairs = dataset::load_scored(&dev_path)?;
    let train_base = dataset::manifest_dir(&train_path);
    let dims = feature_dims(&train_pairs, &train_base)?;
    let config = ModelConfig::new(aggregator, dims.0, dims.1);
    let probe = Estimator::init(config, cfg.seed)?;
    let train_set = training::prepare_examples(&probe, &train_pairs, &train_base)?;
    let dev_set = training::prepare_examples(&probe, &dev_pairs, &dataset::manifest_dir(&dev_path))?;
    let targets: Vec<f64> = dev_pairs.iter().map(|p| p.wer).collect();

    let run = |seed: u64, model_path: &Path, history_path: &Path| -> Result<(f64, f64)> {
        let run_cfg = TrainConfig { seed, ..cfg.clone() };
        let model = Estimator::init(config, seed)?;
        let outcome = training::train(model, &train_set, &dev_set, &run_cfg)?;
        save_model(&outcome.model, model_path)?;
        write_text(history_path, &training::history_csv(&outcome.history))?;
        let est = training::predict(&outcome.model, &dev_set)?;
        let rmse = evaluate::rmse(&targets, &est)?;
        let pcc = evaluate::pcc(&targets, &est)?;
        log::info!(
            "seed {seed}: {} epochs, best epoch {} (dev MSE {:.6}), dev RMSE {rmse:.4}, PCC {pcc:.4} -> {}",
            outcome.history.len(),
            outcome.best_epoch,
            outcome.best_dev_mse,
            model_path.display()
        );
        Ok((rmse, pcc))
    };

    match seeds {
        None => {
            let (rmse, pcc) = run(cfg.seed, &out, &history)?;
            println!(
                "{}",
                json!({ "model": out, "seed": cfg.seed, "dev_rmse": rmse, "dev_pcc": pcc })
            );
        }
        Some(list) => {
            let seeds = parse_seeds(&list)?;
            let (mut r, mut p) = (Vec::new(), Vec::new());
            for &k in &seeds {
                let path = with_suffix(&out, &format!(".seed{k}"));
                let hist = with_suffix(&path, ".history.csv");
                let (rmse, pcc) = run(k, &path, &hist)?;
                r.push(rmse);
                p.push(pcc);
            }
            let summary = training::SeedSummary::from_runs(seeds, r, p);
            println!("{}", summary.render());
            write_json(&with_suffix(&out, ".seeds.json"), &summary)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Method {
    Fewer,
    Cs,
    CsProb,
}

pub fn predict(a: PredictArgs, s: &mut Settings) -> Result<()> {
    let method_name: String = s.get("method", a.method, "fewer".into())?;
    let method = match method_name.as_str() {
        "fewer" => Method::Fewer,
        "cs" => Method::Cs,
        "cs-prob" => Method::CsProb,
        other => return Err(CliError::Config(format!("unknown method {other:?} (fewer, cs, cs-prob)"))),
    };
    let model_path: Option<PathBuf> = if method == Method::Fewer {
        Some(s.required("model", a.model)?)
    } else {
        s.optional("model", a.model)?
    };
    let manifest: PathBuf = s.required("manifest", a.manifest)?;
    let out: PathBuf = s.required("out", a.out)?;
    s.log("predict");

    let records = dataset::load_manifest(&manifest)?;
    let estimates: Vec<f64> = match method {
        Method::Fewer => {
            let model: Estimator = load_model(model_path.as_deref().expect("required above"))?;
            let base = dataset::manifest_dir(&manifest);
            let examples = records
                .iter()
                .map(|r| {
                    let (sp, tp) = r.feature_paths(&base);
                    Ok(Example {
                        id: r.id.clone(),
                        input: model.prepare(&read_features(&sp)?, &read_features(&tp)?)?,
                        target: 0.0,
                    })
                })
                .collect::<fewer::Result<Vec<_>>>()?;
            training::predict(&model, &examples)?
        }
        Method::Cs | Method::CsProb => records
            .iter()
            .map(|r| {
                let lp = r.token_logprobs.as_deref().ok_or_else(|| {
                    Error::Data(format!("record {} has no token_logprobs", r.id))
                })?;
                if method == Method::Cs {
                    wer::confidence_score(lp)
                } else {
                    wer::confidence_score_prob(lp)
                }
            })
            .collect::<fewer::Result<Vec<_>>>()?,
    };
    let rows: Vec<_> = records
        .iter()
        .zip(&estimates)
        .map(|(r, e)| json!({ "id": r.id, "estimate": e }))
        .collect();
    dataset::write_jsonl(&out, &rows)?;
    log::info!("wrote {} estimates to {}", rows.len(), out.display());
    Ok(())
}

fn read_predictions(path: &Path) -> Result<std::collections::HashMap<String, f64>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut out = std::collections::HashMap::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: n + 1,
            msg,
        };
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| parse(e.to_string()))?;
        let id = v["id"].as_str().ok_or_else(|| parse("missing string id".into()))?;
        let est = v["estimate"]
            .as_f64()
            .ok_or_else(|| parse("missing numeric estimate".into()))?;
        if out.insert(id.to_string(), est).is_some() {
            return Err(parse(format!("duplicate id {id}")).into());
        }
    }
    Ok(out)
}

pub fn eval(a: EvalArgs, s: &mut Settings) -> Result<()> {
    let pred: PathBuf = s.required("pred", a.pred)?;
    let scored_path: PathBuf = s.required("scored", a.scored)?;
    let out: PathBuf = s.required("out", a.out)?;
    let name: String = s.get("name", a.name, "estimate".into())?;
    let hist_csv: Option<PathBuf> = s.optional("hist-csv", a.hist_csv)?;
    let speaker_csv: Option<PathBuf> = s.optional("speaker-csv", a.speaker_csv)?;
    let svg: Option<PathBuf> = s.optional("svg", a.svg)?;
    s.log("eval");

    let scored = dataset::load_scored(&scored_path)?;
    let predictions = read_predictions(&pred)?;
    let estimates = scored
        .iter()
        .map(|p| {
            predictions
                .get(&p.record.id)
                .copied()
                .ok_or_else(|| Error::Data(format!("no estimate for record {}", p.record.id)))
        })
        .collect::<fewer::Result<Vec<f64>>>()?;
    if predictions.len() > scored.len() {
        log::warn!("{} estimates have no scored record", predictions.len() - scored.len());
    }
    let report = evaluate::full_report(&scored, &estimates)?;
    write_json(&out, &report)?;
    print!("{}", evaluate::render_report_table(&[(name.as_str(), &report)]));
    if let Some(p) = hist_csv {
        write_text(&p, &evaluate::histogram_csv(&report))?;
    }
    if let Some(p) = speaker_csv {
        write_text(&p, &evaluate::per_speaker_csv(&report.per_speaker))?;
    }
    if let Some(p) = svg {
        let labels: Vec<String> = (0..report.histogram_target.len())
            .map(|k| format!("{}", 2 * k))
            .collect();
        let mut series = vec![("target", report.histogram_target.iter().map(|&c| c as f64).collect())];
        if let Some(h) = &report.histogram_estimate {
            series.push((name.as_str(), h.iter().map(|&c| c as f64).collect()));
        }
        write_text(&p, &evaluate::bar_chart_svg("WER histogram (%)", &labels, &series))?;
    }
    Ok(())
}

fn run_bench<T: fewer::Scalar>(
    model_path: &Path,
    source: &ManifestSource,
    warmup: usize,
    workers: Option<usize>,
) -> Result<(TimingReport, Option<bench::ThroughputReport>)> {
    let model: EstimatorModel<T> = load_model(model_path)?;
    let report = bench::bench_estimator(&model, source, warmup)?;
    let throughput = workers
        .map(|w| bench::bench_throughput(&model, source, w))
        .transpose()?;
    Ok((report, throughput))
}

pub fn bench(a: BenchArgs, s: &mut Settings) -> Result<()> {
    let model: PathBuf = s.required("model", a.model)?;
    let manifest: PathBuf = s.required("manifest", a.manifest)?;
    let warmup = s.get("warmup", a.warmup, bench::DEFAULT_WARMUP)?;
    let precision: String = s.get("precision", a.precision, "f64".into())?;
    let workers: Option<usize> = s.optional("workers", a.workers)?;
    let out: Option<PathBuf> = s.optional("out", a.out)?;
    let baseline: Option<PathBuf> = s.optional("baseline", a.baseline)?;
    s.log("bench");

    let records: Vec<UtteranceRecord> = dataset::load_manifest(&manifest)?;
    let source = ManifestSource::new(records, dataset::manifest_dir(&manifest));
    let (report, throughput) = match precision.as_str() {
        "f64" => run_bench::<f64>(&model, &source, warmup, workers)?,
        "f32" => run_bench::<f32>(&model, &source, warmup, workers)?,
        other => return Err(CliError::Config(format!("unknown precision {other:?} (f64, f32)"))),
    };

    let label = format!("{} ({})", report.aggregator, report.precision);
    match baseline {
        None => print!("{}", bench::render_timing_table(&[(label.as_str(), &report)])),
        Some(p) => {
            let text = fs::read_to_string(&p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            let parse = |msg: String| Error::Parse {
                path: p.clone(),
                line: 1,
                msg,
            };
            let mut value: serde_json::Value = serde_json::from_str(&text).map_err(|e| parse(e.to_string()))?;
            // Accept either a bare report or the file written by `--out`.
            if let Some(inner) = value.get_mut("single_stream") {
                value = inner.take();
            }
            let base: TimingReport = serde_json::from_value(value).map_err(|e| parse(e.to_string()))?;
            let base_label = format!("{} ({})", base.aggregator, base.precision);
            print!(
                "{}",
                bench::render_timing_table(&[(base_label.as_str(), &base), (label.as_str(), &report)])
            );
            let c = bench::compare(&base, &report)?;
            println!(
                "speed-up {:.2}x total ({:.2}% less time), estimator {}, aggregation {}",
                c.total_ratio,
                100.0 * c.reduction,
                c.estimator_ratio,
                c.aggregation
            );
        }
    }
    if let Some(t) = &throughput {
        println!(
            "throughput ({} workers): {:.2} utt/s, RTF {:.6}",
            t.workers, t.utterances_per_second, t.rtf
        );
    }
    if let Some(p) = out {
        write_json(&p, &json!({ "single_stream": report, "throughput": throughput }))?;
    }
    Ok(())
}

pub fn synth(a: SynthArgs, s: &mut Settings) -> Result<()> {
    let out: PathBuf = s.required("out", a.out)?;
    let train = s.get("train", a.train, 2000usize)?;
    let dev = s.get("dev", a.dev, 500usize)?;
    let test = s.get("test", a.test, 500usize)?;
    let speech_dim = s.get("speech-dim", a.speech_dim, 32usize)?;
    let text_dim = s.get("text-dim", a.text_dim, 16usize)?;
    let seed = s.seed(a.seed)?;
    s.log("synth");

    let cfg = SynthConfig::new(train, dev, test, speech_dim, text_dim, seed);
    let (pairs, _) = dataset::synth_dataset(&cfg, &out)?;
    log::info!("wrote {} synthetic pairs to {}", pairs.len(), out.display());
    Ok(())
}
