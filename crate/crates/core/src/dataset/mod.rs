//! Manifests, curation rules and dataset statistics.

mod features;
mod synth;

pub use features::{read_features, validate_features, write_features, FeatureSequence, FEATURE_MAGIC};
pub use synth::{synth_dataset, FrameSampler, SynthConfig, SynthTruth, FRAME_SECONDS};

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::wer::{weighted_wer_by_words, ScoredPair};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// One utterance/hypothesis pair as listed in a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: String,
    pub speaker: String,
    #[serde(rename = "duration_sec")]
    pub duration: f64,
    pub hypothesis: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reference: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token_logprobs: Option<Vec<f64>>,
    #[serde(rename = "speech_feat")]
    pub speech_feature_path: PathBuf,
    #[serde(rename = "text_feat")]
    pub text_feature_path: PathBuf,
    pub split: Split,
}

impl UtteranceRecord {
    /// Feature paths resolved against the directory holding the manifest.
    pub fn feature_paths(&self, base: &Path) -> (PathBuf, PathBuf) {
        (
            resolve(base, &self.speech_feature_path),
            resolve(base, &self.text_feature_path),
        )
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

/// Directory against which a manifest's relative feature paths resolve.
pub fn manifest_dir(manifest: &Path) -> PathBuf {
    manifest
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

/// Rows that carry a unique id.
pub trait Keyed {
    fn key(&self) -> &str;
    fn validate(&self) -> std::result::Result<(), String> {
        Ok(())
    }
}

impl Keyed for UtteranceRecord {
    fn key(&self) -> &str {
        &self.id
    }

    fn validate(&self) -> std::result::Result<(), String> {
        if !(self.duration > 0.0) || !self.duration.is_finite() {
            return Err(format!("duration_sec must be positive, got {}", self.duration));
        }
        Ok(())
    }
}

impl Keyed for ScoredPair {
    fn key(&self) -> &str {
        &self.record.id
    }

    fn validate(&self) -> std::result::Result<(), String> {
        self.record.validate()?;
        if !self.wer.is_finite() || self.wer < 0.0 {
            return Err(format!("invalid wer {}", self.wer));
        }
        Ok(())
    }
}

/// Reads a JSON-lines file of keyed rows, rejecting duplicate ids.
/// Blank lines are skipped; line numbers in errors are 1-based.
pub fn read_jsonl<R: DeserializeOwned + Keyed>(path: &Path) -> Result<Vec<R>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in BufReader::new(file).lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            msg,
        };
        let row: R = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        row.validate().map_err(parse_err)?;
        if !seen.insert(row.key().to_owned()) {
            return Err(parse_err(format!("duplicate id {:?}", row.key())));
        }
        out.push(row);
    }
    Ok(out)
}

pub fn load_manifest(path: &Path) -> Result<Vec<UtteranceRecord>> {
    read_jsonl(path)
}

pub fn load_scored(path: &Path) -> Result<Vec<ScoredPair>> {
    read_jsonl(path)
}

pub fn write_jsonl<R: Serialize>(path: &Path, rows: &[R]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in rows {
        let line = serde_json::to_string(row).map_err(|e| Error::Data(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Keeps records no longer than `max_seconds` (inclusive), preserving order.
/// An infinite limit keeps everything.
pub fn filter_by_duration<R: AsRef<UtteranceRecord>>(records: Vec<R>, max_seconds: f64) -> Vec<R> {
    records
        .into_iter()
        .filter(|r| r.as_ref().duration <= max_seconds)
        .collect()
}

impl AsRef<UtteranceRecord> for UtteranceRecord {
    fn as_ref(&self) -> &UtteranceRecord {
        self
    }
}

impl AsRef<UtteranceRecord> for ScoredPair {
    fn as_ref(&self) -> &UtteranceRecord {
        &self.record
    }
}

/// Bin index of `wer` among `bins` equal-width bins over `[0, 1]`; bin `k`
/// covers `[k/bins, (k+1)/bins)` and the last bin also takes `1.0`.
pub fn wer_bin(wer: f64, bins: usize) -> usize {
    ((wer * bins as f64).floor() as usize).min(bins - 1)
}

/// What zero-WER balancing did.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct BalanceSummary {
    pub zero_wer_before: usize,
    pub zero_wer_kept: usize,
    /// `(bin index, count)` of the second and third most frequent bins.
    pub second: (usize, usize),
    pub third: (usize, usize),
}

/// Caps the zero-WER pairs at the combined count of the second and third
/// most frequent histogram bins, by uniform subsampling. Every pair with
/// non-zero WER is kept and input order is preserved. Ties in bin counts go
/// to the lower bin index.
pub fn balance_zero_wer<R: Rng + ?Sized>(
    scored: Vec<ScoredPair>,
    bins: usize,
    rng: &mut R,
) -> Result<(Vec<ScoredPair>, BalanceSummary)> {
    if bins < 3 {
        return Err(Error::Param(format!("balancing needs at least 3 bins, got {bins}")));
    }
    let mut hist = vec![0usize; bins];
    for p in &scored {
        if !(0.0..=1.0).contains(&p.wer) {
            return Err(Error::Data(format!(
                "record {}: WER {} outside [0, 1]; clamp before balancing",
                p.record.id, p.wer
            )));
        }
        hist[wer_bin(p.wer, bins)] += 1;
    }
    let mut order: Vec<usize> = (0..bins).filter(|&k| hist[k] > 0).collect();
    if order.len() < 3 {
        return Err(Error::Data(format!(
            "balancing undefined: only {} non-empty histogram bins",
            order.len()
        )));
    }
    order.sort_by(|&a, &b| hist[b].cmp(&hist[a]).then(a.cmp(&b)));
    let second = (order[1], hist[order[1]]);
    let third = (order[2], hist[order[2]]);

    let zeros: Vec<usize> = (0..scored.len()).filter(|&i| scored[i].wer == 0.0).collect();
    let cap = second.1 + third.1;
    let keep_n = zeros.len().min(cap);
    let mut keep = vec![true; scored.len()];
    if keep_n < zeros.len() {
        for &i in &zeros {
            keep[i] = false;
        }
        for pick in rand::seq::index::sample(rng, zeros.len(), keep_n) {
            keep[zeros[pick]] = true;
        }
    }
    let summary = BalanceSummary {
        zero_wer_before: zeros.len(),
        zero_wer_kept: keep_n,
        second,
        third,
    };
    let out = scored
        .into_iter()
        .zip(keep)
        .filter_map(|(p, k)| k.then_some(p))
        .collect();
    Ok((out, summary))
}

/// Summary columns of a curated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub segments: usize,
    pub total_duration_hours: f64,
    pub avg_duration_sec: f64,
    pub avg_words: f64,
    pub avg_wer: f64,
    pub std_wer: f64,
    pub wer_wrd: f64,
}

pub fn compute_stats(scored: &[ScoredPair]) -> Result<DatasetStats> {
    if scored.is_empty() {
        return Err(Error::Data("statistics of an empty dataset".into()));
    }
    let n = scored.len() as f64;
    let total_dur: f64 = scored.iter().map(|p| p.record.duration).sum();
    let words: usize = scored.iter().map(|p| p.counts.reference_words).sum();
    let avg_wer = scored.iter().map(|p| p.wer).sum::<f64>() / n;
    let var = scored.iter().map(|p| (p.wer - avg_wer).powi(2)).sum::<f64>() / n;
    Ok(DatasetStats {
        segments: scored.len(),
        total_duration_hours: total_dur / 3600.0,
        avg_duration_sec: total_dur / n,
        avg_words: words as f64 / n,
        avg_wer,
        std_wer: var.sqrt(),
        wer_wrd: weighted_wer_by_words(scored.iter().map(|p| &p.counts))?,
    })
}

/// Aligned text table with one row per named dataset.
pub fn render_stats_table(rows: &[(&str, &DatasetStats)]) -> String {
    let header = [
        "Dataset",
        "#Seg.",
        "Total Dur. (h)",
        "Avg. Dur.",
        "Avg. #Wrd.",
        "Avg. WER",
        "Std. Dev. of WER",
        "WER_wrd",
    ];
    let body: Vec<[String; 8]> = rows
        .iter()
        .map(|(name, s)| {
            [
                name.to_string(),
                s.segments.to_string(),
                format!("{:.2}", s.total_duration_hours),
                format!("{:.2}", s.avg_duration_sec),
                format!("{:.2}", s.avg_words),
                format!("{:.2}%", s.avg_wer * 100.0),
                format!("{:.2}%", s.std_wer * 100.0),
                format!("{:.2}%", s.wer_wrd * 100.0),
            ]
        })
        .collect();
    render_table(&header, &body)
}

pub(crate) fn render_table<const N: usize>(header: &[&str; N], body: &[[String; N]]) -> String {
    let header: Vec<String> = header.iter().map(|h| h.to_string()).collect();
    let body: Vec<Vec<String>> = body.iter().map(|r| r.to_vec()).collect();
    render_rows(&header, &body)
}

/// Right-aligned text table with a dashed rule under the header.
pub(crate) fn render_rows(header: &[String], body: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
    for row in body {
        for (w, cell) in widths.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let line = |cells: &[String], out: &mut String| {
        let parts: Vec<String> = cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{}{c}", " ".repeat(w - c.chars().count())))
            .collect();
        let _ = writeln!(out, "{}", parts.join(" | ").trim_end());
    };
    line(header, &mut out);
    let _ = writeln!(
        out,
        "{}",
        widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-")
    );
    for row in body {
        line(row, &mut out);
    }
    out
}
