//! Synthetic datasets with a known target function.
//!
//! Each record draws a latent mean per tower; frames are that mean plus unit
//! Gaussian noise. The target WER is `sigmoid(w · [pooled speech; pooled
//! text] + b)` computed on the pooled values actually written to disk, plus
//! N(0, 0.02²) label noise, clamped to `[0, 1]`. Reference/hypothesis texts
//! are then built so that the scored WER reproduces the target to within one
//! word in 100-200.

use std::fs;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::features::{write_features, FeatureSequence};
use super::{write_jsonl, Split, UtteranceRecord};
use crate::error::{Error, Result};
use crate::tensor::sigmoid;
use crate::wer::{score_record, Normalization, ScoredPair};

/// Seconds per speech frame (20 ms encoder stride).
pub const FRAME_SECONDS: f64 = 0.02;

/// Draws frame sequences: a per-sequence latent mean plus unit noise.
#[derive(Debug, Clone)]
pub struct FrameSampler {
    pub speech_dim: usize,
    pub text_dim: usize,
    pub speech_frames: RangeInclusive<usize>,
    pub text_frames: RangeInclusive<usize>,
}

impl FrameSampler {
    pub fn new(speech_dim: usize, text_dim: usize) -> Self {
        Self {
            speech_dim,
            text_dim,
            speech_frames: 20..=500,
            text_frames: 3..=40,
        }
    }

    fn sequence<R: Rng + ?Sized>(rng: &mut R, frames: usize, dim: usize) -> FeatureSequence {
        let latent: Vec<f32> = (0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        let mut values = Vec::with_capacity(frames * dim);
        for _ in 0..frames {
            for &mu in &latent {
                values.push(mu + rng.sample::<f32, _>(StandardNormal));
            }
        }
        FeatureSequence::new(frames, dim, values).expect("non-empty finite sequence")
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> (FeatureSequence, FeatureSequence) {
        let sf = rng.gen_range(self.speech_frames.clone());
        let tf = rng.gen_range(self.text_frames.clone());
        let speech = Self::sequence(rng, sf, self.speech_dim);
        let text = Self::sequence(rng, tf, self.text_dim);
        (speech, text)
    }
}

#[derive(Debug, Clone)]
pub struct SynthConfig {
    pub train: usize,
    pub dev: usize,
    pub test: usize,
    pub speech_dim: usize,
    pub text_dim: usize,
    pub seed: u64,
    pub label_noise: f64,
    pub speakers: usize,
}

impl SynthConfig {
    pub fn new(train: usize, dev: usize, test: usize, speech_dim: usize, text_dim: usize, seed: u64) -> Self {
        Self {
            train,
            dev,
            test,
            speech_dim,
            text_dim,
            seed,
            label_noise: 0.02,
            speakers: 24,
        }
    }
}

/// Hidden target function and the exact per-record targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub label_noise: f64,
    /// `(id, noiseless target, noisy clamped target)`.
    pub targets: Vec<(String, f64, f64)>,
}

fn pooled(seq: &FeatureSequence) -> Vec<f64> {
    let mut acc = vec![0.0f64; seq.dim()];
    for i in 0..seq.frames() {
        for (a, &v) in acc.iter_mut().zip(seq.frame(i)) {
            *a += f64::from(v);
        }
    }
    acc.iter().map(|a| a / seq.frames() as f64).collect()
}

fn texts<R: Rng + ?Sized>(rng: &mut R, target: f64) -> (String, String) {
    let n = rng.gen_range(100..=200usize);
    let reference: Vec<String> = (0..n).map(|_| format!("w{}", rng.gen_range(0..1000))).collect();
    let k = ((target * n as f64).round() as usize).min(n);
    let mut hyp = reference.clone();
    // Every replacement is a token absent from the reference, so the edit
    // distance is exactly k.
    for (j, pos) in sample(rng, n, k).into_iter().enumerate() {
        hyp[pos] = format!("x{j}");
    }
    (reference.join(" "), hyp.join(" "))
}

/// Writes `train.jsonl`, `dev.jsonl`, `test.jsonl` (scored manifests),
/// feature files under `feats/`, and `truth.json` into `out_dir`.
/// Returns all scored pairs in split order together with the truth sidecar.
pub fn synth_dataset(cfg: &SynthConfig, out_dir: &Path) -> Result<(Vec<ScoredPair>, SynthTruth)> {
    if cfg.speech_dim < 2 || cfg.text_dim < 2 {
        return Err(Error::Param("synthetic dims must be >= 2".into()));
    }
    let feats = out_dir.join("feats");
    fs::create_dir_all(&feats).map_err(|e| Error::io(&feats, e))?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d = cfg.speech_dim + cfg.text_dim;
    // Unit-variance logit before the bias.
    let scale = 1.0 / (d as f64).sqrt();
    let weights: Vec<f64> = (0..d)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let bias = -1.0;
    let sampler = FrameSampler::new(cfg.speech_dim, cfg.text_dim);

    let mut all = Vec::new();
    let mut targets = Vec::new();
    let mut idx = 0usize;
    for (split, count, name) in [
        (Split::Train, cfg.train, "train"),
        (Split::Dev, cfg.dev, "dev"),
        (Split::Test, cfg.test, "test"),
    ] {
        let mut rows = Vec::with_capacity(count);
        for _ in 0..count {
            let id = format!("{name}-{idx:06}");
            idx += 1;
            let (speech, text) = sampler.sample(&mut rng);
            let x: Vec<f64> = pooled(&speech).into_iter().chain(pooled(&text)).collect();
            let logit = bias + weights.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>();
            let clean = sigmoid(logit);
            let noisy = (clean + cfg.label_noise * rng.sample::<f64, _>(StandardNormal)).clamp(0.0, 1.0);
            let (reference, hypothesis) = texts(&mut rng, noisy);
            let logprobs: Vec<f64> = (0..text.frames())
                .map(|_| -(noisy * rng.gen_range(0.0..2.0) + rng.gen_range(0.0..0.05)))
                .collect();

            let sp = PathBuf::from("feats").join(format!("{id}.s.few"));
            let tp = PathBuf::from("feats").join(format!("{id}.t.few"));
            write_features(&speech, &out_dir.join(&sp))?;
            write_features(&text, &out_dir.join(&tp))?;
            let record = UtteranceRecord {
                id: id.clone(),
                speaker: format!("spk{:02}", rng.gen_range(0..cfg.speakers.max(1))),
                duration: speech.frames() as f64 * FRAME_SECONDS,
                hypothesis,
                reference: Some(reference),
                token_logprobs: Some(logprobs),
                speech_feature_path: sp,
                text_feature_path: tp,
                split,
            };
            rows.push(score_record(&record, Normalization::default(), true)?);
            targets.push((id, clean, noisy));
        }
        write_jsonl(&out_dir.join(format!("{name}.jsonl")), &rows)?;
        all.extend(rows);
    }

    let truth = SynthTruth {
        weights,
        bias,
        label_noise: cfg.label_noise,
        targets,
    };
    let path = out_dir.join("truth.json");
    let json = serde_json::to_vec_pretty(&truth).map_err(|e| Error::Data(e.to_string()))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok((all, truth))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{load_scored, read_features};

    #[test]
    fn empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let (pairs, truth) = synth_dataset(&SynthConfig::new(0, 0, 0, 4, 3, 1), dir.path()).unwrap();
        assert!(pairs.is_empty() && truth.targets.is_empty());
        assert!(load_scored(&dir.path().join("train.jsonl")).unwrap().is_empty());
    }

    #[test]
    fn deterministic_and_bounded() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = SynthConfig::new(6, 2, 2, 4, 3, 42);
        let (pa, ta) = synth_dataset(&cfg, a.path()).unwrap();
        let (pb, tb) = synth_dataset(&cfg, b.path()).unwrap();
        assert_eq!(pa, pb);
        assert_eq!(ta, tb);
        for name in ["train.jsonl", "test.jsonl", "truth.json", "feats/train-000003.s.few"] {
            assert_eq!(
                fs::read(a.path().join(name)).unwrap(),
                fs::read(b.path().join(name)).unwrap()
            );
        }
        for (p, (_, _, noisy)) in pa.iter().zip(&ta.targets) {
            assert!((0.0..=1.0).contains(&p.wer));
            assert!((p.wer - noisy).abs() <= 0.5 / 100.0 + 1e-12);
            let s = read_features(&a.path().join(&p.record.speech_feature_path)).unwrap();
            assert_eq!(s.dim(), 4);
            assert!((20..=500).contains(&s.frames()));
            assert!((p.record.duration - s.frames() as f64 * FRAME_SECONDS).abs() < 1e-12);
        }
        assert_eq!(pa.iter().filter(|p| p.record.split == Split::Dev).count(), 2);
    }
}
