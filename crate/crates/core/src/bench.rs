//! Single-stream inference timing and real-time factor.

use std::fmt;
use std::path::PathBuf;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{read_features, FeatureSequence, FrameSampler, UtteranceRecord};
use crate::error::{Error, Result};
use crate::model::EstimatorModel;
use crate::scalar::Scalar;
use crate::tensor::{Mode, Tensor};

pub const DEFAULT_WARMUP: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    FeatureLoad,
    Aggregation,
    Feedforward,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageSeconds {
    pub feature_load: f64,
    pub aggregation: f64,
    pub feedforward: f64,
}

impl StageSeconds {
    pub fn get(&self, stage: Stage) -> f64 {
        match stage {
            Stage::FeatureLoad => self.feature_load,
            Stage::Aggregation => self.aggregation,
            Stage::Feedforward => self.feedforward,
        }
    }

    fn add(&mut self, stage: Stage, d: Duration) {
        let slot = match stage {
            Stage::FeatureLoad => &mut self.feature_load,
            Stage::Aggregation => &mut self.aggregation,
            Stage::Feedforward => &mut self.feedforward,
        };
        *slot += d.as_secs_f64();
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub stage_seconds: StageSeconds,
    /// Wall time of the measured pass, feature loading included.
    pub total_seconds: f64,
    /// Aggregation plus feedforward.
    pub estimator_seconds: f64,
    pub audio_total_seconds: f64,
    pub rtf: f64,
    pub utterances: usize,
    pub dataset_id: String,
    pub aggregator: String,
    pub precision: String,
    pub warmup_passes: usize,
    /// Smallest nonzero step observed on the monotonic clock.
    pub clock_resolution: f64,
}

/// Real-time factor: processing seconds per second of audio.
pub fn rtf(total_seconds: f64, audio_seconds: f64) -> Result<f64> {
    if !(audio_seconds > 0.0) || !audio_seconds.is_finite() {
        return Err(Error::Data(format!("audio duration {audio_seconds} must be positive")));
    }
    if !(total_seconds >= 0.0) {
        return Err(Error::Data(format!("processing time {total_seconds} must be non-negative")));
    }
    Ok(total_seconds / audio_seconds)
}

/// Utterances to time, loaded one at a time.
pub trait FeatureSource: Sync {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    /// Audio seconds of utterance `i`.
    fn duration(&self, i: usize) -> f64;
    fn load(&self, i: usize) -> Result<(FeatureSequence, FeatureSequence)>;
    /// Stable identity; reports are comparable only when it matches.
    fn identity(&self) -> String;
}

/// Feature files referenced by manifest rows.
pub struct ManifestSource {
    records: Vec<UtteranceRecord>,
    base: PathBuf,
}

impl ManifestSource {
    pub fn new(records: Vec<UtteranceRecord>, base: impl Into<PathBuf>) -> Self {
        Self {
            records,
            base: base.into(),
        }
    }
}

impl FeatureSource for ManifestSource {
    fn len(&self) -> usize {
        self.records.len()
    }

    fn duration(&self, i: usize) -> f64 {
        self.records[i].duration
    }

    fn load(&self, i: usize) -> Result<(FeatureSequence, FeatureSequence)> {
        let (s, t) = self.records[i].feature_paths(&self.base);
        Ok((read_features(&s)?, read_features(&t)?))
    }

    fn identity(&self) -> String {
        let mut h = Sha256::new();
        for r in &self.records {
            h.update(r.id.as_bytes());
            h.update([0]);
            h.update(r.speech_feature_path.as_os_str().as_encoded_bytes());
            h.update([0]);
            h.update(r.text_feature_path.as_os_str().as_encoded_bytes());
            h.update(r.duration.to_le_bytes());
        }
        format!("manifest:{:x}", h.finalize())
    }
}

/// Generates utterances on demand; utterance `i` depends only on the seed
/// and `i`, and lasts one frame stride per speech frame.
pub struct SyntheticSource {
    pub sampler: FrameSampler,
    pub utterances: usize,
    pub seed: u64,
}

impl SyntheticSource {
    fn rng(&self, i: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(i as u64);
        rng
    }
}

impl FeatureSource for SyntheticSource {
    fn len(&self) -> usize {
        self.utterances
    }

    fn duration(&self, i: usize) -> f64 {
        // `FrameSampler::sample` draws the speech length first.
        let frames = self.rng(i).gen_range(self.sampler.speech_frames.clone());
        frames as f64 * crate::dataset::FRAME_SECONDS
    }

    fn load(&self, i: usize) -> Result<(FeatureSequence, FeatureSequence)> {
        Ok(self.sampler.sample(&mut self.rng(i)))
    }

    fn identity(&self) -> String {
        let s = &self.sampler;
        format!(
            "synthetic:{}x{}:{}-{}:{}-{}:n{}:seed{}",
            s.speech_dim,
            s.text_dim,
            s.speech_frames.start(),
            s.speech_frames.end(),
            s.text_frames.start(),
            s.text_frames.end(),
            self.utterances,
            self.seed
        )
    }
}

fn clock_resolution() -> f64 {
    let mut best = f64::INFINITY;
    for _ in 0..64 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min((b - a).as_secs_f64());
    }
    best
}

fn precision_name<T: Scalar>() -> &'static str {
    if std::mem::size_of::<T>() == 4 {
        "f32"
    } else {
        "f64"
    }
}

fn timed_pass<T: Scalar>(
    model: &EstimatorModel<T>,
    source: &dyn FeatureSource,
    stages: &mut StageSeconds,
) -> Result<()> {
    // Eval mode consumes no randomness; the rng only satisfies the signature.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for i in 0..source.len() {
        let t0 = Instant::now();
        let (s, t) = source.load(i)?;
        let (s, t): (Tensor<T>, Tensor<T>) = (s.to_tensor(), t.to_tensor());
        let t1 = Instant::now();
        let x = model.aggregate(&s, &t)?;
        let t2 = Instant::now();
        let y = model.head(&x, Mode::Eval, &mut rng)?;
        let t3 = Instant::now();
        std::hint::black_box(y);
        stages.add(Stage::FeatureLoad, t1 - t0);
        stages.add(Stage::Aggregation, t2 - t1);
        stages.add(Stage::Feedforward, t3 - t2);
    }
    Ok(())
}

/// Times every utterance at batch size 1 after `warmup` unmeasured passes.
pub fn bench_estimator<T: Scalar>(
    model: &EstimatorModel<T>,
    source: &dyn FeatureSource,
    warmup: usize,
) -> Result<TimingReport> {
    if source.is_empty() {
        return Err(Error::Data("benchmark dataset is empty".into()));
    }
    for _ in 0..warmup {
        timed_pass(model, source, &mut StageSeconds::default())?;
    }
    let mut stages = StageSeconds::default();
    let start = Instant::now();
    timed_pass(model, source, &mut stages)?;
    let total = start.elapsed().as_secs_f64();
    let audio: f64 = (0..source.len()).map(|i| source.duration(i)).sum();
    Ok(TimingReport {
        stage_seconds: stages,
        total_seconds: total,
        estimator_seconds: stages.aggregation + stages.feedforward,
        audio_total_seconds: audio,
        rtf: rtf(total, audio)?,
        utterances: source.len(),
        dataset_id: source.identity(),
        aggregator: model.config.aggregator.to_string(),
        precision: precision_name::<T>().into(),
        warmup_passes: warmup,
        clock_resolution: clock_resolution(),
    })
}

/// Ratio `a / b`, or a lower bound when `b` is below clock resolution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Ratio {
    Finite(f64),
    AtLeast(f64),
}

impl Ratio {
    fn of(a: f64, b: f64, resolution: f64) -> Ratio {
        if b < resolution {
            Ratio::AtLeast(a / resolution)
        } else {
            Ratio::Finite(a / b)
        }
    }

    /// Value usable in comparisons; the bound itself for `AtLeast`.
    pub fn lower_bound(&self) -> f64 {
        match *self {
            Ratio::Finite(r) | Ratio::AtLeast(r) => r,
        }
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Ratio::Finite(r) => write!(f, "{r:.2}x"),
            Ratio::AtLeast(r) => write!(f, ">{r:.0}x"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    /// `a.total / b.total`
    pub total_ratio: f64,
    /// Fraction of `a.total` saved by `b`.
    pub reduction: f64,
    pub estimator_ratio: Ratio,
    pub feature_load: Ratio,
    pub aggregation: Ratio,
    pub feedforward: Ratio,
}

/// How much faster `b` is than `a` on the same dataset.
pub fn compare(a: &TimingReport, b: &TimingReport) -> Result<Comparison> {
    if a.dataset_id != b.dataset_id {
        return Err(Error::Data(format!(
            "reports cover different datasets ({} vs {})",
            a.dataset_id, b.dataset_id
        )));
    }
    if !(b.total_seconds > 0.0) {
        return Err(Error::Degenerate("reference report has zero total time".into()));
    }
    let res = a.clock_resolution.max(b.clock_resolution);
    let stage = |s: Stage| Ratio::of(a.stage_seconds.get(s), b.stage_seconds.get(s), res);
    Ok(Comparison {
        total_ratio: a.total_seconds / b.total_seconds,
        reduction: 1.0 - b.total_seconds / a.total_seconds,
        estimator_ratio: Ratio::of(a.estimator_seconds, b.estimator_seconds, res),
        feature_load: stage(Stage::FeatureLoad),
        aggregation: stage(Stage::Aggregation),
        feedforward: stage(Stage::Feedforward),
    })
}

/// Stage rows by system columns, with times that round to zero shown as "ε".
pub fn render_timing_table(reports: &[(&str, &TimingReport)]) -> String {
    let secs = |v: f64, res: f64| {
        if v < 0.005_f64.max(res) {
            "ε".to_string()
        } else {
            format!("{v:.2}")
        }
    };
    let mut header = vec!["Stage".to_string()];
    header.extend(reports.iter().map(|(n, _)| n.to_string()));
    let rows: [(&str, Box<dyn Fn(&TimingReport) -> String>); 5] = [
        ("Feature load (s)", Box::new(|r| secs(r.stage_seconds.feature_load, r.clock_resolution))),
        ("Aggregation (s)", Box::new(|r| secs(r.stage_seconds.aggregation, r.clock_resolution))),
        ("Feedforward (s)", Box::new(|r| secs(r.stage_seconds.feedforward, r.clock_resolution))),
        ("Total (s)", Box::new(|r| format!("{:.2}", r.total_seconds))),
        ("RTF", Box::new(|r| format!("{:.6}", r.rtf))),
    ];
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|(name, f)| {
            let mut row = vec![name.to_string()];
            row.extend(reports.iter().map(|(_, r)| f(r)));
            row
        })
        .collect();
    crate::dataset::render_rows(&header, &body)
}

/// Multi-worker throughput; never mixed with single-stream reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThroughputReport {
    pub workers: usize,
    pub utterances: usize,
    pub wall_seconds: f64,
    pub utterances_per_second: f64,
    pub rtf: f64,
    pub dataset_id: String,
}

/// Splits utterances across `workers` threads, each at batch size 1.
pub fn bench_throughput<T: Scalar>(
    model: &EstimatorModel<T>,
    source: &dyn FeatureSource,
    workers: usize,
) -> Result<ThroughputReport> {
    if source.is_empty() {
        return Err(Error::Data("benchmark dataset is empty".into()));
    }
    if workers == 0 {
        return Err(Error::Config("worker count must be >= 1".into()));
    }
    let n = source.len();
    let start = Instant::now();
    let results: Vec<Result<()>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || -> Result<()> {
                    let mut rng = ChaCha8Rng::seed_from_u64(0);
                    for i in (w..n).step_by(workers) {
                        let (s, t) = source.load(i)?;
                        let x = model.aggregate(&s.to_tensor(), &t.to_tensor())?;
                        std::hint::black_box(model.head(&x, Mode::Eval, &mut rng)?);
                    }
                    Ok(())
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    results.into_iter().collect::<Result<Vec<()>>>()?;
    let wall = start.elapsed().as_secs_f64();
    let audio: f64 = (0..n).map(|i| source.duration(i)).sum();
    Ok(ThroughputReport {
        workers,
        utterances: n,
        wall_seconds: wall,
        utterances_per_second: n as f64 / wall.max(1e-12),
        rtf: rtf(wall, audio)?,
        dataset_id: source.identity(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Aggregator, ModelConfig};

    fn report(total: f64, agg: f64, ff: f64, id: &str) -> TimingReport {
        TimingReport {
            stage_seconds: StageSeconds {
                feature_load: 0.0,
                aggregation: agg,
                feedforward: ff,
            },
            total_seconds: total,
            estimator_seconds: agg + ff,
            audio_total_seconds: 5223.0,
            rtf: total / 5223.0,
            utterances: 1,
            dataset_id: id.into(),
            aggregator: "avg_pool".into(),
            precision: "f64".into(),
            warmup_passes: 0,
            clock_resolution: 1e-7,
        }
    }

    #[test]
    fn rtf_cases() {
        assert!((rtf(5.42, 5223.0).unwrap() - 0.001038).abs() < 1e-6);
        assert!((rtf(18.64, 5223.0).unwrap() - 0.003569).abs() < 1e-6);
        assert!(rtf(1.0, 0.0).is_err());
    }

    #[test]
    fn compare_cases() {
        let a = report(18.64, 5.28, 13.36, "d");
        let b = report(5.42, 0.0, 5.42, "d");
        let c = compare(&a, &b).unwrap();
        assert!((c.total_ratio - 3.44).abs() < 0.005);
        assert!((c.reduction - 0.7092).abs() < 5e-5);
        assert!(matches!(c.aggregation, Ratio::AtLeast(_)));
        assert!(c.aggregation.to_string().starts_with('>'));
        let same = compare(&a, &a).unwrap();
        assert_eq!(same.total_ratio, 1.0);
        assert_eq!(same.aggregation, Ratio::Finite(1.0));
        assert!(compare(&a, &report(1.0, 0.0, 1.0, "other")).is_err());
    }

    #[test]
    fn synthetic_source_is_stable() {
        let src = SyntheticSource {
            sampler: FrameSampler::new(4, 3),
            utterances: 5,
            seed: 9,
        };
        for i in 0..5 {
            let (s, _) = src.load(i).unwrap();
            assert_eq!(s.frames() as f64 * 0.02, src.duration(i));
            assert_eq!(src.load(i).unwrap(), src.load(i).unwrap());
        }
        assert_ne!(src.load(0).unwrap(), src.load(1).unwrap());
    }

    #[test]
    fn bench_smoke() {
        let src = SyntheticSource {
            sampler: FrameSampler::new(6, 4),
            utterances: 8,
            seed: 1,
        };
        let empty = SyntheticSource {
            sampler: FrameSampler::new(6, 4),
            utterances: 0,
            seed: 1,
        };
        for agg in [Aggregator::AvgPool, Aggregator::Bilstm] {
            let m = EstimatorModel::<f64>::init(ModelConfig::new(agg, 6, 4), 0).unwrap();
            let r = bench_estimator(&m, &src, 1).unwrap();
            assert_eq!(r.utterances, 8);
            assert!(r.total_seconds >= 0.0 && r.stage_seconds.aggregation >= 0.0);
            assert_eq!(r.rtf, r.total_seconds / r.audio_total_seconds);
            assert!(bench_estimator(&m, &empty, 0).is_err());
            let t = bench_throughput(&m, &src, 2).unwrap();
            assert_eq!(t.utterances, 8);
        }
        let m = EstimatorModel::<f64>::init(ModelConfig::new(Aggregator::AvgPool, 6, 4), 0).unwrap();
        let r = bench_estimator(&m, &src, 0).unwrap();
        let table = render_timing_table(&[("avg", &r)]);
        assert!(table.contains("Aggregation") && table.contains("RTF"));
    }
}
