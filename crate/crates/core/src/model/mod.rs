//! Two-tower WER estimator.
//!
//! Speech and text sequences are each reduced to one vector (mean pooling,
//! or a single-layer BiLSTM over the speech frames for the baseline), the two
//! vectors are concatenated, and an MLP with hidden widths 600 and 32
//! (affine → ReLU → layer norm → dropout) and a sigmoid output produces the
//! estimate.

mod io;
mod lstm;

pub use io::{load_model, save_model, MODEL_MAGIC, MODEL_VERSION};
pub use lstm::{BiLstm, LstmParams};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::FeatureSequence;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Mode, NodeId, Tape, Tensor};

pub const HIDDEN_WIDTHS: [usize; 2] = [600, 32];
pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const DEFAULT_DROPOUT: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregator {
    AvgPool,
    Bilstm,
}

impl std::str::FromStr for Aggregator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "avg" | "avg_pool" => Ok(Self::AvgPool),
            "bilstm" => Ok(Self::Bilstm),
            other => Err(Error::Config(format!("unknown aggregator {other:?}"))),
        }
    }
}

impl std::fmt::Display for Aggregator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::AvgPool => "avg_pool",
            Self::Bilstm => "bilstm",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub aggregator: Aggregator,
    pub speech_dim: usize,
    pub text_dim: usize,
    pub dropout: f64,
}

impl ModelConfig {
    pub fn new(aggregator: Aggregator, speech_dim: usize, text_dim: usize) -> Self {
        Self {
            aggregator,
            speech_dim,
            text_dim,
            dropout: DEFAULT_DROPOUT,
        }
    }

    /// Width of the concatenated tower outputs fed to the MLP.
    pub fn input_width(&self) -> usize {
        match self.aggregator {
            Aggregator::AvgPool => self.speech_dim + self.text_dim,
            Aggregator::Bilstm => 2 * self.speech_dim + self.text_dim,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Metadata {
    pub seed: u64,
    pub config_hash: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    fn init<R: Rng>(fan_in: usize, out: usize, rng: &mut R) -> Self {
        Self {
            weight: uniform(fan_in, out, fan_in, rng),
            bias: Tensor::zeros(1, out),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.matmul(&self.weight)?.add_row(&self.bias)
    }
}

/// Affine layer followed by ReLU, layer norm and dropout.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenLayer<T> {
    pub linear: Linear<T>,
    pub gain: Tensor<T>,
    pub shift: Tensor<T>,
}

/// Weights drawn from `U(-sqrt(1/fan_in), sqrt(1/fan_in))`.
pub(crate) fn uniform<T: Scalar, R: Rng>(rows: usize, cols: usize, fan_in: usize, rng: &mut R) -> Tensor<T> {
    let bound = (1.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(rows, cols, |_, _| T::lit(rng.gen_range(-bound..=bound)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorModel<T> {
    pub config: ModelConfig,
    pub bilstm: Option<BiLstm<T>>,
    pub hidden: Vec<HiddenLayer<T>>,
    pub output: Linear<T>,
    pub metadata: Metadata,
}

/// Tape node ids of a model's parameters, mirroring [`EstimatorModel`].
#[derive(Debug, Clone)]
pub struct TapedParams {
    lstm: Option<[[NodeId; 3]; 2]>,
    hidden: Vec<[NodeId; 4]>,
    output: [NodeId; 2],
    all: Vec<NodeId>,
}

impl TapedParams {
    /// Ids in the same order as [`EstimatorModel::params`].
    pub fn ids(&self) -> &[NodeId] {
        &self.all
    }
}

/// Model input with every parameter-free reduction already applied.
#[derive(Debug, Clone)]
pub enum Prepared<T> {
    /// Concatenated pooled speech and text vectors.
    Pooled(Tensor<T>),
    /// Raw speech frames and the pooled text vector.
    Sequence { speech: Tensor<T>, text: Tensor<T> },
}

impl<T: Scalar> EstimatorModel<T> {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        if config.speech_dim == 0 || config.text_dim == 0 {
            return Err(Error::Param("model dims must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::Param(format!("dropout {} outside [0, 1)", config.dropout)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bilstm = match config.aggregator {
            Aggregator::AvgPool => None,
            Aggregator::Bilstm => Some(BiLstm::init(config.speech_dim, &mut rng)),
        };
        let mut width = config.input_width();
        let mut hidden = Vec::with_capacity(HIDDEN_WIDTHS.len());
        for &w in &HIDDEN_WIDTHS {
            hidden.push(HiddenLayer {
                linear: Linear::init(width, w, &mut rng),
                gain: Tensor::filled(1, w, T::one()),
                shift: Tensor::zeros(1, w),
            });
            width = w;
        }
        let output = Linear::init(width, 1, &mut rng);
        Ok(Self {
            config,
            bilstm,
            hidden,
            output,
            metadata: Metadata {
                seed,
                config_hash: 0,
            },
        })
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::new();
        if let Some(b) = &self.bilstm {
            for dir in [&b.forward, &b.backward] {
                out.extend([&dir.input, &dir.recurrent, &dir.bias]);
            }
        }
        for h in &self.hidden {
            out.extend([&h.linear.weight, &h.linear.bias, &h.gain, &h.shift]);
        }
        out.extend([&self.output.weight, &self.output.bias]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = Vec::new();
        if let Some(b) = &mut self.bilstm {
            for dir in [&mut b.forward, &mut b.backward] {
                out.extend([&mut dir.input, &mut dir.recurrent, &mut dir.bias]);
            }
        }
        for h in &mut self.hidden {
            out.extend([
                &mut h.linear.weight,
                &mut h.linear.bias,
                &mut h.gain,
                &mut h.shift,
            ]);
        }
        out.extend([&mut self.output.weight, &mut self.output.bias]);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params().iter().all(|p| p.is_finite())
    }

    /// Same architecture with parameters converted to another scalar type.
    pub fn cast<U: Scalar>(&self) -> EstimatorModel<U> {
        let lin = |l: &Linear<T>| Linear {
            weight: l.weight.cast(),
            bias: l.bias.cast(),
        };
        EstimatorModel {
            config: self.config,
            bilstm: self.bilstm.as_ref().map(BiLstm::cast),
            hidden: self
                .hidden
                .iter()
                .map(|h| HiddenLayer {
                    linear: lin(&h.linear),
                    gain: h.gain.cast(),
                    shift: h.shift.cast(),
                })
                .collect(),
            output: lin(&self.output),
            metadata: self.metadata,
        }
    }

    fn check_dims(&self, speech: &Tensor<T>, text: &Tensor<T>) -> Result<()> {
        if speech.cols() != self.config.speech_dim || text.cols() != self.config.text_dim {
            return Err(Error::shape(format!(
                "model expects speech/text dims {}/{}, got {}/{}",
                self.config.speech_dim,
                self.config.text_dim,
                speech.cols(),
                text.cols()
            )));
        }
        Ok(())
    }

    /// Fixed-length speech representation.
    pub fn aggregate_speech(&self, speech: &Tensor<T>) -> Result<Tensor<T>> {
        match (&self.bilstm, self.config.aggregator) {
            (Some(b), Aggregator::Bilstm) => b.aggregate(speech),
            _ => aggregate_avg(speech),
        }
    }

    /// Concatenated tower outputs (`1 x input_width`).
    pub fn aggregate(&self, speech: &Tensor<T>, text: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_dims(speech, text)?;
        self.aggregate_speech(speech)?.concat_cols(&aggregate_avg(text)?)
    }

    /// MLP head over a batch of aggregated rows; returns `B x 1` estimates.
    pub fn head<R: Rng + ?Sized>(&self, x: &Tensor<T>, mode: Mode, rng: &mut R) -> Result<Tensor<T>> {
        let eps = T::lit(LAYER_NORM_EPS);
        let mut h = x.clone();
        for layer in &self.hidden {
            h = layer
                .linear
                .forward(&h)?
                .unary(crate::tensor::Unary::Relu)
                .layer_norm(&layer.gain, &layer.shift, eps)?;
            h = h.dropout(self.config.dropout, mode, rng)?.0;
        }
        Ok(self.output.forward(&h)?.unary(crate::tensor::Unary::Sigmoid))
    }

    pub fn estimate_tensors<R: Rng + ?Sized>(
        &self,
        speech: &Tensor<T>,
        text: &Tensor<T>,
        mode: Mode,
        rng: &mut R,
    ) -> Result<T> {
        let x = self.aggregate(speech, text)?;
        self.head(&x, mode, rng)?.item()
    }

    /// WER estimate for one utterance/hypothesis pair.
    pub fn estimate<R: Rng + ?Sized>(
        &self,
        speech: &FeatureSequence,
        text: &FeatureSequence,
        mode: Mode,
        rng: &mut R,
    ) -> Result<T> {
        self.estimate_tensors(&speech.to_tensor(), &text.to_tensor(), mode, rng)
    }

    /// Applies the parameter-free reductions once so training can reuse them.
    pub fn prepare(&self, speech: &FeatureSequence, text: &FeatureSequence) -> Result<Prepared<T>> {
        let s = speech.to_tensor();
        let t = text.to_tensor();
        self.check_dims(&s, &t)?;
        Ok(match self.config.aggregator {
            Aggregator::AvgPool => Prepared::Pooled(aggregate_avg(&s)?.concat_cols(&aggregate_avg(&t)?)?),
            Aggregator::Bilstm => Prepared::Sequence {
                speech: s,
                text: aggregate_avg(&t)?,
            },
        })
    }

    /// Puts every parameter on the tape as a leaf.
    pub fn register(&self, tape: &mut Tape<T>) -> TapedParams {
        let mut all = Vec::new();
        let mut leaf = |t: &Tensor<T>, all: &mut Vec<NodeId>| {
            let id = tape.leaf(t.clone());
            all.push(id);
            id
        };
        let lstm = self.bilstm.as_ref().map(|b| {
            [&b.forward, &b.backward].map(|d| {
                [
                    leaf(&d.input, &mut all),
                    leaf(&d.recurrent, &mut all),
                    leaf(&d.bias, &mut all),
                ]
            })
        });
        let hidden = self
            .hidden
            .iter()
            .map(|h| {
                [
                    leaf(&h.linear.weight, &mut all),
                    leaf(&h.linear.bias, &mut all),
                    leaf(&h.gain, &mut all),
                    leaf(&h.shift, &mut all),
                ]
            })
            .collect();
        let output = [leaf(&self.output.weight, &mut all), leaf(&self.output.bias, &mut all)];
        TapedParams {
            lstm,
            hidden,
            output,
            all,
        }
    }

    /// Taped aggregation of raw speech/text nodes (`1 x input_width`).
    pub fn tape_aggregate(
        &self,
        tape: &mut Tape<T>,
        params: &TapedParams,
        speech: NodeId,
        text: NodeId,
    ) -> Result<NodeId> {
        self.check_dims(tape.value(speech), tape.value(text))?;
        let s = match (&self.bilstm, &params.lstm) {
            (Some(b), Some(ids)) => b.tape_aggregate(tape, ids, speech)?,
            _ => tape.mean_pool(speech)?,
        };
        let t = tape.mean_pool(text)?;
        tape.concat_cols(s, t)
    }

    /// Taped MLP head over a `B x input_width` node.
    pub fn tape_head<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        params: &TapedParams,
        x: NodeId,
        mode: Mode,
        rng: &mut R,
    ) -> Result<NodeId> {
        let eps = T::lit(LAYER_NORM_EPS);
        let mut h = x;
        for [w, b, gain, shift] in &params.hidden {
            let z = tape.matmul(h, *w)?;
            let z = tape.add_row(z, *b)?;
            let a = tape.relu(z);
            let n = tape.layer_norm(a, *gain, *shift, eps)?;
            h = tape.dropout(n, self.config.dropout, mode, rng)?;
        }
        let [w, b] = params.output;
        let z = tape.matmul(h, w)?;
        let z = tape.add_row(z, b)?;
        Ok(tape.sigmoid(z))
    }

    /// Taped estimates (`B x 1`) for a batch of prepared inputs.
    pub fn tape_batch<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape<T>,
        params: &TapedParams,
        batch: &[&Prepared<T>],
        mode: Mode,
        rng: &mut R,
    ) -> Result<NodeId> {
        let rows: Vec<&Tensor<T>> = batch
            .iter()
            .filter_map(|p| match p {
                Prepared::Pooled(row) => Some(row),
                Prepared::Sequence { .. } => None,
            })
            .collect();
        let x = if rows.len() == batch.len() {
            tape.constant(Tensor::stack_rows(&rows)?)
        } else {
            let mut nodes = Vec::with_capacity(batch.len());
            for p in batch {
                let node = match p {
                    Prepared::Pooled(row) => tape.constant(row.clone()),
                    Prepared::Sequence { speech, text } => {
                        let (Some(b), Some(ids)) = (&self.bilstm, &params.lstm) else {
                            return Err(Error::shape("sequence input for a pooling model"));
                        };
                        let s = tape.constant(speech.clone());
                        let s = b.tape_aggregate(tape, ids, s)?;
                        let t = tape.constant(text.clone());
                        tape.concat_cols(s, t)?
                    }
                };
                nodes.push(node);
            }
            tape.stack_rows(&nodes)?
        };
        self.tape_head(tape, params, x, mode, rng)
    }
}

/// Mean over frames.
pub fn aggregate_avg<T: Scalar>(seq: &Tensor<T>) -> Result<Tensor<T>> {
    seq.mean_pool()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Binary;

    fn seq(rows: &[&[f32]]) -> FeatureSequence {
        let dim = rows[0].len();
        FeatureSequence::new(rows.len(), dim, rows.concat()).unwrap()
    }

    #[test]
    fn pooling_cases() {
        let one = seq(&[&[1.0, 2.0]]);
        assert_eq!(aggregate_avg(&one.to_tensor::<f64>()).unwrap().data(), &[1.0, 2.0]);
        let two = seq(&[&[1.0, 3.0], &[3.0, 5.0]]);
        assert_eq!(aggregate_avg(&two.to_tensor::<f64>()).unwrap().data(), &[2.0, 4.0]);
        let swapped = seq(&[&[3.0, 5.0], &[1.0, 3.0]]);
        assert_eq!(
            aggregate_avg(&swapped.to_tensor::<f64>()).unwrap(),
            aggregate_avg(&two.to_tensor::<f64>()).unwrap()
        );
    }

    #[test]
    fn architecture_widths() {
        let m = EstimatorModel::<f64>::init(ModelConfig::new(Aggregator::AvgPool, 1024, 1024), 0).unwrap();
        assert_eq!(m.config.input_width(), 2048);
        assert_eq!(m.hidden[0].linear.weight.shape(), (2048, 600));
        assert_eq!(m.hidden[1].linear.weight.shape(), (600, 32));
        assert_eq!(m.output.weight.shape(), (32, 1));

        let b = EstimatorModel::<f64>::init(ModelConfig::new(Aggregator::Bilstm, 8, 5), 0).unwrap();
        assert_eq!(b.config.input_width(), 21);
        assert_eq!(b.hidden[0].linear.weight.rows(), 21);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let cfg = ModelConfig::new(Aggregator::Bilstm, 6, 4);
        let a = EstimatorModel::<f64>::init(cfg, 7).unwrap();
        let b = EstimatorModel::<f64>::init(cfg, 7).unwrap();
        let c = EstimatorModel::<f64>::init(cfg, 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for h in &a.hidden {
            let bound = (1.0 / h.linear.weight.rows() as f64).sqrt();
            assert!(h.linear.weight.data().iter().all(|w| w.abs() <= bound));
            assert!(h.linear.bias.data().iter().all(|&v| v == 0.0));
            assert!(h.gain.data().iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn estimate_in_unit_interval_and_deterministic() {
        let m = EstimatorModel::<f64>::init(ModelConfig::new(Aggregator::AvgPool, 3, 2), 1).unwrap();
        let s = seq(&[&[1.0, -2.0, 0.5], &[0.3, 0.1, 9.0]]);
        let t = seq(&[&[4.0, -4.0]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = m.estimate(&s, &t, Mode::Eval, &mut rng).unwrap();
        let b = m.estimate(&s, &t, Mode::Eval, &mut rng).unwrap();
        assert_eq!(a, b);
        assert!(a > 0.0 && a < 1.0);

        let mut z = m.clone();
        z.output.weight = Tensor::zeros(32, 1);
        assert_eq!(z.estimate(&s, &t, Mode::Eval, &mut rng).unwrap(), 0.5);

        let bad = seq(&[&[1.0, 2.0]]);
        assert!(matches!(m.estimate(&bad, &t, Mode::Eval, &mut rng), Err(Error::Shape(_))));
    }

    #[test]
    fn taped_forward_matches_value_path() {
        for agg in [Aggregator::AvgPool, Aggregator::Bilstm] {
            let m = EstimatorModel::<f64>::init(ModelConfig::new(agg, 4, 3), 5).unwrap();
            let s = seq(&[&[0.1, 0.2, -0.3, 0.4], &[1.0, 0.0, 0.5, -1.0], &[0.3, 0.3, 0.3, 0.3]]);
            let t = seq(&[&[1.0, 2.0, 3.0], &[0.0, -1.0, 0.5]]);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let direct = m.estimate(&s, &t, Mode::Eval, &mut rng).unwrap();

            let mut tape = Tape::new();
            let p = m.register(&mut tape);
            let prepared = m.prepare(&s, &t).unwrap();
            let out = m.tape_batch(&mut tape, &p, &[&prepared], Mode::Eval, &mut rng).unwrap();
            assert_eq!(tape.value(out).item().unwrap(), direct);

            let mut tape = Tape::new();
            let p = m.register(&mut tape);
            let sn = tape.constant(s.to_tensor());
            let tn = tape.constant(t.to_tensor());
            let x = m.tape_aggregate(&mut tape, &p, sn, tn).unwrap();
            let out = m.tape_head(&mut tape, &p, x, Mode::Eval, &mut rng).unwrap();
            assert_eq!(tape.value(out).item().unwrap(), direct);
            let target = tape.constant(Tensor::scalar(0.3));
            let d = tape.binary(out, target, Binary::Sub).unwrap();
            let sq = tape.mul(d, d).unwrap();
            let loss = tape.mean(sq).unwrap();
            let grads = tape.backward(loss).unwrap();
            assert_eq!(p.ids().len(), m.params().len());
            assert!(p.ids().iter().all(|&id| grads.get(id).is_some()));
        }
    }

    #[test]
    fn f32_model_tracks_f64() {
        let m = EstimatorModel::<f64>::init(ModelConfig::new(Aggregator::AvgPool, 3, 2), 2).unwrap();
        let m32: EstimatorModel<f32> = m.cast();
        let s = seq(&[&[0.5, -0.5, 1.5]]);
        let t = seq(&[&[0.2, 0.9]]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = m.estimate(&s, &t, Mode::Eval, &mut rng).unwrap();
        let b = m32.estimate(&s, &t, Mode::Eval, &mut rng).unwrap();
        assert!((a - f64::from(b)).abs() < 1e-5);
    }
}
