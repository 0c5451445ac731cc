use rand::Rng;

use super::uniform;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{sigmoid, NodeId, Tape, Tensor};

/// One LSTM direction. Gate blocks along the `4h` axis are ordered input,
/// forget, cell candidate, output.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmParams<T> {
    /// `d x 4h`
    pub input: Tensor<T>,
    /// `h x 4h`
    pub recurrent: Tensor<T>,
    /// `1 x 4h`
    pub bias: Tensor<T>,
}

impl<T: Scalar> LstmParams<T> {
    fn init<R: Rng>(dim: usize, hidden: usize, rng: &mut R) -> Self {
        let mut bias = Tensor::zeros(1, 4 * hidden);
        for v in &mut bias.data_mut()[hidden..2 * hidden] {
            *v = T::one();
        }
        Self {
            input: uniform(dim, 4 * hidden, dim, rng),
            recurrent: uniform(hidden, 4 * hidden, hidden, rng),
            bias,
        }
    }

    pub fn hidden(&self) -> usize {
        self.recurrent.rows()
    }

    fn cast<U: Scalar>(&self) -> LstmParams<U> {
        LstmParams {
            input: self.input.cast(),
            recurrent: self.recurrent.cast(),
            bias: self.bias.cast(),
        }
    }

    /// Final hidden state after visiting the frames of `seq` in `order`.
    pub fn final_state(&self, seq: &Tensor<T>, order: impl Iterator<Item = usize>) -> Result<Vec<T>> {
        let h = self.hidden();
        let pre = seq.matmul(&self.input)?.add_row(&self.bias)?;
        let mut state = vec![T::zero(); h];
        let mut cell = vec![T::zero(); h];
        let mut z = vec![T::zero(); 4 * h];
        for t in order {
            // Same rounding as the taped cell: product first, then the sum.
            T::gemm(
                1,
                h,
                4 * h,
                T::one(),
                &state,
                (h as isize, 1),
                self.recurrent.data(),
                (4 * h as isize, 1),
                T::zero(),
                &mut z,
                (4 * h as isize, 1),
            );
            for (zv, &p) in z.iter_mut().zip(pre.row_slice(t)) {
                *zv = p + *zv;
            }
            for k in 0..h {
                let i = sigmoid(z[k]);
                let f = sigmoid(z[h + k]);
                let g = z[2 * h + k].tanh();
                let o = sigmoid(z[3 * h + k]);
                cell[k] = f * cell[k] + i * g;
                state[k] = o * cell[k].tanh();
            }
        }
        Ok(state)
    }

    fn tape_final_state(
        &self,
        tape: &mut Tape<T>,
        [w, u, b]: [NodeId; 3],
        seq: NodeId,
        reverse: bool,
    ) -> Result<NodeId> {
        let h = self.hidden();
        let frames = tape.value(seq).rows();
        let pre = tape.matmul(seq, w)?;
        let pre = tape.add_row(pre, b)?;
        let mut state = tape.constant(Tensor::zeros(1, h));
        let mut cell = tape.constant(Tensor::zeros(1, h));
        let order: Box<dyn Iterator<Item = usize>> = if reverse {
            Box::new((0..frames).rev())
        } else {
            Box::new(0..frames)
        };
        for t in order {
            let x = tape.slice_rows(pre, t, 1)?;
            let r = tape.matmul(state, u)?;
            let z = tape.add(x, r)?;
            let i = tape.slice_cols(z, 0, h)?;
            let i = tape.sigmoid(i);
            let f = tape.slice_cols(z, h, h)?;
            let f = tape.sigmoid(f);
            let g = tape.slice_cols(z, 2 * h, h)?;
            let g = tape.tanh(g);
            let o = tape.slice_cols(z, 3 * h, h)?;
            let o = tape.sigmoid(o);
            let keep = tape.mul(f, cell)?;
            let write = tape.mul(i, g)?;
            cell = tape.add(keep, write)?;
            let squashed = tape.tanh(cell);
            state = tape.mul(o, squashed)?;
        }
        Ok(state)
    }
}

/// Single-layer bidirectional LSTM whose hidden size equals the input size.
/// The sequence vector is the forward state after the last frame
/// concatenated with the backward state after the first frame.
#[derive(Debug, Clone, PartialEq)]
pub struct BiLstm<T> {
    pub forward: LstmParams<T>,
    pub backward: LstmParams<T>,
}

impl<T: Scalar> BiLstm<T> {
    pub(crate) fn init<R: Rng>(dim: usize, rng: &mut R) -> Self {
        Self {
            forward: LstmParams::init(dim, dim, rng),
            backward: LstmParams::init(dim, dim, rng),
        }
    }

    pub(crate) fn cast<U: Scalar>(&self) -> BiLstm<U> {
        BiLstm {
            forward: self.forward.cast(),
            backward: self.backward.cast(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.forward.input.rows()
    }

    fn check(&self, seq: &Tensor<T>) -> Result<()> {
        if seq.rows() == 0 {
            return Err(Error::EmptySequence("BiLSTM over zero frames".into()));
        }
        if seq.cols() != self.input_dim() {
            return Err(Error::shape(format!(
                "BiLSTM expects dim {}, got {}",
                self.input_dim(),
                seq.cols()
            )));
        }
        Ok(())
    }

    /// `1 x 2h` sequence representation.
    pub fn aggregate(&self, seq: &Tensor<T>) -> Result<Tensor<T>> {
        self.check(seq)?;
        let frames = seq.rows();
        let mut out = self.forward.final_state(seq, 0..frames)?;
        out.extend(self.backward.final_state(seq, (0..frames).rev())?);
        Ok(Tensor::row(out))
    }

    pub(crate) fn tape_aggregate(
        &self,
        tape: &mut Tape<T>,
        ids: &[[NodeId; 3]; 2],
        seq: NodeId,
    ) -> Result<NodeId> {
        self.check(tape.value(seq))?;
        let f = self.forward.tape_final_state(tape, ids[0], seq, false)?;
        let b = self.backward.tape_final_state(tape, ids[1], seq, true)?;
        tape.concat_cols(f, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zeroed(dim: usize) -> BiLstm<f64> {
        let p = LstmParams {
            input: Tensor::zeros(dim, 4 * dim),
            recurrent: Tensor::zeros(dim, 4 * dim),
            bias: Tensor::zeros(1, 4 * dim),
        };
        BiLstm {
            forward: p.clone(),
            backward: p,
        }
    }

    #[test]
    fn zero_parameters_give_zero_output() {
        let x = Tensor::from_fn(5, 3, |r, c| (r as f64) - (c as f64));
        let out = zeroed(3).aggregate(&x).unwrap();
        assert_eq!(out.shape(), (1, 6));
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_frame_halves_agree_with_shared_weights() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut b = BiLstm::<f64>::init(4, &mut rng);
        b.backward = b.forward.clone();
        let x = Tensor::row(vec![0.3, -0.7, 1.1, 0.0]);
        let out = b.aggregate(&x).unwrap();
        assert_eq!(out.slice_cols(0, 4).unwrap(), out.slice_cols(4, 4).unwrap());
    }

    #[test]
    fn forget_bias_starts_at_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = BiLstm::<f64>::init(3, &mut rng);
        assert_eq!(&b.forward.bias.data()[3..6], &[1.0, 1.0, 1.0]);
        assert!(b.forward.bias.data()[..3].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_and_mismatched_inputs() {
        let b = zeroed(2);
        assert!(matches!(b.aggregate(&Tensor::zeros(0, 2)), Err(Error::EmptySequence(_))));
        assert!(matches!(b.aggregate(&Tensor::zeros(3, 5)), Err(Error::Shape(_))));
    }
}
