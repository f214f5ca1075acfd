//! Forward LSTM over utterance sequences and the convolutional MFCC encoder.

use rand::Rng;

use crate::autodiff::{glorot, ParamId, ParameterSet, Tape, Tensor, Var};
use crate::error::{shape_err, Result};

/// Gate blocks are laid out column-wise as `[input | forget | cell | output]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    pub input_dim: usize,
    pub hidden_dim: usize,
    /// `d_in × 4·d_h`
    pub w_ih: ParamId,
    /// `d_h × 4·d_h`
    pub w_hh: ParamId,
    /// `1 × 4·d_h`
    pub bias: ParamId,
}

impl LstmParams {
    pub fn init<R: Rng + ?Sized>(
        ps: &mut ParameterSet,
        prefix: &str,
        input_dim: usize,
        hidden_dim: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let g = 4 * hidden_dim;
        let w_ih = ps.insert(
            format!("{prefix}.w_ih"),
            glorot(rng, vec![input_dim, g], input_dim, hidden_dim),
        )?;
        let w_hh = ps.insert(
            format!("{prefix}.w_hh"),
            glorot(rng, vec![hidden_dim, g], hidden_dim, hidden_dim),
        )?;
        let mut b = Tensor::zeros(vec![1, g]);
        b.data_mut()[hidden_dim..2 * hidden_dim].fill(1.0);
        let bias = ps.insert(format!("{prefix}.bias"), b)?;
        Ok(Self {
            input_dim,
            hidden_dim,
            w_ih,
            w_hh,
            bias,
        })
    }

    pub fn from_set(ps: &ParameterSet, prefix: &str, input_dim: usize, hidden_dim: usize) -> Result<Self> {
        let g = 4 * hidden_dim;
        Ok(Self {
            input_dim,
            hidden_dim,
            w_ih: ps.require(&format!("{prefix}.w_ih"), &[input_dim, g])?,
            w_hh: ps.require(&format!("{prefix}.w_hh"), &[hidden_dim, g])?,
            bias: ps.require(&format!("{prefix}.bias"), &[1, g])?,
        })
    }

    pub fn param_count(input_dim: usize, hidden_dim: usize) -> usize {
        4 * hidden_dim * (input_dim + hidden_dim + 1)
    }
}

fn step_from_projection(
    tape: &mut Tape,
    ps: &ParameterSet,
    p: &LstmParams,
    x_proj: Var,
    h_prev: Var,
    c_prev: Var,
) -> Result<(Var, Var)> {
    let d = p.hidden_dim;
    let w_hh = tape.param(ps, p.w_hh)?;
    let bias = tape.param(ps, p.bias)?;
    let rec = tape.matmul(h_prev, w_hh)?;
    let pre = tape.add(x_proj, rec)?;
    let pre = tape.add_row(pre, bias)?;
    let gate = |tape: &mut Tape, k: usize| tape.narrow(pre, 1, k * d, d);
    let (i, f, g, o) = (gate(tape, 0)?, gate(tape, 1)?, gate(tape, 2)?, gate(tape, 3)?);
    let i = tape.sigmoid(i)?;
    let f = tape.sigmoid(f)?;
    let g = tape.tanh(g)?;
    let o = tape.sigmoid(o)?;
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c)?;
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}

/// One LSTM step on `1 × d_in` input with `1 × d_h` state.
pub fn lstm_step(
    tape: &mut Tape,
    ps: &ParameterSet,
    p: &LstmParams,
    x: Var,
    h_prev: Var,
    c_prev: Var,
) -> Result<(Var, Var)> {
    let ok = tape.shape(x) == [1, p.input_dim]
        && tape.shape(h_prev) == [1, p.hidden_dim]
        && tape.shape(c_prev) == [1, p.hidden_dim];
    if !ok {
        return Err(shape_err(
            "lstm_step",
            format!(
                "x {:?}, h {:?}, c {:?} for d_in={} d_h={}",
                tape.shape(x),
                tape.shape(h_prev),
                tape.shape(c_prev),
                p.input_dim,
                p.hidden_dim
            ),
        ));
    }
    let w_ih = tape.param(ps, p.w_ih)?;
    let x_proj = tape.matmul(x, w_ih)?;
    step_from_projection(tape, ps, p, x_proj, h_prev, c_prev)
}

/// Run the LSTM from zero state over the rows of `inputs` (`n × d_in`),
/// returning all hidden states as `n × d_h`.
pub fn lstm_encode_dialog(tape: &mut Tape, ps: &ParameterSet, p: &LstmParams, inputs: Var) -> Result<Var> {
    let (n, d_in) = tape.value(inputs).dims2()?;
    if d_in != p.input_dim {
        return Err(shape_err("lstm_encode_dialog", format!("input width {d_in}, expected {}", p.input_dim)));
    }
    let w_ih = tape.param(ps, p.w_ih)?;
    let proj = tape.matmul(inputs, w_ih)?;
    let mut h = tape.constant(Tensor::zeros(vec![1, p.hidden_dim]))?;
    let mut c = tape.constant(Tensor::zeros(vec![1, p.hidden_dim]))?;
    let mut states = Vec::with_capacity(n);
    for i in 0..n {
        let x_proj = tape.row(proj, i)?;
        (h, c) = step_from_projection(tape, ps, p, x_proj, h, c)?;
        states.push(h);
    }
    tape.concat(&states, 0)
}

/// Time-distributed 1-D convolution over MFCC frames, ReLU, then mean-pool
/// over time.
#[derive(Clone, Debug, PartialEq)]
pub struct AcousticEncoderParams {
    pub in_dim: usize,
    pub out_dim: usize,
    pub width: usize,
    /// `width·in_dim × out_dim`; row `tap·in_dim + c` holds input channel `c`
    /// at offset `tap − width/2`.
    pub kernel: ParamId,
    /// `1 × out_dim`
    pub bias: ParamId,
}

impl AcousticEncoderParams {
    pub fn init<R: Rng + ?Sized>(
        ps: &mut ParameterSet,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        width: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if width.is_multiple_of(2) {
            return Err(crate::Error::InvalidArgument(format!("kernel width {width} must be odd")));
        }
        let kernel = ps.insert(
            format!("{prefix}.kernel"),
            glorot(rng, vec![width * in_dim, out_dim], width * in_dim, out_dim),
        )?;
        let bias = ps.insert(format!("{prefix}.bias"), Tensor::zeros(vec![1, out_dim]))?;
        Ok(Self {
            in_dim,
            out_dim,
            width,
            kernel,
            bias,
        })
    }

    pub fn from_set(ps: &ParameterSet, prefix: &str, in_dim: usize, out_dim: usize, width: usize) -> Result<Self> {
        Ok(Self {
            in_dim,
            out_dim,
            width,
            kernel: ps.require(&format!("{prefix}.kernel"), &[width * in_dim, out_dim])?,
            bias: ps.require(&format!("{prefix}.bias"), &[1, out_dim])?,
        })
    }

    pub fn param_count(in_dim: usize, out_dim: usize, width: usize) -> usize {
        width * in_dim * out_dim + out_dim
    }
}

/// `F × in_dim` frames to a `1 × out_dim` utterance vector. Stride 1 with
/// zero padding, so the convolution output has `F` rows.
pub fn acoustic_encode(tape: &mut Tape, ps: &ParameterSet, p: &AcousticEncoderParams, frames: Var) -> Result<Var> {
    let (f, cols) = tape.value(frames).dims2()?;
    if cols != p.in_dim {
        return Err(shape_err("acoustic_encode", format!("{cols} coefficients per frame, expected {}", p.in_dim)));
    }
    let pad = p.width / 2;
    let padded = if pad > 0 {
        let z = tape.constant(Tensor::zeros(vec![pad, cols]))?;
        tape.concat(&[z, frames, z], 0)?
    } else {
        frames
    };
    let taps = (0..p.width)
        .map(|k| tape.narrow(padded, 0, k, f))
        .collect::<Result<Vec<_>>>()?;
    let cols = tape.concat(&taps, 1)?;
    let kernel = tape.param(ps, p.kernel)?;
    let bias = tape.param(ps, p.bias)?;
    let conv = tape.matmul(cols, kernel)?;
    let conv = tape.add_row(conv, bias)?;
    let act = tape.relu(conv)?;
    tape.mean_rows(act)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, sigmoid};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn zero_state(tape: &mut Tape, d: usize) -> (Var, Var) {
        (
            tape.constant(Tensor::zeros(vec![1, d])).unwrap(),
            tape.constant(Tensor::zeros(vec![1, d])).unwrap(),
        )
    }

    #[test]
    fn zero_params_give_zero_state() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParameterSet::new();
        let p = LstmParams::init(&mut ps, "l", 3, 4, &mut rng).unwrap();
        for id in ps.ids().collect::<Vec<_>>() {
            ps.get_mut(id).data_mut().fill(0.0);
        }
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
        let h0 = t.constant(Tensor::row(vec![0.3; 4]).unwrap()).unwrap();
        let c0 = t.constant(Tensor::row(vec![0.0; 4]).unwrap()).unwrap();
        let (h, c) = lstm_step(&mut t, &ps, &p, x, h0, c0).unwrap();
        assert!(t.data(h).iter().chain(t.data(c)).all(|&v| v == 0.0));
    }

    #[test]
    fn hidden_size_128_from_300_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParameterSet::new();
        let p = LstmParams::init(&mut ps, "l", 300, 128, &mut rng).unwrap();
        let mut t = Tape::new();
        let x = t.constant(random_matrix(&mut rng, 1, 300)).unwrap();
        let (h0, c0) = zero_state(&mut t, 128);
        let (h, _) = lstm_step(&mut t, &ps, &p, x, h0, c0).unwrap();
        assert_eq!(t.shape(h), &[1, 128]);
        assert!(lstm_step(&mut t, &ps, &p, h0, h0, c0).is_err());
    }

    #[test]
    fn constant_weights_match_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParameterSet::new();
        let p = LstmParams::init(&mut ps, "l", 2, 2, &mut rng).unwrap();
        for id in ps.ids().collect::<Vec<_>>() {
            ps.get_mut(id).data_mut().fill(0.1);
        }
        let mut t = Tape::new();
        let x = t.constant(Tensor::row(vec![1.0, 0.0]).unwrap()).unwrap();
        let (h0, c0) = zero_state(&mut t, 2);
        let (h, c) = lstm_step(&mut t, &ps, &p, x, h0, c0).unwrap();
        // every gate pre-activation is w·x + u·0 + b = 0.1 + 0.1
        let z: f64 = 0.1 * 1.0 + 0.1 * 0.0 + 0.1;
        let (ig, fg, og) = (sigmoid(z), sigmoid(z), sigmoid(z));
        let gg = z.tanh();
        let c_exp = fg * 0.0 + ig * gg;
        let h_exp = og * c_exp.tanh();
        for k in 0..2 {
            assert!((t.data(c)[k] - c_exp).abs() < 1e-10);
            assert!((t.data(h)[k] - h_exp).abs() < 1e-10);
        }
    }

    #[test]
    fn encode_single_equals_step_and_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ps = ParameterSet::new();
        let p = LstmParams::init(&mut ps, "l", 6, 5, &mut rng).unwrap();
        let inputs = random_matrix(&mut rng, 4, 6);

        let mut t = Tape::new();
        let first = t.constant(Tensor::row(inputs.row_slice(0).to_vec()).unwrap()).unwrap();
        let (h0, c0) = zero_state(&mut t, 5);
        let (h, _) = lstm_step(&mut t, &ps, &p, first, h0, c0).unwrap();
        let one = t.constant(first_rows(&inputs, 1)).unwrap();
        let enc1 = lstm_encode_dialog(&mut t, &ps, &p, one).unwrap();
        assert_eq!(t.data(enc1), t.data(h));

        let all = t.constant(inputs.clone()).unwrap();
        let enc = lstm_encode_dialog(&mut t, &ps, &p, all).unwrap();
        let mut extended = inputs.to_rows();
        extended.push((0..6).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let ext = t.constant(Tensor::from_rows(&extended).unwrap()).unwrap();
        let enc_ext = lstm_encode_dialog(&mut t, &ps, &p, ext).unwrap();
        assert_eq!(t.data(enc), &t.data(enc_ext)[..4 * 5]);
        assert!(t.data(enc_ext).iter().all(|v| v.abs() < 1.0));
    }

    fn first_rows(m: &Tensor, k: usize) -> Tensor {
        Tensor::from_rows(&m.to_rows()[..k]).unwrap()
    }

    #[test]
    fn encode_gradients_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut ps = ParameterSet::new();
        let p = LstmParams::init(&mut ps, "l", 6, 5, &mut rng).unwrap();
        let inputs = random_matrix(&mut rng, 4, 6);
        let report = grad_check(
            |ps, t| {
                let x = t.constant(inputs.clone())?;
                let h = lstm_encode_dialog(t, ps, &p, x)?;
                let last = t.row(h, 3)?;
                t.sum(last)
            },
            &ps,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }

    fn naive_conv(frames: &Tensor, kernel: &Tensor, bias: &[f64], width: usize) -> Vec<f64> {
        let (f, c_in) = (frames.rows(), frames.cols());
        let c_out = bias.len();
        let half = width as isize / 2;
        let mut pooled = vec![0.0; c_out];
        for t in 0..f as isize {
            for o in 0..c_out {
                let mut acc = bias[o];
                for tap in 0..width as isize {
                    let src = t + tap - half;
                    if src < 0 || src >= f as isize {
                        continue;
                    }
                    for c in 0..c_in {
                        acc += frames.get(src as usize, c) * kernel.get(tap as usize * c_in + c, o);
                    }
                }
                pooled[o] += acc.max(0.0) / f as f64;
            }
        }
        pooled
    }

    #[test]
    fn acoustic_zero_kernel_gives_relu_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut ps = ParameterSet::new();
        let p = AcousticEncoderParams::init(&mut ps, "a", 128, 4, 3, &mut rng).unwrap();
        ps.get_mut(p.kernel).data_mut().fill(0.0);
        ps.get_mut(p.bias).data_mut().copy_from_slice(&[0.5, -0.5, 2.0, 0.0]);
        let mut t = Tape::new();
        let fr = t.constant(random_matrix(&mut rng, 7, 128)).unwrap();
        let out = acoustic_encode(&mut t, &ps, &p, fr).unwrap();
        assert_eq!(t.data(out), &[0.5, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn acoustic_single_frame_uses_center_tap() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut ps = ParameterSet::new();
        let p = AcousticEncoderParams::init(&mut ps, "a", 128, 8, 3, &mut rng).unwrap();
        let frame = random_matrix(&mut rng, 1, 128);
        let mut t = Tape::new();
        let fr = t.constant(frame.clone()).unwrap();
        let out = acoustic_encode(&mut t, &ps, &p, fr).unwrap();
        let k = ps.get(p.kernel);
        for o in 0..8 {
            let center: f64 = (0..128).map(|c| frame.get(0, c) * k.get(128 + c, o)).sum::<f64>();
            let expect = (center + ps.get(p.bias).data()[o]).max(0.0);
            assert!((t.data(out)[o] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn acoustic_matches_naive_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut ps = ParameterSet::new();
        let p = AcousticEncoderParams::init(&mut ps, "a", 128, 128, 3, &mut rng).unwrap();
        for v in ps.get_mut(p.bias).data_mut() {
            *v = rng.gen_range(-0.1..0.1);
        }
        let frames = random_matrix(&mut rng, 5, 128);
        let mut t = Tape::new();
        let fr = t.constant(frames.clone()).unwrap();
        let out = acoustic_encode(&mut t, &ps, &p, fr).unwrap();
        let expect = naive_conv(&frames, ps.get(p.kernel), ps.get(p.bias).data(), 3);
        for (a, b) in t.data(out).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
        // appending silent frames changes the result only through pooling
        let mut rows = frames.to_rows();
        rows.push(vec![0.0; 128]);
        let padded = Tensor::from_rows(&rows).unwrap();
        let fr2 = t.constant(padded.clone()).unwrap();
        let out2 = acoustic_encode(&mut t, &ps, &p, fr2).unwrap();
        let expect2 = naive_conv(&padded, ps.get(p.kernel), ps.get(p.bias).data(), 3);
        for (a, b) in t.data(out2).iter().zip(&expect2) {
            assert!((a - b).abs() < 1e-12);
        }

        let wrong = t.constant(random_matrix(&mut rng, 2, 127)).unwrap();
        assert!(acoustic_encode(&mut t, &ps, &p, wrong).is_err());
    }

    #[test]
    fn acoustic_gradients_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut ps = ParameterSet::new();
        let p = AcousticEncoderParams::init(&mut ps, "a", 128, 3, 3, &mut rng).unwrap();
        for v in ps.get_mut(p.bias).data_mut() {
            *v = 0.3;
        }
        let frames = random_matrix(&mut rng, 4, 128);
        let report = grad_check(
            |ps, t| {
                let x = t.constant(frames.clone())?;
                let out = acoustic_encode(t, ps, &p, x)?;
                let sq = t.mul(out, out)?;
                t.sum(sq)
            },
            &ps,
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "{report}");
    }
}
