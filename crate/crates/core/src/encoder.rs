//! Bidirectional LSTM whose per-token output is the sum of both directions.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// One direction's weights in factored form.
///
/// Gate blocks are laid out along columns in the order input, forget,
/// output, candidate, each `d` wide.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmParams {
    /// `in x 4d`
    pub w_x: Tensor,
    /// `d x 4d`
    pub w_h: Tensor,
    /// `1 x 4d`
    pub bias: Tensor,
}

impl LstmParams {
    /// Uniform in `[-1/sqrt(d), 1/sqrt(d)]`, forget-gate bias 1.
    pub fn random(rng: &mut impl Rng, input: usize, hidden: usize) -> Self {
        let bound = 1.0 / (hidden as f64).sqrt();
        let mut u = |shape: &[usize]| Tensor::from_fn(shape, |_| rng.gen_range(-bound..=bound));
        let w_x = u(&[input, 4 * hidden]);
        let w_h = u(&[hidden, 4 * hidden]);
        let mut bias = u(&[1, 4 * hidden]);
        bias.data_mut()[hidden..2 * hidden].fill(1.0);
        Self { w_x, w_h, bias }
    }

    pub fn hidden(&self) -> usize {
        self.w_h.shape()[0]
    }

    pub fn bind(&self, g: &mut Graph) -> LstmVars {
        LstmVars {
            w_x: g.leaf(&self.w_x),
            w_h: g.leaf(&self.w_h),
            bias: g.leaf(&self.bias),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w_x: Var,
    pub w_h: Var,
    pub bias: Var,
}

fn run_direction(g: &mut Graph, x: Var, p: &LstmVars, reverse: bool) -> Result<Vec<Var>> {
    let l = g.shape(x)[0];
    let d = g.shape(p.w_h)[0];
    if g.shape(p.w_h) != [d, 4 * d] || g.shape(p.bias) != [1, 4 * d] || g.shape(p.w_x)[1] != 4 * d {
        return Err(Error::Dimension {
            op: "lstm",
            lhs: g.shape(p.w_x).to_vec(),
            rhs: g.shape(p.w_h).to_vec(),
        });
    }
    let xw = g.matmul(x, p.w_x)?;
    let pre_all = g.add(xw, p.bias)?;

    let mut out = vec![None; l];
    let mut state: Option<(Var, Var)> = None;
    let order: Box<dyn Iterator<Item = usize>> = if reverse {
        Box::new((0..l).rev())
    } else {
        Box::new(0..l)
    };
    for t in order {
        let xt = g.row(pre_all, t)?;
        // zero initial state: the recurrent and forget terms vanish at the first step
        let pre = match state {
            Some((h, _)) => {
                let rec = g.matmul(h, p.w_h)?;
                g.add(xt, rec)?
            }
            None => xt,
        };
        let gi = g.slice_cols(pre, 0, d)?;
        let gf = g.slice_cols(pre, d, d)?;
        let go = g.slice_cols(pre, 2 * d, d)?;
        let gc = g.slice_cols(pre, 3 * d, d)?;
        let i = g.sigmoid(gi);
        let o = g.sigmoid(go);
        let cand = g.tanh(gc);
        let write = g.mul(i, cand)?;
        let c = match state {
            Some((_, c_prev)) => {
                let f = g.sigmoid(gf);
                let keep = g.mul(f, c_prev)?;
                g.add(keep, write)?
            }
            None => write,
        };
        let tc = g.tanh(c);
        let h = g.mul(o, tc)?;
        out[t] = Some(h);
        state = Some((h, c));
    }
    Ok(out.into_iter().map(|h| h.expect("every step visited")).collect())
}

/// `l x d` encoding of an `l x in` input: forward and backward hidden states
/// added row by row.
pub fn blstm(g: &mut Graph, x: Var, forward: &LstmVars, backward: &LstmVars) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 2 || shape[0] == 0 {
        return Err(Error::contract(format!("blstm needs an l x in matrix, got {shape:?}")));
    }
    let fw = run_direction(g, x, forward, false)?;
    let bw = run_direction(g, x, backward, true)?;
    let fw = g.concat(&fw, 0)?;
    let bw = g.concat(&bw, 0)?;
    g.add(fw, bw)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_difference, relative_error};
    use crate::tensor::sigmoid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encode(x: &Tensor, f: &LstmParams, b: &LstmParams) -> Vec<f64> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let fv = f.bind(&mut g);
        let bv = b.bind(&mut g);
        let h = blstm(&mut g, xv, &fv, &bv).unwrap();
        g.value(h).to_vec()
    }

    fn zeros(input: usize, d: usize) -> LstmParams {
        LstmParams {
            w_x: Tensor::zeros(&[input, 4 * d]),
            w_h: Tensor::zeros(&[d, 4 * d]),
            bias: Tensor::zeros(&[1, 4 * d]),
        }
    }

    /// Scalar LSTM (d = 1, input width 1) from zero state.
    fn scalar_lstm(xs: &[f64], p: &LstmParams) -> Vec<f64> {
        let (wx, wh, b) = (p.w_x.data(), p.w_h.data(), p.bias.data());
        let (mut h, mut c) = (0.0, 0.0);
        xs.iter()
            .map(|&x| {
                let pre = |k: usize| x * wx[k] + h * wh[k] + b[k];
                let i = sigmoid(pre(0));
                let f = sigmoid(pre(1));
                let o = sigmoid(pre(2));
                let cand = pre(3).tanh();
                c = f * c + i * cand;
                h = o * c.tanh();
                h
            })
            .collect()
    }

    #[test]
    fn zero_params_zero_output() {
        let x = Tensor::zeros(&[4, 3]);
        let out = encode(&x, &zeros(3, 2), &zeros(3, 2));
        assert_eq!(out.len(), 8);
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_scalar_recurrence() {
        let f = LstmParams {
            w_x: Tensor::matrix(1, 4, vec![0.5, -0.3, 0.8, 1.2]).unwrap(),
            w_h: Tensor::matrix(1, 4, vec![0.1, 0.4, -0.6, 0.9]).unwrap(),
            bias: Tensor::matrix(1, 4, vec![0.0, 1.0, 0.2, -0.1]).unwrap(),
        };
        let b = LstmParams {
            w_x: Tensor::matrix(1, 4, vec![-0.7, 0.2, 0.3, 0.5]).unwrap(),
            w_h: Tensor::matrix(1, 4, vec![0.6, -0.2, 0.1, -0.4]).unwrap(),
            bias: Tensor::matrix(1, 4, vec![0.1, 1.0, -0.3, 0.25]).unwrap(),
        };
        let xs = [0.7, -1.3];
        let x = Tensor::matrix(2, 1, xs.to_vec()).unwrap();
        let out = encode(&x, &f, &b);
        let fw = scalar_lstm(&xs, &f);
        let mut bw = scalar_lstm(&[xs[1], xs[0]], &b);
        bw.reverse();
        for i in 0..2 {
            assert!((out[i] - (fw[i] + bw[i])).abs() < 1e-15);
        }
    }

    #[test]
    fn palindrome_with_shared_params_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = LstmParams::random(&mut rng, 3, 4);
        let rows = [[0.1, 0.5, -0.2], [0.9, -0.4, 0.3], [0.7, 0.7, 0.0]];
        let seq = [rows[0], rows[1], rows[2], rows[1], rows[0]];
        let x = Tensor::matrix(5, 3, seq.iter().flatten().copied().collect()).unwrap();
        let out = encode(&x, &p, &p);
        for i in 0..5 {
            let j = 4 - i;
            for c in 0..4 {
                assert!((out[i * 4 + c] - out[j * 4 + c]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn zeroed_backward_leaves_forward_alone() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = LstmParams::random(&mut rng, 2, 3);
        let x = Tensor::from_fn(&[4, 2], |i| (i as f64 * 0.37).sin());
        let both = encode(&x, &f, &zeros(2, 3));
        // forward alone: run with the same params in a one-direction graph
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let fv = f.bind(&mut g);
        let rows = run_direction(&mut g, xv, &fv, false).unwrap();
        let fw: Vec<f64> = rows.iter().flat_map(|&r| g.value(r).to_vec()).collect();
        assert_eq!(both, fw);
    }

    #[test]
    fn output_shape_and_empty_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = LstmParams::random(&mut rng, 5, 6);
        assert_eq!(p.bias.data()[6..12], [1.0; 6]);
        let x = Tensor::zeros(&[7, 5]);
        assert_eq!(encode(&x, &p, &p).len(), 7 * 6);
        let mut g = Graph::new();
        let v = g.constant(Tensor::vector(vec![1.0]));
        let fv = p.bind(&mut g);
        assert!(blstm(&mut g, v, &fv, &fv).is_err());
    }

    #[test]
    fn gradients_through_both_directions() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let f = LstmParams::random(&mut rng, 3, 4);
        let b = LstmParams::random(&mut rng, 3, 4);
        let x = Tensor::from_fn(&[3, 3], |_| rng.gen_range(-1.0..1.0));
        let w = Tensor::from_fn(&[3, 4], |_| rng.gen_range(-1.0..1.0));

        let loss = |x: &Tensor, f: &LstmParams, b: &LstmParams, g: &mut Graph| {
            let xv = g.param(x);
            let fv = LstmVars {
                w_x: g.param(&f.w_x),
                w_h: g.param(&f.w_h),
                bias: g.param(&f.bias),
            };
            let bv = LstmVars {
                w_x: g.param(&b.w_x),
                w_h: g.param(&b.w_h),
                bias: g.param(&b.bias),
            };
            let h = blstm(g, xv, &fv, &bv).unwrap();
            let wv = g.constant(w.clone());
            let p = g.mul(h, wv).unwrap();
            let s = g.sum(p);
            (xv, fv, bv, s)
        };
        let mut g = Graph::new();
        let (xv, fv, bv, s) = loss(&x, &f, &b, &mut g);
        g.backward(s).unwrap();

        let value = |x: &Tensor, f: &LstmParams, b: &LstmParams| {
            let mut g = Graph::new();
            let (.., s) = loss(x, f, b, &mut g);
            g.scalar(s)
        };
        let mut worst: f64 = 0.0;
        let mut compare = |analytic: &[f64], numeric: Vec<f64>| {
            for (a, n) in analytic.iter().zip(&numeric) {
                worst = worst.max(relative_error(*a, *n, 1e-5));
            }
        };
        compare(
            g.grad(xv).unwrap(),
            central_difference(|d| value(&Tensor::new(vec![3, 3], d.to_vec()).unwrap(), &f, &b), x.data(), 1e-6),
        );
        for (var, which) in [(fv.w_x, 0), (fv.w_h, 1), (bv.w_x, 2), (bv.w_h, 3), (bv.bias, 4)] {
            let base = match which {
                0 => &f.w_x,
                1 => &f.w_h,
                2 => &b.w_x,
                3 => &b.w_h,
                _ => &b.bias,
            };
            let numeric = central_difference(
                |d| {
                    let t = Tensor::new(base.shape().to_vec(), d.to_vec()).unwrap();
                    let (mut f2, mut b2) = (f.clone(), b.clone());
                    match which {
                        0 => f2.w_x = t,
                        1 => f2.w_h = t,
                        2 => b2.w_x = t,
                        3 => b2.w_h = t,
                        _ => b2.bias = t,
                    }
                    value(&x, &f2, &b2)
                },
                base.data(),
                1e-6,
            );
            compare(g.grad(var).unwrap(), numeric);
        }
        assert!(worst < 1e-4, "blstm gradient rel err {worst}");
    }
}
