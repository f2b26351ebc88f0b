//! Building blocks of the forecaster, expressed as tape operations.

use rand::Rng;

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::Result;

/// Sinusoidal positions: `p[i, 2j] = sin(i / 10000^{2j/d})`,
/// `p[i, 2j+1] = cos(i / 10000^{2j/d})`, for rows `i = 0..rows`.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionalTable {
    table: Tensor,
}

impl PositionalTable {
    pub fn new(rows: usize, d: usize) -> Self {
        let mut data = vec![0.0; rows * d];
        for i in 0..rows {
            for c in 0..d {
                let pair = (c / 2) as f64;
                let angle = i as f64 / 10000f64.powf(2.0 * pair / d as f64);
                data[i * d + c] = if c % 2 == 0 { angle.sin() } else { angle.cos() };
            }
        }
        PositionalTable { table: Tensor::from_parts(vec![rows, d], data) }
    }

    pub fn get(&self, i: usize, c: usize) -> f64 {
        self.table.get(i, c)
    }

    /// Rows `1..=len`, i.e. positions of a sequence counted from one.
    pub fn positions(&self, len: usize) -> Tensor {
        let d = self.table.cols();
        Tensor::from_parts(vec![len, d], self.table.data()[d..(len + 1) * d].to_vec())
    }

    pub fn rows(&self) -> usize {
        self.table.rows()
    }
}

/// Weights of one attention head.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

/// Scaled dot-product attention of queries from `xq` over keys/values from
/// `xkv`. Scores are laid out keys × queries and normalized down each column.
pub fn attention(tape: &mut Tape, xq: Var, xkv: Var, head: HeadVars) -> Result<Var> {
    let q = tape.matmul(xq, head.wq)?;
    let k = tape.matmul(xkv, head.wk)?;
    let v = tape.matmul(xkv, head.wv)?;
    let d_k = tape.value(q).cols() as f64;
    let qt = tape.transpose(q)?;
    let scores = tape.matmul(k, qt)?;
    let scores = tape.scale(scores, 1.0 / d_k.sqrt())?;
    let weights = tape.softmax_columns(scores)?;
    let wt = tape.transpose(weights)?;
    tape.matmul(wt, v)
}

/// Heads concatenated along features, projected by `wo`.
pub fn multi_head(tape: &mut Tape, xq: Var, xkv: Var, heads: &[HeadVars], wo: Var) -> Result<Var> {
    let outs = heads
        .iter()
        .map(|&h| attention(tape, xq, xkv, h))
        .collect::<Result<Vec<_>>>()?;
    let cat = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    tape.matmul(cat, wo)
}

/// `MaxPool(ELU(Conv1d(x) + bias))`, halving the sequence length.
pub fn conv_distill(tape: &mut Tape, x: Var, kernel: Var, bias: Var) -> Result<Var> {
    let c = tape.conv1d(x, kernel)?;
    let c = tape.add_row(c, bias)?;
    let e = tape.elu(c)?;
    tape.maxpool1d(e)
}

/// Two-layer position-wise network with ELU activation.
#[derive(Debug, Clone, Copy)]
pub struct FeedForwardVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

pub fn feed_forward<R: Rng + ?Sized>(
    tape: &mut Tape,
    x: Var,
    ff: FeedForwardVars,
    dropout: f64,
    rng: &mut Option<&mut R>,
) -> Result<Var> {
    let h = tape.matmul(x, ff.w1)?;
    let h = tape.add_row(h, ff.b1)?;
    let h = tape.elu(h)?;
    let h = maybe_dropout(tape, h, dropout, rng)?;
    let o = tape.matmul(h, ff.w2)?;
    tape.add_row(o, ff.b2)
}

/// Dropout when a noise source is present; identity otherwise.
pub fn maybe_dropout<R: Rng + ?Sized>(tape: &mut Tape, x: Var, p: f64, rng: &mut Option<&mut R>) -> Result<Var> {
    match rng {
        Some(r) => tape.dropout(x, p, *r),
        None => Ok(x),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn positional_table_values() {
        for d in [2, 3, 8, 32] {
            let p = PositionalTable::new(6, d);
            assert!((p.get(1, 0) - 1f64.sin()).abs() < 1e-15);
            assert!((p.get(1, 0) - 0.841471).abs() < 1e-6);
            for i in 0..6 {
                for c in (0..d - 1).step_by(2) {
                    let s = p.get(i, c).powi(2) + p.get(i, c + 1).powi(2);
                    assert!((s - 1.0).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn single_token_attention_returns_value_row() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut tape = Tape::new();
        let x = tape.constant(random(&[1, 4], &mut rng));
        let head = HeadVars {
            wq: tape.constant(random(&[4, 3], &mut rng)),
            wk: tape.constant(random(&[4, 3], &mut rng)),
            wv: tape.constant(random(&[4, 2], &mut rng)),
        };
        let a = attention(&mut tape, x, x, head).unwrap();
        let v = tape.matmul(x, head.wv).unwrap();
        assert_eq!(tape.value(a).data(), tape.value(v).data());
    }

    #[test]
    fn identical_tokens_give_identical_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let row = random(&[1, 4], &mut rng);
        let mut tape = Tape::new();
        let r = tape.constant(row);
        let x = tape.concat_rows(&[r, r, r]).unwrap();
        let head = HeadVars {
            wq: tape.constant(random(&[4, 3], &mut rng)),
            wk: tape.constant(random(&[4, 3], &mut rng)),
            wv: tape.constant(random(&[4, 3], &mut rng)),
        };
        let a = attention(&mut tape, x, x, head).unwrap();
        let v = tape.value(a);
        assert_eq!(v.row(0), v.row(1));
        assert_eq!(v.row(1), v.row(2));
    }

    #[test]
    fn attention_matches_straight_line_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (m, d) = (3, 4);
        let x = random(&[m, d], &mut rng);
        let (wq, wk, wv) = (random(&[d, d], &mut rng), random(&[d, d], &mut rng), random(&[d, d], &mut rng));

        // Independent reimplementation: row-wise softmax of QKᵀ/√d, times V.
        let proj = |w: &Tensor| -> Vec<Vec<f64>> {
            (0..m).map(|i| (0..d).map(|j| (0..d).map(|k| x.get(i, k) * w.get(k, j)).sum()).collect()).collect()
        };
        let (q, k, v) = (proj(&wq), proj(&wk), proj(&wv));
        let mut expect = vec![vec![0.0; d]; m];
        for i in 0..m {
            let s: Vec<f64> =
                (0..m).map(|j| (0..d).map(|c| q[i][c] * k[j][c]).sum::<f64>() / (d as f64).sqrt()).collect();
            let z: f64 = s.iter().map(|v| v.exp()).sum();
            for j in 0..m {
                for c in 0..d {
                    expect[i][c] += s[j].exp() / z * v[j][c];
                }
            }
        }

        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let head = HeadVars { wq: tape.constant(wq), wk: tape.constant(wk), wv: tape.constant(wv) };
        let a = attention(&mut tape, xv, xv, head).unwrap();
        let got = tape.value(a);
        for i in 0..m {
            for c in 0..d {
                assert!((got.get(i, c) - expect[i][c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_stay_inside_value_envelope() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let mut tape = Tape::new();
            let x = tape.constant(random(&[5, 4], &mut rng));
            let head = HeadVars {
                wq: tape.constant(random(&[4, 2], &mut rng)),
                wk: tape.constant(random(&[4, 2], &mut rng)),
                wv: tape.constant(random(&[4, 3], &mut rng)),
            };
            let a = attention(&mut tape, x, x, head).unwrap();
            let v = tape.matmul(x, head.wv).unwrap();
            let (a, v) = (tape.value(a), tape.value(v));
            for c in 0..3 {
                let lo = (0..5).map(|r| v.get(r, c)).fold(f64::INFINITY, f64::min);
                let hi = (0..5).map(|r| v.get(r, c)).fold(f64::NEG_INFINITY, f64::max);
                for r in 0..5 {
                    assert!(a.get(r, c) >= lo - 1e-12 && a.get(r, c) <= hi + 1e-12);
                }
            }
        }
    }

    #[test]
    fn multi_head_reductions() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut tape = Tape::new();
        let x = tape.constant(random(&[4, 3], &mut rng));
        let head = HeadVars {
            wq: tape.constant(random(&[3, 3], &mut rng)),
            wk: tape.constant(random(&[3, 3], &mut rng)),
            wv: tape.constant(random(&[3, 3], &mut rng)),
        };
        let single = attention(&mut tape, x, x, head).unwrap();
        let eye = tape.constant(Tensor::identity(3));
        let one = multi_head(&mut tape, x, x, &[head], eye).unwrap();
        assert_eq!(tape.value(one).data(), tape.value(single).data());

        let mut half = Tensor::zeros(&[6, 3]);
        for i in 0..3 {
            half.data_mut()[i * 3 + i] = 0.5;
            half.data_mut()[(i + 3) * 3 + i] = 0.5;
        }
        let wo = tape.constant(half);
        let dup = multi_head(&mut tape, x, x, &[head, head], wo).unwrap();
        for (a, b) in tape.value(dup).data().iter().zip(tape.value(single).data()) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn conv_distill_halves_length() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tape = Tape::new();
        let x = tape.constant(random(&[8, 3], &mut rng));
        let k = tape.constant(random(&[3, 3, 3], &mut rng));
        let b = tape.constant(Tensor::zeros(&[1, 3]));
        let y = conv_distill(&mut tape, x, k, b).unwrap();
        assert_eq!(tape.value(y).shape(), &[4, 3]);
    }

    #[test]
    fn conv_distill_identity_kernel_hand_trace() {
        // m=4, d=1, delta kernel, positive input: ELU is identity so the
        // result is the max of each adjacent pair.
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::matrix(4, 1, vec![0.5, 2.0, 3.0, 1.0]).unwrap());
        let k = tape.constant(Tensor::new(vec![3, 1, 1], vec![0.0, 1.0, 0.0]).unwrap());
        let b = tape.constant(Tensor::zeros(&[1, 1]));
        let y = conv_distill(&mut tape, x, k, b).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 3.0]);
    }

    #[test]
    fn layer_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let inputs = vec![
            random(&[5, 4], &mut rng),
            random(&[4, 2], &mut rng),
            random(&[4, 2], &mut rng),
            random(&[4, 2], &mut rng),
            random(&[4, 2], &mut rng),
            random(&[4, 2], &mut rng),
            random(&[4, 2], &mut rng),
            random(&[4, 4], &mut rng),
            random(&[3, 4, 4], &mut rng),
            random(&[1, 4], &mut rng),
        ];
        let weights = random(&[3, 4], &mut rng);
        let err = check_gradients(
            &inputs,
            |t, v| {
                let heads = [
                    HeadVars { wq: v[1], wk: v[2], wv: v[3] },
                    HeadVars { wq: v[4], wk: v[5], wv: v[6] },
                ];
                let a = multi_head(t, v[0], v[0], &heads, v[7])?;
                let c = conv_distill(t, a, v[8], v[9])?;
                let w = t.constant(weights.clone());
                let p = t.mul(c, w)?;
                t.sum(p)
            },
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-5, "rel err {err}");
    }
}
