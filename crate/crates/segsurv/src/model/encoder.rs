//! Pre-norm transformer encoder with tapped intermediate layers.
//!
//! Each layer: `x += Attn(LN(x))` then `x += MLP(LN(x))`, GELU inside the
//! MLP, no dropout. Attention projections carry no biases. Outputs after
//! every tapped layer are returned in tap order.

use crate::autodiff::{Scalar, Tape, TensorRef};
use crate::error::ModelError;
use crate::params::BoundParams;

use super::ModelConfig;

/// Projection handles for one attention layer.
#[derive(Clone, Copy)]
pub struct AttentionParams {
    pub wq: TensorRef,
    pub wk: TensorRef,
    pub wv: TensorRef,
    pub wo: TensorRef,
}

impl AttentionParams {
    fn from_bound(bound: &BoundParams, layer: usize) -> Self {
        Self {
            wq: bound.get(&format!("enc.l{layer}.wq")),
            wk: bound.get(&format!("enc.l{layer}.wk")),
            wv: bound.get(&format!("enc.l{layer}.wv")),
            wo: bound.get(&format!("enc.l{layer}.wo")),
        }
    }
}

/// Multi-head self-attention over `[m, h]`, returning the output and the
/// per-head `[m, m]` attention-weight matrices.
pub fn attention_with_weights<T: Scalar>(
    tape: &mut Tape<T>,
    p: &AttentionParams,
    heads: usize,
    x: TensorRef,
) -> Result<(TensorRef, Vec<TensorRef>), ModelError> {
    let h = tape.value(x).shape()[1];
    debug_assert_eq!(h % heads, 0);
    let dq = h / heads;

    let q = tape.matmul(x, p.wq)?;
    let k = tape.matmul(x, p.wk)?;
    let v = tape.matmul(x, p.wv)?;

    let mut head_outputs = Vec::with_capacity(heads);
    let mut head_weights = Vec::with_capacity(heads);
    for a in 0..heads {
        let (lo, hi) = (a * dq, (a + 1) * dq);
        let qa = tape.slice(q, 1, lo, hi)?;
        let ka = tape.slice(k, 1, lo, hi)?;
        let va = tape.slice(v, 1, lo, hi)?;
        let kat = tape.transpose(ka)?;
        let scores = tape.matmul(qa, kat)?;
        let scores = tape.scale(scores, 1.0 / (dq as f64).sqrt())?;
        let weights = tape.softmax_rows(scores)?;
        head_outputs.push(tape.matmul(weights, va)?);
        head_weights.push(weights);
    }
    let merged = tape.concat(&head_outputs, 1)?;
    let out = tape.matmul(merged, p.wo)?;
    Ok((out, head_weights))
}

/// Multi-head self-attention, output only.
pub fn attention<T: Scalar>(
    tape: &mut Tape<T>,
    p: &AttentionParams,
    heads: usize,
    x: TensorRef,
) -> Result<TensorRef, ModelError> {
    Ok(attention_with_weights(tape, p, heads, x)?.0)
}

/// Runs all layers over `x0` (`[(n+1), h]`) and returns the outputs of the
/// tapped layers, ascending. The last entry is the encoder output.
pub fn encode<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    cfg: &ModelConfig,
    x0: TensorRef,
) -> Result<Vec<TensorRef>, ModelError> {
    let mut x = x0;
    let mut taps = Vec::with_capacity(cfg.taps.len());
    for l in 1..=cfg.layers {
        let pre = format!("enc.l{l}");
        let h1 = tape.layer_norm(
            x,
            bound.get(&format!("{pre}.ln1_g")),
            bound.get(&format!("{pre}.ln1_b")),
        )?;
        let attn = attention(
            tape,
            &AttentionParams::from_bound(bound, l),
            cfg.heads,
            h1,
        )?;
        x = tape.add(x, attn)?;

        let h2 = tape.layer_norm(
            x,
            bound.get(&format!("{pre}.ln2_g")),
            bound.get(&format!("{pre}.ln2_b")),
        )?;
        let m = tape.matmul(h2, bound.get(&format!("{pre}.mlp_w1")))?;
        let m = tape.add_bias(m, bound.get(&format!("{pre}.mlp_b1")))?;
        let m = tape.gelu(m)?;
        let m = tape.matmul(m, bound.get(&format!("{pre}.mlp_w2")))?;
        let m = tape.add_bias(m, bound.get(&format!("{pre}.mlp_b2")))?;
        x = tape.add(x, m)?;

        if cfg.taps.contains(&l) {
            taps.push(x);
        }
    }
    Ok(taps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::model::init_params;
    use crate::mtlr::MtlrConfig;
    use rand::Rng;
    use rand::SeedableRng;

    fn toy_config() -> ModelConfig {
        ModelConfig {
            input_shape: [8, 8, 4],
            patch: 4,
            embed_dim: 8,
            layers: 3,
            heads: 2,
            mlp_ratio: 2,
            ehr_features: 5,
            taps: vec![2, 3],
            decoder_widths: vec![4, 6],
            head_hidden: [6, 4],
            time_bins: 3,
        }
    }

    fn mtlr() -> MtlrConfig {
        MtlrConfig::new(vec![100.0, 300.0]).unwrap()
    }

    #[test]
    fn zero_weights_unit_gains_make_layers_identity() {
        let cfg = toy_config();
        let mut params = init_params::<f64>(&cfg, &mtlr(), 1).unwrap();
        params.zero_where(|n| n.starts_with("enc.") && !n.ends_with("_g"));
        let mut tape = crate::autodiff::Tape::new();
        let bound = params.register(&mut tape);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..9 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x0 = tape.constant(Tensor::new(vec![9, 8], data.clone()).unwrap());
        let taps = encode(&mut tape, &bound, &cfg, x0).unwrap();
        for t in taps {
            let out: Vec<f64> = tape.value(t).iter_f64().collect();
            for (a, b) in out.iter().zip(&data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_weight_rows_sum_to_one_and_match_dense_oracle() {
        let mut tape = crate::autodiff::Tape::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (m, h, heads) = (5, 8, 2);
        let rand_mat = |tape: &mut crate::autodiff::Tape<f64>,
                        rng: &mut rand_chacha::ChaCha8Rng,
                        r: usize,
                        c: usize| {
            let data: Vec<f64> = (0..r * c).map(|_| rng.random_range(-0.7..0.7)).collect();
            tape.param(Tensor::new(vec![r, c], data).unwrap())
        };
        let x = rand_mat(&mut tape, &mut rng, m, h);
        let p = AttentionParams {
            wq: rand_mat(&mut tape, &mut rng, h, h),
            wk: rand_mat(&mut tape, &mut rng, h, h),
            wv: rand_mat(&mut tape, &mut rng, h, h),
            wo: rand_mat(&mut tape, &mut rng, h, h),
        };
        let (out, weights) = attention_with_weights(&mut tape, &p, heads, x).unwrap();

        for w in &weights {
            let v = tape.value(*w).data();
            for r in 0..m {
                let s: f64 = v[r * m..(r + 1) * m].iter().sum();
                assert!((s - 1.0).abs() < 1e-6);
            }
        }

        // Dense per-element oracle.
        let read = |r: TensorRef, tape: &crate::autodiff::Tape<f64>| {
            (
                tape.value(r).shape().to_vec(),
                tape.value(r).data().to_vec(),
            )
        };
        let (_, xv) = read(x, &tape);
        let (_, wq) = read(p.wq, &tape);
        let (_, wk) = read(p.wk, &tape);
        let (_, wv) = read(p.wv, &tape);
        let (_, wo) = read(p.wo, &tape);
        let matmul = |a: &[f64], b: &[f64], m: usize, k: usize, n: usize| {
            let mut o = vec![0.0; m * n];
            for i in 0..m {
                for l in 0..k {
                    for j in 0..n {
                        o[i * n + j] += a[i * k + l] * b[l * n + j];
                    }
                }
            }
            o
        };
        let q = matmul(&xv, &wq, m, h, h);
        let k = matmul(&xv, &wk, m, h, h);
        let v = matmul(&xv, &wv, m, h, h);
        let dq = h / heads;
        let mut merged = vec![0.0; m * h];
        for a in 0..heads {
            for i in 0..m {
                let mut row = vec![0.0; m];
                for j in 0..m {
                    let mut dot = 0.0;
                    for c in 0..dq {
                        dot += q[i * h + a * dq + c] * k[j * h + a * dq + c];
                    }
                    row[j] = dot / (dq as f64).sqrt();
                }
                let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|&s| (s - mx).exp()).collect();
                let z: f64 = exps.iter().sum();
                for c in 0..dq {
                    let mut acc = 0.0;
                    for j in 0..m {
                        acc += exps[j] / z * v[j * h + a * dq + c];
                    }
                    merged[i * h + a * dq + c] = acc;
                }
            }
        }
        let expect = matmul(&merged, &wo, m, h, h);
        let (_, got) = read(out, &tape);
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn single_token_attention_is_linear_in_v() {
        // With one token the softmax weight is exactly 1, so the output is
        // x Wv Wo regardless of Wq and Wk.
        let mut tape = crate::autodiff::Tape::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let h = 6;
        let data: Vec<f64> = (0..h).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = tape.constant(Tensor::new(vec![1, h], data).unwrap());
        let mk = |tape: &mut crate::autodiff::Tape<f64>,
                  rng: &mut rand_chacha::ChaCha8Rng| {
            let d: Vec<f64> = (0..h * h).map(|_| rng.random_range(-1.0..1.0)).collect();
            tape.constant(Tensor::new(vec![h, h], d).unwrap())
        };
        let wq = mk(&mut tape, &mut rng);
        let wk = mk(&mut tape, &mut rng);
        let wv = mk(&mut tape, &mut rng);
        let wo = mk(&mut tape, &mut rng);
        let p = AttentionParams { wq, wk, wv, wo };
        let out = attention(&mut tape, &p, 2, x).unwrap();
        let xv = tape.matmul(x, wv).unwrap();
        let direct = tape.matmul(xv, wo).unwrap();
        let a: Vec<f64> = tape.value(out).iter_f64().collect();
        let b: Vec<f64> = tape.value(direct).iter_f64().collect();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_queries_give_uniform_attention() {
        let mut tape = crate::autodiff::Tape::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let (m, h) = (4, 4);
        let data: Vec<f64> = (0..m * h).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = tape.constant(Tensor::new(vec![m, h], data).unwrap());
        let wq = tape.constant(Tensor::zeros(vec![h, h]));
        let mk = |tape: &mut crate::autodiff::Tape<f64>,
                  rng: &mut rand_chacha::ChaCha8Rng| {
            let d: Vec<f64> = (0..h * h).map(|_| rng.random_range(-1.0..1.0)).collect();
            tape.constant(Tensor::new(vec![h, h], d).unwrap())
        };
        let wk = mk(&mut tape, &mut rng);
        let wv = mk(&mut tape, &mut rng);
        let wo = mk(&mut tape, &mut rng);
        let p = AttentionParams { wq, wk, wv, wo };
        let (_, weights) = attention_with_weights(&mut tape, &p, 2, x).unwrap();
        for w in weights {
            for v in tape.value(w).data() {
                assert!((v - 1.0 / m as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn permuting_tokens_permutes_outputs() {
        let cfg = toy_config();
        let params = init_params::<f64>(&cfg, &mtlr(), 21).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let m = 9;
        let data: Vec<f64> = (0..m * 8).map(|_| rng.random_range(-1.0..1.0)).collect();

        let run = |rows: &[usize], params: &crate::params::ParamStore<f64>| {
            let mut tape = crate::autodiff::Tape::new();
            let bound = params.register(&mut tape);
            let mut permuted = vec![0.0; m * 8];
            for (dst, &src) in rows.iter().enumerate() {
                permuted[dst * 8..(dst + 1) * 8].copy_from_slice(&data[src * 8..(src + 1) * 8]);
            }
            let x0 = tape.constant(Tensor::new(vec![m, 8], permuted).unwrap());
            let taps = encode(&mut tape, &bound, &cfg, x0).unwrap();
            let last = *taps.last().unwrap();
            tape.value(last).data().to_vec()
        };

        let identity: Vec<usize> = (0..m).collect();
        let mut shuffled = identity.clone();
        shuffled.swap(0, 5);
        shuffled.swap(2, 8);
        let base = run(&identity, &params);
        let perm = run(&shuffled, &params);
        for (dst, &src) in shuffled.iter().enumerate() {
            for c in 0..8 {
                let a = perm[dst * 8 + c];
                let b = base[src * 8 + c];
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }
}
