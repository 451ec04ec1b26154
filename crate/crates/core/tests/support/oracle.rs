//! Reference implementation of the causal rescorer that decodes one
//! position at a time with cached keys and values, in f64, with plain loops.

use rescorer_core::model::{LayerNormWeights, RescorerConfig, RescorerParams};
use rescorer_core::nn::{AttentionWeights, Linear};

const EPS: f64 = 1e-6;
const SOS: u32 = 1;
const EOS: u32 = 2;

fn f(v: f32) -> f64 {
    v as f64
}

fn linear(x: &[f64], l: &Linear<f32>) -> Vec<f64> {
    let (din, dout) = (l.weight.shape()[0], l.weight.shape()[1]);
    let w = l.weight.data();
    (0..dout)
        .map(|j| {
            let mut acc = l.bias.as_ref().map_or(0.0, |b| f(b.data()[j]));
            for i in 0..din {
                acc += x[i] * f(w[i * dout + j]);
            }
            acc
        })
        .collect()
}

fn add_norm(x: &[f64], y: &[f64], n: &LayerNormWeights<f32>) -> Vec<f64> {
    let z: Vec<f64> = x.iter().zip(y).map(|(a, b)| a + b).collect();
    let d = z.len() as f64;
    let mean = z.iter().sum::<f64>() / d;
    let var = z.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
    z.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / (var + EPS).sqrt() * f(n.gamma.data()[i]) + f(n.beta.data()[i]))
        .collect()
}

/// Attention of one query over `keys`/`values` rows.
fn attend(q: &[f64], keys: &[Vec<f64>], values: &[Vec<f64>], heads: usize) -> Vec<f64> {
    let d = q.len();
    let dh = d / heads;
    let mut out = vec![0.0; d];
    for h in 0..heads {
        let r = h * dh..(h + 1) * dh;
        let scores: Vec<f64> = keys
            .iter()
            .map(|k| q[r.clone()].iter().zip(&k[r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
            .collect();
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        for (e, v) in exps.iter().zip(values) {
            for c in r.clone() {
                out[c] += e / z * v[c];
            }
        }
    }
    out
}

struct Memory {
    keys: Vec<Vec<f64>>,
    values: Vec<Vec<f64>>,
}

fn project_memory(w: &AttentionWeights<f32>, rows: &[Vec<f64>]) -> Memory {
    Memory {
        keys: rows.iter().map(|r| linear(r, &w.k)).collect(),
        values: rows.iter().map(|r| linear(r, &w.v)).collect(),
    }
}

/// `log P(hyp, EOS | features)` decoded incrementally.
pub fn incremental_log_prob(
    cfg: &RescorerConfig,
    p: &RescorerParams<f32>,
    features: &[f32],
    hyp: &[u32],
) -> f64 {
    let d = cfg.d_model;
    let enc_rows: Vec<Vec<f64>> = features
        .chunks(cfg.enc_in_dim)
        .map(|row| {
            let x: Vec<f64> = row.iter().map(|&v| f(v)).collect();
            let h: Vec<f64> = linear(&x, &p.encoder.proj1).into_iter().map(|v| v.max(0.0)).collect();
            linear(&h, &p.encoder.proj2)
        })
        .collect();
    let cross_memory: Vec<Option<Memory>> = p
        .layers
        .iter()
        .map(|l| l.cross.as_ref().map(|c| project_memory(&c.attn, &enc_rows)))
        .collect();
    let mut self_memory: Vec<Memory> =
        p.layers.iter().map(|_| Memory { keys: vec![], values: vec![] }).collect();

    let inputs: Vec<u32> = std::iter::once(SOS).chain(hyp.iter().copied()).collect();
    let targets: Vec<u32> = hyp.iter().copied().chain(std::iter::once(EOS)).collect();
    let mut total = 0.0;
    for (t, (&input, &target)) in inputs.iter().zip(&targets).enumerate() {
        let mut x: Vec<f64> = (0..d)
            .map(|c| {
                let angle = t as f64 / 10000f64.powf(2.0 * (c / 2) as f64 / d as f64);
                let pe = if c % 2 == 0 { angle.sin() } else { angle.cos() };
                f(p.embedding.data()[input as usize * d + c]) * (d as f64).sqrt() + pe
            })
            .collect();
        for (li, layer) in p.layers.iter().enumerate() {
            let a = &layer.self_attn;
            let q = linear(&x, &a.q);
            self_memory[li].keys.push(linear(&x, &a.k));
            self_memory[li].values.push(linear(&x, &a.v));
            let ctx = attend(&q, &self_memory[li].keys, &self_memory[li].values, cfg.num_heads);
            x = add_norm(&x, &linear(&ctx, &a.o), &layer.self_norm);
            if let (Some(cross), Some(mem)) = (&layer.cross, &cross_memory[li]) {
                let q = linear(&x, &cross.attn.q);
                let ctx = attend(&q, &mem.keys, &mem.values, cfg.num_heads);
                x = add_norm(&x, &linear(&ctx, &cross.attn.o), &cross.norm);
            }
            let h: Vec<f64> = linear(&x, &layer.ffn.w1).into_iter().map(|v| v.max(0.0)).collect();
            x = add_norm(&x, &linear(&h, &layer.ffn.w2), &layer.ffn_norm);
        }
        let logits = linear(&x, &p.output);
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += logits[target as usize] - lse;
    }
    total
}
