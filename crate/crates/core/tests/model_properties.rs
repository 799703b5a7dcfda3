use std::collections::BTreeMap;

use hps::model::{apply_update, backward, forward, log_loss, DenseParams, Example, ParamKey, SparseParam};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Mean logistic loss written out directly in f64: sum the embeddings, then
/// per layer a row-major `out x in` matrix followed by the biases, `tanh`
/// on hidden layers, sigmoid on the output.
fn reference_loss(examples: &[Example], emb: &BTreeMap<ParamKey, Vec<f64>>, dense: &[f64], dims: &[usize]) -> f64 {
    let mut total = 0.0;
    for ex in examples {
        let mut h = vec![0.0; dims[0]];
        for k in &ex.features {
            for (a, b) in h.iter_mut().zip(&emb[k]) {
                *a += b;
            }
        }
        let mut off = 0;
        for (l, w) in dims.windows(2).enumerate() {
            let (fin, fout) = (w[0], w[1]);
            let mut next = vec![0.0; fout];
            for (o, z) in next.iter_mut().enumerate() {
                *z = dense[off + fin * fout + o];
                for i in 0..fin {
                    *z += dense[off + o * fin + i] * h[i];
                }
                if l + 2 < dims.len() {
                    *z = z.tanh();
                }
            }
            off += (fin + 1) * fout;
            h = next;
        }
        let p = 1.0 / (1.0 + (-h[0]).exp());
        total += if ex.label == 1 { -p.ln() } else { -(1.0 - p).ln() };
    }
    total / examples.len() as f64
}

struct Tiny {
    examples: Vec<Example>,
    sparse: BTreeMap<ParamKey, SparseParam>,
    dense: DenseParams,
}

fn tiny(seed: u64, width: usize, hidden: &[usize]) -> Tiny {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dims = vec![width];
    dims.extend_from_slice(hidden);
    dims.push(1);
    let dense = DenseParams::init(&dims, seed, 0.8).unwrap();
    let examples: Vec<Example> = (0..6)
        .map(|_| {
            let n = rng.random_range(1..4);
            let feats = (0..n).map(|_| ParamKey(rng.random_range(0..5))).collect();
            Example::new(rng.random_range(0..2), feats).unwrap()
        })
        .collect();
    let sparse = (0..5)
        .map(|k| {
            let v = (0..width).map(|_| rng.random_range(-0.7f32..0.7)).collect();
            (ParamKey(k), SparseParam::from_embedding(v))
        })
        .collect();
    Tiny { examples, sparse, dense }
}

fn max_fd_error(t: &Tiny) -> f64 {
    let dims = &t.dense.layer_dims;
    let emb: BTreeMap<ParamKey, Vec<f64>> =
        t.sparse.iter().map(|(k, p)| (*k, p.embedding.iter().map(|&v| f64::from(v)).collect())).collect();
    let dense: Vec<f64> = t.dense.weights.iter().map(|&v| f64::from(v)).collect();
    let preds = forward(&t.examples, &t.sparse, &t.dense).unwrap();
    let g = backward(&t.examples, &t.sparse, &t.dense, &preds).unwrap();
    let h = 1e-4;
    let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-3);
    let mut worst = 0.0f64;
    for i in 0..dense.len() {
        let (mut up, mut down) = (dense.clone(), dense.clone());
        up[i] += h;
        down[i] -= h;
        let fd = (reference_loss(&t.examples, &emb, &up, dims) - reference_loss(&t.examples, &emb, &down, dims)) / (2.0 * h);
        worst = worst.max(rel(fd, f64::from(g.dense[i])));
    }
    for (k, grad) in &g.sparse {
        for i in 0..grad.len() {
            let (mut up, mut down) = (emb.clone(), emb.clone());
            up.get_mut(k).unwrap()[i] += h;
            down.get_mut(k).unwrap()[i] -= h;
            let fd = (reference_loss(&t.examples, &up, &dense, dims) - reference_loss(&t.examples, &down, &dense, dims)) / (2.0 * h);
            worst = worst.max(rel(fd, f64::from(grad[i])));
        }
    }
    worst
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn gradients_match_finite_differences(
        seed in any::<u64>(),
        width in 1usize..=4,
        hidden in prop::collection::vec(1usize..5, 0..=2),
    ) {
        let t = tiny(seed, width, &hidden);
        let err = max_fd_error(&t);
        prop_assert!(err < 1e-3, "max relative error {}", err);
    }
}

#[test]
fn reference_loss_agrees_with_forward() {
    let t = tiny(3, 3, &[4]);
    let preds = forward(&t.examples, &t.sparse, &t.dense).unwrap();
    let emb = t.sparse.iter().map(|(k, p)| (*k, p.embedding.iter().map(|&v| f64::from(v)).collect())).collect();
    let dense: Vec<f64> = t.dense.weights.iter().map(|&v| f64::from(v)).collect();
    let ours = log_loss(&t.examples, &preds);
    let theirs = reference_loss(&t.examples, &emb, &dense, &t.dense.layer_dims);
    assert!((ours - theirs).abs() < 1e-12, "{ours} vs {theirs}");
}

#[test]
fn sgd_decreases_loss_on_separable_data() {
    // Feature 0 marks positives, feature 1 negatives; 2 and 3 are noise.
    let examples: Vec<Example> = (0..40)
        .map(|i| {
            let label = (i % 2) as u8;
            let marker = if label == 1 { 0 } else { 1 };
            Example::new(label, vec![ParamKey(marker), ParamKey(2 + (i / 2) % 2)]).unwrap()
        })
        .collect();
    let mut dense = DenseParams::init(&[4, 8, 1], 5, 0.05).unwrap();
    let mut sparse: BTreeMap<ParamKey, SparseParam> = (0..4).map(|k| (ParamKey(k), SparseParam::zeros(4))).collect();
    let lr = 0.5;
    let loss_at = |s: &BTreeMap<ParamKey, SparseParam>, d: &DenseParams| {
        log_loss(&examples, &forward(&examples, s, d).unwrap())
    };
    let start = loss_at(&sparse, &dense);
    for _ in 0..100 {
        let preds = forward(&examples, &sparse, &dense).unwrap();
        let g = backward(&examples, &sparse, &dense, &preds).unwrap();
        for (k, grad) in &g.sparse {
            apply_update(sparse.get_mut(k).unwrap(), grad, lr).unwrap();
        }
        apply_update(&mut dense, &g.dense, lr).unwrap();
    }
    let end = loss_at(&sparse, &dense);
    assert!(end < start, "{end} >= {start}");
}

#[test]
fn forward_and_backward_are_pure() {
    let t = tiny(9, 4, &[3, 2]);
    let p1 = forward(&t.examples, &t.sparse, &t.dense).unwrap();
    let p2 = forward(&t.examples, &t.sparse, &t.dense).unwrap();
    assert!(p1.iter().zip(&p2).all(|(a, b)| a.to_bits() == b.to_bits()));
    let g1 = backward(&t.examples, &t.sparse, &t.dense, &p1).unwrap();
    let g2 = backward(&t.examples, &t.sparse, &t.dense, &p2).unwrap();
    assert_eq!(g1, g2);
    assert!(g1.dense.iter().zip(&g2.dense).all(|(a, b)| a.to_bits() == b.to_bits()));
}
