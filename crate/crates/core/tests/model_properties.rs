//! Properties of the sequence network checked from outside the crate.

use flowseq::aggregate::WINDOW;
use flowseq::nn::{adam_step, loss, softmax, AdamConfig, AdamState, ModelConfig, ModelGrads, ModelParams};
use flowseq::tokenize::PAD;

fn small(vocab: usize, hidden: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        embedding_dim: 50,
        hidden1: hidden,
        hidden2: hidden,
        dense: hidden,
    }
}

fn ctx(real: &[u32]) -> [u32; WINDOW] {
    let mut c = [PAD; WINDOW];
    c[WINDOW - real.len()..].copy_from_slice(real);
    c
}

fn dense(w: &flowseq::nn::Tensor2, b: &[f64], x: &[f64]) -> Vec<f64> {
    (0..b.len())
        .map(|r| b[r] + (0..x.len()).map(|c| w.get(r, c) * x[c]).sum::<f64>())
        .collect()
}

/// The network evaluated layer by layer on the real tokens alone.
fn unpadded_forward(p: &ModelParams, tokens: &[u32]) -> Vec<f64> {
    let emb: Vec<Vec<f64>> = tokens.iter().map(|&t| p.embedding.row(t as usize).to_vec()).collect();
    let (f1, _) = p.lstm1_fwd.forward(&emb);
    let rev: Vec<Vec<f64>> = emb.iter().rev().cloned().collect();
    let (mut b1, _) = p.lstm1_bwd.forward(&rev);
    b1.reverse();
    let l1: Vec<Vec<f64>> = f1.iter().zip(&b1).map(|(a, b)| [a.as_slice(), b].concat()).collect();
    let (f2, _) = p.lstm2_fwd.forward(&l1);
    let l1_rev: Vec<Vec<f64>> = l1.iter().rev().cloned().collect();
    let (b2, _) = p.lstm2_bwd.forward(&l1_rev);
    let top: Vec<f64> = [f2.last().unwrap().as_slice(), b2.last().unwrap()]
        .concat()
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
    let hidden: Vec<f64> = dense(&p.dense_hidden.w, &p.dense_hidden.b, &top)
        .into_iter()
        .map(|v| v.max(0.0))
        .collect();
    softmax(&dense(&p.dense_out.w, &p.dense_out.b, &hidden))
}

#[test]
fn padded_forward_equals_unpadded_evaluation() {
    let p = ModelParams::init(small(9, 6), 3);
    for real in [&[4u32][..], &[2, 7, 7], &[8, 1, 3, 5, 2, 6, 4, 4, 2, 3]] {
        let padded = p.predict(&ctx(real)).unwrap();
        assert_eq!(padded, unpadded_forward(&p, real));
    }
}

#[test]
fn pad_embedding_row_is_never_read() {
    let mut p = ModelParams::init(small(6, 4), 8);
    let before = p.predict(&ctx(&[2, 3, 5])).unwrap();
    p.embedding.row_mut(PAD as usize).fill(1e6);
    assert_eq!(p.predict(&ctx(&[2, 3, 5])).unwrap(), before);
    let (_, cache) = p.forward(&ctx(&[2, 3, 5])).unwrap();
    let mut g = ModelGrads::zeros(&p.config);
    p.backward(&cache, 4, 1.0, &mut g);
    assert!(!g.embedding.contains_key(&PAD));
}

#[test]
fn swapping_directions_mirrors_layer_one() {
    let p = ModelParams::init(small(8, 5), 11);
    let mut swapped = p.clone();
    std::mem::swap(&mut swapped.lstm1_fwd, &mut swapped.lstm1_bwd);
    let tokens = [2u32, 5, 3, 7, 6];
    let reversed: Vec<u32> = tokens.iter().rev().copied().collect();
    let a = p.layer1_outputs(&ctx(&tokens)).unwrap();
    let b = swapped.layer1_outputs(&ctx(&reversed)).unwrap();
    let h = p.config.hidden1;
    for t in 0..tokens.len() {
        let mirrored = &b[tokens.len() - 1 - t];
        assert_eq!(a[t][..h], mirrored[h..]);
        assert_eq!(a[t][h..], mirrored[..h]);
    }
}

#[test]
fn confident_correct_prediction_has_near_zero_gradient() {
    let mut p = ModelParams::init(small(5, 4), 2);
    // Push the output bias so token 3 takes essentially all the mass.
    p.dense_out.b[3] = 60.0;
    let (probs, cache) = p.forward(&ctx(&[2, 4])).unwrap();
    assert!(loss(&probs, 3, 1.0) < 1e-20);
    let mut g = ModelGrads::zeros(&p.config);
    p.backward(&cache, 3, 1.0, &mut g);
    let max = g
        .dense_slices()
        .iter()
        .flat_map(|s| s.iter())
        .chain(g.embedding.values().flatten())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    assert!(max < 1e-20, "{max}");
}

#[test]
fn gradient_scales_with_class_weight() {
    let p = ModelParams::init(small(6, 4), 5);
    let (_, cache) = p.forward(&ctx(&[2, 3])).unwrap();
    let mut g1 = ModelGrads::zeros(&p.config);
    p.backward(&cache, 4, 1.0, &mut g1);
    let mut g3 = ModelGrads::zeros(&p.config);
    p.backward(&cache, 4, 3.0, &mut g3);
    g1.scale(3.0);
    for (a, b) in g1.dense_slices().iter().zip(g3.dense_slices()) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1.0));
        }
    }
}

#[test]
fn optimizer_reduces_loss_on_a_fixed_example() {
    let mut p = ModelParams::init(small(6, 8), 4);
    let mut state = AdamState::new(&p);
    let hp = AdamConfig {
        lr: 1e-2,
        ..AdamConfig::default()
    };
    let c = ctx(&[2, 3, 4]);
    let start = loss(&p.predict(&c).unwrap(), 5, 1.0);
    for _ in 0..30 {
        let (_, cache) = p.forward(&c).unwrap();
        let mut g = ModelGrads::zeros(&p.config);
        p.backward(&cache, 5, 1.0, &mut g);
        adam_step(&mut p, &g, &mut state, &hp).unwrap();
    }
    let end = loss(&p.predict(&c).unwrap(), 5, 1.0);
    assert!(end < start * 0.5, "{start} -> {end}");
}
