//! Finite-difference verification of every differentiable op and of the
//! whole model, gates included. The oracle never touches the tape: it
//! re-evaluates the forward closure at perturbed inputs.

use std::rc::Rc;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use loza_core::attention::{attend_graph, blended_attention, mla_lite_project};
use loza_core::check::{central_diff, max_discrepancy, FD_STEP};
use loza_core::graph::IGNORE_TARGET;
use loza_core::mask::{AttnMask, SparsePattern};
use loza_core::model::{LayerMode, Model, ModelConfig, Trainable};
use loza_core::tensor::Tensor;
use loza_core::{Graph, NodeId};

const TOL: f64 = 1e-4;

fn randv(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Random values bounded away from zero, for ops with a kink there.
fn randv_nonzero(n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let v: f64 = rng.random_range(0.2..1.0);
            if rng.random_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect()
}

/// Checks d(loss)/d(leaf) against central differences, where `build` maps
/// the leaf to a scalar loss on a fresh graph each evaluation.
fn fd_check<F>(shape: Vec<usize>, x0: Vec<f64>, build: F) -> f64
where
    F: Fn(&mut Graph, NodeId) -> NodeId,
{
    let mut g = Graph::new();
    let leaf = g.leaf(
        Tensor::from_vec(shape.clone(), x0.clone())
            .unwrap()
            .requires_grad(true),
    );
    let loss = build(&mut g, leaf);
    g.backward(loss).unwrap();
    let analytic = g.grad(leaf).expect("leaf requires grad").to_vec();

    let numeric = central_diff(
        |x: &[f64]| {
            let mut g = Graph::new();
            let leaf = g.leaf(Tensor::from_vec(shape.clone(), x.to_vec()).unwrap());
            let loss = build(&mut g, leaf);
            g.value(loss).item()
        },
        &x0,
        FD_STEP,
    );
    let (at, err) = max_discrepancy(&analytic, &numeric);
    assert!(
        err < TOL,
        "gradient mismatch {err:.3e} at flat index {at} (analytic {}, numeric {})",
        analytic[at],
        numeric[at]
    );
    err
}

/// Weighted sum: a scalar loss that exposes every output coordinate with a
/// distinct, fixed weight.
fn weighted_sum(g: &mut Graph, x: NodeId, weights: &Tensor) -> NodeId {
    let w = g.leaf(weights.clone());
    let m = g.mul(x, w).unwrap();
    g.sum(m)
}

fn weights(shape: Vec<usize>, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, randv(n, &mut rng)).unwrap()
}

#[test]
fn add_mul_scale_relu_sigmoid() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let w = weights(vec![3, 4], 100);

    let other = Tensor::from_vec(vec![3, 4], randv(12, &mut rng)).unwrap();
    fd_check(vec![3, 4], randv(12, &mut rng), |g, x| {
        let o = g.leaf(other.clone());
        let y = g.add(x, o).unwrap();
        weighted_sum(g, y, &w)
    });
    fd_check(vec![3, 4], randv(12, &mut rng), |g, x| {
        let o = g.leaf(other.clone());
        let y = g.mul(x, o).unwrap();
        weighted_sum(g, y, &w)
    });
    fd_check(vec![3, 4], randv(12, &mut rng), |g, x| {
        let y = g.scale(x, -1.7);
        weighted_sum(g, y, &w)
    });
    fd_check(vec![3, 4], randv_nonzero(12, &mut rng), |g, x| {
        let y = g.relu(x);
        weighted_sum(g, y, &w)
    });
    fd_check(vec![3, 4], randv(12, &mut rng), |g, x| {
        let y = g.sigmoid(x);
        weighted_sum(g, y, &w)
    });
}

#[test]
fn matmul_both_arguments() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w = weights(vec![3, 5], 101);
    let b_fixed = Tensor::from_vec(vec![4, 5], randv(20, &mut rng)).unwrap();
    let a_fixed = Tensor::from_vec(vec![3, 4], randv(12, &mut rng)).unwrap();

    fd_check(vec![3, 4], randv(12, &mut rng), |g, a| {
        let b = g.leaf(b_fixed.clone());
        let y = g.matmul(a, b).unwrap();
        weighted_sum(g, y, &w)
    });
    fd_check(vec![4, 5], randv(20, &mut rng), |g, b| {
        let a = g.leaf(a_fixed.clone());
        let y = g.matmul(a, b).unwrap();
        weighted_sum(g, y, &w)
    });
}

#[test]
fn matmul_nt_both_arguments() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    // a: [3,4], b: [5,4] -> a bᵀ: [3,5]
    let w = weights(vec![3, 5], 102);
    let b_fixed = Tensor::from_vec(vec![5, 4], randv(20, &mut rng)).unwrap();
    let a_fixed = Tensor::from_vec(vec![3, 4], randv(12, &mut rng)).unwrap();

    fd_check(vec![3, 4], randv(12, &mut rng), |g, a| {
        let b = g.leaf(b_fixed.clone());
        let y = g.matmul_nt(a, b).unwrap();
        weighted_sum(g, y, &w)
    });
    fd_check(vec![5, 4], randv(20, &mut rng), |g, b| {
        let a = g.leaf(a_fixed.clone());
        let y = g.matmul_nt(a, b).unwrap();
        weighted_sum(g, y, &w)
    });
}

#[test]
fn affine_all_three_arguments() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = weights(vec![3, 5], 103);
    let x_fixed = Tensor::from_vec(vec![3, 4], randv(12, &mut rng)).unwrap();
    let w_fixed = Tensor::from_vec(vec![4, 5], randv(20, &mut rng)).unwrap();
    let b_fixed = Tensor::from_vec(vec![5], randv(5, &mut rng)).unwrap();

    fd_check(vec![3, 4], randv(12, &mut rng), |g, x| {
        let wn = g.leaf(w_fixed.clone());
        let bn = g.leaf(b_fixed.clone());
        let y = g.affine(x, wn, bn).unwrap();
        weighted_sum(g, y, &w)
    });
    fd_check(vec![4, 5], randv(20, &mut rng), |g, wn| {
        let x = g.leaf(x_fixed.clone());
        let bn = g.leaf(b_fixed.clone());
        let y = g.affine(x, wn, bn).unwrap();
        weighted_sum(g, y, &w)
    });
    fd_check(vec![5], randv(5, &mut rng), |g, bn| {
        let x = g.leaf(x_fixed.clone());
        let wn = g.leaf(w_fixed.clone());
        let y = g.affine(x, wn, bn).unwrap();
        weighted_sum(g, y, &w)
    });
}

#[test]
fn slice_and_concat_cols() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w_slice = weights(vec![3, 2], 104);
    fd_check(vec![3, 6], randv(18, &mut rng), |g, x| {
        let y = g.slice_cols(x, 2, 4).unwrap();
        weighted_sum(g, y, &w_slice)
    });

    let w_cat = weights(vec![3, 9], 105);
    let other = Tensor::from_vec(vec![3, 3], randv(9, &mut rng)).unwrap();
    fd_check(vec![3, 6], randv(18, &mut rng), |g, x| {
        let o = g.leaf(other.clone());
        let a = g.slice_cols(x, 0, 4).unwrap();
        let b = g.slice_cols(x, 4, 6).unwrap();
        let y = g.concat_cols(&[a, o, b]).unwrap();
        weighted_sum(g, y, &w_cat)
    });
}

#[test]
fn rmsnorm_input_and_gain() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let w = weights(vec![3, 4], 106);
    let gain_fixed = Tensor::from_vec(vec![4], randv_nonzero(4, &mut rng)).unwrap();
    let x_fixed = Tensor::from_vec(vec![3, 4], randv(12, &mut rng)).unwrap();

    fd_check(vec![3, 4], randv(12, &mut rng), |g, x| {
        let gain = g.leaf(gain_fixed.clone());
        let y = g.rmsnorm(x, gain).unwrap();
        weighted_sum(g, y, &w)
    });
    fd_check(vec![4], randv(4, &mut rng), |g, gain| {
        let x = g.leaf(x_fixed.clone());
        let y = g.rmsnorm(x, gain).unwrap();
        weighted_sum(g, y, &w)
    });
}

#[test]
fn embedding_table_gradient_with_repeats() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let w = weights(vec![4, 3], 107);
    // Id 2 appears twice so its row's gradient must accumulate.
    let ids = [2usize, 0, 2, 4];
    fd_check(vec![5, 3], randv(15, &mut rng), |g, table| {
        let y = g.embedding(table, &ids).unwrap();
        weighted_sum(g, y, &w)
    });
}

#[test]
fn softmax_rows_under_both_masks() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 6;
    let w = weights(vec![n, n], 108);
    for mask in [
        AttnMask::causal(n),
        AttnMask::streaming(n, &SparsePattern::new(1, 1, 2).unwrap()),
    ] {
        let mask = Rc::new(mask);
        fd_check(vec![n, n], randv(n * n, &mut rng), |g, scores| {
            let y = g.softmax_rows(scores, Some(mask.clone())).unwrap();
            weighted_sum(g, y, &w)
        });
    }
}

#[test]
fn cross_entropy_with_ignored_rows() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let targets = [1usize, IGNORE_TARGET, 3, 0];
    fd_check(vec![4, 5], randv(20, &mut rng), |g, logits| {
        g.cross_entropy(logits, &targets).unwrap()
    });
}

#[test]
fn blend_all_three_arguments() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let w = weights(vec![3, 4], 109);
    let f_fixed = Tensor::from_vec(vec![3, 4], randv(12, &mut rng)).unwrap();
    let s_fixed = Tensor::from_vec(vec![3, 4], randv(12, &mut rng)).unwrap();

    fd_check(vec![3, 4], randv(12, &mut rng), |g, f| {
        let s = g.leaf(s_fixed.clone());
        let a = g.leaf(Tensor::scalar(0.3));
        let y = g.blend(f, s, a).unwrap();
        weighted_sum(g, y, &w)
    });
    fd_check(vec![3, 4], randv(12, &mut rng), |g, s| {
        let f = g.leaf(f_fixed.clone());
        let a = g.leaf(Tensor::scalar(0.7));
        let y = g.blend(f, s, a).unwrap();
        weighted_sum(g, y, &w)
    });
    // The gate itself; interior value so the ±h probes stay in [0,1].
    fd_check(vec![1], vec![0.4], |g, a| {
        let f = g.leaf(f_fixed.clone());
        let s = g.leaf(s_fixed.clone());
        let y = g.blend(f, s, a).unwrap();
        weighted_sum(g, y, &w)
    });
}

#[test]
fn attention_q_k_v_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (n, d) = (6, 4);
    let w = weights(vec![n, d], 110);
    let q_fixed = Tensor::from_vec(vec![n, d], randv(n * d, &mut rng)).unwrap();
    let k_fixed = Tensor::from_vec(vec![n, d], randv(n * d, &mut rng)).unwrap();
    let v_fixed = Tensor::from_vec(vec![n, d], randv(n * d, &mut rng)).unwrap();
    let masks = [
        Rc::new(AttnMask::causal(n)),
        Rc::new(AttnMask::streaming(n, &SparsePattern::new(1, 1, 2).unwrap())),
    ];

    for mask in &masks {
        fd_check(vec![n, d], randv(n * d, &mut rng), |g, q| {
            let k = g.leaf(k_fixed.clone());
            let v = g.leaf(v_fixed.clone());
            let y = attend_graph(g, q, k, v, mask.clone()).unwrap();
            weighted_sum(g, y, &w)
        });
        fd_check(vec![n, d], randv(n * d, &mut rng), |g, k| {
            let q = g.leaf(q_fixed.clone());
            let v = g.leaf(v_fixed.clone());
            let y = attend_graph(g, q, k, v, mask.clone()).unwrap();
            weighted_sum(g, y, &w)
        });
        fd_check(vec![n, d], randv(n * d, &mut rng), |g, v| {
            let q = g.leaf(q_fixed.clone());
            let k = g.leaf(k_fixed.clone());
            let y = attend_graph(g, q, k, v, mask.clone()).unwrap();
            weighted_sum(g, y, &w)
        });
    }
}

#[test]
fn blended_attention_gate_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (n, d) = (8, 4);
    let w = weights(vec![n, d], 111);
    let q = Tensor::from_vec(vec![n, d], randv(n * d, &mut rng)).unwrap();
    let k = Tensor::from_vec(vec![n, d], randv(n * d, &mut rng)).unwrap();
    let v = Tensor::from_vec(vec![n, d], randv(n * d, &mut rng)).unwrap();
    let p = SparsePattern::new(1, 1, 2).unwrap();
    fd_check(vec![1], vec![0.6], |g, alpha| {
        let qn = g.leaf(q.clone());
        let kn = g.leaf(k.clone());
        let vn = g.leaf(v.clone());
        let y = blended_attention(g, qn, kn, vn, &p, alpha).unwrap();
        weighted_sum(g, y, &w)
    });
}

#[test]
fn latent_projection_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (n, d, latent, width) = (5, 4, 2, 4);
    let h_fixed = Tensor::from_vec(vec![n, d], randv(n * d, &mut rng)).unwrap();
    let wq_fixed = Tensor::from_vec(vec![d, width], randv(d * width, &mut rng)).unwrap();
    let down_fixed = Tensor::from_vec(vec![d, latent], randv(d * latent, &mut rng)).unwrap();
    let uk_fixed = Tensor::from_vec(vec![latent, width], randv(latent * width, &mut rng)).unwrap();
    let uv_fixed = Tensor::from_vec(vec![latent, width], randv(latent * width, &mut rng)).unwrap();
    let w = weights(vec![n, 3 * width], 112);

    // Loss touches q, k and v together so one check covers all outputs.
    let build_loss = |g: &mut Graph, h, wq, down, uk, uv| {
        let (q, k, v) = mla_lite_project(g, h, wq, down, uk, uv).unwrap();
        let all = g.concat_cols(&[q, k, v]).unwrap();
        weighted_sum(g, all, &w)
    };

    fd_check(vec![d, latent], randv(d * latent, &mut rng), |g, down| {
        let h = g.leaf(h_fixed.clone());
        let wq = g.leaf(wq_fixed.clone());
        let uk = g.leaf(uk_fixed.clone());
        let uv = g.leaf(uv_fixed.clone());
        build_loss(g, h, wq, down, uk, uv)
    });
    fd_check(vec![latent, width], randv(latent * width, &mut rng), |g, uk| {
        let h = g.leaf(h_fixed.clone());
        let wq = g.leaf(wq_fixed.clone());
        let down = g.leaf(down_fixed.clone());
        let uv = g.leaf(uv_fixed.clone());
        build_loss(g, h, wq, down, uk, uv)
    });
    fd_check(vec![latent, width], randv(latent * width, &mut rng), |g, uv| {
        let h = g.leaf(h_fixed.clone());
        let wq = g.leaf(wq_fixed.clone());
        let down = g.leaf(down_fixed.clone());
        let uk = g.leaf(uk_fixed.clone());
        build_loss(g, h, wq, down, uk, uv)
    });
}

// ── whole-model checks ──

fn gradcheck_model_config(latent: Option<usize>) -> ModelConfig {
    ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        head_dim: 4,
        latent_dim: latent,
        ffn_dim: 12,
        vocab_size: 13,
        max_seq_len: 16,
        seed: 21,
    }
}

fn fixed_tokens() -> (Vec<usize>, Vec<usize>) {
    let tokens = vec![3usize, 7, 1, 12, 4, 4, 9, 0, 5, 11, 2, 8];
    let mut targets: Vec<usize> = tokens[1..].to_vec();
    targets.push(IGNORE_TARGET);
    (tokens, targets)
}

fn model_loss(model: &Model, tokens: &[usize], targets: &[usize]) -> f64 {
    let mut g = Graph::new();
    let fwd = model
        .forward(&mut g, tokens, Some(targets), Trainable::None)
        .unwrap();
    g.value(fwd.loss.unwrap()).item()
}

/// Every backbone parameter of a 2-layer model, all three layer modes in
/// play, against finite differences.
#[test]
fn full_model_backbone_gradient() {
    for latent in [Some(4), None] {
        let mut model = Model::build(gradcheck_model_config(latent)).unwrap();
        let p = SparsePattern::new(1, 1, 2).unwrap();
        model.modes[0] = LayerMode::Sparse { pattern: p };
        model.modes[1] = LayerMode::Blended { pattern: p };
        model.gates[1] = Tensor::scalar(0.2);
        let (tokens, targets) = fixed_tokens();

        let mut g = Graph::new();
        let fwd = model
            .forward(&mut g, &tokens, Some(&targets), Trainable::All)
            .unwrap();
        g.backward(fwd.loss.unwrap()).unwrap();
        let mut analytic = Vec::new();
        for &node in &fwd.backbone_nodes {
            analytic.extend_from_slice(g.grad(node).expect("trainable leaf"));
        }

        let mut x0 = Vec::new();
        model.visit_params(&mut |_, t| x0.extend_from_slice(t.data()));
        let numeric = central_diff(
            |x: &[f64]| {
                let mut m = model.clone();
                let mut off = 0;
                m.visit_params_mut(&mut |_, t| {
                    let n = t.numel();
                    t.data_mut().copy_from_slice(&x[off..off + n]);
                    off += n;
                });
                model_loss(&m, &tokens, &targets)
            },
            &x0,
            FD_STEP,
        );
        let (at, err) = max_discrepancy(&analytic, &numeric);
        assert!(
            err < TOL,
            "latent {latent:?}: backbone gradient mismatch {err:.3e} at flat index {at}"
        );
    }
}

/// d(loss)/d(gate) on a 2-layer model where both layers blend.
#[test]
fn full_model_gate_gradient() {
    let mut model = Model::build(gradcheck_model_config(Some(4))).unwrap();
    let p = SparsePattern::new(1, 1, 2).unwrap();
    model.modes[0] = LayerMode::Blended { pattern: p };
    model.modes[1] = LayerMode::Blended { pattern: p };
    model.gates[0] = Tensor::scalar(-0.3);
    model.gates[1] = Tensor::scalar(0.5);
    let (tokens, targets) = fixed_tokens();

    let mut g = Graph::new();
    let fwd = model
        .forward(&mut g, &tokens, Some(&targets), Trainable::Gates)
        .unwrap();
    g.backward(fwd.loss.unwrap()).unwrap();
    let analytic: Vec<f64> = fwd
        .gate_nodes
        .iter()
        .map(|n| g.grad(n.expect("blended")).expect("gate grad")[0])
        .collect();

    let x0: Vec<f64> = (0..2).map(|i| model.gates[i].item()).collect();
    let numeric = central_diff(
        |raw: &[f64]| {
            let mut m = model.clone();
            for (i, &r) in raw.iter().enumerate() {
                m.gates[i] = Tensor::scalar(r);
            }
            model_loss(&m, &tokens, &targets)
        },
        &x0,
        FD_STEP,
    );
    let (at, err) = max_discrepancy(&analytic, &numeric);
    assert!(err < TOL, "gate gradient mismatch {err:.3e} at gate {at}");
}
