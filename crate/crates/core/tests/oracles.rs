//! Operations checked against independent straight-line recomputations.

use memfuse::backbone::{self, BackboneShape};
use memfuse::gmu::{gmu_sequence, GmuParams};
use memfuse::losses::{align_loss, gate_loss, lm_loss, safe_loss, total_loss};
use memfuse::mkf::{fuse, relevance_weights, retrieve_top_n};
use memfuse::numerics::{cosine_similarity, matmul, sigmoid, softmax_with_temperature, tanh, Real, Tensor};
use memfuse::params::ParamStore;
use memfuse::scd::{self, pool_context, pre_reject_prob, Policy, SafetyHeads};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<Real> {
    (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
}

fn close(a: Real, b: Real, tol: Real) -> bool {
    (a - b).abs() <= tol
}

#[test]
fn matmul_matches_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = Tensor::matrix(3, 4, rand_vec(&mut rng, 12)).unwrap();
    let b = Tensor::matrix(4, 2, rand_vec(&mut rng, 8)).unwrap();
    let c = matmul(&a, &b).unwrap();
    assert_eq!(c.shape(), &[3, 2]);
    for i in 0..3 {
        for j in 0..2 {
            let mut s = 0.0;
            for k in 0..4 {
                s += a.data()[i * 4 + k] * b.data()[k * 2 + j];
            }
            assert!(close(c.data()[i * 2 + j], s, 1e-12));
        }
    }
}

#[test]
fn scalar_functions() {
    let e = std::f64::consts::E as Real;
    let p = softmax_with_temperature(&Tensor::vector(vec![1.0, 0.0]), 1.0).unwrap();
    assert!(close(p.data()[0], e / (e + 1.0), 1e-12));
    assert!(close(p.data()[0], 0.7311, 1e-4) && close(p.data()[1], 0.2689, 1e-4));
    let p = softmax_with_temperature(&Tensor::vector(vec![1.0, 0.0]), 0.05).unwrap();
    assert!(p.data()[0] >= 1.0 - 1e-8);
    assert!(close(sigmoid(&Tensor::scalar(1.0)).item(), 0.73106, 1e-5));
    assert!(close(tanh(&Tensor::scalar(1.0)).item(), 0.76159, 1e-5));
    let c = cosine_similarity(&Tensor::vector(vec![3.0, 4.0]), &Tensor::vector(vec![4.0, 3.0])).unwrap();
    assert!(close(c, 0.96, 1e-15));
}

#[test]
fn fusion_against_loop_sum_and_sort() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let docs: Vec<Tensor> = (0..5).map(|_| Tensor::vector(rand_vec(&mut rng, 6))).collect();
    let q = Tensor::vector(rand_vec(&mut rng, 6));
    let alpha = relevance_weights(&q, &docs, 0.7).unwrap();
    let k = fuse(&alpha, &docs).unwrap();
    for j in 0..6 {
        let mut s = 0.0;
        for (i, d) in docs.iter().enumerate() {
            s += alpha.data()[i] * d.data()[j];
        }
        assert!(close(k.data()[j], s, 1e-12));
    }
    let dots = [1.0, 0.0].map(|v| Tensor::vector(vec![v]));
    let a = relevance_weights(&Tensor::vector(vec![1.0]), &dots, 1.0).unwrap();
    assert!(close(a.data()[0], 0.7311, 1e-4));
    let a = relevance_weights(&Tensor::vector(vec![1.0]), &dots, 0.05).unwrap();
    assert!(a.data()[0] >= 1.0 - 1e-8);

    let corpus: Vec<Tensor> = (0..50).map(|_| Tensor::vector(rand_vec(&mut rng, 4))).collect();
    let query = Tensor::vector(rand_vec(&mut rng, 4));
    let mut scored: Vec<(Real, usize)> = corpus
        .iter()
        .enumerate()
        .map(|(i, d)| (d.data().iter().zip(query.data()).map(|(a, b)| a * b).sum(), i))
        .collect();
    scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let want: Vec<usize> = scored.iter().take(5).map(|s| s.1).collect();
    assert_eq!(retrieve_top_n(&query, &corpus, 5).unwrap(), want);
}

fn sig(x: Real) -> Real {
    1.0 / (1.0 + (-x).exp())
}

/// `W · [a; b] + bias` with `W` stored `[out × (|a| + |b|)]`.
fn affine(w: &Tensor, a: &[Real], b: &[Real], bias: Option<&Tensor>) -> Vec<Real> {
    let cols = a.len() + b.len();
    (0..w.shape()[0])
        .map(|o| {
            let row = &w.data()[o * cols..(o + 1) * cols];
            let s: Real = a.iter().chain(b).zip(row).map(|(x, y)| x * y).sum();
            s + bias.map_or(0.0, |t| t.data()[o])
        })
        .collect()
}

#[test]
fn gated_unit_matches_scalar_recomputation() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (d, e, t) = (3, 2, 4);
    let p = GmuParams::init(d, e, true, 9);
    let x = Tensor::matrix(t, d, rand_vec(&mut rng, t * d)).unwrap();
    let k = rand_vec(&mut rng, e);
    let (h, trace) = gmu_sequence(&x, &Tensor::vector(k.clone()), &p).unwrap();
    for s in 0..t {
        let xt = x.row(s);
        let z: Vec<Real> = affine(&p.w_z, xt, &k, p.b_z.as_ref()).into_iter().map(sig).collect();
        let r: Vec<Real> = affine(&p.w_r, xt, &k, p.b_r.as_ref()).into_iter().map(sig).collect();
        let rk: Vec<Real> = r.iter().zip(&k).map(|(a, b)| a * b).collect();
        let cand: Vec<Real> = affine(&p.w_h, xt, &rk, p.b_h.as_ref()).into_iter().map(Real::tanh).collect();
        for i in 0..d {
            let want = (1.0 - z[i]) * xt[i] + z[i] * cand[i];
            assert!(close(h.row(s)[i], want, 1e-12), "t={s} i={i}");
            assert!(close(trace.z.row(s)[i], z[i], 1e-12));
        }
    }
    let l1: Real = trace.z.data().iter().map(|v| v.abs()).sum();
    assert!(close(gate_loss(&trace, false), l1, 1e-12));
    assert!(close(gate_loss(&trace, true), l1 / (t * d) as Real, 1e-12));
}

fn layer_norm(x: &[Real], g: &Tensor, b: &Tensor) -> Vec<Real> {
    let n = x.len() as Real;
    let mean = x.iter().sum::<Real>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<Real>() / n;
    let r = 1.0 / (var + 1e-5).sqrt();
    x.iter().enumerate().map(|(i, v)| (v - mean) * r * g.data()[i] + b.data()[i]).collect()
}

fn dense(store: &ParamStore, prefix: &str, w: &str, b: &str, x: &[Real]) -> Vec<Real> {
    affine(store.get(&format!("{prefix}.{w}")).unwrap(), x, &[], Some(store.get(&format!("{prefix}.{b}")).unwrap()))
}

fn gelu(x: Real) -> Real {
    let u = (2.0 / std::f64::consts::PI as Real).sqrt() * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

#[test]
fn one_token_backbone_matches_straight_line_blocks() {
    let shape = BackboneShape { vocab: 11, width: 8, layers: 2, heads: 2, t_max: 4 };
    let mut store = ParamStore::new();
    shape.init(&mut store, 21);
    let tok = 7;
    let (_, logits) = backbone::forward(&store, &shape, &[tok], None).unwrap();

    let g = |n: &str| store.get(&format!("backbone.{n}")).unwrap();
    let d = shape.width;
    let mut x: Vec<Real> = (0..d).map(|i| g("embed").data()[tok * d + i] + g("pos").data()[i]).collect();
    for l in 0..shape.layers {
        let b = format!("backbone.block{l}");
        let h = layer_norm(&x, g(&format!("block{l}.ln1.gain")), g(&format!("block{l}.ln1.bias")));
        let qkv = affine(g(&format!("block{l}.attn.w_qkv")), &h, &[], None);
        let v: Vec<Real> = qkv[2 * d..].iter().zip(g(&format!("block{l}.attn.b_v")).data()).map(|(x, b)| x + b).collect();
        let a = dense(&store, &format!("{b}.attn"), "w_o", "b_o", &v);
        x.iter_mut().zip(&a).for_each(|(x, a)| *x += a);
        let h = layer_norm(&x, g(&format!("block{l}.ln2.gain")), g(&format!("block{l}.ln2.bias")));
        let f: Vec<Real> = dense(&store, &format!("{b}.ff"), "w1", "b1", &h).into_iter().map(gelu).collect();
        let f = dense(&store, &format!("{b}.ff"), "w2", "b2", &f);
        x.iter_mut().zip(&f).for_each(|(x, f)| *x += f);
    }
    let h = layer_norm(&x, g("ln_f.gain"), g("ln_f.bias"));
    let w = g("w_out");
    for v in 0..shape.vocab {
        let want: Real = (0..d).map(|i| h[i] * w.data()[i * shape.vocab + v]).sum();
        assert!(close(logits.data()[v], want, 1e-10), "v={v}");
    }
}

#[test]
fn objective_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (t, v) = (5, 7);
    let logits = Tensor::matrix(t, v, rand_vec(&mut rng, t * v)).unwrap();
    let targets: Vec<usize> = (0..t).map(|_| rng.gen_range(0..v)).collect();
    let mut want = 0.0;
    for s in 1..4 {
        let row = logits.row(s);
        let m = row.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
        let lse = m + row.iter().map(|x| (x - m).exp()).sum::<Real>().ln();
        want += lse - row[targets[s]];
    }
    assert!(close(lm_loss(&logits, &targets, 1..4).unwrap(), want, 1e-10));

    assert!(close(safe_loss(0.9, 0), (10.0 as Real).ln(), 1e-12));
    assert!(close(safe_loss(0.9, 1), -(0.9 as Real).ln(), 1e-12));

    let l = align_loss(&Tensor::vector(vec![1.0, 0.0]), &[Tensor::vector(vec![2.0, 0.0]), Tensor::vector(vec![0.0, 3.0])], 0, 1.0).unwrap();
    assert!(close(l, 0.3133, 1e-4));

    for _ in 0..20 {
        let (a, b, c, e) = (rng.gen::<Real>(), rng.gen::<Real>(), rng.gen::<Real>(), rng.gen::<Real>());
        let (be, ga, de) = (rng.gen_range(0.0..3.0), rng.gen_range(0.0..3.0), rng.gen_range(0.0..0.5));
        let r = total_loss(a, b, c, e, be, ga, de).unwrap();
        assert!(close(r.total, a + be * b + ga * c + de * e, 1e-14));
    }
}

#[test]
fn pooling_and_utterance_head() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = Tensor::matrix(4, 3, rand_vec(&mut rng, 12)).unwrap();
    let pooled = pool_context(&h, 3).unwrap();
    for j in 0..3 {
        let m = (0..3).map(|i| h.row(i)[j]).sum::<Real>() / 3.0;
        assert!(close(pooled.data()[j], m, 1e-14));
    }
    let heads = SafetyHeads {
        w_pre: Tensor::vector(vec![1.0, 0.0]),
        b_pre: 0.0,
        w_tok: Tensor::zeros(&[2]),
        b_tok: 0.0,
        mask: Tensor::zeros(&[3]),
        lambda_safe: 1.0,
        tau_pre: 0.5,
        tau_tok: 0.5,
        policy: Policy::SoftPenalize,
    };
    let p = pre_reject_prob(&Tensor::vector(vec![1.0, 9.0]), &heads).unwrap();
    assert!(close(p, 0.7311, 1e-4));
}

#[test]
fn banned_token_never_decoded() {
    let (d, v) = (4, 6);
    let banned = 3;
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut w_out = Tensor::matrix(d, v, rand_vec(&mut rng, d * v)).unwrap();
    for i in 0..d {
        w_out.data_mut()[i * v + banned] += 3.0;
    }
    let mut mask = Tensor::zeros(&[v]);
    mask.data_mut()[banned] = 50.0;
    let heads = SafetyHeads {
        w_pre: Tensor::zeros(&[d]),
        b_pre: 10.0,
        w_tok: Tensor::zeros(&[d]),
        b_tok: 0.0,
        mask,
        lambda_safe: 100.0,
        tau_pre: 0.5,
        tau_tok: 1.0 - 1e-9,
        policy: Policy::SoftPenalize,
    };
    let states = |seq: &[usize]| {
        let data: Vec<Real> = seq.iter().flat_map(|&t| (0..d).map(move |i| ((t * 7 + i * 3) % 5) as Real * 0.3 + 0.1)).collect();
        Tensor::matrix(seq.len(), d, data)
    };
    let (out, trace) = scd::generate(&[1, 4], Some(&heads), &w_out, 40, 20, states).unwrap();
    let trace = trace.unwrap();
    assert!(trace.pre_fired);
    assert!(trace.steps.iter().all(|s| !s.tok_fired && s.penalty == 100.0));
    assert!(!out.contains(&banned));
    let (plain, _) = scd::generate(&[1, 4], None, &w_out, 40, 20, states).unwrap();
    assert!(plain.contains(&banned));
}
