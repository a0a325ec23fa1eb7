//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. `MEMFUSE_ACCEPTANCE=1,3,6` runs a subset.

use std::collections::BTreeSet;
use std::time::Instant;

use memfuse::backbone;
use memfuse::datagen::{generate_corpus, Corpus, GeneratorConfig};
use memfuse::harness::checkpoint::{from_bytes, to_bytes};
use memfuse::harness::{
    ablate_variants, evaluate, gradcheck, load_checkpoint, load_params_into, save_checkpoint, smooth, train, AblationResult, EvalReport,
    Model, ModelConfig, SampleRecord, Variant, DEFAULT_SEEDS,
};
use memfuse::losses::align_loss;
use memfuse::mkf::{fuse, relevance_weights};
use memfuse::numerics::{cosine_similarity, softmax_with_temperature, Real, Tensor};
use memfuse::scd::{argmax, modulate_logits};
use memfuse::text::{prompt_for, Sample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn rvec(rng: &mut ChaCha8Rng, n: usize) -> Vec<Real> {
    (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect()
}

fn median(mut v: Vec<Real>) -> Real {
    v.sort_by(Real::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn held_out(c: &Corpus) -> Vec<Sample> {
    c.val.iter().chain(&c.test).cloned().collect()
}

fn gradient_integrity() -> Outcome {
    let t0 = Instant::now();
    let model = Model::new(gradcheck::toy_config(0)).map_err(|e| e.to_string())?;
    let reports = gradcheck::check_gradients(&model, &gradcheck::toy_batch(), 1e-4).map_err(|e| e.to_string())?;
    let secs = t0.elapsed().as_secs_f64();
    let groups: BTreeSet<&str> = reports.iter().map(|r| r.group.as_str()).collect();
    for g in ["query encoder", "document encoder", "gated memory", "backbone", "safety heads", "vocabulary mask"] {
        ensure(groups.contains(g), format!("group `{g}` not checked"))?;
    }
    let worst = reports.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap();
    ensure(worst.max_rel_error < 1e-4, format!("{} rel error {:.2e} at {}", worst.group, worst.max_rel_error, worst.worst))?;
    ensure(secs < 60.0, format!("took {secs:.1}s"))?;
    let n: usize = reports.iter().map(|r| r.checked).sum();
    Ok(format!("{n} scalars in {} groups, worst {:.2e} ({}), {secs:.1}s", reports.len(), worst.max_rel_error, worst.group))
}

fn gate_closed_identity() -> Outcome {
    let mut model = Model::new(ModelConfig::default()).map_err(|e| e.to_string())?;
    model.params_mut().get_mut("gmu.b_z").map_err(|e| e.to_string())?.data_mut().iter_mut().for_each(|b| *b = -60.0);
    let shape = model.backbone_shape();
    let corpus = generate_corpus(&GeneratorConfig::default()).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: Real = 0.0;
    for i in 0..100 {
        let tokens: Vec<usize> = if i % 2 == 0 {
            let s = &corpus.train[i];
            prompt_for(model.vocab(), &model.config().preamble, s, None).map_err(|e| e.to_string())?.tokens
        } else {
            let len = rng.gen_range(1..=shape.t_max);
            (0..len).map(|_| rng.gen_range(0..shape.vocab)).collect()
        };
        let k = Tensor::vector(rvec(&mut rng, model.config().d_enc));
        let (_, with) = backbone::forward(model.params(), &shape, &tokens, Some(&k)).map_err(|e| e.to_string())?;
        let (_, without) = backbone::forward(model.params(), &shape, &tokens, None).map_err(|e| e.to_string())?;
        for (a, b) in with.data().iter().zip(without.data()) {
            worst = worst.max((a - b).abs());
        }
    }
    ensure(worst <= 1e-10, format!("max deviation {worst:.3e}"))?;
    Ok(format!("100 prompts, max |Δlogit| {worst:.2e}"))
}

fn fusion_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut sum_err, mut fuse_err): (Real, Real) = (0.0, 0.0);
    for trial in 0..1000 {
        let n = rng.gen_range(1..=8);
        let d = rng.gen_range(1..=16);
        let docs: Vec<Tensor> = (0..n).map(|_| Tensor::vector(rvec(&mut rng, d))).collect();
        let q = Tensor::vector(rvec(&mut rng, d));
        let mut winners = BTreeSet::new();
        for tau in [0.01, 0.05, 1.0] {
            let alpha = relevance_weights(&q, &docs, tau).map_err(|e| e.to_string())?;
            sum_err = sum_err.max((alpha.data().iter().sum::<Real>() - 1.0).abs());
            winners.insert(argmax(alpha.data()));
            let k = fuse(&alpha, &docs).map_err(|e| e.to_string())?;
            for j in 0..d {
                let mut s = 0.0;
                for i in 0..n {
                    s += alpha.data()[i] * docs[i].data()[j];
                }
                fuse_err = fuse_err.max((k.data()[j] - s).abs());
            }
        }
        ensure(winners.len() == 1, format!("trial {trial}: argmax moved with temperature"))?;
    }
    ensure(sum_err <= 1e-10, format!("alpha sum off by {sum_err:.2e}"))?;
    ensure(fuse_err <= 1e-12, format!("fuse off by {fuse_err:.2e}"))?;
    Ok(format!("1000 trials, |Σα−1| ≤ {sum_err:.1e}, fuse error ≤ {fuse_err:.1e}"))
}

fn contrastive_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: Real = 0.0;
    for _ in 0..1000 {
        let n = rng.gen_range(2..=8);
        let d = rng.gen_range(1..=16);
        let docs: Vec<Tensor> = (0..n).map(|_| Tensor::vector(rvec(&mut rng, d))).collect();
        let q = Tensor::vector(rvec(&mut rng, d));
        let pos = rng.gen_range(0..n);
        let tau = rng.gen_range(0.02..2.0);
        let logits: Vec<Real> = docs.iter().map(|k| cosine_similarity(&q, k).unwrap() / tau).collect();
        let p = softmax_with_temperature(&Tensor::vector(logits), 1.0).map_err(|e| e.to_string())?;
        let want = -p.data()[pos].ln();
        let got = align_loss(&q, &docs, pos, tau).map_err(|e| e.to_string())?;
        worst = worst.max((got - want).abs());
    }
    ensure(worst <= 1e-10, format!("max deviation {worst:.3e}"))?;
    Ok(format!("1000 instances, max deviation {worst:.2e}"))
}

fn scd_arithmetic() -> Outcome {
    let model = Model::new(ModelConfig::default()).map_err(|e| e.to_string())?;
    let mut heads = model.safety_heads().map_err(|e| e.to_string())?.ok_or("no safety heads")?;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let v = heads.mask.len();
    for _ in 0..100 {
        heads.mask = Tensor::vector(rvec(&mut rng, v));
        let o = Tensor::vector(rvec(&mut rng, v));
        let l = heads.lambda_safe;
        let cases = [(false, false, 0.0), (true, false, 1.0), (false, true, 1.0), (true, true, 2.0)];
        for (pre, tok, k) in cases {
            let got = modulate_logits(&o, pre, tok, &heads);
            for i in 0..v {
                let want = if k == 0.0 { o.data()[i] } else { o.data()[i] - (k * l) * heads.mask.data()[i] };
                ensure(got.data()[i] == want, format!("state ({pre}, {tok}) index {i}: {} vs {want}", got.data()[i]))?;
            }
        }
    }
    let heads = model.safety_heads().map_err(|e| e.to_string())?.unwrap();
    let banned: Vec<usize> = (0..v).filter(|&i| heads.mask.data()[i] > 0.0).collect();
    let corpus = generate_corpus(&GeneratorConfig::default()).map_err(|e| e.to_string())?;
    let s = &corpus.test[0];
    let prompt = prompt_for(model.vocab(), &model.config().preamble, s, None).map_err(|e| e.to_string())?;
    let (_, logits) = backbone::forward(model.params(), &model.backbone_shape(), &prompt.tokens, None).map_err(|e| e.to_string())?;
    let o = Tensor::vector(logits.row(prompt.t_ctx - 1).to_vec());
    let mut last = Real::INFINITY;
    let mut probs = Vec::new();
    for lambda in [0.0, 1.0, 5.0, 25.0] {
        let h = memfuse::scd::SafetyHeads { lambda_safe: lambda, ..heads.clone() };
        let p = softmax_with_temperature(&modulate_logits(&o, true, false, &h), 1.0).map_err(|e| e.to_string())?;
        let mass: Real = banned.iter().map(|&i| p.data()[i]).sum();
        let single = p.data()[banned[0]];
        ensure(mass < last && single > 0.0, format!("masked mass not decreasing at λ={lambda}"))?;
        last = mass;
        probs.push(mass);
    }
    Ok(format!("three indicator states exact; masked mass {:.3e} > {:.3e} > {:.3e} > {:.3e}", probs[0], probs[1], probs[2], probs[3]))
}

fn recount(records: &[SampleRecord]) -> (Real, Real, Option<Real>, Real) {
    let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for r in records {
        match (r.y_safe, r.rejected, r.exact_match) {
            (1, true, _) => tp += 1,
            (1, false, _) => fn_ += 1,
            (_, true, _) => fp += 1,
            (_, false, true) => tn += 1,
            _ => {}
        }
    }
    let n = records.len() as Real;
    let acc = (tp + tn) as Real / n;
    let f1 = if tp + fp == 0 || tp + fn_ == 0 || tp == 0 {
        0.0
    } else {
        let p = tp as Real / (tp + fp) as Real;
        let r = tp as Real / (tp + fn_) as Real;
        2.0 * p * r / (p + r)
    };
    let unsafe_n = tp + fn_;
    let rr = (unsafe_n > 0).then(|| tp as Real / unsafe_n as Real);
    let mut krs = 0.0;
    for r in records {
        krs += r.krs;
    }
    (acc, f1, rr, krs / n)
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for trial in 0..100 {
        let n = rng.gen_range(1..=60);
        let records: Vec<SampleRecord> = (0..n)
            .map(|i| SampleRecord {
                id: format!("r{i}"),
                y_safe: rng.gen_bool(0.3) as u8,
                gold: String::new(),
                prediction: String::new(),
                rejected: rng.gen_bool(0.4),
                exact_match: rng.gen_bool(0.5),
                krs: rng.gen_range(-1.0..1.0),
                gate_mean: None,
                safety: None,
                fusion: None,
            })
            .collect();
        let report = EvalReport::from_records(records.clone(), 0, String::new());
        let (acc, f1, rr, krs) = recount(&records);
        ensure(report.accuracy == acc, format!("trial {trial}: accuracy {} vs {acc}", report.accuracy))?;
        ensure(report.f1 == f1, format!("trial {trial}: f1 {} vs {f1}", report.f1))?;
        ensure(report.rr == rr, format!("trial {trial}: rr {:?} vs {rr:?}", report.rr))?;
        ensure(report.krs == krs, format!("trial {trial}: krs {} vs {krs}", report.krs))?;
    }
    let c = memfuse::harness::Confusion { tp: 3, tn: 4, fp: 2, fn_: 1, wrong: 0 };
    ensure(c.accuracy() == 0.7, format!("fixed example gives {}", c.accuracy()))?;
    Ok("100 random reports match the recount; fixed example accuracy 0.7".into())
}

fn desk_scale_training() -> Outcome {
    let corpus = generate_corpus(&GeneratorConfig::default()).map_err(|e| e.to_string())?;
    let total = corpus.train.len() + corpus.val.len() + corpus.test.len();
    ensure(total == 500, format!("corpus holds {total} samples"))?;
    let cfg = ModelConfig::default();
    ensure(cfg.beta == 1.0 && cfg.lambda_safe == 5.0 && cfg.steps == 2000 && cfg.batch_size == 16, "defaults changed")?;
    let t0 = Instant::now();
    let (model, log) = train(&cfg, &corpus.train, |_, _| Ok(())).map_err(|e| e.to_string())?;
    let secs = t0.elapsed().as_secs_f64();
    let lm: Vec<Real> = log.iter().map(|r| r.l_lm).collect();
    let w = 50;
    let initial = lm[..w].iter().sum::<Real>() / w as Real;
    let last = *smooth(&lm, w).last().unwrap();
    let report = evaluate(&model, &held_out(&corpus)).map_err(|e| e.to_string())?;
    let em = report.safe_exact_match().unwrap_or(0.0);
    let rr = report.rr.unwrap_or(0.0);
    let line = format!(
        "{secs:.0}s, smoothed l_lm {initial:.3} -> {last:.3}, held-out EM {em:.3} over {} safe, RR {rr:.3} over {} unsafe",
        report.confusion.tn + report.confusion.fp + report.confusion.wrong,
        report.confusion.tp + report.confusion.fn_
    );
    ensure(secs < 600.0, format!("too slow: {line}"))?;
    ensure(last < 0.5 * initial, format!("loss: {line}"))?;
    ensure(em >= 0.8, format!("exact match: {line}"))?;
    ensure(rr >= 0.8, format!("rejection: {line}"))?;
    Ok(line)
}

/// Training shared by the ladder and sparsity criteria: shortened unless
/// `MEMFUSE_FULL_LADDER` is set.
fn reduced() -> ModelConfig {
    if std::env::var_os("MEMFUSE_FULL_LADDER").is_some() {
        return ModelConfig::default();
    }
    ModelConfig { steps: 600, batch_size: 8, ..ModelConfig::default() }
}

fn ladder(corpus: &Corpus) -> Result<AblationResult, String> {
    ablate_variants(&reduced(), &corpus.train, &held_out(corpus), &DEFAULT_SEEDS, &Variant::LADDER).map_err(|e| e.to_string())
}

fn directional_replication(result: &AblationResult) -> Outcome {
    let med = |v: Variant, f: fn(&EvalReport) -> Real| {
        median(DEFAULT_SEEDS.iter().map(|&s| f(&result.cell(v, s).unwrap().report)).collect())
    };
    let krs: Vec<Real> = Variant::LADDER.iter().map(|&v| med(v, |r| r.krs)).collect();
    let rr: Vec<Real> = Variant::LADDER.iter().map(|&v| med(v, |r| r.rr.unwrap_or(0.0))).collect();
    let line = format!(
        "median KRS {} | median RR {}",
        krs.iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(" "),
        rr.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(" ")
    );
    ensure(krs[3] >= krs[2] && krs[2] >= krs[1] && krs[1] >= krs[0], format!("KRS order: {line}"))?;
    ensure(rr[..3].iter().all(|&r| rr[3] >= r), format!("RR order: {line}"))?;
    Ok(line)
}

fn sparsity_response(corpus: &Corpus, ladder: &AblationResult) -> Outcome {
    let eval = held_out(corpus);
    let mut medians = Vec::new();
    for delta in [0.0, 0.01, 0.1] {
        let mut gates = Vec::new();
        for &seed in &DEFAULT_SEEDS {
            let cfg = ModelConfig { seed, delta, ..reduced() };
            let gate = match ladder.cell(Variant::Full, seed) {
                Some(c) if delta == reduced().delta => c.report.gate_mean,
                _ => {
                    let (m, _) = train(&cfg, &corpus.train, |_, _| Ok(())).map_err(|e| e.to_string())?;
                    evaluate(&m, &eval).map_err(|e| e.to_string())?.gate_mean
                }
            };
            gates.push(gate.ok_or("no gate activations")?);
        }
        medians.push(median(gates));
    }
    let line = format!("median gate δ=0: {:.4}, δ=0.01: {:.4}, δ=0.1: {:.4}", medians[0], medians[1], medians[2]);
    ensure(medians[0] >= medians[1] && medians[1] >= medians[2], line.clone())?;
    Ok(line)
}

fn determinism_and_persistence() -> Outcome {
    let corpus = generate_corpus(&GeneratorConfig { n_train: 24, n_val: 8, n_test: 8, n_entities: 80, ..GeneratorConfig::default() })
        .map_err(|e| e.to_string())?;
    let cfg = ModelConfig { steps: 20, batch_size: 4, ..ModelConfig::default() };
    let (a, _) = train(&cfg, &corpus.train, |_, _| Ok(())).map_err(|e| e.to_string())?;
    let (b, _) = train(&cfg, &corpus.train, |_, _| Ok(())).map_err(|e| e.to_string())?;
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (pa, pb) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
    save_checkpoint(&a, &pa).map_err(|e| e.to_string())?;
    save_checkpoint(&b, &pb).map_err(|e| e.to_string())?;
    let bytes = std::fs::read(&pa).map_err(|e| e.to_string())?;
    ensure(bytes == std::fs::read(&pb).map_err(|e| e.to_string())?, "same-seed checkpoints differ")?;

    let loaded = load_checkpoint(&pa).map_err(|e| e.to_string())?;
    let ra = serde_json::to_string(&evaluate(&a, &corpus.test).map_err(|e| e.to_string())?).unwrap();
    let rb = serde_json::to_string(&evaluate(&loaded, &corpus.test).map_err(|e| e.to_string())?).unwrap();
    ensure(ra == rb, "reports differ after round trip")?;

    let mut target = Model::new(ModelConfig { seed: 9, ..cfg.clone() }).map_err(|e| e.to_string())?;
    let before = to_bytes(&target);
    let bad = dir.path().join("bad.ckpt");
    let mut rejected = 0;
    for pos in (0..bytes.len()).step_by(bytes.len() / 64) {
        let mut c = bytes.clone();
        c[pos] ^= 0x5A;
        std::fs::write(&bad, &c).map_err(|e| e.to_string())?;
        ensure(from_bytes(&c).is_err() && load_params_into(&mut target, &bad).is_err(), format!("flip at byte {pos} accepted"))?;
        ensure(to_bytes(&target) == before, "failed load modified the model")?;
        rejected += 1;
    }
    std::fs::write(&bad, &bytes[..bytes.len() / 2]).map_err(|e| e.to_string())?;
    ensure(load_params_into(&mut target, &bad).is_err() && to_bytes(&target) == before, "truncated file accepted")?;
    Ok(format!("{} byte checkpoints identical, reports identical, {rejected} corruptions rejected", bytes.len()))
}

fn main() {
    let only: Option<BTreeSet<usize>> =
        std::env::var("MEMFUSE_ACCEPTANCE").ok().map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let wanted = |i: usize| only.as_ref().map_or(true, |s| s.contains(&i));
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let mut failed = 0;
    let mut report = |i: usize, name: &str, out: Outcome| {
        match &out {
            Ok(m) => println!("criterion {i:>2} PASS  {name}: {m}"),
            Err(m) => {
                failed += 1;
                println!("criterion {i:>2} FAIL  {name}: {m}");
            }
        }
    };
    pool.install(|| {
        let quick: [(&str, fn() -> Outcome); 6] = [
            ("gradient integrity", gradient_integrity),
            ("gate-closed identity", gate_closed_identity),
            ("fusion invariants", fusion_invariants),
            ("contrastive-loss oracle", contrastive_oracle),
            ("decoding modulation", scd_arithmetic),
            ("metric oracles", metric_oracles),
        ];
        for (i, (name, f)) in quick.into_iter().enumerate() {
            if wanted(i + 1) {
                report(i + 1, name, f());
            }
        }
        if wanted(7) {
            report(7, "desk-scale training", desk_scale_training());
        }
        if wanted(8) || wanted(9) {
            let corpus = generate_corpus(&GeneratorConfig::default()).unwrap();
            match ladder(&corpus) {
                Ok(result) => {
                    println!("{}", result.table().trim_end());
                    if wanted(8) {
                        report(8, "ablation ordering", directional_replication(&result));
                    }
                    if wanted(9) {
                        report(9, "sparsity response", sparsity_response(&corpus, &result));
                    }
                }
                Err(e) => {
                    for (i, name) in [(8, "ablation ordering"), (9, "sparsity response")] {
                        if wanted(i) {
                            report(i, name, Err(e.clone()));
                        }
                    }
                }
            }
        }
        if wanted(10) {
            report(10, "determinism and persistence", determinism_and_persistence());
        }
    });
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
