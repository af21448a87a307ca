//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line per
//! criterion and exits nonzero if any failed.

use std::collections::BTreeMap;
use std::panic::{self, AssertUnwindSafe};
use std::time::Instant;

use ctlrp::evalharness::{
    fidelity, fidelity_at_sparsity, sparsity, sweep, EvalConfig, EvalReport, Split,
};
use ctlrp::explain::{ExplanationRecord, Method};
use ctlrp::graphdata::{
    events_to_jsonl, generate_synthetic, save_events, Post, PropagationEvent, SyntheticConfig,
    SyntheticDataset,
};
use ctlrp::model::{
    argmax, cross_entropy, split_train_validation, train, ModelConfig, TrainConfig,
};
use ctlrp::numkernel::LayerKind;
use ctlrp::textembed::{BackwardMode, PoolingKind};
use ctlrp::{BiGcn, Epsilon, Explainer, Explanation, Matrix, TokenRelevance};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_event(
    rng: &mut ChaCha8Rng,
    vocab: usize,
    max_nodes: usize,
    max_tokens: usize,
) -> PropagationEvent {
    let n = rng.gen_range(1..=max_nodes);
    let posts = (0..n)
        .map(|v| {
            let parent = (v > 0).then(|| format!("p{}", rng.gen_range(0..v)));
            let len = rng.gen_range(1..=max_tokens);
            let toks = (0..len).map(|_| rng.gen_range(2..vocab)).collect();
            Post::new(format!("p{v}"), parent.as_deref(), toks)
        })
        .collect();
    PropagationEvent::new("e", 0, posts).unwrap()
}

fn random_config(rng: &mut ChaCha8Rng, use_bias: bool, seed: u64) -> ModelConfig {
    let pooling = [PoolingKind::Mean, PoolingKind::Max, PoolingKind::Mlp][rng.gen_range(0..3)];
    ModelConfig {
        vocab_size: 20,
        num_classes: rng.gen_range(2..=5),
        embed_dim: rng.gen_range(2..=8),
        hidden_dim: rng.gen_range(2..=8),
        pooling,
        use_bias,
        seed,
    }
}

fn relative(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / b.abs().max(floor)
}

fn criterion_1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let eps = Epsilon::new(1e-9).unwrap();
    let (mut worst_logit, mut worst_token) = (0.0f64, 0.0f64);
    for i in 0..100 {
        let model = BiGcn::new(random_config(&mut rng, false, i)).unwrap();
        let event = random_event(&mut rng, 20, 10, 6);
        let explainer = Explainer::new(&model, eps, BackwardMode::Conserving);
        let pass = model.forward(&event).unwrap();
        let logits = pass.logits();
        for (c, &y) in logits.iter().enumerate() {
            let r = explainer.lrp_gnn_from(&pass, c).unwrap();
            let total_r = r.relevance.sum();
            worst_logit = worst_logit.max(relative(total_r, y, 1e-6));
            let z = explainer.token_relevance(&event, &pass, &r).unwrap();
            worst_token = worst_token.max(relative(z.total(), total_r, 1e-6));
        }
    }
    check(
        worst_logit <= 1e-4 && worst_token <= 1e-6,
        format!("max rel err sum(R) vs logit {worst_logit:.2e} (tol 1e-4), sum(z) vs sum(R) {worst_token:.2e} (tol 1e-6)"),
    )
}

/// Every discrete choice the forward pass makes: ReLU on/off bits, max-pool
/// winners and MLP-pool ReLU bits. Finite differences are only valid when
/// both probes make the same choices as the base point.
fn activation_pattern(model: &BiGcn, event: &PropagationEvent) -> Vec<usize> {
    let pass = model.forward(event).unwrap();
    let mut bits = Vec::new();
    for layer in pass.tape.layers() {
        if layer.kind() == LayerKind::Relu {
            bits.extend(layer.output().data().iter().map(|&x| usize::from(x > 0.0)));
        }
    }
    for v in 0..event.num_nodes() {
        let rows = pass.embedded.pooled_inputs(v);
        match model.pooling.kind() {
            PoolingKind::Max => {
                for d in 0..rows.cols() {
                    let winner = (0..rows.rows()).fold(0, |w, r| {
                        if rows.get(r, d) > rows.get(w, d) {
                            r
                        } else {
                            w
                        }
                    });
                    bits.push(winner);
                }
            }
            PoolingKind::Mlp => bits.extend(rows.data().iter().map(|&x| usize::from(x > 0.0))),
            PoolingKind::Mean => {}
        }
    }
    bits
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let h = 1e-4;
    let mut worst = 0.0f64;
    let (mut checked, mut straddling) = (0usize, 0usize);
    for i in 0..100 {
        let cfg = random_config(&mut rng, true, 1000 + i);
        let classes = cfg.num_classes;
        let mut model = BiGcn::new(cfg).unwrap();
        // Fresh models have zero biases, which pins dead units exactly on
        // the ReLU kink; a random instance randomises every parameter.
        for name in model.tensor_names() {
            for x in model.tensor_mut(name).unwrap().data_mut() {
                *x += rng.gen_range(-0.5..0.5);
            }
        }
        let base = random_event(&mut rng, 20, 6, 4);
        let event =
            PropagationEvent::new("g", rng.gen_range(0..classes), base.posts().to_vec()).unwrap();
        let (_, grads) = model.loss_and_grads(&event).unwrap();
        let pattern = activation_pattern(&model, &event);
        let used: Vec<usize> = event
            .posts()
            .iter()
            .flat_map(|p| p.tokens.clone())
            .collect();
        for (k, name) in model.tensor_names().into_iter().enumerate() {
            let shape = model.tensor(name).unwrap().shape();
            for _ in 0..4 {
                let row = if name == "embedding" {
                    used[rng.gen_range(0..used.len())]
                } else {
                    rng.gen_range(0..shape.0)
                };
                let col = rng.gen_range(0..shape.1);
                let idx = row * shape.1 + col;
                let probe = |delta: f64| {
                    let mut m = model.clone();
                    m.tensor_mut(name).unwrap().data_mut()[idx] += delta;
                    let logits = m.logits(&event).unwrap();
                    (
                        cross_entropy(&logits, event.label()).0,
                        activation_pattern(&m, &event),
                    )
                };
                let ((up, p_up), (down, p_down)) = (probe(h), probe(-h));
                if p_up != pattern || p_down != pattern {
                    straddling += 1;
                    continue;
                }
                let numeric = (up - down) / (2.0 * h);
                let analytic = grads.tensors[k].data()[idx];
                let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                worst = worst.max(err);
                checked += 1;
            }
        }
    }
    check(
        worst < 1e-4 && checked > 0,
        format!("{checked} coordinates, max rel err {worst:.2e} (tol 1e-4); {straddling} skipped where the step crosses a kink"),
    )
}

/// Trained models shared by the directional criteria.
struct Trained {
    dataset: SyntheticDataset,
    runs: Vec<(BiGcn, Vec<PropagationEvent>, f64)>,
}

fn train_seeds() -> Trained {
    let dataset = generate_synthetic(&SyntheticConfig::default()).unwrap();
    let runs = std::thread::scope(|s| {
        let handles: Vec<_> = (0..3u64)
            .map(|seed| {
                let events = &dataset.events;
                s.spawn(move || {
                    let (tr, va) = split_train_validation(events.len(), 0.2, seed);
                    let tr: Vec<_> = tr.iter().map(|&i| events[i].clone()).collect();
                    let va: Vec<_> = va.iter().map(|&i| events[i].clone()).collect();
                    let mut model = BiGcn::new(ModelConfig {
                        seed,
                        ..Default::default()
                    })
                    .unwrap();
                    let report = train(
                        &mut model,
                        &tr,
                        &va,
                        &TrainConfig {
                            seed,
                            ..Default::default()
                        },
                    )
                    .unwrap();
                    let acc = report.best().validation_accuracy.unwrap();
                    (model, va, acc)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    Trained { dataset, runs }
}

fn criterion_3(trained: &Trained) -> Outcome {
    let (model, held_out, _) = &trained.runs[0];
    let events: Vec<&PropagationEvent> = held_out
        .iter()
        .filter(|e| e.num_nodes() <= 10 && (0..e.num_nodes()).all(|v| e.tokens(v).len() <= 8))
        .take(50)
        .collect();
    if events.len() < 50 || model.num_classes() != 4 {
        return Err(format!("fixture has {} eligible events", events.len()));
    }
    let explainer = Explainer::new(model, Epsilon::default(), BackwardMode::Conserving);
    let (mut mismatches, mut tokens, mut contested) = (0usize, 0usize, 0usize);
    for event in events {
        let out = explainer.ct_lrp(event).unwrap();
        let pass = model.forward(event).unwrap();
        let y = pass.logits();
        let hat = argmax(&y);
        let z: Vec<TokenRelevance> = (0..4)
            .map(|c| {
                let r = explainer.lrp_gnn_from(&pass, c).unwrap();
                explainer.token_relevance(event, &pass, &r).unwrap()
            })
            .collect();
        for v in 0..event.num_nodes() {
            for t in 0..event.tokens(v).len() {
                let dropped = model
                    .forward_masked(event, |a, b| (a, b) != (v, t))
                    .unwrap()
                    .logits();
                let rivals: Vec<usize> = (0..4)
                    .filter(|&c| c != hat && z[c].scores[v][t] > 0.0)
                    .collect();
                let positive = z[hat].scores[v][t] > 0.0;
                contested += usize::from(positive && !rivals.is_empty());
                let keep = positive
                    && rivals
                        .iter()
                        .all(|&c| y[hat] - dropped[hat] > y[c] - dropped[c]);
                tokens += 1;
                mismatches += usize::from(keep != out.mask[v][t]);
            }
        }
    }
    check(
        mismatches == 0,
        format!(
            "{mismatches} mismatches over {tokens} tokens ({contested} contested) in 50 events"
        ),
    )
}

/// Two classes, scalar features, identity convolutions. Token 2 embeds to
/// +1 and alone moves the prediction to class 1; other tokens embed to 0.
fn decision_token_model() -> BiGcn {
    let mut model = BiGcn::new(ModelConfig {
        vocab_size: 6,
        num_classes: 2,
        embed_dim: 1,
        hidden_dim: 1,
        pooling: PoolingKind::Mean,
        use_bias: true,
        seed: 0,
    })
    .unwrap();
    *model.embedding.matrix_mut() = Matrix::new(6, 1, vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0]).unwrap();
    for p in ["top_down", "bottom_up"] {
        for c in ["conv1", "conv2"] {
            *model.tensor_mut(&format!("{p}.{c}.weights")).unwrap() = Matrix::identity(1);
            *model.tensor_mut(&format!("{p}.{c}.bias")).unwrap() = Matrix::zeros(1, 1);
        }
    }
    *model.tensor_mut("classifier.weights").unwrap() =
        Matrix::from_rows(&[vec![0.0, 10.0], vec![0.0, 10.0]]).unwrap();
    *model.tensor_mut("classifier.bias").unwrap() = Matrix::row_vector(vec![0.01, 0.0]).unwrap();
    model
}

fn flat_event(id: &str, nodes: &[&[usize]]) -> PropagationEvent {
    let posts = nodes
        .iter()
        .enumerate()
        .map(|(v, t)| {
            let parent = (v > 0).then(|| "p0".to_string());
            Post::new(format!("p{v}"), parent.as_deref(), t.to_vec())
        })
        .collect();
    PropagationEvent::new(id, 0, posts).unwrap()
}

fn hand_explanation(event: &PropagationEvent, scores: Vec<Vec<f64>>) -> Explanation {
    let mask = scores
        .iter()
        .map(|r| r.iter().map(|&s| s > 0.0).collect())
        .collect();
    Explanation {
        event_id: event.event_id().into(),
        method: Method::TokenLrp,
        predicted: 1,
        target: 1,
        logits: vec![0.0, 1.0],
        token_relevance: vec![TokenRelevance {
            class: 1,
            scores,
            mask: None,
        }],
        mask,
        node_scores: None,
        low_confidence: false,
        threshold: 0.01,
    }
}

fn criterion_4() -> Outcome {
    let mut failures = Vec::new();
    let mut expect = |label: &str, got: f64, want: f64| {
        if got != want {
            failures.push(format!("{label}: {got} != {want}"));
        }
    };
    let e = flat_event("s", &[&[3; 10], &[4; 10]]);
    let mut five = vec![vec![0.0; 10]; 2];
    for t in 0..5 {
        five[t % 2][t] = 0.5;
    }
    expect(
        "sparsity none",
        sparsity(&hand_explanation(&e, vec![vec![0.0; 10]; 2]), &e, 0.01),
        1.0,
    );
    expect(
        "sparsity all",
        sparsity(&hand_explanation(&e, vec![vec![1.0; 10]; 2]), &e, 0.01),
        0.0,
    );
    expect(
        "sparsity 5/20",
        sparsity(&hand_explanation(&e, five), &e, 0.01),
        0.75,
    );

    let model = decision_token_model();
    let events = vec![
        flat_event("a", &[&[2]]),
        flat_event("b", &[&[2, 3]]),
        flat_event("c", &[&[2], &[2]]),
    ];
    let hit_two = vec![
        hand_explanation(&events[0], vec![vec![1.0]]),
        hand_explanation(&events[1], vec![vec![1.0, 0.0]]),
        hand_explanation(&events[2], vec![vec![1.0], vec![0.0]]),
    ];
    expect(
        "fidelity 2/3",
        fidelity(&model, &events, &hit_two, 0.01).unwrap(),
        2.0 / 3.0,
    );
    let empty: Vec<Explanation> = events
        .iter()
        .map(|e| {
            hand_explanation(
                e,
                (0..e.num_nodes())
                    .map(|v| vec![0.0; e.tokens(v).len()])
                    .collect(),
            )
        })
        .collect();
    expect(
        "fidelity empty",
        fidelity(&model, &events, &empty, 0.01).unwrap(),
        0.0,
    );
    let decision = flat_event("d", &[&[3, 2], &[4]]);
    let attributed = hand_explanation(&decision, vec![vec![0.0, 0.9], vec![0.0]]);
    expect(
        "fidelity decision token",
        fidelity(&model, &[decision.clone()], &[attributed.clone()], 0.01).unwrap(),
        1.0,
    );
    expect(
        "level 0 equals full removal",
        fidelity_at_sparsity(&model, &[decision.clone()], &[attributed], 0.01, 0.0)
            .unwrap()
            .fidelity,
        1.0,
    );

    let config = EvalConfig {
        methods: vec![Method::TokenLrp, Method::NodeLrp, Method::GradCam],
        ..Default::default()
    };
    let report = sweep(
        &[Split {
            model: &model,
            events: &events,
        }],
        "fixture",
        &config,
        1,
    )
    .unwrap();
    let mut product_rows = 0;
    for line in report.to_csv().lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let num = |i: usize| f[i].parse::<f64>().unwrap();
        if num(5) != num(3) * num(2) {
            failures.push(format!("csv product mismatch: {line}"));
        }
        if [2, 3, 4, 5, 6]
            .iter()
            .any(|&i| !(0.0..=1.0).contains(&num(i)))
        {
            failures.push(format!("csv value out of [0,1]: {line}"));
        }
        product_rows += 1;
    }
    check(
        failures.is_empty(),
        if failures.is_empty() {
            format!("7 fixtures exact, fid_sparsity equals product on {product_rows} rows")
        } else {
            failures.join("; ")
        },
    )
}

fn directional_report(trained: &Trained) -> EvalReport {
    let splits: Vec<Split> = trained
        .runs
        .iter()
        .map(|(model, events, _)| Split { model, events })
        .collect();
    sweep(&splits, "synthetic", &EvalConfig::default(), 0).unwrap()
}

fn at_level(report: &EvalReport, method: Method, level: f64) -> f64 {
    report
        .curve(method)
        .unwrap()
        .points
        .iter()
        .find(|p| (p.level - level).abs() < 1e-12)
        .unwrap()
        .fidelity_mean
}

fn criterion_5(trained: &Trained, report: &EvalReport) -> Outcome {
    let accs: Vec<String> = trained.runs.iter().map(|r| format!("{:.2}", r.2)).collect();
    if trained.runs.iter().any(|r| r.2 <= 0.9) {
        return Err(format!(
            "validation accuracy {} not above 0.9",
            accs.join("/")
        ));
    }
    let ct = at_level(report, Method::CtLrp, 0.5);
    let tok = at_level(report, Method::TokenLrp, 0.5);
    let baselines: Vec<(Method, f64)> = [Method::NodeLrp, Method::GradCam, Method::ContrastiveEb]
        .into_iter()
        .map(|m| (m, at_level(report, m, 0.5)))
        .collect();
    let best_baseline = baselines
        .iter()
        .map(|b| b.1)
        .fold(f64::NEG_INFINITY, f64::max);
    let ranking = ct >= tok - 0.02;
    let margin = ct.min(tok) - best_baseline >= 0.1;
    let base: Vec<String> = baselines
        .iter()
        .map(|(m, f)| format!("{m} {f:.3}"))
        .collect();
    check(
        ranking && margin,
        format!(
            "val acc {}; fidelity@0.5 ct-lrp {ct:.3}, token-lrp {tok:.3}, {}; ct >= token - 0.02: {ranking}; margin >= 0.1: {margin}",
            accs.join("/"),
            base.join(", ")
        ),
    )
}

fn criterion_6(trained: &Trained) -> Outcome {
    let (mut precision, mut events) = (0.0, 0usize);
    for (model, held_out, _) in &trained.runs {
        let explainer = Explainer::new(model, Epsilon::default(), BackwardMode::Conserving);
        for event in held_out {
            let out = explainer.ct_lrp(event).unwrap();
            let mut kept = out.kept_tokens();
            kept.sort_by(|a, b| b.2.total_cmp(&a.2));
            kept.truncate(5);
            events += 1;
            if kept.is_empty() {
                continue;
            }
            let hits = kept
                .iter()
                .filter(|&&(v, t, _)| {
                    trained.dataset.registry.class_of(event.tokens(v)[t]) == Some(out.predicted)
                })
                .count();
            precision += hits as f64 / kept.len() as f64;
        }
    }
    let mean = precision / events as f64;
    check(
        mean >= 0.6,
        format!("top-5 kept precision {mean:.3} over {events} events (tol >= 0.6)"),
    )
}

fn criterion_7(report: &EvalReport) -> Outcome {
    let curve = report.curve(Method::CtLrp).unwrap();
    let f: Vec<f64> = curve.points.iter().map(|p| p.fidelity_mean).collect();
    let worst_rise = f
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::NEG_INFINITY, f64::max);
    let start = at_level(report, Method::CtLrp, 0.0);
    let mid = at_level(report, Method::CtLrp, 0.5);
    let shown: Vec<String> = f.iter().map(|x| format!("{x:.2}")).collect();
    check(
        worst_rise <= 0.05 && mid >= 0.5 * start,
        format!(
            "curve [{}], max rise {worst_rise:.3} (tol 0.05), f(0.5)/f(0.0) = {:.3} (tol 0.5)",
            shown.join(" "),
            mid / start
        ),
    )
}

fn criterion_8() -> Outcome {
    let mut failures = Vec::new();
    let cfg = SyntheticConfig {
        num_events: 60,
        ..Default::default()
    };
    let a = generate_synthetic(&cfg).unwrap();
    let b = generate_synthetic(&cfg).unwrap();
    if events_to_jsonl(&a.events) != events_to_jsonl(&b.events)
        || a.vocabulary.to_json() != b.vocabulary.to_json()
    {
        failures.push("dataset not reproducible".to_string());
    }
    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
    save_events(&p1, &a.events).unwrap();
    save_events(&p2, &b.events).unwrap();
    if std::fs::read(&p1).unwrap() != std::fs::read(&p2).unwrap() {
        failures.push("dataset files differ".into());
    }

    let model_cfg = ModelConfig {
        embed_dim: 8,
        hidden_dim: 8,
        seed: 3,
        ..Default::default()
    };
    let train_cfg = TrainConfig {
        epochs: 3,
        seed: 3,
        ..Default::default()
    };
    let mut checkpoints = Vec::new();
    for name in ["m1.json", "m2.json"] {
        let mut model = BiGcn::new(model_cfg.clone()).unwrap();
        train(&mut model, &a.events[..48], &a.events[48..], &train_cfg).unwrap();
        let path = dir.path().join(name);
        model.save(&path, &BTreeMap::new()).unwrap();
        checkpoints.push((model, std::fs::read(&path).unwrap(), path));
    }
    if checkpoints[0].1 != checkpoints[1].1 {
        failures.push("checkpoint files differ".into());
    }
    let (model, _, path) = &checkpoints[0];
    let (loaded, _) = BiGcn::load(path).unwrap();
    let mut exact = 0;
    for e in a.events.iter().take(20) {
        let x = model.logits(e).unwrap();
        let y = loaded.logits(e).unwrap();
        exact += usize::from(x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
    if exact != 20 {
        failures.push(format!("only {exact}/20 events bit-exact after reload"));
    }
    let render = |m: &BiGcn| -> Vec<String> {
        let ex = Explainer::new(m, Epsilon::default(), BackwardMode::Conserving);
        a.events
            .iter()
            .take(5)
            .flat_map(|e| Method::ALL.map(|method| (e, method)))
            .map(|(e, method)| {
                let out = ex.explain(e, method, None).unwrap();
                ExplanationRecord::new(&out, e, Some(&a.vocabulary))
                    .to_json()
                    .unwrap()
            })
            .collect()
    };
    if render(model) != render(&loaded) || render(model) != render(&checkpoints[1].0) {
        failures.push("explanation JSON not byte-stable".into());
    }
    check(
        failures.is_empty(),
        if failures.is_empty() {
            "dataset, checkpoint and explanation bytes stable; 20/20 events bit-exact after reload"
                .into()
        } else {
            failures.join("; ")
        },
    )
}

fn run(number: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let secs = start.elapsed().as_secs_f64();
    let (tag, detail, ok) = match outcome {
        Ok(d) => ("PASS", d, true),
        Err(d) => ("FAIL", d, false),
    };
    println!("criterion {number} {tag} [{name}] {detail} ({secs:.1}s)");
    ok
}

fn main() {
    panic::set_hook(Box::new(|_| {}));
    let mut ok = true;
    ok &= run(1, "conservation", criterion_1);
    ok &= run(2, "gradients", criterion_2);

    let start = Instant::now();
    let trained = train_seeds();
    let report = directional_report(&trained);
    println!(
        "trained 3 seeds and swept all methods in {:.1}s",
        start.elapsed().as_secs_f64()
    );

    ok &= run(3, "ct-lrp oracle", || criterion_3(&trained));
    ok &= run(4, "metric fixtures", criterion_4);
    ok &= run(5, "directional ranking", || criterion_5(&trained, &report));
    ok &= run(6, "planted-token recovery", || criterion_6(&trained));
    ok &= run(7, "sweep shape", || criterion_7(&report));
    ok &= run(8, "determinism and round-trips", criterion_8);
    if !ok {
        std::process::exit(1);
    }
}
