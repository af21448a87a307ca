use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use ctlrp::evalharness::{sweep, with_jobs, EvalReport, Split};
use ctlrp::explain::{render_html, ExplanationRecord, Method};
use ctlrp::graphdata::{generate_synthetic, load_events, PropagationEvent, Vocabulary};
use ctlrp::model::{kfold_splits, split_train_validation, train as fit, ModelConfig, TrainConfig};
use ctlrp::{write_atomic, BiGcn, Epsilon, Error, Explainer, Result};
use rayon::prelude::*;

use crate::config::RunConfig;
use crate::{Common, EvalArgs, ExplainArgs, GenDataArgs, TrainArgs};

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(common.config.as_deref())?;
    if let Some(out) = &common.out {
        cfg.out = Some(out.clone());
    }
    if let Some(jobs) = common.jobs {
        cfg.jobs = Some(jobs);
    }
    Ok(cfg)
}

fn set<T>(slot: &mut T, flag: Option<T>) {
    if let Some(v) = flag {
        *slot = v;
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn gen_data(args: GenDataArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    let d = &mut cfg.data;
    set(&mut d.num_events, args.events);
    set(&mut d.num_classes, args.classes);
    set(&mut d.vocab_size, args.vocab_size);
    set(&mut d.planted_tokens_per_class, args.planted_per_class);
    set(&mut d.noise_rate, args.noise);
    set(&mut d.seed, args.common.seed);

    let dataset = generate_synthetic(&cfg.data)?;
    let out = cfg.out_dir();
    ctlrp::graphdata::save_events(&out.join("dataset.jsonl"), &dataset.events)?;
    dataset.vocabulary.save(&out.join("vocab.json"))?;
    dataset.registry.save(&out.join("planted.json"))?;

    let posts: usize = dataset.events.iter().map(PropagationEvent::num_nodes).sum();
    let tokens: usize = dataset
        .events
        .iter()
        .map(PropagationEvent::total_tokens)
        .sum();
    let mut per_class = vec![0usize; cfg.data.num_classes];
    for e in &dataset.events {
        per_class[e.label()] += 1;
    }
    println!(
        "wrote {} events ({} posts, {} tokens) to {}",
        dataset.events.len(),
        posts,
        tokens,
        out.display()
    );
    println!(
        "events per class: {per_class:?}; vocabulary {} entries",
        dataset.vocabulary.len()
    );
    Ok(())
}

/// Errors if the events use labels or tokens the model cannot handle.
fn check_compatible(events: &[PropagationEvent], model: &ModelConfig, source: &str) -> Result<()> {
    for e in events {
        if e.label() >= model.num_classes {
            return Err(Error::Config(format!(
                "event {} has label {} but {source} has {} classes",
                e.event_id(),
                e.label(),
                model.num_classes
            )));
        }
        if let Some(&t) = e
            .posts()
            .iter()
            .flat_map(|p| &p.tokens)
            .find(|&&t| t >= model.vocab_size)
        {
            return Err(Error::Config(format!(
                "event {} uses token {t} but {source} has a vocabulary of {}",
                e.event_id(),
                model.vocab_size
            )));
        }
    }
    Ok(())
}

fn check_vocab(vocab: Option<&Vocabulary>, model: &ModelConfig, source: &str) -> Result<()> {
    match vocab {
        Some(v) if v.len() != model.vocab_size => Err(Error::Config(format!(
            "vocabulary file has {} entries but {source} expects {}",
            v.len(),
            model.vocab_size
        ))),
        _ => Ok(()),
    }
}

fn load_vocab(path: Option<&Path>) -> Result<Option<Vocabulary>> {
    path.map(Vocabulary::load).transpose()
}

fn train_model(
    events: &[PropagationEvent],
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
) -> Result<(BiGcn, ctlrp::model::TrainReport)> {
    let (tr, va) =
        split_train_validation(events.len(), train_cfg.validation_fraction, train_cfg.seed);
    let training: Vec<PropagationEvent> = tr.iter().map(|&i| events[i].clone()).collect();
    let validation: Vec<PropagationEvent> = va.iter().map(|&i| events[i].clone()).collect();
    let mut model = BiGcn::new(model_cfg.clone())?;
    let report = fit(&mut model, &training, &validation, train_cfg)?;
    Ok((model, report))
}

pub fn train(args: TrainArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    let vocab = load_vocab(args.vocab.as_deref())?;
    let m = &mut cfg.model;
    set(&mut m.num_classes, args.classes);
    set(&mut m.embed_dim, args.embed_dim);
    set(&mut m.hidden_dim, args.hidden_dim);
    set(
        &mut m.pooling,
        args.pooling.as_deref().map(str::parse).transpose()?,
    );
    set(&mut m.vocab_size, vocab.as_ref().map(Vocabulary::len));
    set(&mut m.seed, args.common.seed);
    let t = &mut cfg.train;
    set(&mut t.epochs, args.epochs);
    set(&mut t.learning_rate, args.lr);
    set(&mut t.patience, args.patience);
    set(&mut t.batch_size, args.batch_size);
    set(&mut t.validation_fraction, args.validation_fraction);
    set(&mut t.seed, args.common.seed);
    cfg.model.validate()?;
    cfg.train.validate()?;

    let events = load_events(&args.data, Some(cfg.model.num_classes))?;
    check_compatible(&events, &cfg.model, "the model configuration")?;
    let (model, report) = train_model(&events, &cfg.model, &cfg.train)?;

    let best = report.best();
    let mut meta = BTreeMap::new();
    meta.insert("train_seed".to_string(), cfg.train.seed.to_string());
    meta.insert("best_epoch".to_string(), report.best_epoch.to_string());
    meta.insert("epochs_run".to_string(), report.epochs.len().to_string());
    if let Some(acc) = best.validation_accuracy {
        meta.insert("validation_accuracy".to_string(), acc.to_string());
    }
    let out = cfg.out_dir();
    model.save(&out.join("model.json"), &meta)?;
    write_json(&out.join("train_log.json"), &report)?;
    println!(
        "trained {} epochs on {} events (best epoch {}, train accuracy {:.3}, validation accuracy {}{})",
        report.epochs.len(),
        events.len(),
        report.best_epoch,
        best.train_accuracy,
        best.validation_accuracy.map_or("n/a".to_string(), |a| format!("{a:.3}")),
        if report.stopped_early { ", stopped early" } else { "" }
    );
    println!(
        "wrote {} and {}",
        out.join("model.json").display(),
        out.join("train_log.json").display()
    );
    Ok(())
}

fn file_stem_safe(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub fn explain(args: ExplainArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    let s = &mut cfg.explain;
    set(
        &mut s.method,
        args.method
            .as_deref()
            .map(str::parse::<Method>)
            .transpose()?,
    );
    set(&mut s.epsilon, args.epsilon);
    set(
        &mut s.backward_mode,
        args.mode.as_deref().map(str::parse).transpose()?,
    );
    set(&mut s.threshold, args.threshold);
    s.html |= args.html;
    let settings = cfg.explain.clone();
    if settings.method == Method::CtLrp && args.class.is_some() {
        return Err(Error::Config(
            "ct-lrp always explains the predicted class; drop --class".into(),
        ));
    }

    let (model, _) = BiGcn::load(&args.checkpoint)?;
    let source = format!("checkpoint {}", args.checkpoint.display());
    let vocab = load_vocab(args.vocab.as_deref())?;
    check_vocab(vocab.as_ref(), model.config(), &source)?;
    if let Some(c) = args.class.filter(|&c| c >= model.num_classes()) {
        return Err(Error::Config(format!(
            "class {c} out of range for {} classes",
            model.num_classes()
        )));
    }
    let all = load_events(&args.data, None)?;
    check_compatible(&all, model.config(), &source)?;
    let events: Vec<PropagationEvent> = if args.events.is_empty() {
        all
    } else {
        let known: HashSet<&str> = all.iter().map(PropagationEvent::event_id).collect();
        if let Some(missing) = args.events.iter().find(|id| !known.contains(id.as_str())) {
            return Err(Error::Input(format!(
                "event {missing:?} not found in {}",
                args.data.display()
            )));
        }
        let wanted: HashSet<&str> = args.events.iter().map(String::as_str).collect();
        all.into_iter()
            .filter(|e| wanted.contains(e.event_id()))
            .collect()
    };

    let explainer = Explainer::new(
        &model,
        Epsilon::new(settings.epsilon)?,
        settings.backward_mode,
    )
    .with_threshold(settings.threshold)?;
    let explanations = with_jobs(cfg.jobs(), || {
        events
            .par_iter()
            .map(|e| explainer.explain(e, settings.method, args.class))
            .collect::<Result<Vec<_>>>()
    })??;

    let out = cfg.out_dir();
    let mut lines = String::new();
    let mut low_confidence = 0;
    for (i, (event, ex)) in events.iter().zip(&explanations).enumerate() {
        let record = ExplanationRecord::new(ex, event, vocab.as_ref());
        lines.push_str(&serde_json::to_string(&record)?);
        lines.push('\n');
        low_confidence += usize::from(record.low_confidence);
        if settings.html {
            let name = format!("{i:04}-{}.html", file_stem_safe(event.event_id()));
            write_atomic(
                &out.join("html").join(name),
                render_html(&record, event, vocab.as_ref()).as_bytes(),
            )?;
        }
    }
    write_atomic(&out.join("explanations.jsonl"), lines.as_bytes())?;
    println!(
        "explained {} events with {}; wrote {}",
        events.len(),
        settings.method,
        out.join("explanations.jsonl").display()
    );
    if low_confidence > 0 {
        println!("{low_confidence} events have constant logits (low confidence)");
    }
    Ok(())
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<T>()
                .map_err(|e| Error::Config(format!("bad {what} {s:?}: {e}")))
        })
        .collect()
}

pub fn eval(args: EvalArgs) -> Result<()> {
    let mut cfg = load_config(&args.common)?;
    let e = &mut cfg.eval;
    if let Some(m) = &args.methods {
        e.methods = parse_list(m, "method")?;
    }
    if let Some(l) = &args.levels {
        e.sparsity_levels = parse_list(l, "sparsity level")?;
    }
    set(&mut e.threshold, args.threshold);
    set(&mut e.folds, args.folds);
    set(&mut e.epsilon, args.epsilon);
    set(
        &mut e.backward_mode,
        args.mode.as_deref().map(str::parse).transpose()?,
    );
    set(&mut e.seed, args.common.seed);
    set(&mut cfg.train.epochs, args.epochs);
    set(&mut cfg.train.seed, args.common.seed);
    set(&mut cfg.model.seed, args.common.seed);
    cfg.eval.validate()?;

    let dataset = args.dataset_name.clone().unwrap_or_else(|| {
        args.data.file_stem().map_or_else(
            || "dataset".to_string(),
            |s| s.to_string_lossy().into_owned(),
        )
    });
    let vocab = load_vocab(args.vocab.as_deref())?;
    let events = load_events(&args.data, None)?;
    if events.is_empty() {
        return Err(Error::Input(format!(
            "{} holds no events",
            args.data.display()
        )));
    }

    let report: EvalReport = if args.checkpoints.is_empty() {
        let mut model_cfg = cfg.model.clone();
        set(
            &mut model_cfg.vocab_size,
            vocab.as_ref().map(Vocabulary::len),
        );
        check_compatible(&events, &model_cfg, "the model configuration")?;
        let pick = |idx: &[usize]| idx.iter().map(|&i| events[i].clone()).collect::<Vec<_>>();
        let folds: Vec<_> = kfold_splits(events.len(), cfg.eval.folds, cfg.eval.seed)?
            .iter()
            .map(|(tr, te)| (pick(tr), pick(te)))
            .collect();
        let mut trained = Vec::new();
        for (k, (training, test)) in folds.iter().enumerate() {
            let model_cfg = ModelConfig {
                seed: model_cfg.seed + k as u64,
                ..model_cfg.clone()
            };
            let train_cfg = TrainConfig {
                seed: cfg.train.seed + k as u64,
                ..cfg.train.clone()
            };
            let (model, rep) = train_model(training, &model_cfg, &train_cfg)?;
            println!(
                "fold {k}: trained {} epochs, validation accuracy {}",
                rep.epochs.len(),
                rep.best()
                    .validation_accuracy
                    .map_or("n/a".into(), |a| format!("{a:.3}"))
            );
            trained.push((model, test));
        }
        let splits: Vec<Split> = trained
            .iter()
            .map(|(m, t)| Split {
                model: m,
                events: t,
            })
            .collect();
        sweep(&splits, &dataset, &cfg.eval, cfg.jobs())?
    } else {
        let mut models = Vec::new();
        for path in &args.checkpoints {
            let (model, _) = BiGcn::load(path)?;
            let source = format!("checkpoint {}", path.display());
            check_vocab(vocab.as_ref(), model.config(), &source)?;
            check_compatible(&events, model.config(), &source)?;
            models.push(model);
        }
        let splits: Vec<Split> = models
            .iter()
            .map(|m| Split {
                model: m,
                events: &events,
            })
            .collect();
        sweep(&splits, &dataset, &cfg.eval, cfg.jobs())?
    };

    let out = cfg.out_dir();
    write_atomic(&out.join("report.csv"), report.to_csv().as_bytes())?;
    write_json(&out.join("report.json"), &report)?;
    write_json(&out.join("runtime.json"), &report.runtime)?;
    println!(
        "{:<10} {:>9} {:>9} {:>9}",
        "method", "fidelity", "sparsity", "product"
    );
    for c in &report.curves {
        let u = &c.unconstrained;
        println!(
            "{:<10} {:>9.3} {:>9.3} {:>9.3}",
            c.method.name(),
            u.fidelity_mean,
            u.sparsity,
            u.fid_sparsity
        );
    }
    println!("wrote {}", out.join("report.csv").display());
    Ok(())
}
