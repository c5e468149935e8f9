use std::time::Instant;

use paia_core::adapters::{save_delta, TargetFilter};
use paia_core::audit::{AuditConfig, AuditSession, AuditVerdict, BaseErrorCache, PromptStrategy};
use paia_core::benchmark::BenchmarkSpec;
use paia_core::dataset::{select, Corpus, LabeledImage, Split};
use paia_core::diffusion::{Arch, Checkpoint, Denoiser, NoiseSchedule};
use paia_core::rng::derive;
use paia_core::training::{finetune as run_finetune, train_base as run_train_base, Attack};
use paia_core::Error;
use serde::Serialize;
use serde_json::json;

use crate::config::{resolve_train, TrainOverrides};
use crate::manifest::{BenchmarkEcho, ExperimentManifest, Report};
use crate::util::{ensure_fresh, load_base, load_corpus, load_model, sidecar, write, Ctx, Failure};
use crate::{AttackArg, AuditArgs, FinetuneArgs, GenDataArgs, TrainBaseArgs, TrainFlags};

pub fn gen_data(ctx: &Ctx, a: GenDataArgs) -> Result<(), Failure> {
    let out = ctx.path(a.out.as_deref(), "corpus");
    ensure_fresh(&out, a.force)?;
    let corpus = Corpus::generate(a.concepts, a.per_concept, a.seed)?;
    corpus.write(&out)?;
    let mut m = ExperimentManifest::new("gen-data", a.seed);
    m.output("corpus", &out);
    m.benchmark = Some(BenchmarkEcho {
        concepts: a.concepts,
        per_concept: a.per_concept,
        attacks: Vec::new(),
        concept_counts: Vec::new(),
    });
    m.config = json!({ "concepts": a.concepts, "per_concept": a.per_concept, "seed": a.seed });
    let summary = json!({
        "images": corpus.images.len(),
        "train": corpus.images.iter().filter(|i| i.split == Split::Train).count(),
        "test": corpus.images.iter().filter(|i| i.split == Split::Test).count(),
    });
    write(&out.join("manifest.json"), Report::new(&m, summary).to_json())?;
    println!(
        "wrote {} images of {} concepts to {}",
        corpus.images.len(),
        a.concepts,
        out.display()
    );
    Ok(())
}

fn overrides(t: &TrainFlags) -> TrainOverrides {
    TrainOverrides {
        epochs: t.epochs,
        lr: t.lr,
        batch: t.batch,
        seed: t.seed,
        optimizer: t.optimizer.map(Into::into),
        uncond_prob: t.uncond_prob,
    }
}

pub fn train_base(ctx: &Ctx, a: TrainBaseArgs) -> Result<(), Failure> {
    let corpus_path = ctx.path(a.corpus.as_deref(), "corpus");
    let out = ctx.path(a.out.as_deref(), "base.ckpt");
    let mut sources = crate::config::Sources::default();
    let cfg = resolve_train(
        "train",
        BenchmarkSpec::default().base_train,
        ctx.file.train.as_ref(),
        &ctx.file.train_keys,
        &overrides(&a.train),
        &mut sources,
    );
    let mut m = ExperimentManifest::new("train-base", cfg.seed);
    m.input("corpus", &corpus_path).output("base", &out).seed("train", cfg.seed);
    m.resolve()?;
    ensure_fresh(&out, a.force)?;
    let corpus = load_corpus(&corpus_path)?;
    let concepts = a
        .concepts
        .clone()
        .unwrap_or_else(|| corpus.specs.iter().map(|s| s.concept_id).collect());
    let data = select(&corpus.images, &concepts, Some(Split::Train));
    if data.is_empty() {
        return Err(Error::Integrity(format!("no training images for concepts {concepts:?}")).into());
    }
    let sched = NoiseSchedule::new(a.schedule, a.steps)?;
    let d = Arch::default();
    let arch = Arch {
        width: a.width.unwrap_or(d.width),
        blocks: a.blocks.unwrap_or(d.blocks),
        attn_dim: a.attn_dim.unwrap_or(d.attn_dim),
        ..d
    };
    let mut model = Denoiser::new(arch, derive(cfg.seed, &[0xBA5E, 0]))?;
    m.config = json!({ "train": cfg, "concepts": concepts, "steps": a.steps, "schedule": a.schedule, "arch": model.arch });
    m.sources = sources.0;
    let report = run_train_base(&mut model, &data, &sched, &cfg)?;
    Checkpoint {
        model,
        schedule: sched,
    }
    .save(&out)?;
    write(&sidecar(&out, "report.json"), Report::new(&m, &report).to_json())?;
    write(&sidecar(&out, "report.csv"), report.to_csv())?;
    println!(
        "trained base on {} images: final loss {:.4} in {:.1}s -> {}",
        data.len(),
        report.final_loss,
        report.wall_secs,
        out.display()
    );
    Ok(())
}

pub fn attack_of(a: AttackArg, lambda: f64, concepts: usize) -> Attack {
    match a {
        AttackArg::None => Attack::None,
        AttackArg::PromptDeviation => Attack::PromptDeviation { concepts },
        AttackArg::Regularization => Attack::Regularization { lambda },
        AttackArg::EarlyFreezing => Attack::EarlyFreezing,
        AttackArg::LateFreezing => Attack::LateFreezing,
    }
}

pub fn finetune(ctx: &Ctx, a: FinetuneArgs) -> Result<(), Failure> {
    if a.concept.is_empty() {
        return Err(Failure::usage("--concept is required"));
    }
    let base_path = ctx.path(a.base.as_deref(), "base.ckpt");
    let corpus_path = ctx.path(a.corpus.as_deref(), "corpus");
    let tag: Vec<String> = a.concept.iter().map(|c| c.to_string()).collect();
    let attack_name = attack_of(a.attack, a.lambda, 0).name();
    let out = ctx.path(
        a.out.as_deref(),
        &format!("deltas/concept_{}_{attack_name}.lora", tag.join("-")),
    );
    let mut sources = crate::config::Sources::default();
    let mut cfg = resolve_train(
        "finetune",
        BenchmarkSpec::default().finetune,
        ctx.file.finetune.as_ref(),
        &ctx.file.finetune_keys,
        &overrides(&a.train),
        &mut sources,
    );
    let mut m = ExperimentManifest::new("finetune", cfg.seed);
    m.input("base", &base_path)
        .input("corpus", &corpus_path)
        .output("model", &out)
        .seed("finetune", cfg.seed);
    m.resolve()?;
    ensure_fresh(&out, a.force)?;
    let ck = load_base(&base_path)?;
    let corpus = load_corpus(&corpus_path)?;
    for c in &a.concept {
        corpus.spec(*c)?;
    }
    cfg.attack = attack_of(a.attack, a.lambda, corpus.specs.len());
    cfg.validate(ck.schedule.steps())?;
    let data = select(&corpus.images, &a.concept, Some(Split::Train));
    m.config = json!({ "finetune": cfg, "concepts": a.concept, "rank": a.rank });
    m.sources = sources.0;
    let (delta, report) = run_finetune(&ck.model, &data, &ck.schedule, a.rank, TargetFilter::Attention, &cfg)?;
    save_delta(&delta, &out)?;
    write(&sidecar(&out, "report.json"), Report::new(&m, &report).to_json())?;
    write(&sidecar(&out, "report.csv"), report.to_csv())?;
    println!(
        "fine-tuned rank-{} delta on concepts {:?} ({}): final loss {:.4} in {:.1}s -> {}",
        a.rank,
        a.concept,
        cfg.attack.name(),
        report.final_loss,
        report.wall_secs,
        out.display()
    );
    Ok(())
}

/// Images of `concepts` interleaved by concept so any prefix spans them all.
pub fn interleaved<'a>(images: &'a [LabeledImage], concepts: &[usize]) -> Vec<&'a LabeledImage> {
    let per: Vec<Vec<&LabeledImage>> = concepts.iter().map(|c| select(images, &[*c], None)).collect();
    let longest = per.iter().map(Vec::len).max().unwrap_or(0);
    (0..longest)
        .flat_map(|i| per.iter().filter_map(move |v| v.get(i).copied()))
        .collect()
}

#[derive(Serialize)]
struct AuditResult<'a> {
    config: &'a AuditConfig,
    base_checksum: u64,
    model_checksum: u64,
    irrelevant_images: usize,
    irrelevant_extractions: usize,
    base_cache_hits: usize,
    base_cache_misses: usize,
    wall_secs: f64,
    verdicts: &'a [AuditVerdict],
}

pub fn resolve_audit_config(
    ctx: &Ctx,
    a: &AuditArgs,
    steps: usize,
    sources: &mut crate::config::Sources,
) -> Result<AuditConfig, Failure> {
    let d = AuditConfig::for_steps(steps);
    let f = &ctx.file.audit;
    let file_strategy = f
        .strategy
        .as_deref()
        .map(str::parse::<PromptStrategy>)
        .transpose()?;
    let cfg = AuditConfig {
        strategy: sources.pick("audit.strategy", a.strategy, file_strategy, d.strategy),
        t_grid: sources.pick("audit.t_grid", a.t_grid.clone(), f.t_grid.clone(), d.t_grid.clone()),
        gamma: sources.pick("audit.gamma", a.gamma, f.gamma, d.gamma),
        eps_draws: sources.pick("audit.eps_draws", a.eps_draws, f.eps_draws, d.eps_draws),
        irrelevant_budget: sources.pick(
            "audit.irrelevant_budget",
            a.irrelevant_budget,
            f.irrelevant_budget,
            d.irrelevant_budget,
        ),
        normalize: sources.pick("audit.normalize", a.raw.then_some(false), f.normalize, d.normalize),
        seed: sources.pick("audit.seed", a.seed, f.seed, d.seed),
        ..d
    };
    cfg.validate(steps)?;
    Ok(cfg)
}

pub fn audit(ctx: &Ctx, a: AuditArgs) -> Result<(), Failure> {
    if a.concept.is_empty() {
        return Err(Failure::usage("--concept is required"));
    }
    let base_path = ctx.path(a.base.as_deref(), "base.ckpt");
    let stem = a
        .model
        .file_stem()
        .map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned());
    let out = ctx.path(a.out.as_deref(), &format!("reports/audit_{stem}"));
    let mut m = ExperimentManifest::new("audit", 0);
    m.input("base", &base_path)
        .input("model", &a.model)
        .input("target_images", &a.target_images)
        .input("irrelevant_images", &a.irrelevant_images)
        .output("report", &out);
    m.resolve()?;
    ensure_fresh(&out, a.force)?;

    let ck = load_base(&base_path)?;
    let delta = load_model(&a.model)?;
    let targets_corpus = load_corpus(&a.target_images)?;
    let irr_corpus = if a.irrelevant_images == a.target_images {
        targets_corpus.clone()
    } else {
        load_corpus(&a.irrelevant_images)?
    };
    let mut sources = crate::config::Sources::default();
    let cfg = resolve_audit_config(ctx, &a, ck.schedule.steps(), &mut sources)?;
    m.seed("audit", cfg.seed);
    m.seeds.insert("global".into(), cfg.seed);

    let irr_concepts: Vec<usize> = a
        .irrelevant_concepts
        .clone()
        .unwrap_or_else(|| irr_corpus.specs.iter().map(|s| s.concept_id).collect())
        .into_iter()
        .filter(|c| a.irrelevant_concepts.is_some() || !a.concept.contains(c))
        .collect();
    let pool = interleaved(&irr_corpus.images, &irr_concepts);
    if pool.is_empty() {
        return Err(Error::Integrity("the irrelevant pool is empty".into()).into());
    }
    m.config = json!({
        "audit": cfg,
        "concepts": a.concept,
        "irrelevant_concepts": irr_concepts,
        "targets_per_concept": a.targets_per_concept,
        "reuse_cache": a.reuse_cache,
    });
    m.sources = sources.0;

    let started = Instant::now();
    let mut verdicts = Vec::new();
    let mut cache = BaseErrorCache::new();
    let mut session = AuditSession::new(&ck.model, &delta, &ck.schedule, cfg.clone())?;
    let mut extractions = 0;
    for &c in &a.concept {
        let targets: Vec<&LabeledImage> = select(&targets_corpus.images, &[c], Some(Split::Test))
            .into_iter()
            .take(a.targets_per_concept)
            .collect();
        if targets.is_empty() {
            return Err(Error::Integrity(format!(
                "concept {c} has no held-out images in {}",
                a.target_images.display()
            ))
            .into());
        }
        if !a.reuse_cache {
            session = AuditSession::new(&ck.model, &delta, &ck.schedule, cfg.clone())?;
            cache = BaseErrorCache::new();
        }
        let v = session.audit(c, &pool, &targets, &mut cache)?;
        if !v.timings.calibration_reused {
            extractions += 1;
            eprintln!(
                "irrelevant feature extraction: {} images in {:.2}s (fit {:.3}s)",
                cfg.irrelevant_budget.min(pool.len()),
                v.timings.irrelevant_feature_secs,
                v.timings.fit_secs
            );
        }
        println!(
            "concept {c}: {} ({}/{} target images flagged)",
            serde_json::to_value(v.decision).expect("serializes").as_str().unwrap_or("?"),
            v.votes_for,
            v.votes_total
        );
        write(&out.join(format!("audit_c{c}.csv")), v.to_csv(&cfg.t_grid))?;
        verdicts.push(v);
    }
    let result = AuditResult {
        config: &cfg,
        base_checksum: ck.model.checksum(),
        model_checksum: delta.checksum(),
        irrelevant_images: cfg.irrelevant_budget.min(pool.len()),
        irrelevant_extractions: extractions,
        base_cache_hits: cache.hits,
        base_cache_misses: cache.misses,
        wall_secs: started.elapsed().as_secs_f64(),
        verdicts: &verdicts,
    };
    write(&out.join("audit.json"), Report::new(&m, result).to_json())?;
    println!("report -> {}", out.display());
    Ok(())
}
