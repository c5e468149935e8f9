//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs the full desk benchmark (3 seeds, attacks included), so expect tens
//! of minutes on one core. Set `PAIA_ACCEPTANCE_CACHE=<dir>` to keep trained
//! artifacts and error tables between runs.
//!
//! Failed criteria are reported but do not fail the test run unless
//! `PAIA_ACCEPTANCE_STRICT=1` is set.

use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use paia_core::adapters::{effective_params, init_delta, load_delta, save_delta, ApplyMode, TargetFilter};
use paia_core::analysis::{
    budget_sweep, caption_pairs, ce_curves, default_grid, fixed_threshold_accuracy, gamma_sweep, lemma1_gradient,
    lipschitz_probe, sensitivity_curve, MatrixNorm, BUDGETS,
};
use paia_core::audit::{
    audit_concept, even_grid, AuditConfig, AuditSession, BaseErrorCache, Decision, PromptStrategy,
};
use paia_core::benchmark::{agreement, evaluate, Benchmark, BenchmarkSpec, BenchModel, CaseTables, Variant};
use paia_core::dataset::{select, Corpus, Split};
use paia_core::diffusion::{
    cross_attention, encode_prompt, sample_guided, Arch, Checkpoint, Denoiser, LatentImage, NoiseSchedule,
    PromptEmbedding, ScheduleKind,
};
use paia_core::numerics::{finite_diff_grad, GradCheckReport, Matrix, FD_STEP};
use paia_core::outlier::{auc, average_path_length, ForestParams, IsolationForest};
use paia_core::rng::{normal_matrix, seeded, SeededRng};
use paia_core::training::{base_sample_gradient, lora_sample_gradient, Attack, TrainReport};
use paia_core::vocab;
use rand::Rng;
use rand_distr::StandardNormal;

const SEEDS: [u64; 3] = [0, 1, 2];
const POOL: usize = 128;

struct Line {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

impl Line {
    fn print(&self) {
        let tag = if self.pass { "PASS" } else { "FAIL" };
        println!("criterion {:>2} [{tag}] {}: {}", self.id, self.name, self.detail);
    }
}

fn cache_dir() -> Option<PathBuf> {
    std::env::var_os("PAIA_ACCEPTANCE_CACHE").map(|d| {
        let p = PathBuf::from(d);
        std::fs::create_dir_all(&p).expect("cache dir");
        p
    })
}

fn cached_json<T: serde::Serialize + serde::de::DeserializeOwned>(name: &str, make: impl FnOnce() -> T) -> T {
    let Some(dir) = cache_dir() else { return make() };
    let path = dir.join(name);
    if let Ok(text) = std::fs::read_to_string(&path) {
        if let Ok(v) = serde_json::from_str(&text) {
            return v;
        }
    }
    let v = make();
    std::fs::write(&path, serde_json::to_string(&v).unwrap()).unwrap();
    v
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// ---------------------------------------------------------------- 1

fn identity() -> Line {
    let started = Instant::now();
    let arch = Arch {
        width: 32,
        attn_dim: 16,
        embed_dim: 16,
        ff_hidden: 32,
        ..Arch::default()
    };
    let corpus = Corpus::generate(6, 8, 3).unwrap();
    let sched = NoiseSchedule::new(ScheduleKind::Cosine, 100).unwrap();
    let (mut zero_values, mut total_values, mut cannot) = (0usize, 0usize, 0usize);
    for s in 0..20u64 {
        let base = Denoiser::new(arch, 100 + s).unwrap();
        let delta = init_delta(&base, 4, TargetFilter::Attention, s).unwrap();
        let irr = select(&corpus.images, &[1, 2, 3, 4, 5], None);
        let targets = select(&corpus.images, &[0], Some(Split::Test));
        let cfg = AuditConfig {
            irrelevant_budget: 40,
            eps_draws: 2,
            seed: s,
            ..AuditConfig::for_steps(100)
        };
        let mut session = AuditSession::new(&base, &delta, &sched, cfg).unwrap();
        let mut cache = BaseErrorCache::new();
        let table = session
            .error_table(&irr, paia_core::audit::Branches::Both, &mut cache)
            .unwrap();
        for r in &table {
            for v in r.ce(true).unwrap().into_iter().chain(r.cce(50, true).unwrap()) {
                total_values += 1;
                zero_values += (v == 0.0) as usize;
            }
        }
        let verdict = session.audit(0, &irr, &targets, &mut cache).unwrap();
        for f in &verdict.features {
            total_values += f.len();
            zero_values += f.iter().filter(|v| **v == 0.0).count();
        }
        cannot += (verdict.decision == Decision::CannotGenerate) as usize;
    }
    let secs = started.elapsed().as_secs_f64();
    Line {
        id: 1,
        name: "identity suite",
        pass: zero_values == total_values && cannot == 20 && secs < 60.0,
        detail: format!("{zero_values}/{total_values} CE/CCE values exactly 0, {cannot}/20 cannot_generate, {secs:.1}s"),
    }
}

// ---------------------------------------------------------------- 2

fn gradients() -> Line {
    let started = Instant::now();
    let mut worst = 0.0f64;
    let mut instances = 0;
    let mut rng = seeded(2024);
    // chain-rule attention gradient against the true cross-attention output
    for _ in 0..50 {
        let (pix, n, dim, d, dv) = (
            rng.random_range(1..5),
            rng.random_range(1..5),
            rng.random_range(1..6),
            rng.random_range(1..5),
            rng.random_range(1..4),
        );
        let x = normal_matrix(pix, 3, 1.0, &mut rng);
        let p = normal_matrix(n, dim, 1.0, &mut rng);
        let wq = normal_matrix(3, d, 1.0, &mut rng);
        let wk = normal_matrix(dim, d, 1.0, &mut rng);
        let wv = normal_matrix(dim, dv, 1.0, &mut rng);
        let i = rng.random_range(0..pix);
        let g = lemma1_gradient(&x, &p, &wq, &wk, &wv, i).unwrap();
        for o in 0..dv {
            let numeric = finite_diff_grad(
                |pp| {
                    let emb = PromptEmbedding {
                        tokens: vec![0; pp.rows()],
                        matrix: pp.clone(),
                    };
                    cross_attention(&x, &emb, &wq, &wk, &wv).unwrap().0.get(i, o)
                },
                &p,
                FD_STEP,
            )
            .unwrap();
            let analytic = Matrix::from_vec(n, dim, g.row(o).to_vec()).unwrap();
            worst = worst.max(GradCheckReport::compare(&analytic, &numeric).unwrap().max_rel_err);
        }
        instances += 1;
    }
    // training gradients: full base model and LoRA factors
    let sched = NoiseSchedule::new(ScheduleKind::Linear, 20).unwrap();
    let side = Arch::tiny().side;
    let img = |rng: &mut SeededRng| {
        LatentImage::new(side, (0..side * side).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
    };
    for k in 0..50u64 {
        let mut rng = seeded(500 + k);
        let base = Denoiser::new(Arch::tiny(), k).unwrap();
        let (x0, eps) = (img(&mut rng), img(&mut rng));
        let toks = [vocab::trigger((k % 20) as usize), 30, 41];
        let t = rng.random_range(1..=20);
        if k < 5 {
            let (_, grads) = base_sample_gradient(&base, &x0, &toks, t, &eps, &sched).unwrap();
            for (id, g) in grads.iter().enumerate() {
                let numeric = finite_diff_grad(
                    |m| {
                        let mut b = base.clone();
                        b.tensors_mut()[id] = m.clone();
                        base_sample_gradient(&b, &x0, &toks, t, &eps, &sched).unwrap().0
                    },
                    &base.tensors()[id],
                    FD_STEP,
                )
                .unwrap();
                worst = worst.max(GradCheckReport::compare(g, &numeric).unwrap().max_rel_err);
            }
        }
        let mut delta = init_delta(&base, 2, TargetFilter::Attention, k).unwrap();
        for e in delta.entries.iter_mut() {
            e.b = normal_matrix(e.b.rows(), e.b.cols(), 0.3, &mut rng);
        }
        let (_, grads) = lora_sample_gradient(&base, &delta, &x0, &toks, t, &eps, &sched).unwrap();
        for (j, g) in grads.iter().enumerate() {
            let entry = &delta.entries[j / 2];
            let numeric = finite_diff_grad(
                |m| {
                    let mut d = delta.clone();
                    if j % 2 == 0 {
                        d.entries[j / 2].b = m.clone();
                    } else {
                        d.entries[j / 2].a = m.clone();
                    }
                    lora_sample_gradient(&base, &d, &x0, &toks, t, &eps, &sched).unwrap().0
                },
                if j % 2 == 0 { &entry.b } else { &entry.a },
                FD_STEP,
            )
            .unwrap();
            worst = worst.max(GradCheckReport::compare(g, &numeric).unwrap().max_rel_err);
        }
        instances += 1;
    }
    let lip = lipschitz_probe(1000, 77).unwrap();
    let secs = started.elapsed().as_secs_f64();
    Line {
        id: 2,
        name: "gradient suite",
        pass: worst <= 1e-4 && instances >= 50 && lip.holds() && lip.probes >= 1000 && secs < 120.0,
        detail: format!(
            "max rel err {worst:.2e} over {instances} instances; bound on {} probes: {} violations (tightest {:.3}/{:.3}); {secs:.1}s",
            lip.probes, lip.violations, lip.observed, lip.bound
        ),
    }
}

// ---------------------------------------------------------------- shared benchmark data

struct SeedRun {
    bench: Benchmark,
    models: Vec<BenchModel>,
    caption: Vec<CaseTables>,
    null: Vec<CaseTables>,
    /// Base training + fine-tuning + caption_proxy tables, seconds.
    pipeline_secs: f64,
}

fn cfg_for(strategy: PromptStrategy) -> AuditConfig {
    AuditConfig {
        strategy,
        ..AuditConfig::for_steps(100)
    }
}

fn prepare(seed: u64) -> (Benchmark, f64) {
    let spec = BenchmarkSpec {
        seed,
        ..BenchmarkSpec::default()
    };
    let started = Instant::now();
    if let Some(dir) = cache_dir() {
        let path = dir.join(format!("base_{seed}.ckpt"));
        let secs_path = dir.join(format!("base_{seed}.secs"));
        if let (Ok(ck), Ok(secs)) = (Checkpoint::load(&path), std::fs::read_to_string(&secs_path)) {
            let corpus = Corpus::generate(spec.total_concepts(), spec.per_concept, seed).unwrap();
            let b = Benchmark::from_parts(spec, corpus, ck.model, ck.schedule).unwrap();
            return (b, secs.trim().parse().unwrap());
        }
        let b = Benchmark::prepare(spec).unwrap();
        let secs = started.elapsed().as_secs_f64();
        Checkpoint {
            model: b.base.clone(),
            schedule: b.sched.clone(),
        }
        .save(&path)
        .unwrap();
        std::fs::write(secs_path, secs.to_string()).unwrap();
        return (b, secs);
    }
    let b = Benchmark::prepare(spec).unwrap();
    (b, started.elapsed().as_secs_f64())
}

fn models_for(bench: &Benchmark, attack: Attack) -> (Vec<BenchModel>, f64) {
    let started = Instant::now();
    let tag = format!("{}_{}", bench.spec.seed, attack.name());
    if let Some(dir) = cache_dir() {
        let secs_path = dir.join(format!("models_{tag}.secs"));
        if let Ok(secs) = std::fs::read_to_string(&secs_path) {
            let meta: Vec<(Vec<usize>, usize, bool, TrainReport)> =
                serde_json::from_str(&std::fs::read_to_string(dir.join(format!("models_{tag}.json"))).unwrap()).unwrap();
            let models = meta
                .into_iter()
                .enumerate()
                .map(|(i, (trained, audited, positive, report))| BenchModel {
                    trained_concepts: trained,
                    audited_concept: audited,
                    positive,
                    delta: load_delta(&dir.join(format!("delta_{tag}_{i}.lora"))).unwrap(),
                    report,
                })
                .collect();
            return (models, secs.trim().parse().unwrap());
        }
        let models = bench.train_models(attack, 1).unwrap();
        let secs = started.elapsed().as_secs_f64();
        for (i, m) in models.iter().enumerate() {
            save_delta(&m.delta, &dir.join(format!("delta_{tag}_{i}.lora"))).unwrap();
        }
        let meta: Vec<_> = models
            .iter()
            .map(|m| (m.trained_concepts.clone(), m.audited_concept, m.positive, m.report.clone()))
            .collect();
        std::fs::write(dir.join(format!("models_{tag}.json")), serde_json::to_string(&meta).unwrap()).unwrap();
        std::fs::write(secs_path, secs.to_string()).unwrap();
        return (models, secs);
    }
    let models = bench.train_models(attack, 1).unwrap();
    (models, started.elapsed().as_secs_f64())
}

fn tables_for(bench: &Benchmark, models: &[BenchModel], tag: &str, strategy: PromptStrategy, pool: usize) -> (Vec<CaseTables>, f64) {
    let name = format!("tables_{}_{tag}_{strategy:?}_{pool}.json", bench.spec.seed);
    cached_json(&name, || {
        let started = Instant::now();
        let mut cache = BaseErrorCache::new();
        let cfg = cfg_for(strategy);
        let t: Vec<CaseTables> = models.iter().map(|m| bench.tables(m, &cfg, pool, &mut cache).unwrap()).collect();
        (t, started.elapsed().as_secs_f64())
    })
}

fn run_seed(seed: u64) -> SeedRun {
    let (bench, base_secs) = prepare(seed);
    let (models, ft_secs) = models_for(&bench, Attack::None);
    let (caption, cap_secs) = tables_for(&bench, &models, "none", PromptStrategy::CaptionProxy, POOL);
    let (null, _) = tables_for(&bench, &models, "none", PromptStrategy::Null, 100);
    let pipeline_secs = base_secs + ft_secs + cap_secs;
    eprintln!("seed {seed}: base {base_secs:.0}s, fine-tunes {ft_secs:.0}s, caption tables {cap_secs:.0}s");
    SeedRun {
        bench,
        models,
        caption,
        null,
        pipeline_secs,
    }
}

fn default_variant() -> Variant {
    Variant::from_config(&cfg_for(PromptStrategy::CaptionProxy))
}

// ---------------------------------------------------------------- 3, 4

fn desk_benchmark(runs: &[SeedRun]) -> Line {
    let v = default_variant();
    let (mut accs, mut f1s) = (Vec::new(), Vec::new());
    for r in runs {
        let (m, _) = evaluate(&r.caption, &v).unwrap();
        accs.push(m.accuracy);
        f1s.push(m.f1);
    }
    let secs: f64 = runs.iter().map(|r| r.pipeline_secs).sum();
    let (a, f) = (mean(&accs), mean(&f1s));
    Line {
        id: 3,
        name: "desk benchmark",
        pass: a >= 0.85 && f >= 0.85 && secs <= 1800.0,
        detail: format!(
            "accuracy {a:.3} (per seed {accs:.2?}), F1 {f:.3} (per seed {f1s:.2?}), pipeline {:.1} min for 3 seeds",
            secs / 60.0
        ),
    }
}

fn prompt_agnostic(runs: &[SeedRun]) -> Line {
    let v = default_variant();
    let (mut agree, mut total) = (0.0, 0usize);
    let (mut acc_cap, mut acc_null) = (Vec::new(), Vec::new());
    for r in runs {
        let (mc, vc) = evaluate(&r.caption, &v).unwrap();
        let (mn, vn) = evaluate(&r.null, &v).unwrap();
        agree += agreement(&vc, &vn) * vc.len() as f64;
        total += vc.len();
        acc_cap.push(mc.accuracy);
        acc_null.push(mn.accuracy);
    }
    let agreement = agree / total as f64;
    let drop = mean(&acc_cap) - mean(&acc_null);
    Line {
        id: 4,
        name: "prompt agnosticism",
        pass: agreement >= 0.90 && drop <= 0.05 + 1e-12,
        detail: format!(
            "verdict agreement {agreement:.3} over {total} audits; accuracy caption_proxy {:.3} vs null {:.3} (drop {:.1} points)",
            mean(&acc_cap),
            mean(&acc_null),
            100.0 * drop
        ),
    }
}

// ---------------------------------------------------------------- 5

fn sensitivity(runs: &[SeedRun]) -> Line {
    let mut rhos = Vec::new();
    let mut warnings = Vec::new();
    for r in runs {
        let b = &r.bench;
        let imgs = select(&b.corpus.images, &b.spec.base_range().collect::<Vec<_>>(), Some(Split::Train));
        let (pairs, prompts) = caption_pairs(&imgs, 32, b.spec.seed);
        let curve = sensitivity_curve(
            &b.base,
            &pairs,
            &prompts,
            &b.sched,
            &even_grid(100, 10),
            MatrixNorm::Spectral,
            b.spec.seed,
        )
        .unwrap();
        rhos.push(curve.spearman_j);
        warnings.extend(curve.warnings);
    }
    Line {
        id: 5,
        name: "attention sensitivity trend",
        pass: rhos.iter().all(|r| *r > 0.5),
        detail: format!("Spearman rho(norm_J, t) per seed {rhos:.3?}{}", if warnings.is_empty() { String::new() } else { format!("; warnings {warnings:?}") }),
    }
}

// ---------------------------------------------------------------- 6

fn ce_separation(runs: &[SeedRun]) -> Line {
    let grid = default_grid(100);
    let band: Vec<usize> = (0..grid.len()).filter(|&k| grid[k] >= 25 && grid[k] <= 75).collect();
    let (mut below, mut positives) = (0, 0);
    let mut fixed = Vec::new();
    for r in runs {
        let b = &r.bench;
        let pool = b.irrelevant_pool();
        let pool = &pool[..100];
        let seps: Vec<bool> = cached_json(&format!("ce_sep_{}.json", b.spec.seed), || {
            r.models
                .iter()
                .filter(|m| m.positive)
                .map(|m| {
                    let targets = b.targets(m.audited_concept);
                    let c = ce_curves(&b.base, &m.delta, &targets, pool, &b.sched, &grid, 4, 0).unwrap();
                    let band_mean = |row: &Vec<f64>| band.iter().map(|k| row[*k]).sum::<f64>() / band.len() as f64;
                    let target = mean(&c.target_values.iter().map(band_mean).collect::<Vec<_>>());
                    let mut irr: Vec<f64> = c.irrelevant_values.iter().map(band_mean).collect();
                    irr.sort_by(f64::total_cmp);
                    let p5 = irr[((0.05 * (irr.len() - 1) as f64).round()) as usize];
                    target < p5
                })
                .collect()
        });
        below += seps.iter().filter(|s| **s).count();
        positives += seps.len();
        let best = fixed_threshold_accuracy(&r.caption).unwrap();
        fixed.push(best.iter().map(|x| x.2).fold(0.0, f64::max));
    }
    let frac = below as f64 / positives as f64;
    Line {
        id: 6,
        name: "target CE below irrelevant 5th percentile",
        pass: frac >= 0.80,
        detail: format!(
            "{below}/{positives} positive models ({:.0}%); best single-threshold single-t accuracy per seed {fixed:.2?}",
            100.0 * frac
        ),
    }
}

// ---------------------------------------------------------------- 7

fn conditional_gain(runs: &[SeedRun]) -> Line {
    let v = default_variant();
    let sweeps: Vec<_> = runs.iter().map(|r| gamma_sweep(&r.caption, &v).unwrap()).collect();
    let xs: Vec<f64> = sweeps[0].rows.iter().map(|r| r.x).collect();
    let curve: Vec<f64> = xs
        .iter()
        .map(|x| mean(&sweeps.iter().map(|s| s.accuracy_at(*x).unwrap()).collect::<Vec<_>>()))
        .collect();
    let at = |g: f64| curve[xs.iter().position(|x| *x == g).unwrap()];
    let peak = curve.iter().copied().fold(0.0, f64::max);
    let band = [38.0, 50.0, 63.0];
    let band_max = band.iter().map(|g| at(*g)).fold(0.0, f64::max);
    let pass = at(50.0) >= at(100.0) && band_max >= peak;
    let pairs: Vec<String> = xs.iter().zip(&curve).map(|(x, a)| format!("{x}:{a:.3}")).collect();
    Line {
        id: 7,
        name: "conditional calibration gain",
        pass,
        detail: format!(
            "accuracy gamma=T/2 {:.3} vs gamma=T {:.3}; sweep {}; peak {peak:.3} (middle band max {band_max:.3})",
            at(50.0),
            at(100.0),
            pairs.join(" ")
        ),
    }
}

// ---------------------------------------------------------------- 8

fn attacks(runs: &[SeedRun]) -> Line {
    let v = default_variant();
    let clean = mean(
        &runs
            .iter()
            .map(|r| evaluate(&r.caption, &v).unwrap().0.accuracy)
            .collect::<Vec<_>>(),
    );
    let mut worst_drop = f64::NEG_INFINITY;
    let mut parts = Vec::new();
    for attack in [
        Attack::PromptDeviation { concepts: 0 },
        Attack::Regularization { lambda: 1.0 },
        Attack::EarlyFreezing,
        Attack::LateFreezing,
    ] {
        let mut accs = Vec::new();
        for r in runs {
            let (cases, _) = {
                let name = format!("tables_{}_{}_CaptionProxy_100.json", r.bench.spec.seed, attack.name());
                let have = cache_dir().is_some_and(|d| d.join(&name).exists());
                if have {
                    tables_for(&r.bench, &[], attack.name(), PromptStrategy::CaptionProxy, 100)
                } else {
                    let (models, secs) = models_for(&r.bench, attack);
                    eprintln!("seed {} {}: fine-tunes {secs:.0}s", r.bench.spec.seed, attack.name());
                    tables_for(&r.bench, &models, attack.name(), PromptStrategy::CaptionProxy, 100)
                }
            };
            accs.push(evaluate(&cases, &v).unwrap().0.accuracy);
        }
        let a = mean(&accs);
        worst_drop = worst_drop.max(clean - a);
        parts.push(format!("{} {a:.3}", attack.name()));
    }
    Line {
        id: 8,
        name: "adaptive attacks",
        pass: worst_drop <= 0.05 + 1e-12,
        detail: format!("clean {clean:.3}; {}; worst drop {:.1} points", parts.join(", "), 100.0 * worst_drop),
    }
}

// ---------------------------------------------------------------- 9

fn limited_calibration(runs: &[SeedRun]) -> Line {
    let v = default_variant();
    let sweeps: Vec<_> = runs.iter().map(|r| budget_sweep(&r.caption, &v, &BUDGETS).unwrap()).collect();
    let at = |b: usize| mean(&sweeps.iter().map(|s| s.accuracy_at(b as f64).unwrap()).collect::<Vec<_>>());
    let curve: Vec<String> = BUDGETS.iter().map(|b| format!("{b}:{:.3}", at(*b))).collect();
    let pass = (at(64) - at(128)).abs() <= 0.03 + 1e-12 && at(8) >= 0.70 - 1e-12;
    Line {
        id: 9,
        name: "limited calibration",
        pass,
        detail: format!("accuracy by budget {}", curve.join(" ")),
    }
}

// ---------------------------------------------------------------- 10

fn efficiency(run: &SeedRun) -> Line {
    let b = &run.bench;
    let model = run.models.iter().find(|m| m.positive).unwrap();
    let cfg = cfg_for(PromptStrategy::CaptionProxy);
    let pool = b.irrelevant_pool();
    let mut session = AuditSession::new(&b.base, &model.delta, &b.sched, cfg.clone()).unwrap();
    let mut cache = BaseErrorCache::new();
    session.calibrate(&pool[..100], &mut cache).unwrap();
    let started = Instant::now();
    let verdict = session.audit(model.audited_concept, &pool[..100], &b.targets(model.audited_concept), &mut cache).unwrap();
    let audit_secs = started.elapsed().as_secs_f64();
    assert!(verdict.timings.calibration_reused);

    let merged = effective_params(&b.base, &model.delta, ApplyMode::FullFinetuned).unwrap();
    let spec = b.corpus.spec(model.audited_concept).unwrap();
    let mut caption = vec![spec.trigger.unwrap()];
    caption.extend(spec.attribute_tokens());
    let p = encode_prompt(&caption, &b.base).unwrap();
    let null = encode_prompt(&[], &b.base).unwrap();
    let started = Instant::now();
    for i in 0..10 {
        sample_guided(&merged, &p, &null, 3.0, &b.sched, b.sched.steps(), 9000 + i).unwrap();
    }
    let gen_secs = started.elapsed().as_secs_f64();
    let ratio = audit_secs / gen_secs;
    let one_shot = Instant::now();
    audit_concept(&b.base, &model.delta, &b.sched, model.audited_concept, &pool[..100], &b.targets(model.audited_concept), &cfg).unwrap();
    let cold = one_shot.elapsed().as_secs_f64();
    Line {
        id: 10,
        name: "efficiency ratio",
        pass: ratio <= 0.2,
        detail: format!(
            "audit with cached irrelevant features {audit_secs:.2}s ({} target forward passes) vs 10 guided {}-step samples {gen_secs:.2}s: ratio {ratio:.3}; cold audit incl. calibration {cold:.2}s",
            10 * cfg.t_grid.len() * cfg.eps_draws * 2,
            b.sched.steps()
        ),
    }
}

// ---------------------------------------------------------------- 11

fn forest() -> Line {
    let mut rng = seeded(11);
    let mut rows: Vec<Vec<f64>> = (0..500)
        .map(|_| vec![rng.sample(StandardNormal), rng.sample(StandardNormal)])
        .collect();
    let outliers: Vec<Vec<f64>> = (0..25)
        .map(|_| {
            let a: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let r: f64 = rng.random_range(6.0..10.0);
            vec![r * a.cos(), r * a.sin()]
        })
        .collect();
    rows.extend(outliers.iter().cloned());
    let f = IsolationForest::fit(&rows, &ForestParams::default()).unwrap();
    let pos: Vec<f64> = outliers.iter().map(|r| f.score(r).unwrap()).collect();
    let neg: Vec<f64> = rows[..500].iter().map(|r| f.score(r).unwrap()).collect();
    let a = auc(&pos, &neg);
    let h = |n: usize| (1..n).map(|i| 1.0 / i as f64).sum::<f64>();
    let formula_ok = average_path_length(1) == 0.0
        && average_path_length(2) == 1.0
        && [3usize, 10, 256, 1000]
            .iter()
            .all(|&n| (average_path_length(n) - (2.0 * h(n) - 2.0 * (n as f64 - 1.0) / n as f64)).abs() < 1e-9);
    let bounds_ok = pos.iter().chain(&neg).all(|s| *s > 0.0 && *s < 1.0);
    Line {
        id: 11,
        name: "isolation forest oracle",
        pass: a >= 0.99 && formula_ok && bounds_ok,
        detail: format!("AUC {a:.4}; c(n) formula {formula_ok}; scores in (0,1) {bounds_ok}"),
    }
}

fn main() -> ExitCode {
    if std::env::args().any(|a| a == "--list") {
        return ExitCode::SUCCESS;
    }
    let started = Instant::now();
    let mut lines = Vec::new();
    let report = |l: Line, lines: &mut Vec<Line>| {
        l.print();
        lines.push(l);
    };
    report(identity(), &mut lines);
    report(gradients(), &mut lines);
    report(forest(), &mut lines);
    let runs: Vec<SeedRun> = SEEDS.iter().map(|s| run_seed(*s)).collect();
    report(desk_benchmark(&runs), &mut lines);
    report(prompt_agnostic(&runs), &mut lines);
    report(sensitivity(&runs), &mut lines);
    report(ce_separation(&runs), &mut lines);
    report(conditional_gain(&runs), &mut lines);
    report(limited_calibration(&runs), &mut lines);
    report(efficiency(&runs[0]), &mut lines);
    report(attacks(&runs), &mut lines);

    lines.sort_by_key(|l| l.id);
    println!("\nacceptance summary ({:.1} min)", started.elapsed().as_secs_f64() / 60.0);
    for l in &lines {
        l.print();
    }
    let failed = lines.iter().filter(|l| !l.pass).count();
    println!("{} passed, {failed} failed", lines.len() - failed);
    if failed == 0 || std::env::var("PAIA_ACCEPTANCE_STRICT").map_or(true, |v| v != "1") {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
