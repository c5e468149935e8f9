use std::path::{Path, PathBuf};

use paia_core::adapters::{load_delta, save_delta};
use paia_core::analysis::{
    budget_sweep, caption_pairs, ce_curves, compact_form_check, concept_count_sweep, conditional_sweep, default_grid,
    fixed_threshold_accuracy, gamma_sweep, lemma1_gradient, lipschitz_probe, quantile_sweep, sensitivity_curve,
    strategy_stage_sweep, threshold_diagnostic, timestep_sweep, MatrixNorm, PlotData, SweepRow, SweepTable,
    BUDGETS,
};
use paia_core::audit::{even_grid, AuditConfig, BaseErrorCache, PromptStrategy};
use paia_core::benchmark::{evaluate, BenchModel, Benchmark, BenchmarkSpec, CaseTables, Variant};
use paia_core::dataset::{select, Corpus, Split};
use paia_core::diffusion::{cross_attention, Checkpoint, PromptEmbedding};
use paia_core::numerics::{finite_diff_grad, GradCheckReport, Matrix, FD_STEP};
use paia_core::rng::{normal_matrix, seeded};
use paia_core::training::{Attack, TrainReport};
use paia_core::Error;
use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::commands::{attack_of, interleaved};
use crate::manifest::{BenchmarkEcho, ExperimentManifest, Report};
use crate::util::{ensure_fresh, load_base, load_corpus, load_model, write, Ctx, Failure};
use crate::{AnalyzeArgs, AttackArg, BenchmarkArgs, NormArg, Study, SweepDim};

const SPEC_FILE: &str = "spec.json";
const TABLE_POOL: usize = 128;

#[derive(Serialize, Deserialize)]
struct ModelEntry {
    trained_concepts: Vec<usize>,
    audited_concept: usize,
    positive: bool,
    file: String,
    report: TrainReport,
}

fn set_name(attack: &Attack, k: usize) -> String {
    format!("{}_k{k}", attack.name())
}

fn write_set(dir: &Path, models: &[BenchModel]) -> Result<(), Failure> {
    let mut index = Vec::new();
    for (i, m) in models.iter().enumerate() {
        let file = format!("{i:02}.lora");
        save_delta(&m.delta, &dir.join(&file))?;
        index.push(ModelEntry {
            trained_concepts: m.trained_concepts.clone(),
            audited_concept: m.audited_concept,
            positive: m.positive,
            file,
            report: m.report.clone(),
        });
    }
    write(&dir.join("index.json"), serde_json::to_string_pretty(&index).expect("serializes"))
}

fn read_set(dir: &Path, hint: &str) -> Result<Vec<BenchModel>, Failure> {
    let path = dir.join("index.json");
    let text = std::fs::read_to_string(&path).map_err(|_| Error::MissingArtifact {
        path: path.clone(),
        hint: hint.into(),
    })?;
    let index: Vec<ModelEntry> =
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    index
        .into_iter()
        .map(|e| {
            Ok(BenchModel {
                delta: load_delta(&dir.join(&e.file))?,
                trained_concepts: e.trained_concepts,
                audited_concept: e.audited_concept,
                positive: e.positive,
                report: e.report,
            })
        })
        .collect()
}

pub fn benchmark(ctx: &Ctx, a: BenchmarkArgs) -> Result<(), Failure> {
    let dir = ctx.path(a.out.as_deref(), &format!("bench/seed_{}", a.seed));
    let spec = BenchmarkSpec {
        seed: a.seed,
        ..BenchmarkSpec::default()
    };
    spec.validate()?;
    if a.concept_counts.iter().any(|k| *k == 0 || *k >= spec.bench_concepts) {
        return Err(Failure::usage(format!(
            "concept counts must lie in [1, {})",
            spec.bench_concepts
        )));
    }
    if dir.join(SPEC_FILE).exists() && !a.force {
        let existing: BenchmarkSpec = serde_json::from_str(&std::fs::read_to_string(dir.join(SPEC_FILE)).unwrap_or_default())
            .map_err(|e| Error::Format(format!("{SPEC_FILE}: {e}")))?;
        if existing != spec {
            return Err(Failure::usage(format!(
                "{} holds a different benchmark; pass --force to replace it",
                dir.display()
            )));
        }
    }
    let mut m = ExperimentManifest::new("benchmark", a.seed);
    m.output("bench", &dir).seed("base", a.seed);
    m.benchmark = Some(BenchmarkEcho {
        concepts: spec.total_concepts(),
        per_concept: spec.per_concept,
        attacks: a.attacks.iter().map(|x| attack_of(*x, a.lambda, 0).name().to_string()).collect(),
        concept_counts: a.concept_counts.clone(),
    });
    m.config = serde_json::to_value(&spec).expect("serializes");

    let base_path = dir.join("base.ckpt");
    let bench = if base_path.exists() && !a.force {
        let ck = load_base(&base_path)?;
        let corpus = Corpus::generate(spec.total_concepts(), spec.per_concept, spec.seed)?;
        println!("reusing base model {}", base_path.display());
        Benchmark::from_parts(spec.clone(), corpus, ck.model, ck.schedule)?
    } else {
        let b = Benchmark::prepare(spec.clone())?;
        b.corpus.write(&dir.join("corpus"))?;
        Checkpoint {
            model: b.base.clone(),
            schedule: b.sched.clone(),
        }
        .save(&base_path)?;
        let report = b.base_report.as_ref().expect("freshly trained");
        write(&dir.join("base.report.json"), Report::new(&m, report).to_json())?;
        println!("trained base: final loss {:.4} in {:.1}s", report.final_loss, report.wall_secs);
        b
    };
    write(&dir.join(SPEC_FILE), serde_json::to_string_pretty(&spec).expect("serializes"))?;

    let mut sets: Vec<(Attack, usize)> = a.concept_counts.iter().map(|k| (Attack::None, *k)).collect();
    for at in &a.attacks {
        if *at != AttackArg::None {
            sets.push((attack_of(*at, a.lambda, bench.corpus.specs.len()), 1));
        }
    }
    for (attack, k) in sets {
        let set_dir = dir.join("models").join(set_name(&attack, k));
        if set_dir.join("index.json").exists() && !a.force {
            println!("reusing {}", set_dir.display());
            continue;
        }
        let started = std::time::Instant::now();
        let models = bench.train_models_with(attack, k, |i, bm| {
            eprintln!(
                "  {} k={k} model {i}: concepts {:?}, audited {}, loss {:.4}",
                attack.name(),
                bm.trained_concepts,
                bm.audited_concept,
                bm.report.final_loss
            );
        })?;
        write_set(&set_dir, &models)?;
        println!(
            "trained {} models ({}, {k} concept(s) each) in {:.1}s",
            models.len(),
            attack.name(),
            started.elapsed().as_secs_f64()
        );
    }
    write(&dir.join("manifest.json"), Report::new(&m, json!({ "dir": dir })).to_json())?;
    Ok(())
}

pub fn analyze(ctx: &Ctx, a: AnalyzeArgs) -> Result<(), Failure> {
    match a.study {
        Study::Lemma1 => lemma1(ctx, &a),
        Study::Sensitivity => sensitivity(ctx, &a),
        Study::CeCurves => ce_study(ctx, &a),
        Study::Sweeps => sweeps(ctx, &a),
    }
}

fn out_dir(ctx: &Ctx, a: &AnalyzeArgs, name: &str) -> Result<PathBuf, Failure> {
    let out = ctx.path(a.out.as_deref(), &format!("reports/{name}"));
    ensure_fresh(&out, a.force)?;
    Ok(out)
}

fn write_plot(path: &Path, plot: &PlotData) -> Result<(), Failure> {
    write(path, serde_json::to_string_pretty(plot).expect("serializes"))
}

#[derive(Serialize)]
struct Lemma1Result {
    instances: usize,
    max_rel_err: f64,
    compact_form: Vec<paia_core::analysis::CompactFormCheck>,
    lipschitz: paia_core::analysis::LipschitzReport,
}

fn lemma1(ctx: &Ctx, a: &AnalyzeArgs) -> Result<(), Failure> {
    let out = out_dir(ctx, a, "lemma1")?;
    let mut m = ExperimentManifest::new("analyze lemma1", a.seed);
    m.output("report", &out);
    m.config = json!({ "probes": a.probes, "instances": 50 });
    let mut rng = seeded(a.seed);
    let mut csv = String::from("instance,pixels,tokens,embed_dim,attn_dim,value_dim,rel_err\n");
    let mut worst = 0.0f64;
    for k in 0..50 {
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
        let g = lemma1_gradient(&x, &p, &wq, &wk, &wv, i)?;
        let mut rel = 0.0f64;
        for o in 0..dv {
            let numeric = finite_diff_grad(
                |pp| {
                    let emb = PromptEmbedding {
                        tokens: vec![0; pp.rows()],
                        matrix: pp.clone(),
                    };
                    cross_attention(&x, &emb, &wq, &wk, &wv).map_or(f64::NAN, |r| r.0.get(i, o))
                },
                &p,
                FD_STEP,
            )?;
            let analytic = Matrix::from_vec(n, dim, g.row(o).to_vec())?;
            rel = rel.max(GradCheckReport::compare(&analytic, &numeric)?.max_rel_err);
        }
        worst = worst.max(rel);
        csv.push_str(&format!("{k},{pix},{n},{dim},{d},{dv},{rel:e}\n"));
    }
    let mut compact = Vec::new();
    for (n, dim) in [(3, 5), (1, 1)] {
        let x = normal_matrix(2, 3, 1.0, &mut rng);
        let p = normal_matrix(n, dim, 1.0, &mut rng);
        let wq = normal_matrix(3, 2, 1.0, &mut rng);
        let wk = normal_matrix(dim, 2, 1.0, &mut rng);
        let wv = normal_matrix(dim, 2, 1.0, &mut rng);
        compact.push(compact_form_check(&x, &p, &wq, &wk, &wv, 0)?);
    }
    let lip = lipschitz_probe(a.probes, a.seed)?;
    write(&out.join("lemma1.csv"), csv)?;
    let result = Lemma1Result {
        instances: 50,
        max_rel_err: worst,
        compact_form: compact,
        lipschitz: lip.clone(),
    };
    write(&out.join("lemma1.json"), Report::new(&m, &result).to_json())?;
    println!("chain-rule gradient vs finite differences: max rel err {worst:.2e} over 50 instances");
    for c in &result.compact_form {
        println!("compact form: closes={} ({})", c.closes, c.detail);
    }
    println!(
        "Lipschitz bound over {} probes: {} violations, tightest observed {:.4} vs bound {:.4}",
        lip.probes, lip.violations, lip.observed, lip.bound
    );
    if worst > 1e-4 {
        return Err(Failure::property(format!("gradient check failed: rel err {worst:.2e}")));
    }
    if !lip.holds() {
        return Err(Failure::property(format!("Lipschitz bound violated on {} probes", lip.violations)));
    }
    Ok(())
}

fn sensitivity(ctx: &Ctx, a: &AnalyzeArgs) -> Result<(), Failure> {
    let base_path = ctx.path(a.base.as_deref(), "base.ckpt");
    let corpus_path = ctx.path(a.corpus.as_deref(), "corpus");
    let mut m = ExperimentManifest::new("analyze sensitivity", a.seed);
    m.input("base", &base_path).input("corpus", &corpus_path);
    m.resolve()?;
    let out = out_dir(ctx, a, "sensitivity")?;
    m.output("report", &out);
    let ck = load_base(&base_path)?;
    let corpus = load_corpus(&corpus_path)?;
    let images = select(&corpus.images, &corpus.specs.iter().map(|s| s.concept_id).collect::<Vec<_>>(), Some(Split::Train));
    let (pairs, prompts) = caption_pairs(&images, a.pairs, a.seed);
    let grid = a.t_grid.clone().unwrap_or_else(|| even_grid(ck.schedule.steps(), 10));
    let norm = match a.norm {
        NormArg::Spectral => MatrixNorm::Spectral,
        NormArg::Frobenius => MatrixNorm::Frobenius,
    };
    m.config = json!({ "pairs": a.pairs, "t_grid": grid, "norm": norm });
    let curve = sensitivity_curve(&ck.model, &pairs, &prompts, &ck.schedule, &grid, norm, a.seed)?;
    write(&out.join("sensitivity.csv"), curve.to_csv())?;
    write_plot(&out.join("sensitivity.plot.json"), &curve.plot_data())?;
    write(&out.join("sensitivity.json"), Report::new(&m, &curve).to_json())?;
    for w in &curve.warnings {
        eprintln!("warning: {w}");
    }
    println!("Spearman rho(norm_J, t) = {:.3} over {} timesteps", curve.spearman_j, grid.len());
    Ok(())
}

fn ce_study(ctx: &Ctx, a: &AnalyzeArgs) -> Result<(), Failure> {
    let base_path = ctx.path(a.base.as_deref(), "base.ckpt");
    let corpus_path = ctx.path(a.corpus.as_deref(), "corpus");
    let model = a.model.clone().ok_or_else(|| Failure::usage("--model is required for ce-curves"))?;
    let concept = a.concept.ok_or_else(|| Failure::usage("--concept is required for ce-curves"))?;
    let mut m = ExperimentManifest::new("analyze ce-curves", a.seed);
    m.input("base", &base_path).input("corpus", &corpus_path).input("model", &model);
    m.resolve()?;
    let out = out_dir(ctx, a, "ce_curves")?;
    m.output("report", &out);
    let ck = load_base(&base_path)?;
    let delta = load_model(&model)?;
    let corpus = load_corpus(&corpus_path)?;
    corpus.spec(concept)?;
    let irr_concepts = a.irrelevant_concepts.clone().unwrap_or_else(|| {
        corpus
            .specs
            .iter()
            .map(|s| s.concept_id)
            .filter(|c| *c != concept)
            .collect()
    });
    let pool: Vec<_> = interleaved(&corpus.images, &irr_concepts).into_iter().take(100).collect();
    let targets: Vec<_> = select(&corpus.images, &[concept], Some(Split::Test)).into_iter().take(10).collect();
    let grid = a.t_grid.clone().unwrap_or_else(|| default_grid(ck.schedule.steps()));
    m.config = json!({ "concept": concept, "irrelevant_concepts": irr_concepts, "t_grid": grid, "eps_draws": a.eps_draws });
    let curves = ce_curves(&ck.model, &delta, &targets, &pool, &ck.schedule, &grid, a.eps_draws, a.seed)?;
    let k = (0..grid.len())
        .max_by(|x, y| curves.cohens_d[*x].total_cmp(&curves.cohens_d[*y]))
        .expect("non-empty grid");
    let col = |v: &[Vec<f64>]| v.iter().map(|r| r[k]).collect::<Vec<f64>>();
    let table = threshold_diagnostic(&col(&curves.target_values), &col(&curves.irrelevant_values), None)?;
    write(&out.join("ce_curves.csv"), curves.to_csv())?;
    write_plot(&out.join("ce_curves.plot.json"), &curves.plot_data())?;
    write(&out.join("threshold.csv"), table.to_csv())?;
    write(
        &out.join("ce_curves.json"),
        Report::new(&m, json!({ "curves": curves, "threshold_t": grid[k], "threshold": table })).to_json(),
    )?;
    for (i, t) in grid.iter().enumerate() {
        println!(
            "t={t:>4}: target {:+.3}±{:.3}  irrelevant {:+.3}±{:.3}  d={:.2}",
            curves.target_mean[i], curves.target_sd[i], curves.irrelevant_mean[i], curves.irrelevant_sd[i], curves.cohens_d[i]
        );
    }
    println!("fixed threshold at t={}: best accuracy {:.3} (tau {:.4})", grid[k], table.best_accuracy, table.best_tau);
    Ok(())
}

struct BenchDir {
    dir: PathBuf,
    bench: Benchmark,
}

fn open_bench(dir: &Path) -> Result<BenchDir, Failure> {
    let spec_path = dir.join(SPEC_FILE);
    let text = std::fs::read_to_string(&spec_path).map_err(|_| Error::MissingArtifact {
        path: spec_path.clone(),
        hint: "run `paia benchmark` first".into(),
    })?;
    let spec: BenchmarkSpec = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{SPEC_FILE}: {e}")))?;
    let ck = load_base(&dir.join("base.ckpt"))?;
    let corpus = Corpus::read(&dir.join("corpus"))?;
    Ok(BenchDir {
        dir: dir.to_path_buf(),
        bench: Benchmark::from_parts(spec, corpus, ck.model, ck.schedule)?,
    })
}

impl BenchDir {
    fn models(&self, attack: &Attack, k: usize) -> Result<Vec<BenchModel>, Failure> {
        let hint = if *attack == Attack::None {
            format!("train it with `paia benchmark --seed {} --concept-counts {k}`", self.bench.spec.seed)
        } else {
            format!(
                "train it with `paia benchmark --seed {} --attacks {}`",
                self.bench.spec.seed,
                attack.name().replace('_', "-")
            )
        };
        read_set(&self.dir.join("models").join(set_name(attack, k)), &hint)
    }

    /// Error tables, cached under `cache`.
    fn tables(&self, cache: &Path, attack: &Attack, k: usize, strategy: PromptStrategy, pool: usize) -> Result<Vec<CaseTables>, Failure> {
        let path = cache.join(format!("{}_{strategy:?}_{pool}.json", set_name(attack, k)));
        if let Ok(text) = std::fs::read_to_string(&path) {
            if let Ok(t) = serde_json::from_str(&text) {
                return Ok(t);
            }
        }
        let models = self.models(attack, k)?;
        let cfg = AuditConfig {
            strategy,
            ..AuditConfig::for_steps(self.bench.spec.steps)
        };
        let mut base_cache = BaseErrorCache::new();
        let started = std::time::Instant::now();
        let tables = models
            .iter()
            .map(|m| self.bench.tables(m, &cfg, pool, &mut base_cache))
            .collect::<paia_core::Result<Vec<_>>>()?;
        eprintln!(
            "  tables {} {strategy:?}: {} cases in {:.1}s",
            set_name(attack, k),
            tables.len(),
            started.elapsed().as_secs_f64()
        );
        write(&path, serde_json::to_string(&tables).expect("serializes"))?;
        Ok(tables)
    }
}

fn sweeps(ctx: &Ctx, a: &AnalyzeArgs) -> Result<(), Failure> {
    let bench_path = ctx.path(a.bench.as_deref(), "bench/seed_0");
    let mut m = ExperimentManifest::new("analyze sweeps", a.seed);
    m.input("bench", &bench_path);
    m.resolve()?;
    let b = open_bench(&bench_path)?;
    m.seeds.insert("global".into(), b.bench.spec.seed);
    let out = out_dir(ctx, a, &format!("sweeps_seed_{}", b.bench.spec.seed))?;
    m.output("report", &out);
    let dims: Vec<SweepDim> = if a.dims.is_empty() {
        vec![
            SweepDim::Gamma,
            SweepDim::Timestep,
            SweepDim::Budget,
            SweepDim::Conditional,
            SweepDim::Quantile,
            SweepDim::Threshold,
            SweepDim::StrategyStage,
            SweepDim::ConceptCount,
            SweepDim::Attacks,
        ]
    } else {
        a.dims.clone()
    };
    m.config = json!({ "dims": format!("{dims:?}"), "spec": b.bench.spec });
    let cache = out.join("tables");
    let cfg = AuditConfig::for_steps(b.bench.spec.steps);
    let v = Variant::from_config(&cfg);
    let steps = b.bench.spec.steps;
    let clean = |strategy| b.tables(&cache, &Attack::None, 1, strategy, TABLE_POOL);

    let mut results: Vec<SweepTable> = Vec::new();
    for dim in &dims {
        let table = match dim {
            SweepDim::Gamma => gamma_sweep(&clean(PromptStrategy::CaptionProxy)?, &v)?,
            SweepDim::Timestep => timestep_sweep(&clean(PromptStrategy::CaptionProxy)?, &v)?,
            SweepDim::Budget => budget_sweep(&clean(PromptStrategy::CaptionProxy)?, &v, &BUDGETS)?,
            SweepDim::Conditional => conditional_sweep(&clean(PromptStrategy::CaptionProxy)?, &v, steps)?,
            SweepDim::Quantile => quantile_sweep(&clean(PromptStrategy::CaptionProxy)?, &v, &[0.90, 0.95, 0.99])?,
            SweepDim::Threshold => {
                let cases = clean(PromptStrategy::CaptionProxy)?;
                let pipeline = evaluate(&cases, &v)?.0;
                let rows = fixed_threshold_accuracy(&cases)?
                    .into_iter()
                    .map(|(t, tau, acc)| SweepRow {
                        label: format!("fixed tau={tau:.4}"),
                        x: t as f64,
                        metrics: paia_core::benchmark::Metrics {
                            accuracy: acc,
                            ..Default::default()
                        },
                    })
                    .chain(std::iter::once(SweepRow {
                        label: "pipeline".into(),
                        x: -1.0,
                        metrics: pipeline,
                    }))
                    .collect();
                SweepTable {
                    name: "threshold".into(),
                    x_label: "t".into(),
                    rows,
                }
            }
            SweepDim::StrategyStage => {
                let mut by = Vec::new();
                for s in [PromptStrategy::Null, PromptStrategy::Random, PromptStrategy::CaptionProxy] {
                    by.push((s, clean(s)?));
                }
                strategy_stage_sweep(&by, &v)?
            }
            SweepDim::ConceptCount => {
                let mut by = Vec::new();
                for k in 1..=3 {
                    by.push((k, b.tables(&cache, &Attack::None, k, PromptStrategy::CaptionProxy, 100)?));
                }
                concept_count_sweep(&by, &v)?
            }
            SweepDim::Attacks => {
                let mut rows = vec![SweepRow {
                    label: "none".into(),
                    x: 0.0,
                    metrics: evaluate(&clean(PromptStrategy::CaptionProxy)?, &v)?.0,
                }];
                let attacks = [
                    Attack::PromptDeviation {
                        concepts: b.bench.corpus.specs.len(),
                    },
                    Attack::Regularization { lambda: 1.0 },
                    Attack::EarlyFreezing,
                    Attack::LateFreezing,
                ];
                for (i, at) in attacks.iter().enumerate() {
                    let cases = b.tables(&cache, at, 1, PromptStrategy::CaptionProxy, 100)?;
                    rows.push(SweepRow {
                        label: at.name().into(),
                        x: (i + 1) as f64,
                        metrics: evaluate(&cases, &v)?.0,
                    });
                }
                SweepTable {
                    name: "attacks".into(),
                    x_label: "attack_index".into(),
                    rows,
                }
            }
        };
        let name = format!("{dim:?}").to_lowercase();
        write(&out.join(format!("{name}.csv")), table.to_csv())?;
        write_plot(&out.join(format!("{name}.plot.json")), &table.plot_data())?;
        println!("{name}:");
        for r in &table.rows {
            println!("  {:<28} acc {:.3}  f1 {:.3}", r.label, r.metrics.accuracy, r.metrics.f1);
        }
        results.push(table);
    }
    write(&out.join("sweeps.json"), Report::new(&m, &results).to_json())?;
    Ok(())
}
