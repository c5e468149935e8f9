//! Diagnostics: the cross-attention gradient with respect to the prompt and
//! its Lipschitz bound, [BOS] attention sensitivity across timesteps, CE
//! curves, the fixed-threshold indicator, and benchmark sweeps.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::LoraDelta;
use crate::audit::{even_grid, paired_noise, AuditConfig, AuditSession, BaseErrorCache, Branches, PromptStrategy};
use crate::benchmark::{evaluate, CaseTables, Metrics, Variant};
use crate::dataset::LabeledImage;
use crate::diffusion::model::{forward, Denoiser, ParamSource};
use crate::diffusion::prompt::encode_prompt;
use crate::diffusion::{forward_noise, NoiseSchedule};
use crate::error::{Error, Result};
use crate::numerics::{softmax_jacobian, softmax_rows, Matrix};
use crate::rng::{derive, normal_matrix, seeded};
use crate::vocab::TokenId;

/// `∂Y_i/∂p` for `Y = softmax((X·wq)(p·wk)ᵀ/√d)·(p·wv)`, as a `dv × (n·D)`
/// matrix whose column `j·D + e` is the derivative with respect to `p[j][e]`.
///
/// Chain rule: `(pW_V)ᵀ J_i` against `u = W_K W_Qᵀ X_iᵀ/√d` for the score
/// path, plus `S_ij W_V[e, ·]` for the value path.
pub fn lemma1_gradient(x: &Matrix, p: &Matrix, wq: &Matrix, wk: &Matrix, wv: &Matrix, i: usize) -> Result<Matrix> {
    if x.cols() != wq.rows() || p.cols() != wk.rows() || p.cols() != wv.rows() || wq.cols() != wk.cols() {
        return Err(Error::arg(format!(
            "gradient shapes: x {:?}, p {:?}, wq {:?}, wk {:?}, wv {:?}",
            x.shape(),
            p.shape(),
            wq.shape(),
            wk.shape(),
            wv.shape()
        )));
    }
    if i >= x.rows() || p.rows() == 0 {
        return Err(Error::arg(format!("pixel row {i} of {} (prompt rows {})", x.rows(), p.rows())));
    }
    let (n, dim, dv) = (p.rows(), p.cols(), wv.cols());
    let inv_sqrt_d = 1.0 / (wq.cols() as f64).sqrt();
    let q = Matrix::row_vector(x.row(i)).matmul(wq)?;
    let k = p.matmul(wk)?;
    let mut logits = q.matmul_t(&k)?;
    logits.scale_in_place(inv_sqrt_d);
    let s = softmax_rows(&logits);
    let jac = softmax_jacobian(s.row(0))?;
    let v = p.matmul(wv)?;
    let vj = v.t_matmul(&jac)?; // dv × n
    let u = wk.matmul_t(&q)?.scale(inv_sqrt_d); // D × 1
    Ok(Matrix::from_fn(dv, n * dim, |o, col| {
        let (j, e) = (col / dim, col % dim);
        vj.get(o, j) * u.get(e, 0) + s.get(0, j) * wv.get(e, o)
    }))
}

/// Whether the compact printed form `J_i (X W_Q W_Kᵀ/√d) p W_V + S_i W_Vᵀ`
/// closes dimensionally, and if so how far it is from the chain rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompactFormCheck {
    pub closes: bool,
    pub detail: String,
    pub max_abs_diff: Option<f64>,
}

pub fn compact_form_check(x: &Matrix, p: &Matrix, wq: &Matrix, wk: &Matrix, wv: &Matrix, i: usize) -> Result<CompactFormCheck> {
    let chain = lemma1_gradient(x, p, wq, wk, wv, i)?;
    let (n, dim) = p.shape();
    // J (n×n) · M (1×D) needs n = 1; the result (1×D) · p (n×D) needs D = n.
    if n != 1 || dim != n {
        return Ok(CompactFormCheck {
            closes: false,
            detail: format!(
                "J_i is {n}x{n}, X_iW_QW_K^T/sqrt(d) is 1x{dim} and p is {n}x{dim}: the product closes only for n = D = 1"
            ),
            max_abs_diff: None,
        });
    }
    let inv_sqrt_d = 1.0 / (wq.cols() as f64).sqrt();
    let q = Matrix::row_vector(x.row(i)).matmul(wq)?;
    let m = q.matmul_t(wk)?.scale(inv_sqrt_d);
    let k = p.matmul(wk)?;
    let s = softmax_rows(&q.matmul_t(&k)?.scale(inv_sqrt_d));
    let jac = softmax_jacobian(s.row(0))?;
    let first = jac.matmul(&m)?.matmul(p)?.matmul(wv)?; // 1 × dv
    let second = s.matmul(wv)?;
    let compact = first.add(&second)?.transpose();
    let diff = compact.sub(&chain)?.max_abs();
    Ok(CompactFormCheck {
        closes: true,
        detail: "scalar embedding; both forms evaluated".into(),
        max_abs_diff: Some(diff),
    })
}

/// Constants of the Lipschitz bound `‖∂Y_i/∂p‖ ≤ C1·p* + C2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzReport {
    pub c1: f64,
    pub c2: f64,
    pub p_star: f64,
    pub bound: f64,
    pub observed: f64,
    pub probes: usize,
    pub violations: usize,
}

impl LipschitzReport {
    pub fn holds(&self) -> bool {
        self.violations == 0 && self.observed <= self.bound + 1e-8
    }
}

/// `C1 = ½·√n·max_i ‖W_K W_Qᵀ X_iᵀ‖·‖W_V‖/√d` and `C2 = ‖W_V‖` (spectral),
/// using `‖J_i‖ ≤ ½`, `‖S_i‖ ≤ 1` and `‖p‖_F ≤ √n·p*`.
pub fn lipschitz_constants(x: &Matrix, wq: &Matrix, wk: &Matrix, wv: &Matrix, n_tokens: usize) -> Result<(f64, f64)> {
    let inv_sqrt_d = 1.0 / (wq.cols() as f64).sqrt();
    let u = wk.matmul_t(&x.matmul(wq)?)?; // D × pixels
    let max_u = (0..u.cols())
        .map(|c| u.col(c).iter().map(|v| v * v).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let c2 = wv.spectral_norm();
    let c1 = 0.5 * (n_tokens as f64).sqrt() * max_u * c2 * inv_sqrt_d;
    Ok((c1, c2))
}

/// Random probes of the bound: each draws `X`, weights and a prompt whose
/// rows have norm at most `p_star`, with some rows pushed onto the boundary.
pub fn lipschitz_probe(probes: usize, seed: u64) -> Result<LipschitzReport> {
    let mut rng = seeded(seed);
    let mut out = LipschitzReport {
        c1: 0.0,
        c2: 0.0,
        p_star: 0.0,
        bound: 0.0,
        observed: 0.0,
        probes,
        violations: 0,
    };
    let mut worst_ratio = -1.0;
    for _ in 0..probes {
        let pixels = rng.random_range(1..6);
        let n = rng.random_range(1..5);
        let dim = rng.random_range(1..6);
        let d = rng.random_range(1..5);
        let dv = rng.random_range(1..5);
        let x = normal_matrix(pixels, rng.random_range(1..5), 1.0, &mut rng);
        let wq = normal_matrix(x.cols(), d, 1.0, &mut rng);
        let wk = normal_matrix(dim, d, 1.0, &mut rng);
        let wv = normal_matrix(dim, dv, 1.0, &mut rng);
        let p_star = rng.random_range(0.5..20.0);
        let mut p = normal_matrix(n, dim, 1.0, &mut rng);
        for j in 0..n {
            let norm = p.row(j).iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            let target = if rng.random_bool(0.5) { p_star } else { p_star * rng.random_range(0.0..1.0) };
            p.row_mut(j).iter_mut().for_each(|v| *v *= target / norm);
        }
        let (c1, c2) = lipschitz_constants(&x, &wq, &wk, &wv, n)?;
        let bound = c1 * p_star + c2;
        for i in 0..pixels {
            let g = lemma1_gradient(&x, &p, &wq, &wk, &wv, i)?.spectral_norm();
            if g > bound + 1e-8 {
                out.violations += 1;
            }
            let ratio = g / bound;
            if ratio > worst_ratio {
                worst_ratio = ratio;
                out.c1 = c1;
                out.c2 = c2;
                out.p_star = p_star;
                out.bound = bound;
                out.observed = g;
            }
        }
    }
    Ok(out)
}

/// Lipschitz constants of one cross-attention block of a model on given
/// block inputs, with `p*` from the text layer norm.
pub fn model_lipschitz(params: &(impl ParamSource + ?Sized), block: usize, x: &Matrix, p: &Matrix) -> Result<LipschitzReport> {
    let layout = &params.denoiser().layout;
    let b = layout
        .blocks
        .get(block)
        .ok_or_else(|| Error::arg(format!("block {block} out of range")))?;
    let (wq, wk, wv) = (
        params.tensor(b.cross_attn.q),
        params.tensor(b.cross_attn.k),
        params.tensor(b.cross_attn.v),
    );
    let p_star = crate::diffusion::prompt_norm_bound(params);
    let (c1, c2) = lipschitz_constants(x, wq, wk, wv, p.rows())?;
    let bound = c1 * p_star + c2;
    let mut observed: f64 = 0.0;
    let mut violations = 0;
    for i in 0..x.rows() {
        let g = lemma1_gradient(x, p, wq, wk, wv, i)?.spectral_norm();
        if g > bound + 1e-8 {
            violations += 1;
        }
        observed = observed.max(g);
    }
    Ok(LipschitzReport {
        c1,
        c2,
        p_star,
        bound,
        observed,
        probes: x.rows(),
        violations,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatrixNorm {
    Spectral,
    Frobenius,
}

impl MatrixNorm {
    pub fn of(self, m: &Matrix) -> f64 {
        match self {
            MatrixNorm::Spectral => m.spectral_norm(),
            MatrixNorm::Frobenius => m.frobenius_norm(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SensitivityCurve {
    pub timesteps: Vec<usize>,
    /// Mean norm of the [BOS] attention column.
    pub norm_s: Vec<f64>,
    /// Mean `‖diag(S_i) − S_iS_iᵀ‖` over pixel rows and blocks.
    pub norm_j: Vec<f64>,
    pub samples: usize,
    pub norm: MatrixNorm,
    /// Spearman rank correlation of `norm_j` with `t`.
    pub spearman_j: f64,
    pub warnings: Vec<String>,
}

impl SensitivityCurve {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,norm_s,norm_j\n");
        for i in 0..self.timesteps.len() {
            s.push_str(&format!("{},{},{}\n", self.timesteps[i], self.norm_s[i], self.norm_j[i]));
        }
        s
    }

    pub fn plot_data(&self) -> PlotData {
        PlotData {
            title: "cross-attention sensitivity to the prompt".into(),
            x_label: "t".into(),
            y_label: "norm".into(),
            x: self.timesteps.iter().map(|t| *t as f64).collect(),
            series: vec![
                Series {
                    label: "norm_S[BOS]".into(),
                    y: self.norm_s.clone(),
                },
                Series {
                    label: "norm_J".into(),
                    y: self.norm_j.clone(),
                },
            ],
        }
    }
}

pub const MIN_SENSITIVITY_PAIRS: usize = 20;

/// Attention statistics over `(image, prompt)` pairs at each grid step,
/// using paired noise from `seed`.
pub fn sensitivity_curve(
    params: &(impl ParamSource + ?Sized),
    images: &[&LabeledImage],
    prompts: &[Vec<TokenId>],
    sched: &NoiseSchedule,
    t_grid: &[usize],
    norm: MatrixNorm,
    seed: u64,
) -> Result<SensitivityCurve> {
    if images.len() != prompts.len() {
        return Err(Error::arg("one prompt per image is required"));
    }
    if images.len() < MIN_SENSITIVITY_PAIRS {
        return Err(Error::Config(format!(
            "{} (image, prompt) pairs given, at least {MIN_SENSITIVITY_PAIRS} are needed",
            images.len()
        )));
    }
    let side = params.denoiser().arch.side;
    let embeds = prompts.iter().map(|p| encode_prompt(p, params)).collect::<Result<Vec<_>>>()?;
    let (mut norm_s, mut norm_j) = (Vec::new(), Vec::new());
    for &t in t_grid {
        let (mut sum_s, mut sum_j, mut count_s, mut count_j) = (0.0, 0.0, 0usize, 0usize);
        for (im, p) in images.iter().zip(&embeds) {
            let eps = paired_noise(seed, im.id, t, 0, side);
            let z = forward_noise(&im.image, t, &eps, sched)?;
            let (_, cache) = forward(params, &z, t, p)?;
            for s in cache.cross_attention_maps() {
                sum_s += s.col(0).iter().map(|v| v * v).sum::<f64>().sqrt();
                count_s += 1;
                for r in 0..s.rows() {
                    sum_j += norm.of(&softmax_jacobian(s.row(r))?);
                    count_j += 1;
                }
            }
        }
        norm_s.push(sum_s / count_s as f64);
        norm_j.push(sum_j / count_j as f64);
    }
    let ts: Vec<f64> = t_grid.iter().map(|t| *t as f64).collect();
    let rho = spearman(&norm_j, &ts);
    let mut warnings = Vec::new();
    if !rho.is_finite() {
        warnings.push("norm_J is constant over t; the model may be untrained".into());
    } else if rho <= 0.0 {
        warnings.push(format!("norm_J does not grow with t (rho = {rho:.3}); check that the model is trained"));
    }
    Ok(SensitivityCurve {
        timesteps: t_grid.to_vec(),
        norm_s,
        norm_j,
        samples: images.len(),
        norm,
        spearman_j: rho,
        warnings,
    })
}

/// Average ranks (1-based), ties sharing the mean rank.
pub fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|a, b| v[*a].total_cmp(&v[*b]));
    let mut out = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            out[idx[k]] = r;
        }
        i = j + 1;
    }
    out
}

pub fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

/// Spearman ρ; NaN when either input is constant.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    pearson(&ranks(a), &ranks(b))
}

pub fn mean_sd(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
    (m, var.sqrt())
}

/// Cohen's d with pooled sample standard deviation; positive when `a < b`.
pub fn cohens_d(a: &[f64], b: &[f64]) -> f64 {
    let (ma, sa) = mean_sd(a);
    let (mb, sb) = mean_sd(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let pooled = (((na - 1.0) * sa * sa + (nb - 1.0) * sb * sb) / (na + nb - 2.0).max(1.0)).sqrt();
    if pooled == 0.0 {
        if ma == mb {
            0.0
        } else {
            f64::INFINITY.copysign(mb - ma)
        }
    } else {
        (mb - ma) / pooled
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CeCurves {
    pub timesteps: Vec<usize>,
    pub target_mean: Vec<f64>,
    pub target_sd: Vec<f64>,
    pub irrelevant_mean: Vec<f64>,
    pub irrelevant_sd: Vec<f64>,
    pub cohens_d: Vec<f64>,
    /// Per-image normalized CE rows, `[image][t]`.
    pub target_values: Vec<Vec<f64>>,
    pub irrelevant_values: Vec<Vec<f64>>,
}

impl CeCurves {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,target_mean,target_sd,irrelevant_mean,irrelevant_sd,cohens_d\n");
        for i in 0..self.timesteps.len() {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                self.timesteps[i],
                self.target_mean[i],
                self.target_sd[i],
                self.irrelevant_mean[i],
                self.irrelevant_sd[i],
                self.cohens_d[i]
            ));
        }
        s
    }

    pub fn plot_data(&self) -> PlotData {
        PlotData {
            title: "calibrated error across timesteps".into(),
            x_label: "t".into(),
            y_label: "normalized CE".into(),
            x: self.timesteps.iter().map(|t| *t as f64).collect(),
            series: vec![
                Series {
                    label: "target".into(),
                    y: self.target_mean.clone(),
                },
                Series {
                    label: "irrelevant".into(),
                    y: self.irrelevant_mean.clone(),
                },
            ],
        }
    }
}

/// Normalized CE (always `W'`) per timestep for target and irrelevant
/// images, prompted with their true captions.
pub fn ce_curves(
    base: &Denoiser,
    delta: &LoraDelta,
    targets: &[&LabeledImage],
    irrelevant: &[&LabeledImage],
    sched: &NoiseSchedule,
    t_grid: &[usize],
    draws: usize,
    seed: u64,
) -> Result<CeCurves> {
    let steps = sched.steps();
    let cfg = AuditConfig {
        t_grid: t_grid.to_vec(),
        gamma: *t_grid.last().ok_or_else(|| Error::arg("empty t grid"))?,
        eps_draws: draws,
        strategy: PromptStrategy::TrueCaption,
        seed,
        ..AuditConfig::for_steps(steps)
    };
    let mut session = AuditSession::new(base, delta, sched, cfg)?;
    let mut cache = BaseErrorCache::new();
    let rows = |session: &mut AuditSession, imgs: &[&LabeledImage], cache: &mut BaseErrorCache| -> Result<Vec<Vec<f64>>> {
        session
            .error_table(imgs, Branches::ForGamma(steps), cache)?
            .iter()
            .map(|r| r.ce(true))
            .collect()
    };
    let tv = rows(&mut session, targets, &mut cache)?;
    let iv = rows(&mut session, irrelevant, &mut cache)?;
    let column = |v: &[Vec<f64>], k: usize| v.iter().map(|r| r[k]).collect::<Vec<f64>>();
    let mut out = CeCurves {
        timesteps: t_grid.to_vec(),
        target_mean: vec![],
        target_sd: vec![],
        irrelevant_mean: vec![],
        irrelevant_sd: vec![],
        cohens_d: vec![],
        target_values: vec![],
        irrelevant_values: vec![],
    };
    for k in 0..t_grid.len() {
        let (a, b) = (column(&tv, k), column(&iv, k));
        let (ma, sa) = mean_sd(&a);
        let (mb, sb) = mean_sd(&b);
        out.target_mean.push(ma);
        out.target_sd.push(sa);
        out.irrelevant_mean.push(mb);
        out.irrelevant_sd.push(sb);
        out.cohens_d.push(cohens_d(&a, &b));
    }
    out.target_values = tv;
    out.irrelevant_values = iv;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdRow {
    pub tau: f64,
    pub tpr: f64,
    pub fpr: f64,
    /// Balanced accuracy `(TPR + TNR)/2` of the indicator `L_ce < τ`.
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    pub rows: Vec<ThresholdRow>,
    pub best_tau: f64,
    pub best_accuracy: f64,
}

impl ThresholdTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("tau,tpr,fpr,accuracy\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{}\n", r.tau, r.tpr, r.fpr, r.accuracy));
        }
        s
    }
}

/// Sweeps the fixed-threshold indicator `L_ce < τ` ("target present").
/// Without an explicit grid, τ runs over every midpoint of the pooled values
/// plus both extremes.
pub fn threshold_diagnostic(target: &[f64], irrelevant: &[f64], taus: Option<&[f64]>) -> Result<ThresholdTable> {
    if target.is_empty() || irrelevant.is_empty() {
        return Err(Error::arg("threshold diagnostic needs both target and irrelevant values"));
    }
    let grid: Vec<f64> = match taus {
        Some(t) => t.to_vec(),
        None => {
            let mut all: Vec<f64> = target.iter().chain(irrelevant).copied().collect();
            all.sort_by(f64::total_cmp);
            all.dedup();
            let mut g = vec![all[0] - 1.0];
            g.extend(all.windows(2).map(|w| (w[0] + w[1]) / 2.0));
            g.push(all[all.len() - 1] + 1.0);
            g
        }
    };
    let rows: Vec<ThresholdRow> = grid
        .iter()
        .map(|&tau| {
            let tpr = target.iter().filter(|v| **v < tau).count() as f64 / target.len() as f64;
            let fpr = irrelevant.iter().filter(|v| **v < tau).count() as f64 / irrelevant.len() as f64;
            ThresholdRow {
                tau,
                tpr,
                fpr,
                accuracy: (tpr + 1.0 - fpr) / 2.0,
            }
        })
        .collect();
    let best = rows
        .iter()
        .max_by(|a, b| a.accuracy.total_cmp(&b.accuracy))
        .expect("non-empty grid");
    Ok(ThresholdTable {
        best_tau: best.tau,
        best_accuracy: best.accuracy,
        rows,
    })
}

/// Best accuracy over one global τ per grid step, where a case is judged
/// positive when its targets' mean normalized CE (`W'`) lies below τ.
pub fn fixed_threshold_accuracy(cases: &[CaseTables]) -> Result<Vec<(usize, f64, f64)>> {
    let t_grid = &cases.first().ok_or_else(|| Error::arg("no cases"))?.t_grid;
    let mut out = Vec::new();
    for (k, &t) in t_grid.iter().enumerate() {
        let stats: Vec<(bool, f64)> = cases
            .iter()
            .map(|c| {
                let vals = c.targets.iter().map(|r| r.ce(true).map(|v| v[k])).collect::<Result<Vec<_>>>()?;
                Ok((c.positive, vals.iter().sum::<f64>() / vals.len() as f64))
            })
            .collect::<Result<_>>()?;
        let mut taus: Vec<f64> = stats.iter().map(|s| s.1).collect();
        taus.sort_by(f64::total_cmp);
        let mut cands = vec![taus[0] - 1.0];
        cands.extend(taus.windows(2).map(|w| (w[0] + w[1]) / 2.0));
        cands.push(taus[taus.len() - 1] + 1.0);
        let (mut best_tau, mut best_acc) = (0.0, -1.0);
        for tau in cands {
            let acc = stats.iter().filter(|(pos, v)| (*v < tau) == *pos).count() as f64 / stats.len() as f64;
            if acc > best_acc {
                best_acc = acc;
                best_tau = tau;
            }
        }
        out.push((t, best_tau, best_acc));
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Series {
    pub label: String,
    pub y: Vec<f64>,
}

/// Tool-agnostic plot description.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlotData {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub x: Vec<f64>,
    pub series: Vec<Series>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub label: String,
    pub x: f64,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub name: String,
    pub x_label: String,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{},label,accuracy,precision,recall,f1,tp,fp,tn,fn\n", self.x_label);
        for r in &self.rows {
            let m = &r.metrics;
            s.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{}\n",
                r.x, r.label, m.accuracy, m.precision, m.recall, m.f1, m.tp, m.fp, m.tn, m.fn_
            ));
        }
        s
    }

    pub fn plot_data(&self) -> PlotData {
        PlotData {
            title: self.name.clone(),
            x_label: self.x_label.clone(),
            y_label: "accuracy".into(),
            x: self.rows.iter().map(|r| r.x).collect(),
            series: vec![
                Series {
                    label: "accuracy".into(),
                    y: self.rows.iter().map(|r| r.metrics.accuracy).collect(),
                },
                Series {
                    label: "f1".into(),
                    y: self.rows.iter().map(|r| r.metrics.f1).collect(),
                },
            ],
        }
    }

    pub fn accuracy_at(&self, x: f64) -> Option<f64> {
        self.rows.iter().find(|r| r.x == x).map(|r| r.metrics.accuracy)
    }

    pub fn best(&self) -> Option<&SweepRow> {
        self.rows.iter().max_by(|a, b| a.metrics.accuracy.total_cmp(&b.metrics.accuracy))
    }
}

fn sweep(name: &str, x_label: &str, cases: &[CaseTables], cells: Vec<(String, f64, Variant)>) -> Result<SweepTable> {
    let rows = cells
        .into_iter()
        .map(|(label, x, v)| Ok(SweepRow { label, x, metrics: evaluate(cases, &v)?.0 }))
        .collect::<Result<_>>()?;
    Ok(SweepTable {
        name: name.into(),
        x_label: x_label.into(),
        rows,
    })
}

/// Accuracy for every cutoff γ on the grid.
pub fn gamma_sweep(cases: &[CaseTables], base: &Variant) -> Result<SweepTable> {
    let grid = cases.first().ok_or_else(|| Error::arg("no cases"))?.t_grid.clone();
    let cells = grid
        .iter()
        .map(|&g| (format!("gamma={g}"), g as f64, Variant { gamma: g, ..base.clone() }))
        .collect();
    sweep("gamma", "gamma", cases, cells)
}

/// Accuracy of a detector fed a single grid step.
pub fn timestep_sweep(cases: &[CaseTables], base: &Variant) -> Result<SweepTable> {
    let grid = cases.first().ok_or_else(|| Error::arg("no cases"))?.t_grid.clone();
    let cells = grid
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            (
                format!("t={t}"),
                t as f64,
                Variant {
                    steps: Some(vec![k]),
                    ..base.clone()
                },
            )
        })
        .collect();
    sweep("timestep", "t", cases, cells)
}

pub fn budget_sweep(cases: &[CaseTables], base: &Variant, budgets: &[usize]) -> Result<SweepTable> {
    let cells = budgets
        .iter()
        .map(|&b| (format!("budget={b}"), b as f64, Variant { budget: b, ..base.clone() }))
        .collect();
    sweep("budget", "budget", cases, cells)
}

/// `γ = T/2` against never freezing (`γ = T`).
pub fn conditional_sweep(cases: &[CaseTables], base: &Variant, steps: usize) -> Result<SweepTable> {
    let cells = vec![
        ("conditional".to_string(), 1.0, Variant { gamma: steps / 2, ..base.clone() }),
        ("unconditional".to_string(), 0.0, Variant { gamma: steps, ..base.clone() }),
    ];
    sweep("conditional", "conditional", cases, cells)
}

/// Detector-threshold sensitivity.
pub fn quantile_sweep(cases: &[CaseTables], base: &Variant, quantiles: &[f64]) -> Result<SweepTable> {
    let cells = quantiles
        .iter()
        .map(|&q| {
            let mut v = base.clone();
            v.forest.quantile = q;
            (format!("quantile={q}"), q, v)
        })
        .collect();
    sweep("quantile", "quantile", cases, cells)
}

/// Early / middle / late thirds of the grid, one table row per
/// `(strategy, stage)`.
pub fn strategy_stage_sweep(by_strategy: &[(PromptStrategy, Vec<CaseTables>)], base: &Variant) -> Result<SweepTable> {
    let mut rows = Vec::new();
    for (si, (strategy, cases)) in by_strategy.iter().enumerate() {
        let n = cases.first().ok_or_else(|| Error::arg("no cases"))?.t_grid.len();
        let thirds = [(0, n / 3), (n / 3, 2 * n / 3), (2 * n / 3, n)];
        for (stage, (lo, hi)) in ["early_small_t", "middle", "late_large_t"].iter().zip(thirds) {
            let v = Variant {
                steps: Some((lo..hi).collect()),
                ..base.clone()
            };
            rows.push(SweepRow {
                label: format!("{strategy:?}/{stage}"),
                x: si as f64,
                metrics: evaluate(cases, &v)?.0,
            });
        }
        rows.push(SweepRow {
            label: format!("{strategy:?}/all"),
            x: si as f64,
            metrics: evaluate(cases, base)?.0,
        });
    }
    Ok(SweepTable {
        name: "strategy_stage".into(),
        x_label: "strategy_index".into(),
        rows,
    })
}

/// One row per concepts-per-model setting.
pub fn concept_count_sweep(by_count: &[(usize, Vec<CaseTables>)], base: &Variant) -> Result<SweepTable> {
    let rows = by_count
        .iter()
        .map(|(k, cases)| {
            Ok(SweepRow {
                label: format!("concepts={k}"),
                x: *k as f64,
                metrics: evaluate(cases, base)?.0,
            })
        })
        .collect::<Result<_>>()?;
    Ok(SweepTable {
        name: "concept_count".into(),
        x_label: "concepts_per_model".into(),
        rows,
    })
}

/// Default budgets for the limited-calibration sweep.
pub const BUDGETS: [usize; 6] = [8, 16, 32, 64, 100, 128];

/// The default eight-step grid for `steps`.
pub fn default_grid(steps: usize) -> Vec<usize> {
    even_grid(steps, 8)
}

/// Random `(image, prompt)` pairs where each prompt is the image's caption.
pub fn caption_pairs<'a>(images: &[&'a LabeledImage], n: usize, seed: u64) -> (Vec<&'a LabeledImage>, Vec<Vec<TokenId>>) {
    let mut rng = seeded(derive(seed, &[0x5E]));
    let picked: Vec<&LabeledImage> = (0..n).map(|_| images[rng.random_range(0..images.len())]).collect();
    let prompts = picked.iter().map(|im| im.caption.clone()).collect();
    (picked, prompts)
}
