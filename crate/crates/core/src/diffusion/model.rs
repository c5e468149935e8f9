//! The ε-prediction network.
//!
//! Input images are cut into patches, projected to `width` channels, and
//! offset by a learned positional table and a sinusoidal timestep embedding.
//! Each block applies pre-norm self-attention, pre-norm cross-attention over
//! the prompt embedding, and a pre-norm SiLU feed-forward layer, all with
//! residual connections. A final layer norm and linear head map back to
//! patch pixels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{gemm_tn_acc, Matrix};
use crate::rng::{normal_matrix, seeded};
use crate::vocab::VOCAB_SIZE;

use super::attention::{attend, attend_backward, Attention};
use super::latent::LatentImage;
use super::prompt::{encode_prompt_backward, PromptCache, PromptEmbedding};

pub const LN_EPS: f64 = 1e-5;

/// Architecture hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub side: usize,
    pub patch: usize,
    pub width: usize,
    /// Query/key/value projection width `d`.
    pub attn_dim: usize,
    pub embed_dim: usize,
    pub ff_hidden: usize,
    pub blocks: usize,
    pub vocab: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Self {
            side: 16,
            patch: 4,
            width: 64,
            attn_dim: 32,
            embed_dim: 64,
            ff_hidden: 64,
            blocks: 2,
            vocab: VOCAB_SIZE,
        }
    }
}

impl Arch {
    /// Small enough for exhaustive finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            side: 4,
            patch: 2,
            width: 8,
            attn_dim: 4,
            embed_dim: 6,
            ff_hidden: 8,
            blocks: 2,
            vocab: VOCAB_SIZE,
        }
    }

    pub fn tokens(&self) -> usize {
        (self.side / self.patch).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.side,
            self.patch,
            self.width,
            self.attn_dim,
            self.embed_dim,
            self.ff_hidden,
            self.blocks,
            self.vocab,
        ];
        if positive.contains(&0) {
            return Err(Error::arg(format!("architecture has a zero dimension: {self:?}")));
        }
        if self.side % self.patch != 0 {
            return Err(Error::arg("patch size must divide the image side"));
        }
        if self.width % 2 != 0 {
            return Err(Error::arg("width must be even for the sinusoidal embedding"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnIds {
    pub q: usize,
    pub k: usize,
    pub v: usize,
    pub o: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NormIds {
    pub scale: usize,
    pub shift: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockIds {
    pub ln1: NormIds,
    pub self_attn: AttnIds,
    pub ln2: NormIds,
    pub cross_attn: AttnIds,
    pub ln3: NormIds,
    pub ff_w1: usize,
    pub ff_b1: usize,
    pub ff_w2: usize,
    pub ff_b2: usize,
}

/// Positions of every named parameter in [`Denoiser::tensors`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub text_embed: usize,
    pub text_ln_scale: usize,
    pub text_ln_shift: usize,
    pub in_proj: usize,
    pub in_bias: usize,
    pub pos: usize,
    pub time_proj: usize,
    pub time_bias: usize,
    pub blocks: Vec<BlockIds>,
    pub out_ln: NormIds,
    pub out_proj: usize,
    pub out_bias: usize,
}

#[derive(Clone, Copy, Debug)]
enum Init {
    Normal(f64),
    Ones,
    Zeros,
}

struct Spec {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
    inits: Vec<Init>,
}

impl Spec {
    fn push(&mut self, name: String, rows: usize, cols: usize, init: Init) -> usize {
        self.names.push(name);
        self.shapes.push((rows, cols));
        self.inits.push(init);
        self.names.len() - 1
    }

    fn norm(&mut self, prefix: &str, dim: usize) -> NormIds {
        NormIds {
            scale: self.push(format!("{prefix}.scale"), 1, dim, Init::Ones),
            shift: self.push(format!("{prefix}.shift"), 1, dim, Init::Zeros),
        }
    }

    fn attn(&mut self, prefix: &str, q_in: usize, kv_in: usize, d: usize, out: usize) -> AttnIds {
        AttnIds {
            q: self.push(format!("{prefix}.wq"), q_in, d, Init::Normal(1.0 / (q_in as f64).sqrt())),
            k: self.push(format!("{prefix}.wk"), kv_in, d, Init::Normal(1.0 / (kv_in as f64).sqrt())),
            v: self.push(format!("{prefix}.wv"), kv_in, d, Init::Normal(1.0 / (kv_in as f64).sqrt())),
            o: self.push(format!("{prefix}.wo"), d, out, Init::Normal(0.5 / (d as f64).sqrt())),
        }
    }
}

fn build_spec(arch: &Arch) -> (Layout, Spec) {
    let mut s = Spec {
        names: Vec::new(),
        shapes: Vec::new(),
        inits: Vec::new(),
    };
    let (w, e, d, h, p) = (
        arch.width,
        arch.embed_dim,
        arch.attn_dim,
        arch.ff_hidden,
        arch.patch_dim(),
    );
    let text_embed = s.push("text.embed".into(), arch.vocab, e, Init::Normal(1.0));
    let text_ln = s.norm("text.ln", e);
    let in_proj = s.push("in.proj".into(), p, w, Init::Normal(1.0 / (p as f64).sqrt()));
    let in_bias = s.push("in.bias".into(), 1, w, Init::Zeros);
    let pos = s.push("pos".into(), arch.tokens(), w, Init::Normal(0.2));
    let time_proj = s.push("time.proj".into(), w, w, Init::Normal(1.0 / (w as f64).sqrt()));
    let time_bias = s.push("time.bias".into(), 1, w, Init::Zeros);
    let mut blocks = Vec::with_capacity(arch.blocks);
    for b in 0..arch.blocks {
        let pre = format!("blocks.{b}");
        let ln1 = s.norm(&format!("{pre}.ln1"), w);
        let self_attn = s.attn(&format!("{pre}.self_attn"), w, w, d, w);
        let ln2 = s.norm(&format!("{pre}.ln2"), w);
        let cross_attn = s.attn(&format!("{pre}.cross_attn"), w, e, d, w);
        let ln3 = s.norm(&format!("{pre}.ln3"), w);
        let ff_w1 = s.push(format!("{pre}.ff.w1"), w, h, Init::Normal(1.0 / (w as f64).sqrt()));
        let ff_b1 = s.push(format!("{pre}.ff.b1"), 1, h, Init::Zeros);
        let ff_w2 = s.push(format!("{pre}.ff.w2"), h, w, Init::Normal(0.5 / (h as f64).sqrt()));
        let ff_b2 = s.push(format!("{pre}.ff.b2"), 1, w, Init::Zeros);
        blocks.push(BlockIds {
            ln1,
            self_attn,
            ln2,
            cross_attn,
            ln3,
            ff_w1,
            ff_b1,
            ff_w2,
            ff_b2,
        });
    }
    let out_ln = s.norm("out.ln", w);
    let out_proj = s.push("out.proj".into(), w, p, Init::Normal(1.0 / (w as f64).sqrt()));
    let out_bias = s.push("out.bias".into(), 1, p, Init::Zeros);
    let layout = Layout {
        text_embed,
        text_ln_scale: text_ln.scale,
        text_ln_shift: text_ln.shift,
        in_proj,
        in_bias,
        pos,
        time_proj,
        time_bias,
        blocks,
        out_ln,
        out_proj,
        out_bias,
    };
    (layout, s)
}

/// Read access to a full parameter set laid out like a [`Denoiser`].
pub trait ParamSource {
    /// The network whose architecture and layout these parameters follow.
    fn denoiser(&self) -> &Denoiser;
    fn tensor(&self, id: usize) -> &Matrix;
}

#[derive(Clone, Debug, PartialEq)]
pub struct Denoiser {
    pub arch: Arch,
    pub layout: Layout,
    names: Vec<String>,
    tensors: Vec<Matrix>,
}

impl ParamSource for Denoiser {
    fn denoiser(&self) -> &Denoiser {
        self
    }

    #[inline]
    fn tensor(&self, id: usize) -> &Matrix {
        &self.tensors[id]
    }
}

impl Denoiser {
    pub fn new(arch: Arch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let (layout, spec) = build_spec(&arch);
        let mut rng = seeded(seed);
        let tensors = spec
            .shapes
            .iter()
            .zip(&spec.inits)
            .map(|(&(r, c), init)| match *init {
                Init::Normal(std) => normal_matrix(r, c, std, &mut rng),
                Init::Ones => Matrix::filled(r, c, 1.0),
                Init::Zeros => Matrix::zeros(r, c),
            })
            .collect();
        Ok(Self {
            arch,
            layout,
            names: spec.names,
            tensors,
        })
    }

    /// Rebuilds a network from named tensors; every expected name must be
    /// present with its expected shape.
    pub fn from_named(arch: Arch, mut named: Vec<(String, Matrix)>) -> Result<Self> {
        arch.validate()?;
        let (layout, spec) = build_spec(&arch);
        let mut tensors = Vec::with_capacity(spec.names.len());
        for (name, &(r, c)) in spec.names.iter().zip(&spec.shapes) {
            let pos = named.iter().position(|(n, _)| n == name).ok_or_else(|| {
                Error::Integrity(format!("tensor {name} missing for architecture {arch:?}"))
            })?;
            let (_, m) = named.swap_remove(pos);
            if m.shape() != (r, c) {
                return Err(Error::Integrity(format!(
                    "tensor {name} has shape {:?}, architecture expects {:?}",
                    m.shape(),
                    (r, c)
                )));
            }
            tensors.push(m);
        }
        if let Some((extra, _)) = named.first() {
            return Err(Error::Integrity(format!(
                "unexpected tensor {extra} for architecture {arch:?}"
            )));
        }
        Ok(Self {
            arch,
            layout,
            names: spec.names,
            tensors,
        })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Matrix] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Matrix] {
        &mut self.tensors
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn by_name(&self, name: &str) -> Option<&Matrix> {
        self.id_of(name).map(|i| &self.tensors[i])
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data().len()).sum()
    }

    /// FNV-1a over the raw bits of every tensor, in layout order.
    pub fn checksum(&self) -> u64 {
        checksum_tensors(self.tensors.iter())
    }
}

pub fn checksum_tensors<'a>(tensors: impl Iterator<Item = &'a Matrix>) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for t in tensors {
        for v in t.data() {
            for b in v.to_bits().to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
    }
    h
}

/// Collects gradients for a chosen subset of parameters.
#[derive(Clone, Debug)]
pub struct GradSink {
    wanted: Vec<bool>,
    grads: Vec<Option<Matrix>>,
}

impl GradSink {
    pub fn all(count: usize) -> Self {
        Self {
            wanted: vec![true; count],
            grads: vec![None; count],
        }
    }

    pub fn only(count: usize, ids: &[usize]) -> Self {
        let mut wanted = vec![false; count];
        for &i in ids {
            wanted[i] = true;
        }
        Self {
            wanted,
            grads: vec![None; count],
        }
    }

    #[inline]
    pub fn wants(&self, id: usize) -> bool {
        self.wanted[id]
    }

    pub fn add(&mut self, id: usize, g: Matrix) -> Result<()> {
        match &mut self.grads[id] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    pub fn get(&self, id: usize) -> Option<&Matrix> {
        self.grads[id].as_ref()
    }

    pub fn take(&mut self, id: usize) -> Option<Matrix> {
        self.grads[id].take()
    }

    pub fn into_grads(self) -> Vec<Option<Matrix>> {
        self.grads
    }
}

#[derive(Clone, Debug)]
pub struct LnCache {
    xhat: Matrix,
    inv_std: Vec<f64>,
}

pub(crate) fn layer_norm_rows(x: &Matrix, scale: &Matrix, shift: &Matrix) -> Result<(Matrix, LnCache)> {
    let d = x.cols();
    if scale.cols() != d || shift.cols() != d {
        return Err(Error::arg("layer norm parameter width mismatch"));
    }
    let mut xhat = Matrix::zeros(x.rows(), d);
    let mut out = Matrix::zeros(x.rows(), d);
    let mut inv_std = Vec::with_capacity(x.rows());
    let (g, b) = (scale.data(), shift.data());
    for r in 0..x.rows() {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        inv_std.push(inv);
        let xr = xhat.row_mut(r);
        for (o, v) in xr.iter_mut().zip(row) {
            *o = (v - mean) * inv;
        }
        let xr = xhat.row(r).to_vec();
        for (j, o) in out.row_mut(r).iter_mut().enumerate() {
            *o = xr[j] * g[j] + b[j];
        }
    }
    Ok((out, LnCache { xhat, inv_std }))
}

pub(crate) fn layer_norm_rows_backward(
    dy: &Matrix,
    cache: &LnCache,
    scale: &Matrix,
    scale_id: usize,
    shift_id: usize,
    sink: &mut GradSink,
) -> Result<Matrix> {
    let d = dy.cols();
    let g = scale.data();
    let mut dx = Matrix::zeros(dy.rows(), d);
    let mut dg = Matrix::zeros(1, d);
    let mut db = Matrix::zeros(1, d);
    let want_g = sink.wants(scale_id);
    let want_b = sink.wants(shift_id);
    let mut dxhat = vec![0.0; d];
    for r in 0..dy.rows() {
        let dyr = dy.row(r);
        let xh = cache.xhat.row(r);
        if want_g || want_b {
            for j in 0..d {
                dg.data_mut()[j] += dyr[j] * xh[j];
                db.data_mut()[j] += dyr[j];
            }
        }
        for j in 0..d {
            dxhat[j] = dyr[j] * g[j];
        }
        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
        let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
        let inv = cache.inv_std[r];
        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = inv * (dxhat[j] - mean_d - xh[j] * mean_dx);
        }
    }
    if want_g {
        sink.add(scale_id, dg)?;
    }
    if want_b {
        sink.add(shift_id, db)?;
    }
    Ok(dx)
}

/// Sinusoidal embedding of a timestep into `width` channels.
pub fn timestep_embedding(t: usize, width: usize) -> Vec<f64> {
    let half = width / 2;
    let mut out = vec![0.0; width];
    for i in 0..half {
        let freq = (-(10_000f64.ln()) * i as f64 / half as f64).exp();
        let arg = t as f64 * freq;
        out[i] = arg.sin();
        out[i + half] = arg.cos();
    }
    out
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Clone, Debug)]
struct BlockCache {
    ln1: LnCache,
    a1: Matrix,
    sa: Attention,
    ln2: LnCache,
    a2: Matrix,
    ca: Attention,
    ln3: LnCache,
    a3: Matrix,
    u: Matrix,
    g: Matrix,
}

/// Everything the backward pass needs from one forward evaluation.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    patches: Matrix,
    t_embed: Vec<f64>,
    blocks: Vec<BlockCache>,
    out_ln: LnCache,
    a_out: Matrix,
    prompt: Matrix,
}

impl ForwardCache {
    /// Cross-attention maps, one per block, pixels × prompt tokens.
    pub fn cross_attention_maps(&self) -> Vec<&Matrix> {
        self.blocks.iter().map(|b| &b.ca.scores).collect()
    }
}

fn check_inputs(arch: &Arch, z: &LatentImage, p: &PromptEmbedding) -> Result<()> {
    if z.side != arch.side || z.matrix.shape() != (arch.side * arch.side, 1) {
        return Err(Error::arg(format!(
            "latent of side {} does not fit architecture side {}",
            z.side, arch.side
        )));
    }
    if p.matrix.cols() != arch.embed_dim || p.matrix.rows() == 0 {
        return Err(Error::arg(format!(
            "prompt embedding {:?} does not fit embed_dim {}",
            p.matrix.shape(),
            arch.embed_dim
        )));
    }
    Ok(())
}

/// Runs the network, returning the predicted noise in patch layout and the
/// activations needed for [`backward`].
pub fn forward(
    params: &(impl ParamSource + ?Sized),
    z: &LatentImage,
    t: usize,
    p: &PromptEmbedding,
) -> Result<(Matrix, ForwardCache)> {
    let net = params.denoiser();
    let arch = &net.arch;
    let ids = &net.layout;
    check_inputs(arch, z, p)?;
    let patches = z.to_patches(arch.patch)?;
    let t_embed = timestep_embedding(t, arch.width);
    let mut temb = Matrix::row_vector(&t_embed).matmul(params.tensor(ids.time_proj))?;
    temb.add_assign(params.tensor(ids.time_bias))?;

    let mut h = patches.matmul(params.tensor(ids.in_proj))?;
    h.add_assign(params.tensor(ids.pos))?;
    h.add_row_broadcast(params.tensor(ids.in_bias).data())?;
    h.add_row_broadcast(temb.data())?;

    let mut blocks = Vec::with_capacity(ids.blocks.len());
    for b in &ids.blocks {
        let (a1, ln1) = layer_norm_rows(&h, params.tensor(b.ln1.scale), params.tensor(b.ln1.shift))?;
        let sa = attend(
            &a1,
            &a1,
            params.tensor(b.self_attn.q),
            params.tensor(b.self_attn.k),
            params.tensor(b.self_attn.v),
        )?;
        h.add_assign(&sa.out.matmul(params.tensor(b.self_attn.o))?)?;

        let (a2, ln2) = layer_norm_rows(&h, params.tensor(b.ln2.scale), params.tensor(b.ln2.shift))?;
        let ca = attend(
            &a2,
            &p.matrix,
            params.tensor(b.cross_attn.q),
            params.tensor(b.cross_attn.k),
            params.tensor(b.cross_attn.v),
        )?;
        h.add_assign(&ca.out.matmul(params.tensor(b.cross_attn.o))?)?;

        let (a3, ln3) = layer_norm_rows(&h, params.tensor(b.ln3.scale), params.tensor(b.ln3.shift))?;
        let mut u = a3.matmul(params.tensor(b.ff_w1))?;
        u.add_row_broadcast(params.tensor(b.ff_b1).data())?;
        let g = u.map(|x| x * sigmoid(x));
        let mut f = g.matmul(params.tensor(b.ff_w2))?;
        f.add_row_broadcast(params.tensor(b.ff_b2).data())?;
        h.add_assign(&f)?;

        blocks.push(BlockCache {
            ln1,
            a1,
            sa,
            ln2,
            a2,
            ca,
            ln3,
            a3,
            u,
            g,
        });
    }
    let (a_out, out_ln) = layer_norm_rows(
        &h,
        params.tensor(ids.out_ln.scale),
        params.tensor(ids.out_ln.shift),
    )?;
    let mut y = a_out.matmul(params.tensor(ids.out_proj))?;
    y.add_row_broadcast(params.tensor(ids.out_bias).data())?;
    y.ensure_finite("denoiser output")?;
    Ok((
        y,
        ForwardCache {
            patches,
            t_embed,
            blocks,
            out_ln,
            a_out,
            prompt: p.matrix.clone(),
        },
    ))
}

fn add_weight_grad(sink: &mut GradSink, id: usize, input: &Matrix, d_out: &Matrix) -> Result<()> {
    if sink.wants(id) {
        let mut g = Matrix::zeros(input.cols(), d_out.cols());
        gemm_tn_acc(input, d_out, &mut g);
        sink.add(id, g)?;
    }
    Ok(())
}

fn add_bias_grad(sink: &mut GradSink, id: usize, d_out: &Matrix) -> Result<()> {
    if sink.wants(id) {
        sink.add(id, d_out.sum_rows())?;
    }
    Ok(())
}

/// Backpropagates `∂L/∂ε̂` (patch layout) through the network. Parameter
/// gradients land in `sink`; the return value is `∂L/∂p`.
pub fn backward(
    params: &(impl ParamSource + ?Sized),
    cache: &ForwardCache,
    d_y: &Matrix,
    sink: &mut GradSink,
) -> Result<Matrix> {
    let net = params.denoiser();
    let ids = &net.layout;
    let mut d_prompt = Matrix::zeros(cache.prompt.rows(), cache.prompt.cols());

    add_weight_grad(sink, ids.out_proj, &cache.a_out, d_y)?;
    add_bias_grad(sink, ids.out_bias, d_y)?;
    let d_a = d_y.matmul_t(params.tensor(ids.out_proj))?;
    let mut dh = layer_norm_rows_backward(
        &d_a,
        &cache.out_ln,
        params.tensor(ids.out_ln.scale),
        ids.out_ln.scale,
        ids.out_ln.shift,
        sink,
    )?;

    for (b, bc) in ids.blocks.iter().zip(&cache.blocks).rev() {
        // feed-forward
        add_weight_grad(sink, b.ff_w2, &bc.g, &dh)?;
        add_bias_grad(sink, b.ff_b2, &dh)?;
        let mut d_u = dh.matmul_t(params.tensor(b.ff_w2))?;
        for (d, &u) in d_u.data_mut().iter_mut().zip(bc.u.data()) {
            let s = sigmoid(u);
            *d *= s * (1.0 + u * (1.0 - s));
        }
        add_weight_grad(sink, b.ff_w1, &bc.a3, &d_u)?;
        add_bias_grad(sink, b.ff_b1, &d_u)?;
        let d_a3 = d_u.matmul_t(params.tensor(b.ff_w1))?;
        dh.add_assign(&layer_norm_rows_backward(
            &d_a3,
            &bc.ln3,
            params.tensor(b.ln3.scale),
            b.ln3.scale,
            b.ln3.shift,
            sink,
        )?)?;

        // cross-attention
        add_weight_grad(sink, b.cross_attn.o, &bc.ca.out, &dh)?;
        let d_o = dh.matmul_t(params.tensor(b.cross_attn.o))?;
        let want = sink.wants(b.cross_attn.q) || sink.wants(b.cross_attn.k) || sink.wants(b.cross_attn.v);
        let g = attend_backward(
            &bc.a2,
            &cache.prompt,
            params.tensor(b.cross_attn.q),
            params.tensor(b.cross_attn.k),
            params.tensor(b.cross_attn.v),
            &bc.ca,
            &d_o,
            want,
        )?;
        if want {
            for (id, gm) in [
                (b.cross_attn.q, g.d_wq),
                (b.cross_attn.k, g.d_wk),
                (b.cross_attn.v, g.d_wv),
            ] {
                if sink.wants(id) {
                    sink.add(id, gm.expect("requested"))?;
                }
            }
        }
        d_prompt.add_assign(&g.d_ctx)?;
        dh.add_assign(&layer_norm_rows_backward(
            &g.d_x,
            &bc.ln2,
            params.tensor(b.ln2.scale),
            b.ln2.scale,
            b.ln2.shift,
            sink,
        )?)?;

        // self-attention
        add_weight_grad(sink, b.self_attn.o, &bc.sa.out, &dh)?;
        let d_o = dh.matmul_t(params.tensor(b.self_attn.o))?;
        let want = sink.wants(b.self_attn.q) || sink.wants(b.self_attn.k) || sink.wants(b.self_attn.v);
        let g = attend_backward(
            &bc.a1,
            &bc.a1,
            params.tensor(b.self_attn.q),
            params.tensor(b.self_attn.k),
            params.tensor(b.self_attn.v),
            &bc.sa,
            &d_o,
            want,
        )?;
        if want {
            for (id, gm) in [
                (b.self_attn.q, g.d_wq),
                (b.self_attn.k, g.d_wk),
                (b.self_attn.v, g.d_wv),
            ] {
                if sink.wants(id) {
                    sink.add(id, gm.expect("requested"))?;
                }
            }
        }
        let mut d_a1 = g.d_x;
        d_a1.add_assign(&g.d_ctx)?;
        dh.add_assign(&layer_norm_rows_backward(
            &d_a1,
            &bc.ln1,
            params.tensor(b.ln1.scale),
            b.ln1.scale,
            b.ln1.shift,
            sink,
        )?)?;
    }

    add_weight_grad(sink, ids.in_proj, &cache.patches, &dh)?;
    add_bias_grad(sink, ids.in_bias, &dh)?;
    if sink.wants(ids.pos) {
        sink.add(ids.pos, dh.clone())?;
    }
    if sink.wants(ids.time_proj) || sink.wants(ids.time_bias) {
        let d_temb = dh.sum_rows();
        add_weight_grad(sink, ids.time_proj, &Matrix::row_vector(&cache.t_embed), &d_temb)?;
        if sink.wants(ids.time_bias) {
            sink.add(ids.time_bias, d_temb)?;
        }
    }
    Ok(d_prompt)
}

/// Backward through the text encoder as well, for training the embedding table.
pub(crate) fn backward_with_prompt(
    params: &(impl ParamSource + ?Sized),
    cache: &ForwardCache,
    prompt: &PromptEmbedding,
    prompt_cache: &PromptCache,
    d_y: &Matrix,
    sink: &mut GradSink,
) -> Result<()> {
    let d_p = backward(params, cache, d_y, sink)?;
    encode_prompt_backward(prompt, prompt_cache, &d_p, params, sink)
}

/// Predicted noise `ε_W(z_t, p)`.
pub fn denoise_predict(
    params: &(impl ParamSource + ?Sized),
    z: &LatentImage,
    t: usize,
    p: &PromptEmbedding,
) -> Result<LatentImage> {
    let arch = params.denoiser().arch;
    let (y, _) = forward(params, z, t, p)?;
    LatentImage::from_patches(&y, arch.side, arch.patch)
}

/// Classifier-free guidance: `ε(z,∅) + η(ε(z,p) − ε(z,∅))`.
pub fn cfg_predict(
    params: &(impl ParamSource + ?Sized),
    z: &LatentImage,
    t: usize,
    p: &PromptEmbedding,
    null: &PromptEmbedding,
    eta: f64,
) -> Result<LatentImage> {
    if !(eta >= 1.0) {
        return Err(Error::arg(format!("guidance scale {eta} must be >= 1")));
    }
    let cond = denoise_predict(params, z, t, p)?;
    if eta == 1.0 {
        return Ok(cond);
    }
    let uncond = denoise_predict(params, z, t, null)?;
    let mut out = uncond.clone();
    for ((o, c), u) in out
        .pixels_mut()
        .iter_mut()
        .zip(cond.pixels())
        .zip(uncond.pixels())
    {
        *o = u + eta * (c - u);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::prompt::{encode_prompt, encode_prompt_cached};
    use crate::numerics::{finite_diff_grad, GradCheckReport, FD_STEP};
    use crate::rng::seeded;
    use rand::Rng;

    fn tiny_input(seed: u64) -> (Denoiser, LatentImage, Vec<u32>, Matrix) {
        let net = Denoiser::new(Arch::tiny(), seed).unwrap();
        let mut rng = seeded(seed ^ 0xabc);
        let z = LatentImage::new(4, (0..16).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let probe = normal_matrix(4, 4, 1.0, &mut rng);
        (net, z, vec![5, 30, 41], probe)
    }

    fn probe_loss(net: &Denoiser, z: &LatentImage, toks: &[u32], probe: &Matrix) -> f64 {
        let p = encode_prompt(toks, net).unwrap();
        let (y, _) = forward(net, z, 7, &p).unwrap();
        y.data().iter().zip(probe.data()).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn full_backward_matches_finite_differences() {
        let (net, z, toks, probe) = tiny_input(11);
        let (p, pc) = encode_prompt_cached(&toks, &net).unwrap();
        let (_, cache) = forward(&net, &z, 7, &p).unwrap();
        let mut sink = GradSink::all(net.tensors().len());
        backward_with_prompt(&net, &cache, &p, &pc, &probe, &mut sink).unwrap();
        let mut worst: Option<GradCheckReport> = None;
        for id in 0..net.tensors().len() {
            let numeric = finite_diff_grad(
                |m| {
                    let mut n = net.clone();
                    n.tensors[id] = m.clone();
                    probe_loss(&n, &z, &toks, &probe)
                },
                &net.tensors()[id],
                FD_STEP,
            )
            .unwrap();
            let analytic = sink
                .get(id)
                .cloned()
                .unwrap_or_else(|| Matrix::zeros(numeric.rows(), numeric.cols()));
            let rep = GradCheckReport::compare(&analytic, &numeric).unwrap();
            assert!(rep.max_rel_err < 1e-4, "{}: {rep:?}", net.names()[id]);
            worst = Some(worst.map_or(rep, |w| w.merge(rep)));
        }
        assert!(worst.unwrap().probe_count > 1000);
    }

    #[test]
    fn partial_sink_matches_full() {
        let (net, z, toks, probe) = tiny_input(12);
        let p = encode_prompt(&toks, &net).unwrap();
        let (_, cache) = forward(&net, &z, 3, &p).unwrap();
        let mut full = GradSink::all(net.tensors().len());
        backward(&net, &cache, &probe, &mut full).unwrap();
        let q = net.layout.blocks[1].cross_attn.q;
        let mut part = GradSink::only(net.tensors().len(), &[q]);
        backward(&net, &cache, &probe, &mut part).unwrap();
        assert_eq!(part.get(q), full.get(q));
        assert!(part.get(net.layout.in_proj).is_none());
    }

    #[test]
    fn names_unique_and_cross_attention_exposed() {
        let net = Denoiser::new(Arch::default(), 0).unwrap();
        let mut names = net.names().to_vec();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), net.names().len());
        for b in 0..2 {
            for w in ["wq", "wk", "wv", "wo"] {
                assert!(net.id_of(&format!("blocks.{b}.cross_attn.{w}")).is_some());
            }
        }
    }

    #[test]
    fn prediction_is_deterministic_and_shape_preserving() {
        let (net, z, toks, _) = tiny_input(13);
        let p = encode_prompt(&toks, &net).unwrap();
        for t in [1, 5, 10] {
            let a = denoise_predict(&net, &z, t, &p).unwrap();
            let b = denoise_predict(&net, &z, t, &p).unwrap();
            assert_eq!(a, b);
            assert!(a.same_shape(&z));
        }
        let wrong = LatentImage::zeros(6);
        assert!(denoise_predict(&net, &wrong, 1, &p).is_err());
    }

    #[test]
    fn guidance_identities() {
        let (net, z, toks, _) = tiny_input(14);
        let p = encode_prompt(&toks, &net).unwrap();
        let null = encode_prompt(&[], &net).unwrap();
        let cond = denoise_predict(&net, &z, 4, &p).unwrap();
        assert_eq!(cfg_predict(&net, &z, 4, &p, &null, 1.0).unwrap(), cond);
        let un = denoise_predict(&net, &z, 4, &null).unwrap();
        assert_eq!(cfg_predict(&net, &z, 4, &null, &null, 3.5).unwrap(), un);
        assert!(cfg_predict(&net, &z, 4, &p, &null, 0.9).is_err());
        let o1 = cfg_predict(&net, &z, 4, &p, &null, 1.0).unwrap();
        let o2 = cfg_predict(&net, &z, 4, &p, &null, 2.0).unwrap();
        for eta in [1.5, 3.0, 7.25] {
            let oe = cfg_predict(&net, &z, 4, &p, &null, eta).unwrap();
            for i in 0..16 {
                let lhs = oe.pixels()[i] - o1.pixels()[i];
                let rhs = (eta - 1.0) * (o2.pixels()[i] - o1.pixels()[i]);
                assert!((lhs - rhs).abs() < 1e-10);
            }
            // eta = 2 by hand: u + 2(c - u)
            assert!((o2.pixels()[0] - (un.pixels()[0] + 2.0 * (cond.pixels()[0] - un.pixels()[0]))).abs() < 1e-12);
        }
    }

    #[test]
    fn from_named_rejects_mismatch() {
        let net = Denoiser::new(Arch::tiny(), 1).unwrap();
        let mut named: Vec<_> = net.names().iter().cloned().zip(net.tensors().iter().cloned()).collect();
        let back = Denoiser::from_named(Arch::tiny(), named.clone()).unwrap();
        assert_eq!(back.checksum(), net.checksum());
        named[3].1 = Matrix::zeros(1, 1);
        assert!(matches!(Denoiser::from_named(Arch::tiny(), named), Err(Error::Integrity(_))));
    }
}
