//! Single-head scaled dot-product attention with its hand-derived backward
//! pass. Used for both the self-attention (context = queries) and the
//! text cross-attention (context = prompt embedding) of every block.

use crate::error::{Error, Result};
use crate::numerics::{dot, softmax_in_place, Matrix};

use super::prompt::PromptEmbedding;

/// Intermediate values of one attention evaluation.
#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// Row-stochastic attention map, queries × keys.
    pub scores: Matrix,
    /// `scores · v`.
    pub out: Matrix,
}

pub struct AttentionGrads {
    pub d_x: Matrix,
    pub d_ctx: Matrix,
    pub d_wq: Option<Matrix>,
    pub d_wk: Option<Matrix>,
    pub d_wv: Option<Matrix>,
}

fn check_shapes(x: &Matrix, ctx: &Matrix, wq: &Matrix, wk: &Matrix, wv: &Matrix) -> Result<()> {
    if x.cols() != wq.rows() || ctx.cols() != wk.rows() || ctx.cols() != wv.rows() {
        return Err(Error::arg(format!(
            "attention input widths: x {:?}, ctx {:?}, wq {:?}, wk {:?}, wv {:?}",
            x.shape(),
            ctx.shape(),
            wq.shape(),
            wk.shape(),
            wv.shape()
        )));
    }
    if wq.cols() != wk.cols() || wq.cols() == 0 {
        return Err(Error::arg("query/key projection widths differ"));
    }
    if ctx.rows() == 0 {
        return Err(Error::arg("attention context has no rows"));
    }
    Ok(())
}

pub fn attend(x: &Matrix, ctx: &Matrix, wq: &Matrix, wk: &Matrix, wv: &Matrix) -> Result<Attention> {
    check_shapes(x, ctx, wq, wk, wv)?;
    let q = x.matmul(wq)?;
    let k = ctx.matmul(wk)?;
    let v = ctx.matmul(wv)?;
    let inv_sqrt_d = 1.0 / (wq.cols() as f64).sqrt();
    let mut scores = q.matmul_t(&k)?;
    for r in 0..scores.rows() {
        let row = scores.row_mut(r);
        row.iter_mut().for_each(|a| *a *= inv_sqrt_d);
        softmax_in_place(row);
    }
    let out = scores.matmul(&v)?;
    Ok(Attention {
        q,
        k,
        v,
        scores,
        out,
    })
}

/// Backward pass given `d_out = ∂L/∂(scores · v)`.
pub fn attend_backward(
    x: &Matrix,
    ctx: &Matrix,
    wq: &Matrix,
    wk: &Matrix,
    wv: &Matrix,
    fwd: &Attention,
    d_out: &Matrix,
    want_weights: bool,
) -> Result<AttentionGrads> {
    let inv_sqrt_d = 1.0 / (wq.cols() as f64).sqrt();
    let s = &fwd.scores;
    let mut d_a = d_out.matmul_t(&fwd.v)?; // ∂L/∂S
    let d_v = s.t_matmul(d_out)?;
    for r in 0..d_a.rows() {
        let srow = s.row(r);
        let drow = d_a.row_mut(r);
        let inner = dot(drow, srow);
        for (d, sv) in drow.iter_mut().zip(srow) {
            *d = sv * (*d - inner) * inv_sqrt_d;
        }
    }
    let d_q = d_a.matmul(&fwd.k)?;
    let d_k = d_a.t_matmul(&fwd.q)?;
    let d_x = d_q.matmul_t(wq)?;
    let mut d_ctx = d_k.matmul_t(wk)?;
    d_ctx.add_assign(&d_v.matmul_t(wv)?)?;
    let (d_wq, d_wk, d_wv) = if want_weights {
        (
            Some(x.t_matmul(&d_q)?),
            Some(ctx.t_matmul(&d_k)?),
            Some(ctx.t_matmul(&d_v)?),
        )
    } else {
        (None, None, None)
    };
    Ok(AttentionGrads {
        d_x,
        d_ctx,
        d_wq,
        d_wk,
        d_wv,
    })
}

/// Cross-attention of image features `x` over a prompt embedding:
/// returns `(Y, S)` with `S = softmax((x·wq)(p·wk)ᵀ/√d)` and `Y = S(p·wv)`.
pub fn cross_attention(
    x: &Matrix,
    p: &PromptEmbedding,
    wq: &Matrix,
    wk: &Matrix,
    wv: &Matrix,
) -> Result<(Matrix, Matrix)> {
    let a = attend(x, &p.matrix, wq, wk, wv)?;
    Ok((a.out, a.scores))
}
