use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::vocab::{TokenId, BOS, NULL};

use super::model::{layer_norm_rows, layer_norm_rows_backward, GradSink, LnCache, ParamSource};

/// Layer-normalized token embeddings fed to every cross-attention block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptEmbedding {
    /// Encoded token sequence: `[BOS, ..]` for real prompts, `[NULL]` for ∅.
    pub tokens: Vec<TokenId>,
    pub matrix: Matrix,
}

impl PromptEmbedding {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn is_null(&self) -> bool {
        self.tokens == [NULL]
    }
}

pub(crate) struct PromptCache {
    pub ln: LnCache,
}

/// Token sequence actually embedded for a caption.
pub fn framed_tokens(tokens: &[TokenId]) -> Vec<TokenId> {
    if tokens.is_empty() {
        vec![NULL]
    } else {
        std::iter::once(BOS).chain(tokens.iter().copied()).collect()
    }
}

pub fn encode_prompt(tokens: &[TokenId], params: &(impl ParamSource + ?Sized)) -> Result<PromptEmbedding> {
    encode_prompt_cached(tokens, params).map(|(p, _)| p)
}

pub(crate) fn encode_prompt_cached(
    tokens: &[TokenId],
    params: &(impl ParamSource + ?Sized),
) -> Result<(PromptEmbedding, PromptCache)> {
    let net = params.denoiser();
    let ids = &net.layout;
    let table = params.tensor(ids.text_embed);
    let framed = framed_tokens(tokens);
    if let Some(bad) = framed.iter().find(|t| **t as usize >= table.rows()) {
        return Err(Error::arg(format!(
            "token {bad} outside vocabulary of {}",
            table.rows()
        )));
    }
    let raw = Matrix::from_fn(framed.len(), table.cols(), |i, j| table.get(framed[i] as usize, j));
    let (matrix, ln) = layer_norm_rows(
        &raw,
        params.tensor(ids.text_ln_scale),
        params.tensor(ids.text_ln_shift),
    )?;
    Ok((
        PromptEmbedding {
            tokens: framed,
            matrix,
        },
        PromptCache { ln },
    ))
}

/// Propagates `∂L/∂p` into the embedding table and the text layer norm.
pub(crate) fn encode_prompt_backward(
    prompt: &PromptEmbedding,
    cache: &PromptCache,
    d_p: &Matrix,
    params: &(impl ParamSource + ?Sized),
    sink: &mut GradSink,
) -> Result<()> {
    let ids = &params.denoiser().layout;
    let wants_table = sink.wants(ids.text_embed);
    if !wants_table && !sink.wants(ids.text_ln_scale) && !sink.wants(ids.text_ln_shift) {
        return Ok(());
    }
    let d_raw = layer_norm_rows_backward(
        d_p,
        &cache.ln,
        params.tensor(ids.text_ln_scale),
        ids.text_ln_scale,
        ids.text_ln_shift,
        sink,
    )?;
    if wants_table {
        let table = params.tensor(ids.text_embed);
        let mut d_table = Matrix::zeros(table.rows(), table.cols());
        for (i, &tok) in prompt.tokens.iter().enumerate() {
            for (a, b) in d_table.row_mut(tok as usize).iter_mut().zip(d_raw.row(i)) {
                *a += b;
            }
        }
        sink.add(ids.text_embed, d_table)?;
    }
    Ok(())
}

/// Upper bound on every embedding row norm: `√D·max|scale| + ‖shift‖`.
pub fn prompt_norm_bound(params: &(impl ParamSource + ?Sized)) -> f64 {
    let ids = &params.denoiser().layout;
    let scale = params.tensor(ids.text_ln_scale);
    let shift = params.tensor(ids.text_ln_shift);
    (scale.cols() as f64).sqrt() * scale.max_abs() + shift.frobenius_norm()
}
