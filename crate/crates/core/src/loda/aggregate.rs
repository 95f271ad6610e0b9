use tokensplit_tensor::{Real, Tape, Tensor, Var};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::text::EncodedPrompt;

/// Cross-attention averaged over blocks and heads, restricted to `tokens`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionAggregate<T> {
    /// `[H, W, k]`.
    pub map: Tensor<T>,
    pub tokens: Vec<usize>,
    pub t: usize,
}

impl<T: Real> AttentionAggregate<T> {
    pub fn height(&self) -> usize {
        self.map.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.map.shape()[1]
    }

    pub fn k(&self) -> usize {
        self.tokens.len()
    }

    /// Spatial map of the `j`-th selected token as `[H, W]`.
    pub fn slice(&self, j: usize) -> Tensor<f64> {
        let (h, w, k) = (self.height(), self.width(), self.k());
        let data = (0..h * w).map(|cell| self.map.data()[cell * k + j].as_f64()).collect();
        Tensor::from_vec(&[h, w], data).expect("slice shape")
    }

    pub fn slices(&self) -> Vec<Tensor<f64>> {
        (0..self.k()).map(|j| self.slice(j)).collect()
    }
}

pub(crate) fn check_tokens(tokens: &[usize], prompt: &EncodedPrompt) -> Result<()> {
    for (i, &s) in tokens.iter().enumerate() {
        if prompt.is_pad(s) {
            return Err(Error::contract(format!(
                "token index {s} is padding (prompt has {} words)",
                prompt.len()
            )));
        }
        if tokens[..i].contains(&s) {
            return Err(Error::contract(format!("token index {s} selected twice")));
        }
    }
    Ok(())
}

/// Mean over blocks and heads of the columns `tokens`.
pub fn aggregate_attention<T: Real>(
    maps: &[Vec<Tensor<T>>],
    tokens: &[usize],
    prompt: &EncodedPrompt,
    config: &ModelConfig,
    t: usize,
) -> Result<AttentionAggregate<T>> {
    check_tokens(tokens, prompt)?;
    let count = maps.iter().map(Vec::len).sum::<usize>();
    if count == 0 {
        return Err(Error::contract("no attention maps to aggregate"));
    }
    let mut acc: Option<Tensor<T>> = None;
    for m in maps.iter().flatten() {
        if m.shape() != [config.cells(), config.max_tokens] {
            return Err(Error::contract(format!(
                "attention map has shape {:?}, expected [{}, {}]",
                m.shape(),
                config.cells(),
                config.max_tokens
            )));
        }
        let cols = m.select_columns(tokens)?;
        acc = Some(match acc {
            Some(a) => a.add(&cols)?,
            None => cols,
        });
    }
    let mean = acc.expect("count > 0").scale(T::lit(1.0 / count as f64));
    Ok(AttentionAggregate {
        map: mean.reshape(&[config.height, config.width, tokens.len()])?,
        tokens: tokens.to_vec(),
        t,
    })
}

/// Same arithmetic as [`aggregate_attention`] on a tape; returns `(H·W × k)`.
pub fn aggregate_on_tape<T: Real>(tape: &mut Tape<T>, maps: &[Vec<Var>], tokens: &[usize]) -> Result<Var> {
    let count = maps.iter().map(Vec::len).sum::<usize>();
    if count == 0 {
        return Err(Error::contract("no attention maps to aggregate"));
    }
    let mut acc: Option<Var> = None;
    for &m in maps.iter().flatten() {
        let cols = tape.select_columns(m, tokens)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, cols)?,
            None => cols,
        });
    }
    Ok(tape.scale(acc.expect("count > 0"), T::lit(1.0 / count as f64)))
}
