use rand::Rng;

use super::{join, FeedForward, LayerNorm, Linear, Module};
use crate::error::{Error, Result};
use crate::numerics::{Float, Tape, Tensor, Var};

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub n_heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub w_q: Linear,
    pub w_k: Linear,
    pub w_v: Linear,
    pub w_o: Linear,
    /// Dropout on the attention weights; only active on dropout-enabled tapes.
    pub attn_dropout: f64,
}

/// Result of one attention call. `q` and `k` are the projected (all-head)
/// queries and keys; `weights` holds one `[n_q×n_kv]` matrix per head.
pub struct AttentionOutput {
    pub out: Var,
    pub q: Var,
    pub k: Var,
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rng: &mut impl Rng,
        d_query: usize,
        d_source: usize,
        n_heads: usize,
        d_k: usize,
        d_v: usize,
        d_out: usize,
        bias: bool,
    ) -> Self {
        Self {
            n_heads,
            d_k,
            d_v,
            w_q: Linear::new(rng, d_query, n_heads * d_k, bias),
            w_k: Linear::new(rng, d_source, n_heads * d_k, bias),
            w_v: Linear::new(rng, d_source, n_heads * d_v, bias),
            w_o: Linear::new(rng, n_heads * d_v, d_out, bias),
            attn_dropout: 0.0,
        }
    }

    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        query: Var,
        source: Var,
    ) -> Result<AttentionOutput> {
        let (qd, sd) = (tape.shape(query)[1], tape.shape(source)[1]);
        if qd != self.w_q.d_in() || sd != self.w_k.d_in() {
            return Err(Error::Input(format!(
                "attention expects query width {} and source width {}, got {qd} and {sd}",
                self.w_q.d_in(),
                self.w_k.d_in()
            )));
        }
        let q = self.w_q.forward(tape, query)?;
        let k = self.w_k.forward(tape, source)?;
        let v = self.w_v.forward(tape, source)?;
        let scale = T::cst(1.0 / (self.d_k as f64).sqrt());
        let mut heads = Vec::with_capacity(self.n_heads);
        let mut weights = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let qh = tape.slice_cols(q, h * self.d_k, self.d_k)?;
            let kh = tape.slice_cols(k, h * self.d_k, self.d_k)?;
            let vh = tape.slice_cols(v, h * self.d_v, self.d_v)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let scores = tape.scale(scores, scale);
            let w = tape.softmax_rows(scores)?;
            weights.push(w);
            let w = tape.dropout(w, self.attn_dropout);
            heads.push(tape.matmul(w, vh)?);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        let out = self.w_o.forward(tape, cat)?;
        Ok(AttentionOutput { out, q, k, weights })
    }
}

impl Module for MultiHeadAttention {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.w_q.visit(&join(prefix, "w_q"), out);
        self.w_k.visit(&join(prefix, "w_k"), out);
        self.w_v.visit(&join(prefix, "w_v"), out);
        self.w_o.visit(&join(prefix, "w_o"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.w_q.visit_mut(&join(prefix, "w_q"), out);
        self.w_k.visit_mut(&join(prefix, "w_k"), out);
        self.w_v.visit_mut(&join(prefix, "w_v"), out);
        self.w_o.visit_mut(&join(prefix, "w_o"), out);
    }
}

/// ViT encoder block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Clone, Debug)]
pub struct PreNormBlock {
    pub ln1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ln2: LayerNorm,
    pub mlp: FeedForward,
}

impl PreNormBlock {
    pub fn new(rng: &mut impl Rng, dim: usize, n_heads: usize, mlp_ratio: usize) -> Self {
        let d_head = dim / n_heads;
        Self {
            ln1: LayerNorm::new(dim),
            attn: MultiHeadAttention::new(rng, dim, dim, n_heads, d_head, d_head, dim, true),
            ln2: LayerNorm::new(dim),
            mlp: FeedForward::new(rng, dim, dim * mlp_ratio),
        }
    }

    pub fn forward<T: Float>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let h = self.ln1.forward(tape, x)?;
        let a = self.attn.forward(tape, h, h)?.out;
        let x = tape.add(x, a)?;
        let h = self.ln2.forward(tape, x)?;
        let m = self.mlp.forward(tape, h)?;
        tape.add(x, m)
    }
}

impl Module for PreNormBlock {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.ln1.visit(&join(prefix, "ln1"), out);
        self.attn.visit(&join(prefix, "attn"), out);
        self.ln2.visit(&join(prefix, "ln2"), out);
        self.mlp.visit(&join(prefix, "mlp"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.ln1.visit_mut(&join(prefix, "ln1"), out);
        self.attn.visit_mut(&join(prefix, "attn"), out);
        self.ln2.visit_mut(&join(prefix, "ln2"), out);
        self.mlp.visit_mut(&join(prefix, "mlp"), out);
    }
}

/// Transformer block with add & norm after each sublayer:
/// `h = ln(r(query) + attn(query, source))`, `out = ln(h + ffn(h))`, where
/// `r` is the identity when widths agree and a learned projection otherwise.
#[derive(Clone, Debug)]
pub struct PostNormBlock {
    pub attn: MultiHeadAttention,
    pub residual: Option<Linear>,
    pub ln1: LayerNorm,
    pub ffn: FeedForward,
    pub ln2: LayerNorm,
    /// Dropout on the two sublayer outputs before each residual add.
    pub resid_dropout: f64,
}

impl PostNormBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rng: &mut impl Rng,
        d_query: usize,
        d_source: usize,
        n_heads: usize,
        d_k: usize,
        d_v: usize,
        d_ff: usize,
        bias: bool,
    ) -> Self {
        Self {
            attn: MultiHeadAttention::new(rng, d_query, d_source, n_heads, d_k, d_v, d_v, bias),
            residual: (d_query != d_v).then(|| Linear::new(rng, d_query, d_v, false)),
            ln1: LayerNorm::new(d_v),
            ffn: FeedForward::new(rng, d_v, d_ff),
            ln2: LayerNorm::new(d_v),
            resid_dropout: 0.0,
        }
    }

    pub fn forward<T: Float>(
        &self,
        tape: &mut Tape<T>,
        query: Var,
        source: Var,
    ) -> Result<(Var, AttentionOutput)> {
        let att = self.attn.forward(tape, query, source)?;
        let r = match &self.residual {
            Some(p) => p.forward(tape, query)?,
            None => query,
        };
        let a = tape.dropout(att.out, self.resid_dropout);
        let h = tape.add(r, a)?;
        let h = self.ln1.forward(tape, h)?;
        let f = self.ffn.forward(tape, h)?;
        let f = tape.dropout(f, self.resid_dropout);
        let o = tape.add(h, f)?;
        Ok((self.ln2.forward(tape, o)?, att))
    }

    pub fn set_dropout(&mut self, attn: f64, resid: f64) {
        self.attn.attn_dropout = attn;
        self.resid_dropout = resid;
    }
}

impl Module for PostNormBlock {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.attn.visit(&join(prefix, "attn"), out);
        if let Some(r) = &self.residual {
            r.visit(&join(prefix, "residual"), out);
        }
        self.ln1.visit(&join(prefix, "ln1"), out);
        self.ffn.visit(&join(prefix, "ffn"), out);
        self.ln2.visit(&join(prefix, "ln2"), out);
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.attn.visit_mut(&join(prefix, "attn"), out);
        if let Some(r) = &mut self.residual {
            r.visit_mut(&join(prefix, "residual"), out);
        }
        self.ln1.visit_mut(&join(prefix, "ln1"), out);
        self.ffn.visit_mut(&join(prefix, "ffn"), out);
        self.ln2.visit_mut(&join(prefix, "ln2"), out);
    }
}
