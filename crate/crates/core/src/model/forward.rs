//! Forward passes: embedding, encoder blocks, ITL pipeline, MLM and task
//! heads. Each pass records into a caller-owned [`Graph`]; sequences are
//! processed unpadded (the trainer trims rows to their true length, which
//! is equivalent to masked attention for suffix padding).

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::{attn_scale, LanguageModel};
use crate::tensor::{Graph, Scalar, Var};
use crate::util::rng_for;

/// Seeded dropout stream for one optimizer step. `eval()` disables it.
pub struct DropoutCtx {
    rate: f64,
    rng: ChaCha8Rng,
}

impl DropoutCtx {
    pub fn eval() -> Self {
        DropoutCtx {
            rate: 0.0,
            rng: rng_for(0, "dropout-eval", 0),
        }
    }

    pub fn train(rate: f64, seed: u64, step: u64) -> Self {
        DropoutCtx {
            rate,
            rng: rng_for(seed, "dropout", step),
        }
    }

    fn apply<T: Scalar>(&mut self, g: &mut Graph<T>, x: Var) -> Var {
        g.dropout(x, self.rate, &mut self.rng)
    }
}

impl<T: Scalar> LanguageModel<T> {
    /// Token + positional embedding, layer norm, dropout: rows
    /// `LN(E[t_i] + P[i])`.
    pub fn forward_embed(&self, g: &mut Graph<T>, tokens: &[u32], drop: &mut DropoutCtx) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::State("empty token sequence".into()));
        }
        if tokens.len() > self.config.max_len {
            return Err(Error::State(format!(
                "sequence length {} exceeds max_len {} (truncate at encode time)",
                tokens.len(),
                self.config.max_len
            )));
        }
        let table = g.param(&self.params, "embed.token")?;
        let tok = g.embedding(table, tokens)?;
        let pos_table = g.param(&self.params, "pos.table")?;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let pos = g.select_rows(pos_table, &positions)?;
        let summed = g.add(tok, pos)?;
        let gamma = g.param(&self.params, "embed.ln.gamma")?;
        let beta = g.param(&self.params, "embed.ln.beta")?;
        let normed = g.layer_norm(summed, gamma, beta, T::from_f64(self.config.layer_norm_eps))?;
        Ok(drop.apply(g, normed))
    }

    /// One post-LN encoder block under a parameter prefix such as
    /// `encoder.3.` or `itl.in.`.
    pub fn forward_block(&self, g: &mut Graph<T>, prefix: &str, x: Var, drop: &mut DropoutCtx) -> Result<Var> {
        let p = |name: &str| format!("{prefix}{name}");
        let d = self.config.dim;
        let heads = self.config.heads;
        let dh = d / heads;
        let eps = T::from_f64(self.config.layer_norm_eps);

        let wq = g.param(&self.params, &p("attn.wq"))?;
        let bq = g.param(&self.params, &p("attn.bq"))?;
        let wk = g.param(&self.params, &p("attn.wk"))?;
        let bk = g.param(&self.params, &p("attn.bk"))?;
        let wv = g.param(&self.params, &p("attn.wv"))?;
        let bv = g.param(&self.params, &p("attn.bv"))?;
        let wo = g.param(&self.params, &p("attn.wo"))?;
        let bo = g.param(&self.params, &p("attn.bo"))?;

        let q = g.matmul(x, wq)?;
        let q = g.add_bias(q, bq)?;
        let k = g.matmul(x, wk)?;
        let k = g.add_bias(k, bk)?;
        let v = g.matmul(x, wv)?;
        let v = g.add_bias(v, bv)?;

        let mut ctx_heads = Vec::with_capacity(heads);
        for h in 0..heads {
            let (from, to) = (h * dh, (h + 1) * dh);
            let qh = g.slice_cols(q, from, to)?;
            let kh = g.slice_cols(k, from, to)?;
            let vh = g.slice_cols(v, from, to)?;
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, attn_scale::<T>(dh));
            let probs = g.softmax_rows(scores)?;
            let probs = drop.apply(g, probs);
            ctx_heads.push(g.matmul(probs, vh)?);
        }
        let ctx = g.concat_cols(&ctx_heads)?;
        let attn_out = g.matmul(ctx, wo)?;
        let attn_out = g.add_bias(attn_out, bo)?;
        let attn_out = drop.apply(g, attn_out);
        let res1 = g.add(x, attn_out)?;
        let g1 = g.param(&self.params, &p("attn_ln.gamma"))?;
        let b1 = g.param(&self.params, &p("attn_ln.beta"))?;
        let x = g.layer_norm(res1, g1, b1, eps)?;

        let w1 = g.param(&self.params, &p("ffn.w1"))?;
        let fb1 = g.param(&self.params, &p("ffn.b1"))?;
        let w2 = g.param(&self.params, &p("ffn.w2"))?;
        let fb2 = g.param(&self.params, &p("ffn.b2"))?;
        let f = g.matmul(x, w1)?;
        let f = g.add_bias(f, fb1)?;
        let f = g.gelu(f);
        let f = g.matmul(f, w2)?;
        let f = g.add_bias(f, fb2)?;
        let f = drop.apply(g, f);
        let res2 = g.add(x, f)?;
        let g2 = g.param(&self.params, &p("ffn_ln.gamma"))?;
        let b2 = g.param(&self.params, &p("ffn_ln.beta"))?;
        g.layer_norm(res2, g2, b2, eps)
    }

    /// The C-block encoder stack; identity when C = 0.
    pub fn forward_encoder(&self, g: &mut Graph<T>, h0: Var, drop: &mut DropoutCtx) -> Result<Var> {
        let mut h = h0;
        for i in 0..self.config.layers {
            h = self.forward_block(g, &format!("encoder.{i}."), h, drop)?;
        }
        Ok(h)
    }

    /// Plain pipeline without ITLs: encoder ∘ embed.
    pub fn forward_lm(&self, g: &mut Graph<T>, tokens: &[u32], drop: &mut DropoutCtx) -> Result<Var> {
        let h0 = self.forward_embed(g, tokens, drop)?;
        self.forward_encoder(g, h0, drop)
    }

    /// Full pipeline: `ITL_out(encoder(ITL_in(embed(tokens))))` when the
    /// model carries ITLs, the plain pipeline otherwise.
    pub fn forward_xpt(&self, g: &mut Graph<T>, tokens: &[u32], drop: &mut DropoutCtx) -> Result<Var> {
        if !self.config.use_itl {
            return self.forward_lm(g, tokens, drop);
        }
        if !self.has_itls() {
            return Err(Error::State("config says use_itl but ITL parameters are absent".into()));
        }
        let embedded = self.forward_embed(g, tokens, drop)?;
        let h0 = self.forward_block(g, "itl.in.", embedded, drop)?;
        let hc = self.forward_encoder(g, h0, drop)?;
        self.forward_block(g, "itl.out.", hc, drop)
    }

    /// MLM logits at the selected positions: dense → GELU → LN → tied (or
    /// separate) projection plus vocabulary bias.
    pub fn mlm_logits(&self, g: &mut Graph<T>, hidden: Var, positions: &[usize]) -> Result<Var> {
        if positions.is_empty() {
            return Err(Error::State("mlm_logits: empty position list".into()));
        }
        let x = g.select_rows(hidden, positions)?;
        let w = g.param(&self.params, "mlm.dense.w")?;
        let b = g.param(&self.params, "mlm.dense.b")?;
        let x = g.matmul(x, w)?;
        let x = g.add_bias(x, b)?;
        let x = g.gelu(x);
        let gamma = g.param(&self.params, "mlm.ln.gamma")?;
        let beta = g.param(&self.params, "mlm.ln.beta")?;
        let x = g.layer_norm(x, gamma, beta, T::from_f64(self.config.layer_norm_eps))?;
        let proj = if self.config.tie_embeddings {
            g.param(&self.params, "embed.token")?
        } else {
            g.param(&self.params, "mlm.proj")?
        };
        let logits = g.matmul_nt(x, proj)?;
        let bias = g.param(&self.params, "mlm.bias")?;
        g.add_bias(logits, bias)
    }

    /// Task-head logits at the selected positions (CLS for classification,
    /// word starts for tagging).
    pub fn head_logits(&self, g: &mut Graph<T>, hidden: Var, positions: &[usize]) -> Result<Var> {
        if !self.params.contains("head.w") {
            return Err(Error::State("no task head attached".into()));
        }
        let x = g.select_rows(hidden, positions)?;
        let w = g.param(&self.params, "head.w")?;
        let b = g.param(&self.params, "head.b")?;
        let logits = g.matmul(x, w)?;
        g.add_bias(logits, b)
    }
}
