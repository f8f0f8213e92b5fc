use std::ops::Range;

use rand::Rng;

use super::linalg::{
    gelu, gelu_grad, gemm, layer_norm, layer_norm_backward, linear, linear_backward, log_sum_exp, softmax_in_place,
    LnCache, Scalar, View,
};
use super::{ModelCheckpoint, ModelConfig, ParamLayout};
use crate::error::{Error, Result};
use crate::vocab::PAD_ID;

/// Target placeholder at positions that carry no loss.
pub const IGNORE_INDEX: u32 = u32::MAX;

/// Right-padded token ids, `batch_size × seq_len`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub ids: Vec<u32>,
    /// Unpadded length of every sequence; keys past it are masked out.
    pub lengths: Vec<usize>,
    pub seq_len: usize,
}

impl Batch {
    pub fn new(ids: Vec<u32>, lengths: Vec<usize>, seq_len: usize) -> Result<Self> {
        if ids.len() != lengths.len() * seq_len {
            return Err(Error::invalid("batch ids do not match batch_size × seq_len"));
        }
        if lengths.iter().any(|&l| l == 0 || l > seq_len) {
            return Err(Error::invalid("sequence lengths must lie in 1..=seq_len"));
        }
        Ok(Self { ids, lengths, seq_len })
    }

    pub fn from_sequences(seqs: &[Vec<u32>]) -> Result<Self> {
        let seq_len = seqs.iter().map(Vec::len).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len() * seq_len);
        for s in seqs {
            ids.extend_from_slice(s);
            ids.resize(ids.len() + seq_len - s.len(), PAD_ID);
        }
        Self::new(ids, seqs.iter().map(Vec::len).collect(), seq_len)
    }

    pub fn batch_size(&self) -> usize {
        self.lengths.len()
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn is_padding(&self, row: usize) -> bool {
        row % self.seq_len >= self.lengths[row / self.seq_len]
    }
}

#[derive(Clone, Debug)]
pub struct LayerCache<T> {
    ln1: LnCache<T>,
    xn1: Vec<T>,
    qkv: Vec<T>,
    /// Attention weights, `[batch, head, query, key]` with row stride
    /// `seq_len`; only the first `length` keys of each row are meaningful.
    pub probs: Vec<T>,
    ctx: Vec<T>,
    attn_mask: Option<Vec<T>>,
    ln2: LnCache<T>,
    xn2: Vec<T>,
    ff_pre: Vec<T>,
    ff_act: Vec<T>,
    ff_mask: Option<Vec<T>>,
}

#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    pub layers: Vec<LayerCache<T>>,
    final_ln: LnCache<T>,
    /// Final layer-norm output, `rows × hidden_dim`.
    pub hidden: Vec<T>,
}

/// Full-vocabulary logits, `batch × seq × vocab`.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits {
    pub data: Vec<f32>,
    pub batch_size: usize,
    pub seq_len: usize,
    pub vocab: usize,
}

impl Logits {
    pub fn shape(&self) -> (usize, usize, usize) {
        (self.batch_size, self.seq_len, self.vocab)
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.data[r * self.vocab..(r + 1) * self.vocab]
    }
}

/// Borrowed parameters with the forward and backward passes.
pub struct Encoder<'a, T> {
    cfg: &'a ModelConfig,
    layout: &'a ParamLayout,
    params: &'a [T],
}

/// Two disjoint mutable windows, `a` strictly before `b`.
fn pair_mut<'g, T>(buf: &'g mut [T], a: &Range<usize>, b: &Range<usize>) -> (&'g mut [T], &'g mut [T]) {
    assert!(a.end <= b.start);
    let (lo, hi) = buf.split_at_mut(b.start);
    (&mut lo[a.clone()], &mut hi[..b.len()])
}

fn dropout_mask<T: Scalar, R: Rng + ?Sized>(rng: &mut R, n: usize, rate: f64) -> Vec<T> {
    let keep = T::of(1.0 / (1.0 - rate));
    (0..n)
        .map(|_| if rng.random::<f64>() < rate { T::zero() } else { keep })
        .collect()
}

impl<'a, T: Scalar> Encoder<'a, T> {
    pub fn new(cfg: &'a ModelConfig, layout: &'a ParamLayout, params: &'a [T]) -> Self {
        assert_eq!(params.len(), layout.total(), "parameter buffer does not match layout");
        Self { cfg, layout, params }
    }

    fn p(&self, r: &Range<usize>) -> &'a [T] {
        &self.params[r.clone()]
    }

    pub fn config(&self) -> &ModelConfig {
        self.cfg
    }

    pub fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.seq_len > self.cfg.max_positions {
            return Err(Error::invalid(format!(
                "sequence length {} exceeds max_positions {}",
                batch.seq_len, self.cfg.max_positions
            )));
        }
        if let Some(&bad) = batch.ids.iter().find(|&&id| id as usize >= self.cfg.vocab_total) {
            return Err(Error::invalid(format!("token id {bad} outside vocabulary of {}", self.cfg.vocab_total)));
        }
        Ok(())
    }

    /// Runs the encoder. Dropout is active only when an RNG is supplied.
    pub fn forward<R: Rng + ?Sized>(&self, batch: &Batch, mut dropout: Option<&mut R>) -> Result<ForwardCache<T>> {
        self.check_batch(batch)?;
        let cfg = self.cfg;
        let (s, d, f, heads, dh) = (batch.seq_len, cfg.hidden_dim, cfg.ff_dim, cfg.n_heads, cfg.head_dim());
        let n = batch.rows();
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let rate = cfg.dropout_rate;

        let tok = self.p(&self.layout.token_embeddings);
        let pos = self.p(&self.layout.position_embeddings);
        let mut x = vec![T::zero(); n * d];
        for (r, &id) in batch.ids.iter().enumerate() {
            let t = &tok[id as usize * d..(id as usize + 1) * d];
            let p = &pos[(r % s) * d..(r % s + 1) * d];
            for ((o, a), b) in x[r * d..(r + 1) * d].iter_mut().zip(t).zip(p) {
                *o = *a + *b;
            }
        }

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for slots in &self.layout.layers {
            let mut xn1 = vec![T::zero(); n * d];
            let ln1 = layer_norm(&x, self.p(&slots.ln1_gain), self.p(&slots.ln1_bias), d, &mut xn1);
            let mut qkv = vec![T::zero(); n * 3 * d];
            linear(&xn1, self.p(&slots.qkv_weight), self.p(&slots.qkv_bias), n, d, 3 * d, &mut qkv);

            let mut probs = vec![T::zero(); batch.batch_size() * heads * s * s];
            let mut ctx = vec![T::zero(); n * d];
            for (bi, &len) in batch.lengths.iter().enumerate() {
                for h in 0..heads {
                    let base = bi * s * 3 * d + h * dh;
                    let q = View::at(base, s, dh, 3 * d);
                    let k = View::at(base + d, len, dh, 3 * d);
                    let v = View::at(base + 2 * d, len, dh, 3 * d);
                    let pv = View::at((bi * heads + h) * s * s, s, len, s);
                    gemm(scale, &qkv, q, &qkv, k.t(), T::zero(), &mut probs, pv);
                    for r in 0..s {
                        let start = pv.offset + r * s;
                        softmax_in_place(&mut probs[start..start + len]);
                    }
                    let cv = View::at(bi * s * d + h * dh, s, dh, d);
                    gemm(T::one(), &probs, pv, &qkv, v, T::zero(), &mut ctx, cv);
                }
            }

            let mut attn = vec![T::zero(); n * d];
            linear(&ctx, self.p(&slots.out_weight), self.p(&slots.out_bias), n, d, d, &mut attn);
            let attn_mask = match dropout.as_deref_mut() {
                Some(rng) if rate > 0.0 => {
                    let m = dropout_mask(rng, n * d, rate);
                    attn.iter_mut().zip(&m).for_each(|(a, k)| *a *= *k);
                    Some(m)
                }
                _ => None,
            };
            x.iter_mut().zip(&attn).for_each(|(a, b)| *a += *b);

            let mut xn2 = vec![T::zero(); n * d];
            let ln2 = layer_norm(&x, self.p(&slots.ln2_gain), self.p(&slots.ln2_bias), d, &mut xn2);
            let mut ff_pre = vec![T::zero(); n * f];
            linear(&xn2, self.p(&slots.ff_in_weight), self.p(&slots.ff_in_bias), n, d, f, &mut ff_pre);
            let ff_act: Vec<T> = ff_pre.iter().map(|&v| gelu(v)).collect();
            let mut ff_out = vec![T::zero(); n * d];
            linear(&ff_act, self.p(&slots.ff_out_weight), self.p(&slots.ff_out_bias), n, f, d, &mut ff_out);
            let ff_mask = match dropout.as_deref_mut() {
                Some(rng) if rate > 0.0 => {
                    let m = dropout_mask(rng, n * d, rate);
                    ff_out.iter_mut().zip(&m).for_each(|(a, k)| *a *= *k);
                    Some(m)
                }
                _ => None,
            };
            x.iter_mut().zip(&ff_out).for_each(|(a, b)| *a += *b);

            layers.push(LayerCache {
                ln1,
                xn1,
                qkv,
                probs,
                ctx,
                attn_mask,
                ln2,
                xn2,
                ff_pre,
                ff_act,
                ff_mask,
            });
        }

        let mut hidden = vec![T::zero(); n * d];
        let final_ln = layer_norm(
            &x,
            self.p(&self.layout.final_ln_gain),
            self.p(&self.layout.final_ln_bias),
            d,
            &mut hidden,
        );
        Ok(ForwardCache {
            layers,
            final_ln,
            hidden,
        })
    }

    /// Accumulates parameter gradients given `d_hidden`, the gradient with
    /// respect to the final layer-norm output.
    pub fn backward(&self, batch: &Batch, cache: &ForwardCache<T>, d_hidden: &[T], grads: &mut [T]) {
        let cfg = self.cfg;
        let (s, d, f, heads, dh) = (batch.seq_len, cfg.hidden_dim, cfg.ff_dim, cfg.n_heads, cfg.head_dim());
        let n = batch.rows();
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let lay = self.layout;

        let mut dx = vec![T::zero(); n * d];
        {
            let (dg, db) = pair_mut(grads, &lay.final_ln_gain, &lay.final_ln_bias);
            layer_norm_backward(&cache.final_ln, self.p(&lay.final_ln_gain), d_hidden, d, dg, db, &mut dx);
        }

        for (slots, c) in lay.layers.iter().zip(&cache.layers).rev() {
            // Feed-forward branch.
            let mut dbranch = dx.clone();
            if let Some(m) = &c.ff_mask {
                dbranch.iter_mut().zip(m).for_each(|(g, k)| *g *= *k);
            }
            let mut dact = vec![T::zero(); n * f];
            {
                let (dw, db) = pair_mut(grads, &slots.ff_out_weight, &slots.ff_out_bias);
                linear_backward(&c.ff_act, self.p(&slots.ff_out_weight), &dbranch, n, f, d, dw, db, Some(&mut dact));
            }
            for (g, &pre) in dact.iter_mut().zip(&c.ff_pre) {
                *g *= gelu_grad(pre);
            }
            let mut dxn2 = vec![T::zero(); n * d];
            {
                let (dw, db) = pair_mut(grads, &slots.ff_in_weight, &slots.ff_in_bias);
                linear_backward(&c.xn2, self.p(&slots.ff_in_weight), &dact, n, d, f, dw, db, Some(&mut dxn2));
            }
            {
                let (dg, db) = pair_mut(grads, &slots.ln2_gain, &slots.ln2_bias);
                layer_norm_backward(&c.ln2, self.p(&slots.ln2_gain), &dxn2, d, dg, db, &mut dx);
            }

            // Attention branch.
            let mut dbranch = dx.clone();
            if let Some(m) = &c.attn_mask {
                dbranch.iter_mut().zip(m).for_each(|(g, k)| *g *= *k);
            }
            let mut dctx = vec![T::zero(); n * d];
            {
                let (dw, db) = pair_mut(grads, &slots.out_weight, &slots.out_bias);
                linear_backward(&c.ctx, self.p(&slots.out_weight), &dbranch, n, d, d, dw, db, Some(&mut dctx));
            }
            let mut dqkv = vec![T::zero(); n * 3 * d];
            let mut dp = vec![T::zero(); s * s];
            for (bi, &len) in batch.lengths.iter().enumerate() {
                for h in 0..heads {
                    let base = bi * s * 3 * d + h * dh;
                    let q = View::at(base, s, dh, 3 * d);
                    let k = View::at(base + d, len, dh, 3 * d);
                    let v = View::at(base + 2 * d, len, dh, 3 * d);
                    let pv = View::at((bi * heads + h) * s * s, s, len, s);
                    let cv = View::at(bi * s * d + h * dh, s, dh, d);
                    let dpv = View::dense(s, len);

                    gemm(T::one(), &dctx, cv, &c.qkv, v.t(), T::zero(), &mut dp, dpv);
                    gemm(T::one(), &c.probs, pv.t(), &dctx, cv, T::zero(), &mut dqkv, v);
                    for r in 0..s {
                        let prow = &c.probs[pv.offset + r * s..pv.offset + r * s + len];
                        let drow = &mut dp[r * len..(r + 1) * len];
                        let dot: T = prow.iter().zip(drow.iter()).map(|(a, b)| *a * *b).sum();
                        for (g, &p) in drow.iter_mut().zip(prow) {
                            *g = p * (*g - dot);
                        }
                    }
                    gemm(scale, &dp, dpv, &c.qkv, k, T::zero(), &mut dqkv, q);
                    gemm(scale, &dp, dpv.t(), &c.qkv, q, T::zero(), &mut dqkv, k);
                }
            }
            let mut dxn1 = vec![T::zero(); n * d];
            {
                let (dw, db) = pair_mut(grads, &slots.qkv_weight, &slots.qkv_bias);
                linear_backward(&c.xn1, self.p(&slots.qkv_weight), &dqkv, n, d, 3 * d, dw, db, Some(&mut dxn1));
            }
            {
                let (dg, db) = pair_mut(grads, &slots.ln1_gain, &slots.ln1_bias);
                layer_norm_backward(&c.ln1, self.p(&slots.ln1_gain), &dxn1, d, dg, db, &mut dx);
            }
        }

        let (dtok, dpos) = pair_mut(grads, &lay.token_embeddings, &lay.position_embeddings);
        for (r, &id) in batch.ids.iter().enumerate() {
            let g = &dx[r * d..(r + 1) * d];
            let t = &mut dtok[id as usize * d..(id as usize + 1) * d];
            t.iter_mut().zip(g).for_each(|(a, b)| *a += *b);
            let p = &mut dpos[(r % s) * d..(r % s + 1) * d];
            p.iter_mut().zip(g).for_each(|(a, b)| *a += *b);
        }
    }

    /// Tied LM head: `hidden · Eᵀ + bias` for `rows` hidden vectors.
    pub fn lm_logits(&self, hidden: &[T], rows: usize) -> Vec<T> {
        let (d, v) = (self.cfg.hidden_dim, self.cfg.vocab_total);
        let bias = self.p(&self.layout.lm_head_bias);
        let mut out = Vec::with_capacity(rows * v);
        for _ in 0..rows {
            out.extend_from_slice(bias);
        }
        let emb = self.p(&self.layout.token_embeddings);
        gemm(T::one(), hidden, View::dense(rows, d), emb, View::dense(v, d).t(), T::one(), &mut out, View::dense(rows, v));
        out
    }

    /// Backward of [`Self::lm_logits`]; returns the gradient for `hidden`.
    pub fn lm_backward(&self, hidden: &[T], rows: usize, dlogits: &[T], grads: &mut [T]) -> Vec<T> {
        let (d, v) = (self.cfg.hidden_dim, self.cfg.vocab_total);
        let emb = self.p(&self.layout.token_embeddings);
        let mut dh = vec![T::zero(); rows * d];
        gemm(T::one(), dlogits, View::dense(rows, v), emb, View::dense(v, d), T::zero(), &mut dh, View::dense(rows, d));
        let demb = &mut grads[self.layout.token_embeddings.clone()];
        gemm(T::one(), dlogits, View::dense(rows, v).t(), hidden, View::dense(rows, d), T::one(), demb, View::dense(v, d));
        let dbias = &mut grads[self.layout.lm_head_bias.clone()];
        for row in dlogits.chunks_exact(v) {
            dbias.iter_mut().zip(row).for_each(|(a, b)| *a += *b);
        }
        dh
    }
}

fn selected_rows(targets: &[u32], loss_mask: &[bool]) -> Result<Vec<usize>> {
    if targets.len() != loss_mask.len() {
        return Err(Error::invalid("targets and loss mask differ in length"));
    }
    let rows: Vec<usize> = loss_mask
        .iter()
        .zip(targets)
        .enumerate()
        .filter(|(_, (&m, &t))| m && t != IGNORE_INDEX)
        .map(|(i, _)| i)
        .collect();
    if rows.is_empty() {
        return Err(Error::invalid("loss mask selects no positions"));
    }
    Ok(rows)
}

/// Mean masked-LM cross-entropy and its exact gradient.
///
/// Logits are only formed at the selected positions.
pub fn mlm_loss_and_grad<T: Scalar>(
    enc: &Encoder<'_, T>,
    batch: &Batch,
    targets: &[u32],
    loss_mask: &[bool],
) -> Result<(f64, Vec<T>)> {
    mlm_loss_and_grad_with_dropout::<T, crate::rng::LabRng>(enc, batch, targets, loss_mask, None)
}

/// [`mlm_loss_and_grad`] with residual dropout drawn from `dropout`.
pub fn mlm_loss_and_grad_with_dropout<T: Scalar, R: Rng + ?Sized>(
    enc: &Encoder<'_, T>,
    batch: &Batch,
    targets: &[u32],
    loss_mask: &[bool],
    dropout: Option<&mut R>,
) -> Result<(f64, Vec<T>)> {
    if targets.len() != batch.rows() {
        return Err(Error::invalid("targets do not cover the batch"));
    }
    let rows = selected_rows(targets, loss_mask)?;
    let cache = enc.forward(batch, dropout)?;
    let (d, v) = (enc.cfg.hidden_dim, enc.cfg.vocab_total);
    let m = rows.len();

    let mut gathered = Vec::with_capacity(m * d);
    for &r in &rows {
        gathered.extend_from_slice(&cache.hidden[r * d..(r + 1) * d]);
    }
    let mut logits = enc.lm_logits(&gathered, m);
    let inv_m = T::of(1.0 / m as f64);
    let mut loss = 0.0f64;
    for (i, &r) in rows.iter().enumerate() {
        let row = &mut logits[i * v..(i + 1) * v];
        let target = targets[r] as usize;
        if target >= v {
            return Err(Error::invalid(format!("target id {target} outside vocabulary")));
        }
        let picked = row[target];
        let lse = softmax_in_place(row);
        loss += (lse - picked).as_f64();
        row[target] -= T::one();
        row.iter_mut().for_each(|g| *g *= inv_m);
    }
    let loss = loss / m as f64;

    let mut grads = vec![T::zero(); enc.layout.total()];
    let dgathered = enc.lm_backward(&gathered, m, &logits, &mut grads);
    let mut d_hidden = vec![T::zero(); batch.rows() * d];
    for (i, &r) in rows.iter().enumerate() {
        d_hidden[r * d..(r + 1) * d].copy_from_slice(&dgathered[i * d..(i + 1) * d]);
    }
    enc.backward(batch, &cache, &d_hidden, &mut grads);
    Ok((loss, grads))
}

/// Loss only, at the encoder's precision.
pub fn mlm_loss_value<T: Scalar>(enc: &Encoder<'_, T>, batch: &Batch, targets: &[u32], loss_mask: &[bool]) -> Result<f64> {
    if targets.len() != batch.rows() {
        return Err(Error::invalid("targets do not cover the batch"));
    }
    let rows = selected_rows(targets, loss_mask)?;
    let cache = enc.forward::<crate::rng::LabRng>(batch, None)?;
    let d = enc.cfg.hidden_dim;
    let v = enc.cfg.vocab_total;
    let mut gathered = Vec::with_capacity(rows.len() * d);
    for &r in &rows {
        gathered.extend_from_slice(&cache.hidden[r * d..(r + 1) * d]);
    }
    let logits = enc.lm_logits(&gathered, rows.len());
    let mut total = 0.0f64;
    for (i, &r) in rows.iter().enumerate() {
        let row = &logits[i * v..(i + 1) * v];
        let t = targets[r] as usize;
        if t >= v {
            return Err(Error::invalid(format!("target id {t} outside vocabulary")));
        }
        total += (log_sum_exp(row) - row[t]).as_f64();
    }
    Ok(total / rows.len() as f64)
}

/// Logits at every position, padding included.
pub fn forward_mlm(ckpt: &ModelCheckpoint, batch: &Batch) -> Result<Logits> {
    let enc = ckpt.encoder();
    let cache = enc.forward::<crate::rng::LabRng>(batch, None)?;
    let data = enc.lm_logits(&cache.hidden, batch.rows());
    Ok(Logits {
        data,
        batch_size: batch.batch_size(),
        seq_len: batch.seq_len,
        vocab: ckpt.config.vocab_total,
    })
}

/// Mean cross-entropy over the positions selected by `loss_mask`.
pub fn mlm_loss(logits: &Logits, targets: &[u32], loss_mask: &[bool]) -> Result<f64> {
    if targets.len() != logits.batch_size * logits.seq_len {
        return Err(Error::invalid("targets do not cover the logits"));
    }
    let rows = selected_rows(targets, loss_mask)?;
    let mut total = 0.0f64;
    for &r in &rows {
        let row: Vec<f64> = logits.row(r).iter().map(|&v| v as f64).collect();
        let t = targets[r] as usize;
        if t >= row.len() {
            return Err(Error::invalid(format!("target id {t} outside vocabulary")));
        }
        total += log_sum_exp(&row) - row[t];
    }
    Ok(total / rows.len() as f64)
}

/// Loss and gradient of [`mlm_loss`] with respect to every parameter.
pub fn gradient(ckpt: &ModelCheckpoint, batch: &Batch, targets: &[u32], loss_mask: &[bool]) -> Result<(f64, Vec<f32>)> {
    mlm_loss_and_grad(&ckpt.encoder(), batch, targets, loss_mask)
}
