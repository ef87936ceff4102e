//! Full-sequence forward pass, next-token loss, and its exact gradient.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::kernels::{
    gelu_from_tanh, gelu_grad_from_tanh, gelu_tanh, gemm, layer_norm, layer_norm_backward, linear, linear_backward, log_sum_exp,
    softmax_in_place, softmax_with_lse, Real, View, ViewMut,
};
use super::ModelState;
use crate::encoding::{Batch, SequenceView};
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

/// Sequences handed to one worker at a time. Fixed so that the gradient
/// reduction order does not depend on the thread count.
const ROWS_PER_CHUNK: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// No dropout; deterministic.
    Eval,
    /// Dropout masks drawn from a stream derived from this seed and the
    /// row index within the batch.
    Train { dropout_seed: u64 },
}

/// Logits for a padded batch, `rows × width × vocab`. Padding positions
/// hold zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits<F> {
    pub rows: usize,
    pub width: usize,
    pub vocab: usize,
    pub data: Vec<F>,
}

impl<F> Logits<F> {
    pub fn at(&self, row: usize, pos: usize) -> &[F] {
        let start = (row * self.width + pos) * self.vocab;
        &self.data[start..start + self.vocab]
    }
}

#[derive(Clone, Debug)]
pub struct LossOutput<F> {
    /// Mean next-token negative log-likelihood over unmasked positions.
    pub loss: f64,
    /// Mean over positions predicting answer tokens and the final end
    /// token; `None` if the batch has none.
    pub answer_loss: Option<f64>,
    pub loss_tokens: usize,
    pub answer_tokens: usize,
    /// Gradient of `loss`, laid out like the parameters. Empty when only
    /// the loss was requested.
    pub grads: Vec<F>,
}

struct NormCache<F> {
    xhat: Vec<F>,
    rstd: Vec<F>,
}

impl<F: Real> NormCache<F> {
    fn new(n: usize, d: usize) -> Self {
        NormCache {
            xhat: vec![F::zero(); n * d],
            rstd: vec![F::zero(); n],
        }
    }
}

struct LayerTrace<F> {
    ln1: NormCache<F>,
    h1: Vec<F>,
    qkv: Vec<F>,
    /// Post-softmax attention, `heads × n × n`, zero above the diagonal.
    att: Vec<F>,
    att_keep: Option<Vec<F>>,
    y: Vec<F>,
    attn_keep: Option<Vec<F>>,
    ln2: NormCache<F>,
    h2: Vec<F>,
    f: Vec<F>,
    /// Inner tanh of the GELU at each of `f`, reused by the backward pass.
    tanh: Vec<F>,
    g: Vec<F>,
    mlp_keep: Option<Vec<F>>,
}

pub(crate) struct Trace<F> {
    pub n: usize,
    emb_keep: Option<Vec<F>>,
    layers: Vec<LayerTrace<F>>,
    lnf: NormCache<F>,
    /// Final normalized hidden states, `n × d`.
    pub hf: Vec<F>,
}

impl<F> Trace<F> {
    pub fn qkv(&self, layer: usize) -> &[F] {
        &self.layers[layer].qkv
    }
}

/// Inverted-dropout scale factors: 0 with probability `p`, else 1/(1-p).
fn dropout_keep<F: Real>(rng: Option<&mut ChaCha8Rng>, len: usize, p: f64) -> Option<Vec<F>> {
    let rng = rng?;
    if p == 0.0 {
        return None;
    }
    let scale = F::lit(1.0 / (1.0 - p));
    Some(
        (0..len)
            .map(|_| if rng.gen::<f64>() < p { F::zero() } else { scale })
            .collect(),
    )
}

fn apply_keep<F: Real>(x: &mut [F], keep: &Option<Vec<F>>) {
    if let Some(k) = keep {
        for (v, &s) in x.iter_mut().zip(k) {
            *v *= s;
        }
    }
}

impl<F: Real> ModelState<F> {
    pub(crate) fn check_sequence(&self, seq: &SequenceView<'_>) -> Result<()> {
        let n = seq.len();
        if n == 0 {
            return Err(Error::Shape("empty sequence".into()));
        }
        if seq.type_ids.len() != n || seq.position_ids.len() != n || seq.loss_mask.len() != n {
            return Err(Error::Shape("sequence fields differ in length".into()));
        }
        let vocab = self.config.vocab_size;
        if let Some((i, &id)) = seq.token_ids.iter().enumerate().find(|(_, &id)| id as usize >= vocab) {
            return Err(Error::TokenOutOfRange {
                id,
                position: i,
                vocab_size: vocab,
            });
        }
        if let Some(&p) = seq.position_ids.iter().find(|&&p| p as usize >= self.config.max_seq_len) {
            return Err(Error::Shape(format!(
                "position id {p} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        Ok(())
    }

    /// Input vectors: token + type + position embedding, no dropout.
    pub fn embed(&self, seq: SequenceView<'_>) -> Result<Vec<F>> {
        self.check_sequence(&seq)?;
        Ok(self.embed_unchecked(&seq))
    }

    fn embed_unchecked(&self, seq: &SequenceView<'_>) -> Vec<F> {
        let d = self.config.d_model;
        let l = &self.layout;
        let mut x = vec![F::zero(); seq.len() * d];
        for (i, row) in x.chunks_exact_mut(d).enumerate() {
            let tok = self.seg(l.wte + seq.token_ids[i] as usize * d, d);
            let ty = self.seg(l.wtt + seq.type_ids[i].id() * d, d);
            let pos = self.seg(l.wpe + seq.position_ids[i] as usize * d, d);
            for j in 0..d {
                row[j] = tok[j] + ty[j] + pos[j];
            }
        }
        x
    }

    pub(crate) fn trace(&self, seq: &SequenceView<'_>, mut rng: Option<ChaCha8Rng>) -> Result<Trace<F>> {
        self.check_sequence(seq)?;
        let cfg = &self.config;
        let (n, d, ff, heads) = (seq.len(), cfg.d_model, cfg.d_ff, cfg.n_heads);
        let hd = cfg.head_dim();
        let scale = F::lit(1.0 / (hd as f64).sqrt());

        let mut x = self.embed_unchecked(seq);
        let emb_keep = dropout_keep(rng.as_mut(), n * d, cfg.dropout_hidden);
        apply_keep(&mut x, &emb_keep);

        let mut layers = Vec::with_capacity(cfg.n_layers);
        for o in &self.layout.layers {
            let mut ln1 = NormCache::new(n, d);
            let mut h1 = vec![F::zero(); n * d];
            layer_norm(
                &x,
                self.seg(o.ln1_g, d),
                self.seg(o.ln1_b, d),
                &mut h1,
                &mut ln1.xhat,
                &mut ln1.rstd,
            );
            let mut qkv = vec![F::zero(); n * 3 * d];
            linear(&h1, n, self.seg(o.w_qkv, d * 3 * d), self.seg(o.b_qkv, 3 * d), d, &mut qkv);

            let mut att = vec![F::zero(); heads * n * n];
            let att_keep = dropout_keep(rng.as_mut(), heads * n * n, cfg.dropout_attn);
            let mut y = vec![F::zero(); n * d];
            let mut dropped = vec![F::zero(); n * n];
            for h in 0..heads {
                let a = &mut att[h * n * n..(h + 1) * n * n];
                gemm(
                    scale,
                    View::strided(&qkv[h * hd..], n, hd, 3 * d),
                    View::strided(&qkv[d + h * hd..], n, hd, 3 * d).t(),
                    F::zero(),
                    ViewMut::new(a, n, n),
                );
                for (i, row) in a.chunks_exact_mut(n).enumerate() {
                    softmax_in_place(&mut row[..=i]);
                    row[i + 1..].fill(F::zero());
                }
                let probs: &[F] = match &att_keep {
                    Some(k) => {
                        for ((dst, &p), &s) in dropped.iter_mut().zip(a.iter()).zip(&k[h * n * n..]) {
                            *dst = p * s;
                        }
                        &dropped
                    }
                    None => a,
                };
                gemm(
                    F::one(),
                    View::new(probs, n, n),
                    View::strided(&qkv[2 * d + h * hd..], n, hd, 3 * d),
                    F::zero(),
                    ViewMut::strided(&mut y[h * hd..], n, hd, d),
                );
            }
            let mut proj = vec![F::zero(); n * d];
            linear(&y, n, self.seg(o.w_o, d * d), self.seg(o.b_o, d), d, &mut proj);
            let attn_keep = dropout_keep(rng.as_mut(), n * d, cfg.dropout_hidden);
            apply_keep(&mut proj, &attn_keep);
            for (xv, &pv) in x.iter_mut().zip(&proj) {
                *xv += pv;
            }

            let mut ln2 = NormCache::new(n, d);
            let mut h2 = vec![F::zero(); n * d];
            layer_norm(
                &x,
                self.seg(o.ln2_g, d),
                self.seg(o.ln2_b, d),
                &mut h2,
                &mut ln2.xhat,
                &mut ln2.rstd,
            );
            let mut f = vec![F::zero(); n * ff];
            linear(&h2, n, self.seg(o.w_fc, d * ff), self.seg(o.b_fc, ff), d, &mut f);
            let tanh: Vec<F> = f.iter().map(|&v| gelu_tanh(v)).collect();
            let g: Vec<F> = f.iter().zip(&tanh).map(|(&v, &t)| gelu_from_tanh(v, t)).collect();
            linear(&g, n, self.seg(o.w_proj, ff * d), self.seg(o.b_proj, d), ff, &mut proj);
            let mlp_keep = dropout_keep(rng.as_mut(), n * d, cfg.dropout_hidden);
            apply_keep(&mut proj, &mlp_keep);
            for (xv, &pv) in x.iter_mut().zip(&proj) {
                *xv += pv;
            }

            layers.push(LayerTrace {
                ln1,
                h1,
                qkv,
                att,
                att_keep,
                y,
                attn_keep,
                ln2,
                h2,
                f,
                tanh,
                g,
                mlp_keep,
            });
        }

        let mut lnf = NormCache::new(n, d);
        let mut hf = vec![F::zero(); n * d];
        layer_norm(
            &x,
            self.seg(self.layout.lnf_g, d),
            self.seg(self.layout.lnf_b, d),
            &mut hf,
            &mut lnf.xhat,
            &mut lnf.rstd,
        );
        Ok(Trace {
            n,
            emb_keep,
            layers,
            lnf,
            hf,
        })
    }

    /// Logits for hidden rows `hf[rows × d]`.
    pub(crate) fn head(&self, hf: &[F], rows: usize) -> Vec<F> {
        let (v, d) = (self.config.vocab_size, self.config.d_model);
        let mut logits = vec![F::zero(); rows * v];
        gemm(
            F::one(),
            View::new(hf, rows, d),
            View::new(self.seg(self.layout.head, v * d), v, d).t(),
            F::zero(),
            ViewMut::new(&mut logits, rows, v),
        );
        logits
    }

    fn row_rng(mode: Mode, row: usize) -> Option<ChaCha8Rng> {
        match mode {
            Mode::Eval => None,
            Mode::Train { dropout_seed } => Some(stream_rng(dropout_seed, Stream::Dropout, row as u64)),
        }
    }

    /// Logits at every position of one unpadded sequence, `n × vocab`.
    pub fn sequence_logits(&self, seq: SequenceView<'_>, mode: Mode) -> Result<Vec<F>> {
        let trace = self.trace(&seq, Self::row_rng(mode, 0))?;
        Ok(self.head(&trace.hf, trace.n))
    }

    pub fn forward(&self, batch: &Batch, mode: Mode) -> Result<Logits<F>> {
        let v = self.config.vocab_size;
        let rows: Vec<Vec<F>> = (0..batch.rows)
            .into_par_iter()
            .map(|r| {
                let trace = self.trace(&batch.row(r), Self::row_rng(mode, r))?;
                Ok(self.head(&trace.hf, trace.n))
            })
            .collect::<Result<_>>()?;
        let mut data = vec![F::zero(); batch.rows * batch.width * v];
        for (r, logits) in rows.iter().enumerate() {
            let start = r * batch.width * v;
            data[start..start + logits.len()].copy_from_slice(logits);
        }
        Ok(Logits {
            rows: batch.rows,
            width: batch.width,
            vocab: v,
            data,
        })
    }

    /// Mean next-token loss over the batch's unmasked positions and, when
    /// `with_grads`, its exact gradient.
    pub fn loss_and_grads(&self, batch: &Batch, mode: Mode) -> Result<LossOutput<F>> {
        self.batch_loss(batch, mode, true)
    }

    /// The loss alone, skipping the backward pass.
    pub fn loss(&self, batch: &Batch, mode: Mode) -> Result<LossOutput<F>> {
        self.batch_loss(batch, mode, false)
    }

    fn batch_loss(&self, batch: &Batch, mode: Mode, with_grads: bool) -> Result<LossOutput<F>> {
        let total: usize = (0..batch.rows)
            .map(|r| {
                let mask = batch.row(r).loss_mask;
                mask[..mask.len().saturating_sub(1)].iter().filter(|&&m| m != 0).count()
            })
            .sum();
        if total == 0 {
            return Err(Error::EmptyLoss);
        }
        let inv_total = F::lit(1.0 / total as f64);
        let rows: Vec<usize> = (0..batch.rows).collect();
        let partials: Vec<Partial<F>> = rows
            .par_chunks(ROWS_PER_CHUNK)
            .map(|chunk| {
                let mut part = Partial::new(if with_grads { self.params.len() } else { 0 });
                for &r in chunk {
                    self.row_loss(&batch.row(r), Self::row_rng(mode, r), inv_total, &mut part)?;
                }
                Ok(part)
            })
            .collect::<Result<_>>()?;

        let mut acc = Partial::new(if with_grads { self.params.len() } else { 0 });
        for p in partials {
            acc.nll += p.nll;
            acc.answer_nll += p.answer_nll;
            acc.answer_tokens += p.answer_tokens;
            for (a, g) in acc.grads.iter_mut().zip(&p.grads) {
                *a += *g;
            }
        }
        Ok(LossOutput {
            loss: acc.nll / total as f64,
            answer_loss: (acc.answer_tokens > 0).then(|| acc.answer_nll / acc.answer_tokens as f64),
            loss_tokens: total,
            answer_tokens: acc.answer_tokens,
            grads: acc.grads,
        })
    }

    fn row_loss(
        &self,
        seq: &SequenceView<'_>,
        rng: Option<ChaCha8Rng>,
        inv_total: F,
        part: &mut Partial<F>,
    ) -> Result<()> {
        let v = self.config.vocab_size;
        let trace = self.trace(seq, rng)?;
        let n = trace.n;
        let mut logits = self.head(&trace.hf, n);
        let answer_from = seq.answer_start.saturating_sub(1);
        for i in 0..n {
            let row = &mut logits[i * v..(i + 1) * v];
            if seq.loss_mask[i] == 0 || i + 1 >= n {
                row.fill(F::zero());
                continue;
            }
            let target = seq.token_ids[i + 1] as usize;
            let picked = row[target];
            let lse = if part.grads.is_empty() {
                log_sum_exp(row)
            } else {
                softmax_with_lse(row)
            };
            let nll = (lse - picked).to_f64().unwrap_or(f64::NAN);
            part.nll += nll;
            if seq.answer_start > 0 && i >= answer_from {
                part.answer_nll += nll;
                part.answer_tokens += 1;
            }
            if !part.grads.is_empty() {
                for p in row.iter_mut() {
                    *p *= inv_total;
                }
                row[target] -= inv_total;
            }
        }
        if !part.grads.is_empty() {
            self.backward(seq, &trace, &logits, &mut part.grads);
        }
        Ok(())
    }

    /// Accumulates into `grads` the gradient given `dlogits[n × vocab]`.
    fn backward(&self, seq: &SequenceView<'_>, trace: &Trace<F>, dlogits: &[F], grads: &mut [F]) {
        let cfg = &self.config;
        let (n, d, ff, heads, v) = (trace.n, cfg.d_model, cfg.d_ff, cfg.n_heads, cfg.vocab_size);
        let hd = cfg.head_dim();
        let scale = F::lit(1.0 / (hd as f64).sqrt());
        let l = &self.layout;

        let mut dhf = vec![F::zero(); n * d];
        gemm(
            F::one(),
            View::new(dlogits, n, v),
            View::new(self.seg(l.head, v * d), v, d),
            F::zero(),
            ViewMut::new(&mut dhf, n, d),
        );
        gemm(
            F::one(),
            View::new(dlogits, n, v).t(),
            View::new(&trace.hf, n, d),
            F::one(),
            ViewMut::new(&mut grads[l.head..l.head + v * d], v, d),
        );

        let mut dx = vec![F::zero(); n * d];
        {
            let (dg, db) = pair_mut(grads, l.lnf_g, d, d);
            layer_norm_backward(
                &dhf,
                &trace.lnf.xhat,
                &trace.lnf.rstd,
                self.seg(l.lnf_g, d),
                dg,
                db,
                &mut dx,
            );
        }

        let mut dbranch = vec![F::zero(); n * d];
        let mut dff = vec![F::zero(); n * ff];
        let mut dh = vec![F::zero(); n * d];
        let mut dqkv = vec![F::zero(); n * 3 * d];
        let mut probs = vec![F::zero(); n * n];
        let mut datt = vec![F::zero(); n * n];
        for (o, t) in l.layers.iter().zip(&trace.layers).rev() {
            // Feed-forward branch.
            dbranch.copy_from_slice(&dx);
            apply_keep(&mut dbranch, &t.mlp_keep);
            {
                let (dw, db) = pair_mut(grads, o.w_proj, ff * d, d);
                linear_backward(&t.g, n, self.seg(o.w_proj, ff * d), ff, &dbranch, dw, db, &mut dff, false);
            }
            for ((dv, &fv), &tv) in dff.iter_mut().zip(&t.f).zip(&t.tanh) {
                *dv *= gelu_grad_from_tanh(fv, tv);
            }
            {
                let (dw, db) = pair_mut(grads, o.w_fc, d * ff, ff);
                linear_backward(&t.h2, n, self.seg(o.w_fc, d * ff), d, &dff, dw, db, &mut dh, false);
            }
            {
                let (dg, db) = pair_mut(grads, o.ln2_g, d, d);
                layer_norm_backward(&dh, &t.ln2.xhat, &t.ln2.rstd, self.seg(o.ln2_g, d), dg, db, &mut dx);
            }

            // Attention branch.
            dbranch.copy_from_slice(&dx);
            apply_keep(&mut dbranch, &t.attn_keep);
            {
                let (dw, db) = pair_mut(grads, o.w_o, d * d, d);
                linear_backward(&t.y, n, self.seg(o.w_o, d * d), d, &dbranch, dw, db, &mut dh, false);
            }
            let dy = &dh;
            for h in 0..heads {
                let att = &t.att[h * n * n..(h + 1) * n * n];
                let p: &[F] = match &t.att_keep {
                    Some(k) => {
                        for ((dst, &a), &s) in probs.iter_mut().zip(att).zip(&k[h * n * n..]) {
                            *dst = a * s;
                        }
                        &probs
                    }
                    None => att,
                };
                gemm(
                    F::one(),
                    View::new(p, n, n).t(),
                    View::strided(&dy[h * hd..], n, hd, d),
                    F::zero(),
                    ViewMut::strided(&mut dqkv[2 * d + h * hd..], n, hd, 3 * d),
                );
                gemm(
                    F::one(),
                    View::strided(&dy[h * hd..], n, hd, d),
                    View::strided(&t.qkv[2 * d + h * hd..], n, hd, 3 * d).t(),
                    F::zero(),
                    ViewMut::new(&mut datt, n, n),
                );
                if let Some(k) = &t.att_keep {
                    for (dv, &s) in datt.iter_mut().zip(&k[h * n * n..]) {
                        *dv *= s;
                    }
                }
                for i in 0..n {
                    let a = &att[i * n..i * n + i + 1];
                    let g = &mut datt[i * n..(i + 1) * n];
                    let dot: F = a.iter().zip(g.iter()).map(|(&x, &y)| x * y).sum();
                    for j in 0..=i {
                        g[j] = a[j] * (g[j] - dot);
                    }
                    g[i + 1..].fill(F::zero());
                }
                gemm(
                    scale,
                    View::new(&datt, n, n),
                    View::strided(&t.qkv[d + h * hd..], n, hd, 3 * d),
                    F::zero(),
                    ViewMut::strided(&mut dqkv[h * hd..], n, hd, 3 * d),
                );
                gemm(
                    scale,
                    View::new(&datt, n, n).t(),
                    View::strided(&t.qkv[h * hd..], n, hd, 3 * d),
                    F::zero(),
                    ViewMut::strided(&mut dqkv[d + h * hd..], n, hd, 3 * d),
                );
            }
            {
                let (dw, db) = pair_mut(grads, o.w_qkv, d * 3 * d, 3 * d);
                linear_backward(&t.h1, n, self.seg(o.w_qkv, d * 3 * d), d, &dqkv, dw, db, &mut dh, false);
            }
            {
                let (dg, db) = pair_mut(grads, o.ln1_g, d, d);
                layer_norm_backward(&dh, &t.ln1.xhat, &t.ln1.rstd, self.seg(o.ln1_g, d), dg, db, &mut dx);
            }
        }

        apply_keep(&mut dx, &trace.emb_keep);
        for (i, row) in dx.chunks_exact(d).enumerate() {
            for base in [
                l.wte + seq.token_ids[i] as usize * d,
                l.wtt + seq.type_ids[i].id() * d,
                l.wpe + seq.position_ids[i] as usize * d,
            ] {
                for (g, &v) in grads[base..base + d].iter_mut().zip(row) {
                    *g += v;
                }
            }
        }
    }
}

struct Partial<F> {
    nll: f64,
    answer_nll: f64,
    answer_tokens: usize,
    grads: Vec<F>,
}

impl<F: Real> Partial<F> {
    fn new(len: usize) -> Self {
        Partial {
            nll: 0.0,
            answer_nll: 0.0,
            answer_tokens: 0,
            grads: vec![F::zero(); len],
        }
    }
}

/// Two adjacent tensors as separate mutable slices.
fn pair_mut<F>(buf: &mut [F], offset: usize, first: usize, second: usize) -> (&mut [F], &mut [F]) {
    buf[offset..offset + first + second].split_at_mut(first)
}
