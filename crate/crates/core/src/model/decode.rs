//! Incremental decoding with cached keys and values.

use super::kernels::{gelu, gemm, layer_norm, linear, softmax_in_place, Real, View, ViewMut};
use super::ModelState;
use crate::encoding::{Segment, SequenceView};
use crate::error::{Error, Result};

/// Keys and values of every position processed so far, per layer,
/// each `len × d_model`.
#[derive(Clone, Debug)]
pub struct DecodeCache<F> {
    keys: Vec<Vec<F>>,
    values: Vec<Vec<F>>,
    len: usize,
}

impl<F> DecodeCache<F> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl<F: Real> ModelState<F> {
    /// Runs the context in eval mode and returns the cache together with
    /// the logits at its last position.
    pub fn prefill(&self, context: SequenceView<'_>) -> Result<(DecodeCache<F>, Vec<F>)> {
        let trace = self.trace(&context, None)?;
        let d = self.config.d_model;
        let n = trace.n;
        let mut keys = Vec::with_capacity(self.config.n_layers);
        let mut values = Vec::with_capacity(self.config.n_layers);
        for l in 0..self.config.n_layers {
            let qkv = trace.qkv(l);
            let mut k = Vec::with_capacity(n * d);
            let mut v = Vec::with_capacity(n * d);
            for row in qkv.chunks_exact(3 * d) {
                k.extend_from_slice(&row[d..2 * d]);
                v.extend_from_slice(&row[2 * d..]);
            }
            keys.push(k);
            values.push(v);
        }
        let logits = self.head(&trace.hf[(n - 1) * d..], 1);
        Ok((DecodeCache { keys, values, len: n }, logits))
    }

    /// Appends one token and returns the logits at its position.
    pub fn decode_step(
        &self,
        cache: &mut DecodeCache<F>,
        token: u32,
        segment: Segment,
        position: u32,
    ) -> Result<Vec<F>> {
        let cfg = &self.config;
        let (d, ff, heads) = (cfg.d_model, cfg.d_ff, cfg.n_heads);
        let hd = cfg.head_dim();
        if token as usize >= cfg.vocab_size {
            return Err(Error::TokenOutOfRange {
                id: token,
                position: cache.len,
                vocab_size: cfg.vocab_size,
            });
        }
        if position as usize >= cfg.max_seq_len {
            return Err(Error::Shape(format!(
                "position id {position} exceeds max_seq_len {}",
                cfg.max_seq_len
            )));
        }
        let ids = [token];
        let types = [segment];
        let positions = [position];
        let mask = [0u8];
        let seq = SequenceView {
            token_ids: &ids,
            type_ids: &types,
            position_ids: &positions,
            loss_mask: &mask,
            answer_start: 0,
        };
        let mut x = self.embed(seq)?;
        let scale = F::lit(1.0 / (hd as f64).sqrt());
        let t = cache.len + 1;
        let mut xhat = vec![F::zero(); d];
        let mut rstd = vec![F::zero(); 1];
        let mut h = vec![F::zero(); d];
        let mut qkv = vec![F::zero(); 3 * d];
        let mut y = vec![F::zero(); d];
        let mut proj = vec![F::zero(); d];
        let mut f = vec![F::zero(); ff];
        let mut scores = vec![F::zero(); t];
        for (l, o) in self.layout.layers.iter().enumerate() {
            layer_norm(&x, self.seg(o.ln1_g, d), self.seg(o.ln1_b, d), &mut h, &mut xhat, &mut rstd);
            linear(&h, 1, self.seg(o.w_qkv, d * 3 * d), self.seg(o.b_qkv, 3 * d), d, &mut qkv);
            cache.keys[l].extend_from_slice(&qkv[d..2 * d]);
            cache.values[l].extend_from_slice(&qkv[2 * d..]);
            let keys = &cache.keys[l];
            let values = &cache.values[l];
            for hh in 0..heads {
                gemm(
                    scale,
                    View::new(&qkv[hh * hd..(hh + 1) * hd], 1, hd),
                    View::strided(&keys[hh * hd..], t, hd, d).t(),
                    F::zero(),
                    ViewMut::new(&mut scores, 1, t),
                );
                softmax_in_place(&mut scores);
                gemm(
                    F::one(),
                    View::new(&scores, 1, t),
                    View::strided(&values[hh * hd..], t, hd, d),
                    F::zero(),
                    ViewMut::new(&mut y[hh * hd..(hh + 1) * hd], 1, hd),
                );
            }
            linear(&y, 1, self.seg(o.w_o, d * d), self.seg(o.b_o, d), d, &mut proj);
            for (xv, &pv) in x.iter_mut().zip(&proj) {
                *xv += pv;
            }
            layer_norm(&x, self.seg(o.ln2_g, d), self.seg(o.ln2_b, d), &mut h, &mut xhat, &mut rstd);
            linear(&h, 1, self.seg(o.w_fc, d * ff), self.seg(o.b_fc, ff), d, &mut f);
            for v in f.iter_mut() {
                *v = gelu(*v);
            }
            linear(&f, 1, self.seg(o.w_proj, ff * d), self.seg(o.b_proj, d), ff, &mut proj);
            for (xv, &pv) in x.iter_mut().zip(&proj) {
                *xv += pv;
            }
        }
        cache.len = t;
        layer_norm(
            &x,
            self.seg(self.layout.lnf_g, d),
            self.seg(self.layout.lnf_b, d),
            &mut h,
            &mut xhat,
            &mut rstd,
        );
        Ok(self.head(&h, 1))
    }
}
