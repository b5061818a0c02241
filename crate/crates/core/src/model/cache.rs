//! Incremental inference with a per-layer key/value cache.

use super::sequence::MixedElement;
use super::weights::{HeadLayout, ModelWeights};
use crate::error::{LvrError, Result};
use crate::numerics::kernels::{self, attend_row};
use crate::numerics::{Real, Tensor};

#[derive(Clone, Debug, Default)]
struct LayerCache<S> {
    keys: Vec<S>,
    values: Vec<S>,
}

/// Keys and values of every processed position, one entry per layer.
#[derive(Clone, Debug)]
pub struct KvCache<S> {
    layers: Vec<LayerCache<S>>,
    len: usize,
}

impl<S: Real> KvCache<S> {
    pub fn new(n_layers: usize) -> Self {
        KvCache { layers: (0..n_layers).map(|_| LayerCache { keys: Vec::new(), values: Vec::new() }).collect(), len: 0 }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

/// Hidden states (pre output-norm) and logits for the processed rows.
#[derive(Clone, Debug)]
pub struct ForwardOutput<S> {
    pub hidden: Tensor<S>,
    pub logits: Tensor<S>,
}

fn linear_rows<S: Real>(x: &[S], w: &Tensor<S>, b: Option<&[S]>, rows: usize) -> Vec<S> {
    let (k, n) = (w.shape[0], w.shape[1]);
    let mut out = vec![S::zero(); rows * n];
    kernels::matmul_acc(x, &w.data, &mut out, rows, k, n);
    if let Some(b) = b {
        for r in 0..rows {
            for (o, &bv) in out[r * n..(r + 1) * n].iter_mut().zip(b) {
                *o += bv;
            }
        }
    }
    out
}

fn layer_norm_rows<S: Real>(x: &[S], g: &[S], b: &[S], d: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for (xr, or) in x.chunks(d).zip(out.chunks_mut(d)) {
        kernels::layer_norm_row(xr, g, b, or);
    }
    out
}

impl<S: Real> ModelWeights<S> {
    pub fn new_cache(&self) -> KvCache<S> {
        KvCache::new(self.config.n_layers)
    }

    /// Runs `elements` at positions `cache.len()..` and appends their keys and
    /// values to the cache. Without a cache the elements form a fresh sequence.
    pub fn forward_mixed(&self, elements: &[MixedElement<S>], cache: Option<&mut KvCache<S>>) -> Result<ForwardOutput<S>> {
        let mut scratch;
        let cache = match cache {
            Some(c) => c,
            None => {
                scratch = self.new_cache();
                &mut scratch
            }
        };
        let c = &self.config;
        let d = c.d_model;
        let n = elements.len();
        if cache.len + n > c.max_seq_len {
            return Err(LvrError::Capacity(format!(
                "sequence length {} exceeds max_seq_len {}",
                cache.len + n,
                c.max_seq_len
            )));
        }
        let l = &self.layout;
        let tok = self.tensor(l.tok_emb);
        let pos = self.tensor(l.pos_emb);
        let mut x = Vec::with_capacity(n * d);
        for (i, e) in elements.iter().enumerate() {
            let row: &[S] = match e {
                MixedElement::TextToken(id) => {
                    if *id as usize >= c.vocab_size {
                        return Err(LvrError::dim("forward", format!("token id {id} outside vocabulary")));
                    }
                    tok.row(*id as usize)
                }
                MixedElement::VisualEmbed(v) | MixedElement::LatentInput(v) => {
                    if v.len() != d {
                        return Err(LvrError::dim("forward", format!("input vector width {} vs {d}", v.len())));
                    }
                    v
                }
            };
            let p = pos.row(cache.len + i);
            x.extend(row.iter().zip(p).map(|(&a, &b)| a + b));
        }
        for (b, lc) in l.blocks.iter().zip(cache.layers.iter_mut()) {
            let h = layer_norm_rows(&x, self.data(b.ln1_g), self.data(b.ln1_b), d);
            let q = linear_rows(&h, self.tensor(b.wq), Some(self.data(b.bq)), n);
            let k = linear_rows(&h, self.tensor(b.wk), None, n);
            let v = linear_rows(&h, self.tensor(b.wv), Some(self.data(b.bv)), n);
            lc.keys.extend_from_slice(&k);
            lc.values.extend_from_slice(&v);
            let mut a = vec![S::zero(); n * d];
            for i in 0..n {
                let n_keys = cache.len + i + 1;
                attend_row(
                    &q[i * d..(i + 1) * d],
                    &lc.keys[..n_keys * d],
                    &lc.values[..n_keys * d],
                    n_keys,
                    c.n_heads,
                    &mut a[i * d..(i + 1) * d],
                    None,
                );
            }
            let o = linear_rows(&a, self.tensor(b.wo), Some(self.data(b.bo)), n);
            x.iter_mut().zip(&o).for_each(|(xv, &ov)| *xv = *xv + ov);
            let h2 = layer_norm_rows(&x, self.data(b.ln2_g), self.data(b.ln2_b), d);
            let mut up = linear_rows(&h2, self.tensor(b.w1), Some(self.data(b.b1)), n);
            up.iter_mut().for_each(|u| *u = kernels::gelu(*u));
            let down = linear_rows(&up, self.tensor(b.w2), Some(self.data(b.b2)), n);
            x.iter_mut().zip(&down).for_each(|(xv, &dv)| *xv = *xv + dv);
        }
        cache.len += n;
        let normed = layer_norm_rows(&x, self.data(l.ln_f_g), self.data(l.ln_f_b), d);
        let logits = linear_rows(&normed, self.tensor(l.lm_head), None, n);
        if !x.iter().chain(&logits).all(|v| v.is_finite()) {
            return Err(LvrError::Numeric("forward_mixed".into()));
        }
        Ok(ForwardOutput {
            hidden: Tensor::new(vec![n, d], x)?,
            logits: Tensor::new(vec![n, c.vocab_size], logits)?,
        })
    }

    /// The vector fed back as the next latent input for final hidden state `h`.
    pub fn apply_lvr_head(&self, h: &[S]) -> Vec<S> {
        match self.layout.head {
            HeadLayout::Identity => h.to_vec(),
            HeadLayout::Mlp2 { w1, b1, w2, b2 } => {
                let mut a = linear_rows(h, self.tensor(w1), Some(self.data(b1)), 1);
                a.iter_mut().for_each(|u| *u = kernels::gelu(*u));
                linear_rows(&a, self.tensor(w2), Some(self.data(b2)), 1)
            }
            HeadLayout::Glu3x { w_gate, w_up, w_down } => {
                let g = linear_rows(h, self.tensor(w_gate), None, 1);
                let u = linear_rows(h, self.tensor(w_up), None, 1);
                let gu: Vec<S> = g.iter().zip(&u).map(|(&g, &u)| kernels::sigmoid(g) * u).collect();
                linear_rows(&gu, self.tensor(w_down), None, 1)
            }
        }
    }
}
