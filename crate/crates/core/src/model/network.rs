//! Forward and backward passes over the flat parameter buffer.

use rand_chacha::ChaCha8Rng;

use super::layout::{AttnIdx, FfnIdx, LinearIdx, NormIdx};
use super::ops::{gelu, gelu_grad, gemm, layer_norm, layer_norm_backward, log_softmax, softmax_in_place, NormCache};
use super::{dropout_mask, Example, Matrix, ModelParams};
use crate::tokenizer::{InputEncoding, PAD_ID};

/// Controls a training pass.
pub struct PassOptions<'a> {
    /// Source of dropout masks; `None` disables dropout.
    pub rng: Option<&'a mut ChaCha8Rng>,
    /// Compute gradients for encoder-side parameters. When false those
    /// entries of the gradient buffer are left untouched.
    pub train_encoder: bool,
}

impl PassOptions<'_> {
    pub fn eval() -> Self {
        PassOptions {
            rng: None,
            train_encoder: true,
        }
    }

    fn mask(&mut self, len: usize, p: f64) -> Option<Vec<f64>> {
        match &mut self.rng {
            Some(rng) if p > 0.0 => Some(dropout_mask(*rng, len, p)),
            _ => None,
        }
    }
}

/// Final encoder states and which positions are real (non-PAD) tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderOutput {
    pub hidden: Vec<f64>,
    pub len: usize,
    pub key_valid: Vec<bool>,
}

fn apply_mask(x: &mut [f64], mask: &Option<Vec<f64>>) {
    if let Some(m) = mask {
        x.iter_mut().zip(m).for_each(|(v, k)| *v *= k);
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

fn linear(p: &[f64], lin: LinearIdx, x: &[f64], n: usize) -> Vec<f64> {
    let mut y = Vec::with_capacity(n * lin.dout);
    for _ in 0..n {
        y.extend_from_slice(&p[lin.b..lin.b + lin.dout]);
    }
    gemm(n, lin.dout, lin.din, x, false, &p[lin.w..lin.w + lin.din * lin.dout], false, &mut y, 1.0);
    y
}

fn linear_back(
    p: &[f64],
    lin: LinearIdx,
    x: &[f64],
    n: usize,
    dy: &[f64],
    g: &mut [f64],
    dx: Option<&mut [f64]>,
) {
    let (din, dout) = (lin.din, lin.dout);
    gemm(din, dout, n, x, true, dy, false, &mut g[lin.w..lin.w + din * dout], 1.0);
    for r in 0..n {
        add_into(&mut g[lin.b..lin.b + dout], &dy[r * dout..(r + 1) * dout]);
    }
    if let Some(dx) = dx {
        gemm(n, din, dout, dy, false, &p[lin.w..lin.w + din * dout], true, dx, 1.0);
    }
}

fn norm(p: &[f64], idx: NormIdx, x: &[f64], n: usize, d: usize) -> (Vec<f64>, NormCache) {
    layer_norm(x, n, d, &p[idx.g..idx.g + d], &p[idx.b..idx.b + d])
}

fn norm_back(p: &[f64], idx: NormIdx, d: usize, dy: &[f64], cache: &NormCache, g: &mut [f64]) -> Vec<f64> {
    let mut dg = vec![0.0; d];
    let mut db = vec![0.0; d];
    let dx = layer_norm_backward(dy, cache, d, &p[idx.g..idx.g + d], &mut dg, &mut db);
    add_into(&mut g[idx.g..idx.g + d], &dg);
    add_into(&mut g[idx.b..idx.b + d], &db);
    dx
}

struct AttnCache {
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    probs: Vec<f64>,
    ctx: Vec<f64>,
    nq: usize,
    nk: usize,
}

#[allow(clippy::too_many_arguments)]
fn attention(
    p: &[f64],
    idx: AttnIdx,
    heads: usize,
    xq: &[f64],
    nq: usize,
    xkv: &[f64],
    nk: usize,
    key_valid: &[bool],
    causal: bool,
) -> (Vec<f64>, AttnCache) {
    let d = idx.q.din;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = linear(p, idx.q, xq, nq);
    let k = linear(p, idx.k, xkv, nk);
    let v = linear(p, idx.v, xkv, nk);
    let mut probs = vec![0.0; heads * nq * nk];
    let mut ctx = vec![0.0; nq * d];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..nq {
            let row = &mut probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
            let qi = &q[i * d + off..i * d + off + dh];
            for j in 0..nk {
                row[j] = if !key_valid[j] || (causal && j > i) {
                    f64::NEG_INFINITY
                } else {
                    let kj = &k[j * d + off..j * d + off + dh];
                    qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale
                };
            }
            softmax_in_place(row);
            let out = &mut ctx[i * d + off..i * d + off + dh];
            for j in 0..nk {
                let pij = row[j];
                if pij == 0.0 {
                    continue;
                }
                let vj = &v[j * d + off..j * d + off + dh];
                out.iter_mut().zip(vj).for_each(|(o, x)| *o += pij * x);
            }
        }
    }
    let out = linear(p, idx.o, &ctx, nq);
    (
        out,
        AttnCache {
            q,
            k,
            v,
            probs,
            ctx,
            nq,
            nk,
        },
    )
}

enum KvGrad<'a> {
    /// Keys/values come from the query input (self-attention).
    SameAsQuery,
    Separate(&'a mut [f64]),
    Skip,
}

#[allow(clippy::too_many_arguments)]
fn attention_back(
    p: &[f64],
    idx: AttnIdx,
    heads: usize,
    cache: &AttnCache,
    xq: &[f64],
    xkv: &[f64],
    dout: &[f64],
    g: &mut [f64],
    dxq: &mut [f64],
    dxkv: KvGrad<'_>,
) {
    let d = idx.q.din;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (nq, nk) = (cache.nq, cache.nk);
    let mut dctx = vec![0.0; nq * d];
    linear_back(p, idx.o, &cache.ctx, nq, dout, g, Some(&mut dctx));

    let mut dq = vec![0.0; nq * d];
    let mut dk = vec![0.0; nk * d];
    let mut dv = vec![0.0; nk * d];
    let mut dp = vec![0.0; nk];
    for h in 0..heads {
        let off = h * dh;
        for i in 0..nq {
            let row = &cache.probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
            let dci = &dctx[i * d + off..i * d + off + dh];
            let mut weighted = 0.0;
            for j in 0..nk {
                if row[j] == 0.0 {
                    dp[j] = 0.0;
                    continue;
                }
                let vj = &cache.v[j * d + off..j * d + off + dh];
                dp[j] = dci.iter().zip(vj).map(|(a, b)| a * b).sum();
                weighted += row[j] * dp[j];
                let dvj = &mut dv[j * d + off..j * d + off + dh];
                dvj.iter_mut().zip(dci).for_each(|(o, x)| *o += row[j] * x);
            }
            for j in 0..nk {
                if row[j] == 0.0 {
                    continue;
                }
                let ds = row[j] * (dp[j] - weighted) * scale;
                for c in 0..dh {
                    dq[i * d + off + c] += ds * cache.k[j * d + off + c];
                    dk[j * d + off + c] += ds * cache.q[i * d + off + c];
                }
            }
        }
    }
    linear_back(p, idx.q, xq, nq, &dq, g, Some(dxq));
    match dxkv {
        KvGrad::SameAsQuery => {
            linear_back(p, idx.k, xkv, nk, &dk, g, Some(dxq));
            linear_back(p, idx.v, xkv, nk, &dv, g, Some(dxq));
        }
        KvGrad::Separate(dx) => {
            linear_back(p, idx.k, xkv, nk, &dk, g, Some(dx));
            linear_back(p, idx.v, xkv, nk, &dv, g, Some(dx));
        }
        KvGrad::Skip => {
            linear_back(p, idx.k, xkv, nk, &dk, g, None);
            linear_back(p, idx.v, xkv, nk, &dv, g, None);
        }
    }
}

struct FfnCache {
    pre: Vec<f64>,
    act: Vec<f64>,
}

fn ffn(p: &[f64], idx: FfnIdx, x: &[f64], n: usize) -> (Vec<f64>, FfnCache) {
    let pre = linear(p, idx.up, x, n);
    let act: Vec<f64> = pre.iter().map(|&u| gelu(u)).collect();
    let out = linear(p, idx.down, &act, n);
    (out, FfnCache { pre, act })
}

fn ffn_back(p: &[f64], idx: FfnIdx, cache: &FfnCache, x: &[f64], n: usize, dout: &[f64], g: &mut [f64]) -> Vec<f64> {
    let mut dact = vec![0.0; n * idx.up.dout];
    linear_back(p, idx.down, &cache.act, n, dout, g, Some(&mut dact));
    for (da, &u) in dact.iter_mut().zip(&cache.pre) {
        *da *= gelu_grad(u);
    }
    let mut dx = vec![0.0; n * idx.up.din];
    linear_back(p, idx.up, x, n, &dact, g, Some(&mut dx));
    dx
}

struct EncLayerCache {
    n1: NormCache,
    h1: Vec<f64>,
    attn: AttnCache,
    m1: Option<Vec<f64>>,
    n2: NormCache,
    h2: Vec<f64>,
    ffn: FfnCache,
    m2: Option<Vec<f64>>,
}

struct EncCache {
    emb_mask: Option<Vec<f64>>,
    layers: Vec<EncLayerCache>,
    final_norm: NormCache,
}

fn encoder_forward(params: &ModelParams, input: &InputEncoding, opts: &mut PassOptions<'_>) -> (EncoderOutput, EncCache) {
    let cfg = params.config();
    let lay = params.layout();
    let p = params.as_slice();
    let d = cfg.d_model;
    let n = input.len();
    let mut x = super::embed(params, input).expect("indices checked by caller").data;
    let emb_mask = opts.mask(n * d, cfg.dropout);
    apply_mask(&mut x, &emb_mask);
    let key_valid: Vec<bool> = input.token_ids.iter().map(|&t| t != PAD_ID).collect();

    let mut layers = Vec::with_capacity(lay.encoder.len());
    for l in &lay.encoder {
        let (h1, n1) = norm(p, l.norm1, &x, n, d);
        let (mut a, attn) = attention(p, l.attn, cfg.n_heads, &h1, n, &h1, n, &key_valid, false);
        let m1 = opts.mask(n * d, cfg.dropout);
        apply_mask(&mut a, &m1);
        add_into(&mut x, &a);
        let (h2, n2) = norm(p, l.norm2, &x, n, d);
        let (mut f, ffc) = ffn(p, l.ffn, &h2, n);
        let m2 = opts.mask(n * d, cfg.dropout);
        apply_mask(&mut f, &m2);
        add_into(&mut x, &f);
        layers.push(EncLayerCache {
            n1,
            h1,
            attn,
            m1,
            n2,
            h2,
            ffn: ffc,
            m2,
        });
    }
    let (hidden, final_norm) = norm(p, lay.encoder_norm, &x, n, d);
    (
        EncoderOutput {
            hidden,
            len: n,
            key_valid,
        },
        EncCache {
            emb_mask,
            layers,
            final_norm,
        },
    )
}

fn encoder_backward(params: &ModelParams, input: &InputEncoding, cache: &EncCache, d_out: &[f64], g: &mut [f64]) {
    let cfg = params.config();
    let lay = params.layout();
    let p = params.as_slice();
    let d = cfg.d_model;
    let n = input.len();
    let mut dx = norm_back(p, lay.encoder_norm, d, d_out, &cache.final_norm, g);
    for (l, c) in lay.encoder.iter().zip(&cache.layers).rev() {
        let mut df = dx.clone();
        apply_mask(&mut df, &c.m2);
        let dh2 = ffn_back(p, l.ffn, &c.ffn, &c.h2, n, &df, g);
        add_into(&mut dx, &norm_back(p, l.norm2, d, &dh2, &c.n2, g));
        let mut da = dx.clone();
        apply_mask(&mut da, &c.m1);
        let mut dh1 = vec![0.0; n * d];
        attention_back(p, l.attn, cfg.n_heads, &c.attn, &c.h1, &c.h1, &da, g, &mut dh1, KvGrad::SameAsQuery);
        add_into(&mut dx, &norm_back(p, l.norm1, d, &dh1, &c.n1, g));
    }
    apply_mask(&mut dx, &cache.emb_mask);
    for i in 0..n {
        let row = &dx[i * d..(i + 1) * d];
        let t = lay.tok + input.token_ids[i] as usize * d;
        let q = lay.pos + input.position_ids[i] as usize * d;
        let s = lay.seg + input.segment_ids[i] as usize * d;
        add_into(&mut g[t..t + d], row);
        add_into(&mut g[q..q + d], row);
        add_into(&mut g[s..s + d], row);
    }
}

struct DecLayerCache {
    n1: NormCache,
    h1: Vec<f64>,
    self_attn: AttnCache,
    m1: Option<Vec<f64>>,
    n2: NormCache,
    h2: Vec<f64>,
    cross_attn: AttnCache,
    m2: Option<Vec<f64>>,
    n3: NormCache,
    h3: Vec<f64>,
    ffn: FfnCache,
    m3: Option<Vec<f64>>,
}

struct DecCache {
    emb_mask: Option<Vec<f64>>,
    layers: Vec<DecLayerCache>,
    final_norm: NormCache,
    final_hidden: Vec<f64>,
}

fn decoder_forward(
    params: &ModelParams,
    enc: &EncoderOutput,
    prefix: &[u32],
    opts: &mut PassOptions<'_>,
) -> (Vec<f64>, DecCache) {
    let cfg = params.config();
    let lay = params.layout();
    let p = params.as_slice();
    let d = cfg.d_model;
    let m = prefix.len();
    let mut y = vec![0.0; m * d];
    for (i, &t) in prefix.iter().enumerate() {
        let tr = lay.tok + t as usize * d;
        let pr = lay.pos + i * d;
        for j in 0..d {
            y[i * d + j] = p[tr + j] + p[pr + j];
        }
    }
    let emb_mask = opts.mask(m * d, cfg.dropout);
    apply_mask(&mut y, &emb_mask);
    let key_valid: Vec<bool> = prefix.iter().map(|&t| t != PAD_ID).collect();

    let mut layers = Vec::with_capacity(lay.decoder.len());
    for l in &lay.decoder {
        let (h1, n1) = norm(p, l.norm1, &y, m, d);
        let (mut a, self_attn) = attention(p, l.self_attn, cfg.n_heads, &h1, m, &h1, m, &key_valid, true);
        let m1 = opts.mask(m * d, cfg.dropout);
        apply_mask(&mut a, &m1);
        add_into(&mut y, &a);
        let (h2, n2) = norm(p, l.norm2, &y, m, d);
        let (mut c, cross_attn) =
            attention(p, l.cross_attn, cfg.n_heads, &h2, m, &enc.hidden, enc.len, &enc.key_valid, false);
        let m2 = opts.mask(m * d, cfg.dropout);
        apply_mask(&mut c, &m2);
        add_into(&mut y, &c);
        let (h3, n3) = norm(p, l.norm3, &y, m, d);
        let (mut f, ffc) = ffn(p, l.ffn, &h3, m);
        let m3 = opts.mask(m * d, cfg.dropout);
        apply_mask(&mut f, &m3);
        add_into(&mut y, &f);
        layers.push(DecLayerCache {
            n1,
            h1,
            self_attn,
            m1,
            n2,
            h2,
            cross_attn,
            m2,
            n3,
            h3,
            ffn: ffc,
            m3,
        });
    }
    let (final_hidden, final_norm) = norm(p, lay.decoder_norm, &y, m, d);
    let logits = linear(p, lay.output, &final_hidden, m);
    (
        logits,
        DecCache {
            emb_mask,
            layers,
            final_norm,
            final_hidden,
        },
    )
}

/// Returns the gradient with respect to the encoder output unless
/// `train_encoder` is off.
fn decoder_backward(
    params: &ModelParams,
    enc: &EncoderOutput,
    prefix: &[u32],
    cache: &DecCache,
    dlogits: &[f64],
    g: &mut [f64],
    train_encoder: bool,
) -> Option<Vec<f64>> {
    let cfg = params.config();
    let lay = params.layout();
    let p = params.as_slice();
    let d = cfg.d_model;
    let m = prefix.len();
    let mut dh = vec![0.0; m * d];
    linear_back(p, lay.output, &cache.final_hidden, m, dlogits, g, Some(&mut dh));
    let mut dy = norm_back(p, lay.decoder_norm, d, &dh, &cache.final_norm, g);
    let mut d_enc = train_encoder.then(|| vec![0.0; enc.len * d]);
    for (l, c) in lay.decoder.iter().zip(&cache.layers).rev() {
        let mut df = dy.clone();
        apply_mask(&mut df, &c.m3);
        let dh3 = ffn_back(p, l.ffn, &c.ffn, &c.h3, m, &df, g);
        add_into(&mut dy, &norm_back(p, l.norm3, d, &dh3, &c.n3, g));

        let mut dc = dy.clone();
        apply_mask(&mut dc, &c.m2);
        let mut dh2 = vec![0.0; m * d];
        let kv = match d_enc.as_mut() {
            Some(buf) => KvGrad::Separate(buf),
            None => KvGrad::Skip,
        };
        attention_back(p, l.cross_attn, cfg.n_heads, &c.cross_attn, &c.h2, &enc.hidden, &dc, g, &mut dh2, kv);
        add_into(&mut dy, &norm_back(p, l.norm2, d, &dh2, &c.n2, g));

        let mut da = dy.clone();
        apply_mask(&mut da, &c.m1);
        let mut dh1 = vec![0.0; m * d];
        attention_back(p, l.self_attn, cfg.n_heads, &c.self_attn, &c.h1, &c.h1, &da, g, &mut dh1, KvGrad::SameAsQuery);
        add_into(&mut dy, &norm_back(p, l.norm1, d, &dh1, &c.n1, g));
    }
    if train_encoder {
        // Decoder inputs read the shared token and position tables.
        apply_mask(&mut dy, &cache.emb_mask);
        for (i, &t) in prefix.iter().enumerate() {
            let row = &dy[i * d..(i + 1) * d];
            let tr = lay.tok + t as usize * d;
            let pr = lay.pos + i * d;
            add_into(&mut g[tr..tr + d], row);
            add_into(&mut g[pr..pr + d], row);
        }
    }
    d_enc
}

pub(super) fn encode_eval(params: &ModelParams, input: &InputEncoding) -> EncoderOutput {
    encoder_forward(params, input, &mut PassOptions::eval()).0
}

pub(super) fn decode_eval(params: &ModelParams, enc: &EncoderOutput, prefix: &[u32]) -> Matrix {
    let (logits, _) = decoder_forward(params, enc, prefix, &mut PassOptions::eval());
    Matrix::new(prefix.len(), params.config().vocab_size, logits)
}

pub(super) fn loss_and_grad(
    params: &ModelParams,
    example: &Example,
    scale: f64,
    g: &mut [f64],
    opts: &mut PassOptions<'_>,
) -> (f64, usize) {
    let v = params.config().vocab_size;
    let (enc, enc_cache) = encoder_forward(params, &example.input, opts);
    let (logits, dec_cache) = decoder_forward(params, &enc, &example.prefix, opts);
    let m = example.prefix.len();
    let mut dlogits = vec![0.0; m * v];
    let mut sum = 0.0;
    let mut count = 0;
    for (i, &t) in example.target.iter().enumerate() {
        if t == PAD_ID {
            continue;
        }
        let lp = log_softmax(&logits[i * v..(i + 1) * v]);
        sum -= lp[t as usize];
        count += 1;
        let row = &mut dlogits[i * v..(i + 1) * v];
        for (r, l) in row.iter_mut().zip(&lp) {
            *r = scale * l.exp();
        }
        row[t as usize] -= scale;
    }
    let d_enc = decoder_backward(params, &enc, &example.prefix, &dec_cache, &dlogits, g, opts.train_encoder);
    if let Some(d_enc) = d_enc {
        encoder_backward(params, &example.input, &enc_cache, &d_enc, g);
    }
    (sum, count)
}
