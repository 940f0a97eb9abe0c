//! Attentive pooling heads.
//!
//! * `abmilp`: gated attention MIL. `e_n = a^T (tanh(V z_n) * sigmoid(U z_n))`,
//!   softmax over tokens, weighted token sum (averaged over queries).
//! * `simpool`: the token mean is the query, scored against keys `W_k z_n`
//!   with one head; weighted token sum.
//! * `ep`: per-token affine `gamma * z + beta`, one query per class scored
//!   against the normalised tokens, max over tokens. The query norm acts as
//!   the per-class logit scale; logits come straight from the scores.
//! * `mhca`: one learnable query split over heads, key and value
//!   projections, softmax over tokens per head, concatenated head outputs.

use super::{
    affine, affine_backward, softmax, softmax_backward, Cache, Clip, Gradients, HeadError, HeadState,
    ProbeOutput, Result,
};
use crate::numerics::{dot64, norm64};

fn weighted_sum(clip: &Clip, weights: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; clip.dim];
    for (n, &a) in weights.iter().enumerate() {
        for (o, x) in out.iter_mut().zip(clip.token(n)) {
            *o += a * x;
        }
    }
    out
}

/// `d weights_n = dpooled . z_n`
fn weight_grads(clip: &Clip, dpooled: &[f64]) -> Vec<f64> {
    (0..clip.num_tokens()).map(|n| dot64(dpooled, clip.token(n))).collect()
}

/// `sum_n ds_n z_n * scale`
fn token_combination(clip: &Clip, ds: &[f64], scale: f64) -> Vec<f64> {
    let mut out = vec![0.0; clip.dim];
    for (n, &g) in ds.iter().enumerate() {
        for (o, x) in out.iter_mut().zip(clip.token(n)) {
            *o += g * x * scale;
        }
    }
    out
}

pub(super) fn mhca_forward(head: &HeadState, clip: &Clip) -> Result<ProbeOutput> {
    let d = clip.dim;
    let heads = head.hyper.mhca_heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (query, w_key, w_value) = (head.data(0), head.data(1), head.data(2));
    let n_tok = clip.num_tokens();
    let mut weights = Vec::with_capacity(heads * n_tok);
    let mut mixed = Vec::with_capacity(heads * d);
    let mut pooled = vec![0.0; d];
    for h in 0..heads {
        // key_query = W_k[rows of h]^T q_h, so score_n = key_query . z_n
        let mut key_query = vec![0.0; d];
        for i in h * dh..(h + 1) * dh {
            let q = query[i] as f64;
            for (r, &w) in key_query.iter_mut().zip(&w_key[i * d..(i + 1) * d]) {
                *r += q * w as f64;
            }
        }
        let scores: Vec<f64> = (0..n_tok).map(|n| dot64(&key_query, clip.token(n)) * scale).collect();
        let a = softmax(&scores);
        let zbar = weighted_sum(clip, &a);
        for i in h * dh..(h + 1) * dh {
            pooled[i] = w_value[i * d..(i + 1) * d]
                .iter()
                .zip(&zbar)
                .fold(0.0, |acc, (&w, &z)| acc + w as f64 * z);
        }
        weights.extend(a);
        mixed.extend(zbar);
    }
    let logits = affine(head.data(3), Some(head.data(4)), &pooled);
    Ok(ProbeOutput {
        kind: head.kind,
        logits,
        pooled,
        argmax: Vec::new(),
        cache: Cache::Mhca { weights, mixed },
    })
}

pub(super) fn mhca_backward(
    head: &HeadState,
    clip: &Clip,
    out: &ProbeOutput,
    dl: &[f64],
    grads: &mut Gradients,
) -> Result<()> {
    let Cache::Mhca { weights, mixed } = &out.cache else {
        return Err(HeadError::State("mhca backward without mhca forward".into()));
    };
    let d = clip.dim;
    let heads = head.hyper.mhca_heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let n_tok = clip.num_tokens();
    let (query, w_key, w_value) = (head.data(0), head.data(1), head.data(2));
    let dpooled = affine_backward(head.data(3), &out.pooled, dl, &mut grads.bufs[3]);
    super::add_into(&mut grads.bufs[4], dl);

    for h in 0..heads {
        let a = &weights[h * n_tok..(h + 1) * n_tok];
        let zbar = &mixed[h * d..(h + 1) * d];
        let mut dzbar = vec![0.0; d];
        for i in h * dh..(h + 1) * dh {
            let g = dpooled[i];
            let dw = &mut grads.bufs[2][i * d..(i + 1) * d];
            for k in 0..d {
                dw[k] += g * zbar[k];
                dzbar[k] += g * w_value[i * d + k] as f64;
            }
        }
        let ds = softmax_backward(a, &weight_grads(clip, &dzbar));
        let dkey_query = token_combination(clip, &ds, scale);
        for i in h * dh..(h + 1) * dh {
            let row = &w_key[i * d..(i + 1) * d];
            grads.bufs[0][i] += row.iter().zip(&dkey_query).fold(0.0, |acc, (&w, g)| acc + w as f64 * g);
            let q = query[i] as f64;
            let dw = &mut grads.bufs[1][i * d..(i + 1) * d];
            for (w, g) in dw.iter_mut().zip(&dkey_query) {
                *w += q * g;
            }
        }
    }
    Ok(())
}

pub(super) fn ep_forward(head: &HeadState, clip: &Clip) -> Result<ProbeOutput> {
    let d = clip.dim;
    let (gamma, beta, queries) = (head.data(0), head.data(1), head.data(2));
    let n_tok = clip.num_tokens();
    let mut unit = vec![0.0; n_tok * d];
    let mut raw_norm = vec![0.0; n_tok];
    for n in 0..n_tok {
        let tok = clip.token(n);
        let u = &mut unit[n * d..(n + 1) * d];
        for k in 0..d {
            u[k] = gamma[k] as f64 * tok[k] + beta[k] as f64;
        }
        let norm = norm64(u);
        raw_norm[n] = norm;
        if norm > 0.0 {
            u.iter_mut().for_each(|x| *x /= norm);
        }
    }
    if raw_norm.iter().all(|&r| r == 0.0) {
        return Err(HeadError::Degenerate("ep: every transformed token has zero norm".into()));
    }
    let classes = head.dims.classes;
    let mut logits = vec![f64::NEG_INFINITY; classes];
    let mut argmax = vec![0; classes];
    for c in 0..classes {
        let q: Vec<f64> = queries[c * d..(c + 1) * d].iter().map(|&x| x as f64).collect();
        for n in (0..n_tok).filter(|&n| raw_norm[n] > 0.0) {
            let s = dot64(&q, &unit[n * d..(n + 1) * d]);
            if s > logits[c] {
                logits[c] = s;
                argmax[c] = n;
            }
        }
    }
    Ok(ProbeOutput {
        kind: head.kind,
        pooled: logits.clone(),
        logits,
        argmax,
        cache: Cache::Ep { unit, raw_norm },
    })
}

pub(super) fn ep_backward(
    head: &HeadState,
    clip: &Clip,
    out: &ProbeOutput,
    dl: &[f64],
    grads: &mut Gradients,
) -> Result<()> {
    let Cache::Ep { unit, raw_norm } = &out.cache else {
        return Err(HeadError::State("ep backward without ep forward".into()));
    };
    let d = clip.dim;
    let queries = head.data(2);
    for (c, &g) in dl.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let n = out.argmax[c];
        let u = &unit[n * d..(n + 1) * d];
        let q = &queries[c * d..(c + 1) * d];
        for k in 0..d {
            grads.bufs[2][c * d + k] += g * u[k];
        }
        let du: Vec<f64> = q.iter().map(|&x| g * x as f64).collect();
        let radial = dot64(&du, u);
        let tok = clip.token(n);
        for k in 0..d {
            let dz = (du[k] - radial * u[k]) / raw_norm[n];
            grads.bufs[0][k] += dz * tok[k];
            grads.bufs[1][k] += dz;
        }
    }
    Ok(())
}

pub(super) fn simpool_forward(head: &HeadState, clip: &Clip) -> Result<ProbeOutput> {
    let d = clip.dim;
    let w_key = head.data(0);
    let q = clip.token_mean();
    let mut key_query = vec![0.0; d];
    for (i, &qi) in q.iter().enumerate() {
        for (r, &w) in key_query.iter_mut().zip(&w_key[i * d..(i + 1) * d]) {
            *r += qi * w as f64;
        }
    }
    let scale = 1.0 / (d as f64).sqrt();
    let scores: Vec<f64> = (0..clip.num_tokens())
        .map(|n| dot64(&key_query, clip.token(n)) * scale)
        .collect();
    let weights = softmax(&scores);
    let pooled = weighted_sum(clip, &weights);
    let logits = affine(head.data(1), Some(head.data(2)), &pooled);
    Ok(ProbeOutput {
        kind: head.kind,
        logits,
        pooled,
        argmax: Vec::new(),
        cache: Cache::Simpool { weights, key_query },
    })
}

pub(super) fn simpool_backward(
    head: &HeadState,
    clip: &Clip,
    out: &ProbeOutput,
    dl: &[f64],
    grads: &mut Gradients,
) -> Result<()> {
    let Cache::Simpool { weights, .. } = &out.cache else {
        return Err(HeadError::State("simpool backward without simpool forward".into()));
    };
    let d = clip.dim;
    let dpooled = affine_backward(head.data(1), &out.pooled, dl, &mut grads.bufs[1]);
    super::add_into(&mut grads.bufs[2], dl);
    let ds = softmax_backward(weights, &weight_grads(clip, &dpooled));
    let dkey_query = token_combination(clip, &ds, 1.0 / (d as f64).sqrt());
    let q = clip.token_mean();
    for (i, &qi) in q.iter().enumerate() {
        let row = &mut grads.bufs[0][i * d..(i + 1) * d];
        for (w, g) in row.iter_mut().zip(&dkey_query) {
            *w += qi * g;
        }
    }
    Ok(())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub(super) fn abmilp_forward(head: &HeadState, clip: &Clip) -> Result<ProbeOutput> {
    let d = clip.dim;
    let n_tok = clip.num_tokens();
    let queries = head.hyper.abmilp_queries;
    let (v, u, attn) = (head.data(0), head.data(1), head.data(2));
    let mut hidden = Vec::with_capacity(n_tok * d);
    let mut gate = Vec::with_capacity(n_tok * d);
    for n in 0..n_tok {
        let tok = clip.token(n);
        hidden.extend(affine(v, None, tok).into_iter().map(f64::tanh));
        gate.extend(affine(u, None, tok).into_iter().map(sigmoid));
    }
    let gated: Vec<f64> = hidden.iter().zip(&gate).map(|(h, g)| h * g).collect();
    let mut weights = Vec::with_capacity(queries * n_tok);
    let mut pooled = vec![0.0; d];
    for q in 0..queries {
        let a: Vec<f64> = attn[q * d..(q + 1) * d].iter().map(|&x| x as f64).collect();
        let scores: Vec<f64> = (0..n_tok).map(|n| dot64(&a, &gated[n * d..(n + 1) * d])).collect();
        let w = softmax(&scores);
        for (p, z) in pooled.iter_mut().zip(weighted_sum(clip, &w)) {
            *p += z / queries as f64;
        }
        weights.extend(w);
    }
    let logits = affine(head.data(3), Some(head.data(4)), &pooled);
    Ok(ProbeOutput {
        kind: head.kind,
        logits,
        pooled,
        argmax: Vec::new(),
        cache: Cache::Abmilp { hidden, gate, weights },
    })
}

pub(super) fn abmilp_backward(
    head: &HeadState,
    clip: &Clip,
    out: &ProbeOutput,
    dl: &[f64],
    grads: &mut Gradients,
) -> Result<()> {
    let Cache::Abmilp { hidden, gate, weights } = &out.cache else {
        return Err(HeadError::State("abmilp backward without abmilp forward".into()));
    };
    let d = clip.dim;
    let n_tok = clip.num_tokens();
    let queries = head.hyper.abmilp_queries;
    let (v, u, attn) = (head.data(0), head.data(1), head.data(2));
    let dpooled = affine_backward(head.data(3), &out.pooled, dl, &mut grads.bufs[3]);
    super::add_into(&mut grads.bufs[4], dl);

    let dw_tokens: Vec<f64> = weight_grads(clip, &dpooled)
        .into_iter()
        .map(|g| g / queries as f64)
        .collect();
    let mut dgated = vec![0.0; n_tok * d];
    for q in 0..queries {
        let a = &weights[q * n_tok..(q + 1) * n_tok];
        let de = softmax_backward(a, &dw_tokens);
        let row = &attn[q * d..(q + 1) * d];
        for n in 0..n_tok {
            let (h, g) = (&hidden[n * d..(n + 1) * d], &gate[n * d..(n + 1) * d]);
            let da = &mut grads.bufs[2][q * d..(q + 1) * d];
            for k in 0..d {
                da[k] += de[n] * h[k] * g[k];
                dgated[n * d + k] += de[n] * row[k] as f64;
            }
        }
    }
    for n in 0..n_tok {
        let tok = clip.token(n);
        let (h, g) = (&hidden[n * d..(n + 1) * d], &gate[n * d..(n + 1) * d]);
        let dg = &dgated[n * d..(n + 1) * d];
        let dv_pre: Vec<f64> = (0..d).map(|k| dg[k] * g[k] * (1.0 - h[k] * h[k])).collect();
        let du_pre: Vec<f64> = (0..d).map(|k| dg[k] * h[k] * g[k] * (1.0 - g[k])).collect();
        affine_backward(v, tok, &dv_pre, &mut grads.bufs[0]);
        affine_backward(u, tok, &du_pre, &mut grads.bufs[1]);
    }
    Ok(())
}
