//! Single-vector baselines (`linear`, `mlp`) and token concatenation (`linearc`).

use super::{affine, affine_backward, Cache, Clip, Gradients, HeadState, ProbeOutput, Result};

pub(super) fn linear_forward(head: &HeadState, clip: &Clip) -> Result<ProbeOutput> {
    let x = head.descriptor(clip);
    let logits = affine(head.data(0), Some(head.data(1)), &x);
    Ok(ProbeOutput {
        kind: head.kind,
        logits,
        pooled: x.into_owned(),
        argmax: Vec::new(),
        cache: Cache::Linear,
    })
}

pub(super) fn linear_backward(head: &HeadState, clip: &Clip, dl: &[f64], grads: &mut Gradients) -> Result<()> {
    let x = head.descriptor(clip);
    affine_backward(head.data(0), &x, dl, &mut grads.bufs[0]);
    super::add_into(&mut grads.bufs[1], dl);
    Ok(())
}

pub(super) fn mlp_forward(head: &HeadState, clip: &Clip) -> Result<ProbeOutput> {
    let x = head.descriptor(clip);
    let pre = affine(head.data(0), Some(head.data(1)), &x);
    let hidden: Vec<f64> = pre.iter().map(|&a| a.max(0.0)).collect();
    let logits = affine(head.data(2), Some(head.data(3)), &hidden);
    Ok(ProbeOutput {
        kind: head.kind,
        logits,
        pooled: x.into_owned(),
        argmax: Vec::new(),
        cache: Cache::Mlp { pre },
    })
}

pub(super) fn mlp_backward(
    head: &HeadState,
    clip: &Clip,
    out: &ProbeOutput,
    dl: &[f64],
    grads: &mut Gradients,
) -> Result<()> {
    let Cache::Mlp { pre } = &out.cache else {
        return Err(super::HeadError::State("mlp backward without mlp forward".into()));
    };
    let hidden: Vec<f64> = pre.iter().map(|&a| a.max(0.0)).collect();
    let dh = affine_backward(head.data(2), &hidden, dl, &mut grads.bufs[2]);
    super::add_into(&mut grads.bufs[3], dl);
    let dpre: Vec<f64> = dh
        .iter()
        .zip(pre)
        .map(|(&g, &a)| if a > 0.0 { g } else { 0.0 })
        .collect();
    let x = head.descriptor(clip);
    affine_backward(head.data(0), &x, &dpre, &mut grads.bufs[0]);
    super::add_into(&mut grads.bufs[1], &dpre);
    Ok(())
}

pub(super) fn linearc_forward(head: &HeadState, clip: &Clip) -> Result<ProbeOutput> {
    let logits = affine(head.data(0), None, &clip.tokens);
    Ok(ProbeOutput {
        kind: head.kind,
        logits,
        pooled: clip.tokens.clone(),
        argmax: Vec::new(),
        cache: Cache::Linearc,
    })
}

pub(super) fn linearc_backward(clip: &Clip, dl: &[f64], grads: &mut Gradients) -> Result<()> {
    let cols = clip.tokens.len();
    for (r, &g) in dl.iter().enumerate() {
        let row = &mut grads.bufs[0][r * cols..(r + 1) * cols];
        for (w, x) in row.iter_mut().zip(&clip.tokens) {
            *w += g * x;
        }
    }
    Ok(())
}
