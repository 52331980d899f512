//! Reversible residual layers:
//!
//! ```text
//! Y1 = X1 + MHA(LN(X2))        X2 = Y2 - FF(LN(Y1))
//! Y2 = X2 + FF(LN(Y1))         X1 = Y1 - MHA(LN(X2))
//! ```
//!
//! The backward pass walks the stack from the top and rebuilds each layer's
//! inputs from its outputs, so only one activation pair is held between layers
//! no matter how deep the stack is.

use std::cell::Cell;

use super::layers::{
    attn_branch_backward, attn_branch_forward, ff_branch_backward, ff_branch_forward, AttnShape,
    EncoderLayerIds,
};
use super::params::{GradBuffer, Params};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

fn check_pair<T: Real>(a: &Tensor<T>, b: &Tensor<T>, what: &str) -> Result<()> {
    a.same_shape(b, what)?;
    if a.shape().len() != 2 {
        return Err(Error::Dimension(format!("{what}: expected a matrix, got {:?}", a.shape())));
    }
    Ok(())
}

pub fn rev_block_forward<T: Real>(
    params: &Params<T>,
    layer: &EncoderLayerIds,
    x1: &Tensor<T>,
    x2: &Tensor<T>,
    shape: AttnShape,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_pair(x1, x2, "reversible block input")?;
    let (mut y1, _) = attn_branch_forward(params, layer, x2, shape)?;
    y1.add_assign(x1);
    let (mut y2, _) = ff_branch_forward(params, layer, &y1)?;
    y2.add_assign(x2);
    Ok((y1, y2))
}

pub fn rev_block_inverse<T: Real>(
    params: &Params<T>,
    layer: &EncoderLayerIds,
    y1: &Tensor<T>,
    y2: &Tensor<T>,
    shape: AttnShape,
) -> Result<(Tensor<T>, Tensor<T>)> {
    check_pair(y1, y2, "reversible block output")?;
    let (f, _) = ff_branch_forward(params, layer, y1)?;
    let mut x2 = y2.clone();
    x2.sub_assign(&f);
    let (a, _) = attn_branch_forward(params, layer, &x2, shape)?;
    let mut x1 = y1.clone();
    x1.sub_assign(&a);
    Ok((x1, x2))
}

pub fn rev_stack_forward<T: Real>(
    params: &Params<T>,
    layers: &[EncoderLayerIds],
    x1: &Tensor<T>,
    x2: &Tensor<T>,
    shape: AttnShape,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut pair = (x1.clone(), x2.clone());
    for layer in layers {
        pair = rev_block_forward(params, layer, &pair.0, &pair.1, shape)?;
    }
    Ok(pair)
}

pub fn rev_stack_inverse<T: Real>(
    params: &Params<T>,
    layers: &[EncoderLayerIds],
    y1: &Tensor<T>,
    y2: &Tensor<T>,
    shape: AttnShape,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let mut pair = (y1.clone(), y2.clone());
    for layer in layers.iter().rev() {
        pair = rev_block_inverse(params, layer, &pair.0, &pair.1, shape)?;
    }
    Ok(pair)
}

/// Counts activation tensors kept alive across layer boundaries.
#[derive(Debug, Default)]
pub struct ActivationTracker {
    live: Cell<usize>,
    peak: Cell<usize>,
}

impl ActivationTracker {
    pub fn track<T>(&self, value: T) -> Tracked<'_, T> {
        let live = self.live.get() + 1;
        self.live.set(live);
        self.peak.set(self.peak.get().max(live));
        Tracked {
            value,
            tracker: self,
        }
    }

    pub fn peak(&self) -> usize {
        self.peak.get()
    }

    pub fn live(&self) -> usize {
        self.live.get()
    }
}

pub struct Tracked<'a, T> {
    value: T,
    tracker: &'a ActivationTracker,
}

impl<T> std::ops::Deref for Tracked<'_, T> {
    type Target = T;

    fn deref(&self) -> &T {
        &self.value
    }
}

impl<T> Drop for Tracked<'_, T> {
    fn drop(&mut self) {
        self.tracker.live.set(self.tracker.live.get() - 1);
    }
}

#[derive(Debug, Clone)]
pub struct StackGradients<T> {
    pub grad_x1: Tensor<T>,
    pub grad_x2: Tensor<T>,
    /// Stack inputs, reconstructed (or stored, for the reference path).
    pub x1: Tensor<T>,
    pub x2: Tensor<T>,
    /// Most activation tensors retained between layers at any one time.
    pub peak_retained: usize,
}

fn ensure_finite<T: Real>(t: &Tensor<T>, layer: usize) -> Result<()> {
    if t.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(format!("gradient entering encoder layer {layer}")))
    }
}

/// Backward through one layer given its outputs; returns its inputs and input gradients.
fn layer_backward<T: Real>(
    params: &Params<T>,
    grads: &mut GradBuffer,
    layer: &EncoderLayerIds,
    shape: AttnShape,
    y1: &Tensor<T>,
    y2: &Tensor<T>,
    gy1: &Tensor<T>,
    gy2: &Tensor<T>,
) -> Result<[Tensor<T>; 4]> {
    let (f, ff_cache) = ff_branch_forward(params, layer, y1)?;
    let mut x2 = y2.clone();
    x2.sub_assign(&f);
    drop(f);
    let mut g1 = ff_branch_backward(params, layer, &ff_cache, gy2, grads);
    drop(ff_cache);
    g1.add_assign(gy1);

    let (a, attn_cache) = attn_branch_forward(params, layer, &x2, shape)?;
    let mut x1 = y1.clone();
    x1.sub_assign(&a);
    let mut g2 = attn_branch_backward(params, layer, &attn_cache, &g1, grads);
    g2.add_assign(gy2);
    Ok([x1, x2, g1, g2])
}

/// Memory-efficient backward from the stack outputs. Parameter gradients are
/// accumulated into `grads`.
#[allow(clippy::too_many_arguments)]
pub fn rev_stack_backward<T: Real>(
    params: &Params<T>,
    grads: &mut GradBuffer,
    layers: &[EncoderLayerIds],
    shape: AttnShape,
    y1: &Tensor<T>,
    y2: &Tensor<T>,
    grad_y1: &Tensor<T>,
    grad_y2: &Tensor<T>,
) -> Result<StackGradients<T>> {
    check_pair(y1, y2, "stack output")?;
    y1.same_shape(grad_y1, "stack output gradient")?;
    y2.same_shape(grad_y2, "stack output gradient")?;
    let tracker = ActivationTracker::default();
    let mut act = (tracker.track(y1.clone()), tracker.track(y2.clone()));
    let mut g = (grad_y1.clone(), grad_y2.clone());
    for (l, layer) in layers.iter().enumerate().rev() {
        ensure_finite(&g.0, l)?;
        ensure_finite(&g.1, l)?;
        let [x1, x2, g1, g2] = layer_backward(params, grads, layer, shape, &act.0, &act.1, &g.0, &g.1)?;
        drop(act);
        act = (tracker.track(x1), tracker.track(x2));
        g = (g1, g2);
    }
    if !g.0.is_finite() || !g.1.is_finite() {
        return Err(Error::NonFinite("gradient at the encoder input".into()));
    }
    let peak_retained = tracker.peak();
    Ok(StackGradients {
        grad_x1: g.0,
        grad_x2: g.1,
        x1: act.0.clone(),
        x2: act.1.clone(),
        peak_retained,
    })
}

/// Conventional backward that stores every layer's activations during a fresh
/// forward pass from the stack inputs. Reference for the reversible path.
#[allow(clippy::too_many_arguments)]
pub fn stored_stack_backward<T: Real>(
    params: &Params<T>,
    grads: &mut GradBuffer,
    layers: &[EncoderLayerIds],
    shape: AttnShape,
    x1: &Tensor<T>,
    x2: &Tensor<T>,
    grad_y1: &Tensor<T>,
    grad_y2: &Tensor<T>,
) -> Result<StackGradients<T>> {
    check_pair(x1, x2, "stack input")?;
    let tracker = ActivationTracker::default();
    let mut stored = vec![(tracker.track(x1.clone()), tracker.track(x2.clone()))];
    let mut caches = Vec::with_capacity(layers.len());
    for layer in layers {
        let (in1, in2) = stored.last().map(|(a, b)| ((*a).clone(), (*b).clone())).unwrap();
        let (a, attn_cache) = attn_branch_forward(params, layer, &in2, shape)?;
        let mut y1 = in1;
        y1.add_assign(&a);
        let (f, ff_cache) = ff_branch_forward(params, layer, &y1)?;
        let mut y2 = in2;
        y2.add_assign(&f);
        caches.push((tracker.track(attn_cache), tracker.track(ff_cache)));
        stored.push((tracker.track(y1), tracker.track(y2)));
    }
    let (mut g1, mut g2) = (grad_y1.clone(), grad_y2.clone());
    for (l, layer) in layers.iter().enumerate().rev() {
        let (attn_cache, ff_cache) = &caches[l];
        // Y2 = X2 + FF(Y1); Y1 = X1 + MHA(X2)
        let from_ff = ff_branch_backward(params, layer, ff_cache, &g2, grads);
        g1.add_assign(&from_ff);
        let from_attn = attn_branch_backward(params, layer, attn_cache, &g1, grads);
        g2.add_assign(&from_attn);
        ensure_finite(&g1, l)?;
        ensure_finite(&g2, l)?;
    }
    let peak_retained = tracker.peak();
    let (x1, x2) = ((*stored[0].0).clone(), (*stored[0].1).clone());
    Ok(StackGradients {
        grad_x1: g1,
        grad_x2: g2,
        x1,
        x2,
        peak_retained,
    })
}
