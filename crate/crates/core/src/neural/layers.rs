//! Layer normalization, multi-head self-attention and the feed-forward block,
//! each with an explicit backward pass.
//!
//! Activations are `R x d` matrices holding `R / group` independent node sets of
//! `group` rows each; attention only mixes rows within the same set.

use rand::Rng;

use super::params::{GradBuffer, ParamId, ParamStore, Params};
use super::tensor::{debug_finite, gemm, matmul, Real, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Parameter handles for one reversible encoder layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EncoderLayerIds {
    pub attn_norm_gain: ParamId,
    pub attn_norm_bias: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub ff_norm_gain: ParamId,
    pub ff_norm_bias: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

impl EncoderLayerIds {
    /// Registers a freshly initialized layer under `prefix`.
    pub fn init<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        d: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let hidden = 4 * d;
        Ok(EncoderLayerIds {
            attn_norm_gain: store.add(format!("{prefix}.attn_norm.gain"), Tensor::filled(&[d], T::one()))?,
            attn_norm_bias: store.add(format!("{prefix}.attn_norm.bias"), Tensor::zeros(&[d]))?,
            wq: store.add_uniform(format!("{prefix}.attn.wq"), &[d, d], d, rng)?,
            wk: store.add_uniform(format!("{prefix}.attn.wk"), &[d, d], d, rng)?,
            wv: store.add_uniform(format!("{prefix}.attn.wv"), &[d, d], d, rng)?,
            wo: store.add_uniform(format!("{prefix}.attn.wo"), &[d, d], d, rng)?,
            ff_norm_gain: store.add(format!("{prefix}.ff_norm.gain"), Tensor::filled(&[d], T::one()))?,
            ff_norm_bias: store.add(format!("{prefix}.ff_norm.bias"), Tensor::zeros(&[d]))?,
            w1: store.add_uniform(format!("{prefix}.ff.w1"), &[d, hidden], d, rng)?,
            b1: store.add_uniform(format!("{prefix}.ff.b1"), &[hidden], d, rng)?,
            w2: store.add_uniform(format!("{prefix}.ff.w2"), &[hidden, d], hidden, rng)?,
            b2: store.add_uniform(format!("{prefix}.ff.b2"), &[d], hidden, rng)?,
        })
    }

    /// Looks up an existing layer by name prefix.
    pub fn lookup<T: Real>(params: &Params<T>, prefix: &str) -> Result<Self> {
        let id = |s: &str| {
            params
                .id(&format!("{prefix}.{s}"))
                .ok_or_else(|| Error::param(format!("missing parameter `{prefix}.{s}`")))
        };
        Ok(EncoderLayerIds {
            attn_norm_gain: id("attn_norm.gain")?,
            attn_norm_bias: id("attn_norm.bias")?,
            wq: id("attn.wq")?,
            wk: id("attn.wk")?,
            wv: id("attn.wv")?,
            wo: id("attn.wo")?,
            ff_norm_gain: id("ff_norm.gain")?,
            ff_norm_bias: id("ff_norm.bias")?,
            w1: id("ff.w1")?,
            b1: id("ff.b1")?,
            w2: id("ff.w2")?,
            b2: id("ff.b2")?,
        })
    }

    pub fn all(&self) -> [ParamId; 12] {
        [
            self.attn_norm_gain,
            self.attn_norm_bias,
            self.wq,
            self.wk,
            self.wv,
            self.wo,
            self.ff_norm_gain,
            self.ff_norm_bias,
            self.w1,
            self.b1,
            self.w2,
            self.b2,
        ]
    }
}

/// How rows are grouped into independent node sets, and the attention head count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnShape {
    pub group: usize,
    pub heads: usize,
}

impl AttnShape {
    fn check(&self, rows: usize, d: usize) -> Result<()> {
        if self.heads == 0 || !d.is_multiple_of(self.heads) {
            return Err(Error::Dimension(format!(
                "width {d} is not divisible by {} heads",
                self.heads
            )));
        }
        if self.group == 0 || !rows.is_multiple_of(self.group) {
            return Err(Error::Dimension(format!(
                "{rows} rows do not split into node sets of {}",
                self.group
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct NormCache<T> {
    xhat: Tensor<T>,
    rstd: Vec<T>,
}

pub fn layer_norm_forward<T: Real>(x: &Tensor<T>, gain: &[T], bias: &[T]) -> (Tensor<T>, NormCache<T>) {
    let (rows, d) = (x.rows(), x.cols());
    let mut xhat = Tensor::zeros(&[rows, d]);
    let mut out = Tensor::zeros(&[rows, d]);
    let mut rstd = Vec::with_capacity(rows);
    let inv_d = T::of(1.0 / d as f64);
    for r in 0..rows {
        let xr = x.row(r);
        let mean = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + T::of(LAYER_NORM_EPS)).sqrt();
        rstd.push(rs);
        let xh = xhat.row_mut(r);
        for c in 0..d {
            xh[c] = (xr[c] - mean) * rs;
        }
        let o = out.row_mut(r);
        for c in 0..d {
            o[c] = xh[c] * gain[c] + bias[c];
        }
    }
    debug_finite(&out, "layer_norm");
    (out, NormCache { xhat, rstd })
}

/// Returns `dL/dx`, accumulating gain and bias gradients.
pub fn layer_norm_backward<T: Real>(
    dout: &Tensor<T>,
    cache: &NormCache<T>,
    gain: &[T],
    dgain: &mut [f64],
    dbias: &mut [f64],
) -> Tensor<T> {
    let (rows, d) = (dout.rows(), dout.cols());
    let mut dx = Tensor::zeros(&[rows, d]);
    let inv_d = T::of(1.0 / d as f64);
    let mut dxhat = vec![T::zero(); d];
    for r in 0..rows {
        let (dr, xh) = (dout.row(r), cache.xhat.row(r));
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for c in 0..d {
            dgain[c] += (dr[c] * xh[c]).to_f64_lossless();
            dbias[c] += dr[c].to_f64_lossless();
            dxhat[c] = dr[c] * gain[c];
            mean_dxhat += dxhat[c];
            mean_dxhat_xhat += dxhat[c] * xh[c];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        let rs = cache.rstd[r];
        let out = dx.row_mut(r);
        for c in 0..d {
            out[c] = rs * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
        }
    }
    dx
}

#[derive(Debug, Clone)]
pub struct MhaCache<T> {
    input: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    /// Attention weights, `[set][head][query][key]` flattened.
    probs: Vec<T>,
    concat: Tensor<T>,
    shape: AttnShape,
}

impl<T: Real> MhaCache<T> {
    /// Attention weights of one head in one node set, row-major `group x group`.
    pub fn probs(&self, set: usize, head: usize) -> &[T] {
        let n = self.shape.group;
        let start = (set * self.shape.heads + head) * n * n;
        &self.probs[start..start + n * n]
    }
}

/// Multi-head self-attention without positional information or biases.
pub fn mha_forward<T: Real>(
    params: &Params<T>,
    ids: &EncoderLayerIds,
    x: &Tensor<T>,
    shape: AttnShape,
) -> Result<(Tensor<T>, MhaCache<T>)> {
    let (rows, d) = (x.rows(), x.cols());
    shape.check(rows, d)?;
    for (id, what) in [(ids.wq, "wq"), (ids.wk, "wk"), (ids.wv, "wv"), (ids.wo, "wo")] {
        if params.get(id).shape() != [d, d] {
            return Err(Error::Dimension(format!(
                "attention {what} has shape {:?}, input rows have width {d}",
                params.get(id).shape()
            )));
        }
    }
    let q = matmul(x.view(), params.get(ids.wq).view());
    let k = matmul(x.view(), params.get(ids.wk).view());
    let v = matmul(x.view(), params.get(ids.wv).view());
    let (n, heads) = (shape.group, shape.heads);
    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let sets = rows / n;
    let mut probs = vec![T::zero(); sets * heads * n * n];
    let mut concat = Tensor::zeros(&[rows, d]);
    for s in 0..sets {
        for h in 0..heads {
            let qb = q.view().block(s * n, n, h * dh, dh);
            let kb = k.view().block(s * n, n, h * dh, dh);
            let start = (s * heads + h) * n * n;
            let p = &mut probs[start..start + n * n];
            gemm(scale, qb, kb.t(), T::zero(), super::tensor::MatMut::new(p, n, n));
            for row in p.chunks_mut(n) {
                softmax_in_place(row);
            }
            let vb = v.view().block(s * n, n, h * dh, dh);
            gemm(
                T::one(),
                super::tensor::MatRef::new(p, n, n),
                vb,
                T::zero(),
                concat.view_mut().block(s * n, n, h * dh, dh),
            );
        }
    }
    let out = matmul(concat.view(), params.get(ids.wo).view());
    debug_finite(&out, "mha");
    Ok((
        out,
        MhaCache {
            input: x.clone(),
            q,
            k,
            v,
            probs,
            concat,
            shape,
        },
    ))
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

fn accumulate_product<T: Real>(
    grads: &mut GradBuffer,
    id: ParamId,
    a: super::tensor::MatRef<'_, T>,
    b: super::tensor::MatRef<'_, T>,
) {
    let prod = matmul(a, b);
    grads.accumulate(id, prod.data(), 1.0);
}

fn accumulate_col_sums<T: Real>(grads: &mut GradBuffer, id: ParamId, m: &Tensor<T>) {
    let g = grads.get_mut(id);
    for r in 0..m.rows() {
        for (acc, &v) in g.iter_mut().zip(m.row(r)) {
            *acc += v.to_f64_lossless();
        }
    }
}

/// Returns `dL/dx` for the attention input, accumulating projection gradients.
pub fn mha_backward<T: Real>(
    params: &Params<T>,
    ids: &EncoderLayerIds,
    cache: &MhaCache<T>,
    dout: &Tensor<T>,
    grads: &mut GradBuffer,
) -> Tensor<T> {
    let (rows, d) = (dout.rows(), dout.cols());
    let (n, heads) = (cache.shape.group, cache.shape.heads);
    let dh = d / heads;
    let scale = T::of(1.0 / (dh as f64).sqrt());
    let sets = rows / n;

    accumulate_product(grads, ids.wo, cache.concat.view().t(), dout.view());
    let dconcat = matmul(dout.view(), params.get(ids.wo).view().t());

    let mut dq = Tensor::zeros(&[rows, d]);
    let mut dk = Tensor::zeros(&[rows, d]);
    let mut dv = Tensor::zeros(&[rows, d]);
    let mut dp = vec![T::zero(); n * n];
    for s in 0..sets {
        for h in 0..heads {
            let start = (s * heads + h) * n * n;
            let p = &cache.probs[start..start + n * n];
            let pv = super::tensor::MatRef::new(p, n, n);
            let dob = dconcat.view().block(s * n, n, h * dh, dh);
            let vb = cache.v.view().block(s * n, n, h * dh, dh);
            gemm(T::one(), dob, vb.t(), T::zero(), super::tensor::MatMut::new(&mut dp, n, n));
            gemm(T::one(), pv.t(), dob, T::zero(), dv.view_mut().block(s * n, n, h * dh, dh));
            // softmax backward, row by row
            for r in 0..n {
                let pr = &p[r * n..(r + 1) * n];
                let dr = &mut dp[r * n..(r + 1) * n];
                let inner: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                for c in 0..n {
                    dr[c] = pr[c] * (dr[c] - inner);
                }
            }
            let ds = super::tensor::MatRef::new(&dp, n, n);
            let qb = cache.q.view().block(s * n, n, h * dh, dh);
            let kb = cache.k.view().block(s * n, n, h * dh, dh);
            gemm(scale, ds, kb, T::zero(), dq.view_mut().block(s * n, n, h * dh, dh));
            gemm(scale, ds.t(), qb, T::zero(), dk.view_mut().block(s * n, n, h * dh, dh));
        }
    }
    let x = &cache.input;
    accumulate_product(grads, ids.wq, x.view().t(), dq.view());
    accumulate_product(grads, ids.wk, x.view().t(), dk.view());
    accumulate_product(grads, ids.wv, x.view().t(), dv.view());
    let mut dx = matmul(dq.view(), params.get(ids.wq).view().t());
    gemm(T::one(), dk.view(), params.get(ids.wk).view().t(), T::one(), dx.view_mut());
    gemm(T::one(), dv.view(), params.get(ids.wv).view().t(), T::one(), dx.view_mut());
    dx
}

#[derive(Debug, Clone)]
pub struct FfCache<T> {
    input: Tensor<T>,
    pre: Tensor<T>,
    hidden: Tensor<T>,
}

/// Two linear maps with a ReLU between them.
pub fn ff_forward<T: Real>(params: &Params<T>, ids: &EncoderLayerIds, x: &Tensor<T>) -> Result<(Tensor<T>, FfCache<T>)> {
    let w1 = params.get(ids.w1);
    if w1.rows() != x.cols() {
        return Err(Error::Dimension(format!(
            "feed-forward w1 has {} rows, input width is {}",
            w1.rows(),
            x.cols()
        )));
    }
    let mut pre = matmul(x.view(), w1.view());
    add_row_bias(&mut pre, params.get(ids.b1).data());
    let mut hidden = pre.clone();
    hidden.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
    let mut out = matmul(hidden.view(), params.get(ids.w2).view());
    add_row_bias(&mut out, params.get(ids.b2).data());
    debug_finite(&out, "feed_forward");
    Ok((
        out,
        FfCache {
            input: x.clone(),
            pre,
            hidden,
        },
    ))
}

pub fn ff_backward<T: Real>(
    params: &Params<T>,
    ids: &EncoderLayerIds,
    cache: &FfCache<T>,
    dout: &Tensor<T>,
    grads: &mut GradBuffer,
) -> Tensor<T> {
    accumulate_product(grads, ids.w2, cache.hidden.view().t(), dout.view());
    accumulate_col_sums(grads, ids.b2, dout);
    let mut dpre = matmul(dout.view(), params.get(ids.w2).view().t());
    for (g, &p) in dpre.data_mut().iter_mut().zip(cache.pre.data()) {
        if p <= T::zero() {
            *g = T::zero();
        }
    }
    accumulate_product(grads, ids.w1, cache.input.view().t(), dpre.view());
    accumulate_col_sums(grads, ids.b1, &dpre);
    matmul(dpre.view(), params.get(ids.w1).view().t())
}

pub(crate) fn add_row_bias<T: Real>(m: &mut Tensor<T>, bias: &[T]) {
    let d = m.cols();
    for row in m.data_mut().chunks_mut(d) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}

/// Attention branch `MHA(LN(x))` of a reversible layer.
#[derive(Debug, Clone)]
pub struct AttnBranchCache<T> {
    norm: NormCache<T>,
    mha: MhaCache<T>,
}

pub fn attn_branch_forward<T: Real>(
    params: &Params<T>,
    ids: &EncoderLayerIds,
    x: &Tensor<T>,
    shape: AttnShape,
) -> Result<(Tensor<T>, AttnBranchCache<T>)> {
    let (z, norm) = layer_norm_forward(
        x,
        params.get(ids.attn_norm_gain).data(),
        params.get(ids.attn_norm_bias).data(),
    );
    let (out, mha) = mha_forward(params, ids, &z, shape)?;
    Ok((out, AttnBranchCache { norm, mha }))
}

pub fn attn_branch_backward<T: Real>(
    params: &Params<T>,
    ids: &EncoderLayerIds,
    cache: &AttnBranchCache<T>,
    dout: &Tensor<T>,
    grads: &mut GradBuffer,
) -> Tensor<T> {
    let dz = mha_backward(params, ids, &cache.mha, dout, grads);
    let gain = params.get(ids.attn_norm_gain).data();
    let mut dgain = vec![0.0; gain.len()];
    let mut dbias = vec![0.0; gain.len()];
    let dx = layer_norm_backward(&dz, &cache.norm, gain, &mut dgain, &mut dbias);
    grads.accumulate(ids.attn_norm_gain, &dgain, 1.0);
    grads.accumulate(ids.attn_norm_bias, &dbias, 1.0);
    dx
}

/// Feed-forward branch `FF(LN(x))` of a reversible layer.
#[derive(Debug, Clone)]
pub struct FfBranchCache<T> {
    norm: NormCache<T>,
    ff: FfCache<T>,
}

pub fn ff_branch_forward<T: Real>(
    params: &Params<T>,
    ids: &EncoderLayerIds,
    x: &Tensor<T>,
) -> Result<(Tensor<T>, FfBranchCache<T>)> {
    let (z, norm) = layer_norm_forward(
        x,
        params.get(ids.ff_norm_gain).data(),
        params.get(ids.ff_norm_bias).data(),
    );
    let (out, ff) = ff_forward(params, ids, &z)?;
    Ok((out, FfBranchCache { norm, ff }))
}

pub fn ff_branch_backward<T: Real>(
    params: &Params<T>,
    ids: &EncoderLayerIds,
    cache: &FfBranchCache<T>,
    dout: &Tensor<T>,
    grads: &mut GradBuffer,
) -> Tensor<T> {
    let dz = ff_backward(params, ids, &cache.ff, dout, grads);
    let gain = params.get(ids.ff_norm_gain).data();
    let mut dgain = vec![0.0; gain.len()];
    let mut dbias = vec![0.0; gain.len()];
    let dx = layer_norm_backward(&dz, &cache.norm, gain, &mut dgain, &mut dbias);
    grads.accumulate(ids.ff_norm_gain, &dgain, 1.0);
    grads.accumulate(ids.ff_norm_bias, &dbias, 1.0);
    dx
}
