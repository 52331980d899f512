//! Adam with decoupled weight decay. Moments are kept in `f64`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{GradBuffer, Params, Real};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    step: u64,
    m: GradBuffer,
    v: GradBuffer,
}

#[derive(Serialize, Deserialize)]
struct StateHeader {
    version: u32,
    step: u64,
    config: AdamConfig,
    sizes: Vec<usize>,
}

const STATE_VERSION: u32 = 1;

impl Adam {
    pub fn new<T: Real>(config: AdamConfig, params: &Params<T>) -> Self {
        Adam {
            config,
            step: 0,
            m: GradBuffer::zeros_like(params),
            v: GradBuffer::zeros_like(params),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update. A non-finite gradient aborts before anything changes.
    pub fn step<T: Real>(&mut self, params: &mut Params<T>, grads: &GradBuffer) -> Result<()> {
        if let Some(id) = grads.first_non_finite() {
            return Err(Error::NonFinite(format!("gradient of `{}`", params.name(id))));
        }
        let c = self.config;
        self.step += 1;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        let ids: Vec<_> = params.iter().map(|(id, _, _)| id).collect();
        for id in ids {
            let g = grads.get(id);
            let m = self.m.get_mut(id);
            let v = self.v.get_mut(id);
            let p = params.get_mut(id).data_mut();
            for i in 0..p.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
                let theta = p[i].to_f64_lossless();
                p[i] = T::of(theta - c.lr * (update + c.weight_decay * theta));
            }
        }
        Ok(())
    }

    /// Writes `path` (JSON header) and `path.bin` (moments as little-endian f64).
    pub fn save(&self, path: &Path) -> Result<()> {
        let header = StateHeader {
            version: STATE_VERSION,
            step: self.step,
            config: self.config,
            sizes: self.m.iter().map(<[f64]>::len).collect(),
        };
        let mut blob = Vec::new();
        for buf in self.m.iter().chain(self.v.iter()) {
            for x in buf {
                blob.extend_from_slice(&x.to_le_bytes());
            }
        }
        let bin = path.with_extension("bin");
        fs::write(&bin, blob).map_err(|e| Error::io(&bin, e))?;
        fs::write(path, serde_json::to_string_pretty(&header)?).map_err(|e| Error::io(path, e))
    }

    pub fn load<T: Real>(path: &Path, params: &Params<T>) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let header: StateHeader = serde_json::from_str(&text)?;
        if header.version != STATE_VERSION {
            return Err(Error::CheckpointVersion {
                found: header.version,
                expected: STATE_VERSION,
            });
        }
        let mut adam = Adam::new(header.config, params);
        adam.step = header.step;
        let expected: Vec<usize> = adam.m.iter().map(<[f64]>::len).collect();
        if expected != header.sizes {
            return Err(Error::CheckpointShape {
                name: "optimizer".into(),
                msg: "moment sizes do not match the parameters".into(),
            });
        }
        let bin = path.with_extension("bin");
        let blob = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
        let needed = 2 * expected.iter().sum::<usize>() * 8;
        if blob.len() < needed {
            return Err(Error::CheckpointTruncated {
                needed,
                found: blob.len(),
            });
        }
        let mut values = blob
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")));
        let ids: Vec<_> = params.iter().map(|(id, _, _)| id).collect();
        for buf in [&mut adam.m, &mut adam.v] {
            for &id in &ids {
                for x in buf.get_mut(id) {
                    *x = values.next().expect("length checked");
                }
            }
        }
        Ok(adam)
    }
}

/// Scales `grads` so its norm is at most `max_norm`; returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut GradBuffer, max_norm: f64) -> f64 {
    let norm = grads.norm();
    if norm > max_norm && norm.is_finite() {
        grads.scale(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{ParamStore, Tensor};

    fn scalar(v: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.add("theta", Tensor::from_vec(&[1], vec![v]).unwrap()).unwrap();
        s
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut s = scalar(0.7);
        let cfg = AdamConfig {
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut adam = Adam::new(cfg, &s.params);
        for _ in 0..10 {
            adam.step(&mut s.params, &s.grads).unwrap();
        }
        assert_eq!(s.params.get(crate::neural::ParamId(0)).data()[0], 0.7);
    }

    #[test]
    fn constant_gradient_descends() {
        let mut s = scalar(0.0);
        let mut adam = Adam::new(AdamConfig::default(), &s.params);
        s.grads.get_mut(crate::neural::ParamId(0))[0] = 2.5;
        for _ in 0..20 {
            adam.step(&mut s.params, &s.grads).unwrap();
        }
        assert!(s.params.get(crate::neural::ParamId(0)).data()[0] < 0.0);
    }

    #[test]
    fn quadratic_bowl_converges() {
        let id = crate::neural::ParamId(0);
        let mut s = scalar(1.0);
        let cfg = AdamConfig {
            lr: 1e-2,
            weight_decay: 0.0,
            ..Default::default()
        };
        let mut adam = Adam::new(cfg, &s.params);
        for _ in 0..500 {
            let theta = s.params.get(id).data()[0];
            s.grads.get_mut(id)[0] = 2.0 * theta;
            adam.step(&mut s.params, &s.grads).unwrap();
        }
        let theta = s.params.get(id).data()[0];
        assert!(theta.abs() < 1e-3, "theta = {theta}");
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut s = scalar(1.0);
        let mut adam = Adam::new(AdamConfig::default(), &s.params);
        s.grads.get_mut(crate::neural::ParamId(0))[0] = f64::NAN;
        let err = adam.step(&mut s.params, &s.grads).unwrap_err();
        assert!(err.to_string().contains("theta"));
        assert_eq!(adam.steps_taken(), 0);
        assert_eq!(s.params.get(crate::neural::ParamId(0)).data()[0], 1.0);
    }

    #[test]
    fn state_round_trip() {
        let id = crate::neural::ParamId(0);
        let mut s = scalar(1.0);
        let mut adam = Adam::new(AdamConfig::default(), &s.params);
        s.grads.get_mut(id)[0] = 0.3;
        adam.step(&mut s.params, &s.grads).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("opt.json");
        adam.save(&path).unwrap();
        let loaded = Adam::load(&path, &s.params).unwrap();
        assert_eq!(loaded, adam);
    }

    #[test]
    fn clipping_caps_norm() {
        let mut s = scalar(0.0);
        let id = crate::neural::ParamId(0);
        s.grads.get_mut(id)[0] = -4.0;
        assert_eq!(clip_grad_norm(&mut s.grads, 1.0), 4.0);
        assert_eq!(s.grads.get(id)[0], -1.0);
    }
}
