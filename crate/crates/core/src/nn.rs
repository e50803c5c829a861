//! Named parameter storage, seeded initialization, binary weight I/O and
//! the small tensor helpers shared by the field and the regressor.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::optim::{AdamW, Optimizer, ParamsAdamW};
use candle_nn::{Conv2d, Conv2dConfig, Linear};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DEVICE: Device = Device::Cpu;

/// Ordered map from parameter name to trainable variable.
///
/// Names are dotted paths (`trunk.0.weight`); groups of parameters are
/// addressed by prefix.
#[derive(Clone)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    rng: ChaCha8Rng,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("params", &self.vars.len())
            .field("dtype", &self.dtype)
            .finish()
    }
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    fn insert(&mut self, name: String, dims: &[usize], values: Vec<f64>) -> Result<()> {
        let t = Tensor::from_vec(values, dims, &DEVICE)?.to_dtype(self.dtype)?;
        self.vars.insert(name, Var::from_tensor(&t)?);
        Ok(())
    }

    fn uniform(&mut self, n: usize, bound: f64) -> Vec<f64> {
        (0..n).map(|_| self.rng.gen_range(-bound..=bound)).collect()
    }

    /// He-uniform weights `[out, in]` and zero bias.
    pub fn add_linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> Result<()> {
        let w = self.uniform(fan_in * fan_out, (6.0 / fan_in as f64).sqrt());
        self.insert(format!("{name}.weight"), &[fan_out, fan_in], w)?;
        self.insert(format!("{name}.bias"), &[fan_out], vec![0.0; fan_out])
    }

    /// He-uniform kernel `[out, in, k, k]` and zero bias.
    pub fn add_conv(&mut self, name: &str, c_in: usize, c_out: usize, k: usize) -> Result<()> {
        let fan_in = c_in * k * k;
        let w = self.uniform(fan_in * c_out, (6.0 / fan_in as f64).sqrt());
        self.insert(format!("{name}.weight"), &[c_out, c_in, k, k], w)?;
        self.insert(format!("{name}.bias"), &[c_out], vec![0.0; c_out])
    }

    /// Multiplies every weight entry of a layer by `factor`.
    pub fn scale_weight(&mut self, name: &str, factor: f64) -> Result<()> {
        let v = self.var(&format!("{name}.weight"))?;
        v.set(&v.as_tensor().affine(factor, 0.0)?)?;
        Ok(())
    }

    pub fn set_bias(&mut self, name: &str, values: &[f64]) -> Result<()> {
        let v = self.var(&format!("{name}.bias"))?;
        let t = Tensor::from_slice(values, values.len(), &DEVICE)?.to_dtype(self.dtype)?;
        v.set(&t)?;
        Ok(())
    }

    pub fn var(&self, name: &str) -> Result<&Var> {
        self.vars
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
    }

    /// The parameter as a graph tensor; `frozen` cuts it out of autodiff.
    pub fn tensor(&self, name: &str, frozen: bool) -> Result<Tensor> {
        let t = self.var(name)?.as_tensor();
        Ok(if frozen { t.detach() } else { t.clone() })
    }

    pub fn linear(&self, name: &str, frozen: bool) -> Result<Linear> {
        Ok(Linear::new(
            self.tensor(&format!("{name}.weight"), frozen)?,
            Some(self.tensor(&format!("{name}.bias"), frozen)?),
        ))
    }

    pub fn conv(&self, name: &str, cfg: Conv2dConfig, frozen: bool) -> Result<Conv2d> {
        Ok(Conv2d::new(
            self.tensor(&format!("{name}.weight"), frozen)?,
            Some(self.tensor(&format!("{name}.bias"), frozen)?),
            cfg,
        ))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn vars_with_prefixes(&self, prefixes: &[&str]) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(k, _)| prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(_, v)| v.clone())
            .collect()
    }

    /// Hex SHA-256 over names, shapes and little-endian f64 values of every
    /// parameter whose name starts with one of `prefixes` (all if empty).
    pub fn checksum(&self, prefixes: &[&str]) -> Result<String> {
        let mut h = Sha256::new();
        for (name, var) in &self.vars {
            if !prefixes.is_empty() && !prefixes.iter().any(|p| name.starts_with(p)) {
                continue;
            }
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in flat_f64(var.as_tensor())? {
                h.update(x.to_le_bytes());
            }
        }
        Ok(hex::encode(h.finalize()))
    }

    /// Deep copy with every parameter converted to `dtype`.
    pub fn to_dtype(&self, dtype: DType) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (k, v) in &self.vars {
            let t = v.as_tensor().to_dtype(dtype)?.copy()?;
            vars.insert(k.clone(), Var::from_tensor(&t)?);
        }
        Ok(Self {
            vars,
            dtype,
            rng: self.rng.clone(),
        })
    }

    /// Independent copy whose variables do not alias this store's.
    pub fn deep_clone(&self) -> Result<Self> {
        self.to_dtype(self.dtype)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&(self.vars.len() as u64).to_le_bytes())?;
        for (name, var) in &self.vars {
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            let dims = var.dims();
            w.write_all(&(dims.len() as u64).to_le_bytes())?;
            for d in dims {
                w.write_all(&(*d as u64).to_le_bytes())?;
            }
            for x in flat_f64(var.as_tensor())? {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read, dtype: DType) -> Result<Self> {
        let mut store = Self::new(0, dtype);
        let n = read_u64(r)?;
        for _ in 0..n {
            let len = read_u64(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?;
            let rank = read_u64(r)? as usize;
            let dims = (0..rank)
                .map(|_| read_u64(r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let count: usize = dims.iter().product();
            let mut buf = vec![0u8; count * 8];
            r.read_exact(&mut buf)?;
            let values = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.insert(name, &dims, values)?;
        }
        Ok(store)
    }
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)
        .map_err(|e| Error::Checkpoint(format!("truncated weights: {e}")))?;
    Ok(u64::from_le_bytes(b))
}

pub fn flat_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Adam without weight decay.
pub fn adam(vars: Vec<Var>, lr: f64) -> Result<AdamW> {
    Ok(AdamW::new(
        vars,
        ParamsAdamW {
            lr,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?)
}

pub fn step(opt: &mut AdamW, loss: &Tensor) -> Result<()> {
    opt.backward_step(loss)?;
    Ok(())
}

/// `log(1 + e^x)` built from differentiable primitives.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let tail = x.abs()?.neg()?.exp()?.affine(1.0, 1.0)?.log()?;
    Ok((x.relu()? + tail)?)
}

/// Scales each vector along the last axis to unit length; `eps` guards zeros.
pub fn l2_normalize(x: &Tensor, eps: f64) -> Result<Tensor> {
    let norm = x
        .sqr()?
        .sum_keepdim(D::Minus1)?
        .affine(1.0, eps * eps)?
        .sqrt()?;
    Ok(x.broadcast_div(&norm)?)
}

/// `[sin(2^k π x), cos(2^k π x)]` features for `k < levels`, prefixed by `x`.
pub fn positional_encoding(x: &Tensor, levels: usize) -> Result<Tensor> {
    let mut parts = vec![x.clone()];
    for k in 0..levels {
        let scaled = x.affine(std::f64::consts::PI * (1u64 << k) as f64, 0.0)?;
        parts.push(scaled.sin()?);
        parts.push(scaled.cos()?);
    }
    Ok(Tensor::cat(&parts, D::Minus1)?)
}

pub fn encoding_width(dims: usize, levels: usize) -> usize {
    dims * (1 + 2 * levels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_nn::Module;

    #[test]
    fn init_is_seeded() {
        let mut a = ParamStore::new(3, DType::F32);
        let mut b = ParamStore::new(3, DType::F32);
        let mut c = ParamStore::new(4, DType::F32);
        for s in [&mut a, &mut b, &mut c] {
            s.add_linear("l", 5, 7).unwrap();
            s.add_conv("c", 2, 3, 3).unwrap();
        }
        assert_eq!(a.checksum(&[]).unwrap(), b.checksum(&[]).unwrap());
        assert_ne!(a.checksum(&[]).unwrap(), c.checksum(&[]).unwrap());
        assert_eq!(a.checksum(&["c."]).unwrap().len(), 64);
        assert_ne!(a.checksum(&["c."]).unwrap(), a.checksum(&["l."]).unwrap());
    }

    #[test]
    fn weights_round_trip_bit_exact() {
        let mut s = ParamStore::new(9, DType::F32);
        s.add_linear("a.b", 4, 3).unwrap();
        s.add_conv("conv", 3, 2, 3).unwrap();
        let mut buf = Vec::new();
        s.write_to(&mut buf).unwrap();
        let back = ParamStore::read_from(&mut buf.as_slice(), DType::F32).unwrap();
        assert_eq!(s.checksum(&[]).unwrap(), back.checksum(&[]).unwrap());
        assert_eq!(
            back.names().collect::<Vec<_>>(),
            s.names().collect::<Vec<_>>()
        );
        assert!(ParamStore::read_from(&mut &buf[..buf.len() - 3], DType::F32).is_err());
    }

    #[test]
    fn frozen_parameters_get_no_gradient() {
        let mut s = ParamStore::new(1, DType::F64);
        s.add_linear("a", 2, 2).unwrap();
        s.add_linear("b", 2, 1).unwrap();
        let x = Tensor::new(&[[1.0f64, -2.0]], &DEVICE).unwrap();
        let h = s.linear("a", true).unwrap().forward(&x).unwrap();
        let y = s
            .linear("b", false)
            .unwrap()
            .forward(&h)
            .unwrap()
            .sum_all()
            .unwrap();
        let g = y.backward().unwrap();
        assert!(g.get(s.var("a.weight").unwrap()).is_none());
        assert!(g.get(s.var("b.weight").unwrap()).is_some());
    }

    #[test]
    fn softplus_matches_scalar_formula() {
        let xs = [-30.0f64, -2.0, -1e-3, 0.0, 0.5, 3.0, 40.0];
        let t = Tensor::new(&xs, &DEVICE).unwrap();
        let got = flat_f64(&softplus(&t).unwrap()).unwrap();
        for (x, y) in xs.iter().zip(got) {
            let want = if *x > 20.0 { *x } else { x.exp().ln_1p() };
            assert!((y - want).abs() < 1e-12, "{x}: {y} vs {want}");
        }
    }

    #[test]
    fn positional_encoding_layout() {
        let x = Tensor::new(&[[0.25f64, -0.5, 1.0]], &DEVICE).unwrap();
        let e = flat_f64(&positional_encoding(&x, 2).unwrap()).unwrap();
        assert_eq!(e.len(), encoding_width(3, 2));
        let pi = std::f64::consts::PI;
        assert!((e[3] - (pi * 0.25).sin()).abs() < 1e-12);
        assert!((e[6] - (pi * 0.25).cos()).abs() < 1e-12);
        assert!((e[11] - (2.0 * pi * 1.0).sin()).abs() < 1e-12);
    }

    #[test]
    fn adam_reduces_quadratic() {
        let mut s = ParamStore::new(2, DType::F32);
        s.add_linear("l", 3, 1).unwrap();
        let mut opt = adam(s.vars_with_prefixes(&["l."]), 0.05).unwrap();
        let x = Tensor::new(&[[1.0f32, 2.0, 3.0], [0.0, 1.0, -1.0]], &DEVICE).unwrap();
        let target = Tensor::new(&[[1.0f32], [2.0]], &DEVICE).unwrap();
        let loss = |s: &ParamStore| {
            let y = s.linear("l", false).unwrap().forward(&x).unwrap();
            (y - &target).unwrap().sqr().unwrap().mean_all().unwrap()
        };
        let first = scalar_f64(&loss(&s)).unwrap();
        for _ in 0..200 {
            let l = loss(&s);
            step(&mut opt, &l).unwrap();
        }
        assert!(scalar_f64(&loss(&s)).unwrap() < 1e-3 * first.max(1.0));
    }

    #[test]
    fn dilated_conv_gradient_matches_finite_differences() {
        let mut s = ParamStore::new(5, DType::F64);
        s.add_conv("c", 2, 2, 3).unwrap();
        let cfg = Conv2dConfig {
            padding: 2,
            dilation: 2,
            ..Default::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let input: Vec<f64> = (0..2 * 7 * 7).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let f = |v: &[f64]| {
            let x = Tensor::from_slice(v, (1, 2, 7, 7), &DEVICE).unwrap();
            let y = s.conv("c", cfg, true).unwrap().forward(&x).unwrap();
            y.sqr().unwrap().sum_all().unwrap()
        };
        let xv =
            Var::from_tensor(&Tensor::from_slice(&input, (1, 2, 7, 7), &DEVICE).unwrap()).unwrap();
        let y = s
            .conv("c", cfg, false)
            .unwrap()
            .forward(xv.as_tensor())
            .unwrap();
        let grads = y.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        let gx = flat_f64(grads.get(&xv).unwrap()).unwrap();
        for i in [0, 17, 50, 97] {
            let mut p = input.clone();
            let mut m = input.clone();
            p[i] += 1e-5;
            m[i] -= 1e-5;
            let fd = (scalar_f64(&f(&p)).unwrap() - scalar_f64(&f(&m)).unwrap()) / 2e-5;
            assert!(
                (fd - gx[i]).abs() < 1e-6 * fd.abs().max(1.0),
                "{i}: {fd} vs {}",
                gx[i]
            );
        }
        let gw = flat_f64(grads.get(s.var("c.weight").unwrap()).unwrap()).unwrap();
        assert!(gw.iter().all(|g| g.is_finite()) && gw.iter().any(|g| g.abs() > 0.0));
    }
}
