use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ModelConfig, Placement};
use crate::autodiff::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Which sub-network a parameter belongs to. Fixed at construction.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Partition {
    /// Speaker-specific masking network.
    Ssm,
    /// Speech-enhancement network.
    Se,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    name: String,
    partition: Partition,
    pub tensor: Tensor<T>,
}

impl<T: Real> Param<T> {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn partition(&self) -> Partition {
        self.partition
    }
}

/// Every trainable tensor of a model, in a fixed order, each tagged with
/// its partition.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    params: Vec<Param<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, partition: Partition, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::invalid(format!("duplicate parameter {name}")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param {
            name,
            partition,
            tensor,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor<T>> {
        self.get(name)
            .map(|p| &p.tensor)
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    pub fn tensor_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        let i = *self
            .index
            .get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))?;
        Ok(&mut self.params[i].tensor)
    }

    pub fn count(&self, partition: Partition) -> usize {
        self.params
            .iter()
            .filter(|p| p.partition == partition)
            .map(|p| p.tensor.len())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    partition: p.partition,
                    tensor: p.tensor.cast(),
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// SHA-256 over names, shapes and the exact bit patterns of one
    /// partition's values.
    pub fn partition_hash(&self, partition: Partition) -> [u8; 32] {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.partition == partition) {
            h.update(p.name.as_bytes());
            for d in p.tensor.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.tensor.data() {
                h.update(v.as_f64().to_bits().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Records every parameter on `tape`. Parameters whose partition is in
    /// `trainable` require gradients; the rest are constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: &[Partition]) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                let t = p.tensor.clone();
                if trainable.contains(&p.partition) {
                    tape.param(t)
                } else {
                    tape.constant(t)
                }
            })
            .collect();
        Bound {
            vars,
            index: self.index.clone(),
        }
    }

    /// `θ ← θ − lr · g` for every parameter in `partitions`, with `grads`
    /// aligned to this set's order. Parameters without a gradient are left
    /// untouched.
    pub fn sgd_step(&mut self, grads: &[Option<Vec<T>>], lr: T, partitions: &[Partition]) -> Result<()> {
        if grads.len() != self.params.len() {
            return Err(Error::invalid("gradient list does not match parameter set"));
        }
        for (p, g) in self.params.iter_mut().zip(grads) {
            let Some(g) = g else { continue };
            if !partitions.contains(&p.partition) {
                continue;
            }
            if g.len() != p.tensor.len() {
                return Err(Error::shape("sgd_step", format!("{}: gradient length {}", p.name, g.len())));
            }
            for (w, &gv) in p.tensor.data_mut().iter_mut().zip(g) {
                *w -= lr * gv;
            }
        }
        Ok(())
    }

    /// Randomly initialised parameters for `cfg`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut ps = Self::new();
        let (f, d) = (cfg.freq_bins, cfg.d_model);

        if let Some(width) = cfg.mask_width() {
            let dims = [cfg.emb_dim, cfg.ssm_hidden[0], cfg.ssm_hidden[1], width];
            for l in 0..3 {
                let (i, o) = (dims[l], dims[l + 1]);
                ps.push(format!("ssm.l{l}.w"), Partition::Ssm, uniform(&mut rng, &[i, o], glorot(i, o)))?;
                ps.push(format!("ssm.l{l}.b"), Partition::Ssm, Tensor::zeros(&[o]))?;
            }
        }

        let k = cfg.conv_kernel;
        for l in 0..cfg.conv_layers {
            let c_in = if l == 0 { f } else { d };
            ps.push(format!("se.conv{l}.w"), Partition::Se, uniform(&mut rng, &[k, c_in, d], glorot(k * c_in, d)))?;
            ps.push(format!("se.conv{l}.b"), Partition::Se, Tensor::zeros(&[d]))?;
        }
        for b in 0..cfg.blocks {
            for proj in ["wq", "wk", "wv", "wo"] {
                ps.push(format!("se.block{b}.{proj}"), Partition::Se, uniform(&mut rng, &[d, d], glorot(d, d)))?;
                ps.push(format!("se.block{b}.b{}", &proj[1..]), Partition::Se, Tensor::zeros(&[d]))?;
            }
            ps.push(format!("se.block{b}.ln1.g"), Partition::Se, Tensor::filled(&[d], T::one()))?;
            ps.push(format!("se.block{b}.ln1.b"), Partition::Se, Tensor::zeros(&[d]))?;
            let h = cfg.ff_dim;
            ps.push(format!("se.block{b}.ff1.w"), Partition::Se, uniform(&mut rng, &[d, h], glorot(d, h)))?;
            ps.push(format!("se.block{b}.ff1.b"), Partition::Se, Tensor::zeros(&[h]))?;
            ps.push(format!("se.block{b}.ff2.w"), Partition::Se, uniform(&mut rng, &[h, d], glorot(h, d)))?;
            ps.push(format!("se.block{b}.ff2.b"), Partition::Se, Tensor::zeros(&[d]))?;
            ps.push(format!("se.block{b}.ln2.g"), Partition::Se, Tensor::filled(&[d], T::one()))?;
            ps.push(format!("se.block{b}.ln2.b"), Partition::Se, Tensor::zeros(&[d]))?;
        }
        // The decoder starts close to a unit gain so an untrained model
        // passes its input through.
        ps.push("se.dec.w", Partition::Se, uniform(&mut rng, &[d, f], 0.1 * glorot(d, f)))?;
        ps.push("se.dec.b", Partition::Se, Tensor::filled(&[f], T::one()))?;
        Ok(ps)
    }

    /// Checks that names and shapes match what `cfg` would create.
    pub fn check_layout(&self, cfg: &ModelConfig) -> Result<()> {
        let reference = Self::init(cfg, 0)?;
        if reference.len() != self.len() {
            return Err(Error::Hyperparameter(format!(
                "model expects {} parameter tensors, found {}",
                reference.len(),
                self.len()
            )));
        }
        for (a, b) in reference.iter().zip(self.iter()) {
            if a.name != b.name || a.partition != b.partition || a.tensor.shape() != b.tensor.shape() {
                return Err(Error::Hyperparameter(format!(
                    "parameter {} {:?} {:?} does not match expected {} {:?} {:?}",
                    b.name,
                    b.partition,
                    b.tensor.shape(),
                    a.name,
                    a.partition,
                    a.tensor.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn uses_mask(&self) -> bool {
        self.params.iter().any(|p| p.partition == Partition::Ssm)
    }
}

/// Tape handles for a bound [`ParamSet`].
pub struct Bound {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl Bound {
    /// Pairs already-recorded vars with the names of `params`, in order.
    pub fn from_vars<T: Real>(params: &ParamSet<T>, vars: Vec<Var>) -> Self {
        assert_eq!(vars.len(), params.len(), "one var per parameter");
        Self {
            vars,
            index: params.index.clone(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.index
            .get(name)
            .map(|&i| self.vars[i])
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients aligned with the parameter order.
    pub fn collect_grads<T: Real>(&self, grads: &mut crate::autodiff::Gradients<T>) -> Vec<Option<Vec<T>>> {
        self.vars.iter().map(|&v| grads.take(v)).collect()
    }
}

fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

fn uniform<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], limit: f64) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(rng.random_range(-limit..limit))).collect();
    Tensor::new(shape.to_vec(), data).expect("init shape")
}

impl Placement {
    pub const ALL: [Placement; 5] = [Placement::Pre, Placement::Mid1, Placement::Mid2, Placement::Last, Placement::Non];
}
