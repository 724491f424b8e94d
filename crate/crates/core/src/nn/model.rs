use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use robustdistill_tensor::{softmax_t, Gradients, Scalar, Tape, Tensor, TensorError, Var};
use serde::{Deserialize, Serialize};

use super::spec::{Layer, ModelSpec};
use crate::digest::Digest;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Student,
    /// Frozen; the optimizer refuses to update teacher parameters.
    Teacher,
}

/// Named parameter tensors of one model, keyed by layer path
/// (`"3.weight"`, `"2.conv1.bias"`, ...).
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet<T = f32> {
    spec: ModelSpec,
    role: Role,
    tensors: BTreeMap<String, Tensor<T>>,
}

fn param_shapes(spec: &ModelSpec) -> Vec<(String, Vec<usize>, usize)> {
    // (name, shape, fan_in); fan_in 0 marks a bias
    let mut out = Vec::new();
    for (i, layer) in spec.layers.iter().enumerate() {
        match *layer {
            Layer::Dense { inputs, outputs } => {
                out.push((format!("{i}.weight"), vec![inputs, outputs], inputs));
                out.push((format!("{i}.bias"), vec![outputs], 0));
            }
            Layer::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                out.push((
                    format!("{i}.weight"),
                    vec![out_channels, in_channels, kernel, kernel],
                    in_channels * kernel * kernel,
                ));
                out.push((format!("{i}.bias"), vec![out_channels], 0));
            }
            Layer::Residual { channels } => {
                for conv in ["conv1", "conv2"] {
                    out.push((format!("{i}.{conv}.weight"), vec![channels, channels, 3, 3], channels * 9));
                    out.push((format!("{i}.{conv}.bias"), vec![channels], 0));
                }
            }
            Layer::Relu | Layer::AvgPool { .. } | Layer::Flatten => {}
        }
    }
    out
}

/// He fan-in normal weights and zero biases, deterministic in `seed`.
pub fn build_model(spec: &ModelSpec, seed: u64) -> Result<ParameterSet<f32>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tensors = BTreeMap::new();
    for (name, shape, fan_in) in param_shapes(spec) {
        let t = if fan_in == 0 {
            Tensor::zeros(shape)
        } else {
            let normal = Normal::new(0.0f64, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let n = shape.iter().product();
            let data = (0..n).map(|_| normal.sample(&mut rng) as f32).collect();
            Tensor::new(shape, data)?
        };
        tensors.insert(name, t);
    }
    Ok(ParameterSet {
        spec: spec.clone(),
        role: Role::Student,
        tensors,
    })
}

impl<T: Scalar> ParameterSet<T> {
    /// Assembles a parameter set, checking every tensor against the spec.
    pub fn from_tensors(spec: ModelSpec, role: Role, tensors: BTreeMap<String, Tensor<T>>) -> Result<Self> {
        spec.validate()?;
        let expected = param_shapes(&spec);
        if expected.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "spec needs {} parameter tensors, got {}",
                expected.len(),
                tensors.len()
            )));
        }
        for (name, shape, _) in &expected {
            match tensors.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::Shape(format!(
                        "parameter {name} has shape {:?}, spec needs {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::Shape(format!("missing parameter {name}"))),
            }
        }
        Ok(Self { spec, role, tensors })
    }

    /// All-zero parameters for `spec`.
    pub fn zeros(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let tensors = param_shapes(spec)
            .into_iter()
            .map(|(name, shape, _)| (name, Tensor::zeros(shape)))
            .collect();
        Ok(Self {
            spec: spec.clone(),
            role: Role::Student,
            tensors,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn tensors(&self) -> &BTreeMap<String, Tensor<T>> {
        &self.tensors
    }

    pub(crate) fn tensors_mut(&mut self) -> &mut BTreeMap<String, Tensor<T>> {
        &mut self.tensors
    }

    /// Replaces one tensor; the shape must stay the same.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self
            .tensors
            .get_mut(name)
            .ok_or_else(|| Error::Parameter(format!("no parameter named {name}")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "parameter {name} has shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// FNV-1a over names, shapes and the 32-bit float payload.
    pub fn digest(&self) -> u64 {
        let mut d = Digest::default();
        d.update(&self.spec.digest().to_le_bytes());
        for (name, t) in &self.tensors {
            d.update(name.as_bytes());
            for &dim in t.shape() {
                d.update(&(dim as u64).to_le_bytes());
            }
            for v in t.data() {
                d.update(&(v.as_f64() as f32).to_le_bytes());
            }
        }
        d.finish()
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        ParameterSet {
            spec: self.spec.clone(),
            role: self.role,
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Places every parameter on `tape`, as leaves when `trainable`.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, trainable: bool) -> BoundModel<'t, T> {
        let vars = self
            .tensors
            .iter()
            .map(|(k, v)| {
                let var = if trainable {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                };
                (k.clone(), var)
            })
            .collect();
        BoundModel {
            tape,
            spec: self.spec.clone(),
            vars,
        }
    }

    /// Logits without gradient tracking.
    pub fn logits(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let x = tape.constant(batch.clone());
        let z = bound.forward(x)?;
        let out = (*z.value()).clone();
        Ok(out)
    }

    /// `softmax(logits / tau)` per row.
    pub fn predict_probs(&self, batch: &Tensor<T>, tau: T) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let x = tape.constant(batch.clone());
        let p = softmax_t(bound.forward(x)?, tau)?;
        let out = (*p.value()).clone();
        Ok(out)
    }

    /// Argmax class per row, lowest index on ties.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Vec<usize>> {
        Ok(self.logits(batch)?.argmax_rows())
    }
}

/// A parameter set placed on a tape.
pub struct BoundModel<'t, T: Scalar> {
    tape: &'t Tape<T>,
    spec: ModelSpec,
    vars: BTreeMap<String, Var<'t, T>>,
}

impl<'t, T: Scalar> BoundModel<'t, T> {
    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    /// Logits for a constant input batch.
    pub fn forward_tensor(&self, x: &Tensor<T>) -> Result<Var<'t, T>> {
        self.forward(self.tape.constant(x.clone()))
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn var(&self, name: &str) -> Option<Var<'t, T>> {
        self.vars.get(name).copied()
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, Var<'t, T>)> + '_ {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    fn p(&self, name: String) -> Var<'t, T> {
        self.vars[&name]
    }

    /// Logits `[batch, num_classes]` for a `[batch, ...input_shape]` input.
    pub fn forward(&self, x: Var<'t, T>) -> Result<Var<'t, T>> {
        let shape = x.shape();
        if shape.len() != self.spec.input_shape.len() + 1 || shape[1..] != self.spec.input_shape[..] {
            return Err(TensorError::Dimension {
                op: "forward",
                lhs: shape,
                rhs: self.spec.input_shape.clone(),
            }
            .into());
        }
        let mut h = x;
        for (i, layer) in self.spec.layers.iter().enumerate() {
            h = match *layer {
                Layer::Dense { .. } => h
                    .matmul(self.p(format!("{i}.weight")))?
                    .add(self.p(format!("{i}.bias")))?,
                Layer::Conv { kernel, stride, .. } => h.conv2d(
                    self.p(format!("{i}.weight")),
                    Some(self.p(format!("{i}.bias"))),
                    stride,
                    kernel / 2,
                )?,
                Layer::Relu => h.relu(),
                Layer::AvgPool { size } => h.avg_pool2d(size)?,
                Layer::Residual { .. } => {
                    let mid = h
                        .conv2d(
                            self.p(format!("{i}.conv1.weight")),
                            Some(self.p(format!("{i}.conv1.bias"))),
                            1,
                            1,
                        )?
                        .relu();
                    let out = mid.conv2d(
                        self.p(format!("{i}.conv2.weight")),
                        Some(self.p(format!("{i}.conv2.bias"))),
                        1,
                        1,
                    )?;
                    h.add(out)?.relu()
                }
                Layer::Flatten => h.flatten()?,
            };
        }
        Ok(h)
    }

    /// Per-parameter gradients, keyed like the parameter set.
    pub fn gradients(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars.iter().map(|(k, v)| (k.clone(), grads.wrt(*v))).collect()
    }
}
