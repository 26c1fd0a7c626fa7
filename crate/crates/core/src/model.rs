//! Architecture descriptions and parameter containers.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    /// Row-major `output_dim × input_dim` weight matrix.
    Dense,
    /// Per-unit offset; `input_dim == output_dim`.
    Bias,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    pub(crate) fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    z
                } else {
                    0.0
                }
            }
            Activation::Tanh => libm::tanh(z),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    pub(crate) fn derivative_from_output(self, out: f64) -> f64 {
        match self {
            Activation::Relu => {
                if out > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - out * out,
            Activation::Identity => 1.0,
        }
    }

    fn tag(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
            Activation::Identity => 2,
        }
    }
}

/// One named parameter array. The activation is applied to the layer output.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerDescriptor {
    pub name: String,
    pub kind: LayerKind,
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
}

impl LayerDescriptor {
    pub fn param_count(&self) -> usize {
        match self.kind {
            LayerKind::Dense => self.input_dim * self.output_dim,
            LayerKind::Bias => self.output_dim,
        }
    }
}

/// Architecture of the reference model: an ordered chain of dense and bias
/// layers ending in `num_classes` logits.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawModelSpec", into = "RawModelSpec")]
pub struct ModelSpec {
    layers: Vec<LayerDescriptor>,
    input_dim: usize,
    num_classes: usize,
}

#[derive(Serialize, Deserialize)]
struct RawModelSpec {
    input_dim: usize,
    num_classes: usize,
    layers: Vec<LayerDescriptor>,
}

impl TryFrom<RawModelSpec> for ModelSpec {
    type Error = Error;

    fn try_from(raw: RawModelSpec) -> Result<Self> {
        ModelSpec::new(raw.input_dim, raw.num_classes, raw.layers)
    }
}

impl From<ModelSpec> for RawModelSpec {
    fn from(spec: ModelSpec) -> Self {
        RawModelSpec {
            input_dim: spec.input_dim,
            num_classes: spec.num_classes,
            layers: spec.layers,
        }
    }
}

impl ModelSpec {
    pub fn new(input_dim: usize, num_classes: usize, layers: Vec<LayerDescriptor>) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::InvalidSpec(format!(
                "num_classes must be at least 2, got {num_classes}"
            )));
        }
        if input_dim == 0 {
            return Err(Error::InvalidSpec("input_dim must be positive".into()));
        }
        if layers.is_empty() {
            return Err(Error::InvalidSpec("no layers".into()));
        }
        let mut width = input_dim;
        for (idx, layer) in layers.iter().enumerate() {
            if layers[..idx].iter().any(|l| l.name == layer.name) {
                return Err(Error::InvalidSpec(format!(
                    "duplicate layer name `{}`",
                    layer.name
                )));
            }
            if layer.input_dim != width {
                return Err(Error::InvalidSpec(format!(
                    "layer `{}` expects input width {} but receives {}",
                    layer.name, layer.input_dim, width
                )));
            }
            if layer.output_dim == 0 {
                return Err(Error::InvalidSpec(format!(
                    "layer `{}` has zero output width",
                    layer.name
                )));
            }
            if layer.kind == LayerKind::Bias && layer.input_dim != layer.output_dim {
                return Err(Error::InvalidSpec(format!(
                    "bias layer `{}` must preserve width",
                    layer.name
                )));
            }
            width = layer.output_dim;
        }
        if width != num_classes {
            return Err(Error::InvalidSpec(format!(
                "final width {width} does not match num_classes {num_classes}"
            )));
        }
        Ok(ModelSpec {
            layers,
            input_dim,
            num_classes,
        })
    }

    /// Dense+bias pairs named `dense{i}.weight` / `dense{i}.bias`, with
    /// `activation` on hidden layers and identity on the logits.
    pub fn mlp(
        input_dim: usize,
        hidden: &[usize],
        num_classes: usize,
        activation: Activation,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(2 * (hidden.len() + 1));
        let mut width = input_dim;
        let widths = hidden.iter().copied().chain(core::iter::once(num_classes));
        let depth = hidden.len() + 1;
        for (idx, out) in widths.enumerate() {
            let act = if idx + 1 == depth {
                Activation::Identity
            } else {
                activation
            };
            layers.push(LayerDescriptor {
                name: format!("dense{idx}.weight"),
                kind: LayerKind::Dense,
                input_dim: width,
                output_dim: out,
                activation: Activation::Identity,
            });
            layers.push(LayerDescriptor {
                name: format!("dense{idx}.bias"),
                kind: LayerKind::Bias,
                input_dim: out,
                output_dim: out,
                activation: act,
            });
            width = out;
        }
        ModelSpec::new(input_dim, num_classes, layers)
    }

    pub fn layers(&self) -> &[LayerDescriptor] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(LayerDescriptor::param_count).sum()
    }

    /// Byte encoding that [`SpecId`] hashes. Field order and widths are fixed.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.input_dim as u64).to_le_bytes());
        out.extend_from_slice(&(self.num_classes as u64).to_le_bytes());
        out.extend_from_slice(&(self.layers.len() as u64).to_le_bytes());
        for layer in &self.layers {
            out.extend_from_slice(&(layer.name.len() as u64).to_le_bytes());
            out.extend_from_slice(layer.name.as_bytes());
            out.push(match layer.kind {
                LayerKind::Dense => 0,
                LayerKind::Bias => 1,
            });
            out.extend_from_slice(&(layer.input_dim as u64).to_le_bytes());
            out.extend_from_slice(&(layer.output_dim as u64).to_le_bytes());
            out.push(layer.activation.tag());
        }
        out
    }

    pub fn id(&self) -> SpecId {
        SpecId(Sha256::digest(self.canonical_bytes()).into())
    }
}

/// SHA-256 of [`ModelSpec::canonical_bytes`].
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SpecId(pub [u8; 32]);

impl fmt::Debug for SpecId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "SpecId(")?;
        for byte in &self.0[..6] {
            write!(f, "{byte:02x}")?;
        }
        write!(f, "..)")
    }
}

impl fmt::Display for SpecId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for byte in &self.0 {
            write!(f, "{byte:02x}")?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub values: Vec<f32>,
}

/// A model's parameters: one flat `f32` array per spec layer, in spec order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet {
    spec_id: SpecId,
    layers: Vec<Layer>,
}

impl ParameterSet {
    /// Validates names, element counts and finiteness against `spec`.
    pub fn from_layers(spec: &ModelSpec, layers: Vec<Layer>) -> Result<Self> {
        check_layer_shapes(spec, layers.iter().map(|l| (l.name.as_str(), l.values.len())))?;
        for layer in &layers {
            if layer.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    layer: layer.name.clone(),
                });
            }
        }
        Ok(ParameterSet {
            spec_id: spec.id(),
            layers,
        })
    }

    pub fn zeros(spec: &ModelSpec) -> Self {
        ParameterSet {
            spec_id: spec.id(),
            layers: spec
                .layers()
                .iter()
                .map(|d| Layer {
                    name: d.name.clone(),
                    values: alloc::vec![0.0; d.param_count()],
                })
                .collect(),
        }
    }

    /// He-uniform dense weights, zero biases.
    pub fn init(spec: &ModelSpec, seed: u64) -> Self {
        let mut params = ParameterSet::zeros(spec);
        for (desc, layer) in spec.layers().iter().zip(params.layers.iter_mut()) {
            if desc.kind != LayerKind::Dense {
                continue;
            }
            let bound = libm::sqrt(6.0 / desc.input_dim as f64);
            let mut stream = rng::keyed_stream(seed, "init", &[desc.name.as_bytes()]);
            for v in &mut layer.values {
                *v = (stream.random::<f64>() * 2.0 - 1.0) as f32 * bound as f32;
            }
        }
        params
    }

    pub(crate) fn from_parts_unchecked(spec_id: SpecId, layers: Vec<Layer>) -> Self {
        ParameterSet { spec_id, layers }
    }

    pub fn spec_id(&self) -> SpecId {
        self.spec_id
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layer_values(&self) -> impl Iterator<Item = &[f32]> {
        self.layers.iter().map(|l| l.values.as_slice())
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn into_layers(self) -> Vec<Layer> {
        self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.values.len()).sum()
    }

    pub fn ensure_matches(&self, spec: &ModelSpec) -> Result<()> {
        if self.spec_id != spec.id() {
            return Err(Error::SpecMismatch);
        }
        Ok(())
    }

    /// Bitwise equality of every stored value.
    pub fn bit_eq(&self, other: &ParameterSet) -> bool {
        self.spec_id == other.spec_id
            && self.layers.len() == other.layers.len()
            && self.layers.iter().zip(&other.layers).all(|(a, b)| {
                a.name == b.name
                    && a.values.len() == b.values.len()
                    && a.values
                        .iter()
                        .zip(&b.values)
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

pub(crate) fn check_layer_shapes<'a>(
    spec: &ModelSpec,
    layers: impl ExactSizeIterator<Item = (&'a str, usize)>,
) -> Result<()> {
    if layers.len() != spec.layer_count() {
        return Err(Error::shape(format!(
            "expected {} layers, found {}",
            spec.layer_count(),
            layers.len()
        )));
    }
    for (desc, (name, len)) in spec.layers().iter().zip(layers) {
        if desc.name != name {
            return Err(Error::shape(format!(
                "expected layer `{}`, found `{name}`",
                desc.name
            )));
        }
        if desc.param_count() != len {
            return Err(Error::shape(format!(
                "layer `{name}` expects {} values, found {len}",
                desc.param_count()
            )));
        }
    }
    Ok(())
}
