//! Feed-forward networks for the three adaptation roles: feature mapping,
//! attribute classifier and domain discriminator.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::graph::{Graph, Var};
use crate::tensor::{matmul_raw, sigmoid, Scalar, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid network spec: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    SourceEncoder,
    TargetEncoder,
    SourceClassifier,
    AdaptClassifier,
    Discriminator,
}

impl Role {
    pub const ALL: [Role; 5] = [
        Role::SourceEncoder,
        Role::TargetEncoder,
        Role::SourceClassifier,
        Role::AdaptClassifier,
        Role::Discriminator,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Role::SourceEncoder => "source_encoder",
            Role::TargetEncoder => "target_encoder",
            Role::SourceClassifier => "source_classifier",
            Role::AdaptClassifier => "adapt_classifier",
            Role::Discriminator => "discriminator",
        }
    }

    pub fn parse(s: &str) -> Option<Role> {
        Role::ALL.into_iter().find(|r| r.as_str() == s)
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum HiddenActivation {
    #[default]
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OutputActivation {
    /// Raw logits; losses apply their own nonlinearity.
    #[default]
    None,
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub layer_dims: Vec<usize>,
    pub hidden_activation: HiddenActivation,
    pub output_activation: OutputActivation,
}

impl MlpSpec {
    pub fn new(layer_dims: &[usize]) -> Self {
        Self {
            layer_dims: layer_dims.to_vec(),
            hidden_activation: HiddenActivation::Relu,
            output_activation: OutputActivation::None,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.layer_dims.len() < 2 {
            return Err(ModelError::Config(format!(
                "need at least two layer dims, got {:?}",
                self.layer_dims
            )));
        }
        if self.layer_dims.iter().any(|&d| d < 1) {
            return Err(ModelError::Config(format!(
                "layer dims must be positive, got {:?}",
                self.layer_dims
            )));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().expect("validated spec")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer<F: Scalar> {
    /// `fan_in × fan_out`; rows of the input are multiplied from the left.
    pub weight: Tensor<F>,
    pub bias: Tensor<F>,
}

/// Named weights of one network role.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<F: Scalar = f32> {
    pub role: Role,
    pub spec: MlpSpec,
    pub layers: Vec<Layer<F>>,
    frozen: bool,
}

/// Glorot-uniform weights, zero biases.
pub fn init_mlp<F: Scalar>(spec: &MlpSpec, role: Role, seed: u64) -> Result<ParamSet<F>, ModelError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = spec
        .layer_dims
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let data = (0..fan_in * fan_out)
                .map(|_| F::of(rng.gen_range(-limit..limit)))
                .collect();
            Ok(Layer {
                weight: Tensor::new(&[fan_in, fan_out], data)?,
                bias: Tensor::zeros(&[fan_out]),
            })
        })
        .collect::<Result<_, ModelError>>()?;
    Ok(ParamSet {
        role,
        spec: spec.clone(),
        layers,
        frozen: false,
    })
}

/// Deep copy under a new role; used to initialize M from M_a and C from C_a.
pub fn clone_params<F: Scalar>(src: &ParamSet<F>, new_role: Role) -> ParamSet<F> {
    ParamSet {
        role: new_role,
        spec: src.spec.clone(),
        layers: src
            .layers
            .iter()
            .map(|l| Layer {
                weight: l.weight.detached(),
                bias: l.bias.detached(),
            })
            .collect(),
        frozen: false,
    }
}

/// Graph handles for one bound [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: Vec<(Var, Var)>,
    output_activation: OutputActivation,
}

impl<F: Scalar> ParamSet<F> {
    /// Reassembles a param set from layers, e.g. after loading a checkpoint.
    pub fn from_layers(role: Role, layers: Vec<Layer<F>>) -> Result<Self, ModelError> {
        let mut dims = Vec::with_capacity(layers.len() + 1);
        for (i, l) in layers.iter().enumerate() {
            let (fan_in, fan_out) = l.weight.expect_matrix("from_layers")?;
            if i == 0 {
                dims.push(fan_in);
            } else if dims[i] != fan_in {
                return Err(ModelError::Config(format!(
                    "layer {i} expects {fan_in} inputs but previous layer emits {}",
                    dims[i]
                )));
            }
            if l.bias.len() != fan_out {
                return Err(ModelError::Config(format!(
                    "layer {i} bias has {} entries, expected {fan_out}",
                    l.bias.len()
                )));
            }
            dims.push(fan_out);
        }
        let spec = MlpSpec::new(&dims);
        spec.validate()?;
        Ok(Self {
            role,
            spec,
            layers,
            frozen: false,
        })
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Fixes the weights: binding never yields trainable leaves again.
    pub fn freeze(mut self) -> Self {
        self.frozen = true;
        self
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// `(name, tensor)` pairs in layer order: `l0.weight`, `l0.bias`, ...
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| [(format!("l{i}.weight"), &l.weight), (format!("l{i}.bias"), &l.bias)])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<F>> {
        self.layers.iter_mut().flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    /// SHA-256 over role, names, shapes and raw bytes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.role.as_str().as_bytes());
        for (name, t) in self.named_tensors() {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for &v in t.data() {
                h.update(v.as_f64().to_bits().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn cast<G: Scalar>(&self) -> ParamSet<G> {
        ParamSet {
            role: self.role,
            spec: self.spec.clone(),
            layers: self
                .layers
                .iter()
                .map(|l| Layer {
                    weight: l.weight.cast(),
                    bias: l.bias.cast(),
                })
                .collect(),
            frozen: self.frozen,
        }
    }

    /// Records the weights on `g`. Frozen sets, or `trainable == false`, bind
    /// as constants.
    pub fn bind(&self, g: &mut Graph<F>, trainable: bool) -> Bound {
        let trainable = trainable && !self.frozen;
        let vars = self
            .layers
            .iter()
            .map(|l| {
                let (w, b) = (l.weight.detached(), l.bias.detached());
                if trainable {
                    (g.leaf(w.with_grad()), g.leaf(b.with_grad()))
                } else {
                    (g.constant(w), g.constant(b))
                }
            })
            .collect();
        Bound {
            vars,
            output_activation: self.spec.output_activation,
        }
    }

    /// Untracked forward pass.
    pub fn infer(&self, x: &Tensor<F>) -> Result<Tensor<F>, ModelError> {
        let (rows, cols) = x.expect_matrix("forward")?;
        self.check_input(cols)?;
        let mut cur = x.data().to_vec();
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter().enumerate() {
            let (fan_in, fan_out) = (l.weight.shape()[0], l.weight.shape()[1]);
            let mut next = matmul_raw(&cur, l.weight.data(), rows, fan_in, fan_out);
            for row in next.chunks_mut(fan_out) {
                for (v, &b) in row.iter_mut().zip(l.bias.data()) {
                    *v = *v + b;
                }
            }
            if i < last {
                for v in &mut next {
                    *v = v.max(F::zero());
                }
            } else if self.spec.output_activation == OutputActivation::Sigmoid {
                for v in &mut next {
                    *v = sigmoid(*v);
                }
            }
            cur = next;
        }
        Ok(Tensor::new(&[rows, self.spec.output_dim()], cur)?)
    }

    fn check_input(&self, cols: usize) -> Result<(), ModelError> {
        if cols != self.spec.input_dim() {
            return Err(TensorError::Shape {
                op: "forward",
                lhs: vec![cols],
                rhs: self.spec.layer_dims.clone(),
            }
            .into());
        }
        Ok(())
    }
}

impl Bound {
    /// Differentiable forward pass of a bound network.
    pub fn forward<F: Scalar>(&self, g: &mut Graph<F>, x: Var) -> Result<Var, TensorError> {
        let mut cur = x;
        let last = self.vars.len() - 1;
        for (i, &(w, b)) in self.vars.iter().enumerate() {
            let z = g.matmul(cur, w)?;
            cur = g.add_bias(z, b)?;
            if i < last {
                cur = g.relu(cur)?;
            } else if self.output_activation == OutputActivation::Sigmoid {
                cur = g.sigmoid(cur)?;
            }
        }
        Ok(cur)
    }

    /// Flattened `[w0, b0, w1, b1, ...]`, matching [`ParamSet::tensors_mut`].
    pub fn flat(&self) -> Vec<Var> {
        self.vars.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

/// Differentiable forward pass: binds `params` onto `g` and applies it to `x`.
pub fn forward<F: Scalar>(
    params: &ParamSet<F>,
    g: &mut Graph<F>,
    x: Var,
    trainable: bool,
) -> Result<(Var, Bound), ModelError> {
    params.check_input(g.value(x).cols())?;
    let bound = params.bind(g, trainable);
    let out = bound.forward(g, x)?;
    Ok((out, bound))
}

/// Layer widths for the encoder, classifier and discriminator.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArchConfig {
    pub d_in: usize,
    pub encoder_hidden: usize,
    pub feat_dim: usize,
    pub classifier_hidden: usize,
    pub m: usize,
    /// Discriminator hidden width when the auxiliary classifier is on.
    pub disc_hidden_with_classifier: usize,
    pub disc_hidden_without_classifier: usize,
    pub classifier_enabled: bool,
}

impl ArchConfig {
    /// Desk-scale defaults: encoder `d_in→64→32`, classifier `32→16→m`,
    /// discriminator `32→12→1` (or `32→4→1` without the classifier).
    pub fn desk(d_in: usize, m: usize, classifier_enabled: bool) -> Self {
        Self {
            d_in,
            encoder_hidden: 64,
            feat_dim: 32,
            classifier_hidden: 16,
            m,
            disc_hidden_with_classifier: 12,
            disc_hidden_without_classifier: 4,
            classifier_enabled,
        }
    }

    /// Full-size heads on a 1024-dim feature: classifier `1024→512→m`,
    /// discriminator `1024→384→1` or `1024→128→1`.
    pub fn full_scale(d_in: usize, m: usize, classifier_enabled: bool) -> Self {
        Self {
            d_in,
            encoder_hidden: 1024,
            feat_dim: 1024,
            classifier_hidden: 512,
            m,
            disc_hidden_with_classifier: 384,
            disc_hidden_without_classifier: 128,
            classifier_enabled,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpecs {
    pub encoder: MlpSpec,
    pub classifier: MlpSpec,
    pub discriminator: MlpSpec,
}

pub fn default_specs(cfg: &ArchConfig) -> NetworkSpecs {
    let disc_hidden = if cfg.classifier_enabled {
        cfg.disc_hidden_with_classifier
    } else {
        cfg.disc_hidden_without_classifier
    };
    NetworkSpecs {
        encoder: MlpSpec::new(&[cfg.d_in, cfg.encoder_hidden, cfg.feat_dim]),
        classifier: MlpSpec::new(&[cfg.feat_dim, cfg.classifier_hidden, cfg.m]),
        discriminator: MlpSpec::new(&[cfg.feat_dim, disc_hidden, 1]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_shaped() {
        let spec = MlpSpec::new(&[32, 64, 32]);
        let a = init_mlp::<f32>(&spec, Role::SourceEncoder, 7).unwrap();
        let b = init_mlp::<f32>(&spec, Role::SourceEncoder, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(a.layers[0].weight.shape(), &[32, 64]);
        assert_eq!(a.layers[1].weight.shape(), &[64, 32]);
        assert_eq!(a.layers[0].bias.len(), 64);
        assert_eq!(a.layers[1].bias.len(), 32);
        let c = init_mlp::<f32>(&spec, Role::SourceEncoder, 8).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn init_weights_are_centered_and_bounded() {
        // 100 × 100 = 10⁴ draws.
        let spec = MlpSpec::new(&[100, 100]);
        let p = init_mlp::<f64>(&spec, Role::Discriminator, 1).unwrap();
        let w = p.layers[0].weight.data();
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        assert!(mean.abs() < 0.01, "{mean}");
        let limit = (6.0f64 / 200.0).sqrt();
        assert!(w.iter().all(|v| v.abs() <= limit));
        assert!(p.layers[0].bias.data().iter().all(|&b| b == 0.0));
    }

    #[test]
    fn degenerate_specs_are_rejected() {
        assert!(init_mlp::<f32>(&MlpSpec::new(&[4]), Role::Discriminator, 0).is_err());
        assert!(init_mlp::<f32>(&MlpSpec::new(&[4, 0, 1]), Role::Discriminator, 0).is_err());
    }

    #[test]
    fn zero_weight_classifier_gives_half() {
        let spec = MlpSpec::new(&[3, 4, 2]);
        let mut p = init_mlp::<f64>(&spec, Role::SourceClassifier, 0).unwrap();
        for t in p.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 3.0], vec![0.5, 0.5, 0.5]]).unwrap();
        let logits = p.infer(&x).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        assert!(logits.data().iter().all(|&v| sigmoid(v) == 0.5));
    }

    #[test]
    fn hand_computed_single_layer() {
        let layer = Layer {
            weight: Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap(),
            bias: Tensor::new(&[1], vec![0.0]).unwrap(),
        };
        let p = ParamSet::from_layers(Role::SourceEncoder, vec![layer]).unwrap();
        let x = Tensor::from_rows(&[vec![2.0f64, 3.0]]).unwrap();
        assert_eq!(p.infer(&x).unwrap().data(), &[5.0]);

        let mut g = Graph::new();
        let xv = g.constant(x);
        let (out, _) = forward(&p, &mut g, xv, true).unwrap();
        assert_eq!(g.value(out).data(), &[5.0]);
    }

    #[test]
    fn graph_and_untracked_forward_agree_bitwise() {
        let spec = MlpSpec::new(&[5, 7, 3]);
        let p = init_mlp::<f32>(&spec, Role::SourceEncoder, 3).unwrap();
        let x = Tensor::new(&[4, 5], (0..20).map(|i| (i as f32 * 0.37).sin()).collect()).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (out, _) = forward(&p, &mut g, xv, true).unwrap();
        assert_eq!(g.value(out).data(), p.infer(&x).unwrap().data());
        let q = clone_params(&p, Role::TargetEncoder);
        assert_eq!(q.infer(&x).unwrap(), p.infer(&x).unwrap());
    }

    #[test]
    fn input_width_mismatch() {
        let p = init_mlp::<f32>(&MlpSpec::new(&[5, 2]), Role::SourceEncoder, 0).unwrap();
        assert!(p.infer(&Tensor::zeros(&[1, 4])).is_err());
    }

    #[test]
    fn clone_is_independent() {
        let p = init_mlp::<f32>(&MlpSpec::new(&[4, 3, 2]), Role::SourceEncoder, 0).unwrap();
        let before = p.checksum();
        let mut q = clone_params(&p, Role::TargetEncoder);
        for t in q.tensors_mut() {
            t.data_mut()[0] += 1.0;
        }
        assert_eq!(p.checksum(), before);
        assert_eq!(q.role, Role::TargetEncoder);
    }

    #[test]
    fn frozen_sets_bind_as_constants() {
        let p = init_mlp::<f64>(&MlpSpec::new(&[2, 2]), Role::SourceEncoder, 0)
            .unwrap()
            .freeze();
        let mut g = Graph::new();
        let b = p.bind(&mut g, true);
        assert!(b.flat().iter().all(|&v| !g.requires_grad(v)));
    }

    #[test]
    fn default_spec_shapes() {
        let s = default_specs(&ArchConfig::desk(32, 8, true));
        assert_eq!(s.encoder.layer_dims, vec![32, 64, 32]);
        assert_eq!(s.classifier.layer_dims, vec![32, 16, 8]);
        assert_eq!(s.discriminator.layer_dims, vec![32, 12, 1]);
        let s = default_specs(&ArchConfig::desk(32, 8, false));
        assert_eq!(s.discriminator.layer_dims, vec![32, 4, 1]);

        let full = default_specs(&ArchConfig::full_scale(2048, 70, true));
        assert_eq!(full.classifier.layer_dims, vec![1024, 512, 70]);
        assert_eq!(full.discriminator.layer_dims, vec![1024, 384, 1]);
        let full = default_specs(&ArchConfig::full_scale(2048, 70, false));
        assert_eq!(full.discriminator.layer_dims, vec![1024, 128, 1]);
    }
}
