//! Sequential classifiers split into a body and a student head.
//!
//! The head is the suffix of the layer stack that starts at the
//! `head_len`-th parameterized layer counted from the end. Activations and
//! pooling layers that sit between head layers belong to the head; those in
//! front of the first head layer belong to the body.
//!
//! Teachers are [`HeadSnapshot`]s: frozen copies of head parameters that can be
//! applied to the body output in place of the student.
//!
//! ```
//! use dfl::model::{build_model, InitScheme, LayerSpec};
//!
//! let specs = [LayerSpec::dense(4, 3), LayerSpec::Relu, LayerSpec::dense(3, 2)];
//! let model = build_model(&[4], &specs, 1, InitScheme::KaimingUniform, 7).unwrap();
//! assert_eq!(model.head_specs(), &[LayerSpec::dense(3, 2)]);
//!
//! let model = build_model(&[4], &specs, 2, InitScheme::KaimingUniform, 7).unwrap();
//! assert_eq!(model.head_specs().len(), 3);
//! ```

mod checkpoint;
mod layer;

use std::ops::Range;

use sha2::{Digest, Sha256};
use thiserror::Error;

pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use layer::{init_params, InitScheme, LayerSpec};

use crate::rng::{self, Purpose};
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("incompatible layers {from} -> {to}: {reason}")]
    Build {
        from: String,
        to: String,
        reason: String,
    },
    #[error("head length {head_len} must be in 1..={available} parameterized layers")]
    HeadLen { head_len: usize, available: usize },
    #[error("head manifest mismatch: expected {expected:?}, got {actual:?}")]
    Manifest {
        expected: Vec<Vec<usize>>,
        actual: Vec<Vec<usize>>,
    },
    #[error("initialisation error: {0}")]
    Init(String),
    #[error("corrupt checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    spec: LayerSpec,
    params: Vec<Tensor>,
}

impl Layer {
    pub fn spec(&self) -> &LayerSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    input_shape: Vec<usize>,
    layers: Vec<Layer>,
    head_len: usize,
    head_start: usize,
    init: InitScheme,
}

/// Graph handles for every model parameter, grouped by layer.
#[derive(Debug, Clone)]
pub struct ParamVars {
    per_layer: Vec<Vec<Var>>,
}

impl ParamVars {
    pub fn iter(&self) -> impl Iterator<Item = Var> + '_ {
        self.per_layer.iter().flatten().copied()
    }
}

/// Which head to run on top of the body output.
#[derive(Debug, Clone, Copy)]
pub enum Head<'a> {
    Student(&'a ParamVars),
    Teacher(&'a HeadSnapshot),
}

/// Immutable copy of head parameters in layer order.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadSnapshot {
    manifest: Vec<Vec<usize>>,
    params: Vec<Vec<f64>>,
}

impl HeadSnapshot {
    pub fn new(manifest: Vec<Vec<usize>>, params: Vec<Vec<f64>>) -> Result<Self, ModelError> {
        let sizes: Vec<Vec<usize>> = params.iter().map(|p| vec![p.len()]).collect();
        if manifest.len() != params.len()
            || manifest
                .iter()
                .zip(&params)
                .any(|(s, p)| s.iter().product::<usize>() != p.len())
        {
            return Err(ModelError::Manifest {
                expected: manifest,
                actual: sizes,
            });
        }
        Ok(Self { manifest, params })
    }

    pub fn manifest(&self) -> &[Vec<usize>] {
        &self.manifest
    }

    pub fn params(&self) -> &[Vec<f64>] {
        &self.params
    }

    /// Content digest over shapes and the bit patterns of every value.
    pub fn fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for (shape, values) in self.manifest.iter().zip(&self.params) {
            for d in shape {
                h.update((*d as u64).to_le_bytes());
            }
            for v in values {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// Builds a sequential model for per-sample `input_shape`, checking shapes
/// layer by layer.
pub fn build_model(
    input_shape: &[usize],
    specs: &[LayerSpec],
    head_len: usize,
    init: InitScheme,
    seed: u64,
) -> Result<Model, ModelError> {
    let head_start = locate_head(input_shape, specs, head_len)?;
    let mut rng = init_rng(seed);
    let layers = specs
        .iter()
        .map(|spec| {
            let values = layer::init_layer(spec, init, &mut rng)?;
            let params = spec
                .param_shapes()
                .into_iter()
                .zip(values)
                .map(|(shape, data)| Tensor::from_parts(shape, data).with_requires_grad())
                .collect();
            Ok(Layer {
                spec: *spec,
                params,
            })
        })
        .collect::<Result<_, ModelError>>()?;
    Ok(Model {
        input_shape: input_shape.to_vec(),
        layers,
        head_len,
        head_start,
        init,
    })
}

/// The random stream [`build_model`] draws its parameters from.
pub fn init_rng(seed: u64) -> rng::Rng {
    rng::stream(seed, Purpose::Init, 0)
}

/// Validates shapes and returns the index of the first head layer.
fn locate_head(
    input_shape: &[usize],
    specs: &[LayerSpec],
    head_len: usize,
) -> Result<usize, ModelError> {
    let mut shape = input_shape.to_vec();
    let mut prev = format!("input{input_shape:?}");
    for spec in specs {
        shape = spec.output_shape(&shape).map_err(|reason| ModelError::Build {
            from: prev.clone(),
            to: spec.to_string(),
            reason,
        })?;
        prev = spec.to_string();
    }
    let weighted: Vec<usize> = specs
        .iter()
        .enumerate()
        .filter(|(_, s)| s.is_parameterized())
        .map(|(i, _)| i)
        .collect();
    if head_len == 0 || head_len > weighted.len() {
        return Err(ModelError::HeadLen {
            head_len,
            available: weighted.len(),
        });
    }
    Ok(weighted[weighted.len() - head_len])
}

/// Reference convolutional classifier for `[channels, height, width]` images.
///
/// Two conv/relu/pool stages, a 128-unit hidden dense layer and the output layer.
pub fn tiny_cnn(channels: usize, height: usize, width: usize, classes: usize) -> Vec<LayerSpec> {
    let flat = 32 * (height / 4) * (width / 4);
    vec![
        LayerSpec::conv(channels, 16, 3, 1),
        LayerSpec::Relu,
        LayerSpec::maxpool(2),
        LayerSpec::conv(16, 32, 3, 1),
        LayerSpec::Relu,
        LayerSpec::maxpool(2),
        LayerSpec::Flatten,
        LayerSpec::dense(flat, 128),
        LayerSpec::Relu,
        LayerSpec::dense(128, classes),
    ]
}

/// Three-layer perceptron for vector inputs.
pub fn tiny_mlp(inputs: usize, hidden: usize, classes: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::dense(inputs, hidden),
        LayerSpec::Relu,
        LayerSpec::dense(hidden, hidden),
        LayerSpec::Relu,
        LayerSpec::dense(hidden, classes),
    ]
}

/// VGG-16 for small images: thirteen 3x3 convolutions in five pooled stages
/// followed by two 4096-unit hidden layers and the classifier. There is no
/// batch normalization or dropout.
pub fn vgg16(channels: usize, height: usize, width: usize, classes: usize) -> Vec<LayerSpec> {
    const STAGES: [(usize, usize); 5] = [(64, 2), (128, 2), (256, 3), (512, 3), (512, 3)];
    let mut specs = Vec::new();
    let mut c = channels;
    for (filters, convs) in STAGES {
        for _ in 0..convs {
            specs.push(LayerSpec::conv(c, filters, 3, 1));
            specs.push(LayerSpec::Relu);
            c = filters;
        }
        specs.push(LayerSpec::maxpool(2));
    }
    let flat = 512 * (height / 32) * (width / 32);
    specs.extend([
        LayerSpec::Flatten,
        LayerSpec::dense(flat, 4096),
        LayerSpec::Relu,
        LayerSpec::dense(4096, 4096),
        LayerSpec::Relu,
        LayerSpec::dense(4096, classes),
    ]);
    specs
}

impl Model {
    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    pub fn head_len(&self) -> usize {
        self.head_len
    }

    pub fn init_scheme(&self) -> InitScheme {
        self.init
    }

    pub fn body_specs(&self) -> Vec<LayerSpec> {
        self.layers[..self.head_start].iter().map(|l| l.spec).collect()
    }

    pub fn head_specs(&self) -> Vec<LayerSpec> {
        self.layers[self.head_start..].iter().map(|l| l.spec).collect()
    }

    /// All parameter tensors in layer order; the head's are a suffix.
    pub fn params(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| l.params.iter())
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.params.iter_mut())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.params.len()).sum()
    }

    /// Indices (into [`Model::params`]) of the head parameters.
    pub fn head_param_range(&self) -> Range<usize> {
        let body: usize = self.layers[..self.head_start]
            .iter()
            .map(|l| l.params.len())
            .sum();
        body..self.param_count()
    }

    pub fn head_manifest(&self) -> Vec<Vec<usize>> {
        self.layers[self.head_start..]
            .iter()
            .flat_map(|l| l.params.iter().map(|p| p.shape().to_vec()))
            .collect()
    }

    /// Registers every parameter on `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> ParamVars {
        ParamVars {
            per_layer: self
                .layers
                .iter()
                .map(|l| l.params.iter().map(|p| g.leaf(p)).collect())
                .collect(),
        }
    }

    /// Runs the body on a batch `x` of shape `[B, ..input_shape]`.
    pub fn forward_body(&self, g: &mut Graph, vars: &ParamVars, x: Var) -> Result<Var, ModelError> {
        let expected: Vec<usize> = self.input_shape.clone();
        if g.value(x).shape().get(1..) != Some(&expected[..]) {
            return Err(TensorError::Dimension {
                op: "forward_body",
                lhs: g.value(x).shape().to_vec(),
                rhs: expected,
            }
            .into());
        }
        let mut h = x;
        for (layer, pv) in self.layers[..self.head_start]
            .iter()
            .zip(&vars.per_layer)
        {
            h = apply_layer(g, &layer.spec, pv, h)?;
        }
        Ok(h)
    }

    /// Runs a head on the body output. A teacher head sees a detached copy of
    /// the body output and constant parameters, so nothing behind its logits
    /// receives gradient.
    pub fn apply_head(&self, g: &mut Graph, body_out: Var, head: Head<'_>) -> Result<Var, ModelError> {
        let head_layers = &self.layers[self.head_start..];
        match head {
            Head::Student(vars) => {
                let mut h = body_out;
                for (layer, pv) in head_layers.iter().zip(&vars.per_layer[self.head_start..]) {
                    h = apply_layer(g, &layer.spec, pv, h)?;
                }
                Ok(h)
            }
            Head::Teacher(snap) => {
                self.check_manifest(snap)?;
                let mut h = g.detach(body_out);
                let mut values = snap.params.iter().zip(&snap.manifest);
                for layer in head_layers {
                    let pv: Vec<Var> = values
                        .by_ref()
                        .take(layer.params.len())
                        .map(|(data, shape)| {
                            g.constant(Tensor::from_parts(shape.clone(), data.clone()))
                        })
                        .collect();
                    h = apply_layer(g, &layer.spec, &pv, h)?;
                }
                Ok(h)
            }
        }
    }

    /// Body plus student head.
    pub fn forward(&self, g: &mut Graph, vars: &ParamVars, x: Var) -> Result<Var, ModelError> {
        let h = self.forward_body(g, vars, x)?;
        self.apply_head(g, h, Head::Student(vars))
    }

    /// Student logits for a batch without keeping the graph around.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g);
        let xv = g.constant(x.clone());
        let out = self.forward(&mut g, &vars, xv)?;
        Ok(g.value(out).clone())
    }

    pub fn snapshot_head(&self) -> HeadSnapshot {
        let head = &self.layers[self.head_start..];
        HeadSnapshot {
            manifest: self.head_manifest(),
            params: head
                .iter()
                .flat_map(|l| l.params.iter().map(|p| p.data().to_vec()))
                .collect(),
        }
    }

    /// Overwrites the student head. Body parameters are untouched.
    ///
    /// Optimizer state for the head is not owned by the model; callers that
    /// train should go through [`crate::engine::load_student`], which also
    /// clears head momentum.
    pub fn load_head(&mut self, snap: &HeadSnapshot) -> Result<(), ModelError> {
        self.check_manifest(snap)?;
        let start = self.head_start;
        let targets = self.layers[start..].iter_mut().flat_map(|l| l.params.iter_mut());
        for (param, values) in targets.zip(&snap.params) {
            param.data_mut().copy_from_slice(values);
        }
        Ok(())
    }

    /// A head freshly drawn from the model's init scheme.
    pub fn random_head(&self, rng: &mut rng::Rng) -> Result<HeadSnapshot, ModelError> {
        let mut params = Vec::new();
        for layer in &self.layers[self.head_start..] {
            params.extend(layer::init_layer(&layer.spec, self.init, rng)?);
        }
        HeadSnapshot::new(self.head_manifest(), params)
    }

    fn check_manifest(&self, snap: &HeadSnapshot) -> Result<(), ModelError> {
        let expected = self.head_manifest();
        if snap.manifest != expected {
            return Err(ModelError::Manifest {
                expected,
                actual: snap.manifest.clone(),
            });
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    /// Adds the graph's leaf gradients into the parameter grad buffers.
    pub fn accumulate_grads(&mut self, g: &Graph, vars: &ParamVars) -> Result<(), ModelError> {
        for (param, var) in self.params_mut().zip(vars.iter()) {
            if let Some(grad) = g.grad(var) {
                param.accumulate_grad(grad)?;
            }
        }
        Ok(())
    }

    /// Digest of the body parameters.
    pub fn body_fingerprint(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for p in self.params().take(self.head_param_range().start) {
            for v in p.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        h.finalize().into()
    }

    pub(crate) fn from_parts(
        input_shape: Vec<usize>,
        specs: Vec<LayerSpec>,
        params: Vec<Tensor>,
        head_len: usize,
        init: InitScheme,
    ) -> Result<Self, ModelError> {
        let head_start = locate_head(&input_shape, &specs, head_len)?;
        let mut params = params.into_iter();
        let mut layers = Vec::with_capacity(specs.len());
        for spec in specs {
            let mut own = Vec::new();
            for shape in spec.param_shapes() {
                let p = params
                    .next()
                    .ok_or_else(|| ModelError::Checkpoint("too few parameter tensors".into()))?;
                if p.shape() != shape {
                    return Err(ModelError::Checkpoint(format!(
                        "{spec}: parameter shape {:?}, expected {shape:?}",
                        p.shape()
                    )));
                }
                own.push(p.with_requires_grad());
            }
            layers.push(Layer { spec, params: own });
        }
        if params.next().is_some() {
            return Err(ModelError::Checkpoint("extra parameter tensors".into()));
        }
        Ok(Self {
            input_shape,
            layers,
            head_len,
            head_start,
            init,
        })
    }
}

fn apply_layer(g: &mut Graph, spec: &LayerSpec, params: &[Var], x: Var) -> Result<Var, TensorError> {
    match *spec {
        LayerSpec::Dense { .. } => {
            let y = g.matmul(x, params[0])?;
            g.add_bias(y, params[1])
        }
        LayerSpec::Conv { stride, pad, .. } => g.conv2d(x, params[0], params[1], stride, pad),
        LayerSpec::Relu => Ok(g.relu(x)),
        LayerSpec::MaxPool { size, stride } => g.maxpool2d(x, size, stride),
        LayerSpec::Flatten => g.flatten(x),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mlp(head_len: usize, seed: u64) -> Model {
        let specs = [LayerSpec::dense(4, 3), LayerSpec::Relu, LayerSpec::dense(3, 2)];
        build_model(&[4], &specs, head_len, InitScheme::KaimingUniform, seed).unwrap()
    }

    fn batch() -> Tensor {
        Tensor::new(vec![2, 4], vec![0.5, -1.0, 0.25, 2.0, -0.3, 0.8, 1.5, -0.7]).unwrap()
    }

    #[test]
    fn head_suffix_rule() {
        let m = mlp(1, 0);
        assert_eq!(m.head_specs(), vec![LayerSpec::dense(3, 2)]);
        assert_eq!(m.body_specs(), vec![LayerSpec::dense(4, 3), LayerSpec::Relu]);
        assert_eq!(m.head_param_range(), 2..4);

        let m = mlp(2, 0);
        assert_eq!(m.head_specs().len(), 3);
        assert!(m.body_specs().is_empty());
        assert_eq!(m.head_param_range(), 0..4);
    }

    #[test]
    fn head_len_bounds() {
        let specs = [LayerSpec::dense(4, 3), LayerSpec::Relu, LayerSpec::dense(3, 2)];
        for bad in [0, 3] {
            assert!(matches!(
                build_model(&[4], &specs, bad, InitScheme::default(), 0),
                Err(ModelError::HeadLen { .. })
            ));
        }
    }

    #[test]
    fn incompatible_pair_is_named() {
        let specs = [LayerSpec::dense(4, 3), LayerSpec::Relu, LayerSpec::dense(5, 2)];
        let err = build_model(&[4], &specs, 1, InitScheme::default(), 0).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("relu -> dense:5:2"), "{msg}");
    }

    #[test]
    fn equal_seeds_build_identical_models() {
        assert_eq!(mlp(1, 9), mlp(1, 9));
        assert_ne!(mlp(1, 9), mlp(1, 10));
    }

    #[test]
    fn tiny_cnn_shapes_check() {
        let specs = tiny_cnn(3, 16, 16, 3);
        for l in [1, 3] {
            let m = build_model(&[3, 16, 16], &specs, l, InitScheme::default(), 1).unwrap();
            assert_eq!(m.head_len(), l);
        }
        let m = build_model(&[3, 16, 16], &specs, 3, InitScheme::default(), 1).unwrap();
        assert_eq!(m.head_specs()[0], LayerSpec::conv(16, 32, 3, 1));
    }

    #[test]
    fn vgg16_head_is_the_classifier_block() {
        let specs = vgg16(3, 32, 32, 100);
        assert_eq!(specs.iter().filter(|s| s.is_parameterized()).count(), 16);
        let start = locate_head(&[3, 32, 32], &specs, 3).unwrap();
        assert_eq!(specs[start], LayerSpec::dense(512, 4096));
    }

    #[test]
    fn snapshot_reproduces_student_logits() {
        let m = mlp(1, 3);
        let snap = m.snapshot_head();
        let mut g = Graph::new();
        let vars = m.bind(&mut g);
        let x = g.constant(batch());
        let h = m.forward_body(&mut g, &vars, x).unwrap();
        let student = m.apply_head(&mut g, h, Head::Student(&vars)).unwrap();
        let teacher = m.apply_head(&mut g, h, Head::Teacher(&snap)).unwrap();
        assert_eq!(g.value(student).data(), g.value(teacher).data());
    }

    #[test]
    fn teacher_path_receives_no_gradient() {
        let m = mlp(1, 3);
        let snap = m.random_head(&mut rng::stream(5, Purpose::Teachers, 0)).unwrap();
        let mut g = Graph::new();
        let vars = m.bind(&mut g);
        let x = g.constant(batch());
        let h = m.forward_body(&mut g, &vars, x).unwrap();
        let t = m.apply_head(&mut g, h, Head::Teacher(&snap)).unwrap();
        let loss = g.cross_entropy(t, &[0, 1]).unwrap();
        g.backward(loss).unwrap();
        for v in vars.iter() {
            assert!(g.grad(v).is_none_or(|d| d.iter().all(|x| *x == 0.0)));
        }
    }

    #[test]
    fn zero_head_gives_zero_logits() {
        let mut m = mlp(1, 3);
        let manifest = m.head_manifest();
        let zeros = manifest.iter().map(|s| vec![0.0; s.iter().product()]).collect();
        m.load_head(&HeadSnapshot::new(manifest, zeros).unwrap()).unwrap();
        let out = m.predict(&batch()).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn snapshot_of_fresh_model_equals_init_draw() {
        let specs = [LayerSpec::dense(4, 2)];
        let m = build_model(&[4], &specs, 1, InitScheme::KaimingUniform, 21).unwrap();
        let w = init_params(&[4, 2], 4, InitScheme::KaimingUniform, &mut init_rng(21)).unwrap();
        assert_eq!(m.snapshot_head().params(), &[w, vec![0.0; 2]]);
        assert_eq!(m.snapshot_head(), m.snapshot_head());
    }

    #[test]
    fn load_round_trips_and_leaves_body() {
        let mut m = mlp(1, 3);
        let other = mlp(1, 4).snapshot_head();
        let body = m.body_fingerprint();
        m.load_head(&other).unwrap();
        assert_eq!(m.snapshot_head(), other);
        assert_eq!(m.body_fingerprint(), body);
    }

    #[test]
    fn load_rejects_foreign_manifest() {
        let mut m = mlp(1, 3);
        let foreign = mlp(2, 3).snapshot_head();
        assert!(matches!(m.load_head(&foreign), Err(ModelError::Manifest { .. })));
    }

    #[test]
    fn partition_covers_all_params_disjointly() {
        let m = build_model(&[3, 8, 8], &tiny_cnn(3, 8, 8, 4), 3, InitScheme::default(), 2).unwrap();
        let head = m.head_param_range();
        assert_eq!(head.end, m.param_count());
        assert_eq!(m.head_manifest().len(), head.len());
        let body_shapes: Vec<_> = m.params().take(head.start).map(|p| p.shape().to_vec()).collect();
        assert_eq!(body_shapes.len() + head.len(), m.param_count());
    }
}
