use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::ModelError;

/// One entry of a sequential architecture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerSpec {
    Dense {
        inputs: usize,
        outputs: usize,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    MaxPool {
        size: usize,
        stride: usize,
    },
    Flatten,
}

impl LayerSpec {
    pub fn dense(inputs: usize, outputs: usize) -> Self {
        LayerSpec::Dense { inputs, outputs }
    }

    pub fn conv(in_channels: usize, out_channels: usize, kernel: usize, pad: usize) -> Self {
        LayerSpec::Conv {
            in_channels,
            out_channels,
            kernel,
            stride: 1,
            pad,
        }
    }

    pub fn maxpool(size: usize) -> Self {
        LayerSpec::MaxPool { size, stride: size }
    }

    pub fn is_parameterized(&self) -> bool {
        matches!(self, LayerSpec::Dense { .. } | LayerSpec::Conv { .. })
    }

    /// Shapes of the weight and bias tensors, in that order.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => vec![vec![inputs, outputs], vec![outputs]],
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![
                vec![out_channels, in_channels, kernel, kernel],
                vec![out_channels],
            ],
            _ => vec![],
        }
    }

    pub fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Dense { inputs, .. } => inputs,
            LayerSpec::Conv {
                in_channels,
                kernel,
                ..
            } => in_channels * kernel * kernel,
            _ => 0,
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>, String> {
        match *self {
            LayerSpec::Dense { inputs, outputs } => {
                if input != [inputs] {
                    return Err(format!("expected input [{inputs}], got {input:?}"));
                }
                Ok(vec![outputs])
            }
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
            } => {
                let [c, h, w] = input else {
                    return Err(format!("expected [C, H, W] input, got {input:?}"));
                };
                if *c != in_channels {
                    return Err(format!("expected {in_channels} channels, got {c}"));
                }
                if stride == 0 || kernel == 0 {
                    return Err("kernel and stride must be positive".into());
                }
                let (ph, pw) = (h + 2 * pad, w + 2 * pad);
                if kernel > ph || kernel > pw {
                    return Err(format!("kernel {kernel} larger than padded input {ph}x{pw}"));
                }
                if (ph - kernel) % stride != 0 || (pw - kernel) % stride != 0 {
                    return Err("output size is not integral".into());
                }
                Ok(vec![
                    out_channels,
                    (ph - kernel) / stride + 1,
                    (pw - kernel) / stride + 1,
                ])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
            LayerSpec::MaxPool { size, stride } => {
                let [c, h, w] = input else {
                    return Err(format!("expected [C, H, W] input, got {input:?}"));
                };
                if size == 0 || stride == 0 || size > *h || size > *w {
                    return Err(format!("window {size} does not fit {h}x{w}"));
                }
                if (h - size) % stride != 0 || (w - size) % stride != 0 {
                    return Err(format!("{h}x{w} does not tile with window {size}"));
                }
                Ok(vec![*c, (h - size) / stride + 1, (w - size) / stride + 1])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
        }
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Dense { inputs, outputs } => write!(f, "dense:{inputs}:{outputs}"),
            LayerSpec::Conv {
                in_channels,
                out_channels,
                kernel,
                stride,
                pad,
            } => write!(
                f,
                "conv:{in_channels}:{out_channels}:{kernel}:{stride}:{pad}"
            ),
            LayerSpec::Relu => f.write_str("relu"),
            LayerSpec::MaxPool { size, stride } => write!(f, "maxpool:{size}:{stride}"),
            LayerSpec::Flatten => f.write_str("flatten"),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = String;

    /// `dense:IN:OUT`, `conv:IN:OUT:K[:STRIDE[:PAD]]`, `relu`, `maxpool:K[:STRIDE]`, `flatten`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.trim().split(':');
        let kind = parts.next().unwrap_or_default();
        let nums = parts
            .map(|p| p.parse::<usize>().map_err(|e| format!("{s}: {e}")))
            .collect::<Result<Vec<_>, _>>()?;
        let spec = match (kind, nums.as_slice()) {
            ("dense", [i, o]) => LayerSpec::dense(*i, *o),
            ("conv", [i, o, k]) => LayerSpec::conv(*i, *o, *k, 0),
            ("conv", [i, o, k, s]) => LayerSpec::Conv {
                in_channels: *i,
                out_channels: *o,
                kernel: *k,
                stride: *s,
                pad: 0,
            },
            ("conv", [i, o, k, s, p]) => LayerSpec::Conv {
                in_channels: *i,
                out_channels: *o,
                kernel: *k,
                stride: *s,
                pad: *p,
            },
            ("relu", []) => LayerSpec::Relu,
            ("maxpool", [k]) => LayerSpec::maxpool(*k),
            ("maxpool", [k, s]) => LayerSpec::MaxPool {
                size: *k,
                stride: *s,
            },
            ("flatten", []) => LayerSpec::Flatten,
            _ => return Err(format!("unrecognised layer `{s}`")),
        };
        Ok(spec)
    }
}

/// Weight initialisation; biases always start at zero.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum InitScheme {
    /// `U(-√(6/fan_in), √(6/fan_in))`
    #[default]
    KaimingUniform,
    /// `U(-a, a)`
    Uniform(f64),
}

impl InitScheme {
    pub fn bound(&self, fan_in: usize) -> f64 {
        match *self {
            InitScheme::KaimingUniform => (6.0 / fan_in as f64).sqrt(),
            InitScheme::Uniform(a) => a,
        }
    }
}

/// Draws a weight tensor of `shape` with `fan_in` inputs per output unit.
pub fn init_params<R: Rng + ?Sized>(
    shape: &[usize],
    fan_in: usize,
    scheme: InitScheme,
    rng: &mut R,
) -> Result<Vec<f64>, ModelError> {
    if fan_in == 0 {
        return Err(ModelError::Init(format!("zero fan_in for shape {shape:?}")));
    }
    let bound = scheme.bound(fan_in);
    if !(bound.is_finite() && bound > 0.0) {
        return Err(ModelError::Init(format!("invalid init bound {bound}")));
    }
    let n: usize = shape.iter().product();
    Ok((0..n).map(|_| rng.random_range(-bound..bound)).collect())
}

/// Fresh parameters for one layer: weights from `scheme`, zero biases.
pub(crate) fn init_layer<R: Rng + ?Sized>(
    spec: &LayerSpec,
    scheme: InitScheme,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>, ModelError> {
    let shapes = spec.param_shapes();
    let mut out = Vec::with_capacity(shapes.len());
    if let Some((weight, rest)) = shapes.split_first() {
        out.push(init_params(weight, spec.fan_in(), scheme, rng)?);
        for bias in rest {
            out.push(vec![0.0; bias.iter().product()]);
        }
    }
    Ok(out)
}
