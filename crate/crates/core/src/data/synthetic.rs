use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{DataError, Dataset, Split};
use crate::rng::{self, Purpose};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleShape {
    Vector(usize),
    Image {
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl SampleShape {
    pub fn dims(&self) -> Vec<usize> {
        match *self {
            SampleShape::Vector(d) => vec![d],
            SampleShape::Image {
                channels,
                height,
                width,
            } => vec![channels, height, width],
        }
    }
}

/// Gaussian class clusters around seeded prototypes.
///
/// Vector prototypes are uniform in `[-1, 1]^D`. Image prototypes are a dark
/// background with one class-coloured rectangle at a class-specific position;
/// image samples are clamped to `[0, 1]` and quantised to multiples of 1/255
/// so they survive the byte-oriented CIFAR layout unchanged.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub n_per_class: usize,
    pub classes: usize,
    pub shape: SampleShape,
    pub spread: f64,
    pub seed: u64,
}

impl SyntheticSpec {
    /// Class prototypes, flattened per sample.
    pub fn prototypes(&self) -> Vec<Vec<f64>> {
        let mut rng = rng::stream(self.seed, Purpose::Data, 0);
        (0..self.classes)
            .map(|_| match self.shape {
                SampleShape::Vector(d) => (0..d).map(|_| rng.random_range(-1.0..1.0)).collect(),
                SampleShape::Image {
                    channels,
                    height,
                    width,
                } => {
                    let (ph, pw) = ((height / 2).max(1), (width / 2).max(1));
                    let top = rng.random_range(0..=height - ph);
                    let left = rng.random_range(0..=width - pw);
                    let colour: Vec<f64> =
                        (0..channels).map(|_| rng.random_range(0.3..1.0)).collect();
                    let mut img = vec![0.1; channels * height * width];
                    for (c, col) in colour.iter().enumerate() {
                        for y in top..top + ph {
                            for x in left..left + pw {
                                img[(c * height + y) * width + x] = *col;
                            }
                        }
                    }
                    img
                }
            })
            .collect()
    }
}

pub fn synthetic_blobs(spec: &SyntheticSpec, split: Split) -> Result<Dataset, DataError> {
    if spec.classes < 2 {
        return Err(DataError::Invalid(format!(
            "need at least two classes, got {}",
            spec.classes
        )));
    }
    if !(spec.spread >= 0.0 && spec.spread.is_finite()) {
        return Err(DataError::Invalid(format!("invalid spread {}", spec.spread)));
    }
    let protos = spec.prototypes();
    let index = match split {
        Split::Train => 1,
        Split::Test => 2,
    };
    let mut rng = rng::stream(spec.seed, Purpose::Data, index);
    let image = matches!(spec.shape, SampleShape::Image { .. });
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (class, proto) in protos.iter().enumerate() {
        for _ in 0..spec.n_per_class {
            for &p in proto {
                let noise: f64 = StandardNormal.sample(&mut rng);
                let v = p + spec.spread * noise;
                data.push(if image {
                    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
                } else {
                    v
                });
            }
            labels.push(class);
        }
    }
    let mut shape = vec![labels.len()];
    shape.extend(spec.shape.dims());
    Dataset::new(Tensor::new(shape, data)?, labels, spec.classes, split)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(spread: f64, shape: SampleShape) -> SyntheticSpec {
        SyntheticSpec {
            n_per_class: 200,
            classes: 3,
            shape,
            spread,
            seed: 42,
        }
    }

    fn nearest_centroid_accuracy(ds: &Dataset, centroids: &[Vec<f64>]) -> f64 {
        let hits = (0..ds.len())
            .filter(|&i| {
                let x = ds.sample(i);
                let dist = |c: &Vec<f64>| -> f64 { c.iter().zip(x).map(|(a, b)| (a - b).powi(2)).sum() };
                let best = (0..centroids.len())
                    .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                    .unwrap();
                best == ds.labels()[i]
            })
            .count();
        hits as f64 / ds.len() as f64
    }

    #[test]
    fn sizes_and_determinism() {
        let s = spec(0.3, SampleShape::Vector(5));
        let a = synthetic_blobs(&s, Split::Train).unwrap();
        assert_eq!(a.len(), 600);
        assert_eq!(a, synthetic_blobs(&s, Split::Train).unwrap());
        assert_ne!(a.images(), synthetic_blobs(&s, Split::Test).unwrap().images());
    }

    #[test]
    fn zero_spread_is_perfectly_separable() {
        for shape in [
            SampleShape::Vector(4),
            SampleShape::Image {
                channels: 3,
                height: 8,
                width: 8,
            },
        ] {
            let s = spec(0.0, shape);
            let ds = synthetic_blobs(&s, Split::Train).unwrap();
            // centroids from the labelled samples themselves
            let n = ds.sample(0).len();
            let mut centroids = vec![vec![0.0; n]; 3];
            for i in 0..ds.len() {
                for (c, v) in centroids[ds.labels()[i]].iter_mut().zip(ds.sample(i)) {
                    *c += v / 200.0;
                }
            }
            assert_eq!(nearest_centroid_accuracy(&ds, &centroids), 1.0);
        }
    }

    #[test]
    fn single_class_is_rejected() {
        let mut s = spec(0.1, SampleShape::Vector(2));
        s.classes = 1;
        assert!(synthetic_blobs(&s, Split::Train).is_err());
    }

    #[test]
    fn images_are_quantised_unit_values() {
        let s = spec(
            0.4,
            SampleShape::Image {
                channels: 3,
                height: 8,
                width: 8,
            },
        );
        let ds = synthetic_blobs(&s, Split::Train).unwrap();
        for v in ds.images().data() {
            assert!((0.0..=1.0).contains(v));
            assert_eq!((v * 255.0).round() / 255.0, *v);
        }
    }
}
