//! Triplane feature field and the point decoder producing color + density.
//!
//! A point is featurized by projecting it onto the XY/XZ/YZ planes,
//! bilinearly sampling each feature map, and concatenating the three
//! feature vectors. A small MLP turns that into color (sigmoid) and
//! density (softplus), so the sample invariants hold by construction.

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::tensor::{Result, Tensor};

/// Three orthogonal feature planes, stored as one tensor [3, c, h, w],
/// defined over the cube [-bound, bound]³.
#[derive(Clone)]
pub struct Triplane {
    pub planes: Tensor,
    pub bound: f32,
}

impl Triplane {
    pub fn new(planes: Tensor, bound: f32) -> Self {
        debug_assert_eq!(planes.shape().len(), 4);
        debug_assert_eq!(planes.shape()[0], 3);
        Triplane { planes, bound }
    }

    pub fn channels(&self) -> usize {
        self.planes.shape()[1]
    }

    /// Project `points` (flat n×3 world coordinates) onto the three planes
    /// and concatenate the bilinear samples → [n, 3·c]. Out-of-bound
    /// points clamp to the plane border.
    pub fn sample_features(&self, points: &[f32]) -> Result<Tensor> {
        let n = points.len() / 3;
        let (c, h, w) = (
            self.planes.shape()[1],
            self.planes.shape()[2],
            self.planes.shape()[3],
        );
        let inv = 1.0 / self.bound;
        // Axis pairs per plane: XY, XZ, YZ.
        let mut uv = [
            vec![0.0f32; n * 2],
            vec![0.0f32; n * 2],
            vec![0.0f32; n * 2],
        ];
        for i in 0..n {
            let (x, y, z) = (
                points[3 * i] * inv,
                points[3 * i + 1] * inv,
                points[3 * i + 2] * inv,
            );
            uv[0][2 * i] = x;
            uv[0][2 * i + 1] = y;
            uv[1][2 * i] = x;
            uv[1][2 * i + 1] = z;
            uv[2][2 * i] = y;
            uv[2][2 * i + 1] = z;
        }
        let mut feats = Vec::with_capacity(3);
        for (p, uv) in uv.iter().enumerate() {
            let plane = self.planes.slice(0, p, 1)?.reshape(&[c, h, w])?;
            let uv_t = Tensor::from_vec(uv.clone(), &[n, 2])?;
            feats.push(plane.grid_sample_bilinear(&uv_t)?);
        }
        Tensor::concat(&[&feats[0], &feats[1], &feats[2]], 1)
    }
}

/// One decoded field sample.
#[derive(Clone, Copy, Debug)]
pub struct RadianceSample {
    /// RGB in [0,1].
    pub color: [f32; 3],
    /// Nonnegative density.
    pub sigma: f32,
}

/// Batched decoder output on the tape.
pub struct RadianceBatch {
    /// [n, 3] in [0,1].
    pub color: Tensor,
    /// [n, 1], nonnegative.
    pub sigma: Tensor,
}

/// Two-hidden-layer perceptron over concatenated plane features.
#[derive(Clone)]
pub struct PointDecoder {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
    pub w3: Tensor,
    pub b3: Tensor,
}

impl PointDecoder {
    /// He-initialized weights, zero biases (so zero features decode to
    /// color 0.5 and density softplus(0)).
    pub fn init(seed: u64, feat_dim: usize, width: usize) -> Result<PointDecoder> {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut layer = |fan_in: usize, fan_out: usize| -> Vec<f32> {
            let s = (2.0 / fan_in as f32).sqrt();
            (0..fan_in * fan_out)
                .map(|_| rng.gen_range(-s..s))
                .collect()
        };
        Ok(PointDecoder {
            w1: Tensor::from_vec(layer(feat_dim, width), &[feat_dim, width])?,
            b1: Tensor::zeros(&[width]),
            w2: Tensor::from_vec(layer(width, width), &[width, width])?,
            b2: Tensor::zeros(&[width]),
            w3: Tensor::from_vec(layer(width, 4), &[width, 4])?,
            b3: Tensor::zeros(&[4]),
        })
    }

    pub fn width(&self) -> usize {
        self.w1.shape()[1]
    }

    /// Decode a feature batch [n, feat_dim] into color/density.
    pub fn decode(&self, feats: &Tensor) -> Result<RadianceBatch> {
        let n = feats.shape()[0];
        let width = self.width();
        let h1 = feats
            .matmul(&self.w1)?
            .add(&self.b1.reshape(&[1, width])?.broadcast_to(&[n, width])?)?
            .relu()?;
        let h2 = h1
            .matmul(&self.w2)?
            .add(&self.b2.reshape(&[1, width])?.broadcast_to(&[n, width])?)?
            .relu()?;
        let out = h2
            .matmul(&self.w3)?
            .add(&self.b3.reshape(&[1, 4])?.broadcast_to(&[n, 4])?)?;
        Ok(RadianceBatch {
            color: out.slice(1, 0, 3)?.sigmoid()?,
            sigma: out.slice(1, 3, 1)?.softplus()?,
        })
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("dec.w1", &self.w1),
            ("dec.b1", &self.b1),
            ("dec.w2", &self.w2),
            ("dec.b2", &self.b2),
            ("dec.w3", &self.w3),
            ("dec.b3", &self.b3),
        ]
    }

    /// Insert freshly initialized decoder parameters under `dec.*`.
    pub fn register(store: &mut crate::params::ParamStore, seed: u64, feat_dim: usize, width: usize) {
        let dec = PointDecoder::init(seed, feat_dim, width).expect("static shapes");
        for (name, t) in dec.params() {
            store.insert(name, t.data().to_vec(), t.shape());
        }
    }

    pub fn from_leaves(leaves: &crate::params::LeafSet) -> PointDecoder {
        PointDecoder {
            w1: leaves.get("dec.w1").clone(),
            b1: leaves.get("dec.b1").clone(),
            w2: leaves.get("dec.w2").clone(),
            b2: leaves.get("dec.b2").clone(),
            w3: leaves.get("dec.w3").clone(),
            b3: leaves.get("dec.b3").clone(),
        }
    }

    pub fn from_store(store: &crate::params::ParamStore) -> PointDecoder {
        let mut map = store.constants();
        PointDecoder {
            w1: map.remove("dec.w1").expect("dec.w1"),
            b1: map.remove("dec.b1").expect("dec.b1"),
            w2: map.remove("dec.w2").expect("dec.w2"),
            b2: map.remove("dec.b2").expect("dec.b2"),
            w3: map.remove("dec.w3").expect("dec.w3"),
            b3: map.remove("dec.b3").expect("dec.b3"),
        }
    }
}

/// A renderable field: planes plus the shared decoder.
pub struct TriplaneField<'a> {
    pub triplane: &'a Triplane,
    pub decoder: &'a PointDecoder,
}

impl<'a> TriplaneField<'a> {
    /// Color and density for a batch of points (flat n×3).
    pub fn query(&self, points: &[f32]) -> Result<RadianceBatch> {
        let feats = self.triplane.sample_features(points)?;
        self.decoder.decode(&feats)
    }

    /// Single-point convenience used by probes and tests.
    pub fn query_one(&self, x: [f32; 3]) -> Result<RadianceSample> {
        let batch = self.query(&x)?;
        let c = batch.color.data();
        Ok(RadianceSample {
            color: [c[0], c[1], c[2]],
            sigma: batch.sigma.data()[0],
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_difference_check;

    fn constant_triplane(v: f32, c: usize, hw: usize) -> Triplane {
        Triplane::new(Tensor::full(v, &[3, c, hw, hw]), 1.0)
    }

    #[test]
    fn constant_plane_samples_constant_features() {
        let tp = constant_triplane(0.7, 4, 8);
        for x in [[0.0, 0.0, 0.0], [0.9, -0.3, 0.2], [5.0, 5.0, -5.0]] {
            let f = tp.sample_features(&x).unwrap();
            assert_eq!(f.shape(), &[1, 12]);
            for v in f.data() {
                assert!((v - 0.7).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn linear_ramp_center_value_exact() {
        // Plane values form a linear ramp along the plane's u axis; bilinear
        // interpolation is exact on linear fields, so the cube center reads
        // the ramp midpoint.
        let (c, hw) = (2usize, 9usize);
        let mut data = vec![0.0f32; 3 * c * hw * hw];
        for p in 0..3 {
            for ch in 0..c {
                for y in 0..hw {
                    for x in 0..hw {
                        data[((p * c + ch) * hw + y) * hw + x] = x as f32;
                    }
                }
            }
        }
        let tp = Triplane::new(Tensor::from_vec(data, &[3, c, hw, hw]).unwrap(), 1.0);
        let f = tp.sample_features(&[0.0, 0.0, 0.0]).unwrap();
        for v in f.data() {
            assert!((v - (hw - 1) as f32 / 2.0).abs() < 1e-5);
        }
    }

    #[test]
    fn grid_node_reads_stored_feature() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let (c, hw) = (3usize, 5usize);
        let mut rng = StdRng::seed_from_u64(17);
        let data: Vec<f32> = (0..3 * c * hw * hw).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tp = Triplane::new(Tensor::from_vec(data.clone(), &[3, c, hw, hw]).unwrap(), 1.0);
        // Texel (ix, iy) on every plane corresponds to normalized coords
        // 2·ix/(n-1) − 1; picking x=y=z puts all three planes on a node.
        for i in 0..hw {
            let t = 2.0 * i as f32 / (hw - 1) as f32 - 1.0;
            let f = tp.sample_features(&[t, t, t]).unwrap();
            for p in 0..3 {
                for ch in 0..c {
                    let want = data[((p * c + ch) * hw + i) * hw + i];
                    let got = f.data()[p * c + ch];
                    assert!((want - got).abs() < 1e-5, "plane {p} ch {ch} t {t}");
                }
            }
        }
    }

    #[test]
    fn zero_field_decodes_to_neutral_sample() {
        let tp = constant_triplane(0.0, 8, 16);
        let dec = PointDecoder::init(1, 24, 32).unwrap();
        let field = TriplaneField {
            triplane: &tp,
            decoder: &dec,
        };
        let s = field.query_one([0.1, 0.2, -0.3]).unwrap();
        for ch in s.color {
            assert!((ch - 0.5).abs() < 1e-6);
        }
        assert!((s.sigma - 2.0f32.ln()).abs() < 1e-5);
    }

    #[test]
    fn decoded_samples_respect_ranges() {
        use rand::rngs::StdRng;
        use rand::{Rng, SeedableRng};
        let mut rng = StdRng::seed_from_u64(5);
        let data: Vec<f32> = (0..3 * 8 * 16 * 16).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let tp = Triplane::new(Tensor::from_vec(data, &[3, 8, 16, 16]).unwrap(), 1.0);
        let dec = PointDecoder::init(2, 24, 32).unwrap();
        let field = TriplaneField {
            triplane: &tp,
            decoder: &dec,
        };
        for _ in 0..64 {
            let x = [
                rng.gen_range(-1.2..1.2),
                rng.gen_range(-1.2..1.2),
                rng.gen_range(-1.2..1.2),
            ];
            let s = field.query_one(x).unwrap();
            assert!(s.sigma >= 0.0);
            for ch in s.color {
                assert!((0.0..=1.0).contains(&ch));
            }
        }
    }

    #[test]
    fn density_gradient_wrt_planes_matches_fd() {
        // Fixture decoder with O(1) weights and live, unsaturated
        // activations: keeps every checked gradient well above the f32
        // fd noise floor. Points sit on texel nodes so bilinear weights
        // are exactly 1 or 0.
        let mk = |n: usize, phase: f32| -> Vec<f32> {
            (0..n).map(|i| 0.4 + 0.5 * ((i as f32 * 0.7 + phase).sin())).collect()
        };
        let dec = PointDecoder {
            w1: Tensor::from_vec(mk(12 * 16, 0.0), &[12, 16]).unwrap(),
            b1: Tensor::full(0.2, &[16]),
            w2: Tensor::from_vec(mk(16 * 16, 1.3), &[16, 16]).unwrap(),
            b2: Tensor::full(0.2, &[16]),
            w3: Tensor::from_vec(mk(16 * 4, 2.1).iter().map(|v| v * 0.1).collect(), &[16, 4])
                .unwrap(),
            b3: Tensor::zeros(&[4]),
        };
        let points = vec![0.0, 0.0, 0.0, 0.5, 0.5, 0.5];
        let probe = Tensor::from_vec(
            (0..3 * 4 * 5 * 5)
                .map(|i| 0.1 * (((i * 37 % 17) as f32 / 17.0) - 0.5))
                .collect(),
            &[3, 4, 5, 5],
        )
        .unwrap();
        let err = finite_difference_check(
            &|planes| {
                let tp = Triplane::new(planes.clone(), 1.0);
                let field = TriplaneField {
                    triplane: &tp,
                    decoder: &dec,
                };
                field.query(&points)?.sigma.mean()
            },
            &probe,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "rel err {err}");
    }
}
