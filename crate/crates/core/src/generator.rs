//! Conditional triplane generator: condition map + text embedding +
//! camera pose → triplane.
//!
//! A strided conv encoder reads the condition map (per-kind 1×1 input
//! adapters), FiLM layers modulate every stage with the concatenated text
//! embedding and pose embedding, and an upsampling decoder emits the three
//! feature planes. FiLM keeps the conditioning pathway differentiable with
//! respect to the condition map itself, which the condition-cycle loss
//! relies on: gradients must flow through re-extracted conditions back
//! into the first generation pass.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

use crate::camera::CameraPose;
use crate::conditions::{ConditionKind, ConditionMap};
use crate::params::{LeafSet, ParamStore};
use crate::tensor::{Result as TResult, Tensor, TensorError};
use crate::triplane::Triplane;

#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct GeneratorConfig {
    /// Triplane feature channels per plane.
    pub c_p: usize,
    /// Triplane spatial resolution (square planes).
    pub plane_res: usize,
    /// Expected condition-map input resolution (square).
    pub cond_res: usize,
    pub bound: f32,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            c_p: 8,
            plane_res: 16,
            cond_res: 64,
            bound: 1.0,
        }
    }
}

/// Encoder/decoder channel plan; four stride-2 stages halve 64 down to 4,
/// then two upsampling stages recover the 16×16 planes.
const ENC_CH: [usize; 5] = [16, 32, 64, 64, 128];
const DEC_CH: [usize; 2] = [64, 32];
const CTX_DIM: usize = 64; // text 32 + pose 32

struct LayerSpec {
    name: &'static str,
    shape: [usize; 4],
}

fn conv_specs() -> Vec<LayerSpec> {
    vec![
        LayerSpec { name: "gen.enc1", shape: [ENC_CH[1], ENC_CH[0], 3, 3] },
        LayerSpec { name: "gen.enc2", shape: [ENC_CH[2], ENC_CH[1], 3, 3] },
        LayerSpec { name: "gen.enc3", shape: [ENC_CH[3], ENC_CH[2], 3, 3] },
        LayerSpec { name: "gen.enc4", shape: [ENC_CH[4], ENC_CH[3], 3, 3] },
        LayerSpec { name: "gen.dec1", shape: [DEC_CH[0], ENC_CH[4], 3, 3] },
        LayerSpec { name: "gen.dec2", shape: [DEC_CH[1], DEC_CH[0], 3, 3] },
    ]
}

/// Register freshly initialized generator parameters under `gen.*`.
pub fn register_params(store: &mut ParamStore, cfg: &GeneratorConfig, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut he = |shape: &[usize]| -> Vec<f32> {
        let fan_in: usize = shape[1..].iter().product();
        let s = (2.0 / fan_in as f32).sqrt();
        (0..shape.iter().product::<usize>())
            .map(|_| rng.gen_range(-s..s))
            .collect()
    };
    for kind in ConditionKind::ALL {
        let shape = [ENC_CH[0], kind.channels(), 1, 1];
        let name = format!("gen.adapter.{}", kind.name());
        let data = he(&shape);
        store.insert(&name, data, &shape);
    }
    for spec in conv_specs() {
        let data = he(&spec.shape);
        store.insert(spec.name, data, &spec.shape);
        let cout = spec.shape[0];
        store.insert(&format!("{}.b", spec.name), vec![0.0; cout], &[cout]);
        // Small random FiLM weights so pose and text modulate the planes
        // from the first step.
        let film_shape = [CTX_DIM, 2 * cout];
        let film: Vec<f32> = he(&film_shape).iter().map(|v| v * 0.3).collect();
        store.insert(&format!("{}.film", spec.name), film, &film_shape);
        store.insert(&format!("{}.film.b", spec.name), vec![0.0; 2 * cout], &[2 * cout]);
    }
    store.insert("gen.pose.w", he(&[16, 32]), &[16, 32]);
    store.insert("gen.pose.b", vec![0.0; 32], &[32]);
    let head_shape = [3 * cfg.c_p, DEC_CH[1], 3, 3];
    let head = he(&head_shape);
    store.insert("gen.head", head, &head_shape);
    store.insert("gen.head.b", vec![0.0; 3 * cfg.c_p], &[3 * cfg.c_p]);
}

/// Generator parameters bound to tensors for one forward pass.
pub struct Generator {
    pub cfg: GeneratorConfig,
    params: HashMap<String, Tensor>,
}

impl Generator {
    pub fn from_leaves(cfg: &GeneratorConfig, leaves: &LeafSet) -> Generator {
        Generator {
            cfg: cfg.clone(),
            params: leaves
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with("gen."))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn frozen(cfg: &GeneratorConfig, store: &ParamStore) -> Generator {
        Generator {
            cfg: cfg.clone(),
            params: store
                .constants()
                .into_iter()
                .filter(|(k, _)| k.starts_with("gen."))
                .collect(),
        }
    }

    fn p(&self, name: &str) -> &Tensor {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("missing generator parameter {name}"))
    }

    /// Condition map + frozen text embedding [1,32] + pose → triplane.
    /// Deterministic given parameters and inputs; differentiable with
    /// respect to both the parameters and the condition data.
    pub fn generate(
        &self,
        cond: &ConditionMap,
        text_emb: &Tensor,
        pose: &CameraPose,
    ) -> TResult<Triplane> {
        let (h, w) = cond.resolution();
        if h != self.cfg.cond_res || w != self.cfg.cond_res {
            return Err(TensorError::Unsupported {
                op: "generate",
                detail: format!(
                    "condition resolution {h}×{w} does not match configured {0}×{0}",
                    self.cfg.cond_res
                ),
            });
        }
        let ctx = self.context(text_emb, pose)?; // [1, 64]

        let adapter = self.p(&format!("gen.adapter.{}", cond.kind.name()));
        let mut x = cond.chw()?.conv2d(adapter, 1, 0)?;
        for (i, name) in ["gen.enc1", "gen.enc2", "gen.enc3", "gen.enc4"].iter().enumerate() {
            let _ = i;
            x = self.stage(&x, name, &ctx, 2)?;
        }
        x = upsample2(&x)?;
        x = self.stage(&x, "gen.dec1", &ctx, 1)?;
        x = upsample2(&x)?;
        x = self.stage(&x, "gen.dec2", &ctx, 1)?;
        let head = self.p("gen.head");
        let hb = self.p("gen.head.b");
        let cout = 3 * self.cfg.c_p;
        let r = self.cfg.plane_res;
        let planes = x
            .conv2d(head, 1, 1)?
            .add(&hb.reshape(&[cout, 1, 1])?.broadcast_to(&[cout, r, r])?)?
            .reshape(&[3, self.cfg.c_p, r, r])?;
        Ok(Triplane::new(planes, self.cfg.bound))
    }

    /// conv → bias → FiLM(ctx) → relu.
    fn stage(&self, x: &Tensor, name: &str, ctx: &Tensor, stride: usize) -> TResult<Tensor> {
        let w = self.p(name);
        let b = self.p(&format!("{name}.b"));
        let cout = w.shape()[0];
        let y = x.conv2d(w, stride, 1)?;
        let (oh, ow) = (y.shape()[1], y.shape()[2]);
        let y = y.add(&b.reshape(&[cout, 1, 1])?.broadcast_to(&[cout, oh, ow])?)?;
        let film = ctx
            .matmul(self.p(&format!("{name}.film")))?
            .add(&self.p(&format!("{name}.film.b")).reshape(&[1, 2 * cout])?)?;
        let gamma = film
            .slice(1, 0, cout)?
            .reshape(&[cout, 1, 1])?
            .broadcast_to(&[cout, oh, ow])?;
        let beta = film
            .slice(1, cout, cout)?
            .reshape(&[cout, 1, 1])?
            .broadcast_to(&[cout, oh, ow])?;
        y.mul(&gamma.offset(1.0)?)?.add(&beta)?.relu()
    }

    /// concat(text embedding, tanh pose embedding) → [1, 64].
    fn context(&self, text_emb: &Tensor, pose: &CameraPose) -> TResult<Tensor> {
        let flat = Tensor::from_vec(pose.transform.to_vec(), &[1, 16])?;
        let pose_emb = flat
            .matmul(self.p("gen.pose.w"))?
            .add(&self.p("gen.pose.b").reshape(&[1, 32])?)?
            .tanh()?;
        Tensor::concat(&[&text_emb.reshape(&[1, 32])?, &pose_emb], 1)
    }
}

/// Nearest-neighbour ×2 upsample of [c,h,w], written as reshape +
/// broadcast so it stays on the tape.
pub fn upsample2(x: &Tensor) -> TResult<Tensor> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    x.reshape(&[c, h, 1, w, 1])?
        .broadcast_to(&[c, h, 2, w, 2])?
        .reshape(&[c, 2 * h, 2 * w])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::make_view_grid;
    use crate::tensor::{directional_fd_check, Tape};

    fn tiny_cfg() -> GeneratorConfig {
        GeneratorConfig {
            c_p: 4,
            plane_res: 8,
            cond_res: 32,
            bound: 1.0,
        }
    }

    fn edge_map(res: usize, phase: f32) -> ConditionMap {
        ConditionMap {
            kind: ConditionKind::Edge,
            data: Tensor::from_vec(
                (0..res * res)
                    .map(|i| 0.5 + 0.4 * ((i as f32 * 0.23 + phase).sin()))
                    .collect(),
                &[res, res],
            )
            .unwrap(),
            mask: None,
        }
    }

    fn unit_text() -> Tensor {
        let mut v = vec![0.0f32; 32];
        v[3] = 0.8;
        v[17] = -0.6;
        Tensor::from_vec(v, &[1, 32]).unwrap()
    }

    #[test]
    fn deterministic_and_correct_shape() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        register_params(&mut store, &cfg, 9);
        let gen = Generator::frozen(&cfg, &store);
        let grid = make_view_grid(4, 2, 2.5, 0.9, 8);
        let cond = edge_map(32, 0.0);
        let a = gen.generate(&cond, &unit_text(), &grid.poses[0]).unwrap();
        let b = gen.generate(&cond, &unit_text(), &grid.poses[0]).unwrap();
        assert_eq!(a.planes.shape(), &[3, 4, 8, 8]);
        assert_eq!(a.planes.data(), b.planes.data());
    }

    #[test]
    fn wrong_resolution_rejected() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        register_params(&mut store, &cfg, 9);
        let gen = Generator::frozen(&cfg, &store);
        let grid = make_view_grid(4, 2, 2.5, 0.9, 8);
        let cond = edge_map(16, 0.0);
        assert!(gen.generate(&cond, &unit_text(), &grid.poses[0]).is_err());
    }

    #[test]
    fn distinct_poses_make_distinct_planes() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        register_params(&mut store, &cfg, 10);
        let gen = Generator::frozen(&cfg, &store);
        let grid = make_view_grid(4, 2, 2.5, 0.9, 8);
        let cond = edge_map(32, 0.0);
        let a = gen.generate(&cond, &unit_text(), &grid.poses[0]).unwrap();
        let b = gen.generate(&cond, &unit_text(), &grid.poses[2]).unwrap();
        let max_diff = a
            .planes
            .data()
            .iter()
            .zip(b.planes.data())
            .map(|(x, y)| (x - y).abs())
            .fold(0.0f32, f32::max);
        assert!(max_diff > 0.0, "pose had no effect on the planes");
    }

    /// f64 mirror of the generator as a function of the condition map
    /// (weights and FiLM vectors fixed): conv stages, modulation, nearest
    /// upsample, head, mean. The network is piecewise linear in the
    /// condition, and f32 finite differences cannot resolve it (relu kinks
    /// inside every usable probe radius), so the oracle differences this
    /// mirror at 1e-6.
    struct MirrorStage {
        w: Vec<f64>,
        b: Vec<f64>,
        gamma: Vec<f64>,
        beta: Vec<f64>,
        cout: usize,
        cin: usize,
        stride: usize,
    }

    fn conv64(x: &[f64], w: &[f64], cin: usize, h: usize, wd: usize, cout: usize, stride: usize, pad: usize) -> (Vec<f64>, usize, usize) {
        let oh = (h + 2 * pad - 3) / stride + 1;
        let ow = (wd + 2 * pad - 3) / stride + 1;
        let mut out = vec![0.0f64; cout * oh * ow];
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += x[ci * h * wd + (iy as usize) * wd + ix as usize]
                                    * w[((co * cin + ci) * 3 + ky) * 3 + kx];
                            }
                        }
                    }
                    out[co * oh * ow + oy * ow + ox] = acc;
                }
            }
        }
        (out, oh, ow)
    }

    fn mirror_mean(
        cond: &[f64],
        res: usize,
        adapter: &[f64],
        stages: &[MirrorStage],
        head: &[f64],
        head_b: &[f64],
        head_cout: usize,
    ) -> f64 {
        let base = ENC_CH[0];
        // 1×1 adapter.
        let mut x = vec![0.0f64; base * res * res];
        for co in 0..base {
            for p in 0..res * res {
                x[co * res * res + p] = adapter[co] * cond[p];
            }
        }
        let (mut h, mut w) = (res, res);
        let mut cin = base;
        for (si, st) in stages.iter().enumerate() {
            if si >= 4 {
                // Decoder stages upsample first.
                let mut up = vec![0.0f64; cin * h * 2 * w * 2];
                for c in 0..cin {
                    for y in 0..h * 2 {
                        for xx in 0..w * 2 {
                            up[c * h * 2 * w * 2 + y * w * 2 + xx] =
                                x[c * h * w + (y / 2) * w + xx / 2];
                        }
                    }
                }
                x = up;
                h *= 2;
                w *= 2;
            }
            let (y, oh, ow) = conv64(&x, &st.w, cin, h, w, st.cout, st.stride, 1);
            let mut z = y;
            for co in 0..st.cout {
                for p in 0..oh * ow {
                    let v = z[co * oh * ow + p] + st.b[co];
                    let v = v * (1.0 + st.gamma[co]) + st.beta[co];
                    z[co * oh * ow + p] = v.max(0.0);
                }
            }
            x = z;
            h = oh;
            w = ow;
            cin = st.cout;
        }
        let (y, oh, ow) = conv64(&x, head, cin, h, w, head_cout, 1, 1);
        let mut acc = 0.0;
        for co in 0..head_cout {
            for p in 0..oh * ow {
                acc += y[co * oh * ow + p] + head_b[co];
            }
        }
        acc / (head_cout * oh * ow) as f64
    }

    #[test]
    fn gradient_wrt_condition_matches_f64_oracle() {
        let cfg = GeneratorConfig {
            c_p: 2,
            plane_res: 4,
            cond_res: 16,
            bound: 1.0,
        };
        let mut store = ParamStore::new();
        register_params(&mut store, &cfg, 12);
        let gen = Generator::frozen(&cfg, &store);
        let grid = make_view_grid(4, 2, 2.5, 0.9, 8);
        let pose = &grid.poses[1];
        let text = unit_text();
        let cond = edge_map(16, 0.4);

        // Analytic gradient through the tape.
        let tape = Tape::new();
        let leaf = tape.leaf(cond.data.data().to_vec(), &[16, 16]).unwrap();
        let cond_t = ConditionMap {
            kind: ConditionKind::Edge,
            data: leaf.clone(),
            mask: None,
        };
        let loss = gen
            .generate(&cond_t, &text, pose)
            .unwrap()
            .planes
            .mean()
            .unwrap();
        let grads = tape.backward(&loss).unwrap();
        let analytic = grads.get(&leaf).unwrap();

        // Extract the fixed FiLM vectors from the parameter store.
        let ctx = gen.context(&text, pose).unwrap();
        let to64 = |v: &[f32]| -> Vec<f64> { v.iter().map(|x| *x as f64).collect() };
        let mut stages = Vec::new();
        let plan = [
            ("gen.enc1", ENC_CH[0], ENC_CH[1], 2usize),
            ("gen.enc2", ENC_CH[1], ENC_CH[2], 2),
            ("gen.enc3", ENC_CH[2], ENC_CH[3], 2),
            ("gen.enc4", ENC_CH[3], ENC_CH[4], 2),
            ("gen.dec1", ENC_CH[4], DEC_CH[0], 1),
            ("gen.dec2", DEC_CH[0], DEC_CH[1], 1),
        ];
        for (name, cin, cout, stride) in plan {
            let film = ctx
                .matmul(gen.p(&format!("{name}.film")))
                .unwrap()
                .add(&gen.p(&format!("{name}.film.b")).reshape(&[1, 2 * cout]).unwrap())
                .unwrap();
            stages.push(MirrorStage {
                w: to64(store.data(name)),
                b: to64(store.data(&format!("{name}.b"))),
                gamma: to64(&film.data()[..cout]),
                beta: to64(&film.data()[cout..]),
                cout,
                cin,
                stride,
            });
        }
        let adapter = to64(store.data("gen.adapter.edge"));
        let head = to64(store.data("gen.head"));
        let head_b = to64(store.data("gen.head.b"));

        let base: Vec<f64> = cond.data.data().iter().map(|v| *v as f64).collect();
        // Sanity: mirror forward must reproduce the f32 forward.
        let got = mirror_mean(&base, 16, &adapter, &stages, &head, &head_b, 6);
        let want = loss.item().unwrap() as f64;
        assert!((got - want).abs() < 1e-4, "mirror {got} vs tape {want}");

        let eps = 1e-6f64;
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += eps;
            let mut m = base.clone();
            m[i] -= eps;
            let fd = (mirror_mean(&p, 16, &adapter, &stages, &head, &head_b, 6)
                - mirror_mean(&m, 16, &adapter, &stages, &head, &head_b, 6))
                / (2.0 * eps);
            let rel = (analytic[i] as f64 - fd).abs() / fd.abs().max(1e-6);
            assert!(rel < 1e-3, "coord {i}: analytic {} fd {fd}", analytic[i]);
        }
    }

    #[test]
    fn gradients_reach_generator_weights() {
        let cfg = tiny_cfg();
        let mut store = ParamStore::new();
        register_params(&mut store, &cfg, 13);
        let tape = Tape::new();
        let leaves = store.leaves(&tape).unwrap();
        let gen = Generator::from_leaves(&cfg, &leaves);
        let grid = make_view_grid(4, 2, 2.5, 0.9, 8);
        let cond = edge_map(32, 0.7);
        let tp = gen.generate(&cond, &unit_text(), &grid.poses[0]).unwrap();
        let loss = tp.planes.mul(&tp.planes).unwrap().mean().unwrap();
        let grads = tape.backward(&loss).unwrap();
        let gmap = leaves.grad_map(&grads);
        for name in ["gen.enc1", "gen.head", "gen.pose.w", "gen.adapter.edge"] {
            let norm: f32 = gmap[name].iter().map(|v| v * v).sum();
            assert!(norm > 0.0, "{name} received no gradient");
        }
    }
}
