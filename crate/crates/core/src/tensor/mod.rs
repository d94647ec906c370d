//! Reverse-mode automatic differentiation on flat f32 tensors.
//!
//! A [`Tensor`] is a rank-N array of 32-bit reals in row-major order. Tensors
//! created through [`Tape::leaf`] (or derived from one by an op) carry a node
//! id on that tape; everything else is a constant. Ops record the saved
//! values their backward rule needs, nothing more.
//!
//! Backward comes in two flavours: the usual single sweep
//! ([`Tape::backward`]), and a two-round split ([`Tape::backward_to_cut`] +
//! [`Tape::resume_backward`]) that caches gradients at a designated set of
//! interior nodes, releases the tape segment above them, and finishes later.
//! The two produce identical leaf gradients; the split trades a second sweep
//! for a lower peak of live activation bytes, which the tape's byte counter
//! measures.
//!
//! A tape is single-threaded. Kernels may fan work out across threads
//! internally, but every output element is computed by exactly one closure
//! with a fixed operation order, so results are bitwise reproducible.

mod fd;
mod kernels;
mod ops;
mod tape;

pub use fd::{directional_fd_check, finite_difference_check};
pub use tape::{CutSet, Gradients, Tape};

use std::cell::Cell;
use std::fmt;
use std::rc::Rc;

/// Errors raised by tensor ops and backward passes.
#[derive(Debug, Clone, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: invalid shape {shape:?}: {detail}")]
    InvalidShape {
        op: &'static str,
        shape: Vec<usize>,
        detail: String,
    },
    #[error("{op}: expected a scalar, got shape {shape:?}")]
    NotScalar { op: &'static str, shape: Vec<usize> },
    #[error("{op}: inputs belong to different tapes")]
    TapeMismatch { op: &'static str },
    #[error("backward: tensor is not on a tape")]
    NoTape,
    #[error("backward_to_cut: cut node {node} is not reachable from the loss")]
    UnreachableCut { node: usize },
    #[error("resume_backward: cached gradients missing (cut already consumed or never populated)")]
    MissingCachedGrads,
    #[error("backward: node {node} was released before its gradient was propagated")]
    ReleasedNode { node: usize },
    #[error("{op}: mask has no valid elements")]
    EmptyMask { op: &'static str },
    #[error("{op}: {detail}")]
    Unsupported { op: &'static str, detail: String },
}

pub type Result<T> = std::result::Result<T, TensorError>;

// ── Byte accounting ──────────────────────────────────────────────────

/// Live/peak byte counter shared by every buffer a tape allocates.
#[derive(Debug, Default)]
pub(crate) struct ByteCount {
    live: Cell<usize>,
    peak: Cell<usize>,
}

impl ByteCount {
    pub(crate) fn add(&self, bytes: usize) {
        let live = self.live.get() + bytes;
        self.live.set(live);
        if live > self.peak.get() {
            self.peak.set(live);
        }
    }

    pub(crate) fn release(&self, bytes: usize) {
        self.live.set(self.live.get().saturating_sub(bytes));
    }

    pub(crate) fn live(&self) -> usize {
        self.live.get()
    }

    pub(crate) fn peak(&self) -> usize {
        self.peak.get()
    }

    pub(crate) fn reset_peak(&self) {
        self.peak.set(self.live.get());
    }
}

// ── Storage ──────────────────────────────────────────────────────────

/// Owned f32 buffer; registers its size with a tape byte counter when it
/// was allocated by a tape op, so dropping it is visible to the counter.
pub(crate) struct Storage {
    data: Vec<f32>,
    counter: Option<Rc<ByteCount>>,
}

impl Drop for Storage {
    fn drop(&mut self) {
        if let Some(c) = &self.counter {
            c.release(self.data.len() * 4);
        }
    }
}

/// Cheaply clonable handle to immutable tensor storage.
#[derive(Clone)]
pub(crate) struct Buf(Rc<Storage>);

impl Buf {
    pub(crate) fn plain(data: Vec<f32>) -> Self {
        Buf(Rc::new(Storage { data, counter: None }))
    }

    pub(crate) fn counted(data: Vec<f32>, counter: &Rc<ByteCount>) -> Self {
        counter.add(data.len() * 4);
        Buf(Rc::new(Storage {
            data,
            counter: Some(Rc::clone(counter)),
        }))
    }

    pub(crate) fn as_slice(&self) -> &[f32] {
        &self.0.data
    }
}

impl std::ops::Deref for Buf {
    type Target = [f32];
    fn deref(&self) -> &[f32] {
        &self.0.data
    }
}

// ── Tensor ───────────────────────────────────────────────────────────

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Rank-N array of f32, row-major, optionally attached to a [`Tape`].
#[derive(Clone)]
pub struct Tensor {
    pub(crate) shape: Vec<usize>,
    pub(crate) data: Buf,
    pub(crate) node: Option<usize>,
    pub(crate) tape: Option<Tape>,
}

impl Tensor {
    /// Constant tensor from raw data; not attached to any tape.
    pub fn from_vec(data: Vec<f32>, shape: &[usize]) -> Result<Self> {
        if numel(shape) != data.len() {
            return Err(TensorError::InvalidShape {
                op: "from_vec",
                shape: shape.to_vec(),
                detail: format!("shape wants {} elements, got {}", numel(shape), data.len()),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Buf::plain(data),
            node: None,
            tape: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(0.0, shape)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(1.0, shape)
    }

    pub fn full(value: f32, shape: &[usize]) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: Buf::plain(vec![value; numel(shape)]),
            node: None,
            tape: None,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Tensor {
            shape: vec![],
            data: Buf::plain(vec![value]),
            node: None,
            tape: None,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        self.data.as_slice()
    }

    /// Scalar value of a 1-element tensor.
    pub fn item(&self) -> Result<f32> {
        if self.numel() != 1 {
            return Err(TensorError::NotScalar {
                op: "item",
                shape: self.shape.clone(),
            });
        }
        Ok(self.data[0])
    }

    /// Copy of this tensor detached from any tape (shares storage).
    pub fn detach(&self) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.clone(),
            node: None,
            tape: None,
        }
    }

    pub fn is_on_tape(&self) -> bool {
        self.node.is_some()
    }

    pub(crate) fn node_id(&self) -> Option<usize> {
        self.node
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if let Some(n) = self.node {
            write!(f, "@node{}", n)?;
        }
        if self.numel() <= 8 {
            write!(f, " {:?}", self.data())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn randn(rng: &mut StdRng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.gen_range(-1.0..1.0f32)).collect()
    }

    #[test]
    fn add_componentwise() {
        let a = Tensor::from_vec(vec![1.0, 2.0], &[2]).unwrap();
        let b = Tensor::from_vec(vec![3.0, 4.0], &[2]).unwrap();
        assert_eq!(a.add(&b).unwrap().data(), &[4.0, 6.0]);
    }

    #[test]
    fn add_shape_mismatch_names_op() {
        let a = Tensor::zeros(&[2]);
        let b = Tensor::zeros(&[3]);
        let err = a.add(&b).unwrap_err();
        assert!(err.to_string().contains("add"), "got: {err}");
    }

    #[test]
    fn grid_sample_center_is_mean_of_corners() {
        let plane = Tensor::from_vec(vec![0.0, 1.0, 2.0, 3.0], &[1, 2, 2]).unwrap();
        let uv = Tensor::from_vec(vec![0.0, 0.0], &[1, 2]).unwrap();
        let out = plane.grid_sample_bilinear(&uv).unwrap();
        assert!((out.data()[0] - 1.5).abs() < 1e-6);
    }

    #[test]
    fn grid_sample_exact_on_grid_nodes() {
        let mut rng = StdRng::seed_from_u64(7);
        let (c, h, w) = (3, 4, 5);
        let plane_data = randn(&mut rng, c * h * w);
        let plane = Tensor::from_vec(plane_data.clone(), &[c, h, w]).unwrap();
        for y in 0..h {
            for x in 0..w {
                let u = 2.0 * x as f32 / (w - 1) as f32 - 1.0;
                let v = 2.0 * y as f32 / (h - 1) as f32 - 1.0;
                let uv = Tensor::from_vec(vec![u, v], &[1, 2]).unwrap();
                let out = plane.grid_sample_bilinear(&uv).unwrap();
                for ch in 0..c {
                    let expect = plane_data[ch * h * w + y * w + x];
                    assert!(
                        (out.data()[ch] - expect).abs() < 1e-5,
                        "node ({x},{y}) ch {ch}"
                    );
                }
            }
        }
    }

    #[test]
    fn sigmoid_grad_at_zero() {
        let tape = Tape::new();
        let x = tape.leaf(vec![0.0], &[1]).unwrap();
        let y = x.sigmoid().unwrap().sum().unwrap();
        let grads = tape.backward(&y).unwrap();
        assert!((grads.get(&x).unwrap()[0] - 0.25).abs() < 1e-6);
    }

    #[test]
    fn backward_sum_of_squares() {
        let tape = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let loss = x.mul(&x).unwrap().sum().unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_mean_grad() {
        let tape = Tape::new();
        let x = tape.leaf(vec![5.0, -1.0, 2.0, 0.5], &[4]).unwrap();
        let loss = x.mean().unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0], &[2]).unwrap();
        let y = x.relu().unwrap();
        assert!(matches!(
            tape.backward(&y),
            Err(TensorError::NotScalar { .. })
        ));
    }

    /// A composite graph touching most primitive ops; kept well away from
    /// gradient cancellations so fd noise stays harmless.
    fn composite(x: &Tensor) -> Result<Tensor> {
        let w = Tensor::from_vec(
            (0..x.numel() * 3).map(|i| 0.1 * (i as f32 % 7.0) + 0.15).collect(),
            &[x.numel(), 3],
        )?;
        let h = x.reshape(&[1, x.numel()])?.matmul(&w)?;
        let a = h.tanh()?.mul(&h.sigmoid()?)?.offset(1.5)?;
        let b = a.exp()?.offset(0.5)?.log()?;
        let s = b.add(&a.scale(0.25)?)?;
        s.mul(&s)?.mean()
    }

    #[test]
    fn fd_matches_composite() {
        let mut rng = StdRng::seed_from_u64(42);
        let x = Tensor::from_vec(randn(&mut rng, 8), &[8]).unwrap();
        let err = finite_difference_check(&|t| composite(t), &x, 1e-3).unwrap();
        assert!(err < 1e-3, "rel err {err}");
    }

    #[test]
    fn fd_exact_on_linear() {
        // Truncation error is zero for a constant gradient, so a coarse
        // step drowns the f32 output quantization noise.
        let mut rng = StdRng::seed_from_u64(3);
        let x = Tensor::from_vec(randn(&mut rng, 6), &[6]).unwrap();
        let err = finite_difference_check(&|t| t.sum(), &x, 0.25).unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn cut_at_identity_caches_ones() {
        let tape = Tape::new();
        let x = tape.leaf(vec![1.0, 2.0], &[2]).unwrap();
        let y = x.reshape(&[2]).unwrap();
        let loss = y.sum().unwrap();
        let cut = tape.backward_to_cut(&loss, &[&y]).unwrap();
        assert_eq!(cut.cached_grad(&y).unwrap(), &[1.0, 1.0]);
    }

    #[test]
    fn two_phase_chain_rule() {
        let tape = Tape::new();
        let x = tape.leaf(vec![1.0], &[1]).unwrap();
        let y = x.scale(2.0).unwrap();
        let loss = y.mul(&y).unwrap().sum().unwrap();
        let cut = tape.backward_to_cut(&loss, &[&y]).unwrap();
        assert_eq!(cut.cached_grad(&y).unwrap(), &[4.0]);
        let grads = tape.resume_backward(cut).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[8.0]);
    }

    #[test]
    fn two_phase_matches_single_phase_with_bypass_paths() {
        // The loss depends on the cut tensor both through the post segment
        // and through paths that bypass it, mirroring the cycle graph.
        let mut rng = StdRng::seed_from_u64(11);
        let xv = randn(&mut rng, 8);
        let build = |tape: &Tape| -> (Tensor, Tensor, Tensor) {
            let x = tape.leaf(xv.clone(), &[8]).unwrap();
            let pre = x.tanh().unwrap().mul(&x.sigmoid().unwrap()).unwrap();
            let cut_t = pre.relu().unwrap().offset(0.1).unwrap();
            let post = cut_t.log().unwrap().mul(&cut_t).unwrap().mean().unwrap();
            let bypass = pre.mul(&pre).unwrap().mean().unwrap();
            let direct = x.exp().unwrap().mean().unwrap();
            let loss = post
                .add(&bypass.scale(0.5).unwrap())
                .unwrap()
                .add(&direct.scale(0.25).unwrap())
                .unwrap();
            (x, cut_t, loss)
        };

        let t1 = Tape::new();
        let (x1, _, loss1) = build(&t1);
        let g1 = t1.backward(&loss1).unwrap();
        let single = g1.get(&x1).unwrap().to_vec();

        let t2 = Tape::new();
        let (x2, cut_t, loss2) = build(&t2);
        let cut = t2.backward_to_cut(&loss2, &[&cut_t]).unwrap();
        let g2 = t2.resume_backward(cut).unwrap();
        let two = g2.get(&x2).unwrap();

        for (a, b) in single.iter().zip(two.iter()) {
            assert!((a - b).abs() < 1e-6, "single {a} vs two-phase {b}");
        }
    }

    #[test]
    fn unreachable_cut_rejected() {
        let tape = Tape::new();
        let x = tape.leaf(vec![1.0], &[1]).unwrap();
        let stray = x.exp().unwrap();
        let loss = x.mul(&x).unwrap().sum().unwrap();
        assert!(matches!(
            tape.backward_to_cut(&loss, &[&stray]),
            Err(TensorError::UnreachableCut { .. })
        ));
    }

    #[test]
    fn resume_twice_rejected_via_consumption() {
        let tape = Tape::new();
        let x = tape.leaf(vec![2.0], &[1]).unwrap();
        let y = x.scale(3.0).unwrap();
        let loss = y.sum().unwrap();
        let cut = tape.backward_to_cut(&loss, &[&y]).unwrap();
        let _ = tape.resume_backward(cut).unwrap();
        // CutSet is consumed by value; a second resume cannot be expressed.
    }

    #[test]
    fn accumulation_linearity() {
        let mut rng = StdRng::seed_from_u64(5);
        let xv = randn(&mut rng, 8);
        let grad_of = |a: f32, b: f32| -> Vec<f32> {
            let tape = Tape::new();
            let x = tape.leaf(xv.clone(), &[8]).unwrap();
            let l1 = x.mul(&x).unwrap().mean().unwrap();
            let l2 = x.sigmoid().unwrap().sum().unwrap();
            let loss = l1.scale(a).unwrap().add(&l2.scale(b).unwrap()).unwrap();
            tape.backward(&loss).unwrap().get(&x).unwrap().to_vec()
        };
        let ga = grad_of(1.0, 0.0);
        let gb = grad_of(0.0, 1.0);
        let gc = grad_of(0.7, -1.3);
        for i in 0..8 {
            let expect = 0.7 * ga[i] - 1.3 * gb[i];
            assert!((gc[i] - expect).abs() < 1e-5);
        }
    }

    #[test]
    fn forward_determinism_bitwise() {
        let mut rng = StdRng::seed_from_u64(9);
        let xv = randn(&mut rng, 16);
        let run = || {
            let tape = Tape::new();
            let x = tape.leaf(xv.clone(), &[16]).unwrap();
            composite(&x).unwrap().item().unwrap()
        };
        assert_eq!(run().to_bits(), run().to_bits());
    }

    #[test]
    fn two_phase_reduces_peak_bytes() {
        // Long chain split near the middle: round one must release the
        // upper half before round two allocates the lower half's grads.
        let n = 1 << 12;
        let run = |two_phase: bool| -> (usize, Vec<f32>) {
            let tape = Tape::new();
            let x = tape.leaf(vec![0.5; n], &[n]).unwrap();
            let mut h = x.clone();
            for _ in 0..8 {
                h = h.tanh().unwrap();
            }
            let cut_t = h.clone();
            for _ in 0..8 {
                h = h.sigmoid().unwrap();
            }
            let loss = h.mean().unwrap();
            tape.reset_peak();
            let g = if two_phase {
                let cut = tape.backward_to_cut(&loss, &[&cut_t]).unwrap();
                tape.resume_backward(cut).unwrap()
            } else {
                tape.backward(&loss).unwrap()
            };
            (tape.peak_bytes(), g.get(&x).unwrap().to_vec())
        };
        let (peak_one, g_one) = run(false);
        let (peak_two, g_two) = run(true);
        for (a, b) in g_one.iter().zip(g_two.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
        assert!(
            (peak_two as f64) < 0.8 * peak_one as f64,
            "peak two-phase {peak_two} vs single {peak_one}"
        );
    }

    #[test]
    fn masked_extrema_route_gradients() {
        let tape = Tape::new();
        let x = tape.leaf(vec![3.0, -1.0, 2.0, 7.0], &[4]).unwrap();
        let mask = [1.0, 0.0, 1.0, 1.0];
        let lo = x.masked_min(&mask).unwrap();
        let hi = x.masked_max(&mask).unwrap();
        assert_eq!(lo.item().unwrap(), 2.0); // -1 is masked out
        assert_eq!(hi.item().unwrap(), 7.0);
        let loss = hi.sub(&lo).unwrap();
        let grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.get(&x).unwrap(), &[0.0, 0.0, -1.0, 1.0]);
        assert!(matches!(
            x.masked_min(&[0.0; 4]),
            Err(TensorError::EmptyMask { .. })
        ));
    }

    #[test]
    fn broadcast_and_reduce_roundtrip_grad() {
        let mut rng = StdRng::seed_from_u64(21);
        let x = Tensor::from_vec(randn(&mut rng, 3), &[3, 1]).unwrap();
        let err = finite_difference_check(
            &|t| {
                let b = t.broadcast_to(&[2, 3, 4])?;
                let c = b.mul(&b)?.sum_axis(2)?.mean_axis(0)?;
                c.sum()
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "rel err {err}");
    }

    #[test]
    fn concat_slice_cumsum_grads() {
        let mut rng = StdRng::seed_from_u64(33);
        let x = Tensor::from_vec(randn(&mut rng, 12), &[3, 4]).unwrap();
        let err = finite_difference_check(
            &|t| {
                let a = t.slice(1, 0, 2)?;
                let b = t.slice(1, 2, 2)?;
                let c = Tensor::concat(&[&b, &a, &b], 1)?;
                let s = c.cumsum_exclusive()?;
                s.mul(&s)?.mean()
            },
            &x,
            1e-3,
        )
        .unwrap();
        assert!(err < 1e-3, "rel err {err}");
    }
}
