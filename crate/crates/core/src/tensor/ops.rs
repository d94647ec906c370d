//! Tensor op surface: forward compute plus tape recording.
//!
//! Binary elementwise ops require exactly matching shapes; use
//! [`Tensor::broadcast_to`] first where the shapes differ. Ops record on the
//! tape of whichever input carries one; mixing tapes is an error.

use super::kernels::{self, ConvGeom};
use super::tape::{Op, Tape};
use super::{numel, Result, Tensor, TensorError};

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape != b.shape {
        return Err(TensorError::ShapeMismatch {
            op,
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    Ok(())
}

impl Tensor {
    // ── Elementwise binary ──────────────────────────────────────────

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape("add", self, rhs)?;
        let tape = Tape::of("add", &[self, rhs])?;
        let data = kernels::ew_zip(&self.data, &rhs.data, |a, b| a + b);
        Ok(Tape::record(
            tape,
            Op::Add,
            vec![self.node, rhs.node],
            data,
            self.shape.clone(),
        ))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape("sub", self, rhs)?;
        let tape = Tape::of("sub", &[self, rhs])?;
        let data = kernels::ew_zip(&self.data, &rhs.data, |a, b| a - b);
        Ok(Tape::record(
            tape,
            Op::Sub,
            vec![self.node, rhs.node],
            data,
            self.shape.clone(),
        ))
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape("mul", self, rhs)?;
        let tape = Tape::of("mul", &[self, rhs])?;
        let data = kernels::ew_mul(&self.data, &rhs.data);
        let op = Op::Mul {
            lhs: self.data.clone(),
            rhs: rhs.data.clone(),
        };
        Ok(Tape::record(
            tape,
            op,
            vec![self.node, rhs.node],
            data,
            self.shape.clone(),
        ))
    }

    pub fn div(&self, rhs: &Tensor) -> Result<Tensor> {
        same_shape("div", self, rhs)?;
        let tape = Tape::of("div", &[self, rhs])?;
        let data = kernels::ew_zip(&self.data, &rhs.data, |a, b| a / b);
        let op = Op::Div {
            lhs: self.data.clone(),
            rhs: rhs.data.clone(),
        };
        Ok(Tape::record(
            tape,
            op,
            vec![self.node, rhs.node],
            data,
            self.shape.clone(),
        ))
    }

    /// Multiply by a plain scalar constant.
    pub fn scale(&self, factor: f32) -> Result<Tensor> {
        let tape = Tape::of("scale", &[self])?;
        let data = kernels::ew_map(&self.data, |v| v * factor);
        Ok(Tape::record(
            tape,
            Op::Scale { factor },
            vec![self.node],
            data,
            self.shape.clone(),
        ))
    }

    /// Add a plain scalar constant.
    pub fn offset(&self, c: f32) -> Result<Tensor> {
        let tape = Tape::of("offset", &[self])?;
        let data = kernels::ew_map(&self.data, |v| v + c);
        Ok(Tape::record(
            tape,
            Op::Offset,
            vec![self.node],
            data,
            self.shape.clone(),
        ))
    }

    // ── Linear algebra ──────────────────────────────────────────────

    /// [m,k] · [k,n] → [m,n].
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 2 || rhs.shape.len() != 2 || self.shape[1] != rhs.shape[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape.clone(),
                rhs: rhs.shape.clone(),
            });
        }
        let (m, k, n) = (self.shape[0], self.shape[1], rhs.shape[1]);
        let tape = Tape::of("matmul", &[self, rhs])?;
        let data = kernels::matmul(&self.data, &rhs.data, m, k, n);
        let op = Op::Matmul {
            lhs: self.data.clone(),
            rhs: rhs.data.clone(),
            m,
            k,
            n,
        };
        Ok(Tape::record(
            tape,
            op,
            vec![self.node, rhs.node],
            data,
            vec![m, n],
        ))
    }

    /// 2D convolution with zero padding. self [cin,h,w], weight
    /// [cout,cin,kh,kw] → [cout,oh,ow].
    pub fn conv2d(&self, weight: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        if self.shape.len() != 3 || weight.shape.len() != 4 || self.shape[0] != weight.shape[1] {
            return Err(TensorError::ShapeMismatch {
                op: "conv2d",
                lhs: self.shape.clone(),
                rhs: weight.shape.clone(),
            });
        }
        if stride == 0 {
            return Err(TensorError::Unsupported {
                op: "conv2d",
                detail: "stride must be >= 1".into(),
            });
        }
        let geom = ConvGeom {
            cin: self.shape[0],
            h: self.shape[1],
            w: self.shape[2],
            cout: weight.shape[0],
            kh: weight.shape[2],
            kw: weight.shape[3],
            stride,
            pad,
        };
        if geom.h + 2 * pad < geom.kh || geom.w + 2 * pad < geom.kw {
            return Err(TensorError::InvalidShape {
                op: "conv2d",
                shape: self.shape.clone(),
                detail: "kernel larger than padded input".into(),
            });
        }
        let tape = Tape::of("conv2d", &[self, weight])?;
        let data = kernels::conv2d(&self.data, &weight.data, &geom);
        let shape = vec![geom.cout, geom.out_h(), geom.out_w()];
        let op = Op::Conv2d {
            input: self.data.clone(),
            weight: weight.data.clone(),
            geom,
        };
        Ok(Tape::record(
            tape,
            op,
            vec![self.node, weight.node],
            data,
            shape,
        ))
    }

    // ── Elementwise unary ───────────────────────────────────────────

    pub fn relu(&self) -> Result<Tensor> {
        let tape = Tape::of("relu", &[self])?;
        let data = kernels::ew_map(&self.data, |v| v.max(0.0));
        let op = Op::Relu {
            input: self.data.clone(),
        };
        Ok(Tape::record(tape, op, vec![self.node], data, self.shape.clone()))
    }

    pub fn softplus(&self) -> Result<Tensor> {
        let tape = Tape::of("softplus", &[self])?;
        let data = kernels::ew_map(&self.data, kernels::softplus_scalar);
        let op = Op::Softplus {
            input: self.data.clone(),
        };
        Ok(Tape::record(tape, op, vec![self.node], data, self.shape.clone()))
    }

    pub fn sigmoid(&self) -> Result<Tensor> {
        let tape = Tape::of("sigmoid", &[self])?;
        let data = kernels::ew_map(&self.data, kernels::sigmoid_scalar);
        let out = Tape::record(
            tape,
            Op::Sigmoid {
                output: super::Buf::plain(vec![]),
            },
            vec![self.node],
            data,
            self.shape.clone(),
        );
        Ok(fix_output_save(out, |buf| Op::Sigmoid { output: buf }))
    }

    pub fn tanh(&self) -> Result<Tensor> {
        let tape = Tape::of("tanh", &[self])?;
        let data: Vec<f32> = self.data.iter().map(|v| v.tanh()).collect();
        let out = Tape::record(
            tape,
            Op::Tanh {
                output: super::Buf::plain(vec![]),
            },
            vec![self.node],
            data,
            self.shape.clone(),
        );
        Ok(fix_output_save(out, |buf| Op::Tanh { output: buf }))
    }

    pub fn exp(&self) -> Result<Tensor> {
        let tape = Tape::of("exp", &[self])?;
        let data = kernels::ew_map(&self.data, |v| v.exp());
        let out = Tape::record(
            tape,
            Op::Exp {
                output: super::Buf::plain(vec![]),
            },
            vec![self.node],
            data,
            self.shape.clone(),
        );
        Ok(fix_output_save(out, |buf| Op::Exp { output: buf }))
    }

    pub fn log(&self) -> Result<Tensor> {
        let tape = Tape::of("log", &[self])?;
        let data = self.data.iter().map(|v| v.ln()).collect();
        let op = Op::Log {
            input: self.data.clone(),
        };
        Ok(Tape::record(tape, op, vec![self.node], data, self.shape.clone()))
    }

    pub fn sqrt(&self) -> Result<Tensor> {
        let tape = Tape::of("sqrt", &[self])?;
        let data: Vec<f32> = self.data.iter().map(|v| v.sqrt()).collect();
        let out = Tape::record(
            tape,
            Op::Sqrt {
                output: super::Buf::plain(vec![]),
            },
            vec![self.node],
            data,
            self.shape.clone(),
        );
        Ok(fix_output_save(out, |buf| Op::Sqrt { output: buf }))
    }

    // ── Reductions ──────────────────────────────────────────────────

    /// Sum of all elements → scalar (shape []).
    pub fn sum(&self) -> Result<Tensor> {
        let tape = Tape::of("sum", &[self])?;
        let data = kernels::reduce(&self.data, &self.shape, None, false);
        let op = Op::Sum {
            in_shape: self.shape.clone(),
            axis: None,
        };
        Ok(Tape::record(tape, op, vec![self.node], data, vec![]))
    }

    pub fn mean(&self) -> Result<Tensor> {
        let tape = Tape::of("mean", &[self])?;
        let data = kernels::reduce(&self.data, &self.shape, None, true);
        let op = Op::Mean {
            in_shape: self.shape.clone(),
            axis: None,
        };
        Ok(Tape::record(tape, op, vec![self.node], data, vec![]))
    }

    /// Sum along one axis; the axis is dropped from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis("sum_axis", axis, false)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        self.reduce_axis("mean_axis", axis, true)
    }

    fn reduce_axis(&self, opname: &'static str, axis: usize, mean: bool) -> Result<Tensor> {
        if axis >= self.shape.len() {
            return Err(TensorError::InvalidShape {
                op: opname,
                shape: self.shape.clone(),
                detail: format!("axis {} out of range", axis),
            });
        }
        let tape = Tape::of(opname, &[self])?;
        let data = kernels::reduce(&self.data, &self.shape, Some(axis), mean);
        let mut shape = self.shape.clone();
        shape.remove(axis);
        let op = if mean {
            Op::Mean {
                in_shape: self.shape.clone(),
                axis: Some(axis),
            }
        } else {
            Op::Sum {
                in_shape: self.shape.clone(),
                axis: Some(axis),
            }
        };
        Ok(Tape::record(tape, op, vec![self.node], data, shape))
    }

    // ── Shape ops ───────────────────────────────────────────────────

    pub fn broadcast_to(&self, target: &[usize]) -> Result<Tensor> {
        if target.len() < self.shape.len() {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast",
                lhs: self.shape.clone(),
                rhs: target.to_vec(),
            });
        }
        let offset = target.len() - self.shape.len();
        for (d, &s) in self.shape.iter().enumerate() {
            if s != 1 && s != target[offset + d] {
                return Err(TensorError::ShapeMismatch {
                    op: "broadcast",
                    lhs: self.shape.clone(),
                    rhs: target.to_vec(),
                });
            }
        }
        let tape = Tape::of("broadcast", &[self])?;
        let data = kernels::broadcast(&self.data, &self.shape, target);
        let op = Op::Broadcast {
            in_shape: self.shape.clone(),
        };
        Ok(Tape::record(tape, op, vec![self.node], data, target.to_vec()))
    }

    /// Zero-copy reshape (same element count).
    pub fn reshape(&self, target: &[usize]) -> Result<Tensor> {
        if numel(target) != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape.clone(),
                rhs: target.to_vec(),
            });
        }
        let tape = Tape::of("reshape", &[self])?;
        match tape {
            Some(tp) => {
                let node = tp.push(super::tape::Node {
                    op: Op::Reshape,
                    inputs: vec![self.node],
                    shape: target.to_vec(),
                    is_leaf: false,
                });
                Ok(Tensor {
                    shape: target.to_vec(),
                    data: self.data.clone(),
                    node: Some(node),
                    tape: Some(tp),
                })
            }
            None => Ok(Tensor {
                shape: target.to_vec(),
                data: self.data.clone(),
                node: None,
                tape: None,
            }),
        }
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(TensorError::Unsupported {
                op: "concat",
                detail: "no inputs".into(),
            });
        }
        let rank = parts[0].shape.len();
        for p in parts {
            if p.shape.len() != rank
                || axis >= rank
                || (0..rank).any(|d| d != axis && p.shape[d] != parts[0].shape[d])
            {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: parts[0].shape.clone(),
                    rhs: p.shape.clone(),
                });
            }
        }
        let tape = Tape::of("concat", parts)?;
        let datas: Vec<&[f32]> = parts.iter().map(|p| p.data.as_slice()).collect();
        let shapes: Vec<Vec<usize>> = parts.iter().map(|p| p.shape.clone()).collect();
        let data = kernels::concat(&datas, &shapes, axis);
        let mut shape = parts[0].shape.clone();
        shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
        let op = Op::Concat {
            axis,
            in_shapes: shapes,
        };
        let inputs = parts.iter().map(|p| p.node).collect();
        Ok(Tape::record(tape, op, inputs, data, shape))
    }

    /// Contiguous slab `start..start+len` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        if axis >= self.shape.len() || start + len > self.shape[axis] || len == 0 {
            return Err(TensorError::InvalidShape {
                op: "slice",
                shape: self.shape.clone(),
                detail: format!("axis {} range {}..{}", axis, start, start + len),
            });
        }
        let tape = Tape::of("slice", &[self])?;
        let data = kernels::slice(&self.data, &self.shape, axis, start, len);
        let mut shape = self.shape.clone();
        shape[axis] = len;
        let op = Op::Slice {
            in_shape: self.shape.clone(),
            axis,
            start,
        };
        Ok(Tape::record(tape, op, vec![self.node], data, shape))
    }

    // ── Specialised ops ─────────────────────────────────────────────

    /// Normalize rows (last axis) to unit L2 norm; norms below `eps` are
    /// clamped to `eps`.
    pub fn l2_normalize(&self, eps: f32) -> Result<Tensor> {
        let tape = Tape::of("l2_normalize", &[self])?;
        let data = kernels::l2_normalize(&self.data, &self.shape, eps);
        let op = Op::L2Normalize {
            input: self.data.clone(),
            eps,
        };
        Ok(Tape::record(tape, op, vec![self.node], data, self.shape.clone()))
    }

    /// Bilinear sampling of `self` = [c,h,w] at `uv` = [n,2], uv in
    /// [-1,1]² with align_corners semantics; out-of-range coordinates clamp
    /// to the border. Gradients flow to the plane only, so `uv` must be a
    /// constant.
    pub fn grid_sample_bilinear(&self, uv: &Tensor) -> Result<Tensor> {
        if self.shape.len() != 3 || uv.shape.len() != 2 || uv.shape[1] != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "grid_sample_bilinear",
                lhs: self.shape.clone(),
                rhs: uv.shape.clone(),
            });
        }
        if uv.is_on_tape() {
            return Err(TensorError::Unsupported {
                op: "grid_sample_bilinear",
                detail: "uv gradients are not supported; pass a detached uv".into(),
            });
        }
        let (c, h, w) = (self.shape[0], self.shape[1], self.shape[2]);
        if h < 1 || w < 1 {
            return Err(TensorError::InvalidShape {
                op: "grid_sample_bilinear",
                shape: self.shape.clone(),
                detail: "empty plane".into(),
            });
        }
        let tape = Tape::of("grid_sample_bilinear", &[self])?;
        let data = kernels::grid_sample(&self.data, &uv.data, c, h, w);
        let n = uv.shape[0];
        let op = Op::GridSample {
            uv: uv.data.clone(),
            c,
            h,
            w,
        };
        Ok(Tape::record(tape, op, vec![self.node], data, vec![n, c]))
    }

    /// Exclusive prefix sum along the last axis: out[..,k] = Σ_{j<k} in[..,j].
    pub fn cumsum_exclusive(&self) -> Result<Tensor> {
        if self.shape.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "cumsum_exclusive",
                shape: self.shape.clone(),
                detail: "needs at least rank 1".into(),
            });
        }
        let tape = Tape::of("cumsum_exclusive", &[self])?;
        let data = kernels::cumsum_exclusive(&self.data, &self.shape);
        Ok(Tape::record(
            tape,
            Op::CumsumExclusive,
            vec![self.node],
            data,
            self.shape.clone(),
        ))
    }

    /// Minimum over elements where mask > 0.5 → scalar. The gradient routes
    /// to the (first) arg-min element.
    pub fn masked_min(&self, mask: &[f32]) -> Result<Tensor> {
        self.masked_extremum("masked_min", mask, false)
    }

    pub fn masked_max(&self, mask: &[f32]) -> Result<Tensor> {
        self.masked_extremum("masked_max", mask, true)
    }

    fn masked_extremum(&self, opname: &'static str, mask: &[f32], max: bool) -> Result<Tensor> {
        if mask.len() != self.numel() {
            return Err(TensorError::ShapeMismatch {
                op: opname,
                lhs: self.shape.clone(),
                rhs: vec![mask.len()],
            });
        }
        let mut best: Option<(usize, f32)> = None;
        for (i, (&v, &m)) in self.data.iter().zip(mask.iter()).enumerate() {
            if m <= 0.5 {
                continue;
            }
            let better = match best {
                None => true,
                Some((_, bv)) => {
                    if max {
                        v > bv
                    } else {
                        v < bv
                    }
                }
            };
            if better {
                best = Some((i, v));
            }
        }
        let (arg, value) = best.ok_or(TensorError::EmptyMask { op: opname })?;
        let tape = Tape::of(opname, &[self])?;
        let op = if max {
            Op::MaxMasked { arg }
        } else {
            Op::MinMasked { arg }
        };
        Ok(Tape::record(tape, op, vec![self.node], vec![value], vec![]))
    }

    /// Gradient entry point: single-phase backward from this scalar.
    pub fn backward(&self) -> Result<super::Gradients> {
        match &self.tape {
            Some(tp) => tp.backward(self),
            None => Err(TensorError::NoTape),
        }
    }
}

/// Unary ops whose backward reads their own output: the output buf only
/// exists after recording, so patch the saved slot afterwards.
fn fix_output_save(out: Tensor, make: impl Fn(super::Buf) -> Op) -> Tensor {
    if let (Some(tape), Some(node)) = (&out.tape, out.node) {
        tape.patch_op(node, make(out.data.clone()));
    }
    out
}
