//! Dense-tensor reverse-mode autodiff. Values are stored as f32; reductions
//! and convolution inner loops accumulate in f64. Graphs are rebuilt every
//! forward pass (define-by-run) and `backward` walks the tape once, so every
//! run is deterministic on a single thread.

pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;
pub mod nn;
pub mod optim;

use std::cell::{Cell, Ref, RefCell, RefMut};
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

static NEXT_ID: AtomicU64 = AtomicU64::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

/// Disable tape building while the guard lives: ops create plain value nodes
/// with no parents, so inference keeps only the tensors still referenced.
pub struct NoGradGuard {
    prev: bool,
}

pub fn no_grad() -> NoGradGuard {
    let prev = GRAD_ENABLED.with(|g| g.replace(false));
    NoGradGuard { prev }
}

impl Drop for NoGradGuard {
    fn drop(&mut self) {
        let prev = self.prev;
        GRAD_ENABLED.with(|g| g.set(prev));
    }
}

type BackwardFn = Box<dyn Fn(&Node)>;

pub struct Node {
    id: u64,
    shape: Vec<usize>,
    values: RefCell<Vec<f32>>,
    grad: RefCell<Option<Vec<f32>>>,
    is_param: bool,
    track: bool,
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

impl Node {
    pub(crate) fn grad(&self) -> &RefCell<Option<Vec<f32>>> {
        &self.grad
    }

    pub(crate) fn values_ref(&self) -> &RefCell<Vec<f32>> {
        &self.values
    }

    pub(crate) fn parents(&self) -> &[Tensor] {
        &self.parents
    }
}

/// Cheaply clonable handle to one tape node.
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for d in (0..shape.len()).rev() {
        strides[d] = acc;
        acc *= shape[d];
    }
    strides
}

/// Walk `shape` in row-major order, calling `f(out_linear, off_a, off_b)`
/// where the offsets advance by the given per-dimension strides (0 strides
/// implement broadcasting or reduction).
fn zip_offsets(
    shape: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let rank = shape.len();
    let total: usize = shape.iter().product();
    let mut idx = vec![0usize; rank];
    let (mut offa, mut offb) = (0usize, 0usize);
    for k in 0..total {
        f(k, offa, offb);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offa += sa[d];
            offb += sb[d];
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
            offa -= sa[d] * shape[d];
            offb -= sb[d] * shape[d];
        }
    }
}

impl Tensor {
    fn new_leaf(shape: Vec<usize>, values: Vec<f32>, is_param: bool) -> Tensor {
        let len: usize = shape.iter().product();
        assert_eq!(values.len(), len, "tensor data does not match shape {:?}", shape);
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                values: RefCell::new(values),
                grad: RefCell::new(None),
                is_param,
                track: is_param,
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    /// Constant input: gradients do not flow into it.
    pub fn from_vec(shape: &[usize], values: Vec<f32>) -> Tensor {
        Tensor::new_leaf(shape.to_vec(), values, false)
    }

    /// Learnable leaf: `backward` accumulates gradients here.
    pub fn param(shape: &[usize], values: Vec<f32>) -> Tensor {
        Tensor::new_leaf(shape.to_vec(), values, true)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::from_vec(shape, vec![0.0; shape.iter().product()])
    }

    pub fn full(shape: &[usize], v: f32) -> Tensor {
        Tensor::from_vec(shape, vec![v; shape.iter().product()])
    }

    pub fn scalar(v: f32) -> Tensor {
        Tensor::from_vec(&[1], vec![v])
    }

    pub(crate) fn from_op(
        shape: Vec<usize>,
        values: Vec<f32>,
        parents: Vec<Tensor>,
        backward: impl Fn(&Node) + 'static,
    ) -> Tensor {
        let len: usize = shape.iter().product();
        assert_eq!(values.len(), len, "op output does not match shape {:?}", shape);
        let track = GRAD_ENABLED.with(|g| g.get()) && parents.iter().any(|p| p.node.track);
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                values: RefCell::new(values),
                grad: RefCell::new(None),
                is_param: false,
                track,
                // untracked subgraphs are dropped so constants do not pin the tape
                parents: if track { parents } else { Vec::new() },
                backward: if track { Some(Box::new(backward)) } else { None },
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn len(&self) -> usize {
        self.node.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn is_param(&self) -> bool {
        self.node.is_param
    }

    pub fn values(&self) -> Ref<'_, Vec<f32>> {
        self.node.values.borrow()
    }

    pub fn to_vec(&self) -> Vec<f32> {
        self.node.values.borrow().clone()
    }

    pub fn item(&self) -> f32 {
        assert_eq!(self.len(), 1, "item() needs a scalar tensor");
        self.node.values.borrow()[0]
    }

    /// Overwrite stored values (parameter loading / optimizer updates).
    pub fn set_values(&self, values: &[f32]) {
        let mut v = self.node.values.borrow_mut();
        assert_eq!(v.len(), values.len());
        v.copy_from_slice(values);
    }

    pub fn values_mut(&self) -> RefMut<'_, Vec<f32>> {
        self.node.values.borrow_mut()
    }

    /// Clamp stored values elementwise (projection/gate constraints).
    pub fn clamp_values(&self, lo: f32, hi: f32) {
        for v in self.node.values.borrow_mut().iter_mut() {
            *v = v.clamp(lo, hi);
        }
    }

    pub fn grad(&self) -> Option<Vec<f32>> {
        self.node.grad.borrow().clone()
    }

    pub fn zero_grad(&self) {
        *self.node.grad.borrow_mut() = None;
    }

    pub(crate) fn grad_buf(&self) -> RefMut<'_, Vec<f32>> {
        let len = self.len();
        RefMut::map(self.node.grad.borrow_mut(), |g| {
            g.get_or_insert_with(|| vec![0.0f32; len])
        })
    }

    pub(crate) fn tracked(&self) -> bool {
        self.node.track
    }

    /// New constant leaf sharing this tensor's current values; gradients stop
    /// here.
    pub fn detach(&self) -> Tensor {
        Tensor::from_vec(&self.node.shape, self.to_vec())
    }

    /// Reverse pass from a scalar loss. Gradients accumulate into parameter
    /// leaves; calling twice accumulates twice.
    pub fn backward(&self) {
        assert_eq!(self.len(), 1, "backward needs a scalar loss");
        if !self.node.track {
            return;
        }
        self.grad_buf()[0] += 1.0;

        let mut stack: Vec<Rc<Node>> = vec![self.node.clone()];
        let mut seen: HashSet<u64> = HashSet::new();
        let mut nodes: Vec<Rc<Node>> = Vec::new();
        while let Some(n) = stack.pop() {
            if !n.track || !seen.insert(n.id) {
                continue;
            }
            for p in &n.parents {
                stack.push(p.node.clone());
            }
            nodes.push(n);
        }
        // creation order is a topological order: parents precede children
        nodes.sort_by(|a, b| b.id.cmp(&a.id));
        for n in nodes {
            if n.grad.borrow().is_none() {
                continue; // never reached by the loss
            }
            if let Some(bf) = &n.backward {
                bf(&n);
            }
            if !n.is_param {
                *n.grad.borrow_mut() = None; // intermediates are consumed
            }
        }
    }

    // ---- elementwise ----

    pub fn relu(&self) -> Tensor {
        let out: Vec<f32> =
            self.values().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        Tensor::from_op(self.node.shape.clone(), out, vec![self.clone()], |node| {
            let g = node.grad.borrow();
            let g = g.as_deref().unwrap();
            let p = &node.parents[0];
            if !p.tracked() {
                return;
            }
            let pv = p.values();
            let mut pg = p.grad_buf();
            for i in 0..g.len() {
                if pv[i] > 0.0 {
                    pg[i] += g[i];
                }
            }
        })
    }

    pub fn sigmoid(&self) -> Tensor {
        let out: Vec<f32> = self
            .values()
            .iter()
            .map(|&v| (1.0 / (1.0 + (-(v as f64)).exp())) as f32)
            .collect();
        Tensor::from_op(self.node.shape.clone(), out, vec![self.clone()], |node| {
            let g = node.grad.borrow();
            let g = g.as_deref().unwrap();
            let y = node.values.borrow();
            let p = &node.parents[0];
            if !p.tracked() {
                return;
            }
            let mut pg = p.grad_buf();
            for i in 0..g.len() {
                pg[i] += g[i] * y[i] * (1.0 - y[i]);
            }
        })
    }

    pub fn scalar_mul(&self, c: f32) -> Tensor {
        let out: Vec<f32> = self.values().iter().map(|&v| c * v).collect();
        Tensor::from_op(self.node.shape.clone(), out, vec![self.clone()], move |node| {
            let g = node.grad.borrow();
            let g = g.as_deref().unwrap();
            let p = &node.parents[0];
            if !p.tracked() {
                return;
            }
            let mut pg = p.grad_buf();
            for i in 0..g.len() {
                pg[i] += c * g[i];
            }
        })
    }

    /// Multiply by a scalar tensor (a differentiable gate).
    pub fn scale_by(&self, s: &Tensor) -> Tensor {
        assert_eq!(s.len(), 1, "scale_by takes a scalar tensor");
        let sv = s.item();
        let out: Vec<f32> = self.values().iter().map(|&v| sv * v).collect();
        Tensor::from_op(
            self.node.shape.clone(),
            out,
            vec![self.clone(), s.clone()],
            move |node| {
                let g = node.grad.borrow();
                let g = g.as_deref().unwrap();
                let x = &node.parents[0];
                let s = &node.parents[1];
                if x.tracked() {
                    let mut xg = x.grad_buf();
                    for i in 0..g.len() {
                        xg[i] += sv * g[i];
                    }
                }
                if s.tracked() {
                    let xv = x.values();
                    let mut acc = 0f64;
                    for i in 0..g.len() {
                        acc += g[i] as f64 * xv[i] as f64;
                    }
                    s.grad_buf()[0] += acc as f32;
                }
            },
        )
    }

    // ---- broadcasting binary ops ----

    fn binary_op(
        &self,
        other: &Tensor,
        forward: impl Fn(f32, f32) -> f32,
        backward: impl Fn(&Node) + 'static,
    ) -> Tensor {
        let (sa, sb) = (self.shape(), other.shape());
        assert_eq!(sa.len(), sb.len(), "binary ops need equal rank: {:?} vs {:?}", sa, sb);
        let out_shape: Vec<usize> = sa
            .iter()
            .zip(sb)
            .map(|(&a, &b)| {
                assert!(
                    a == b || a == 1 || b == 1,
                    "incompatible shapes {:?} vs {:?}",
                    sa,
                    sb
                );
                a.max(b)
            })
            .collect();
        let av = self.values();
        let bv = other.values();
        let mut out = vec![0.0f32; out_shape.iter().product()];
        if sa == sb {
            for i in 0..out.len() {
                out[i] = forward(av[i], bv[i]);
            }
        } else {
            let stra = broadcast_strides(sa, &out_shape);
            let strb = broadcast_strides(sb, &out_shape);
            zip_offsets(&out_shape, &stra, &strb, |k, oa, ob| {
                out[k] = forward(av[oa], bv[ob]);
            });
        }
        drop(av);
        drop(bv);
        Tensor::from_op(out_shape, out, vec![self.clone(), other.clone()], backward)
    }

    pub fn add(&self, other: &Tensor) -> Tensor {
        self.binary_op(other, |a, b| a + b, |node| {
            let g = node.grad.borrow();
            let g = g.as_deref().unwrap();
            for p in &node.parents {
                if p.tracked() {
                    accumulate_reduced(p, &node.shape, g, 1.0);
                }
            }
        })
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        self.binary_op(other, |a, b| a - b, |node| {
            let g = node.grad.borrow();
            let g = g.as_deref().unwrap();
            let (a, b) = (&node.parents[0], &node.parents[1]);
            if a.tracked() {
                accumulate_reduced(a, &node.shape, g, 1.0);
            }
            if b.tracked() {
                accumulate_reduced(b, &node.shape, g, -1.0);
            }
        })
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        self.binary_op(other, |a, b| a * b, |node| {
            let g = node.grad.borrow();
            let g = g.as_deref().unwrap();
            let (a, b) = (&node.parents[0], &node.parents[1]);
            if a.tracked() {
                let bv = b.values();
                accumulate_reduced_weighted(a, b.shape(), &node.shape, g, &bv);
            }
            if b.tracked() {
                let av = a.values();
                accumulate_reduced_weighted(b, a.shape(), &node.shape, g, &av);
            }
        })
    }

    // ---- shape ops ----

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let new_len: usize = shape.iter().product();
        assert_eq!(self.len(), new_len, "reshape {:?} -> {:?}", self.shape(), shape);
        let out = self.to_vec();
        Tensor::from_op(shape.to_vec(), out, vec![self.clone()], |node| {
            let g = node.grad.borrow();
            let g = g.as_deref().unwrap();
            let p = &node.parents[0];
            if !p.tracked() {
                return;
            }
            let mut pg = p.grad_buf();
            for i in 0..g.len() {
                pg[i] += g[i];
            }
        })
    }

    pub fn permute(&self, order: &[usize]) -> Tensor {
        let rank = self.shape().len();
        assert_eq!(order.len(), rank);
        let mut seen = vec![false; rank];
        for &d in order {
            assert!(d < rank && !seen[d], "invalid permutation {:?}", order);
            seen[d] = true;
        }
        let in_shape = self.shape().to_vec();
        let in_strides = contiguous_strides(&in_shape);
        let out_shape: Vec<usize> = order.iter().map(|&d| in_shape[d]).collect();
        let perm_strides: Vec<usize> = order.iter().map(|&d| in_strides[d]).collect();
        let iv = self.values();
        let mut out = vec![0.0f32; iv.len()];
        let zero = vec![0usize; rank];
        zip_offsets(&out_shape, &perm_strides, &zero, |k, off, _| {
            out[k] = iv[off];
        });
        drop(iv);
        let order_owned = order.to_vec();
        Tensor::from_op(out_shape.clone(), out, vec![self.clone()], move |node| {
            let g = node.grad.borrow();
            let g = g.as_deref().unwrap();
            let p = &node.parents[0];
            if !p.tracked() {
                return;
            }
            let in_strides = contiguous_strides(p.shape());
            let perm_strides: Vec<usize> =
                order_owned.iter().map(|&d| in_strides[d]).collect();
            let zero = vec![0usize; node.shape.len()];
            let mut pg = p.grad_buf();
            zip_offsets(&node.shape, &perm_strides, &zero, |k, off, _| {
                pg[off] += g[k];
            });
        })
    }

    /// Expand size-1 dimensions to a target shape (rank must match).
    pub fn broadcast_to(&self, shape: &[usize]) -> Tensor {
        assert_eq!(self.shape().len(), shape.len());
        for (&a, &t) in self.shape().iter().zip(shape) {
            assert!(a == t || a == 1, "cannot broadcast {:?} to {:?}", self.shape(), shape);
        }
        let strides = broadcast_strides(self.shape(), shape);
        let iv = self.values();
        let mut out = vec![0.0f32; shape.iter().product()];
        let zero = vec![0usize; shape.len()];
        zip_offsets(shape, &strides, &zero, |k, off, _| {
            out[k] = iv[off];
        });
        drop(iv);
        Tensor::from_op(shape.to_vec(), out, vec![self.clone()], |node| {
            let g = node.grad.borrow();
            let g = g.as_deref().unwrap();
            let p = &node.parents[0];
            if !p.tracked() {
                return;
            }
            accumulate_reduced(p, &node.shape, g, 1.0);
        })
    }

    /// Concatenate along `axis`; all other dimensions must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty());
        let rank = parts[0].shape().len();
        assert!(axis < rank);
        for p in parts {
            assert_eq!(p.shape().len(), rank);
            for d in 0..rank {
                if d != axis {
                    assert_eq!(
                        p.shape()[d],
                        parts[0].shape()[d],
                        "concat shapes differ off-axis"
                    );
                }
            }
        }
        let mut out_shape = parts[0].shape().to_vec();
        out_shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        let outer: usize = out_shape[..axis].iter().product();
        let tail: usize = out_shape[axis + 1..].iter().product();
        let blocks: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * tail).collect();
        let row: usize = blocks.iter().sum();
        let mut out = vec![0.0f32; out_shape.iter().product()];
        for (pi, p) in parts.iter().enumerate() {
            let pv = p.values();
            let block = blocks[pi];
            let base: usize = blocks[..pi].iter().sum();
            for o in 0..outer {
                let dst = o * row + base;
                out[dst..dst + block].copy_from_slice(&pv[o * block..(o + 1) * block]);
            }
        }
        let parents: Vec<Tensor> = parts.to_vec();
        Tensor::from_op(out_shape, out, parents, move |node| {
            let g = node.grad.borrow();
            let g = g.as_deref().unwrap();
            let row: usize = blocks.iter().sum();
            let mut base = 0usize;
            for (pi, p) in node.parents.iter().enumerate() {
                let block = blocks[pi];
                if p.tracked() {
                    let mut pg = p.grad_buf();
                    for o in 0..outer {
                        let src = o * row + base;
                        let dst = &mut pg[o * block..(o + 1) * block];
                        for (d, &s) in dst.iter_mut().zip(&g[src..src + block]) {
                            *d += s;
                        }
                    }
                }
                base += block;
            }
        })
    }

    // ---- reductions ----

    pub fn mean(&self) -> Tensor {
        let n = self.len() as f64;
        let sum: f64 = self.values().iter().map(|&v| v as f64).sum();
        Tensor::from_op(vec![1], vec![(sum / n) as f32], vec![self.clone()], move |node| {
            let g = node.grad.borrow().as_deref().unwrap()[0];
            let p = &node.parents[0];
            if !p.tracked() {
                return;
            }
            let share = (g as f64 / n) as f32;
            let mut pg = p.grad_buf();
            for v in pg.iter_mut() {
                *v += share;
            }
        })
    }

    /// Mean over the given axes, keeping reduced dimensions at size 1.
    pub fn mean_axes(&self, axes: &[usize]) -> Tensor {
        let rank = self.shape().len();
        let mut reduce = vec![false; rank];
        for &a in axes {
            assert!(a < rank);
            reduce[a] = true;
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = in_shape
            .iter()
            .enumerate()
            .map(|(d, &s)| if reduce[d] { 1 } else { s })
            .collect();
        let count: usize = in_shape
            .iter()
            .enumerate()
            .filter(|(d, _)| reduce[*d])
            .map(|(_, &s)| s)
            .product();
        let out_strides = broadcast_strides(&out_shape, &in_shape);
        let in_strides = contiguous_strides(&in_shape);
        let iv = self.values();
        let mut acc = vec![0f64; out_shape.iter().product()];
        zip_offsets(&in_shape, &in_strides, &out_strides, |_, i, o| {
            acc[o] += iv[i] as f64;
        });
        drop(iv);
        let inv = 1.0 / count as f64;
        let out: Vec<f32> = acc.into_iter().map(|v| (v * inv) as f32).collect();
        Tensor::from_op(out_shape.clone(), out, vec![self.clone()], move |node| {
            let g = node.grad.borrow();
            let g = g.as_deref().unwrap();
            let p = &node.parents[0];
            if !p.tracked() {
                return;
            }
            let in_shape = p.shape().to_vec();
            let in_strides = contiguous_strides(&in_shape);
            let out_strides = broadcast_strides(&node.shape, &in_shape);
            let mut pg = p.grad_buf();
            zip_offsets(&in_shape, &in_strides, &out_strides, |_, i, o| {
                pg[i] += (g[o] as f64 * inv) as f32;
            });
        })
    }

    /// Max over one axis (kept at size 1); gradient flows to the first
    /// maximum along the axis.
    pub fn max_axis(&self, axis: usize) -> Tensor {
        let rank = self.shape().len();
        assert!(axis < rank);
        let in_shape = self.shape().to_vec();
        let outer: usize = in_shape[..axis].iter().product();
        let alen = in_shape[axis];
        let inner: usize = in_shape[axis + 1..].iter().product();
        let iv = self.values();
        let mut out = vec![0.0f32; outer * inner];
        let mut arg = vec![0u32; outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut best = f32::NEG_INFINITY;
                let mut best_idx = 0usize;
                for a in 0..alen {
                    let idx = (o * alen + a) * inner + i;
                    if iv[idx] > best {
                        best = iv[idx];
                        best_idx = idx;
                    }
                }
                out[o * inner + i] = best;
                arg[o * inner + i] = best_idx as u32;
            }
        }
        drop(iv);
        let mut out_shape = in_shape.clone();
        out_shape[axis] = 1;
        Tensor::from_op(out_shape, out, vec![self.clone()], move |node| {
            let g = node.grad.borrow();
            let g = g.as_deref().unwrap();
            let p = &node.parents[0];
            if !p.tracked() {
                return;
            }
            let mut pg = p.grad_buf();
            for (k, &a) in arg.iter().enumerate() {
                pg[a as usize] += g[k];
            }
        })
    }

    /// Mean absolute error against `target`, as a scalar.
    pub fn l1_loss(&self, target: &Tensor) -> Tensor {
        assert_eq!(self.shape(), target.shape(), "l1_loss shapes differ");
        let av = self.values();
        let bv = target.values();
        let n = av.len() as f64;
        let sum: f64 =
            av.iter().zip(bv.iter()).map(|(&a, &b)| (a as f64 - b as f64).abs()).sum();
        drop(av);
        drop(bv);
        Tensor::from_op(
            vec![1],
            vec![(sum / n) as f32],
            vec![self.clone(), target.clone()],
            move |node| {
                let g = node.grad.borrow().as_deref().unwrap()[0];
                let a = &node.parents[0];
                let b = &node.parents[1];
                let share = (g as f64 / n) as f32;
                let av = a.values();
                let bv = b.values();
                if a.tracked() {
                    let mut ag = a.grad_buf();
                    for i in 0..av.len() {
                        let s = (av[i] - bv[i]).signum_or_zero();
                        ag[i] += share * s;
                    }
                }
                if b.tracked() {
                    let mut bg = b.grad_buf();
                    for i in 0..av.len() {
                        let s = (av[i] - bv[i]).signum_or_zero();
                        bg[i] -= share * s;
                    }
                }
            },
        )
    }

    /// 2-D convolution with stride 1 and symmetric zero padding that keeps
    /// the spatial size ("same"). `self` is (B, C, H, W); `weight` is
    /// (O, C, KH, KW) with odd kernel dims; `bias` is (O) if present.
    pub fn conv2d(&self, weight: &Tensor, bias: Option<&Tensor>) -> Tensor {
        let xs = self.shape();
        let ws = weight.shape();
        assert_eq!(xs.len(), 4, "conv2d input must be 4-D, got {:?}", xs);
        assert_eq!(ws.len(), 4, "conv2d weight must be 4-D, got {:?}", ws);
        let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        assert_eq!(c, wc, "conv2d channels: input {} vs weight {}", c, wc);
        assert!(kh % 2 == 1 && kw % 2 == 1, "conv2d kernels must be odd-sized");
        if let Some(bt) = bias {
            assert_eq!(bt.shape(), &[o], "conv2d bias must be (out_channels)");
        }
        let out = {
            let xv = self.values();
            let wv = weight.values();
            let bv = bias.map(|t| t.to_vec());
            kernels::conv2d_forward(&xv, b, c, h, w, &wv, o, kh, kw, bv.as_deref())
        };
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(bt) = bias {
            parents.push(bt.clone());
        }
        let dims = kernels::ConvDims { b, c, h, w, o, kh, kw };
        Tensor::from_op(vec![b, o, h, w], out, parents, move |node| {
            let g = node.grad.borrow();
            let g = g.as_deref().unwrap();
            let x = &node.parents[0];
            let wt = &node.parents[1];
            if x.tracked() {
                let wv = wt.values();
                let gx = kernels::conv2d_grad_input(g, &wv, &dims);
                let mut xg = x.grad_buf();
                for (d, s) in xg.iter_mut().zip(gx) {
                    *d += s;
                }
            }
            if wt.tracked() {
                let xv = x.values();
                let gw = kernels::conv2d_grad_weight(g, &xv, &dims);
                let mut wg = wt.grad_buf();
                for (d, s) in wg.iter_mut().zip(gw) {
                    *d += s;
                }
            }
            if node.parents.len() == 3 && node.parents[2].tracked() {
                let gb = kernels::conv2d_grad_bias(g, &dims);
                let mut bg = node.parents[2].grad_buf();
                for (d, s) in bg.iter_mut().zip(gb) {
                    *d += s;
                }
            }
        })
    }
}

trait SignumOrZero {
    fn signum_or_zero(self) -> f32;
}

impl SignumOrZero for f32 {
    fn signum_or_zero(self) -> f32 {
        if self > 0.0 {
            1.0
        } else if self < 0.0 {
            -1.0
        } else {
            0.0
        }
    }
}

fn broadcast_strides(from: &[usize], to: &[usize]) -> Vec<usize> {
    let strides = contiguous_strides(from);
    from.iter()
        .zip(to)
        .zip(strides)
        .map(|((&f, &t), s)| if f == t { s } else { 0 })
        .collect()
}

/// grad_parent += scale * reduce(grad_out) over broadcast dimensions.
fn accumulate_reduced(p: &Tensor, out_shape: &[usize], g: &[f32], scale: f32) {
    if p.shape() == out_shape {
        let mut pg = p.grad_buf();
        if scale == 1.0 {
            for i in 0..g.len() {
                pg[i] += g[i];
            }
        } else {
            for i in 0..g.len() {
                pg[i] += scale * g[i];
            }
        }
        return;
    }
    let strides = broadcast_strides(p.shape(), out_shape);
    let mut acc = vec![0f64; p.len()];
    let zero = vec![0usize; out_shape.len()];
    zip_offsets(out_shape, &strides, &zero, |k, off, _| {
        acc[off] += g[k] as f64;
    });
    let mut pg = p.grad_buf();
    for (d, a) in pg.iter_mut().zip(acc) {
        *d += (scale as f64 * a) as f32;
    }
}

/// grad_parent += reduce(grad_out * other_values) for the product rule.
fn accumulate_reduced_weighted(
    p: &Tensor,
    other_shape: &[usize],
    out_shape: &[usize],
    g: &[f32],
    other: &[f32],
) {
    let sp = broadcast_strides(p.shape(), out_shape);
    let so = broadcast_strides(other_shape, out_shape);
    if p.shape() == out_shape {
        let mut pg = p.grad_buf();
        zip_offsets(out_shape, &sp, &so, |k, op, oo| {
            pg[op] += g[k] * other[oo];
        });
        return;
    }
    let mut acc = vec![0f64; p.len()];
    zip_offsets(out_shape, &sp, &so, |k, op, oo| {
        acc[op] += g[k] as f64 * other[oo] as f64;
    });
    let mut pg = p.grad_buf();
    for (d, a) in pg.iter_mut().zip(acc) {
        *d += a as f32;
    }
}

#[cfg(test)]
mod tests {
    use super::gradcheck::{check, FdOpts};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Values bounded away from zero so relu/l1 kinks stay out of FD reach.
    fn kink_free(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n)
            .map(|_| {
                let mag = rng.random_range(0.1f32..1.0);
                if rng.random::<bool>() {
                    mag
                } else {
                    -mag
                }
            })
            .collect();
        Tensor::param(shape, data)
    }

    fn smooth(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        Tensor::param(shape, data)
    }

    /// Constant weighting so reductions do not hide per-element errors.
    fn probe(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.random_range(0.3f32..1.3)).collect();
        Tensor::from_vec(shape, data)
    }

    fn fd_shapes() -> Vec<Vec<usize>> {
        vec![vec![7], vec![2, 3], vec![3, 1, 4], vec![2, 2, 3, 3], vec![1, 5, 2, 2]]
    }

    #[test]
    fn relu_gradient_matches_finite_differences() {
        let mut r = rng(11);
        for shape in fd_shapes() {
            let x = kink_free(&shape, &mut r);
            let c = probe(&shape, &mut r);
            let f = || x.relu().mul(&c).mean();
            check(&[&x], &f, &FdOpts::default()).unwrap();
        }
    }

    #[test]
    fn sigmoid_gradient_matches_finite_differences() {
        let mut r = rng(12);
        for shape in fd_shapes() {
            let x = smooth(&shape, &mut r);
            let c = probe(&shape, &mut r);
            let f = || x.sigmoid().mul(&c).mean();
            check(&[&x], &f, &FdOpts::default()).unwrap();
        }
    }

    #[test]
    fn binary_op_gradients_match_finite_differences() {
        let mut r = rng(13);
        for shape in fd_shapes() {
            let a = smooth(&shape, &mut r);
            let b = smooth(&shape, &mut r);
            let c = probe(&shape, &mut r);
            let add = || a.add(&b).mul(&c).mean();
            check(&[&a, &b], &add, &FdOpts::default()).unwrap();
            let sub = || a.sub(&b).mul(&c).mean();
            check(&[&a, &b], &sub, &FdOpts::default()).unwrap();
            let mul = || a.mul(&b).mul(&c).mean();
            check(&[&a, &b], &mul, &FdOpts::default()).unwrap();
        }
    }

    #[test]
    fn broadcast_binary_gradients_match_finite_differences() {
        let mut r = rng(14);
        let pairs: Vec<(Vec<usize>, Vec<usize>)> = vec![
            (vec![2, 3, 4], vec![2, 1, 4]),
            (vec![2, 3, 4], vec![1, 1, 1]),
            (vec![4, 3], vec![1, 3]),
            (vec![2, 3, 2, 2], vec![2, 3, 1, 1]),
            (vec![2, 1, 2, 2], vec![2, 3, 1, 1]), // both sides broadcast
        ];
        for (sa, sb) in pairs {
            let a = smooth(&sa, &mut r);
            let b = smooth(&sb, &mut r);
            let out_shape: Vec<usize> =
                sa.iter().zip(&sb).map(|(&x, &y)| x.max(y)).collect();
            let c = probe(&out_shape, &mut r);
            let add = || a.add(&b).mul(&c).mean();
            check(&[&a, &b], &add, &FdOpts::default()).unwrap();
            let mul = || a.mul(&b).mul(&c).mean();
            check(&[&a, &b], &mul, &FdOpts::default()).unwrap();
            let sub = || a.sub(&b).mul(&c).mean();
            check(&[&a, &b], &sub, &FdOpts::default()).unwrap();
        }
    }

    #[test]
    fn scalar_mul_and_scale_by_gradients_match_finite_differences() {
        let mut r = rng(15);
        for shape in fd_shapes() {
            let x = smooth(&shape, &mut r);
            let s = Tensor::param(&[1], vec![r.random_range(0.2f32..1.5)]);
            let c = probe(&shape, &mut r);
            let f1 = || x.scalar_mul(0.7).mul(&c).mean();
            check(&[&x], &f1, &FdOpts::default()).unwrap();
            let f2 = || x.scale_by(&s).mul(&c).mean();
            check(&[&x, &s], &f2, &FdOpts::default()).unwrap();
        }
    }

    #[test]
    fn concat_gradients_match_finite_differences() {
        let mut r = rng(16);
        let cases: Vec<(Vec<Vec<usize>>, usize)> = vec![
            (vec![vec![2, 1, 2], vec![2, 3, 2], vec![2, 2, 2]], 1),
            (vec![vec![1, 4], vec![2, 4]], 0),
            (vec![vec![2, 2, 1], vec![2, 2, 3]], 2),
            (vec![vec![3], vec![2]], 0),
            (vec![vec![1, 2, 2, 2], vec![1, 1, 2, 2]], 1),
        ];
        for (shapes, axis) in cases {
            let parts: Vec<Tensor> = shapes.iter().map(|s| smooth(s, &mut r)).collect();
            let refs: Vec<&Tensor> = parts.iter().collect();
            let mut out_shape = shapes[0].clone();
            out_shape[axis] = shapes.iter().map(|s| s[axis]).sum();
            let c = probe(&out_shape, &mut r);
            let f = || Tensor::concat(&parts, axis).mul(&c).mean();
            check(&refs, &f, &FdOpts::default()).unwrap();
        }
    }

    #[test]
    fn reduction_gradients_match_finite_differences() {
        let mut r = rng(17);
        let shape = vec![2, 3, 4, 5];
        let x = smooth(&shape, &mut r);
        let f_mean = || x.mean();
        check(&[&x], &f_mean, &FdOpts::default()).unwrap();
        for axes in [vec![0], vec![1], vec![2, 3], vec![0, 3], vec![1, 2]] {
            let out_shape: Vec<usize> = shape
                .iter()
                .enumerate()
                .map(|(d, &s)| if axes.contains(&d) { 1 } else { s })
                .collect();
            let c = probe(&out_shape, &mut r);
            let f = || x.mean_axes(&axes).mul(&c).mean();
            check(&[&x], &f, &FdOpts::default()).unwrap();
        }
    }

    #[test]
    fn max_axis_gradient_matches_finite_differences() {
        let mut r = rng(18);
        let shape = vec![2, 3, 4];
        // spaced, shuffled values keep every pairwise gap well above the FD step
        let n: usize = shape.iter().product();
        let mut vals: Vec<f32> = (0..n).map(|i| -1.0 + 2.0 * i as f32 / n as f32).collect();
        for i in (1..n).rev() {
            let j = r.random_range(0..=i);
            vals.swap(i, j);
        }
        for axis in 0..shape.len() {
            let x = Tensor::param(&shape, vals.clone());
            let mut out_shape = shape.clone();
            out_shape[axis] = 1;
            let c = probe(&out_shape, &mut r);
            let f = || x.max_axis(axis).mul(&c).mean();
            check(&[&x], &f, &FdOpts::default()).unwrap();
        }
    }

    #[test]
    fn max_axis_ties_send_gradient_to_first_maximum() {
        let x = Tensor::param(&[3], vec![1.0, 5.0, 5.0]);
        let y = x.max_axis(0);
        assert_eq!(y.to_vec(), vec![5.0]);
        y.mean().backward();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn shape_op_gradients_match_finite_differences() {
        let mut r = rng(19);
        let x = smooth(&[2, 3, 4], &mut r);
        let c1 = probe(&[4, 6], &mut r);
        let f1 = || x.reshape(&[4, 6]).mul(&c1).mean();
        check(&[&x], &f1, &FdOpts::default()).unwrap();

        let c2 = probe(&[4, 2, 3], &mut r);
        let f2 = || x.permute(&[2, 0, 1]).mul(&c2).mean();
        check(&[&x], &f2, &FdOpts::default()).unwrap();

        let y = smooth(&[2, 1, 4], &mut r);
        let c3 = probe(&[2, 3, 4], &mut r);
        let f3 = || y.broadcast_to(&[2, 3, 4]).mul(&c3).mean();
        check(&[&y], &f3, &FdOpts::default()).unwrap();
    }

    #[test]
    fn permute_round_trip_is_bit_exact() {
        let mut r = rng(20);
        let x = smooth(&[2, 3, 4, 5, 2], &mut r);
        let order = [3, 0, 4, 1, 2];
        // inverse[order[i]] = i
        let mut inverse = [0usize; 5];
        for (i, &d) in order.iter().enumerate() {
            inverse[d] = i;
        }
        let back = x.permute(&order).permute(&inverse);
        assert_eq!(back.shape(), x.shape());
        assert_eq!(back.to_vec(), x.to_vec());
    }

    #[test]
    fn permute_moves_values_where_expected() {
        // (2,3) -> transpose
        let x = Tensor::from_vec(&[2, 3], vec![0., 1., 2., 3., 4., 5.]);
        let t = x.permute(&[1, 0]);
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.to_vec(), vec![0., 3., 1., 4., 2., 5.]);
    }

    #[test]
    fn concat_then_slice_back_restores_parts() {
        let a = Tensor::from_vec(&[2, 1, 2], vec![1., 2., 3., 4.]);
        let b = Tensor::from_vec(&[2, 2, 2], vec![5., 6., 7., 8., 9., 10., 11., 12.]);
        let cat = Tensor::concat(&[a.clone(), b.clone()], 1);
        assert_eq!(cat.shape(), &[2, 3, 2]);
        assert_eq!(
            cat.to_vec(),
            vec![1., 2., 5., 6., 7., 8., 3., 4., 9., 10., 11., 12.]
        );
    }

    #[test]
    fn l1_loss_gradients_match_finite_differences() {
        let mut r = rng(21);
        for shape in fd_shapes() {
            let a = smooth(&shape, &mut r);
            // keep |a - b| >= 0.05 so the sign never flips under the FD step
            let bd: Vec<f32> = a
                .to_vec()
                .iter()
                .map(|&v| {
                    let gap = r.random_range(0.05f32..0.5);
                    if r.random::<bool>() {
                        v + gap
                    } else {
                        v - gap
                    }
                })
                .collect();
            let b = Tensor::param(&shape, bd);
            let f = || a.l1_loss(&b);
            check(&[&a, &b], &f, &FdOpts::default()).unwrap();
        }
    }

    #[test]
    fn conv2d_gradients_match_finite_differences() {
        let mut r = rng(22);
        // (b, c, h, w, o, k, bias)
        let cases = [
            (1, 1, 3, 3, 1, 1, false),
            (2, 3, 4, 5, 2, 3, false),
            (1, 2, 7, 6, 3, 3, true),
            (2, 1, 5, 5, 1, 5, false),
            (1, 4, 4, 4, 2, 1, true),
        ];
        for &(b, c, h, w, o, k, bias) in &cases {
            let x = smooth(&[b, c, h, w], &mut r);
            let wt = Tensor::param(
                &[o, c, k, k],
                (0..o * c * k * k).map(|_| r.random_range(-0.5f32..0.5)).collect(),
            );
            let bt = Tensor::param(&[o], (0..o).map(|_| r.random_range(-0.3f32..0.3)).collect());
            let cst = probe(&[b, o, h, w], &mut r);
            let f = || {
                let y = if bias { x.conv2d(&wt, Some(&bt)) } else { x.conv2d(&wt, None) };
                y.mul(&cst).mean()
            };
            let mut inputs = vec![&x, &wt];
            if bias {
                inputs.push(&bt);
            }
            check(&inputs, &f, &FdOpts::default()).unwrap();
        }
    }

    #[test]
    fn conv2d_composed_with_sigmoid_matches_finite_differences() {
        let mut r = rng(23);
        let x = smooth(&[2, 2, 4, 4], &mut r);
        let wt = Tensor::param(
            &[3, 2, 3, 3],
            (0..54).map(|_| r.random_range(-0.4f32..0.4)).collect(),
        );
        let f = || x.conv2d(&wt, None).sigmoid().mean();
        check(&[&x, &wt], &f, &FdOpts::default()).unwrap();
    }

    #[test]
    fn conv2d_center_only_kernel_is_identity() {
        let mut r = rng(24);
        let x = smooth(&[2, 3, 5, 6], &mut r);
        let mut wd = vec![0.0f32; 3 * 3 * 3 * 3];
        for ci in 0..3 {
            wd[(ci * 3 + ci) * 9 + 4] = 1.0; // center tap of the matching channel
        }
        let w = Tensor::from_vec(&[3, 3, 3, 3], wd);
        let y = x.conv2d(&w, None);
        assert_eq!(y.to_vec(), x.to_vec());
    }

    #[test]
    fn conv2d_zero_padding_shows_at_borders() {
        // constant ones, single channel, all-ones 3x3 kernel: output counts
        // the taps that fall inside the image
        let x = Tensor::from_vec(&[1, 1, 3, 4], vec![1.0; 12]);
        let w = Tensor::from_vec(&[1, 1, 3, 3], vec![1.0; 9]);
        let y = x.conv2d(&w, None);
        let expect = [
            4.0, 6.0, 6.0, 4.0, //
            6.0, 9.0, 9.0, 6.0, //
            4.0, 6.0, 6.0, 4.0,
        ];
        assert_eq!(y.to_vec(), expect);
    }

    #[test]
    fn two_linear_maps_match_hand_derived_gradient() {
        // y = W2 (W1 x) with 1x1 convolutions acting as matrices.
        // dL/dx = W1^T W2^T for L = y (scalar output).
        let x = Tensor::param(&[1, 2, 1, 1], vec![0.7, -0.3]);
        let w1 = Tensor::param(&[3, 2, 1, 1], vec![1.0, 2.0, -1.0, 0.5, 0.25, -2.0]);
        let w2 = Tensor::param(&[1, 3, 1, 1], vec![3.0, -1.0, 2.0]);
        let y = x.conv2d(&w1, None).conv2d(&w2, None);
        assert_eq!(y.len(), 1);
        y.reshape(&[1]).mean().backward();

        // h = W1 x = [0.7*1 + (-0.3)*2, 0.7*(-1) + (-0.3)*0.5, 0.7*0.25 + (-0.3)*(-2)]
        let h = [0.1f32, -0.85, 0.775];
        let y_hand = 3.0 * h[0] - 1.0 * h[1] + 2.0 * h[2];
        assert!((y.item() - y_hand).abs() < 1e-6);

        // dL/dh = W2^T = [3, -1, 2]; dL/dx = W1^T dL/dh
        let gx = [
            3.0 * 1.0 + (-1.0) * (-1.0) + 2.0 * 0.25,
            3.0 * 2.0 + (-1.0) * 0.5 + 2.0 * (-2.0),
        ];
        let got = x.grad().unwrap();
        for (a, b) in got.iter().zip(gx) {
            assert!((a - b).abs() < 1e-6, "dL/dx {:?} vs hand {:?}", got, gx);
        }
        // dL/dW2 = h
        let gw2 = w2.grad().unwrap();
        for (a, b) in gw2.iter().zip(h) {
            assert!((a - b).abs() < 1e-6);
        }
        // dL/dW1[j,i] = W2[j] * x[i]
        let gw1 = w1.grad().unwrap();
        let w2v = [3.0f32, -1.0, 2.0];
        let xv = [0.7f32, -0.3];
        for j in 0..3 {
            for i in 0..2 {
                assert!((gw1[j * 2 + i] - w2v[j] * xv[i]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn repeated_backward_accumulates_gradients() {
        let x = Tensor::param(&[3], vec![1.0, -2.0, 3.0]);
        let c = Tensor::from_vec(&[3], vec![2.0, 4.0, 6.0]);
        let loss = x.mul(&c).mean();
        loss.backward();
        let g1 = x.grad().unwrap();
        loss.backward();
        let g2 = x.grad().unwrap();
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn detach_blocks_gradient_flow() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]);
        let y = Tensor::param(&[2], vec![3.0, 4.0]);
        let loss = x.detach().mul(&y).mean();
        loss.backward();
        assert!(x.grad().is_none());
        assert_eq!(y.grad().unwrap(), vec![0.5, 1.0]);
    }

    #[test]
    fn mul_at_zero_input_keeps_product_rule() {
        let a = Tensor::param(&[1], vec![0.0]);
        let b = Tensor::param(&[1], vec![3.0]);
        let loss = a.mul(&b).mean();
        loss.backward();
        assert_eq!(a.grad().unwrap(), vec![3.0]);
        assert_eq!(b.grad().unwrap(), vec![0.0]);
    }

    #[test]
    fn no_grad_guard_stops_tape_building_and_restores_on_drop() {
        let x = Tensor::param(&[2], vec![1.0, -2.0]);
        {
            let _g = no_grad();
            let loss = x.relu().mean();
            loss.backward(); // untracked: silently does nothing
            assert!(x.grad().is_none());
        }
        let loss = x.relu().mean();
        loss.backward();
        assert_eq!(x.grad().unwrap(), vec![0.5, 0.0]);
    }

    #[test]
    fn backward_on_constant_graph_is_a_no_op() {
        let c = Tensor::from_vec(&[4], vec![1.0, 2.0, 3.0, 4.0]);
        let loss = c.relu().mean();
        loss.backward(); // nothing tracked; must not panic
        assert!(c.grad().is_none());
    }

    #[test]
    fn relu_canonicalizes_negative_zero() {
        let x = Tensor::from_vec(&[2], vec![-0.0, -1.0]);
        let y = x.relu();
        assert_eq!(y.to_vec()[0].to_bits(), 0.0f32.to_bits());
        assert_eq!(y.to_vec()[1], 0.0);
    }

    #[test]
    #[should_panic(expected = "incompatible shapes")]
    fn mismatched_binary_shapes_panic() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 4]);
        let _ = a.add(&b);
    }

    #[test]
    fn broadcast_to_repeats_values() {
        let x = Tensor::from_vec(&[2, 1], vec![1.0, 2.0]);
        let y = x.broadcast_to(&[2, 3]);
        assert_eq!(y.to_vec(), vec![1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
    }

    #[test]
    fn mean_axes_averages_the_right_slots() {
        // (2,2,2): reduce axis 0 -> out[0,j,k] = (x[0,j,k] + x[1,j,k]) / 2
        let x = Tensor::from_vec(&[2, 2, 2], vec![0., 1., 2., 3., 4., 5., 6., 7.]);
        let y = x.mean_axes(&[0]);
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.to_vec(), vec![2., 3., 4., 5.]);
        let z = x.mean_axes(&[1, 2]);
        assert_eq!(z.shape(), &[2, 1, 1]);
        assert_eq!(z.to_vec(), vec![1.5, 5.5]);
    }
}

