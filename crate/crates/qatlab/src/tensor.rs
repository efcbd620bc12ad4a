//! Dense row-major tensors with reverse-mode differentiation.
//!
//! The graph is built implicitly: every op node keeps handles to its parents,
//! and `backward` walks the graph in reverse topological order. Gradients
//! accumulate only on leaves (parameters); intermediate gradients live in a
//! scratch map for the duration of one backward call, so repeated backward
//! calls accumulate exactly once per call on each leaf.
//!
//! A graph is single-owner: built, run backward, and cleared by one logical
//! thread. Ops on distinct tensors are safe to call concurrently.

use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

fn fresh_id() -> u64 {
    NEXT_ID.fetch_add(1, Ordering::Relaxed)
}

/// Which elements of a flat row-major matrix share one quantization group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupIndexer {
    /// One group for the whole tensor.
    Tensor,
    /// One group per output row; `cols` is the row stride.
    Row { cols: usize },
    /// One group per token column; `cols` is the row stride.
    Col { cols: usize },
}

impl GroupIndexer {
    #[inline]
    pub fn group_of(&self, i: usize) -> usize {
        match *self {
            GroupIndexer::Tensor => 0,
            GroupIndexer::Row { cols } => i / cols,
            GroupIndexer::Col { cols } => i % cols,
        }
    }
}

enum Op<S: Scalar> {
    Leaf,
    Matmul(Tensor<S>, Tensor<S>),
    Add(Tensor<S>, Tensor<S>),
    Sub(Tensor<S>, Tensor<S>),
    Mul(Tensor<S>, Tensor<S>),
    /// Matrix (n x k) plus per-row bias (n x 1) broadcast over columns.
    AddBias(Tensor<S>, Tensor<S>),
    Scale(Tensor<S>, S),
    Silu(Tensor<S>),
    Sum(Tensor<S>),
    Mean(Tensor<S>),
    /// Fake quantization with a frozen spec; backward is upstream ⊙ mask.
    FakeQuantSte { input: Tensor<S>, mask: Vec<S> },
    /// Weight fake quantization with a learnable scale. `ds` holds the
    /// per-element scale derivative captured at forward time.
    FakeQuantLsq {
        weight: Tensor<S>,
        scale: Tensor<S>,
        mask: Vec<S>,
        ds: Vec<S>,
        groups: GroupIndexer,
        grad_scale: S,
    },
}

struct Inner<S: Scalar> {
    id: u64,
    shape: Vec<usize>,
    data: Vec<S>,
    grad: Option<Vec<S>>,
    requires_grad: bool,
    op: Op<S>,
}

#[derive(Clone)]
pub struct Tensor<S: Scalar> {
    inner: Rc<RefCell<Inner<S>>>,
}

impl<S: Scalar> std::fmt::Debug for Tensor<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let inner = self.inner.borrow();
        f.debug_struct("Tensor")
            .field("shape", &inner.shape)
            .field("requires_grad", &inner.requires_grad)
            .finish()
    }
}

fn check_product(shape: &[usize], len: usize) -> Result<()> {
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::invalid(format!(
            "shape {shape:?} implies {n} elements, got {len}"
        )));
    }
    Ok(())
}

impl<S: Scalar> Tensor<S> {
    fn new(shape: Vec<usize>, data: Vec<S>, requires_grad: bool, op: Op<S>) -> Self {
        Tensor {
            inner: Rc::new(RefCell::new(Inner {
                id: fresh_id(),
                shape,
                data,
                grad: None,
                requires_grad,
                op,
            })),
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<S>) -> Result<Self> {
        check_product(shape, data.len())?;
        Ok(Self::new(shape.to_vec(), data, false, Op::Leaf))
    }

    /// Trainable leaf.
    pub fn param(shape: &[usize], data: Vec<S>) -> Result<Self> {
        check_product(shape, data.len())?;
        Ok(Self::new(shape.to_vec(), data, true, Op::Leaf))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self::new(shape.to_vec(), vec![S::zero(); n], false, Op::Leaf)
    }

    pub fn scalar(v: S) -> Self {
        Self::new(vec![1], vec![v], false, Op::Leaf)
    }

    pub fn eye(n: usize) -> Self {
        let mut data = vec![S::zero(); n * n];
        for i in 0..n {
            data[i * n + i] = S::one();
        }
        Self::new(vec![n, n], data, false, Op::Leaf)
    }

    pub fn id(&self) -> u64 {
        self.inner.borrow().id
    }

    /// Node identity within a differentiation graph; `None` for tensors that
    /// do not participate in any graph.
    pub fn node_id(&self) -> Option<u64> {
        let inner = self.inner.borrow();
        if inner.requires_grad || !matches!(inner.op, Op::Leaf) {
            Some(inner.id)
        } else {
            None
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.inner.borrow().shape.clone()
    }

    pub fn numel(&self) -> usize {
        self.inner.borrow().data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.borrow().requires_grad
    }

    pub fn data(&self) -> Vec<S> {
        self.inner.borrow().data.clone()
    }

    pub fn with_data<R>(&self, f: impl FnOnce(&[S]) -> R) -> R {
        f(&self.inner.borrow().data)
    }

    pub fn item(&self) -> S {
        let inner = self.inner.borrow();
        assert_eq!(inner.data.len(), 1, "item() on non-scalar tensor");
        inner.data[0]
    }

    pub fn set_data(&self, data: Vec<S>) -> Result<()> {
        let mut inner = self.inner.borrow_mut();
        if data.len() != inner.data.len() {
            return Err(Error::invalid(format!(
                "set_data length {} != tensor numel {}",
                data.len(),
                inner.data.len()
            )));
        }
        inner.data = data;
        Ok(())
    }

    /// In-place mutation for optimizer steps.
    pub fn update_data(&self, f: impl FnOnce(&mut [S])) {
        f(&mut self.inner.borrow_mut().data);
    }

    pub fn grad(&self) -> Option<Vec<S>> {
        self.inner.borrow().grad.clone()
    }

    pub fn zero_grad(&self) {
        self.inner.borrow_mut().grad = None;
    }

    /// Copy of the values, cut loose from any graph.
    pub fn detach(&self) -> Tensor<S> {
        let inner = self.inner.borrow();
        Self::new(inner.shape.clone(), inner.data.clone(), false, Op::Leaf)
    }

    fn is_mat(&self) -> Result<(usize, usize)> {
        let inner = self.inner.borrow();
        if inner.shape.len() != 2 {
            return Err(Error::invalid(format!(
                "expected a matrix, got shape {:?}",
                inner.shape
            )));
        }
        Ok((inner.shape[0], inner.shape[1]))
    }

    fn any_grad(&self, other: &Tensor<S>) -> bool {
        self.participates() || other.participates()
    }

    fn participates(&self) -> bool {
        let inner = self.inner.borrow();
        inner.requires_grad || !matches!(inner.op, Op::Leaf)
    }

    pub fn matmul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        let (n, m) = self.is_mat()?;
        let (m2, k) = other.is_mat()?;
        if m != m2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: vec![n, m],
                right: vec![m2, k],
            });
        }
        let out = {
            let a = self.inner.borrow();
            let b = other.inner.borrow();
            matmul_raw(&a.data, &b.data, n, m, k)
        };
        Ok(Tensor::new(
            vec![n, k],
            out,
            self.any_grad(other),
            Op::Matmul(self.clone(), other.clone()),
        ))
    }

    /// Matmul node whose forward values were computed elsewhere (the integer
    /// accumulation path); backward is the standard matmul rule on the
    /// operands' stored data.
    pub fn matmul_with_values(a: &Tensor<S>, b: &Tensor<S>, values: Vec<S>) -> Result<Tensor<S>> {
        let (n, m) = a.is_mat()?;
        let (m2, k) = b.is_mat()?;
        if m != m2 {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: vec![n, m],
                right: vec![m2, k],
            });
        }
        check_product(&[n, k], values.len())?;
        Ok(Tensor::new(
            vec![n, k],
            values,
            a.any_grad(b),
            Op::Matmul(a.clone(), b.clone()),
        ))
    }

    fn zip_op(
        &self,
        other: &Tensor<S>,
        name: &'static str,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<Tensor<S>> {
        let (a, b) = (self.inner.borrow(), other.inner.borrow());
        if a.shape != b.shape {
            return Err(Error::ShapeMismatch {
                op: name,
                left: a.shape.clone(),
                right: b.shape.clone(),
            });
        }
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        let shape = a.shape.clone();
        drop((a, b));
        Ok(Tensor::new(shape, data, self.any_grad(other), op))
    }

    pub fn add(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.zip_op(other, "add", |x, y| x + y, Op::Add(self.clone(), other.clone()))
    }

    pub fn sub(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.zip_op(other, "sub", |x, y| x - y, Op::Sub(self.clone(), other.clone()))
    }

    pub fn mul(&self, other: &Tensor<S>) -> Result<Tensor<S>> {
        self.zip_op(other, "mul", |x, y| x * y, Op::Mul(self.clone(), other.clone()))
    }

    /// Matrix (n x k) + bias (n x 1), broadcast over columns.
    pub fn add_bias(&self, bias: &Tensor<S>) -> Result<Tensor<S>> {
        let (n, k) = self.is_mat()?;
        let bshape = bias.shape();
        if bshape != [n, 1] && bshape != [n] {
            return Err(Error::ShapeMismatch {
                op: "add_bias",
                left: vec![n, k],
                right: bshape,
            });
        }
        let data = {
            let a = self.inner.borrow();
            let b = bias.inner.borrow();
            let mut out = a.data.clone();
            for i in 0..n {
                for j in 0..k {
                    out[i * k + j] += b.data[i];
                }
            }
            out
        };
        Ok(Tensor::new(
            vec![n, k],
            data,
            self.any_grad(bias),
            Op::AddBias(self.clone(), bias.clone()),
        ))
    }

    pub fn scale(&self, c: S) -> Tensor<S> {
        let inner = self.inner.borrow();
        let data = inner.data.iter().map(|&x| x * c).collect();
        let shape = inner.shape.clone();
        drop(inner);
        Tensor::new(shape, data, self.participates(), Op::Scale(self.clone(), c))
    }

    pub fn silu(&self) -> Tensor<S> {
        let inner = self.inner.borrow();
        let data = inner
            .data
            .iter()
            .map(|&x| x * (S::one() / (S::one() + (-x).exp())))
            .collect();
        let shape = inner.shape.clone();
        drop(inner);
        Tensor::new(shape, data, self.participates(), Op::Silu(self.clone()))
    }

    pub fn square(&self) -> Result<Tensor<S>> {
        self.mul(self)
    }

    pub fn sum(&self) -> Tensor<S> {
        let s = self.inner.borrow().data.iter().copied().sum();
        Tensor::new(vec![1], vec![s], self.participates(), Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Tensor<S> {
        let inner = self.inner.borrow();
        let n = S::c(inner.data.len() as f64);
        let s = inner.data.iter().copied().sum::<S>() / n;
        drop(inner);
        Tensor::new(vec![1], vec![s], self.participates(), Op::Mean(self.clone()))
    }

    /// Quantize-dequantize with straight-through gradients. The mask is
    /// captured by the quantizer at forward time.
    pub fn fake_quant_ste(input: &Tensor<S>, values: Vec<S>, mask: Vec<S>) -> Tensor<S> {
        let shape = input.shape();
        Tensor::new(
            shape,
            values,
            input.participates(),
            Op::FakeQuantSte {
                input: input.clone(),
                mask,
            },
        )
    }

    /// Weight fake quantization whose scale is itself a trainable leaf.
    #[allow(clippy::too_many_arguments)]
    pub fn fake_quant_lsq(
        weight: &Tensor<S>,
        scale: &Tensor<S>,
        values: Vec<S>,
        mask: Vec<S>,
        ds: Vec<S>,
        groups: GroupIndexer,
        grad_scale: S,
    ) -> Tensor<S> {
        let shape = weight.shape();
        Tensor::new(
            shape,
            values,
            weight.participates() || scale.participates(),
            Op::FakeQuantLsq {
                weight: weight.clone(),
                scale: scale.clone(),
                mask,
                ds,
                groups,
                grad_scale,
            },
        )
    }

    /// Reverse-mode differentiation from a scalar loss. Populates `grad` on
    /// every trainable leaf reachable from `self`; repeated calls accumulate.
    pub fn backward(&self) -> Result<()> {
        {
            let inner = self.inner.borrow();
            if inner.data.len() != 1 {
                return Err(Error::invalid(format!(
                    "backward requires a scalar loss, got shape {:?}",
                    inner.shape
                )));
            }
            if !inner.requires_grad && matches!(inner.op, Op::Leaf) {
                return Err(Error::DetachedBackward);
            }
        }

        // Reverse topological order via iterative DFS.
        let mut order: Vec<Tensor<S>> = Vec::new();
        let mut visited: HashMap<u64, ()> = HashMap::new();
        let mut stack: Vec<(Tensor<S>, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            let id = t.id();
            if expanded {
                order.push(t);
                continue;
            }
            if visited.contains_key(&id) {
                continue;
            }
            visited.insert(id, ());
            let parents = t.parents();
            stack.push((t, true));
            for p in parents {
                if p.participates() && !visited.contains_key(&p.id()) {
                    stack.push((p, false));
                }
            }
        }

        // Flowing gradients for this call; leaves accumulate into their own
        // grad field.
        let mut flow: HashMap<u64, Vec<S>> = HashMap::new();
        flow.insert(self.id(), vec![S::one()]);

        for t in order.iter().rev() {
            let up = match flow.remove(&t.id()) {
                Some(g) => g,
                None => continue,
            };
            let inner = t.inner.borrow();
            if matches!(inner.op, Op::Leaf) {
                drop(inner);
                let mut m = t.inner.borrow_mut();
                if m.requires_grad {
                    match &mut m.grad {
                        Some(g) => {
                            for (gi, ui) in g.iter_mut().zip(&up) {
                                *gi += *ui;
                            }
                        }
                        None => m.grad = Some(up),
                    }
                }
                continue;
            }
            backprop(&inner, &up, &mut flow);
        }
        Ok(())
    }

    fn parents(&self) -> Vec<Tensor<S>> {
        let inner = self.inner.borrow();
        match &inner.op {
            Op::Leaf => vec![],
            Op::Matmul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) => {
                vec![a.clone(), b.clone()]
            }
            Op::Scale(a, _) | Op::Silu(a) | Op::Sum(a) | Op::Mean(a) => vec![a.clone()],
            Op::FakeQuantSte { input, .. } => vec![input.clone()],
            Op::FakeQuantLsq { weight, scale, .. } => vec![weight.clone(), scale.clone()],
        }
    }
}

fn matmul_raw<S: Scalar>(a: &[S], b: &[S], n: usize, m: usize, k: usize) -> Vec<S> {
    let mut out = vec![S::zero(); n * k];
    for i in 0..n {
        for l in 0..m {
            let a_il = a[i * m + l];
            if a_il == S::zero() {
                continue;
            }
            let brow = &b[l * k..(l + 1) * k];
            let orow = &mut out[i * k..(i + 1) * k];
            for j in 0..k {
                orow[j] += a_il * brow[j];
            }
        }
    }
    out
}

pub fn transpose_raw<S: Scalar>(a: &[S], n: usize, m: usize) -> Vec<S> {
    let mut out = vec![S::zero(); n * m];
    for i in 0..n {
        for j in 0..m {
            out[j * n + i] = a[i * m + j];
        }
    }
    out
}

fn add_into<S: Scalar>(flow: &mut HashMap<u64, Vec<S>>, t: &Tensor<S>, g: Vec<S>) {
    if !t.participates() {
        return;
    }
    match flow.entry(t.id()) {
        std::collections::hash_map::Entry::Occupied(mut e) => {
            for (a, b) in e.get_mut().iter_mut().zip(&g) {
                *a += *b;
            }
        }
        std::collections::hash_map::Entry::Vacant(e) => {
            e.insert(g);
        }
    }
}

fn backprop<S: Scalar>(node: &Inner<S>, up: &[S], flow: &mut HashMap<u64, Vec<S>>) {
    match &node.op {
        Op::Leaf => {}
        Op::Matmul(a, b) => {
            let (n, m) = {
                let ai = a.inner.borrow();
                (ai.shape[0], ai.shape[1])
            };
            let k = b.inner.borrow().shape[1];
            if a.participates() {
                let bt = {
                    let bi = b.inner.borrow();
                    transpose_raw(&bi.data, m, k)
                };
                add_into(flow, a, matmul_raw(up, &bt, n, k, m));
            }
            if b.participates() {
                let at = {
                    let ai = a.inner.borrow();
                    transpose_raw(&ai.data, n, m)
                };
                add_into(flow, b, matmul_raw(&at, up, m, n, k));
            }
        }
        Op::Add(a, b) => {
            add_into(flow, a, up.to_vec());
            add_into(flow, b, up.to_vec());
        }
        Op::Sub(a, b) => {
            add_into(flow, a, up.to_vec());
            add_into(flow, b, up.iter().map(|&g| -g).collect());
        }
        Op::Mul(a, b) => {
            if a.participates() {
                let bi = b.inner.borrow();
                add_into(flow, a, up.iter().zip(&bi.data).map(|(&g, &y)| g * y).collect());
            }
            if b.participates() {
                let ai = a.inner.borrow();
                add_into(flow, b, up.iter().zip(&ai.data).map(|(&g, &x)| g * x).collect());
            }
        }
        Op::AddBias(a, bias) => {
            add_into(flow, a, up.to_vec());
            if bias.participates() {
                let (n, k) = {
                    let ai = a.inner.borrow();
                    (ai.shape[0], ai.shape[1])
                };
                let mut g = vec![S::zero(); n];
                for i in 0..n {
                    for j in 0..k {
                        g[i] += up[i * k + j];
                    }
                }
                add_into(flow, bias, g);
            }
        }
        Op::Scale(a, c) => {
            add_into(flow, a, up.iter().map(|&g| g * *c).collect());
        }
        Op::Silu(a) => {
            let ai = a.inner.borrow();
            let g = up
                .iter()
                .zip(&ai.data)
                .map(|(&g, &x)| {
                    let s = S::one() / (S::one() + (-x).exp());
                    g * s * (S::one() + x * (S::one() - s))
                })
                .collect();
            drop(ai);
            add_into(flow, a, g);
        }
        Op::Sum(a) => {
            let n = a.numel();
            add_into(flow, a, vec![up[0]; n]);
        }
        Op::Mean(a) => {
            let n = a.numel();
            let g = up[0] / S::c(n as f64);
            add_into(flow, a, vec![g; n]);
        }
        Op::FakeQuantSte { input, mask } => {
            add_into(
                flow,
                input,
                up.iter().zip(mask).map(|(&g, &m)| g * m).collect(),
            );
        }
        Op::FakeQuantLsq {
            weight,
            scale,
            mask,
            ds,
            groups,
            grad_scale,
        } => {
            if weight.participates() {
                add_into(
                    flow,
                    weight,
                    up.iter().zip(mask).map(|(&g, &m)| g * m).collect(),
                );
            }
            if scale.participates() {
                let mut g = vec![S::zero(); scale.numel()];
                for (i, (&u, &d)) in up.iter().zip(ds).enumerate() {
                    g[groups.group_of(i)] += *grad_scale * u * d;
                }
                add_into(flow, scale, g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    type T = Tensor<f64>;

    #[test]
    fn identity_matmul() {
        let i2 = T::eye(2);
        let b = T::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = i2.matmul(&b).unwrap();
        assert_eq!(y.data(), vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn hand_expanded_product() {
        let a = T::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = T::from_vec(&[2, 1], vec![0.0, 1.0]).unwrap();
        let y = a.matmul(&b).unwrap();
        assert_eq!(y.data(), vec![2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_mismatch_reports_dims() {
        let a = T::zeros(&[2, 3]);
        let b = T::zeros(&[2, 2]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn matmul_by_zero_and_grad_is_b_transpose() {
        let a = T::param(&[2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let zero = T::zeros(&[2, 2]);
        assert_eq!(a.matmul(&zero).unwrap().data(), vec![0.0; 4]);

        let b = T::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let loss = a.matmul(&b).unwrap().sum();
        loss.backward().unwrap();
        // d sum(A B) / dA = (B 1)ᵀ broadcast: row sums of B per column of A.
        assert_eq!(a.grad().unwrap(), vec![3.0, 7.0, 3.0, 7.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let x = T::param(&[3], vec![1.0, 2.0, 3.0]).unwrap();
        let loss = x.square().unwrap().sum();
        assert_eq!(loss.item(), 14.0);
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 4.0, 6.0]);
    }

    #[test]
    fn constant_loss_leaves_grads_zero() {
        let x = T::param(&[2], vec![1.0, 2.0]).unwrap();
        let c = T::scalar(5.0);
        // Loss does not depend on x; x never enters the graph.
        let loss = c.scale(2.0);
        loss.backward().unwrap();
        assert!(x.grad().is_none());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let x = T::param(&[2], vec![1.0, 1.0]).unwrap();
        let loss = x.square().unwrap().sum();
        loss.backward().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![4.0, 4.0]);
        x.zero_grad();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn backward_on_detached_rejected() {
        let x = T::scalar(1.0);
        assert!(matches!(x.backward(), Err(Error::DetachedBackward)));
        let y = T::param(&[1], vec![2.0]).unwrap();
        let d = y.scale(3.0).detach();
        assert!(matches!(d.backward(), Err(Error::DetachedBackward)));
    }

    #[test]
    fn detached_tensor_has_no_node_id() {
        let x = T::param(&[1], vec![2.0]).unwrap();
        assert!(x.node_id().is_some());
        assert!(x.detach().node_id().is_none());
        assert!(T::scalar(1.0).node_id().is_none());
    }

    /// Central finite-difference oracle for a scalar-valued function of one
    /// leaf tensor.
    pub(crate) fn finite_diff(
        x0: &[f64],
        shape: &[usize],
        f: &dyn Fn(&T) -> T,
        step: f64,
    ) -> Vec<f64> {
        let mut g = vec![0.0; x0.len()];
        for i in 0..x0.len() {
            let mut plus = x0.to_vec();
            plus[i] += step;
            let mut minus = x0.to_vec();
            minus[i] -= step;
            let fp = f(&T::from_vec(shape, plus).unwrap()).item();
            let fm = f(&T::from_vec(shape, minus).unwrap()).item();
            g[i] = (fp - fm) / (2.0 * step);
        }
        g
    }

    fn assert_close_rel(a: &[f64], b: &[f64], tol: f64) {
        for (i, (x, y)) in a.iter().zip(b).enumerate() {
            let denom = x.abs().max(y.abs()).max(1.0);
            assert!(
                (x - y).abs() / denom <= tol,
                "element {i}: {x} vs {y} (tol {tol})"
            );
        }
    }

    #[test]
    fn composite_matches_finite_differences() {
        let mut rng = crate::rng::Rng::new(11);
        let xs: Vec<f64> = rng.uniform_vec(6, -2.0, 2.0);
        let w: Vec<f64> = rng.uniform_vec(6, -2.0, 2.0);
        let wt = T::from_vec(&[2, 3], w).unwrap();
        let f = move |x: &T| {
            let h = wt.matmul(x).unwrap().silu();
            h.square().unwrap().mean()
        };
        let x = T::param(&[3, 2], xs.clone()).unwrap();
        let loss = f(&x);
        loss.backward().unwrap();
        let fd = finite_diff(&xs, &[3, 2], &f, 1e-6);
        assert_close_rel(&x.grad().unwrap(), &fd, 1e-6);
    }

    #[test]
    fn bias_and_mean_gradients() {
        let x = T::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = T::param(&[2, 1], vec![0.5, -0.5]).unwrap();
        let loss = x.add_bias(&b).unwrap().square().unwrap().mean();
        loss.backward().unwrap();
        let f = |bt: &T| x.add_bias(bt).unwrap().square().unwrap().mean();
        let fd = finite_diff(&[0.5, -0.5], &[2, 1], &f, 1e-6);
        assert_close_rel(&b.grad().unwrap(), &fd, 1e-6);
    }
}
