//! Dense tensors with reverse-mode automatic differentiation.
//!
//! A [`Tensor`] is a cheap handle (`Arc`) to an immutable-shape buffer. Every
//! op that has at least one gradient-requiring input records a node holding
//! its parents and a backward closure; ops over constants record nothing, so
//! no-grad paths (momentum targets, detached guidance) cost no graph memory.
//!
//! Feature maps are batched: `[N, C, spatial...]`.

mod conv;
mod nn;
mod ops;

use std::collections::HashMap;
use std::fmt;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use parking_lot::{Mutex, RwLock, RwLockReadGuard};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use conv::{conv2d, conv3d, conv_nd, ConvSpec};
pub use nn::{
    batch_norm, correlate, cosine_similarity, downsample_avg2, global_avg_pool, l2_normalize_rows, linear,
    masked_cross_entropy, upsample_nearest, BatchStats,
};

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

/// Storage precision. `F32` rounds every produced buffer (values and
/// gradients) to single precision; arithmetic still runs in `f64`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F64,
    F32,
}

impl Precision {
    pub(crate) fn apply(self, buf: &mut [f64]) {
        if self == Precision::F32 {
            for x in buf.iter_mut() {
                *x = *x as f32 as f64;
            }
        }
    }

    fn join(self, other: Precision) -> Precision {
        if self == Precision::F32 || other == Precision::F32 {
            Precision::F32
        } else {
            Precision::F64
        }
    }
}

/// Backward closure: `(grad_out, out_data, needs_grad_per_parent) -> grad per parent`.
pub(crate) type BackwardFn = Box<dyn Fn(&[f64], &[f64], &[bool]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

struct Node {
    tag: &'static str,
    parents: Vec<Tensor>,
    backward: BackwardFn,
}

struct Inner {
    id: usize,
    shape: Vec<usize>,
    data: RwLock<Vec<f64>>,
    grad: Mutex<Option<Vec<f64>>>,
    requires_grad: bool,
    precision: Precision,
    node: Option<Node>,
}

#[derive(Clone)]
pub struct Tensor {
    inner: Arc<Inner>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.inner.shape)
            .field("requires_grad", &self.inner.requires_grad)
            .field("op", &self.op_tag())
            .finish()
    }
}

impl Tensor {
    fn build(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, precision: Precision, node: Option<Node>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor {
            inner: Arc::new(Inner {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                shape,
                data: RwLock::new(data),
                grad: Mutex::new(None),
                requires_grad,
                precision,
                node,
            }),
        }
    }

    pub fn new(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "tensor",
                format!("shape {shape:?} holds {n} values but buffer has {}", data.len()),
            ));
        }
        Ok(Self::build(data, shape.to_vec(), false, Precision::F64, None))
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self::build(vec![value; n], shape.to_vec(), false, Precision::F64, None)
    }

    pub fn scalar(value: f64) -> Self {
        Self::build(vec![value], Vec::new(), false, Precision::F64, None)
    }

    /// Trainable leaf.
    pub fn parameter(data: Vec<f64>, shape: &[usize]) -> Result<Self> {
        Ok(Self::new(data, shape)?.into_leaf(true))
    }

    /// Fresh leaf with the same data and the requested grad flag.
    pub fn into_leaf(self, requires_grad: bool) -> Self {
        let data = self.to_vec();
        Self::build(data, self.inner.shape.clone(), requires_grad, self.inner.precision, None)
    }

    pub fn with_precision(self, precision: Precision) -> Self {
        let mut data = self.to_vec();
        precision.apply(&mut data);
        Self::build(data, self.inner.shape.clone(), self.inner.requires_grad, precision, None)
    }

    /// Same values, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::build(self.to_vec(), self.inner.shape.clone(), false, self.inner.precision, None)
    }

    pub(crate) fn from_op(
        tag: &'static str,
        mut data: Vec<f64>,
        shape: Vec<usize>,
        parents: Vec<Tensor>,
        backward: BackwardFn,
    ) -> Self {
        let precision = parents
            .iter()
            .fold(Precision::F64, |p, t| p.join(t.inner.precision));
        precision.apply(&mut data);
        let requires_grad = parents.iter().any(|p| p.requires_grad());
        let node = requires_grad.then(|| Node { tag, parents, backward });
        Self::build(data, shape, requires_grad, precision, node)
    }

    pub fn id(&self) -> usize {
        self.inner.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.inner.shape
    }

    pub fn rank(&self) -> usize {
        self.inner.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.inner.shape.iter().product()
    }

    pub fn precision(&self) -> Precision {
        self.inner.precision
    }

    pub fn requires_grad(&self) -> bool {
        self.inner.requires_grad
    }

    pub fn is_leaf(&self) -> bool {
        self.inner.node.is_none()
    }

    pub fn op_tag(&self) -> Option<&'static str> {
        self.inner.node.as_ref().map(|n| n.tag)
    }

    pub fn data(&self) -> RwLockReadGuard<'_, Vec<f64>> {
        self.inner.data.read()
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.inner.data.read().clone()
    }

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        let d = self.inner.data.read();
        assert_eq!(d.len(), 1, "item() on tensor of shape {:?}", self.inner.shape);
        d[0]
    }

    pub fn grad(&self) -> Option<Vec<f64>> {
        self.inner.grad.lock().clone()
    }

    pub fn zero_grad(&self) {
        *self.inner.grad.lock() = None;
    }

    /// Overwrite a leaf's values in place (optimizer updates, checkpoint loads).
    pub fn set_data(&self, values: &[f64]) -> Result<()> {
        if !self.is_leaf() {
            return Err(Error::Contract("set_data on a non-leaf tensor".into()));
        }
        let mut d = self.inner.data.write();
        if d.len() != values.len() {
            return Err(Error::dim(
                "set_data",
                format!("expected {} values, got {}", d.len(), values.len()),
            ));
        }
        d.copy_from_slice(values);
        self.inner.precision.apply(&mut d);
        Ok(())
    }

    /// Reverse-mode sweep from a single-element tensor. Gradients accumulate
    /// into every reachable leaf that requires grad.
    pub fn backward(&self) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape()
            )));
        }
        if !self.requires_grad() {
            return Ok(());
        }

        let order = self.topo_order();
        let mut grads: HashMap<usize, Vec<f64>> = HashMap::new();
        grads.insert(self.id(), vec![1.0]);

        for t in order.iter().rev() {
            let Some(g) = grads.remove(&t.id()) else { continue };
            match &t.inner.node {
                Some(node) => {
                    let needs: Vec<bool> = node.parents.iter().map(Tensor::requires_grad).collect();
                    let out = t.inner.data.read();
                    let parent_grads = (node.backward)(&g, &out, &needs);
                    drop(out);
                    debug_assert_eq!(parent_grads.len(), node.parents.len(), "op {}", node.tag);
                    for ((p, pg), need) in node.parents.iter().zip(parent_grads).zip(needs) {
                        let Some(mut pg) = pg else { continue };
                        if !need {
                            continue;
                        }
                        debug_assert_eq!(pg.len(), p.numel(), "op {} grad size", node.tag);
                        match grads.get_mut(&p.id()) {
                            Some(acc) => acc.iter_mut().zip(&pg).for_each(|(a, b)| *a += b),
                            None => {
                                p.inner.precision.apply(&mut pg);
                                grads.insert(p.id(), pg);
                            }
                        }
                    }
                }
                None => {
                    let mut slot = t.inner.grad.lock();
                    match slot.as_mut() {
                        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                        None => *slot = Some(g),
                    }
                    if let Some(acc) = slot.as_mut() {
                        t.inner.precision.apply(acc);
                    }
                }
            }
        }
        Ok(())
    }

    /// Nodes reachable through grad-requiring edges, parents before children.
    fn topo_order(&self) -> Vec<Tensor> {
        let mut order = Vec::new();
        let mut visited = std::collections::HashSet::new();
        let mut stack: Vec<(Tensor, bool)> = vec![(self.clone(), false)];
        while let Some((t, expanded)) = stack.pop() {
            if expanded {
                order.push(t);
                continue;
            }
            if !visited.insert(t.id()) {
                continue;
            }
            stack.push((t.clone(), true));
            if let Some(node) = &t.inner.node {
                for p in &node.parents {
                    if p.requires_grad() && !visited.contains(&p.id()) {
                        stack.push((p.clone(), false));
                    }
                }
            }
        }
        order
    }
}

pub(crate) fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::dim(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}
