//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Tape`] records one computation graph; [`Tensor`] is a value that may be
//! tracked on a tape. Constants (including anything built while no tape is in
//! play, e.g. inference) carry no node and cost nothing at backward time.
//! Backward closures operate on plain `ndarray` values only, so the tape is
//! never re-entered during the reverse sweep.

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{concatenate, Axis, IxDyn, Slice, Zip};

/// Dynamic-dimensional f64 array, the working value type of the whole crate.
pub type Arr = ndarray::ArrayD<f64>;

type BackFn = Box<dyn Fn(&Arr, &mut GradStore)>;

struct Node {
    back: BackFn,
}

/// Records nodes of one computation graph. Cheap to clone (shared handle).
#[derive(Clone)]
pub struct Tape {
    inner: Rc<RefCell<Vec<Node>>>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node gradient slots populated during the reverse sweep.
pub struct GradStore {
    slots: Vec<Option<Arr>>,
}

impl GradStore {
    pub(crate) fn accum(&mut self, id: usize, g: Arr) {
        match &mut self.slots[id] {
            Some(acc) => *acc += &g,
            slot @ None => *slot = Some(g),
        }
    }

    /// Gradient for a tracked tensor, if it received one.
    pub fn get(&self, t: &Tensor) -> Option<&Arr> {
        let (_, id) = t.node.as_ref()?;
        self.slots[*id].as_ref()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            inner: Rc::new(RefCell::new(Vec::new())),
        }
    }

    fn push(&self, back: BackFn) -> usize {
        let mut nodes = self.inner.borrow_mut();
        nodes.push(Node { back });
        nodes.len() - 1
    }

    /// A leaf variable: tracked, receives gradients, has no parents.
    pub fn leaf(&self, value: Arr) -> Tensor {
        let id = self.push(Box::new(|_, _| {}));
        Tensor {
            value: Rc::new(value),
            node: Some((self.clone(), id)),
        }
    }

    fn same(&self, other: &Tape) -> bool {
        Rc::ptr_eq(&self.inner, &other.inner)
    }

    /// Reverse sweep from `loss` (any shape; seeded with ones). Gradients of
    /// interior nodes are dropped as soon as they have been consumed; only
    /// slots listed in `keep` survive in the returned store.
    pub fn backward(&self, loss: &Tensor, keep: &[&Tensor]) -> GradStore {
        let (tape, loss_id) = loss
            .node
            .as_ref()
            .expect("backward: loss is not tracked on any tape");
        assert!(self.same(tape), "backward: loss lives on a different tape");
        let nodes = self.inner.borrow();
        let mut store = GradStore {
            slots: vec![None; nodes.len()],
        };
        let mut keep_mask = vec![false; nodes.len()];
        for t in keep {
            if let Some((kt, id)) = &t.node {
                assert!(self.same(kt), "backward: kept tensor on a different tape");
                keep_mask[*id] = true;
            }
        }
        store.slots[*loss_id] = Some(Arr::ones(loss.value.shape()));
        for id in (0..=*loss_id).rev() {
            let g = match store.slots[id].take() {
                Some(g) => g,
                None => continue,
            };
            (nodes[id].back)(&g, &mut store);
            if keep_mask[id] {
                store.slots[id] = Some(g);
            }
        }
        store
    }
}

/// A value, optionally tracked for differentiation.
#[derive(Clone)]
pub struct Tensor {
    value: Rc<Arr>,
    node: Option<(Tape, usize)>,
}

/// NumPy-style two-sided broadcast shape.
fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let ad = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let bd = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        assert!(
            ad == bd || ad == 1 || bd == 1,
            "incompatible broadcast shapes {:?} vs {:?}",
            a,
            b
        );
        out[i] = ad.max(bd);
    }
    out
}

/// Sum `g` down to `shape` (inverse of broadcasting).
fn reduce_grad(mut g: Arr, shape: &[usize]) -> Arr {
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for i in 0..shape.len() {
        if shape[i] == 1 && g.shape()[i] != 1 {
            g = g.sum_axis(Axis(i)).insert_axis(Axis(i));
        }
    }
    g
}

fn bin_elem(a: &Arr, b: &Arr, f: impl Fn(f64, f64) -> f64) -> Arr {
    let shape = broadcast_shape(a.shape(), b.shape());
    let av = a.broadcast(IxDyn(&shape)).expect("broadcast lhs");
    let bv = b.broadcast(IxDyn(&shape)).expect("broadcast rhs");
    let mut out = Arr::zeros(IxDyn(&shape));
    Zip::from(&mut out)
        .and(&av)
        .and(&bv)
        .for_each(|o, &x, &y| *o = f(x, y));
    out
}

/// Exclusive cumulative sum along `axis` (first slice becomes zero).
pub fn exclusive_cumsum(a: &Arr, axis: usize) -> Arr {
    let mut out = Arr::zeros(a.raw_dim());
    let n = a.shape()[axis];
    if n <= 1 {
        return out;
    }
    let mut inc = a.to_owned();
    inc.accumulate_axis_inplace(Axis(axis), |&prev, cur| *cur += prev);
    out.slice_axis_mut(Axis(axis), Slice::from(1..))
        .assign(&inc.slice_axis(Axis(axis), Slice::from(..n as isize - 1)));
    out
}

fn flip_axis(a: &Arr, axis: usize) -> Arr {
    a.slice_axis(Axis(axis), Slice::new(0, None, -1))
        .as_standard_layout()
        .to_owned()
}

impl Tensor {
    pub fn constant(value: Arr) -> Tensor {
        Tensor {
            value: Rc::new(value),
            node: None,
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::constant(Arr::from_elem(IxDyn(&[]), v))
    }

    pub fn value(&self) -> &Arr {
        &self.value
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }

    pub fn is_tracked(&self) -> bool {
        self.node.is_some()
    }

    /// Same value, cut off from the graph.
    pub fn detach(&self) -> Tensor {
        Tensor {
            value: self.value.clone(),
            node: None,
        }
    }

    /// Whether two tensors share the same underlying buffer.
    pub fn same_buffer(&self, other: &Tensor) -> bool {
        Rc::ptr_eq(&self.value, &other.value)
    }

    fn tape_of(inputs: &[&Tensor]) -> Option<Tape> {
        let mut found: Option<Tape> = None;
        for t in inputs {
            if let Some((tape, _)) = &t.node {
                match &found {
                    None => found = Some(tape.clone()),
                    Some(f) => assert!(f.same(tape), "operands live on different tapes"),
                }
            }
        }
        found
    }

    fn id(&self) -> Option<usize> {
        self.node.as_ref().map(|(_, id)| *id)
    }

    /// Node index when tracked; for op implementations in sibling modules.
    pub(crate) fn tracked_id(&self) -> Option<usize> {
        self.id()
    }

    /// Construct an op result from explicit inputs, value and backward closure.
    pub(crate) fn from_op(
        inputs: &[&Tensor],
        value: Arr,
        back: impl Fn(&Arr, &mut GradStore) + 'static,
    ) -> Tensor {
        Tensor::make(inputs, value, back)
    }

    /// Build the op result: value plus, when any input is tracked, a backward
    /// closure receiving (upstream grad, store).
    fn make(inputs: &[&Tensor], value: Arr, back: impl Fn(&Arr, &mut GradStore) + 'static) -> Tensor {
        match Tensor::tape_of(inputs) {
            None => Tensor::constant(value),
            Some(tape) => {
                let id = tape.push(Box::new(back));
                Tensor {
                    value: Rc::new(value),
                    node: Some((tape, id)),
                }
            }
        }
    }

    // ---- elementwise binary ----

    pub fn add(&self, other: &Tensor) -> Tensor {
        let v = bin_elem(&self.value, &other.value, |x, y| x + y);
        let (ia, ib) = (self.id(), other.id());
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Tensor::make(&[self, other], v, move |g, store| {
            if let Some(ia) = ia {
                store.accum(ia, reduce_grad(g.clone(), &sa));
            }
            if let Some(ib) = ib {
                store.accum(ib, reduce_grad(g.clone(), &sb));
            }
        })
    }

    pub fn sub(&self, other: &Tensor) -> Tensor {
        let v = bin_elem(&self.value, &other.value, |x, y| x - y);
        let (ia, ib) = (self.id(), other.id());
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        Tensor::make(&[self, other], v, move |g, store| {
            if let Some(ia) = ia {
                store.accum(ia, reduce_grad(g.clone(), &sa));
            }
            if let Some(ib) = ib {
                store.accum(ib, reduce_grad(-g.clone(), &sb));
            }
        })
    }

    pub fn mul(&self, other: &Tensor) -> Tensor {
        let v = bin_elem(&self.value, &other.value, |x, y| x * y);
        let (ia, ib) = (self.id(), other.id());
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        let (va, vb) = (self.value.clone(), other.value.clone());
        Tensor::make(&[self, other], v, move |g, store| {
            if let Some(ia) = ia {
                store.accum(ia, reduce_grad(bin_elem(g, &vb, |g, y| g * y), &sa));
            }
            if let Some(ib) = ib {
                store.accum(ib, reduce_grad(bin_elem(g, &va, |g, x| g * x), &sb));
            }
        })
    }

    pub fn div(&self, other: &Tensor) -> Tensor {
        let v = bin_elem(&self.value, &other.value, |x, y| x / y);
        let (ia, ib) = (self.id(), other.id());
        let (sa, sb) = (self.shape().to_vec(), other.shape().to_vec());
        let (va, vb) = (self.value.clone(), other.value.clone());
        Tensor::make(&[self, other], v, move |g, store| {
            if let Some(ia) = ia {
                store.accum(ia, reduce_grad(bin_elem(g, &vb, |g, y| g / y), &sa));
            }
            if let Some(ib) = ib {
                let gb = {
                    let num = bin_elem(g, &va, |g, x| g * x);
                    bin_elem(&num, &vb, |n, y| -n / (y * y))
                };
                store.accum(ib, reduce_grad(gb, &sb));
            }
        })
    }

    // ---- scalar ----

    pub fn scale(&self, s: f64) -> Tensor {
        let v = self.value.mapv(|x| x * s);
        let ia = self.id();
        Tensor::make(&[self], v, move |g, store| {
            if let Some(ia) = ia {
                store.accum(ia, g.mapv(|g| g * s));
            }
        })
    }

    pub fn shift(&self, c: f64) -> Tensor {
        let v = self.value.mapv(|x| x + c);
        let ia = self.id();
        Tensor::make(&[self], v, move |g, store| {
            if let Some(ia) = ia {
                store.accum(ia, g.clone());
            }
        })
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    // ---- elementwise unary ----

    fn unary(
        &self,
        fwd: impl Fn(f64) -> f64,
        // d out / d in as a function of (input, output)
        dfdx: impl Fn(f64, f64) -> f64 + 'static,
    ) -> Tensor {
        let v = self.value.mapv(&fwd);
        let ia = self.id();
        let vin = self.value.clone();
        let vout = Rc::new(v.clone());
        Tensor::make(&[self], v, move |g, store| {
            if let Some(ia) = ia {
                let mut out = g.clone();
                Zip::from(&mut out)
                    .and(&*vin)
                    .and(&*vout)
                    .for_each(|go, &x, &y| *go *= dfdx(x, y));
                store.accum(ia, out);
            }
        })
    }

    pub fn exp(&self) -> Tensor {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(&self) -> Tensor {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary(f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn sin(&self) -> Tensor {
        self.unary(f64::sin, |x, _| x.cos())
    }

    pub fn cos(&self) -> Tensor {
        self.unary(f64::cos, |x, _| -x.sin())
    }

    pub fn square(&self) -> Tensor {
        self.unary(|x| x * x, |x, _| 2.0 * x)
    }

    pub fn abs(&self) -> Tensor {
        self.unary(f64::abs, |x, _| if x >= 0.0 { 1.0 } else { -1.0 })
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn clamp_min(&self, c: f64) -> Tensor {
        self.unary(move |x| x.max(c), move |x, _| if x > c { 1.0 } else { 0.0 })
    }

    /// Numerically stable `ln(1 + e^x)`.
    pub fn softplus(&self) -> Tensor {
        self.unary(
            |x| {
                if x > 30.0 {
                    x
                } else {
                    x.exp().ln_1p()
                }
            },
            |x, _| 1.0 / (1.0 + (-x).exp()),
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(|x| 1.0 / (1.0 + (-x).exp()), |_, y| y * (1.0 - y))
    }

    // ---- reductions ----

    pub fn sum_all(&self) -> Tensor {
        let v = Arr::from_elem(IxDyn(&[]), self.value.sum());
        let ia = self.id();
        let shape = self.shape().to_vec();
        Tensor::make(&[self], v, move |g, store| {
            if let Some(ia) = ia {
                store.accum(ia, Arr::from_elem(IxDyn(&shape), g[[]]));
            }
        })
    }

    pub fn mean_all(&self) -> Tensor {
        let n = self.value.len().max(1) as f64;
        self.sum_all().scale(1.0 / n)
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Tensor {
        let mut v = self.value.sum_axis(Axis(axis));
        if keepdim {
            v = v.insert_axis(Axis(axis));
        }
        let ia = self.id();
        let shape = self.shape().to_vec();
        Tensor::make(&[self], v, move |g, store| {
            if let Some(ia) = ia {
                let gk = if keepdim {
                    g.clone()
                } else {
                    g.clone().insert_axis(Axis(axis))
                };
                let gb = gk
                    .broadcast(IxDyn(&shape))
                    .expect("sum_axis backward broadcast")
                    .to_owned();
                store.accum(ia, gb);
            }
        })
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Tensor {
        let n = self.shape()[axis].max(1) as f64;
        self.sum_axis(axis, keepdim).scale(1.0 / n)
    }

    // ---- shape ----

    pub fn reshape(&self, shape: &[usize]) -> Tensor {
        let v = self
            .value
            .to_shape(IxDyn(shape))
            .expect("reshape: incompatible size")
            .to_owned();
        let ia = self.id();
        let orig = self.shape().to_vec();
        Tensor::make(&[self], v, move |g, store| {
            if let Some(ia) = ia {
                store.accum(
                    ia,
                    g.to_shape(IxDyn(&orig)).expect("reshape backward").to_owned(),
                );
            }
        })
    }

    pub fn insert_axis(&self, axis: usize) -> Tensor {
        let mut shape = self.shape().to_vec();
        shape.insert(axis, 1);
        self.reshape(&shape)
    }

    pub fn permute(&self, perm: &[usize]) -> Tensor {
        let v = self
            .value
            .view()
            .permuted_axes(IxDyn(perm))
            .as_standard_layout()
            .to_owned();
        let ia = self.id();
        let mut inv = vec![0usize; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        Tensor::make(&[self], v, move |g, store| {
            if let Some(ia) = ia {
                store.accum(
                    ia,
                    g.view()
                        .permuted_axes(IxDyn(&inv))
                        .as_standard_layout()
                        .to_owned(),
                );
            }
        })
    }

    pub fn slice_axis_range(&self, axis: usize, start: usize, end: usize) -> Tensor {
        let v = self
            .value
            .slice_axis(Axis(axis), Slice::from(start..end))
            .to_owned();
        let ia = self.id();
        let shape = self.shape().to_vec();
        Tensor::make(&[self], v, move |g, store| {
            if let Some(ia) = ia {
                let mut full = Arr::zeros(IxDyn(&shape));
                full.slice_axis_mut(Axis(axis), Slice::from(start..end))
                    .assign(g);
                store.accum(ia, full);
            }
        })
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let views: Vec<_> = parts.iter().map(|t| t.value.view()).collect();
        let v = concatenate(Axis(axis), &views).expect("concat: incompatible shapes");
        let ids: Vec<Option<usize>> = parts.iter().map(|t| t.id()).collect();
        let sizes: Vec<usize> = parts.iter().map(|t| t.shape()[axis]).collect();
        Tensor::make(parts, v, move |g, store| {
            let mut offset = 0usize;
            for (id, &len) in ids.iter().zip(&sizes) {
                if let Some(id) = id {
                    let piece = g
                        .slice_axis(Axis(axis), Slice::from(offset..offset + len))
                        .to_owned();
                    store.accum(*id, piece);
                }
                offset += len;
            }
        })
    }

    // ---- linear algebra ----

    /// 2-D matrix product (BLAS-backed).
    pub fn matmul(&self, other: &Tensor) -> Tensor {
        let a = self
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("matmul lhs must be 2-D");
        let b = other
            .value
            .view()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("matmul rhs must be 2-D");
        let v = a.dot(&b).into_dyn();
        let (ia, ib) = (self.id(), other.id());
        let (va, vb) = (self.value.clone(), other.value.clone());
        Tensor::make(&[self, other], v, move |g, store| {
            let g2 = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
            if let Some(ia) = ia {
                let b2 = vb.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                store.accum(ia, g2.dot(&b2.t()).into_dyn());
            }
            if let Some(ib) = ib {
                let a2 = va.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                store.accum(ib, a2.t().dot(&g2).into_dyn());
            }
        })
    }

    // ---- structured ----

    /// Exclusive prefix sum along `axis`.
    pub fn cumsum_exclusive(&self, axis: usize) -> Tensor {
        let v = exclusive_cumsum(&self.value, axis);
        let ia = self.id();
        Tensor::make(&[self], v, move |g, store| {
            if let Some(ia) = ia {
                // dx_j = sum_{i > j} g_i
                let flipped = flip_axis(g, axis);
                let acc = exclusive_cumsum(&flipped, axis);
                store.accum(ia, flip_axis(&acc, axis));
            }
        })
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Tensor {
        let maxed = self.value.map_axis(Axis(axis), |lane| {
            lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        });
        let maxed = maxed.insert_axis(Axis(axis));
        let shifted = bin_elem(&self.value, &maxed, |x, m| (x - m).exp());
        let denom = shifted.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        let v = bin_elem(&shifted, &denom, |e, d| e / d);
        let ia = self.id();
        let vout = Rc::new(v.clone());
        Tensor::make(&[self], v, move |g, store| {
            if let Some(ia) = ia {
                let gy = bin_elem(g, &vout, |g, y| g * y);
                let dot = gy.sum_axis(Axis(axis)).insert_axis(Axis(axis));
                let sub = bin_elem(g, &dot, |g, d| g - d);
                store.accum(ia, bin_elem(&sub, &vout, |s, y| s * y));
            }
        })
    }

    /// Select rows (axis 0) by index; indices may repeat.
    pub fn gather_rows(&self, idx: &[usize]) -> Tensor {
        let v = self.value.select(Axis(0), idx);
        let ia = self.id();
        let shape = self.shape().to_vec();
        let idx = idx.to_vec();
        Tensor::make(&[self], v, move |g, store| {
            if let Some(ia) = ia {
                let mut full = Arr::zeros(IxDyn(&shape));
                for (k, &i) in idx.iter().enumerate() {
                    let gi = g.index_axis(Axis(0), k);
                    let mut slot = full.index_axis_mut(Axis(0), i);
                    slot += &gi;
                }
                store.accum(ia, full);
            }
        })
    }

    /// Scatter rows into a zero tensor of `n_rows` rows (axis 0); `idx[k]` is
    /// the destination of row `k`. Destinations must be unique.
    pub fn scatter_rows(&self, idx: &[usize], n_rows: usize) -> Tensor {
        let mut shape = self.shape().to_vec();
        assert_eq!(shape[0], idx.len(), "scatter_rows: index length mismatch");
        shape[0] = n_rows;
        let mut v = Arr::zeros(IxDyn(&shape));
        for (k, &i) in idx.iter().enumerate() {
            v.index_axis_mut(Axis(0), i).assign(&self.value.index_axis(Axis(0), k));
        }
        let ia = self.id();
        let idx = idx.to_vec();
        Tensor::make(&[self], v, move |g, store| {
            if let Some(ia) = ia {
                store.accum(ia, g.select(Axis(0), &idx));
            }
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::gradcheck::gradcheck;
    use ndarray::IxDyn;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn randn(shape: &[usize], seed: u64) -> Arr {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Arr::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.5..1.5))
    }

    #[test]
    fn broadcast_shapes_follow_numpy_rules() {
        assert_eq!(broadcast_shape(&[3, 1], &[4]), vec![3, 4]);
        assert_eq!(broadcast_shape(&[2, 3, 4], &[3, 1]), vec![2, 3, 4]);
        assert_eq!(broadcast_shape(&[], &[5]), vec![5]);
    }

    #[test]
    fn add_broadcasts_and_reduces_grad() {
        let err = gradcheck(
            |xs| xs[0].add(&xs[1]).mul(&xs[0]).sum_all(),
            &[randn(&[3, 4], 1), randn(&[4], 2)],
        );
        assert!(err < 1e-7, "rel err {err}");
    }

    #[test]
    fn elementwise_unary_grads() {
        for (name, f) in [
            ("exp", (|x: &Tensor| x.exp()) as fn(&Tensor) -> Tensor),
            ("sqrt", |x| x.shift(3.0).sqrt()),
            ("sin", |x| x.sin()),
            ("cos", |x| x.cos()),
            ("square", |x| x.square()),
            ("sigmoid", |x| x.sigmoid()),
            ("softplus", |x| x.softplus()),
            ("abs", |x| x.shift(2.5).abs()),
            ("ln", |x| x.shift(3.0).ln()),
        ] {
            let err = gradcheck(|xs| f(&xs[0]).sum_all(), &[randn(&[2, 5], 7)]);
            assert!(err < 1e-6, "{name}: rel err {err}");
        }
    }

    #[test]
    fn mul_div_grads() {
        let err = gradcheck(
            |xs| xs[0].mul(&xs[1]).div(&xs[2].shift(4.0)).sum_all(),
            &[randn(&[2, 3], 3), randn(&[2, 3], 4), randn(&[2, 3], 5)],
        );
        assert!(err < 1e-7, "rel err {err}");
    }

    #[test]
    fn matmul_grad() {
        let err = gradcheck(
            |xs| xs[0].matmul(&xs[1]).square().sum_all(),
            &[randn(&[3, 4], 8), randn(&[4, 2], 9)],
        );
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn matmul_matches_manual_value() {
        let a = Tensor::constant(randn(&[2, 3], 10));
        let b = Tensor::constant(randn(&[3, 2], 11));
        let c = a.matmul(&b);
        for i in 0..2 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..3 {
                    s += a.value()[[i, k]] * b.value()[[k, j]];
                }
                assert!((c.value()[[i, j]] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn reductions_and_shape_grads() {
        let err = gradcheck(
            |xs| {
                xs[0]
                    .sum_axis(1, true)
                    .mul(&xs[0])
                    .mean_axis(0, false)
                    .sum_all()
            },
            &[randn(&[3, 4], 12)],
        );
        assert!(err < 1e-7, "rel err {err}");

        let err = gradcheck(
            |xs| xs[0].reshape(&[6, 2]).permute(&[1, 0]).square().sum_all(),
            &[randn(&[3, 4], 13)],
        );
        assert!(err < 1e-7, "rel err {err}");
    }

    #[test]
    fn concat_slice_grads() {
        let err = gradcheck(
            |xs| {
                let c = Tensor::concat(&[&xs[0], &xs[1]], 1);
                c.slice_axis_range(1, 1, 4).square().sum_all()
            },
            &[randn(&[2, 3], 14), randn(&[2, 2], 15)],
        );
        assert!(err < 1e-7, "rel err {err}");
    }

    #[test]
    fn cumsum_exclusive_value_and_grad() {
        let x = Tensor::constant(Arr::from_shape_vec(IxDyn(&[4]), vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let y = x.cumsum_exclusive(0);
        assert_eq!(y.value().as_slice().unwrap(), &[0.0, 1.0, 3.0, 6.0]);

        let err = gradcheck(
            |xs| xs[0].cumsum_exclusive(1).square().sum_all(),
            &[randn(&[2, 5], 16)],
        );
        assert!(err < 1e-7, "rel err {err}");
    }

    #[test]
    fn softmax_rows_sum_to_one_and_grad() {
        let x = randn(&[3, 6], 17);
        let y = Tensor::constant(x.clone()).softmax(1);
        for r in y.value().rows() {
            let s: f64 = r.sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        let err = gradcheck(
            |xs| {
                let w = Tensor::constant(randn(&[3, 6], 18));
                xs[0].softmax(1).mul(&w).sum_all()
            },
            &[x],
        );
        assert!(err < 1e-7, "rel err {err}");
    }

    #[test]
    fn gather_scatter_grads() {
        let err = gradcheck(
            |xs| xs[0].gather_rows(&[2, 0, 2, 1]).square().sum_all(),
            &[randn(&[3, 4], 19)],
        );
        assert!(err < 1e-7, "gather rel err {err}");

        let err = gradcheck(
            |xs| {
                let w = Tensor::constant(randn(&[5, 4], 20));
                xs[0].scatter_rows(&[4, 1, 0], 5).mul(&w).sum_all()
            },
            &[randn(&[3, 4], 21)],
        );
        assert!(err < 1e-7, "scatter rel err {err}");
    }

    #[test]
    fn detach_blocks_gradient() {
        let tape = Tape::new();
        let x = tape.leaf(randn(&[3], 22));
        let y = x.detach().square().sum_all();
        assert!(!y.is_tracked());
        let z = x.square().sum_all().add(&Tensor::scalar(1.0));
        let grads = tape.backward(&z, &[&x]);
        assert!(grads.get(&x).is_some());
    }

    #[test]
    fn grad_accumulates_over_reuse() {
        let tape = Tape::new();
        let x = tape.leaf(Arr::from_elem(IxDyn(&[2]), 3.0));
        let y = x.mul(&x).add(&x); // x^2 + x, dy/dx = 2x + 1 = 7
        let loss = y.sum_all();
        let grads = tape.backward(&loss, &[&x]);
        let g = grads.get(&x).unwrap();
        assert!((g[[0]] - 7.0).abs() < 1e-12);
        assert!((g[[1]] - 7.0).abs() < 1e-12);
    }
}
