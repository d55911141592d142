use std::cell::Cell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use super::tensor::{Real, Tensor};

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

thread_local! {
    static GRAD_ENABLED: Cell<bool> = const { Cell::new(true) };
}

pub fn grad_enabled() -> bool {
    GRAD_ENABLED.with(|g| g.get())
}

struct GradModeGuard(bool);

impl Drop for GradModeGuard {
    fn drop(&mut self) {
        GRAD_ENABLED.with(|g| g.set(self.0));
    }
}

fn set_grad_mode(enabled: bool) -> GradModeGuard {
    GradModeGuard(GRAD_ENABLED.with(|g| g.replace(enabled)))
}

/// Runs `f` without recording any graph.
pub fn no_grad<R>(f: impl FnOnce() -> R) -> R {
    let _guard = set_grad_mode(false);
    f()
}

/// Local derivative rule of a graph node.
///
/// `backward` receives the upstream gradient as a [`Var`] and must build the
/// parent gradients out of graph ops, so that they are themselves
/// differentiable when the caller asked for `create_graph`.
pub(crate) trait Backward<T: Real> {
    fn name(&self) -> &'static str;

    fn backward(&self, parents: &[Var<T>], out: &Var<T>, grad: &Var<T>) -> Vec<Option<Var<T>>>;

    /// Rules that fold data-dependent constants into their result are only
    /// valid for a single level of differentiation.
    fn first_order_only(&self) -> bool {
        false
    }
}

struct GradFn<T: Real> {
    rule: Box<dyn Backward<T>>,
    parents: Vec<Var<T>>,
}

struct Node<T: Real> {
    id: usize,
    value: Tensor<T>,
    requires_grad: bool,
    grad_fn: Option<GradFn<T>>,
}

/// Node in a dynamically recorded computation graph.
pub struct Var<T: Real>(Rc<Node<T>>);

impl<T: Real> Clone for Var<T> {
    fn clone(&self) -> Self {
        Var(Rc::clone(&self.0))
    }
}

impl<T: Real> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}({:?})", self.0.id, self.0.value)
    }
}

impl<T: Real> Var<T> {
    fn new(value: Tensor<T>, requires_grad: bool, grad_fn: Option<GradFn<T>>) -> Self {
        Var(Rc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            value,
            requires_grad,
            grad_fn,
        }))
    }

    /// Leaf that never receives gradients.
    pub fn constant(value: Tensor<T>) -> Self {
        Self::new(value, false, None)
    }

    /// Leaf that gradients can be taken with respect to.
    pub fn leaf(value: Tensor<T>) -> Self {
        Self::new(value, true, None)
    }

    pub fn scalar(value: T) -> Self {
        Self::constant(Tensor::scalar(value))
    }

    pub(crate) fn from_op(value: Tensor<T>, rule: impl Backward<T> + 'static, parents: Vec<Var<T>>) -> Self {
        if grad_enabled() && parents.iter().any(Var::requires_grad) {
            Self::new(
                value,
                true,
                Some(GradFn {
                    rule: Box::new(rule),
                    parents,
                }),
            )
        } else {
            Self::constant(value)
        }
    }

    pub fn id(&self) -> usize {
        self.0.id
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> [usize; 4] {
        self.0.value.shape()
    }

    pub fn item(&self) -> T {
        self.0.value.item()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    /// Same value, cut from the graph.
    pub fn detach(&self) -> Self {
        Self::constant(self.0.value.clone())
    }

    fn parents(&self) -> &[Var<T>] {
        self.0.grad_fn.as_ref().map_or(&[], |g| g.parents.as_slice())
    }
}

/// Gradients of `output` (summed over its elements) with respect to each of `wrt`.
///
/// With `create_graph` the returned gradients are recorded and can be
/// differentiated again; otherwise they are constants. A `None` entry means
/// `output` does not depend on that input.
pub fn grad<T: Real>(output: &Var<T>, wrt: &[&Var<T>], create_graph: bool) -> Vec<Option<Var<T>>> {
    let targets: HashSet<usize> = wrt.iter().map(|v| v.id()).collect();

    // Post-order over the recorded graph: parents precede children.
    let mut order: Vec<Var<T>> = Vec::new();
    let mut seen: HashSet<usize> = HashSet::new();
    let mut stack: Vec<(Var<T>, bool)> = vec![(output.clone(), false)];
    while let Some((v, expanded)) = stack.pop() {
        if expanded {
            order.push(v);
            continue;
        }
        if !v.requires_grad() || !seen.insert(v.id()) {
            continue;
        }
        stack.push((v.clone(), true));
        for p in v.parents() {
            if p.requires_grad() && !seen.contains(&p.id()) {
                stack.push((p.clone(), false));
            }
        }
    }

    // Only nodes on a path to one of the targets need gradients.
    let mut relevant: HashSet<usize> = HashSet::new();
    for v in &order {
        if targets.contains(&v.id()) || v.parents().iter().any(|p| relevant.contains(&p.id())) {
            relevant.insert(v.id());
        }
    }

    let _mode = set_grad_mode(create_graph);
    let mut grads: HashMap<usize, Var<T>> = HashMap::new();
    if relevant.contains(&output.id()) {
        grads.insert(output.id(), Var::constant(Tensor::full(output.shape(), T::one())));
    }
    let mut results: HashMap<usize, Var<T>> = HashMap::new();
    for node in order.iter().rev() {
        let id = node.id();
        let Some(g) = grads.remove(&id) else { continue };
        if targets.contains(&id) {
            results.insert(id, g.clone());
        }
        let Some(grad_fn) = node.0.grad_fn.as_ref() else { continue };
        if !grad_fn.parents.iter().any(|p| relevant.contains(&p.id())) {
            continue;
        }
        assert!(
            !(create_graph && grad_fn.rule.first_order_only()),
            "{} cannot be differentiated twice",
            grad_fn.rule.name()
        );
        let parent_grads = grad_fn.rule.backward(&grad_fn.parents, node, &g);
        for (p, pg) in grad_fn.parents.iter().zip(parent_grads) {
            let Some(pg) = pg else { continue };
            if !relevant.contains(&p.id()) {
                continue;
            }
            debug_assert_eq!(pg.shape(), p.shape(), "{} produced a mis-shaped gradient", grad_fn.rule.name());
            let acc = match grads.remove(&p.id()) {
                Some(prev) => super::ops::add(&prev, &pg),
                None => pg,
            };
            grads.insert(p.id(), acc);
        }
    }
    wrt.iter().map(|v| results.get(&v.id()).cloned()).collect()
}
