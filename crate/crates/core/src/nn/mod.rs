//! Primitive kernels with explicit forward and backward passes.

mod conv;
mod elementwise;
mod pool;

use std::sync::atomic::{AtomicBool, Ordering};


pub use conv::{
    conv2d_backward, conv2d_forward, effective_extent, ConvGeometry, ConvGrads, ConvParams,
};
pub use elementwise::{
    add, concat_channels, relu_backward, relu_backward_from_output, relu_forward, split_channels,
};
pub use pool::{
    avgpool2d_backward, avgpool2d_forward, maxpool2d_argmax, maxpool2d_backward, maxpool2d_forward,
    PoolGeometry,
};

static PARALLEL: AtomicBool = AtomicBool::new(false);

/// Toggle rayon parallelism inside the kernels. Results are bit-identical
/// either way: work is split over independent output planes.
pub fn set_parallel(enabled: bool) {
    PARALLEL.store(enabled, Ordering::Relaxed);
}

pub fn parallel_enabled() -> bool {
    PARALLEL.load(Ordering::Relaxed)
}

/// Enables parallel kernels until dropped.
pub struct ParallelGuard {
    previous: bool,
}

impl ParallelGuard {
    pub fn enable() -> Self {
        let previous = parallel_enabled();
        set_parallel(true);
        ParallelGuard { previous }
    }
}

impl Drop for ParallelGuard {
    fn drop(&mut self) {
        set_parallel(self.previous);
    }
}

use crate::{Element, Tensor};

/// Named traversal over a module's parameter tensors, in a fixed order.
pub trait Parameters<T: Element> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>));

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.len());
        n
    }

    fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.visit("", &mut |name, t| out.push((name, t)));
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl<T: Element> Parameters<T> for ConvParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(join(prefix, "weight"), &self.weight);
        f(join(prefix, "bias"), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "weight"), &mut self.weight);
        f(join(prefix, "bias"), &mut self.bias);
    }
}
