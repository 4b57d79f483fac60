use crate::{Element, Error, Result, Tensor};

pub fn relu_forward<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::ZERO { v } else { T::ZERO })
}

/// Passes `grad_out` where the forward input was strictly positive.
pub fn relu_backward<T: Element>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    mask_by_positive(x, grad_out, "relu_backward")
}

/// Same as [`relu_backward`] using the activation output as the mask
/// (`y > 0` iff `x > 0`).
pub fn relu_backward_from_output<T: Element>(
    y: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    mask_by_positive(y, grad_out, "relu_backward")
}

fn mask_by_positive<T: Element>(
    m: &Tensor<T>,
    grad_out: &Tensor<T>,
    op: &'static str,
) -> Result<Tensor<T>> {
    if m.shape() != grad_out.shape() {
        return Err(Error::ShapeMismatch {
            op,
            expected: m.shape().dims(),
            actual: grad_out.shape().dims(),
        });
    }
    let data = m
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > T::ZERO { g } else { T::ZERO })
        .collect();
    Tensor::from_vec(m.shape(), data)
}

pub fn add<T: Element>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op: "add",
            expected: a.shape().dims(),
            actual: b.shape().dims(),
        });
    }
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| T::from_f64(x.to_f64() + y.to_f64()))
        .collect();
    Tensor::from_vec(a.shape(), data)
}

/// Concatenates along channels in list order.
pub fn concat_channels<T: Element>(xs: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = xs.first().ok_or(Error::Empty("concat_channels of no tensors"))?;
    let s0 = first.shape();
    let mut channels = 0;
    for t in xs {
        let s = t.shape();
        if (s.batch, s.height, s.width) != (s0.batch, s0.height, s0.width) {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                expected: s0.with_channels(s.channels).dims(),
                actual: s.dims(),
            });
        }
        channels += s.channels;
    }
    let out_shape = s0.with_channels(channels);
    let plane = s0.plane();
    let mut data = Vec::with_capacity(out_shape.numel());
    for n in 0..s0.batch {
        for t in xs {
            let c = t.shape().channels;
            data.extend_from_slice(&t.data()[n * c * plane..(n + 1) * c * plane]);
        }
    }
    Tensor::from_vec(out_shape, data)
}

/// Inverse of [`concat_channels`]: splits into consecutive channel groups.
pub fn split_channels<T: Element>(x: &Tensor<T>, sizes: &[usize]) -> Result<Vec<Tensor<T>>> {
    let total: usize = sizes.iter().sum();
    if total != x.shape().channels {
        return Err(Error::ChannelMismatch {
            op: "split_channels",
            expected: x.shape().channels,
            actual: total,
        });
    }
    let mut start = 0;
    sizes
        .iter()
        .map(|&c| {
            let t = x.channel_slice(start, c);
            start += c;
            t
        })
        .collect()
}
