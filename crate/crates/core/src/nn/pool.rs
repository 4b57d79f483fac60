use serde::{Deserialize, Serialize};

use super::effective_extent;
use crate::{Element, Error, Result, Shape, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolGeometry {
    pub window: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PoolGeometry {
    /// Stride-1 window spanning the same extent as a 3x3 conv at `dilation`,
    /// padded so the map size is unchanged.
    pub fn matching_dilated_3x3(dilation: usize) -> Self {
        PoolGeometry {
            window: effective_extent(3, dilation),
            stride: 1,
            padding: dilation,
        }
    }

    fn output_shape(&self, s: Shape, op: &'static str) -> Result<Shape> {
        let padded_h = s.height + 2 * self.padding;
        let padded_w = s.width + 2 * self.padding;
        if self.window == 0 || self.stride == 0 || padded_h < self.window || padded_w < self.window {
            return Err(Error::NegativeOutputSize {
                op,
                input: s.height.min(s.width),
                extent: self.window,
                padding: self.padding,
            });
        }
        Ok(Shape::new(
            s.batch,
            s.channels,
            (padded_h - self.window) / self.stride + 1,
            (padded_w - self.window) / self.stride + 1,
        ))
    }

    /// In-bounds input rows/cols covered by output position `o`.
    fn span(&self, o: usize, len: usize) -> (usize, usize) {
        let start = (o * self.stride) as isize - self.padding as isize;
        let end = start + self.window as isize;
        (start.max(0) as usize, (end.min(len as isize)).max(0) as usize)
    }
}

/// Max pooling; padded cells never win.
pub fn maxpool2d_forward<T: Element>(x: &Tensor<T>, g: PoolGeometry) -> Result<Tensor<T>> {
    let (out, _) = maxpool_with_argmax(x, g)?;
    Ok(out)
}

/// Flat input index chosen by each output of [`maxpool2d_forward`].
pub fn maxpool2d_argmax<T: Element>(x: &Tensor<T>, g: PoolGeometry) -> Result<Vec<usize>> {
    Ok(maxpool_with_argmax(x, g)?.1)
}

fn maxpool_with_argmax<T: Element>(x: &Tensor<T>, g: PoolGeometry) -> Result<(Tensor<T>, Vec<usize>)> {
    let xs = x.shape();
    let os = g.output_shape(xs, "maxpool2d")?;
    let mut out = Tensor::zeros(os);
    let mut arg = vec![0usize; os.numel()];
    let mut i = 0;
    for n in 0..xs.batch {
        for c in 0..xs.channels {
            for oy in 0..os.height {
                let (y0, y1) = g.span(oy, xs.height);
                for ox in 0..os.width {
                    let (x0, x1) = g.span(ox, xs.width);
                    let mut best: Option<(T, usize)> = None;
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            let j = x.index(n, c, iy, ix);
                            let v = x.data()[j];
                            if best.map_or(true, |(b, _)| v > b) {
                                best = Some((v, j));
                            }
                        }
                    }
                    let (v, j) = best.unwrap_or((T::ZERO, usize::MAX));
                    out.data_mut()[i] = v;
                    arg[i] = j;
                    i += 1;
                }
            }
        }
    }
    Ok((out, arg))
}

/// Routes each upstream gradient to the first maximal input of its window.
pub fn maxpool2d_backward<T: Element>(
    x: &Tensor<T>,
    g: PoolGeometry,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (out, arg) = maxpool_with_argmax(x, g)?;
    check_grad_shape(out.shape(), grad_out, "maxpool2d_backward")?;
    let mut acc = vec![0.0f64; x.len()];
    for (&j, &go) in arg.iter().zip(grad_out.data()) {
        if j != usize::MAX {
            acc[j] += go.to_f64();
        }
    }
    Tensor::from_vec(x.shape(), acc.into_iter().map(T::from_f64).collect())
}

/// Average pooling over in-bounds cells only.
pub fn avgpool2d_forward<T: Element>(x: &Tensor<T>, g: PoolGeometry) -> Result<Tensor<T>> {
    let xs = x.shape();
    let os = g.output_shape(xs, "avgpool2d")?;
    let mut out = Tensor::zeros(os);
    let mut i = 0;
    for n in 0..xs.batch {
        for c in 0..xs.channels {
            let plane = x.plane(n, c);
            for oy in 0..os.height {
                let (y0, y1) = g.span(oy, xs.height);
                for ox in 0..os.width {
                    let (x0, x1) = g.span(ox, xs.width);
                    let mut acc = 0.0f64;
                    for iy in y0..y1 {
                        for ix in x0..x1 {
                            acc += plane[iy * xs.width + ix].to_f64();
                        }
                    }
                    let count = (y1 - y0) * (x1 - x0);
                    out.data_mut()[i] = T::from_f64(if count > 0 { acc / count as f64 } else { 0.0 });
                    i += 1;
                }
            }
        }
    }
    Ok(out)
}

pub fn avgpool2d_backward<T: Element>(
    x: &Tensor<T>,
    g: PoolGeometry,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let xs = x.shape();
    let os = g.output_shape(xs, "avgpool2d_backward")?;
    check_grad_shape(os, grad_out, "avgpool2d_backward")?;
    let mut acc = vec![0.0f64; x.len()];
    let mut i = 0;
    for n in 0..xs.batch {
        for c in 0..xs.channels {
            let base = (n * xs.channels + c) * xs.plane();
            for oy in 0..os.height {
                let (y0, y1) = g.span(oy, xs.height);
                for ox in 0..os.width {
                    let (x0, x1) = g.span(ox, xs.width);
                    let count = (y1 - y0) * (x1 - x0);
                    if count > 0 {
                        let share = grad_out.data()[i].to_f64() / count as f64;
                        for iy in y0..y1 {
                            for ix in x0..x1 {
                                acc[base + iy * xs.width + ix] += share;
                            }
                        }
                    }
                    i += 1;
                }
            }
        }
    }
    Tensor::from_vec(xs, acc.into_iter().map(T::from_f64).collect())
}

fn check_grad_shape<T: Element>(expected: Shape, grad_out: &Tensor<T>, op: &'static str) -> Result<()> {
    if grad_out.shape() != expected {
        return Err(Error::ShapeMismatch {
            op,
            expected: expected.dims(),
            actual: grad_out.shape().dims(),
        });
    }
    Ok(())
}
