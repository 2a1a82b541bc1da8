//! Single-sample layer kernels.
//!
//! Every kernel accumulates in `f32` with a fixed order per output element:
//! kernel rows, kernel columns, then input channels (row-major over the
//! kernel window). Loops are arranged so that the channel axis is innermost
//! without changing that per-element order.

use crate::ir::{same_pad_before, Activation, Conv2dAttrs, LayerKind, LayerNode, Padding};

/// Cross-correlation without bias or activation. `out` must be zeroed.
pub(crate) fn conv2d_linear(
    x: &[f32],
    in_shape: &[usize],
    weights: &[f32],
    attrs: &Conv2dAttrs,
    out_shape: &[usize],
    out: &mut [f32],
) {
    let (h, w, cin) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow, cout) = (out_shape[0], out_shape[1], out_shape[2]);
    let [kh, kw] = attrs.kernel;
    let s = attrs.stride;
    let (pt, pl) = match attrs.padding {
        Padding::Same => (same_pad_before(h, kh, s), same_pad_before(w, kw, s)),
        Padding::Valid => (0, 0),
    };
    for oy in 0..oh {
        for ox in 0..ow {
            let acc = &mut out[(oy * ow + ox) * cout..(oy * ow + ox + 1) * cout];
            for ky in 0..kh {
                let iy = (oy * s + ky) as isize - pt as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * s + kx) as isize - pl as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let xbase = (iy as usize * w + ix as usize) * cin;
                    let wbase = (ky * kw + kx) * cin * cout;
                    for ci in 0..cin {
                        let xv = x[xbase + ci];
                        let wrow = &weights[wbase + ci * cout..wbase + (ci + 1) * cout];
                        for (a, &wv) in acc.iter_mut().zip(wrow) {
                            *a += xv * wv;
                        }
                    }
                }
            }
        }
    }
}

/// Affine map without bias or activation. `out` must be zeroed.
pub(crate) fn dense_linear(x: &[f32], weights: &[f32], units: usize, out: &mut [f32]) {
    for (i, &xv) in x.iter().enumerate() {
        let row = &weights[i * units..(i + 1) * units];
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += xv * wv;
        }
    }
}

/// Mean over non-overlapping windows; partial 'same' windows average only
/// the in-bounds elements.
pub(crate) fn avg_pool(
    x: &[f32],
    in_shape: &[usize],
    pool: usize,
    padding: Padding,
    out_shape: &[usize],
    out: &mut [f32],
) {
    let (h, w, c) = (in_shape[0], in_shape[1], in_shape[2]);
    let (oh, ow) = (out_shape[0], out_shape[1]);
    let (pt, pl) = match padding {
        Padding::Same => (
            same_pad_before(h, pool, pool),
            same_pad_before(w, pool, pool),
        ),
        Padding::Valid => (0, 0),
    };
    for oy in 0..oh {
        for ox in 0..ow {
            let acc = &mut out[(oy * ow + ox) * c..(oy * ow + ox + 1) * c];
            let mut count = 0u32;
            for ky in 0..pool {
                let iy = (oy * pool + ky) as isize - pt as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..pool {
                    let ix = (ox * pool + kx) as isize - pl as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    count += 1;
                    let base = (iy as usize * w + ix as usize) * c;
                    for (a, &v) in acc.iter_mut().zip(&x[base..base + c]) {
                        *a += v;
                    }
                }
            }
            let inv = 1.0 / count as f32;
            for a in acc.iter_mut() {
                *a *= inv;
            }
        }
    }
}

pub(crate) fn upsample_nearest(x: &[f32], in_shape: &[usize], factor: usize, out: &mut [f32]) {
    let (h, w, c) = (in_shape[0], in_shape[1], in_shape[2]);
    let ow = w * factor;
    for oy in 0..h * factor {
        for ox in 0..ow {
            let src = ((oy / factor) * w + ox / factor) * c;
            let dst = (oy * ow + ox) * c;
            out[dst..dst + c].copy_from_slice(&x[src..src + c]);
        }
    }
}

/// Full analog evaluation of one node for one sample.
pub(crate) fn eval_node(node: &LayerNode, inputs: &[&[f32]], in_shapes: &[&[usize]]) -> Vec<f32> {
    let mut out = vec![0.0f32; node.output_len()];
    match &node.kind {
        LayerKind::Input => unreachable!("input nodes are fed, not evaluated"),
        LayerKind::Conv2D(attrs) => {
            let w = node.weights.as_ref().expect("validated");
            conv2d_linear(
                inputs[0],
                in_shapes[0],
                w.data(),
                attrs,
                &node.output_shape,
                &mut out,
            );
        }
        LayerKind::Dense { units } => {
            let w = node.weights.as_ref().expect("validated");
            dense_linear(inputs[0], w.data(), *units, &mut out);
        }
        LayerKind::Add => {
            for x in inputs {
                for (o, &v) in out.iter_mut().zip(x.iter()) {
                    *o += v;
                }
            }
        }
        LayerKind::NormAdd(na) => {
            let c = na.beta.len();
            for (x, alpha) in inputs.iter().zip(&na.alpha) {
                for (k, (o, &v)) in out.iter_mut().zip(x.iter()).enumerate() {
                    *o += alpha[k % c] * v;
                }
            }
            for (k, o) in out.iter_mut().enumerate() {
                *o += na.beta[k % c];
            }
        }
        LayerKind::UpsampleNearest { factor } => {
            upsample_nearest(inputs[0], in_shapes[0], *factor, &mut out);
        }
        LayerKind::AvgPool2D { pool, padding } => {
            avg_pool(
                inputs[0],
                in_shapes[0],
                *pool,
                *padding,
                &node.output_shape,
                &mut out,
            );
        }
        LayerKind::Flatten => out.copy_from_slice(inputs[0]),
    }
    if let Some(b) = &node.bias {
        let b = b.data();
        let c = b.len();
        for (k, o) in out.iter_mut().enumerate() {
            *o += b[k % c];
        }
    }
    if node.activation != Activation::None {
        for o in out.iter_mut() {
            *o = node.activation.apply(*o);
        }
    }
    out
}
