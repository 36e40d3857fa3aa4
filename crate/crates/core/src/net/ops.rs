//! Differentiable operations on `[channels, angle, radius]` activations.
//!
//! Every forward function has a matching `*_backward` that maps the gradient
//! of the output to gradients of the inputs.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView2, ArrayViewMut2, ShapeBuilder};

use super::{NetError, Tensor};

fn dims3(x: &Tensor, op: &str) -> Result<(usize, usize, usize), NetError> {
    x.expect_rank(3, op)?;
    Ok((x.shape()[0], x.shape()[1], x.shape()[2]))
}

/// Wraps the angular axis: `[x_{A-p}, .., x_{A-1}, x_0, .., x_{A-1}, x_0, .., x_{p-1}]`.
pub fn cyclic_pad(x: &Tensor, pad: usize) -> Result<Tensor, NetError> {
    let (c, a, r) = dims3(x, "cyclic_pad")?;
    if pad >= a {
        return Err(NetError::Shape(format!("cyclic pad {pad} must be < angular extent {a}")));
    }
    let ap = a + 2 * pad;
    let mut out = Vec::with_capacity(c * ap * r);
    for ch in x.data().chunks_exact(a * r) {
        out.extend_from_slice(&ch[(a - pad) * r..]);
        out.extend_from_slice(ch);
        out.extend_from_slice(&ch[..pad * r]);
    }
    Tensor::new(vec![c, ap, r], out)
}

/// Folds the gradient of each padded copy back onto its source column.
pub fn cyclic_pad_backward(grad: &Tensor, pad: usize) -> Result<Tensor, NetError> {
    let (c, ap, r) = dims3(grad, "cyclic_pad_backward")?;
    if ap <= 2 * pad {
        return Err(NetError::Shape(format!("padded extent {ap} too small for pad {pad}")));
    }
    let a = ap - 2 * pad;
    let mut out = vec![0.0; c * a * r];
    for (g, o) in grad.data().chunks_exact(ap * r).zip(out.chunks_exact_mut(a * r)) {
        for src in 0..ap {
            let dst = (src + a - pad) % a;
            let (gs, os) = (&g[src * r..(src + 1) * r], &mut o[dst * r..(dst + 1) * r]);
            os.iter_mut().zip(gs).for_each(|(o, g)| *o += g);
        }
    }
    Tensor::new(vec![c, a, r], out)
}

/// Geometry shared by the convolution forward and backward passes.
///
/// The input is copied into per-channel buffers of width `R + 2p` with zero
/// radial padding, so each kernel offset becomes a single strided GEMM over
/// a "wide" output of `A x (R + 2p)` positions whose extra columns are
/// discarded.
struct ConvGeometry {
    cin: usize,
    cout: usize,
    k: usize,
    pad: usize,
    a_out: usize,
    r: usize,
    width: usize,
    chan_len: usize,
}

impl ConvGeometry {
    fn new(x: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<Self, NetError> {
        let (cin, ap, r) = dims3(x, "conv2d")?;
        kernel.expect_rank(4, "conv2d kernel")?;
        let &[cout, kcin, k, k2] = kernel.shape() else { unreachable!() };
        if kcin != cin || k != k2 || k % 2 == 0 {
            return Err(NetError::Shape(format!(
                "kernel {:?} does not fit input {:?} (need odd square kernel over {cin} channels)",
                kernel.shape(),
                x.shape()
            )));
        }
        if bias.shape() != [cout] {
            return Err(NetError::Shape(format!("bias {:?} for {cout} output channels", bias.shape())));
        }
        let pad = k / 2;
        if ap <= 2 * pad {
            return Err(NetError::Shape(format!(
                "angular extent {ap} is not padded for a {k}x{k} kernel"
            )));
        }
        let width = r + 2 * pad;
        Ok(Self {
            cin,
            cout,
            k,
            pad,
            a_out: ap - 2 * pad,
            r,
            width,
            chan_len: ap * width + 2 * pad,
        })
    }

    fn n_wide(&self) -> usize {
        self.a_out * self.width
    }

    fn offset(&self, da: usize, dr: usize) -> usize {
        da * self.width + dr
    }

    fn padded_input(&self, x: &Tensor) -> Vec<f64> {
        let ap = self.a_out + 2 * self.pad;
        let mut buf = vec![0.0; self.cin * self.chan_len];
        for (ch, dst) in x.data().chunks_exact(ap * self.r).zip(buf.chunks_exact_mut(self.chan_len)) {
            for a in 0..ap {
                let d = a * self.width + self.pad;
                dst[d..d + self.r].copy_from_slice(&ch[a * self.r..(a + 1) * self.r]);
            }
        }
        buf
    }

    fn input_view<'a>(&self, buf: &'a [f64], off: usize) -> ArrayView2<'a, f64> {
        ArrayView2::from_shape((self.cin, self.n_wide()).strides((self.chan_len, 1)), &buf[off..])
            .expect("padded buffer covers every offset")
    }

    /// `kernel[:, :, da, dr]` as a `cout x cin` matrix.
    fn tap(&self, kernel: &[f64], da: usize, dr: usize) -> Array2<f64> {
        let kk = self.k * self.k;
        Array2::from_shape_fn((self.cout, self.cin), |(co, ci)| {
            kernel[(co * self.cin + ci) * kk + da * self.k + dr]
        })
    }
}

fn output_extent(n: usize, stride: usize) -> usize {
    n.div_ceil(stride)
}

/// Cross-correlation of an angularly pre-padded input `[Cin, A + 2p, R]`
/// with `kernel` `[Cout, Cin, k, k]`; the radial axis is zero-padded by `p`
/// here. Output is `[Cout, ceil(A / s), ceil(R / s)]`.
pub fn conv2d(x: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor, NetError> {
    if stride == 0 {
        return Err(NetError::Shape("stride must be >= 1".into()));
    }
    let g = ConvGeometry::new(x, kernel, bias)?;
    let buf = g.padded_input(x);
    let mut wide = Array2::<f64>::zeros((g.cout, g.n_wide()));
    for da in 0..g.k {
        for dr in 0..g.k {
            let view = g.input_view(&buf, g.offset(da, dr));
            general_mat_mul(1.0, &g.tap(kernel.data(), da, dr), &view, 1.0, &mut wide);
        }
    }
    let (ao, ro) = (output_extent(g.a_out, stride), output_extent(g.r, stride));
    let wide = wide.as_slice().expect("standard layout");
    let mut out = Vec::with_capacity(g.cout * ao * ro);
    for (co, b) in bias.data().iter().enumerate() {
        let plane = &wide[co * g.n_wide()..(co + 1) * g.n_wide()];
        for a in (0..g.a_out).step_by(stride) {
            let row = &plane[a * g.width..a * g.width + g.r];
            out.extend(row.iter().step_by(stride).map(|v| v + b));
        }
    }
    Tensor::new(vec![g.cout, ao, ro], out)
}

pub struct ConvGrads {
    pub input: Tensor,
    pub kernel: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    x: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    stride: usize,
    grad: &Tensor,
) -> Result<ConvGrads, NetError> {
    let g = ConvGeometry::new(x, kernel, bias)?;
    let (ao, ro) = (output_extent(g.a_out, stride), output_extent(g.r, stride));
    if grad.shape() != [g.cout, ao, ro] {
        return Err(NetError::Shape(format!(
            "output gradient {:?}, expected {:?}",
            grad.shape(),
            [g.cout, ao, ro]
        )));
    }
    let mut gwide = Array2::<f64>::zeros((g.cout, g.n_wide()));
    let mut gbias = vec![0.0; g.cout];
    {
        let gw = gwide.as_slice_mut().expect("standard layout");
        for co in 0..g.cout {
            for (ia, a) in (0..g.a_out).step_by(stride).enumerate() {
                for (ir, r) in (0..g.r).step_by(stride).enumerate() {
                    let v = grad.data()[(co * ao + ia) * ro + ir];
                    gw[co * g.n_wide() + a * g.width + r] = v;
                    gbias[co] += v;
                }
            }
        }
    }

    let buf = g.padded_input(x);
    let mut gbuf = vec![0.0; buf.len()];
    let kk = g.k * g.k;
    let mut gkernel = vec![0.0; kernel.len()];
    let mut tap_grad = Array2::<f64>::zeros((g.cout, g.cin));
    for da in 0..g.k {
        for dr in 0..g.k {
            let off = g.offset(da, dr);
            let view = g.input_view(&buf, off);
            general_mat_mul(1.0, &gwide, &view.t(), 0.0, &mut tap_grad);
            for ((co, ci), v) in tap_grad.indexed_iter() {
                gkernel[(co * g.cin + ci) * kk + da * g.k + dr] = *v;
            }
            let tap = g.tap(kernel.data(), da, dr);
            let mut gview = ArrayViewMut2::from_shape(
                (g.cin, g.n_wide()).strides((g.chan_len, 1)),
                &mut gbuf[off..],
            )
            .expect("padded buffer covers every offset");
            general_mat_mul(1.0, &tap.t(), &gwide, 1.0, &mut gview);
        }
    }

    let ap = g.a_out + 2 * g.pad;
    let mut ginput = Vec::with_capacity(x.len());
    for ch in gbuf.chunks_exact(g.chan_len) {
        for a in 0..ap {
            let s = a * g.width + g.pad;
            ginput.extend_from_slice(&ch[s..s + g.r]);
        }
    }
    Ok(ConvGrads {
        input: Tensor::new(x.shape().to_vec(), ginput)?,
        kernel: Tensor::new(kernel.shape().to_vec(), gkernel)?,
        bias: Tensor::new(vec![g.cout], gbias)?,
    })
}

pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|v| v.max(0.0)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

/// Gradient through a ReLU given its output.
pub fn relu_backward(output: &Tensor, grad: &Tensor) -> Tensor {
    let data = output
        .data()
        .iter()
        .zip(grad.data())
        .map(|(&y, &g)| if y > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(grad.shape().to_vec(), data).expect("same shape")
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor, NetError> {
    if a.shape() != b.shape() {
        return Err(NetError::Shape(format!("add of {:?} and {:?}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Non-overlapping average pooling by `(fa, fr)` over angle and radius.
pub fn avg_pool(x: &Tensor, fa: usize, fr: usize) -> Result<Tensor, NetError> {
    let (c, a, r) = dims3(x, "avg_pool")?;
    if fa == 0 || fr == 0 || a % fa != 0 || r % fr != 0 {
        return Err(NetError::Shape(format!("cannot pool {a}x{r} by {fa}x{fr}")));
    }
    let (ao, ro) = (a / fa, r / fr);
    let scale = 1.0 / (fa * fr) as f64;
    let mut out = vec![0.0; c * ao * ro];
    for ch in 0..c {
        for i in 0..a {
            for j in 0..r {
                out[(ch * ao + i / fa) * ro + j / fr] += scale * x.data()[(ch * a + i) * r + j];
            }
        }
    }
    Tensor::new(vec![c, ao, ro], out)
}

pub fn avg_pool_backward(grad: &Tensor, fa: usize, fr: usize) -> Result<Tensor, NetError> {
    let (c, ao, ro) = dims3(grad, "avg_pool_backward")?;
    let (a, r) = (ao * fa, ro * fr);
    let scale = 1.0 / (fa * fr) as f64;
    let mut out = vec![0.0; c * a * r];
    for ch in 0..c {
        for i in 0..a {
            for j in 0..r {
                out[(ch * a + i) * r + j] = scale * grad.data()[(ch * ao + i / fa) * ro + j / fr];
            }
        }
    }
    Tensor::new(vec![c, a, r], out)
}

/// Mean over angle and radius: `[C, A, R] -> [C]`.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor, NetError> {
    let (c, a, r) = dims3(x, "global_avg_pool")?;
    let n = (a * r) as f64;
    let data = x.data().chunks_exact(a * r).map(|ch| ch.iter().sum::<f64>() / n).collect();
    Tensor::new(vec![c], data)
}

pub fn global_avg_pool_backward(grad: &Tensor, a: usize, r: usize) -> Result<Tensor, NetError> {
    grad.expect_rank(1, "global_avg_pool_backward")?;
    let n = (a * r) as f64;
    let data = grad
        .data()
        .iter()
        .flat_map(|g| std::iter::repeat_n(g / n, a * r))
        .collect();
    Tensor::new(vec![grad.len(), a, r], data)
}

/// `W x + b` with `W` of shape `[d_out, d_in]`.
pub fn dense(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor, NetError> {
    x.expect_rank(1, "dense")?;
    weight.expect_rank(2, "dense weight")?;
    let (d_out, d_in) = (weight.shape()[0], weight.shape()[1]);
    if x.len() != d_in || bias.shape() != [d_out] {
        return Err(NetError::Shape(format!(
            "dense {:?} with input {:?} and bias {:?}",
            weight.shape(),
            x.shape(),
            bias.shape()
        )));
    }
    let data = weight
        .data()
        .chunks_exact(d_in)
        .zip(bias.data())
        .map(|(row, b)| b + row.iter().zip(x.data()).map(|(w, v)| w * v).sum::<f64>())
        .collect();
    Tensor::new(vec![d_out], data)
}

pub struct DenseGrads {
    pub input: Tensor,
    pub weight: Tensor,
    pub bias: Tensor,
}

pub fn dense_backward(x: &Tensor, weight: &Tensor, grad: &Tensor) -> Result<DenseGrads, NetError> {
    let (d_out, d_in) = (weight.shape()[0], weight.shape()[1]);
    if grad.len() != d_out || x.len() != d_in {
        return Err(NetError::Shape("dense_backward shape mismatch".into()));
    }
    let mut gx = vec![0.0; d_in];
    let mut gw = Vec::with_capacity(d_out * d_in);
    for (row, g) in weight.data().chunks_exact(d_in).zip(grad.data()) {
        for ((gxi, w), xi) in gx.iter_mut().zip(row).zip(x.data()) {
            *gxi += g * w;
            gw.push(g * xi);
        }
    }
    Ok(DenseGrads {
        input: Tensor::new(vec![d_in], gx)?,
        weight: Tensor::new(vec![d_out, d_in], gw)?,
        bias: grad.clone(),
    })
}

pub fn l2_normalize(x: &Tensor) -> Result<Tensor, NetError> {
    let norm = x.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0 && norm.is_finite()) {
        return Err(NetError::NonFinite {
            layer: "l2_normalize".into(),
        });
    }
    Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v / norm).collect())
}

/// `(g - y (y . g)) / |x|`.
pub fn l2_normalize_backward(x: &Tensor, grad: &Tensor) -> Result<Tensor, NetError> {
    let y = l2_normalize(x)?;
    let norm = x.data().iter().map(|v| v * v).sum::<f64>().sqrt();
    let dot: f64 = y.data().iter().zip(grad.data()).map(|(a, b)| a * b).sum();
    let data = grad
        .data()
        .iter()
        .zip(y.data())
        .map(|(g, yi)| (g - yi * dot) / norm)
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn cyclic_pad_wraps_columns() {
        let x = t(&[1, 5, 1], vec![1.0, 2.0, 3.0, 4.0, 5.0]);
        let p = cyclic_pad(&x, 2).unwrap();
        assert_eq!(p.data(), &[4.0, 5.0, 1.0, 2.0, 3.0, 4.0, 5.0, 1.0, 2.0]);
        assert_eq!(cyclic_pad(&x, 0).unwrap(), x);
        assert!(cyclic_pad(&x, 5).is_err());
    }

    #[test]
    fn cyclic_pad_backward_counts_copies() {
        let ones = t(&[1, 9, 1], vec![1.0; 9]);
        let g = cyclic_pad_backward(&ones, 2).unwrap();
        assert_eq!(g.data(), &[2.0, 2.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn identity_1x1_conv() {
        let x = t(&[1, 4, 3], (0..12).map(f64::from).collect());
        let k = t(&[1, 1, 1, 1], vec![1.0]);
        let b = t(&[1], vec![0.0]);
        assert_eq!(conv2d(&x, &k, &b, 1).unwrap(), x);
    }

    #[test]
    fn averaging_kernel_preserves_constants_inside() {
        let x = t(&[1, 8, 6], vec![2.5; 48]);
        let k = t(&[1, 1, 3, 3], vec![1.0 / 9.0; 9]);
        let b = t(&[1], vec![0.0]);
        let y = conv2d(&cyclic_pad(&x, 1).unwrap(), &k, &b, 1).unwrap();
        assert_eq!(y.shape(), &[1, 8, 6]);
        for a in 0..8 {
            for r in 1..5 {
                assert!((y.data()[a * 6 + r] - 2.5).abs() < 1e-12);
            }
            // zero radial padding at the border
            assert!((y.data()[a * 6] - 2.5 * 6.0 / 9.0).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_matches_direct_loops() {
        let (cin, cout, a, r, k) = (2, 3, 7, 5, 3);
        let x = t(&[cin, a + 2, r], (0..cin * (a + 2) * r).map(|i| (i as f64 * 0.37).sin()).collect());
        let kernel = t(&[cout, cin, k, k], (0..cout * cin * k * k).map(|i| (i as f64 * 0.11).cos()).collect());
        let bias = t(&[cout], vec![0.1, -0.2, 0.3]);
        let y = conv2d(&x, &kernel, &bias, 1).unwrap();
        for co in 0..cout {
            for i in 0..a {
                for j in 0..r {
                    let mut acc = bias.data()[co];
                    for ci in 0..cin {
                        for da in 0..k {
                            for dr in 0..k {
                                let rr = j as isize + dr as isize - 1;
                                if rr < 0 || rr >= r as isize {
                                    continue;
                                }
                                acc += kernel.data()[((co * cin + ci) * k + da) * k + dr]
                                    * x.data()[(ci * (a + 2) + i + da) * r + rr as usize];
                            }
                        }
                    }
                    assert!((y.data()[(co * a + i) * r + j] - acc).abs() < 1e-12);
                }
            }
        }
        let y2 = conv2d(&x, &kernel, &bias, 2).unwrap();
        assert_eq!(y2.shape(), &[cout, 4, 3]);
        assert_eq!(y2.data()[(2 * 4 + 1) * 3 + 2], y.data()[(2 * a + 2) * r + 4]);
    }

    #[test]
    fn dense_parameter_count_example() {
        let w = t(&[8, 16], vec![0.0; 128]);
        let b = t(&[8], vec![0.0; 8]);
        assert_eq!(w.len() + b.len(), 136);
        let y = dense(&t(&[16], vec![1.0; 16]), &w, &b).unwrap();
        assert_eq!(y.shape(), &[8]);
    }

    #[test]
    fn pooling_shapes() {
        let x = t(&[2, 4, 6], (0..48).map(f64::from).collect());
        let y = avg_pool(&x, 1, 2).unwrap();
        assert_eq!(y.shape(), &[2, 4, 3]);
        assert_eq!(y.data()[0], 0.5);
        assert!(avg_pool(&x, 1, 4).is_err());
        let g = global_avg_pool(&x).unwrap();
        assert_eq!(g.data(), &[11.5, 35.5]);
    }
}
