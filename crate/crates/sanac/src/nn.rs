//! Small 1-d convolutional network toolkit with explicit forward/backward
//! passes over f64 tensors of shape (batch, channels, time).
//!
//! Convolutions use "same" padding (odd kernels) and are computed as
//! im2col + GEMM. Layers cache what the backward pass needs; gradients
//! accumulate into per-layer buffers and are applied by [`Adam`] through the
//! [`HasParams`] visitor.

use ndarray::{Array1, Array2, Array3, ArrayViewMutD, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

/// Callback applied to every (value, grad) parameter tensor pair of a model,
/// in a stable traversal order.
pub trait ParamVisitor {
    fn visit(&mut self, name: &str, value: ArrayViewMutD<'_, f64>, grad: ArrayViewMutD<'_, f64>);
}

/// Anything owning trainable parameters.
pub trait HasParams {
    fn visit_params(&mut self, visitor: &mut dyn ParamVisitor);

    fn zero_grads(&mut self) {
        struct Zero;
        impl ParamVisitor for Zero {
            fn visit(&mut self, _: &str, _: ArrayViewMutD<'_, f64>, mut grad: ArrayViewMutD<'_, f64>) {
                grad.fill(0.0);
            }
        }
        self.visit_params(&mut Zero);
    }

    fn param_count(&mut self) -> usize {
        struct Count(usize);
        impl ParamVisitor for Count {
            fn visit(&mut self, _: &str, value: ArrayViewMutD<'_, f64>, _: ArrayViewMutD<'_, f64>) {
                self.0 += value.len();
            }
        }
        let mut c = Count(0);
        self.visit_params(&mut c);
        c.0
    }
}

/// Gather the sliding windows of `x` into a (c*k, b*t_out) matrix so the
/// convolution becomes one GEMM. Column b*t_out + t holds the receptive
/// field of output position (b, t); out-of-range taps are zero.
fn im2col(x: &Array3<f64>, k: usize, stride: usize, pad: usize, t_out: usize) -> Array2<f64> {
    let (b, c, t_in) = x.dim();
    let mut cols = Array2::<f64>::zeros((c * k, b * t_out));
    for bi in 0..b {
        for ci in 0..c {
            let src = x
                .index_axis(Axis(0), bi)
                .row(ci)
                .to_slice()
                .expect("input rows are contiguous")
                .to_vec();
            for kk in 0..k {
                let row_idx = ci * k + kk;
                let mut row = cols.row_mut(row_idx);
                let row = row.as_slice_mut().expect("col rows are contiguous");
                // valid t: 0 <= t*stride + kk - pad < t_in
                let t_lo = (pad.saturating_sub(kk)).div_ceil(stride).min(t_out);
                let t_hi = if t_in + pad > kk {
                    ((t_in + pad - kk - 1) / stride + 1).min(t_out)
                } else {
                    0
                };
                for t in t_lo..t_hi {
                    row[bi * t_out + t] = src[t * stride + kk - pad];
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatter-add column gradients back onto the input.
fn col2im(
    grad_cols: &Array2<f64>,
    shape: (usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
    t_out: usize,
) -> Array3<f64> {
    let (b, c, t_in) = shape;
    let mut grad_x = Array3::<f64>::zeros(shape);
    for bi in 0..b {
        for ci in 0..c {
            let mut dst = grad_x.index_axis_mut(Axis(0), bi);
            let mut dst = dst.row_mut(ci);
            let dst = dst.as_slice_mut().expect("grad rows are contiguous");
            for kk in 0..k {
                let src = grad_cols.row(ci * k + kk);
                let src = src.to_slice().expect("col rows are contiguous");
                let t_lo = (pad.saturating_sub(kk)).div_ceil(stride).min(t_out);
                let t_hi = if t_in + pad > kk {
                    ((t_in + pad - kk - 1) / stride + 1).min(t_out)
                } else {
                    0
                };
                for t in t_lo..t_hi {
                    dst[t * stride + kk - pad] += src[bi * t_out + t];
                }
            }
        }
    }
    grad_x
}

/// 1-d convolution with "same" padding. Stride 1 preserves length; stride s
/// divides it exactly (input length must be a multiple of s).
pub struct Conv1d {
    pub name: String,
    pub weight: Array3<f64>, // (c_out, c_in, k)
    pub bias: Array1<f64>,
    pub grad_weight: Array3<f64>,
    pub grad_bias: Array1<f64>,
    pub stride: usize,
    cached_input: Option<Array3<f64>>,
}

impl Conv1d {
    pub fn new(
        name: impl Into<String>,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(k % 2 == 1, "kernel must be odd for same padding");
        let bound = (1.0 / (c_in * k) as f64).sqrt();
        let weight =
            Array3::from_shape_fn((c_out, c_in, k), |_| rng.random_range(-bound..bound));
        Self {
            name: name.into(),
            weight,
            bias: Array1::zeros(c_out),
            grad_weight: Array3::zeros((c_out, c_in, k)),
            grad_bias: Array1::zeros(c_out),
            stride,
            cached_input: None,
        }
    }

    fn pad(&self) -> usize {
        (self.weight.dim().2 - 1) / 2
    }

    pub fn out_len(&self, t_in: usize) -> usize {
        assert!(t_in % self.stride == 0, "length {t_in} not divisible by stride");
        t_in / self.stride
    }

    pub fn forward(&mut self, x: &Array3<f64>, train: bool) -> Array3<f64> {
        let (b, c_in, t_in) = x.dim();
        let (c_out, c_in_w, k) = self.weight.dim();
        assert_eq!(c_in, c_in_w, "{}: input has {c_in} channels, expected {c_in_w}", self.name);
        let t_out = self.out_len(t_in);
        let cols = im2col(x, k, self.stride, self.pad(), t_out);
        let w_flat = self
            .weight
            .view()
            .into_shape_with_order((c_out, c_in * k))
            .expect("weight is contiguous");
        let mut out_flat = w_flat.dot(&cols); // (c_out, b*t_out)
        for (mut row, &bias) in out_flat.outer_iter_mut().zip(self.bias.iter()) {
            row += bias;
        }
        if train {
            self.cached_input = Some(x.clone());
        }
        let mut out = Array3::zeros((b, c_out, t_out));
        for bi in 0..b {
            out.index_axis_mut(Axis(0), bi)
                .assign(&out_flat.slice(ndarray::s![.., bi * t_out..(bi + 1) * t_out]));
        }
        out
    }

    pub fn backward(&mut self, grad_out: &Array3<f64>) -> Array3<f64> {
        let x = self
            .cached_input
            .take()
            .expect("backward called without a cached forward");
        let (b, c_in, t_in) = x.dim();
        let (c_out, _, k) = self.weight.dim();
        let t_out = grad_out.dim().2;
        assert_eq!(grad_out.dim(), (b, c_out, t_out), "{}: bad grad shape", self.name);

        let mut g_flat = Array2::<f64>::zeros((c_out, b * t_out));
        for bi in 0..b {
            g_flat
                .slice_mut(ndarray::s![.., bi * t_out..(bi + 1) * t_out])
                .assign(&grad_out.index_axis(Axis(0), bi));
        }
        for (gb, row) in self.grad_bias.iter_mut().zip(g_flat.outer_iter()) {
            *gb += row.sum();
        }
        let cols = im2col(&x, k, self.stride, self.pad(), t_out);
        let gw_flat = g_flat.dot(&cols.t()); // (c_out, c_in*k)
        let gw = gw_flat
            .into_shape_with_order((c_out, c_in, k))
            .expect("contiguous");
        self.grad_weight += &gw;
        let w_flat = self
            .weight
            .view()
            .into_shape_with_order((c_out, c_in * k))
            .expect("weight is contiguous");
        let grad_cols = w_flat.t().dot(&g_flat); // (c_in*k, b*t_out)
        col2im(&grad_cols, (b, c_in, t_in), k, self.stride, self.pad(), t_out)
    }
}

impl HasParams for Conv1d {
    fn visit_params(&mut self, visitor: &mut dyn ParamVisitor) {
        visitor.visit(
            &format!("{}.weight", self.name),
            self.weight.view_mut().into_dyn(),
            self.grad_weight.view_mut().into_dyn(),
        );
        visitor.visit(
            &format!("{}.bias", self.name),
            self.bias.view_mut().into_dyn(),
            self.grad_bias.view_mut().into_dyn(),
        );
    }
}

pub const LEAKY_SLOPE: f64 = 0.01;

/// Leaky rectifier, slope 0.01 on the negative side.
#[derive(Default)]
pub struct LeakyRelu {
    cached_factor: Option<Array3<f64>>,
}

impl LeakyRelu {
    pub fn forward(&mut self, x: &Array3<f64>, train: bool) -> Array3<f64> {
        let factor = x.mapv(|v| if v > 0.0 { 1.0 } else { LEAKY_SLOPE });
        let out = x * &factor;
        if train {
            self.cached_factor = Some(factor);
        }
        out
    }

    pub fn backward(&mut self, grad_out: &Array3<f64>) -> Array3<f64> {
        let factor = self
            .cached_factor
            .take()
            .expect("backward called without a cached forward");
        grad_out * &factor
    }
}

/// Residual bottleneck block: kernel-1 reduce (C -> C_r), kernel-k conv,
/// kernel-1 expand (C_r -> C), each followed by a leaky rectifier, plus an
/// identity shortcut around the stack. Output shape equals input shape.
pub struct Bottleneck {
    reduce: Conv1d,
    act1: LeakyRelu,
    conv: Conv1d,
    act2: LeakyRelu,
    expand: Conv1d,
    act3: LeakyRelu,
}

impl Bottleneck {
    pub fn new(name: &str, channels: usize, reduced: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            reduce: Conv1d::new(format!("{name}.reduce"), channels, reduced, 1, 1, rng),
            act1: LeakyRelu::default(),
            conv: Conv1d::new(format!("{name}.conv"), reduced, reduced, k, 1, rng),
            act2: LeakyRelu::default(),
            expand: Conv1d::new(format!("{name}.expand"), reduced, channels, 1, 1, rng),
            act3: LeakyRelu::default(),
        }
    }

    pub fn forward(&mut self, x: &Array3<f64>, train: bool) -> Array3<f64> {
        let h = self.act1.forward(&self.reduce.forward(x, train), train);
        let h = self.act2.forward(&self.conv.forward(&h, train), train);
        let h = self.act3.forward(&self.expand.forward(&h, train), train);
        debug_assert_eq!(h.dim(), x.dim());
        h + x
    }

    pub fn backward(&mut self, grad_out: &Array3<f64>) -> Array3<f64> {
        let g = self.expand.backward(&self.act3.backward(grad_out));
        let g = self.conv.backward(&self.act2.backward(&g));
        let g = self.reduce.backward(&self.act1.backward(&g));
        g + grad_out
    }
}

impl HasParams for Bottleneck {
    fn visit_params(&mut self, visitor: &mut dyn ParamVisitor) {
        self.reduce.visit_params(visitor);
        self.conv.visit_params(visitor);
        self.expand.visit_params(visitor);
    }
}

/// Sub-pixel upsampling: interlace channel pairs into doubled length,
/// (B, C, T) -> (B, C/2, 2T) with out[c, 2t] = in[2c, t], out[c, 2t+1] = in[2c+1, t].
pub fn subpixel_forward(x: &Array3<f64>) -> Array3<f64> {
    let (b, c, t) = x.dim();
    assert!(c % 2 == 0, "subpixel upsampling needs an even channel count, got {c}");
    let mut out = Array3::zeros((b, c / 2, 2 * t));
    for bi in 0..b {
        for co in 0..c / 2 {
            for ti in 0..t {
                out[(bi, co, 2 * ti)] = x[(bi, 2 * co, ti)];
                out[(bi, co, 2 * ti + 1)] = x[(bi, 2 * co + 1, ti)];
            }
        }
    }
    out
}

/// Adjoint of [`subpixel_forward`]: (B, C/2, 2T) gradients back to (B, C, T).
pub fn subpixel_backward(grad_out: &Array3<f64>, in_channels: usize) -> Array3<f64> {
    let (b, c_half, t2) = grad_out.dim();
    assert_eq!(c_half * 2, in_channels);
    assert!(t2 % 2 == 0);
    let t = t2 / 2;
    let mut grad_x = Array3::zeros((b, in_channels, t));
    for bi in 0..b {
        for co in 0..c_half {
            for ti in 0..t {
                grad_x[(bi, 2 * co, ti)] = grad_out[(bi, co, 2 * ti)];
                grad_x[(bi, 2 * co + 1, ti)] = grad_out[(bi, co, 2 * ti + 1)];
            }
        }
    }
    grad_x
}

/// Adam optimizer keyed by parameter name, so the state survives model
/// traversal order changes only if names stay stable (they do).
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step_count: u64,
    state: HashMap<String, (ndarray::ArrayD<f64>, ndarray::ArrayD<f64>)>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step_count: 0,
            state: HashMap::new(),
        }
    }

    pub fn step(&mut self, model: &mut dyn HasParams) {
        self.step_count += 1;
        struct Step<'a> {
            opt: &'a mut Adam,
        }
        impl ParamVisitor for Step<'_> {
            fn visit(
                &mut self,
                name: &str,
                mut value: ArrayViewMutD<'_, f64>,
                grad: ArrayViewMutD<'_, f64>,
            ) {
                let (m, v) = self
                    .opt
                    .state
                    .entry(name.to_string())
                    .or_insert_with(|| {
                        (
                            ndarray::ArrayD::zeros(value.raw_dim()),
                            ndarray::ArrayD::zeros(value.raw_dim()),
                        )
                    });
                let t = self.opt.step_count as i32;
                let bc1 = 1.0 - self.opt.beta1.powi(t);
                let bc2 = 1.0 - self.opt.beta2.powi(t);
                ndarray::Zip::from(&mut value)
                    .and(&grad)
                    .and(m)
                    .and(v)
                    .for_each(|p, &g, m, v| {
                        *m = self.opt.beta1 * *m + (1.0 - self.opt.beta1) * g;
                        *v = self.opt.beta2 * *v + (1.0 - self.opt.beta2) * g * g;
                        let m_hat = *m / bc1;
                        let v_hat = *v / bc2;
                        *p -= self.opt.lr * m_hat / (v_hat.sqrt() + self.opt.eps);
                    });
            }
        }
        model.visit_params(&mut Step { opt: self });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// Sum-of-squares scalar head for finite-difference checks.
    fn sq_loss(y: &Array3<f64>) -> f64 {
        y.iter().map(|v| v * v).sum()
    }

    #[test]
    fn conv_matches_hand_computed_example() {
        let mut r = rng(0);
        let mut conv = Conv1d::new("c", 1, 1, 3, 1, &mut r);
        conv.weight = Array3::from_shape_vec((1, 1, 3), vec![1.0, 2.0, 3.0]).unwrap();
        conv.bias = Array1::from_vec(vec![0.5]);
        let x = Array3::from_shape_vec((1, 1, 4), vec![1.0, 0.0, -1.0, 2.0]).unwrap();
        let y = conv.forward(&x, false);
        // same padding: y[t] = 1*x[t-1] + 2*x[t] + 3*x[t+1] + 0.5
        let expected = [
            2.0 * 1.0 + 3.0 * 0.0 + 0.5,
            1.0 * 1.0 + 2.0 * 0.0 + 3.0 * -1.0 + 0.5,
            1.0 * 0.0 + 2.0 * -1.0 + 3.0 * 2.0 + 0.5,
            1.0 * -1.0 + 2.0 * 2.0 + 0.5,
        ];
        for (t, &e) in expected.iter().enumerate() {
            assert!((y[(0, 0, t)] - e).abs() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn strided_conv_halves_length() {
        let mut r = rng(1);
        let mut conv = Conv1d::new("c", 3, 5, 9, 2, &mut r);
        let x = Array3::from_shape_fn((2, 3, 16), |(b, c, t)| (b + c + t) as f64 * 0.1);
        let y = conv.forward(&x, false);
        assert_eq!(y.dim(), (2, 5, 8));
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        for stride in [1usize, 2] {
            let mut r = rng(2);
            let mut conv = Conv1d::new("c", 2, 3, 3, stride, &mut r);
            let x = Array3::from_shape_fn((2, 2, 8), |_| r.random_range(-1.0..1.0));

            let y = conv.forward(&x, true);
            let grad_out = y.mapv(|v| 2.0 * v); // d(sum y^2)/dy
            let grad_x = conv.backward(&grad_out);

            let eps = 1e-6;
            // input gradient
            for idx in [(0, 0, 0), (1, 1, 3), (0, 1, 7)] {
                let mut xp = x.clone();
                xp[idx] += eps;
                let lp = sq_loss(&conv.forward(&xp, false));
                let mut xm = x.clone();
                xm[idx] -= eps;
                let lm = sq_loss(&conv.forward(&xm, false));
                let fd = (lp - lm) / (2.0 * eps);
                assert!(
                    (grad_x[idx] - fd).abs() / fd.abs().max(1e-8) < 1e-5,
                    "stride {stride} input idx {idx:?}: {} vs {fd}",
                    grad_x[idx]
                );
            }
            // weight gradient
            for idx in [(0, 0, 0), (2, 1, 2)] {
                let orig = conv.weight[idx];
                conv.weight[idx] = orig + eps;
                let lp = sq_loss(&conv.forward(&x, false));
                conv.weight[idx] = orig - eps;
                let lm = sq_loss(&conv.forward(&x, false));
                conv.weight[idx] = orig;
                let fd = (lp - lm) / (2.0 * eps);
                assert!(
                    (conv.grad_weight[idx] - fd).abs() / fd.abs().max(1e-8) < 1e-5,
                    "stride {stride} weight idx {idx:?}"
                );
            }
        }
    }

    #[test]
    fn bottleneck_preserves_shape_and_grads_check() {
        let mut r = rng(3);
        let mut block = Bottleneck::new("b", 4, 2, 3, &mut r);
        let x = Array3::from_shape_fn((2, 4, 6), |_| r.random_range(-1.0..1.0));
        let y = block.forward(&x, true);
        assert_eq!(y.dim(), x.dim());

        let grad_out = y.mapv(|v| 2.0 * v);
        let grad_x = block.backward(&grad_out);
        let eps = 1e-6;
        for idx in [(0, 0, 0), (1, 3, 5)] {
            let mut xp = x.clone();
            xp[idx] += eps;
            let lp = sq_loss(&block.forward(&xp, false));
            let mut xm = x.clone();
            xm[idx] -= eps;
            let lm = sq_loss(&block.forward(&xm, false));
            let fd = (lp - lm) / (2.0 * eps);
            assert!(
                (grad_x[idx] - fd).abs() / fd.abs().max(1e-8) < 1e-5,
                "idx {idx:?}: {} vs {fd}",
                grad_x[idx]
            );
        }
    }

    #[test]
    fn subpixel_interlaces_channel_pairs() {
        let x = Array3::from_shape_vec((1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let y = subpixel_forward(&x);
        assert_eq!(y.dim(), (1, 1, 4));
        assert_eq!(y.as_slice().unwrap(), &[1.0, 3.0, 2.0, 4.0]);

        let x = Array3::from_shape_fn((1, 30, 256), |(_, c, t)| (c * 256 + t) as f64);
        let y = subpixel_forward(&x);
        assert_eq!(y.dim(), (1, 15, 512));
        assert!((x.sum() - y.sum()).abs() < 1e-9, "permutation preserves the sum");
    }

    #[test]
    fn subpixel_backward_is_the_adjoint() {
        let mut r = rng(4);
        let x = Array3::from_shape_fn((2, 4, 5), |_| r.random_range(-1.0..1.0));
        let y = subpixel_forward(&x);
        let g = Array3::from_shape_fn(y.dim(), |_| r.random_range(-1.0..1.0));
        let gx = subpixel_backward(&g, 4);
        // <g, F(x)> == <F^T(g), x> for a linear permutation
        let lhs: f64 = (&g * &y).sum();
        let rhs: f64 = (&gx * &x).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn adam_minimizes_a_quadratic() {
        let mut r = rng(5);
        let mut conv = Conv1d::new("c", 1, 1, 1, 1, &mut r);
        let x = Array3::from_shape_vec((1, 1, 1), vec![1.0]).unwrap();
        let mut adam = Adam::new(0.05);
        let mut first = None;
        let mut last = 0.0;
        for _ in 0..200 {
            conv.zero_grads();
            let y = conv.forward(&x, true);
            let loss = (y[(0, 0, 0)] - 3.0).powi(2);
            let grad = Array3::from_shape_vec((1, 1, 1), vec![2.0 * (y[(0, 0, 0)] - 3.0)]).unwrap();
            conv.backward(&grad);
            adam.step(&mut conv);
            first.get_or_insert(loss);
            last = loss;
        }
        assert!(last < first.unwrap() * 1e-3, "loss {last} from {:?}", first);
    }

    #[test]
    fn param_names_and_counts() {
        let mut r = rng(6);
        let mut block = Bottleneck::new("enc.block0", 4, 2, 3, &mut r);
        struct Names(Vec<(String, usize)>);
        impl ParamVisitor for Names {
            fn visit(&mut self, name: &str, value: ArrayViewMutD<'_, f64>, _: ArrayViewMutD<'_, f64>) {
                self.0.push((name.to_string(), value.len()));
            }
        }
        let mut names = Names(Vec::new());
        block.visit_params(&mut names);
        let expected = [
            ("enc.block0.reduce.weight", 2 * 4),
            ("enc.block0.reduce.bias", 2),
            ("enc.block0.conv.weight", 2 * 2 * 3),
            ("enc.block0.conv.bias", 2),
            ("enc.block0.expand.weight", 4 * 2),
            ("enc.block0.expand.bias", 4),
        ];
        assert_eq!(names.0.len(), expected.len());
        for ((name, len), (ename, elen)) in names.0.iter().zip(expected.iter()) {
            assert_eq!(name, ename);
            assert_eq!(len, elen);
        }
        assert_eq!(block.param_count(), 8 + 2 + 12 + 2 + 8 + 4);
    }
}
