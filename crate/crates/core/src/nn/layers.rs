//! Layer primitives with explicit forward/backward passes.

use rand::Rng;

use super::param::{Module, Param};
use super::tensor::FeatureMap;
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<T> {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// `out_channels × (in_channels · kernel · kernel)`
    pub weight: Param<T>,
    pub bias: Param<T>,
}

/// Saved activations of a convolution forward pass.
#[derive(Debug, Clone)]
pub struct ConvCache<T> {
    cols: Vec<T>,
    in_dims: (usize, usize, usize),
}

impl<T: Scalar> Conv2d<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        leaky_slope: f64,
        rng: &mut R,
    ) -> Self {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let std = (2.0 / (fan_in * (1.0 + leaky_slope * leaky_slope))).sqrt();
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: kernel / 2,
            weight: Param::normal(
                format!("{name}.weight"),
                vec![out_channels, in_channels, kernel, kernel],
                std,
                rng,
            ),
            bias: Param::zeros(format!("{name}.bias"), vec![out_channels], false),
        }
    }

    pub fn output_dims(&self, height: usize, width: usize) -> (usize, usize) {
        let oh = (height + 2 * self.padding - self.kernel) / self.stride + 1;
        let ow = (width + 2 * self.padding - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn im2col(&self, x: &FeatureMap<T>, oh: usize, ow: usize) -> Vec<T> {
        let k = self.kernel;
        let p = oh * ow;
        let mut cols = vec![T::zero(); self.patch_len() * p];
        let pad = self.padding as isize;
        for c in 0..x.channels {
            let plane = x.channel(c);
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - pad;
                        if iy < 0 || iy >= x.height as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * x.width..(iy as usize + 1) * x.width];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - pad;
                            if ix >= 0 && ix < x.width as isize {
                                dst[oy * ow + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[T], dims: (usize, usize, usize), oh: usize, ow: usize) -> FeatureMap<T> {
        let (ch, h, w) = dims;
        let k = self.kernel;
        let p = oh * ow;
        let pad = self.padding as isize;
        let mut out = FeatureMap::zeros(ch, h, w);
        for c in 0..ch {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - pad;
                            if ix >= 0 && ix < w as isize {
                                let v = out.at_mut(c, iy as usize, ix as usize);
                                *v = *v + src[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> (FeatureMap<T>, ConvCache<T>) {
        assert_eq!(x.channels, self.in_channels, "{}: channel mismatch", self.weight.name);
        let (oh, ow) = self.output_dims(x.height, x.width);
        let cols = self.im2col(x, oh, ow);
        let p = oh * ow;
        let mut out = vec![T::zero(); self.out_channels * p];
        T::gemm(
            self.out_channels,
            self.patch_len(),
            p,
            &self.weight.value,
            false,
            &cols,
            false,
            &mut out,
            false,
        );
        for (o, chunk) in out.chunks_mut(p).enumerate() {
            let b = self.bias.value[o];
            chunk.iter_mut().for_each(|v| *v = *v + b);
        }
        (
            FeatureMap::from_vec(self.out_channels, oh, ow, out),
            ConvCache {
                cols,
                in_dims: x.dims(),
            },
        )
    }

    /// Accumulates parameter gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &ConvCache<T>, grad_out: &FeatureMap<T>) -> FeatureMap<T> {
        let (oh, ow) = (grad_out.height, grad_out.width);
        let p = oh * ow;
        let k = self.patch_len();
        T::gemm(
            self.out_channels,
            p,
            k,
            &grad_out.data,
            false,
            &cache.cols,
            true,
            &mut self.weight.grad,
            true,
        );
        for (o, chunk) in grad_out.data.chunks(p).enumerate() {
            let s: T = chunk.iter().copied().sum();
            self.bias.grad[o] = self.bias.grad[o] + s;
        }
        let mut dcols = vec![T::zero(); k * p];
        T::gemm(
            k,
            self.out_channels,
            p,
            &self.weight.value,
            true,
            &grad_out.data,
            false,
            &mut dcols,
            false,
        );
        self.col2im(&dcols, cache.in_dims, oh, ow)
    }
}

impl<T: Scalar> Module<T> for Conv2d<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Param<T>,
    pub bias: Param<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new<R: Rng + ?Sized>(
        name: &str,
        in_features: usize,
        out_features: usize,
        leaky_slope: f64,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / (in_features as f64 * (1.0 + leaky_slope * leaky_slope))).sqrt();
        Self {
            in_features,
            out_features,
            weight: Param::normal(format!("{name}.weight"), vec![out_features, in_features], std, rng),
            bias: Param::zeros(format!("{name}.bias"), vec![out_features], false),
        }
    }

    pub fn forward(&self, x: &[T]) -> Vec<T> {
        assert_eq!(x.len(), self.in_features, "{}: input size", self.weight.name);
        let mut y = self.bias.value.clone();
        T::gemm(
            self.out_features,
            self.in_features,
            1,
            &self.weight.value,
            false,
            x,
            false,
            &mut y,
            true,
        );
        y
    }

    pub fn backward(&mut self, x: &[T], grad_out: &[T]) -> Vec<T> {
        T::gemm(
            self.out_features,
            1,
            self.in_features,
            grad_out,
            false,
            x,
            false,
            &mut self.weight.grad,
            true,
        );
        for (g, &d) in self.bias.grad.iter_mut().zip(grad_out) {
            *g = *g + d;
        }
        let mut dx = vec![T::zero(); self.in_features];
        T::gemm(
            self.in_features,
            self.out_features,
            1,
            &self.weight.value,
            true,
            grad_out,
            false,
            &mut dx,
            false,
        );
        dx
    }
}

impl<T: Scalar> Module<T> for Linear<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

pub fn leaky_relu<T: Scalar>(x: &mut [T], slope: T) {
    for v in x {
        if *v < T::zero() {
            *v = *v * slope;
        }
    }
}

/// Backward through a leaky rectifier given its *output*.
pub fn leaky_relu_backward<T: Scalar>(output: &[T], grad: &mut [T], slope: T) {
    for (g, &y) in grad.iter_mut().zip(output) {
        if y < T::zero() {
            *g = *g * slope;
        }
    }
}

/// 2×2 max pooling with stride 2 (floor on odd sizes). Returns the flat
/// argmax index of every output cell.
pub fn max_pool2<T: Scalar>(x: &FeatureMap<T>) -> (FeatureMap<T>, Vec<usize>) {
    let (oh, ow) = (x.height / 2, x.width / 2);
    let mut out = FeatureMap::zeros(x.channels, oh, ow);
    let mut arg = vec![0usize; x.channels * oh * ow];
    for c in 0..x.channels {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = x.index(c, 2 * oy, 2 * ox);
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = x.index(c, 2 * oy + dy, 2 * ox + dx);
                    if x.data[i] > x.data[best] {
                        best = i;
                    }
                }
                let o = out.index(c, oy, ox);
                out.data[o] = x.data[best];
                arg[o] = best;
            }
        }
    }
    (out, arg)
}

pub fn max_pool2_backward<T: Scalar>(
    in_dims: (usize, usize, usize),
    argmax: &[usize],
    grad_out: &FeatureMap<T>,
) -> FeatureMap<T> {
    let mut g = FeatureMap::zeros(in_dims.0, in_dims.1, in_dims.2);
    for (&i, &d) in argmax.iter().zip(&grad_out.data) {
        g.data[i] = g.data[i] + d;
    }
    g
}

/// Inverted dropout; returns the keep mask (already scaled).
pub fn dropout<T: Scalar, R: Rng + ?Sized>(x: &mut [T], p: f64, rng: &mut R) -> Vec<T> {
    let scale = T::lit(1.0 / (1.0 - p));
    let mask: Vec<T> = x
        .iter()
        .map(|_| if rng.random::<f64>() < p { T::zero() } else { scale })
        .collect();
    for (v, &m) in x.iter_mut().zip(&mask) {
        *v = *v * m;
    }
    mask
}

/// Group normalization over `(channels in group) × H × W`, with a per-channel
/// affine transform. Independent of the batch, so it behaves the same for
/// one image or many.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupNorm<T> {
    pub groups: usize,
    pub channels: usize,
    pub eps: f64,
    pub gamma: Param<T>,
    pub beta: Param<T>,
}

#[derive(Debug, Clone)]
pub struct GroupNormCache<T> {
    normalized: FeatureMap<T>,
    inv_std: Vec<T>,
}

impl<T: Scalar> GroupNorm<T> {
    pub fn new(name: &str, groups: usize, channels: usize) -> Self {
        assert!(
            groups > 0 && channels.is_multiple_of(groups),
            "channels must divide into groups"
        );
        let mut gamma = Param::zeros(format!("{name}.gamma"), vec![channels], false);
        gamma.value.iter_mut().for_each(|g| *g = T::one());
        Self {
            groups,
            channels,
            eps: 1e-5,
            gamma,
            beta: Param::zeros(format!("{name}.beta"), vec![channels], false),
        }
    }

    pub fn forward(&self, x: &FeatureMap<T>) -> (FeatureMap<T>, GroupNormCache<T>) {
        let plane = x.plane();
        let span = (self.channels / self.groups) * plane;
        let n = T::lit(span as f64);
        let mut normalized = FeatureMap::zeros_like(x);
        let mut inv_std = Vec::with_capacity(self.groups);
        for g in 0..self.groups {
            let src = &x.data[g * span..(g + 1) * span];
            let mean = src.iter().copied().sum::<T>() / n;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let k = T::one() / (var + T::lit(self.eps)).sqrt();
            for (o, &v) in normalized.data[g * span..(g + 1) * span].iter_mut().zip(src) {
                *o = (v - mean) * k;
            }
            inv_std.push(k);
        }
        let mut y = normalized.clone();
        for c in 0..self.channels {
            let (ga, be) = (self.gamma.value[c], self.beta.value[c]);
            y.data[c * plane..(c + 1) * plane]
                .iter_mut()
                .for_each(|v| *v = *v * ga + be);
        }
        (y, GroupNormCache { normalized, inv_std })
    }

    pub fn backward(&mut self, cache: &GroupNormCache<T>, grad_out: &FeatureMap<T>) -> FeatureMap<T> {
        let xhat = &cache.normalized;
        let plane = xhat.plane();
        let per_group = self.channels / self.groups;
        let span = per_group * plane;
        let n = T::lit(span as f64);
        let mut dxhat = grad_out.clone();
        for c in 0..self.channels {
            let range = c * plane..(c + 1) * plane;
            let (mut dg, mut db) = (T::zero(), T::zero());
            for (&g, &h) in grad_out.data[range.clone()].iter().zip(&xhat.data[range.clone()]) {
                dg = dg + g * h;
                db = db + g;
            }
            self.gamma.grad[c] = self.gamma.grad[c] + dg;
            self.beta.grad[c] = self.beta.grad[c] + db;
            let ga = self.gamma.value[c];
            dxhat.data[range].iter_mut().for_each(|v| *v = *v * ga);
        }
        let mut dx = FeatureMap::zeros_like(grad_out);
        for g in 0..self.groups {
            let r = g * span..(g + 1) * span;
            let d = &dxhat.data[r.clone()];
            let h = &xhat.data[r.clone()];
            let sum_d = d.iter().copied().sum::<T>();
            let sum_dh = d.iter().zip(h).map(|(&a, &b)| a * b).sum::<T>();
            let k = cache.inv_std[g] / n;
            for ((o, &di), &hi) in dx.data[r].iter_mut().zip(d).zip(h) {
                *o = k * (n * di - sum_d - hi * sum_dh);
            }
        }
        dx
    }
}

impl<T: Scalar> Module<T> for GroupNorm<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Param<T>)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn naive_conv(conv: &Conv2d<f64>, x: &FeatureMap<f64>) -> FeatureMap<f64> {
        let (oh, ow) = conv.output_dims(x.height, x.width);
        let k = conv.kernel;
        let mut out = FeatureMap::zeros(conv.out_channels, oh, ow);
        for o in 0..conv.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = conv.bias.value[o];
                    for c in 0..conv.in_channels {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * conv.stride + ky) as isize - conv.padding as isize;
                                let ix = (ox * conv.stride + kx) as isize - conv.padding as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < x.height && (ix as usize) < x.width {
                                    let wi = ((o * conv.in_channels + c) * k + ky) * k + kx;
                                    s += conv.weight.value[wi] * x.at(c, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    *out.at_mut(o, oy, ox) = s;
                }
            }
        }
        out
    }

    fn random_map(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> FeatureMap<f64> {
        FeatureMap::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random::<f64>() - 0.5).collect())
    }

    #[test]
    fn conv_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for stride in [1, 2] {
            let mut conv = Conv2d::<f64>::new("c", 3, 4, 3, stride, 0.1, &mut rng);
            conv.bias.value = vec![0.1, -0.2, 0.3, 0.0];
            let x = random_map(&mut rng, 3, 7, 6);
            let (y, _) = conv.forward(&x);
            let want = naive_conv(&conv, &x);
            assert_eq!(y.dims(), want.dims());
            for (a, b) in y.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut conv = Conv2d::<f64>::new("c", 2, 3, 3, 2, 0.1, &mut rng);
        let x = random_map(&mut rng, 2, 6, 5);
        let (y, cache) = conv.forward(&x);
        let upstream = random_map(&mut rng, y.channels, y.height, y.width);
        let objective = |conv: &Conv2d<f64>, x: &FeatureMap<f64>| -> f64 {
            let (y, _) = conv.forward(x);
            y.data.iter().zip(&upstream.data).map(|(a, b)| a * b).sum()
        };
        let dx = conv.backward(&cache, &upstream);
        let eps = 1e-6;
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            let fd = (objective(&conv, &xp) - objective(&conv, &xm)) / (2.0 * eps);
            assert!((fd - dx.data[i]).abs() < 1e-7, "dx[{i}] {fd} vs {}", dx.data[i]);
        }
        for i in 0..conv.weight.len() {
            let mut cp = conv.clone();
            cp.weight.value[i] += eps;
            let mut cm = conv.clone();
            cm.weight.value[i] -= eps;
            let fd = (objective(&cp, &x) - objective(&cm, &x)) / (2.0 * eps);
            assert!((fd - conv.weight.grad[i]).abs() < 1e-7);
        }
        for o in 0..3 {
            let s: f64 = upstream.channel(o).iter().sum();
            assert!((s - conv.bias.grad[o]).abs() < 1e-12);
        }
    }

    #[test]
    fn linear_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut lin = Linear::<f64>::new("fc", 5, 3, 0.1, &mut rng);
        let x: Vec<f64> = (0..5).map(|i| i as f64 * 0.3 - 0.6).collect();
        let up = [0.5, -1.0, 2.0];
        let f = |l: &Linear<f64>, x: &[f64]| -> f64 { l.forward(x).iter().zip(&up).map(|(a, b)| a * b).sum() };
        let dx = lin.backward(&x, &up);
        let eps = 1e-6;
        for i in 0..5 {
            let mut xp = x.clone();
            xp[i] += eps;
            let mut xm = x.clone();
            xm[i] -= eps;
            assert!(((f(&lin, &xp) - f(&lin, &xm)) / (2.0 * eps) - dx[i]).abs() < 1e-8);
        }
        for i in 0..lin.weight.len() {
            let mut lp = lin.clone();
            lp.weight.value[i] += eps;
            let mut lm = lin.clone();
            lm.weight.value[i] -= eps;
            assert!(((f(&lp, &x) - f(&lm, &x)) / (2.0 * eps) - lin.weight.grad[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let x = FeatureMap::from_vec(1, 2, 4, vec![1.0, 5.0, 2.0, 2.0, 3.0, 4.0, 9.0, 0.0]);
        let (y, arg) = max_pool2(&x);
        assert_eq!(y.data, vec![5.0, 9.0]);
        let g = max_pool2_backward(x.dims(), &arg, &FeatureMap::from_vec(1, 1, 2, vec![1.0, 2.0]));
        assert_eq!(g.data, vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 2.0, 0.0]);
    }

    #[test]
    fn group_norm_backward_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut gn = GroupNorm::<f64>::new("gn", 2, 4);
        gn.gamma.value = vec![1.2, 0.7, -0.5, 1.0];
        gn.beta.value = vec![0.1, 0.0, -0.3, 0.2];
        let x = random_map(&mut rng, 4, 3, 3);
        let up = random_map(&mut rng, 4, 3, 3);
        let f = |gn: &GroupNorm<f64>, x: &FeatureMap<f64>| -> f64 {
            gn.forward(x).0.data.iter().zip(&up.data).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = gn.forward(&x);
        let dx = gn.backward(&cache, &up);
        let eps = 1e-6;
        for i in 0..x.data.len() {
            let mut xp = x.clone();
            xp.data[i] += eps;
            let mut xm = x.clone();
            xm.data[i] -= eps;
            let fd = (f(&gn, &xp) - f(&gn, &xm)) / (2.0 * eps);
            assert!((fd - dx.data[i]).abs() < 1e-6, "dx[{i}] {fd} vs {}", dx.data[i]);
        }
        for c in 0..4 {
            let mut gp = gn.clone();
            gp.gamma.value[c] += eps;
            let mut gm = gn.clone();
            gm.gamma.value[c] -= eps;
            let fd = (f(&gp, &x) - f(&gm, &x)) / (2.0 * eps);
            assert!((fd - gn.gamma.grad[c]).abs() < 1e-6);
        }
    }

    #[test]
    fn group_norm_output_is_standardized() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gn = GroupNorm::<f64>::new("gn", 1, 2);
        let x = random_map(&mut rng, 2, 4, 4);
        let (y, _) = gn.forward(&x);
        let mean = y.data.iter().sum::<f64>() / 32.0;
        let var = y.data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 32.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-3);
    }
}
