//! Layer primitives with explicit caches. Forward passes return the output
//! and whatever backward needs; backward accumulates parameter gradients
//! and returns the input gradient.

use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::tensor::Tensor;

const NORM_EPS: f64 = 1e-5;

/// A trainable array with its gradient and Adam moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub(crate) m: Vec<f32>,
    pub(crate) v: Vec<f32>,
    pub(crate) steps: u64,
}

impl Param {
    pub fn new(value: Vec<f32>) -> Self {
        let n = value.len();
        Param {
            value,
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
            steps: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.value.len()
    }

    pub fn is_empty(&self) -> bool {
        self.value.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }

    /// Kaiming-normal weights drawn from their own stream.
    fn kaiming(n: usize, fan_in: usize, rng: &mut ChaCha8Rng) -> Self {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        Param::new((0..n).map(|_| normal.sample(rng) as f32).collect())
    }
}

/// Stream for one layer's initial weights.
pub(crate) fn init_stream(seed: u64, ordinal: u64, replica: u64) -> ChaCha8Rng {
    const SALT_INIT: u64 = 0x1417;
    crate::rng::stream(seed, SALT_INIT, ordinal << 16 | replica)
}

const TAPS: usize = 27;

const LANES: usize = 8;
const OUT_BLOCK: usize = 4;

#[inline]
fn axpy(dst: &mut [f32], w: f32, src: &[f32]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += w * s);
}

#[inline]
fn dot_f32(a: &[f32], b: &[f32]) -> f32 {
    let mut lanes = [0.0f32; LANES];
    let (ca, cb) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            lanes[l] += x[l] * y[l];
        }
    }
    lanes.iter().sum::<f32>() + tail
}

/// Channel planes copied into a zero border of `halo` voxels, with rows
/// widened to whole lanes so kernels never branch on edges.
struct Padded {
    data: Vec<f32>,
    channels: usize,
    /// Padded (z, y, x) extent of one channel.
    dims: [usize; 3],
}

impl Padded {
    fn new(t: &Tensor, halo: usize) -> Self {
        let [nz, ny, nx] = t.dims;
        let dims = [nz + 2 * halo, ny + 2 * halo, nx.div_ceil(LANES) * LANES + 2 * halo];
        let plane = dims.iter().product::<usize>();
        let mut data = vec![0.0; t.channels * plane];
        for c in 0..t.channels {
            let src = t.channel(c);
            for z in 0..nz {
                for y in 0..ny {
                    let at = c * plane + ((z + halo) * dims[1] + y + halo) * dims[2] + halo;
                    data[at..at + nx].copy_from_slice(&src[(z * ny + y) * nx..][..nx]);
                }
            }
        }
        Padded {
            data,
            channels: t.channels,
            dims,
        }
    }

    fn plane(&self) -> usize {
        self.dims.iter().product()
    }

    #[inline]
    fn row(&self, c: usize, z: usize, y: usize, x: usize, len: usize) -> &[f32] {
        let at = c * self.plane() + (z * self.dims[1] + y) * self.dims[2] + x;
        &self.data[at..at + len]
    }
}

/// Zero-padded 3x3x3 convolution of a halo-1 input, with the kernel given
/// as `w(out, in, tap)`.
fn conv3_blocked(src: &Padded, cout: usize, dims: [usize; 3], w: impl Fn(usize, usize, usize) -> f32) -> Tensor {
    let [nz, ny, nx] = dims;
    let n = nz * ny * nx;
    let cin = src.channels;
    let mut out = Tensor::zeros(cout, dims);
    for o0 in (0..cout).step_by(OUT_BLOCK) {
        let block: Vec<[f32; OUT_BLOCK]> = (0..cin * TAPS)
            .map(|it| std::array::from_fn(|k| if o0 + k < cout { w(o0 + k, it / TAPS, it % TAPS) } else { 0.0 }))
            .collect();
        for z in 0..nz {
            for y in 0..ny {
                for x0 in (0..nx).step_by(LANES) {
                    let mut acc = [[0.0f32; LANES]; OUT_BLOCK];
                    for i in 0..cin {
                        let ws = &block[i * TAPS..(i + 1) * TAPS];
                        for dz in 0..3 {
                            for dy in 0..3 {
                                let row = src.row(i, z + dz, y + dy, x0, LANES + 2);
                                for dx in 0..3 {
                                    let s: &[f32; LANES] = row[dx..dx + LANES].try_into().unwrap();
                                    let wk = ws[dz * 9 + dy * 3 + dx];
                                    for k in 0..OUT_BLOCK {
                                        for l in 0..LANES {
                                            acc[k][l] += wk[k] * s[l];
                                        }
                                    }
                                }
                            }
                        }
                    }
                    let len = LANES.min(nx - x0);
                    for (k, a) in acc.iter().enumerate().take(cout - o0) {
                        let at = (o0 + k) * n + (z * ny + y) * nx + x0;
                        out.data[at..at + len].copy_from_slice(&a[..len]);
                    }
                }
            }
        }
    }
    out
}

/// Zero-padded 3x3x3 convolution, `weight[(o * cin + i) * 27 + tap]`.
fn conv3(input: &Tensor, weight: &[f32], cout: usize) -> Tensor {
    let cin = input.channels;
    conv3_blocked(&Padded::new(input, 1), cout, input.dims, |o, i, t| weight[(o * cin + i) * TAPS + t])
}

/// Input gradient of [`conv3`]: the same convolution with the kernel
/// transposed over channels and flipped in space.
fn conv3_input_grad(grad: &Tensor, weight: &[f32], cin: usize) -> Tensor {
    conv3_blocked(&Padded::new(grad, 1), cin, grad.dims, |i, o, t| weight[(o * cin + i) * TAPS + TAPS - 1 - t])
}

/// Weight gradient of [`conv3`], accumulated into `dweight`.
fn conv3_weight_grad(input: &Tensor, grad: &Tensor, dweight: &mut [f32]) {
    let [nz, ny, nx] = grad.dims;
    let cin = input.channels;
    let cout = grad.channels;
    let src = Padded::new(input, 1);
    let g = Padded::new(grad, 0);
    for o0 in (0..cout).step_by(OUT_BLOCK) {
        let ob = OUT_BLOCK.min(cout - o0);
        for i in 0..cin {
            for tap in 0..TAPS {
                let (dz, dy, dx) = (tap / 9, tap / 3 % 3, tap % 3);
                let mut acc = [[0.0f32; LANES]; OUT_BLOCK];
                for z in 0..nz {
                    for y in 0..ny {
                        for x0 in (0..nx).step_by(LANES) {
                            let s: &[f32; LANES] = src.row(i, z + dz, y + dy, x0 + dx, LANES).try_into().unwrap();
                            for (k, a) in acc.iter_mut().enumerate().take(ob) {
                                let gr: &[f32; LANES] = g.row(o0 + k, z, y, x0, LANES).try_into().unwrap();
                                for l in 0..LANES {
                                    a[l] += gr[l] * s[l];
                                }
                            }
                        }
                    }
                }
                for (k, a) in acc.iter().enumerate().take(ob) {
                    dweight[((o0 + k) * cin + i) * TAPS + tap] += a.iter().sum::<f32>();
                }
            }
        }
    }
}

/// `out[o] = bias[o] + sum_i weight[o * cin + i] * input[i]`, per voxel.
fn pointwise(input: &Tensor, weight: &[f32], bias: &[f32]) -> Tensor {
    let cout = bias.len();
    let mut out = Tensor::zeros(cout, input.dims);
    for o in 0..cout {
        let dst = out.channel_mut(o);
        dst.fill(bias[o]);
        for i in 0..input.channels {
            axpy(dst, weight[o * input.channels + i], input.channel(i));
        }
    }
    out
}

/// 3x3x3 convolution (no bias), instance norm with affine scale and shift,
/// then ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock {
    pub cin: usize,
    pub cout: usize,
    pub weight: Param,
    pub gamma: Param,
    pub beta: Param,
}

pub struct ConvBlockCache {
    input: Tensor,
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
    output: Tensor,
}

impl ConvBlock {
    pub fn new(cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        ConvBlock {
            cin,
            cout,
            weight: Param::kaiming(cout * cin * TAPS, cin * TAPS, rng),
            gamma: Param::new(vec![1.0; cout]),
            beta: Param::new(vec![0.0; cout]),
        }
    }

    pub fn params(&self) -> [&Param; 3] {
        [&self.weight, &self.gamma, &self.beta]
    }

    pub fn params_mut(&mut self) -> [&mut Param; 3] {
        [&mut self.weight, &mut self.gamma, &mut self.beta]
    }

    pub fn forward(&self, input: Tensor) -> (Tensor, ConvBlockCache) {
        assert_eq!(input.channels, self.cin);
        let n = input.voxels();
        let mut out = conv3(&input, &self.weight.value, self.cout);

        let mut xhat = vec![0.0; self.cout * n];
        let mut inv_std = vec![0.0; self.cout];
        for c in 0..self.cout {
            let ch = out.channel_mut(c);
            let mean = ch.iter().map(|&v| v as f64).sum::<f64>() / n as f64;
            let var = ch.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + NORM_EPS).sqrt();
            inv_std[c] = inv as f32;
            let (g, b) = (self.gamma.value[c], self.beta.value[c]);
            for (i, v) in ch.iter_mut().enumerate() {
                let h = ((*v as f64 - mean) * inv) as f32;
                xhat[c * n + i] = h;
                *v = (g * h + b).max(0.0);
            }
        }
        let cache = ConvBlockCache {
            input,
            xhat,
            inv_std,
            output: out.clone(),
        };
        (out, cache)
    }

    /// Returns the input gradient unless `need_input_grad` is false.
    pub fn backward(&mut self, cache: ConvBlockCache, mut grad: Tensor, need_input_grad: bool) -> Option<Tensor> {
        let n = grad.voxels();
        for c in 0..self.cout {
            let out = cache.output.channel(c);
            let xhat = &cache.xhat[c * n..(c + 1) * n];
            let g = grad.channel_mut(c);
            let (mut sum_dy, mut sum_dy_xhat) = (0.0f64, 0.0f64);
            for i in 0..n {
                if out[i] <= 0.0 {
                    g[i] = 0.0;
                }
                sum_dy += g[i] as f64;
                sum_dy_xhat += g[i] as f64 * xhat[i] as f64;
            }
            self.beta.grad[c] += sum_dy as f32;
            self.gamma.grad[c] += sum_dy_xhat as f32;
            let scale = self.gamma.value[c] as f64 * cache.inv_std[c] as f64;
            let (mean_dy, mean_dy_xhat) = (sum_dy / n as f64, sum_dy_xhat / n as f64);
            for i in 0..n {
                g[i] = (scale * (g[i] as f64 - mean_dy - xhat[i] as f64 * mean_dy_xhat)) as f32;
            }
        }

        conv3_weight_grad(&cache.input, &grad, &mut self.weight.grad);
        need_input_grad.then(|| conv3_input_grad(&grad, &self.weight.value, self.cin))
    }
}

/// 1x1x1 convolution with bias producing class logits.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub cin: usize,
    pub classes: usize,
    pub weight: Param,
    pub bias: Param,
}

pub struct ClassifierCache {
    input: Tensor,
}

impl Classifier {
    pub fn new(cin: usize, classes: usize, rng: &mut ChaCha8Rng) -> Self {
        Classifier {
            cin,
            classes,
            weight: Param::kaiming(classes * cin, cin, rng),
            bias: Param::new(vec![0.0; classes]),
        }
    }

    pub fn params(&self) -> [&Param; 2] {
        [&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> [&mut Param; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn forward(&self, input: Tensor) -> (Tensor, ClassifierCache) {
        let out = pointwise(&input, &self.weight.value, &self.bias.value);
        (out, ClassifierCache { input })
    }

    pub fn backward(&mut self, cache: ClassifierCache, grad: Tensor) -> Tensor {
        let input = &cache.input;
        let mut dinput = Tensor::zeros(self.cin, grad.dims);
        for c in 0..self.classes {
            let g = grad.channel(c);
            self.bias.grad[c] += g.iter().map(|&v| v as f64).sum::<f64>() as f32;
            for i in 0..self.cin {
                self.weight.grad[c * self.cin + i] += dot_f32(g, input.channel(i));
                axpy(dinput.channel_mut(i), self.weight.value[c * self.cin + i], g);
            }
        }
        dinput
    }
}

/// 2x2x2 max pooling; the cache holds the winning input offset per output.
pub fn maxpool(input: &Tensor) -> (Tensor, Vec<u32>) {
    let [nz, ny, nx] = input.dims;
    let dims = [nz / 2, ny / 2, nx / 2];
    let mut out = Tensor::zeros(input.channels, dims);
    let mut argmax = vec![0u32; out.data.len()];
    let mut o = 0;
    for c in 0..input.channels {
        let src = input.channel(c);
        let base = c * input.voxels();
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    let mut best = f32::NEG_INFINITY;
                    let mut at = 0;
                    for dz in 0..2 {
                        for dy in 0..2 {
                            for dx in 0..2 {
                                let i = ((2 * z + dz) * ny + 2 * y + dy) * nx + 2 * x + dx;
                                if src[i] > best {
                                    best = src[i];
                                    at = i;
                                }
                            }
                        }
                    }
                    out.data[o] = best;
                    argmax[o] = (base + at) as u32;
                    o += 1;
                }
            }
        }
    }
    (out, argmax)
}

pub fn maxpool_backward(grad: &Tensor, argmax: &[u32], input_dims: [usize; 3]) -> Tensor {
    let mut dinput = Tensor::zeros(grad.channels, input_dims);
    for (g, &i) in grad.data.iter().zip(argmax) {
        dinput.data[i as usize] += g;
    }
    dinput
}

/// Source taps `(i0, i1, w0, w1)` for doubling an axis of length `n` with
/// half-pixel centres and edge clamping.
fn upsample_taps(n: usize) -> Vec<(usize, usize, f32, f32)> {
    (0..2 * n)
        .map(|o| {
            let src = ((o as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = src.floor() as usize;
            let i1 = (i0 + 1).min(n - 1);
            let t = (src - i0 as f64) as f32;
            (i0, i1, 1.0 - t, t)
        })
        .collect()
}

/// Resamples one axis of a channel-major tensor with the given taps.
fn resample_axis(input: &Tensor, axis: usize, taps: &[(usize, usize, f32, f32)]) -> Tensor {
    let mut dims = input.dims;
    let n_in = dims[axis];
    dims[axis] = taps.len();
    let mut out = Tensor::zeros(input.channels, dims);
    let inner: usize = input.dims[axis + 1..].iter().product();
    let outer = input.channels * input.dims[..axis].iter().product::<usize>();
    for b in 0..outer {
        let src = &input.data[b * n_in * inner..(b + 1) * n_in * inner];
        let dst = &mut out.data[b * taps.len() * inner..(b + 1) * taps.len() * inner];
        for (o, &(i0, i1, w0, w1)) in taps.iter().enumerate() {
            let d = &mut dst[o * inner..(o + 1) * inner];
            let (a, c) = (&src[i0 * inner..(i0 + 1) * inner], &src[i1 * inner..(i1 + 1) * inner]);
            for j in 0..inner {
                d[j] = w0 * a[j] + w1 * c[j];
            }
        }
    }
    out
}

/// Adjoint of [`resample_axis`].
fn resample_axis_adjoint(grad: &Tensor, axis: usize, n_in: usize, taps: &[(usize, usize, f32, f32)]) -> Tensor {
    let mut dims = grad.dims;
    dims[axis] = n_in;
    let mut out = Tensor::zeros(grad.channels, dims);
    let inner: usize = grad.dims[axis + 1..].iter().product();
    let outer = grad.channels * grad.dims[..axis].iter().product::<usize>();
    for b in 0..outer {
        let src = &grad.data[b * taps.len() * inner..(b + 1) * taps.len() * inner];
        let dst = &mut out.data[b * n_in * inner..(b + 1) * n_in * inner];
        for (o, &(i0, i1, w0, w1)) in taps.iter().enumerate() {
            let g = &src[o * inner..(o + 1) * inner];
            for j in 0..inner {
                dst[i0 * inner + j] += w0 * g[j];
                dst[i1 * inner + j] += w1 * g[j];
            }
        }
    }
    out
}

/// Separable trilinear x2 upsampling.
pub fn upsample(input: &Tensor) -> Tensor {
    (0..3).fold(input.clone(), |t, axis| {
        let taps = upsample_taps(t.dims[axis]);
        resample_axis(&t, axis, &taps)
    })
}

pub fn upsample_backward(grad: &Tensor) -> Tensor {
    (0..3).rev().fold(grad.clone(), |g, axis| {
        let n_in = g.dims[axis] / 2;
        resample_axis_adjoint(&g, axis, n_in, &upsample_taps(n_in))
    })
}
