use crate::error::{ensure_finite, Error, Result};

use super::tensor::Tensor;

/// Dot product with four independent accumulators.
#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy_slice(out: &mut [f64], scale: f64, x: &[f64]) {
    for (o, v) in out.iter_mut().zip(x) {
        *o += scale * v;
    }
}

/// Numerically stable softmax (max subtraction).
pub fn softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::InvalidArgument("softmax of an empty vector".into()));
    }
    ensure_finite("softmax input", z)?;
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    Ok(out)
}

pub fn log_softmax(z: &[f64]) -> Result<Vec<f64>> {
    if z.is_empty() {
        return Err(Error::InvalidArgument("log_softmax of an empty vector".into()));
    }
    ensure_finite("log_softmax input", z)?;
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    Ok(z.iter().map(|&v| v - lse).collect())
}

/// Cross-entropy of `logits` against class `target`, with the gradient with
/// respect to the logits (`softmax - onehot`).
pub fn cross_entropy_with_logits(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(Error::DomainOutOfRange {
            id: target,
            domains: logits.len(),
        });
    }
    let logp = log_softmax(logits)?;
    let mut grad: Vec<f64> = logp.iter().map(|v| v.exp()).collect();
    grad[target] -= 1.0;
    Ok((-logp[target], grad))
}

/// Gradient reversal, forward pass: identity.
pub fn grl_forward(x: &Tensor) -> Tensor {
    x.clone()
}

/// Gradient reversal, backward pass: `-beta * upstream`.
pub fn grl_backward(upstream: &Tensor, beta: f64) -> Result<Tensor> {
    if !(beta >= 0.0 && beta.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "GRL coefficient must be finite and nonnegative, got {beta}"
        )));
    }
    let out = upstream.map(|g| -beta * g);
    if !out.is_finite() {
        return Err(Error::NonFinite("GRL gradient".into()));
    }
    Ok(out)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Backward of ReLU given the forward input.
pub fn relu_backward(input: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    upstream.expect_shape(input.shape())?;
    let data = input
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Ok(Tensor::from_raw(input.shape().to_vec(), data))
}

/// Mean over the spatial axes of an `H×W×C` tensor.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let [h, w, c] = hwc(x)?;
    let mut out = vec![0.0; c];
    for px in x.data().chunks_exact(c) {
        axpy_slice(&mut out, 1.0, px);
    }
    let n = (h * w) as f64;
    out.iter_mut().for_each(|v| *v /= n);
    Ok(Tensor::from_raw(vec![c], out))
}

pub fn global_avg_pool_backward(input_shape: &[usize], upstream: &Tensor) -> Result<Tensor> {
    let &[h, w, c] = input_shape else {
        return Err(Error::InvalidArgument(format!(
            "pool input must be H×W×C, got {input_shape:?}"
        )));
    };
    upstream.expect_shape(&[c])?;
    let n = (h * w) as f64;
    let scaled: Vec<f64> = upstream.data().iter().map(|g| g / n).collect();
    let mut data = Vec::with_capacity(h * w * c);
    for _ in 0..h * w {
        data.extend_from_slice(&scaled);
    }
    Ok(Tensor::from_raw(vec![h, w, c], data))
}

fn hwc(x: &Tensor) -> Result<[usize; 3]> {
    match *x.shape() {
        [h, w, c] => Ok([h, w, c]),
        _ => Err(Error::InvalidArgument(format!(
            "expected an H×W×C tensor, got {:?}",
            x.shape()
        ))),
    }
}

/// Fully connected layer `y = W x + b`, weight stored `[out, in]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn new(inputs: usize, outputs: usize) -> Dense {
        Dense { inputs, outputs }
    }

    pub fn weight_shape(&self) -> [usize; 2] {
        [self.outputs, self.inputs]
    }

    pub fn forward(&self, weight: &Tensor, bias: &Tensor, x: &Tensor) -> Result<Tensor> {
        weight.expect_shape(&self.weight_shape())?;
        bias.expect_shape(&[self.outputs])?;
        x.expect_shape(&[self.inputs])?;
        let w = weight.data();
        let y = bias
            .data()
            .iter()
            .enumerate()
            .map(|(o, b)| b + dot(&w[o * self.inputs..(o + 1) * self.inputs], x.data()))
            .collect();
        Ok(Tensor::from_raw(vec![self.outputs], y))
    }

    /// Returns `(dW, db, dx)`.
    pub fn backward(
        &self,
        weight: &Tensor,
        x: &Tensor,
        upstream: &Tensor,
    ) -> Result<(Tensor, Tensor, Tensor)> {
        weight.expect_shape(&self.weight_shape())?;
        x.expect_shape(&[self.inputs])?;
        upstream.expect_shape(&[self.outputs])?;
        let mut dw = vec![0.0; self.outputs * self.inputs];
        let mut dx = vec![0.0; self.inputs];
        for (o, &g) in upstream.data().iter().enumerate() {
            let row = o * self.inputs..(o + 1) * self.inputs;
            axpy_slice(&mut dw[row.clone()], g, x.data());
            axpy_slice(&mut dx, g, &weight.data()[row]);
        }
        Ok((
            Tensor::from_raw(self.weight_shape().to_vec(), dw),
            upstream.clone(),
            Tensor::from_raw(vec![self.inputs], dx),
        ))
    }
}

/// Direct 2-D convolution over `H×W×C` tensors. Weight stored
/// `[out, kernel, kernel, in]` so that one output channel's filter is a
/// contiguous row matching a gathered input patch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    /// 3×3 kernel, stride 2, padding 1.
    pub fn new(in_channels: usize, out_channels: usize) -> Conv2d {
        Conv2d {
            in_channels,
            out_channels,
            kernel: 3,
            stride: 2,
            padding: 1,
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.kernel, self.kernel, self.in_channels]
    }

    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let span = |n: usize| -> Result<usize> {
            let padded = n + 2 * self.padding;
            if padded < self.kernel {
                return Err(Error::InvalidArgument(format!(
                    "input extent {n} too small for kernel {}",
                    self.kernel
                )));
            }
            Ok((padded - self.kernel) / self.stride + 1)
        };
        Ok((span(h)?, span(w)?))
    }

    fn check_input(&self, x: &Tensor) -> Result<[usize; 3]> {
        let [h, w, c] = hwc(x)?;
        if c != self.in_channels {
            return Err(Error::ShapeMismatch {
                expected: vec![h, w, self.in_channels],
                actual: x.shape().to_vec(),
            });
        }
        Ok([h, w, c])
    }

    /// Copies the receptive field of output pixel `(oy, ox)` into `patch`,
    /// zero-filling the padded border.
    fn gather(&self, x: &[f64], h: usize, w: usize, oy: usize, ox: usize, patch: &mut [f64]) {
        let c = self.in_channels;
        let row_len = self.kernel * c;
        for ky in 0..self.kernel {
            let dst = &mut patch[ky * row_len..(ky + 1) * row_len];
            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
            if iy < 0 || iy >= h as isize {
                dst.fill(0.0);
                continue;
            }
            for kx in 0..self.kernel {
                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                let d = &mut dst[kx * c..(kx + 1) * c];
                if ix < 0 || ix >= w as isize {
                    d.fill(0.0);
                } else {
                    let src = (iy as usize * w + ix as usize) * c;
                    d.copy_from_slice(&x[src..src + c]);
                }
            }
        }
    }

    fn scatter(&self, dx: &mut [f64], h: usize, w: usize, oy: usize, ox: usize, dpatch: &[f64]) {
        let c = self.in_channels;
        let row_len = self.kernel * c;
        for ky in 0..self.kernel {
            let iy = (oy * self.stride + ky) as isize - self.padding as isize;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            for kx in 0..self.kernel {
                let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                if ix < 0 || ix >= w as isize {
                    continue;
                }
                let dst = (iy as usize * w + ix as usize) * c;
                let src = ky * row_len + kx * c;
                axpy_slice(&mut dx[dst..dst + c], 1.0, &dpatch[src..src + c]);
            }
        }
    }

    pub fn forward(&self, weight: &Tensor, bias: &Tensor, x: &Tensor) -> Result<Tensor> {
        weight.expect_shape(&self.weight_shape())?;
        bias.expect_shape(&[self.out_channels])?;
        let [h, w, _] = self.check_input(x)?;
        let (oh, ow) = self.output_size(h, w)?;
        let plen = self.patch_len();
        let mut patch = vec![0.0; plen];
        let mut out = Vec::with_capacity(oh * ow * self.out_channels);
        let wd = weight.data();
        for oy in 0..oh {
            for ox in 0..ow {
                self.gather(x.data(), h, w, oy, ox, &mut patch);
                for (oc, b) in bias.data().iter().enumerate() {
                    out.push(b + dot(&wd[oc * plen..(oc + 1) * plen], &patch));
                }
            }
        }
        Ok(Tensor::from_raw(vec![oh, ow, self.out_channels], out))
    }

    /// Returns `(dW, db, dx)`; `dx` is skipped when `need_input_grad` is false.
    pub fn backward(
        &self,
        weight: &Tensor,
        x: &Tensor,
        upstream: &Tensor,
        need_input_grad: bool,
    ) -> Result<(Tensor, Tensor, Option<Tensor>)> {
        weight.expect_shape(&self.weight_shape())?;
        let [h, w, c] = self.check_input(x)?;
        let (oh, ow) = self.output_size(h, w)?;
        upstream.expect_shape(&[oh, ow, self.out_channels])?;
        let plen = self.patch_len();
        let wd = weight.data();
        let mut patch = vec![0.0; plen];
        let mut dpatch = vec![0.0; plen];
        let mut dw = vec![0.0; self.out_channels * plen];
        let mut db = vec![0.0; self.out_channels];
        let mut dx = if need_input_grad {
            vec![0.0; h * w * c]
        } else {
            Vec::new()
        };
        let up = upstream.data();
        for oy in 0..oh {
            for ox in 0..ow {
                let g = &up[(oy * ow + ox) * self.out_channels..][..self.out_channels];
                self.gather(x.data(), h, w, oy, ox, &mut patch);
                if need_input_grad {
                    dpatch.fill(0.0);
                }
                for (oc, &go) in g.iter().enumerate() {
                    if go == 0.0 {
                        continue;
                    }
                    db[oc] += go;
                    let row = oc * plen..(oc + 1) * plen;
                    axpy_slice(&mut dw[row.clone()], go, &patch);
                    if need_input_grad {
                        axpy_slice(&mut dpatch, go, &wd[row]);
                    }
                }
                if need_input_grad {
                    self.scatter(&mut dx, h, w, oy, ox, &dpatch);
                }
            }
        }
        Ok((
            Tensor::from_raw(self.weight_shape().to_vec(), dw),
            Tensor::from_raw(vec![self.out_channels], db),
            need_input_grad.then(|| Tensor::from_raw(vec![h, w, c], dx)),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::{grad_check, ParamSet};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn softmax_examples() {
        let p = softmax(&[0.0, 0.0, 0.0]).unwrap();
        for v in &p {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let p = softmax(&[1000.0, 0.0]).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-12 && p[1].abs() < 1e-12);

        // brute-force exp/sum
        let z = [1.0f64, 2.0, 3.0];
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        let p = softmax(&z).unwrap();
        for (pi, zi) in p.iter().zip(z) {
            assert!((pi - zi.exp() / denom).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rejects_bad_input() {
        assert!(softmax(&[]).is_err());
        assert!(matches!(softmax(&[1.0, f64::INFINITY]), Err(Error::NonFinite(_))));
    }

    #[test]
    fn grl_examples() {
        let g = Tensor::vector(vec![1.0, -2.0]).unwrap();
        assert_eq!(grl_backward(&g, 1.0).unwrap().data(), &[-1.0, 2.0]);
        assert!(grl_backward(&g, 0.0).unwrap().data().iter().all(|v| *v == 0.0));
        assert!(grl_backward(&g, -1.0).is_err());
        assert_eq!(grl_forward(&g), g);
    }

    #[test]
    fn cross_entropy_uniform_is_log_classes() {
        let (loss, grad) = cross_entropy_with_logits(&[0.3; 4], 2).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-15);
        assert!((grad.iter().sum::<f64>()).abs() < 1e-15);
        assert!(cross_entropy_with_logits(&[0.0; 4], 4).is_err());
    }

    #[test]
    fn dense_gradient_matches_closed_form() {
        // y = Wx, L = |y - t|^2  =>  dL/dW = 2 (Wx - t) x^T
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layer = Dense::new(4, 3);
        let w = random_tensor(&[3, 4], &mut rng);
        let x = random_tensor(&[4], &mut rng);
        let t = random_tensor(&[3], &mut rng);
        let b = Tensor::zeros(&[3]);
        let y = layer.forward(&w, &b, &x).unwrap();
        let resid: Vec<f64> = y.data().iter().zip(t.data()).map(|(a, b)| a - b).collect();
        let up = Tensor::new(vec![3], resid.iter().map(|r| 2.0 * r).collect()).unwrap();
        let (dw, _, _) = layer.backward(&w, &x, &up).unwrap();
        for (o, r) in resid.iter().enumerate() {
            for i in 0..4 {
                let closed = 2.0 * r * x.data()[i];
                assert!((dw.data()[o * 4 + i] - closed).abs() < 1e-14);
            }
        }
    }

    fn check_layer<F>(params: ParamSet, f: F)
    where
        F: Fn(&ParamSet) -> Result<(f64, ParamSet)>,
    {
        let report = grad_check(f, &params, 1e-4).unwrap();
        assert!(report.max_rel_error <= 1e-3, "{report:?}");
    }

    /// Random linear read-out of an output tensor turns any layer into a
    /// scalar function for gradient checking.
    fn readout(y: &Tensor, probe: &Tensor) -> f64 {
        dot(y.data(), probe.data())
    }

    #[test]
    fn dense_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let layer = Dense::new(5, 3);
        let probe = random_tensor(&[3], &mut rng);
        let mut p = ParamSet::new();
        p.insert("w", random_tensor(&[3, 5], &mut rng)).unwrap();
        p.insert("b", random_tensor(&[3], &mut rng)).unwrap();
        p.insert("x", random_tensor(&[5], &mut rng)).unwrap();
        check_layer(p, |p| {
            let (w, b, x) = (p.get("w")?, p.get("b")?, p.get("x")?);
            let y = layer.forward(w, b, x)?;
            let (dw, db, dx) = layer.backward(w, x, &probe)?;
            let mut g = ParamSet::new();
            g.insert("w", dw)?;
            g.insert("b", db)?;
            g.insert("x", dx)?;
            Ok((readout(&y, &probe), g))
        });
    }

    #[test]
    fn conv_grad_check_randomized_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for &(h, w, cin, cout) in &[(5, 6, 2, 3), (8, 8, 3, 4), (1, 1, 1, 2), (7, 4, 3, 2)] {
            let layer = Conv2d::new(cin, cout);
            let (oh, ow) = layer.output_size(h, w).unwrap();
            let probe = random_tensor(&[oh, ow, cout], &mut rng);
            let mut p = ParamSet::new();
            p.insert("w", random_tensor(&layer.weight_shape(), &mut rng)).unwrap();
            p.insert("b", random_tensor(&[cout], &mut rng)).unwrap();
            p.insert("x", random_tensor(&[h, w, cin], &mut rng)).unwrap();
            check_layer(p, |p| {
                let (wt, b, x) = (p.get("w")?, p.get("b")?, p.get("x")?);
                let y = layer.forward(wt, b, x)?;
                let (dw, db, dx) = layer.backward(wt, x, &probe, true)?;
                let mut g = ParamSet::new();
                g.insert("w", dw)?;
                g.insert("b", db)?;
                g.insert("x", dx.unwrap())?;
                Ok((readout(&y, &probe), g))
            });
        }
    }

    #[test]
    fn conv_output_geometry() {
        let c = Conv2d::new(3, 8);
        assert_eq!(c.output_size(64, 64).unwrap(), (32, 32));
        assert_eq!(c.output_size(7, 5).unwrap(), (4, 3));
        assert_eq!(c.output_size(1, 1).unwrap(), (1, 1));
    }

    #[test]
    fn conv_matches_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let layer = Conv2d::new(2, 3);
        let w = random_tensor(&layer.weight_shape(), &mut rng);
        let b = random_tensor(&[3], &mut rng);
        let x = random_tensor(&[6, 5, 2], &mut rng);
        let y = layer.forward(&w, &b, &x).unwrap();
        let (oh, ow) = layer.output_size(6, 5).unwrap();
        for oy in 0..oh {
            for ox in 0..ow {
                for oc in 0..3 {
                    let mut acc = b.data()[oc];
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let iy = (2 * oy + ky) as isize - 1;
                            let ix = (2 * ox + kx) as isize - 1;
                            if iy < 0 || ix < 0 || iy >= 6 || ix >= 5 {
                                continue;
                            }
                            for ic in 0..2 {
                                acc += w.data()[((oc * 3 + ky) * 3 + kx) * 2 + ic]
                                    * x.data()[((iy as usize) * 5 + ix as usize) * 2 + ic];
                            }
                        }
                    }
                    let got = y.data()[(oy * ow + ox) * 3 + oc];
                    assert!((got - acc).abs() < 1e-13);
                }
            }
        }
    }

    #[test]
    fn relu_and_pool_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let probe = random_tensor(&[3], &mut rng);
        let mut p = ParamSet::new();
        // keep inputs away from the ReLU kink
        let x = random_tensor(&[4, 3, 3], &mut rng).map(|v| if v.abs() < 0.05 { 0.3 } else { v });
        p.insert("x", x).unwrap();
        check_layer(p, |p| {
            let x = p.get("x")?;
            let a = relu(x);
            let y = global_avg_pool(&a)?;
            let dy = global_avg_pool_backward(a.shape(), &probe)?;
            let dx = relu_backward(x, &dy)?;
            let mut g = ParamSet::new();
            g.insert("x", dx)?;
            Ok((readout(&y, &probe), g))
        });
    }

    #[test]
    fn cross_entropy_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = ParamSet::new();
        p.insert("z", random_tensor(&[5], &mut rng)).unwrap();
        check_layer(p, |p| {
            let (l, g) = cross_entropy_with_logits(p.get("z")?.data(), 3)?;
            let mut gs = ParamSet::new();
            gs.insert("z", Tensor::vector(g)?)?;
            Ok((l, gs))
        });
    }
}
